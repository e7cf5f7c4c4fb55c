use std::fs::File;
use std::hash::Hasher;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fnv::FnvHasher;
use serde::Serialize;

/// 64-bit FNV-1a of a file's bytes.
pub fn fnv1a_file(path: &Path) -> io::Result<u64> {
    let mut f = File::open(path)?;
    let mut h = FnvHasher::default();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.write(&buf[..n]);
    }
    Ok(h.finish())
}

pub fn fnv1a_bytes(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub fnv1a64: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, started_unix_s: u64) -> Self {
        let config_hash = format!("{:016x}", fnv1a_bytes(config.to_string().as_bytes()));
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            config_hash,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix_s,
            finished_unix_s: started_unix_s,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> io::Result<()> {
        let digest = fnv1a_file(path)?;
        self.inputs.push(InputDigest { path: path.to_path_buf(), fnv1a64: format!("{digest:016x}") });
        Ok(())
    }

    pub fn write(mut self, path: &Path) -> io::Result<()> {
        self.finished_unix_s = unix_now();
        self.outputs.push(path.to_path_buf());
        let json = serde_json::to_string_pretty(&self).map_err(io::Error::other)?;
        std::fs::write(path, json + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a_reference_values() {
        assert_eq!(fnv1a_bytes(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a_bytes(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a_bytes(b"foobar"), 0x85944171f73967e8);
    }
}

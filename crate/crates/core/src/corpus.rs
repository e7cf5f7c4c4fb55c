//! Feature matrices, threshold tokenization and the on-disk corpus format.
//!
//! A [`FeatureMatrix`] is one dense score vector per image (for example the
//! 1000 logits of an ImageNet classifier). [`threshold_tokenize`] turns each
//! row into a bag of visual words by keeping the dimensions whose score is
//! above a threshold, producing a [`TokenizedCorpus`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const FMX_MAGIC: &[u8; 4] = b"FMX1";

/// Encoding of a feature matrix on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Text,
    Binary,
}

/// Dense `n_docs x n_dims` activation scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_docs: usize,
    n_dims: usize,
    values: Vec<f32>,
    doc_ids: Vec<String>,
    categories: Vec<Option<String>>,
}

impl FeatureMatrix {
    /// Builds a validated matrix. Row numbers in errors are 1-based.
    pub fn new(n_dims: usize, values: Vec<f32>, doc_ids: Vec<String>, categories: Vec<Option<String>>) -> Result<Self> {
        let n_docs = doc_ids.len();
        if categories.len() != n_docs {
            return Err(Error::InvalidInput(format!("{} category entries for {} documents", categories.len(), n_docs)));
        }
        if values.len() != n_docs * n_dims {
            return Err(Error::InvalidInput(format!("{} values for a {}x{} matrix", values.len(), n_docs, n_dims)));
        }
        if n_dims > 0 {
            for (row, chunk) in values.chunks_exact(n_dims).enumerate() {
                if let Some(col) = chunk.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { row: row + 1, col: col + 1 });
                }
            }
        }
        let mut seen = HashSet::with_capacity(n_docs);
        for (row, id) in doc_ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateDocId { row: row + 1, id: id.clone() });
            }
        }
        Ok(FeatureMatrix { n_docs, n_dims, values, doc_ids, categories })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_dims..(i + 1) * self.n_dims]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn categories(&self) -> &[Option<String>] {
        &self.categories
    }

    fn has_category(&self) -> bool {
        self.categories.iter().any(Option::is_some)
    }
}

pub fn load_feature_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<FeatureMatrix> {
    let file = File::open(path)?;
    match format {
        MatrixFormat::Text => read_matrix_text(BufReader::new(file)),
        MatrixFormat::Binary => read_matrix_binary(BufReader::new(file)),
    }
}

pub fn save_feature_matrix(m: &FeatureMatrix, path: impl AsRef<Path>, format: MatrixFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        MatrixFormat::Text => write_matrix_text(m, &mut w)?,
        MatrixFormat::Binary => write_matrix_binary(m, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

/// Text layout: `N V` header, then `doc_id,v1,...,vV[,category]` per row.
pub fn read_matrix_text<R: BufRead>(reader: R) -> Result<FeatureMatrix> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::MalformedHeader("missing header line".into()))??;
    let mut parts = header.split_whitespace();
    let (n_docs, n_dims) = match (parts.next(), parts.next(), parts.next()) {
        (Some(n), Some(v), None) => {
            let n = n.parse::<usize>().map_err(|_| Error::MalformedHeader(format!("bad row count {n:?}")))?;
            let v = v.parse::<usize>().map_err(|_| Error::MalformedHeader(format!("bad dimension {v:?}")))?;
            (n, v)
        }
        _ => return Err(Error::MalformedHeader(format!("expected `N V`, got {header:?}"))),
    };

    let mut values = Vec::with_capacity(n_docs * n_dims);
    let mut doc_ids = Vec::with_capacity(n_docs);
    let mut categories = Vec::with_capacity(n_docs);
    let mut row = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        if row > n_docs {
            return Err(Error::MalformedRow { row, msg: format!("header declares {n_docs} rows") });
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        let n_values = fields.len().saturating_sub(1);
        // a trailing numeric field is an extra value, never a category
        let category = if fields.len() == n_dims + 2 && fields[n_dims + 1].trim().parse::<f64>().is_err() {
            Some(fields[n_dims + 1].to_string())
        } else if fields.len() == n_dims + 1 {
            None
        } else {
            return Err(Error::DimensionMismatch { row, expected: n_dims, found: n_values });
        };
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(Error::MalformedRow { row, msg: "empty doc_id".into() });
        }
        for (col, field) in fields[1..=n_dims].iter().enumerate() {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| Error::MalformedRow { row, msg: format!("column {}: cannot parse {field:?}", col + 1) })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col: col + 1 });
            }
            values.push(v);
        }
        doc_ids.push(id.to_string());
        categories.push(category);
    }
    if row != n_docs {
        return Err(Error::MalformedRow {
            row: row + 1,
            msg: format!("header declares {n_docs} rows, file has {row}"),
        });
    }
    FeatureMatrix::new(n_dims, values, doc_ids, categories)
}

pub fn write_matrix_text<W: Write>(m: &FeatureMatrix, w: &mut W) -> Result<()> {
    writeln!(w, "{} {}", m.n_docs, m.n_dims)?;
    for i in 0..m.n_docs {
        write!(w, "{}", m.doc_ids[i])?;
        for v in m.row(i) {
            write!(w, ",{v}")?;
        }
        if let Some(cat) = &m.categories[i] {
            write!(w, ",{cat}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn read_exact_array<R: Read, const N: usize>(r: &mut R, what: &str, row: usize) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::MalformedRow { row, msg: format!("truncated {what}: {e}") })?;
    Ok(buf)
}

fn read_string<R: Read>(r: &mut R, what: &str, row: usize) -> Result<String> {
    let len = u16::from_le_bytes(read_exact_array::<_, 2>(r, what, row)?) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::MalformedRow { row, msg: format!("truncated {what}: {e}") })?;
    String::from_utf8(buf).map_err(|_| Error::MalformedRow { row, msg: format!("{what} is not UTF-8") })
}

/// Binary layout: `FMX1`, u64 N, u64 V, u8 has_category, then per row a
/// u16-prefixed id, an optional u16-prefixed category and V f32 values.
/// All integers and floats are little-endian.
pub fn read_matrix_binary<R: Read>(mut r: R) -> Result<FeatureMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::MalformedHeader("truncated magic".into()))?;
    if &magic != FMX_MAGIC {
        return Err(Error::MalformedHeader(format!("bad magic {magic:?}")));
    }
    let mut head = [0u8; 17];
    r.read_exact(&mut head).map_err(|_| Error::MalformedHeader("truncated header".into()))?;
    let n_docs = u64::from_le_bytes(head[0..8].try_into().unwrap()) as usize;
    let n_dims = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let has_category = match head[16] {
        0 => false,
        1 => true,
        b => return Err(Error::MalformedHeader(format!("bad category flag {b}"))),
    };

    let mut values = Vec::with_capacity(n_docs.saturating_mul(n_dims).min(1 << 28));
    let mut doc_ids = Vec::with_capacity(n_docs.min(1 << 24));
    let mut categories = Vec::with_capacity(n_docs.min(1 << 24));
    let mut row_bytes = vec![0u8; n_dims * 4];
    for row in 1..=n_docs {
        doc_ids.push(read_string(&mut r, "doc_id", row)?);
        if has_category {
            let cat = read_string(&mut r, "category", row)?;
            categories.push(if cat.is_empty() { None } else { Some(cat) });
        } else {
            categories.push(None);
        }
        r.read_exact(&mut row_bytes).map_err(|_| Error::DimensionMismatch { row, expected: n_dims, found: 0 })?;
        for (col, b) in row_bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(b.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col: col + 1 });
            }
            values.push(v);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::MalformedRow {
            row: n_docs + 1,
            msg: format!("trailing data after {n_docs} declared rows"),
        });
    }
    FeatureMatrix::new(n_dims, values, doc_ids, categories)
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::InvalidInput(format!("string longer than 65535 bytes: {s:.32}...")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_matrix_binary<W: Write>(m: &FeatureMatrix, w: &mut W) -> Result<()> {
    let has_category = m.has_category();
    w.write_all(FMX_MAGIC)?;
    w.write_all(&(m.n_docs as u64).to_le_bytes())?;
    w.write_all(&(m.n_dims as u64).to_le_bytes())?;
    w.write_all(&[has_category as u8])?;
    for i in 0..m.n_docs {
        write_string(w, &m.doc_ids[i])?;
        if has_category {
            write_string(w, m.categories[i].as_deref().unwrap_or(""))?;
        }
        for v in m.row(i) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Bag-of-words documents over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCorpus {
    vocab_size: usize,
    docs: Vec<Vec<u32>>,
    doc_ids: Vec<String>,
    categories: Vec<Option<String>>,
}

impl TokenizedCorpus {
    pub fn new(
        vocab_size: usize,
        docs: Vec<Vec<u32>>,
        doc_ids: Vec<String>,
        categories: Vec<Option<String>>,
    ) -> Result<Self> {
        if docs.len() != doc_ids.len() || docs.len() != categories.len() {
            return Err(Error::InvalidInput(format!(
                "{} docs, {} ids, {} categories",
                docs.len(),
                doc_ids.len(),
                categories.len()
            )));
        }
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for (i, doc) in docs.iter().enumerate() {
            if doc.is_empty() {
                return Err(Error::InvalidInput(format!("document {:?} is empty", doc_ids[i])));
            }
            if let Some(&t) = doc.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::TokenOutOfRange { line: i + 1, token: t as u64, vocab_size });
            }
        }
        Ok(TokenizedCorpus { vocab_size, docs, doc_ids, categories })
    }

    /// Convenience constructor with generated ids and no categories.
    pub fn from_docs(vocab_size: usize, docs: Vec<Vec<u32>>) -> Result<Self> {
        let ids = (0..docs.len()).map(|i| format!("doc{i}")).collect();
        let cats = vec![None; docs.len()];
        Self::new(vocab_size, docs, ids, cats)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn n_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn docs(&self) -> &[Vec<u32>] {
        &self.docs
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn categories(&self) -> &[Option<String>] {
        &self.categories
    }

    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Each passing dimension is emitted once.
    Binary,
    /// Passing dimensions are repeated in proportion to how far they clear
    /// the threshold, up to `max_repeats`.
    Proportional,
}

#[derive(Debug, Clone, Copy)]
pub struct TokenizeOptions {
    /// Strict lower bound on kept scores. `f64::NEG_INFINITY` keeps everything.
    pub threshold: f64,
    pub weighting: Weighting,
    pub max_repeats: u32,
}

impl Default for TokenizeOptions {
    fn default() -> Self {
        TokenizeOptions { threshold: 0.0, weighting: Weighting::Binary, max_repeats: 8 }
    }
}

/// Rows that produced no tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DroppedReport {
    /// `(row index in the source matrix, doc_id)`
    pub rows: Vec<(usize, String)>,
}

impl DroppedReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "row,doc_id")?;
        for (row, id) in &self.rows {
            writeln!(w, "{row},{id}")?;
        }
        Ok(())
    }
}

fn repeats(value: f64, threshold: f64, row_max: f64, max_repeats: u32) -> u32 {
    let span = row_max - threshold;
    if !(span.is_finite() && span > 0.0) {
        return 1;
    }
    let r = (max_repeats as f64 * (value - threshold) / span).ceil();
    r.clamp(1.0, max_repeats as f64) as u32
}

pub fn threshold_tokenize(m: &FeatureMatrix, opts: &TokenizeOptions) -> Result<(TokenizedCorpus, DroppedReport)> {
    if opts.max_repeats < 1 {
        return Err(Error::InvalidConfig("max_repeats must be at least 1".into()));
    }
    if opts.threshold.is_nan() {
        return Err(Error::InvalidConfig("threshold is NaN".into()));
    }
    let t = opts.threshold;
    let mut docs = Vec::new();
    let mut ids = Vec::new();
    let mut cats = Vec::new();
    let mut dropped = DroppedReport::default();

    for i in 0..m.n_docs() {
        let row = m.row(i);
        let mut doc = Vec::new();
        match opts.weighting {
            Weighting::Binary => {
                doc.extend(row.iter().enumerate().filter(|(_, &v)| v as f64 > t).map(|(j, _)| j as u32));
            }
            Weighting::Proportional => {
                let passing: Vec<(usize, f64)> =
                    row.iter().enumerate().map(|(j, &v)| (j, v as f64)).filter(|&(_, v)| v > t).collect();
                let row_max = passing.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
                let row_min = passing.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                let degenerate = row_max == row_min;
                for (j, v) in passing {
                    let r = if degenerate { 1 } else { repeats(v, t, row_max, opts.max_repeats) };
                    doc.extend(std::iter::repeat_n(j as u32, r as usize));
                }
            }
        }
        if doc.is_empty() {
            dropped.rows.push((i, m.doc_ids()[i].clone()));
        } else {
            docs.push(doc);
            ids.push(m.doc_ids()[i].clone());
            cats.push(m.categories()[i].clone());
        }
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok((TokenizedCorpus::new(m.n_dims(), docs, ids, cats)?, dropped))
}

pub fn save_corpus(c: &TokenizedCorpus, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus(c, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<TokenizedCorpus> {
    read_corpus(BufReader::new(File::open(path)?))
}

/// Layout: `#vocab V`, then `doc_id<TAB>[category<TAB>]t1 t2 ...` per document.
pub fn write_corpus<W: Write>(c: &TokenizedCorpus, w: &mut W) -> Result<()> {
    writeln!(w, "#vocab {}", c.vocab_size)?;
    for ((id, cat), doc) in c.doc_ids.iter().zip(&c.categories).zip(&c.docs) {
        write!(w, "{id}\t")?;
        if let Some(cat) = cat {
            write!(w, "{cat}\t")?;
        }
        let mut first = true;
        for t in doc {
            if !first {
                w.write_all(b" ")?;
            }
            first = false;
            write!(w, "{t}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Line numbers in errors are 1-based file lines.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<TokenizedCorpus> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::MalformedHeader("missing #vocab line".into()))??;
    let vocab_size = header
        .strip_prefix("#vocab ")
        .and_then(|v| v.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::MalformedHeader(format!("expected `#vocab V`, got {header:?}")))?;

    let mut docs = Vec::new();
    let mut ids = Vec::new();
    let mut cats = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (id, cat, tokens) = match fields.as_slice() {
            [id, tokens] => (*id, None, *tokens),
            [id, cat, tokens] => (*id, Some(cat.to_string()), *tokens),
            _ => {
                return Err(Error::MalformedRow {
                    row: line_no,
                    msg: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
                })
            }
        };
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateDocId { row: line_no, id: id.to_string() });
        }
        let mut doc = Vec::new();
        for tok in tokens.split_ascii_whitespace() {
            let t: u64 =
                tok.parse().map_err(|_| Error::MalformedRow { row: line_no, msg: format!("bad token {tok:?}") })?;
            if t >= vocab_size as u64 {
                return Err(Error::TokenOutOfRange { line: line_no, token: t, vocab_size });
            }
            doc.push(t as u32);
        }
        if doc.is_empty() {
            return Err(Error::MalformedRow { row: line_no, msg: "empty document".into() });
        }
        docs.push(doc);
        ids.push(id.to_string());
        cats.push(cat);
    }
    TokenizedCorpus::new(vocab_size, docs, ids, cats)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub vocab_size: usize,
    pub total_tokens: usize,
    /// document length -> number of documents with that length
    pub tokens_per_doc_histogram: BTreeMap<usize, usize>,
    pub distinct_words_used: usize,
}

pub fn corpus_stats(c: &TokenizedCorpus) -> CorpusStats {
    let mut hist = BTreeMap::new();
    let mut used = vec![false; c.vocab_size];
    for doc in &c.docs {
        *hist.entry(doc.len()).or_insert(0) += 1;
        for &t in doc {
            used[t as usize] = true;
        }
    }
    CorpusStats {
        n_docs: c.n_docs(),
        vocab_size: c.vocab_size,
        total_tokens: c.total_tokens(),
        tokens_per_doc_histogram: hist,
        distinct_words_used: used.iter().filter(|&&u| u).count(),
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let min = self.tokens_per_doc_histogram.keys().next().copied().unwrap_or(0);
        let max = self.tokens_per_doc_histogram.keys().next_back().copied().unwrap_or(0);
        write!(
            f,
            "n_docs={} vocab_size={} total_tokens={} distinct_words_used={} min_doc_len={} max_doc_len={}",
            self.n_docs, self.vocab_size, self.total_tokens, self.distinct_words_used, min, max
        )
    }
}

//! Sequential collapsed Gibbs sampling for LDA.
//!
//! The state keeps one topic id per token plus the tallies the conditional
//! needs: document-topic counts, word-topic counts (stored word-major so the
//! counts for one word are contiguous) and per-topic totals. The per-token
//! kernel [`resample_token`] is shared with the parallel sampler so that a
//! single-worker parallel run follows exactly the same arithmetic.

use std::fmt;
use std::io::{Read, Write};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

use crate::corpus::TokenizedCorpus;
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"LDZ1";

/// Largest supported number of topics (assignments are stored as `u16`).
pub const MAX_TOPICS: usize = u16::MAX as usize + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LdaConfig {
    pub n_topics: usize,
    /// Symmetric document-topic concentration.
    pub alpha: f64,
    /// Symmetric topic-word concentration.
    pub beta: f64,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl LdaConfig {
    /// `alpha = 50 / Z`, `beta = 0.01`, 1000 iterations with 200 burn-in.
    pub fn with_topics(n_topics: usize) -> Self {
        LdaConfig {
            n_topics,
            alpha: 50.0 / n_topics.max(1) as f64,
            beta: 0.01,
            n_iterations: 1000,
            burn_in: 200,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_topics < 1 || self.n_topics > MAX_TOPICS {
            return Err(Error::InvalidConfig(format!("n_topics must be in 1..={MAX_TOPICS}, got {}", self.n_topics)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        if self.n_iterations > 0 && self.burn_in >= self.n_iterations {
            return Err(Error::InvalidConfig(format!(
                "burn_in ({}) must be less than n_iterations ({})",
                self.burn_in, self.n_iterations
            )));
        }
        Ok(())
    }
}

/// Generator for worker `stream` of a run seeded with `seed`. Stream 0 is the
/// one the sequential sampler uses.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Constants of the conditional shared by every token.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Priors {
    pub alpha: f64,
    pub beta: f64,
    pub vocab_beta: f64,
}

impl Priors {
    pub fn new(cfg: &LdaConfig, vocab_size: usize) -> Self {
        Priors { alpha: cfg.alpha, beta: cfg.beta, vocab_beta: vocab_size as f64 * cfg.beta }
    }
}

#[inline]
fn decrement(v: &mut u32, table: &'static str, index: usize) -> Result<()> {
    *v = v.checked_sub(1).ok_or(Error::CountUnderflow { table, index })?;
    Ok(())
}

/// Unnormalized conditional with the per-document denominator dropped:
/// `(alpha + n_dk) (beta + n_wk) / (W beta + n_k)`.
#[inline]
pub(crate) fn fill_weights(doc_row: &[u32], word_row: &[u32], totals: &[u32], p: Priors, out: &mut [f64]) {
    for (k, w) in out.iter_mut().enumerate() {
        *w = (p.alpha + doc_row[k] as f64) * (p.beta + word_row[k] as f64) / (p.vocab_beta + totals[k] as f64);
    }
}

/// Removes `old` from the three tables, draws a new topic from the
/// conditional and adds it back. `cumulative` is scratch space of length Z.
#[inline]
pub(crate) fn resample_token<R: Rng>(
    doc_row: &mut [u32],
    word_row: &mut [u32],
    totals: &mut [u32],
    old: u16,
    p: Priors,
    rng: &mut R,
    cumulative: &mut [f64],
) -> Result<u16> {
    let old = old as usize;
    decrement(&mut doc_row[old], "doc_topic", old)?;
    decrement(&mut word_row[old], "topic_word", old)?;
    decrement(&mut totals[old], "topic_total", old)?;

    let mut sum = 0.0;
    for k in 0..cumulative.len() {
        sum += (p.alpha + doc_row[k] as f64) * (p.beta + word_row[k] as f64) / (p.vocab_beta + totals[k] as f64);
        cumulative[k] = sum;
    }
    let u = rng.random::<f64>() * sum;
    let new = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);

    doc_row[new] += 1;
    word_row[new] += 1;
    totals[new] += 1;
    Ok(new as u16)
}

/// Count tables derived from a topic assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTables {
    /// `M x Z`, row-major.
    pub doc_topic: Vec<u32>,
    /// `W x Z`, word-major.
    pub word_topic: Vec<u32>,
    pub topic_total: Vec<u32>,
}

impl CountTables {
    fn tally(n_topics: usize, vocab_size: usize, words: &[u32], doc_offsets: &[usize], assignments: &[u16]) -> Self {
        let n_docs = doc_offsets.len() - 1;
        let mut t = CountTables {
            doc_topic: vec![0; n_docs * n_topics],
            word_topic: vec![0; vocab_size * n_topics],
            topic_total: vec![0; n_topics],
        };
        for m in 0..n_docs {
            for i in doc_offsets[m]..doc_offsets[m + 1] {
                let k = assignments[i] as usize;
                t.doc_topic[m * n_topics + k] += 1;
                t.word_topic[words[i] as usize * n_topics + k] += 1;
                t.topic_total[k] += 1;
            }
        }
        t
    }
}

/// Topic assignments and the count tables that tally them.
#[derive(Debug, Clone)]
pub struct SamplerState {
    n_topics: usize,
    vocab_size: usize,
    words: Vec<u32>,
    doc_offsets: Vec<usize>,
    pub(crate) assignments: Vec<u16>,
    pub(crate) tables: CountTables,
    pub(crate) rng: ChaCha8Rng,
}

impl SamplerState {
    /// Draws every token's topic uniformly from `[0, Z)` using `cfg.seed`.
    pub fn init(corpus: &TokenizedCorpus, cfg: &LdaConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, 0);
        let (words, doc_offsets) = flatten(corpus);
        let z = cfg.n_topics;
        let assignments: Vec<u16> = words.iter().map(|_| rng.random_range(0..z) as u16).collect();
        let tables = CountTables::tally(z, corpus.vocab_size(), &words, &doc_offsets, &assignments);
        Ok(SamplerState { n_topics: z, vocab_size: corpus.vocab_size(), words, doc_offsets, assignments, tables, rng })
    }

    /// Rebuilds a state from saved assignments (for example a checkpoint).
    /// The generator restarts from `cfg.seed`.
    pub fn from_assignments(corpus: &TokenizedCorpus, cfg: &LdaConfig, assignments: Vec<u16>) -> Result<Self> {
        cfg.validate()?;
        let (words, doc_offsets) = flatten(corpus);
        if assignments.len() != words.len() {
            return Err(Error::InvalidInput(format!(
                "{} assignments for a corpus of {} tokens",
                assignments.len(),
                words.len()
            )));
        }
        if let Some(&k) = assignments.iter().find(|&&k| k as usize >= cfg.n_topics) {
            return Err(Error::InvalidInput(format!("topic {k} out of range for {} topics", cfg.n_topics)));
        }
        let tables = CountTables::tally(cfg.n_topics, corpus.vocab_size(), &words, &doc_offsets, &assignments);
        Ok(SamplerState {
            n_topics: cfg.n_topics,
            vocab_size: corpus.vocab_size(),
            words,
            doc_offsets,
            assignments,
            tables,
            rng: stream_rng(cfg.seed, 0),
        })
    }

    pub fn n_topics(&self) -> usize {
        self.n_topics
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn n_docs(&self) -> usize {
        self.doc_offsets.len() - 1
    }

    pub fn n_tokens(&self) -> usize {
        self.words.len()
    }

    pub(crate) fn words(&self) -> &[u32] {
        &self.words
    }

    pub(crate) fn doc_offsets(&self) -> &[usize] {
        &self.doc_offsets
    }

    /// Flat assignments, document after document.
    pub fn assignments(&self) -> &[u16] {
        &self.assignments
    }

    pub fn doc_assignments(&self, m: usize) -> &[u16] {
        &self.assignments[self.doc_offsets[m]..self.doc_offsets[m + 1]]
    }

    pub fn doc_total(&self, m: usize) -> usize {
        self.doc_offsets[m + 1] - self.doc_offsets[m]
    }

    /// `C[k, m, *]`
    pub fn doc_topic(&self, m: usize, k: usize) -> u32 {
        self.tables.doc_topic[m * self.n_topics + k]
    }

    /// `C[k, *, w]`
    pub fn topic_word(&self, k: usize, w: usize) -> u32 {
        self.tables.word_topic[w * self.n_topics + k]
    }

    /// `C[k, *, *]`
    pub fn topic_total(&self, k: usize) -> u32 {
        self.tables.topic_total[k]
    }

    pub fn tables(&self) -> &CountTables {
        &self.tables
    }

    /// Tallies the tables from the assignments alone.
    pub fn retally(&self) -> CountTables {
        CountTables::tally(self.n_topics, self.vocab_size, &self.words, &self.doc_offsets, &self.assignments)
    }

    /// Fails unless the maintained tables equal a fresh tally of `z`.
    pub fn check_consistency(&self) -> Result<()> {
        let fresh = self.retally();
        let compare = |name: &str, a: &[u32], b: &[u32]| -> Result<()> {
            match a.iter().zip(b).position(|(x, y)| x != y) {
                None => Ok(()),
                Some(i) => {
                    Err(Error::Reconciliation(format!("{name}[{i}] is {} but the assignments tally {}", a[i], b[i])))
                }
            }
        };
        compare("doc_topic", &self.tables.doc_topic, &fresh.doc_topic)?;
        compare("topic_word", &self.tables.word_topic, &fresh.word_topic)?;
        compare("topic_total", &self.tables.topic_total, &fresh.topic_total)?;
        let total: u64 = self.tables.topic_total.iter().map(|&c| c as u64).sum();
        if total != self.words.len() as u64 {
            return Err(Error::Reconciliation(format!(
                "topic totals sum to {total}, corpus has {} tokens",
                self.words.len()
            )));
        }
        Ok(())
    }

    /// Removes token `(m, n)` from the tables and returns its topic.
    pub fn exclude_token(&mut self, m: usize, n: usize) -> Result<u16> {
        let z = self.n_topics;
        let i = self.doc_offsets[m] + n;
        let k = self.assignments[i] as usize;
        let w = self.words[i] as usize;
        decrement(&mut self.tables.doc_topic[m * z + k], "doc_topic", m * z + k)?;
        decrement(&mut self.tables.word_topic[w * z + k], "topic_word", w * z + k)?;
        decrement(&mut self.tables.topic_total[k], "topic_total", k)?;
        Ok(k as u16)
    }

    /// Assigns token `(m, n)` to topic `k` and adds it to the tables.
    pub fn include_token(&mut self, m: usize, n: usize, k: u16) {
        let z = self.n_topics;
        let i = self.doc_offsets[m] + n;
        let w = self.words[i] as usize;
        let k = k as usize;
        self.assignments[i] = k as u16;
        self.tables.doc_topic[m * z + k] += 1;
        self.tables.word_topic[w * z + k] += 1;
        self.tables.topic_total[k] += 1;
    }

    /// Unnormalized conditional for token `(m, n)`, which must already be
    /// excluded from the tables.
    pub fn conditional_weights(&self, cfg: &LdaConfig, m: usize, n: usize) -> Vec<f64> {
        let z = self.n_topics;
        let w = self.words[self.doc_offsets[m] + n] as usize;
        let mut out = vec![0.0; z];
        fill_weights(
            &self.tables.doc_topic[m * z..(m + 1) * z],
            &self.tables.word_topic[w * z..(w + 1) * z],
            &self.tables.topic_total,
            Priors::new(cfg, self.vocab_size),
            &mut out,
        );
        out
    }

    /// The conditional including the document-constant factor
    /// `1 / (Z alpha + C[*, m, *])`. Token `(m, n)` must be excluded.
    pub fn full_conditional_weights(&self, cfg: &LdaConfig, m: usize, n: usize) -> Vec<f64> {
        let doc_len_excluded = self.doc_total(m) as f64 - 1.0;
        let norm = self.n_topics as f64 * cfg.alpha + doc_len_excluded;
        let mut out = self.conditional_weights(cfg, m, n);
        for w in &mut out {
            *w /= norm;
        }
        out
    }

    /// One sweep over every token, documents in order and tokens in order
    /// within each document.
    pub fn gibbs_iteration(&mut self, cfg: &LdaConfig) -> Result<()> {
        let z = self.n_topics;
        let priors = Priors::new(cfg, self.vocab_size);
        let mut cumulative = vec![0.0; z];
        let CountTables { doc_topic, word_topic, topic_total } = &mut self.tables;
        for m in 0..self.doc_offsets.len() - 1 {
            let doc_row = &mut doc_topic[m * z..(m + 1) * z];
            for i in self.doc_offsets[m]..self.doc_offsets[m + 1] {
                let w = self.words[i] as usize;
                self.assignments[i] = resample_token(
                    doc_row,
                    &mut word_topic[w * z..(w + 1) * z],
                    topic_total,
                    self.assignments[i],
                    priors,
                    &mut self.rng,
                    &mut cumulative,
                )?;
            }
        }
        Ok(())
    }
}

fn flatten(corpus: &TokenizedCorpus) -> (Vec<u32>, Vec<usize>) {
    let mut words = Vec::with_capacity(corpus.total_tokens());
    let mut offsets = Vec::with_capacity(corpus.n_docs() + 1);
    offsets.push(0);
    for doc in corpus.docs() {
        words.extend_from_slice(doc);
        offsets.push(words.len());
    }
    (words, offsets)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationTrace {
    /// 1-based.
    pub iteration: usize,
    /// Wall-clock time of the sweep alone.
    pub duration_ms: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceLog {
    pub iterations: Vec<IterationTrace>,
}

impl TraceLog {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn durations_ms(&self) -> Vec<f64> {
        self.iterations.iter().map(|t| t.duration_ms).collect()
    }

    pub fn log_likelihoods(&self) -> Vec<f64> {
        self.iterations.iter().map(|t| t.log_likelihood).collect()
    }

    /// CSV `iteration,duration_ms,log_likelihood`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "iteration,duration_ms,log_likelihood")?;
        for t in &self.iterations {
            writeln!(w, "{},{:.3},{}", t.iteration, t.duration_ms, t.log_likelihood)?;
        }
        Ok(())
    }
}

/// Runs `cfg.n_iterations` sweeps from a fresh state. `hook` sees the state
/// after every sweep.
pub fn run<F>(corpus: &TokenizedCorpus, cfg: &LdaConfig, mut hook: F) -> Result<(SamplerState, TraceLog)>
where
    F: FnMut(usize, &SamplerState),
{
    let mut state = SamplerState::init(corpus, cfg)?;
    let mut trace = TraceLog::default();
    for it in 1..=cfg.n_iterations {
        let start = Instant::now();
        state.gibbs_iteration(cfg)?;
        let duration_ms = start.elapsed().as_secs_f64() * 1e3;
        trace.iterations.push(IterationTrace {
            iteration: it,
            duration_ms,
            log_likelihood: estimate_log_likelihood(&state, cfg),
        });
        hook(it, &state);
    }
    Ok((state, trace))
}

/// `ln Gamma(n + offset)` with small counts served from a table.
struct LnGammaTable {
    offset: f64,
    table: Vec<f64>,
}

impl LnGammaTable {
    fn new(offset: f64, max_count: usize) -> Self {
        let len = max_count.min(1 << 16) + 1;
        LnGammaTable { offset, table: (0..len).map(|n| ln_gamma(n as f64 + offset)).collect() }
    }

    #[inline]
    fn get(&self, n: u32) -> f64 {
        self.table.get(n as usize).copied().unwrap_or_else(|| ln_gamma(n as f64 + self.offset))
    }
}

/// Collapsed joint `log p(w, z | alpha, beta)`:
///
/// ```text
///   sum_m [ lnG(Z a) - lnG(N_m + Z a) + sum_k lnG(n_mk + a) - Z lnG(a) ]
/// + sum_k [ lnG(W b) - lnG(n_k + W b) + sum_w lnG(n_kw + b) - W lnG(b) ]
/// ```
pub fn estimate_log_likelihood(state: &SamplerState, cfg: &LdaConfig) -> f64 {
    let z = state.n_topics as f64;
    let v = state.vocab_size as f64;
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    let t = &state.tables;

    let max_doc = t.doc_topic.iter().copied().max().unwrap_or(0) as usize;
    let doc_lg = LnGammaTable::new(alpha, max_doc);
    let ln_za = ln_gamma(z * alpha);
    let mut ll = 0.0;
    for m in 0..state.n_docs() {
        ll += ln_za - ln_gamma(state.doc_total(m) as f64 + z * alpha);
        let row = &t.doc_topic[m * state.n_topics..(m + 1) * state.n_topics];
        ll += row.iter().map(|&c| doc_lg.get(c)).sum::<f64>();
    }
    ll -= state.n_docs() as f64 * z * ln_gamma(alpha);

    let max_word = t.word_topic.iter().copied().max().unwrap_or(0) as usize;
    let word_lg = LnGammaTable::new(beta, max_word);
    let ln_vb = ln_gamma(v * beta);
    for &n_k in &t.topic_total {
        ll += ln_vb - ln_gamma(n_k as f64 + v * beta);
    }
    ll += t.word_topic.iter().map(|&c| word_lg.get(c)).sum::<f64>();
    ll -= z * v * ln_gamma(beta);
    ll
}

/// Row-stochastic matrix recovered from counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicMatrix(Array2<f64>);

impl TopicMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }
}

impl std::ops::Index<[usize; 2]> for TopicMatrix {
    type Output = f64;
    fn index(&self, idx: [usize; 2]) -> &f64 {
        &self.0[idx]
    }
}

/// Document-topic distributions, `M x Z`.
pub type ThetaMatrix = TopicMatrix;
/// Topic-word distributions, `Z x W`.
pub type PhiMatrix = TopicMatrix;

/// `theta[m][k] = (n_mk + alpha) / (N_m + Z alpha)`
pub fn recover_theta(state: &SamplerState, cfg: &LdaConfig) -> ThetaMatrix {
    let z = state.n_topics;
    let za = z as f64 * cfg.alpha;
    TopicMatrix(Array2::from_shape_fn((state.n_docs(), z), |(m, k)| {
        (state.doc_topic(m, k) as f64 + cfg.alpha) / (state.doc_total(m) as f64 + za)
    }))
}

/// `phi[k][w] = (n_kw + beta) / (n_k + W beta)`
pub fn recover_phi(state: &SamplerState, cfg: &LdaConfig) -> PhiMatrix {
    let wb = state.vocab_size as f64 * cfg.beta;
    TopicMatrix(Array2::from_shape_fn((state.n_topics, state.vocab_size), |(k, w)| {
        (state.topic_word(k, w) as f64 + cfg.beta) / (state.topic_total(k) as f64 + wb)
    }))
}

/// `LDZ1`, u64 token count, then one little-endian u16 topic per token.
pub fn write_checkpoint<W: Write>(assignments: &[u16], w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(assignments.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(assignments.len() * 2);
    for &k in assignments {
        buf.extend_from_slice(&k.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<u16>> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|_| Error::BadCheckpoint("truncated header".into()))?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint("bad magic".into()));
    }
    let n = u64::from_le_bytes(head[4..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != n * 2 {
        return Err(Error::BadCheckpoint(format!("header declares {n} tokens, body holds {} bytes", body.len())));
    }
    Ok(body.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect())
}

impl fmt::Display for LdaConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "topics={} alpha={} beta={} iterations={} burn_in={} seed={}",
            self.n_topics, self.alpha, self.beta, self.n_iterations, self.burn_in, self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg(z: usize, alpha: f64, beta: f64) -> LdaConfig {
        LdaConfig { n_topics: z, alpha, beta, n_iterations: 10, burn_in: 2, seed: 7 }
    }

    fn corpus(vocab: usize, docs: Vec<Vec<u32>>) -> TokenizedCorpus {
        TokenizedCorpus::from_docs(vocab, docs).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, 1.0, 1.0).validate().is_err());
        assert!(cfg(2, 0.0, 1.0).validate().is_err());
        assert!(cfg(2, 1.0, -1.0).validate().is_err());
        let mut c = cfg(2, 1.0, 1.0);
        c.burn_in = 10;
        assert!(c.validate().is_err());
        let d = LdaConfig::with_topics(4);
        assert_eq!((d.alpha, d.beta, d.n_iterations, d.burn_in), (12.5, 0.01, 1000, 200));
    }

    #[test]
    fn single_topic_init() {
        let s = SamplerState::init(&corpus(2, vec![vec![0], vec![1]]), &cfg(1, 1.0, 1.0)).unwrap();
        assert_eq!(s.assignments(), &[0, 0]);
        assert_eq!(s.tables().doc_topic, vec![1, 1]);
        assert_eq!(s.tables().topic_total, vec![2]);
    }

    #[test]
    fn init_is_deterministic() {
        let c = corpus(5, vec![vec![0, 1, 2, 3, 4, 4], vec![1, 1, 2]]);
        let a = SamplerState::init(&c, &cfg(3, 1.0, 1.0)).unwrap();
        let b = SamplerState::init(&c, &cfg(3, 1.0, 1.0)).unwrap();
        assert_eq!(a.assignments(), b.assignments());
        assert_eq!(a.tables(), b.tables());
    }

    #[test]
    fn conditional_worked_example() {
        // after excluding token (0, 0): doc 0 counts [2, 1], word 0 counts
        // [3, 1], topic totals [5, 4]
        let c = corpus(3, vec![vec![0, 1, 1, 2], vec![0, 0, 0, 0], vec![2, 2]]);
        let cfg = cfg(2, 1.0, 1.0);
        let z = vec![0, 0, 0, 1, 0, 0, 0, 1, 1, 1];
        let mut s = SamplerState::from_assignments(&c, &cfg, z).unwrap();
        assert_eq!(s.exclude_token(0, 0).unwrap(), 0);
        assert_eq!((s.doc_topic(0, 0), s.doc_topic(0, 1)), (2, 1));
        assert_eq!((s.topic_word(0, 0), s.topic_word(1, 0)), (3, 1));
        assert_eq!((s.topic_total(0), s.topic_total(1)), (5, 4));

        let w = s.conditional_weights(&cfg, 0, 0);
        assert_abs_diff_eq!(w[0], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 4.0 / 7.0, epsilon = 1e-15);
        let total: f64 = w.iter().sum();
        assert_abs_diff_eq!(w[0] / total, 21.0 / 29.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1] / total, 8.0 / 29.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[0] / total, 0.7241, epsilon = 1e-4);
    }

    #[test]
    fn conditional_is_uniform_on_empty_tables() {
        let c = corpus(3, vec![vec![1]]);
        let cfg = cfg(2, 1.0, 1.0);
        let mut s = SamplerState::init(&c, &cfg).unwrap();
        s.exclude_token(0, 0).unwrap();
        let w = s.conditional_weights(&cfg, 0, 0);
        assert_abs_diff_eq!(w[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn double_exclusion_is_underflow() {
        let c = corpus(3, vec![vec![1]]);
        let mut s = SamplerState::init(&c, &cfg(2, 1.0, 1.0)).unwrap();
        s.exclude_token(0, 0).unwrap();
        assert!(matches!(s.exclude_token(0, 0), Err(Error::CountUnderflow { .. })));
    }

    #[test]
    fn single_topic_iteration_is_noop() {
        let c = corpus(4, vec![vec![0, 1, 2], vec![3, 3]]);
        let cfg = cfg(1, 0.5, 0.1);
        let mut s = SamplerState::init(&c, &cfg).unwrap();
        let before = s.tables().clone();
        s.gibbs_iteration(&cfg).unwrap();
        assert_eq!(s.tables(), &before);
        assert!(s.assignments().iter().all(|&k| k == 0));
    }

    #[test]
    fn run_with_zero_iterations() {
        let c = corpus(4, vec![vec![0, 1, 2], vec![3, 3]]);
        let mut cfg = cfg(2, 0.5, 0.1);
        cfg.n_iterations = 0;
        cfg.burn_in = 0;
        let (s, trace) = run(&c, &cfg, |_, _| {}).unwrap();
        assert!(trace.is_empty());
        let init = SamplerState::init(&c, &cfg).unwrap();
        assert_eq!(s.assignments(), init.assignments());
    }

    #[test]
    fn run_trace_and_hook_counts() {
        let c = corpus(4, vec![vec![0, 1, 2], vec![3, 3]]);
        let cfg = cfg(2, 0.5, 0.1);
        let mut seen = Vec::new();
        let (_, trace) = run(&c, &cfg, |it, s| {
            s.check_consistency().unwrap();
            seen.push(it);
        })
        .unwrap();
        assert_eq!(trace.len(), cfg.n_iterations);
        assert_eq!(seen, (1..=cfg.n_iterations).collect::<Vec<_>>());
        assert!(trace.log_likelihoods().iter().all(|ll| ll.is_finite()));
    }

    #[test]
    fn fixed_seed_trajectory_repeats() {
        let c = corpus(6, vec![vec![0, 1, 2, 5], vec![3, 3, 4], vec![5, 0, 0]]);
        let cfg = cfg(3, 0.3, 0.2);
        let mut a = Vec::new();
        let mut b = Vec::new();
        run(&c, &cfg, |_, s| a.push(s.assignments().to_vec())).unwrap();
        run(&c, &cfg, |_, s| b.push(s.assignments().to_vec())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn theta_and_phi_examples() {
        // one doc of four tokens all in topic 0, words [0, 0, 0, 1]
        let c = corpus(3, vec![vec![0, 0, 0, 1]]);
        let cfg = cfg(2, 1.0, 1.0);
        let s = SamplerState::from_assignments(&c, &cfg, vec![0, 0, 0, 0]).unwrap();
        let theta = recover_theta(&s, &cfg);
        assert_abs_diff_eq!(theta[[0, 0]], 5.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(theta[[0, 1]], 1.0 / 6.0, epsilon = 1e-15);
        let phi = recover_phi(&s, &cfg);
        // word counts [3, 1, 0]: (n + 1) / (4 + 3)
        assert_abs_diff_eq!(phi[[0, 0]], 4.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(phi[[0, 1]], 2.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(phi[[0, 2]], 1.0 / 7.0, epsilon = 1e-15);
        for w in 0..3 {
            assert_abs_diff_eq!(phi[[1, w]], 1.0 / 3.0, epsilon = 1e-15);
        }

        let s = SamplerState::from_assignments(&c, &cfg, vec![0, 1, 0, 1]).unwrap();
        let theta = recover_theta(&s, &cfg);
        assert_abs_diff_eq!(theta[[0, 0]], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn single_token_log_likelihood_is_zero() {
        let c = corpus(1, vec![vec![0]]);
        let cfg = cfg(1, 1.0, 1.0);
        let s = SamplerState::init(&c, &cfg).unwrap();
        assert_abs_diff_eq!(estimate_log_likelihood(&s, &cfg), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn spreading_a_concentrated_state_lowers_likelihood() {
        // two docs of word 0 / word 1, each fully in its own topic
        let c = corpus(2, vec![vec![0, 0, 0], vec![1, 1, 1]]);
        let cfg = cfg(2, 0.5, 0.5);
        let concentrated = SamplerState::from_assignments(&c, &cfg, vec![0, 0, 0, 1, 1, 1]).unwrap();
        let spread = SamplerState::from_assignments(&c, &cfg, vec![0, 0, 1, 1, 1, 1]).unwrap();
        assert!(estimate_log_likelihood(&spread, &cfg) < estimate_log_likelihood(&concentrated, &cfg));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let z = vec![0u16, 3, 65535, 7];
        let mut buf = Vec::new();
        write_checkpoint(&z, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"LDZ1");
        assert_eq!(buf.len(), 12 + 8);
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), z);
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        assert!(read_checkpoint(&b"LDZ2\0\0\0\0\0\0\0\0"[..]).is_err());
    }

    fn arb_state() -> impl Strategy<Value = (TokenizedCorpus, LdaConfig, Vec<u16>)> {
        (1usize..5, 1usize..8, 0.05f64..3.0, 0.01f64..2.0).prop_flat_map(|(z, vocab, alpha, beta)| {
            proptest::collection::vec(proptest::collection::vec((0..vocab as u32, 0..z as u16), 1..8), 1..6).prop_map(
                move |docs| {
                    let words = docs.iter().map(|d| d.iter().map(|p| p.0).collect()).collect();
                    let z_vec = docs.iter().flat_map(|d| d.iter().map(|p| p.1)).collect();
                    let c = TokenizedCorpus::from_docs(vocab, words).unwrap();
                    let cfg = LdaConfig { n_topics: z, alpha, beta, n_iterations: 3, burn_in: 0, seed: 1 };
                    (c, cfg, z_vec)
                },
            )
        })
    }

    proptest! {
        #[test]
        fn init_tables_match_tally((c, cfg, _) in arb_state(), seed in any::<u64>()) {
            let cfg = LdaConfig { seed, ..cfg };
            let s = SamplerState::init(&c, &cfg).unwrap();
            prop_assert!(s.check_consistency().is_ok());
            for m in 0..s.n_docs() {
                let row: u32 = (0..s.n_topics()).map(|k| s.doc_topic(m, k)).sum();
                prop_assert_eq!(row as usize, s.doc_total(m));
            }
        }

        #[test]
        fn iterations_keep_tables_consistent((c, cfg, z) in arb_state()) {
            let mut s = SamplerState::from_assignments(&c, &cfg, z).unwrap();
            for _ in 0..3 {
                s.gibbs_iteration(&cfg).unwrap();
                prop_assert!(s.check_consistency().is_ok());
            }
        }

        #[test]
        fn theta_phi_rows_normalized((c, cfg, z) in arb_state()) {
            let s = SamplerState::from_assignments(&c, &cfg, z).unwrap();
            for mat in [recover_theta(&s, &cfg), recover_phi(&s, &cfg)] {
                for row in mat.view().rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                    // a single column is forced to exactly 1
                    let upper_ok = |p: f64| p < 1.0 || row.len() == 1;
                    prop_assert!(row.iter().all(|&p| p > 0.0 && upper_ok(p)));
                }
            }
        }

        #[test]
        fn likelihood_invariant_under_topic_relabeling((c, cfg, z) in arb_state(), shift in 0usize..5) {
            let n = cfg.n_topics;
            let relabeled = z.iter().map(|&k| ((k as usize + shift) % n) as u16).collect();
            let a = SamplerState::from_assignments(&c, &cfg, z).unwrap();
            let b = SamplerState::from_assignments(&c, &cfg, relabeled).unwrap();
            let (la, lb) = (estimate_log_likelihood(&a, &cfg), estimate_log_likelihood(&b, &cfg));
            prop_assert!(la.is_finite());
            prop_assert!((la - lb).abs() <= 1e-9 * la.abs().max(1.0));
        }

        #[test]
        fn dropped_normalizer_leaves_distribution_unchanged((c, cfg, z) in arb_state(), pick in any::<proptest::sample::Index>()) {
            let mut s = SamplerState::from_assignments(&c, &cfg, z).unwrap();
            let i = pick.index(s.n_tokens());
            let m = s.doc_offsets.partition_point(|&o| o <= i) - 1;
            let n = i - s.doc_offsets[m];
            s.exclude_token(m, n).unwrap();
            let normalize = |v: Vec<f64>| { let t: f64 = v.iter().sum(); v.into_iter().map(|x| x / t).collect::<Vec<_>>() };
            let a = normalize(s.conditional_weights(&cfg, m, n));
            let b = normalize(s.full_conditional_weights(&cfg, m, n));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

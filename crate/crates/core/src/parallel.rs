//! Multi-threaded Gibbs sampling.
//!
//! Documents are split into `P` contiguous blocks of roughly equal token
//! count, one per worker; a worker is the only writer of its documents'
//! assignments and document-topic rows for the whole run.
//!
//! In [`SyncMode::Rotation`] the vocabulary is cut into `S >= P` contiguous
//! word slices. An iteration runs `S` rounds; in round `r` worker `w` holds
//! slice `(w + r) mod S` and samples only its tokens whose word falls in
//! that slice. The word-topic rows of a slice are handed to the holder as a
//! `&mut` borrow, so no two workers can write the same row. Topic totals are
//! reconciled by the coordinator after every round; during a round each
//! worker sees the totals from the round start plus its own changes.
//!
//! In [`SyncMode::EpochMerge`] each worker samples its block against a
//! private copy of the word-topic table and totals taken at the start of the
//! iteration, and the per-worker deltas are summed at the barrier.

use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::corpus::TokenizedCorpus;
use crate::error::{Error, Result};
use crate::sampler::{
    estimate_log_likelihood, resample_token, stream_rng, IterationTrace, LdaConfig, Priors, SamplerState, TraceLog,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncMode {
    #[default]
    Rotation,
    EpochMerge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelConfig {
    pub base: LdaConfig,
    pub n_threads: usize,
    pub sync_mode: SyncMode,
    /// Rotation mode only; `None` means one slice per thread.
    pub n_word_slices: Option<usize>,
}

impl ParallelConfig {
    pub fn new(base: LdaConfig, n_threads: usize, sync_mode: SyncMode) -> Self {
        ParallelConfig { base, n_threads, sync_mode, n_word_slices: None }
    }

    pub fn word_slices(&self) -> usize {
        self.n_word_slices.unwrap_or(self.n_threads)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.n_threads < 1 {
            return Err(Error::InvalidConfig("n_threads must be at least 1".into()));
        }
        if self.sync_mode == SyncMode::Rotation && self.word_slices() < self.n_threads {
            return Err(Error::InvalidConfig(format!(
                "rotation needs at least as many word slices ({}) as threads ({})",
                self.word_slices(),
                self.n_threads
            )));
        }
        Ok(())
    }
}

/// Splits `weights` into `parts` contiguous ranges of roughly equal weight.
/// Returns `parts + 1` boundaries; ranges may be empty.
pub fn balanced_boundaries(weights: &[usize], parts: usize) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    let mut bounds = Vec::with_capacity(parts + 1);
    bounds.push(0);
    let mut acc = 0usize;
    let mut i = 0;
    for p in 1..parts {
        let target = (total as u128 * p as u128 / parts as u128) as usize;
        while i < weights.len() && acc + weights[i] / 2 < target {
            acc += weights[i];
            i += 1;
        }
        bounds.push(i);
    }
    bounds.push(weights.len());
    bounds
}

/// A worker's `(word_topic, topic_total)` copy after an epoch.
type LocalCounts = (Vec<u32>, Vec<u32>);

/// Slice held by `worker` in `round`.
pub fn rotation_slice(worker: usize, round: usize, n_slices: usize) -> usize {
    (worker + round) % n_slices
}

/// Static partition of documents and (for rotation) words.
struct Layout {
    /// Document boundaries per worker, `P + 1` entries.
    doc_bounds: Vec<usize>,
    /// Word boundaries per slice, `S + 1` entries.
    word_bounds: Vec<usize>,
    /// `schedule[w][s]`: worker-local token indices whose word is in slice
    /// `s`, in document order.
    schedule: Vec<Vec<Vec<u32>>>,
    /// Document of each token, global index.
    token_doc: Vec<u32>,
    words: Vec<u32>,
    doc_offsets: Vec<usize>,
}

impl Layout {
    fn new(state: &SamplerState, n_workers: usize, n_slices: usize) -> Self {
        let offsets = state.doc_offsets();
        let doc_lengths: Vec<usize> = offsets.windows(2).map(|w| w[1] - w[0]).collect();
        let doc_bounds = balanced_boundaries(&doc_lengths, n_workers);

        let mut word_freq = vec![0usize; state.vocab_size()];
        for &w in state.words() {
            word_freq[w as usize] += 1;
        }
        let word_bounds = balanced_boundaries(&word_freq, n_slices);
        let mut slice_of_word = vec![0u32; state.vocab_size()];
        for s in 0..n_slices {
            slice_of_word[word_bounds[s]..word_bounds[s + 1]].fill(s as u32);
        }

        let mut token_doc = vec![0u32; state.n_tokens()];
        for m in 0..state.n_docs() {
            token_doc[offsets[m]..offsets[m + 1]].fill(m as u32);
        }

        let schedule = (0..n_workers)
            .map(|w| {
                let start = offsets[doc_bounds[w]];
                let end = offsets[doc_bounds[w + 1]];
                let mut per_slice = vec![Vec::new(); n_slices];
                for i in start..end {
                    let s = slice_of_word[state.words()[i] as usize] as usize;
                    per_slice[s].push((i - start) as u32);
                }
                per_slice
            })
            .collect();

        Layout {
            doc_bounds,
            word_bounds,
            schedule,
            token_doc,
            words: state.words().to_vec(),
            doc_offsets: offsets.to_vec(),
        }
    }
}

/// Mutable per-worker view of the state.
struct Shard<'a> {
    first_doc: usize,
    first_token: usize,
    assignments: &'a mut [u16],
    doc_topic: &'a mut [u32],
    rng: &'a mut ChaCha8Rng,
}

struct RoundTask<'a> {
    slice: usize,
    rows: &'a mut [u32],
    totals: Vec<u32>,
}

struct RoundReply<'a> {
    worker: usize,
    slice: usize,
    rows: &'a mut [u32],
    delta: Vec<i64>,
    result: Result<()>,
}

/// Cuts the worker-owned parts of the state into disjoint borrows.
fn split_shards<'a>(
    layout: &Layout,
    n_topics: usize,
    mut assignments: &'a mut [u16],
    mut doc_topic: &'a mut [u32],
    mut rngs: impl Iterator<Item = &'a mut ChaCha8Rng>,
) -> Vec<Shard<'a>> {
    let n_workers = layout.doc_bounds.len() - 1;
    let mut shards = Vec::with_capacity(n_workers);
    for w in 0..n_workers {
        let (d0, d1) = (layout.doc_bounds[w], layout.doc_bounds[w + 1]);
        let (t0, t1) = (layout.doc_offsets[d0], layout.doc_offsets[d1]);
        let (a, rest_a) = std::mem::take(&mut assignments).split_at_mut(t1 - t0);
        let (d, rest_d) = std::mem::take(&mut doc_topic).split_at_mut((d1 - d0) * n_topics);
        assignments = rest_a;
        doc_topic = rest_d;
        shards.push(Shard {
            first_doc: d0,
            first_token: t0,
            assignments: a,
            doc_topic: d,
            rng: rngs.next().expect("one generator per worker"),
        });
    }
    shards
}

/// Parallel sampler with persistent per-worker generators.
pub struct ParallelSampler {
    cfg: ParallelConfig,
    state: SamplerState,
    layout: Layout,
    /// Generators for workers `1..P`; worker 0 uses the state's own.
    extra_rngs: Vec<ChaCha8Rng>,
}

impl ParallelSampler {
    pub fn new(corpus: &TokenizedCorpus, cfg: &ParallelConfig) -> Result<Self> {
        cfg.validate()?;
        let state = SamplerState::init(corpus, &cfg.base)?;
        let n_slices = match cfg.sync_mode {
            SyncMode::Rotation => cfg.word_slices(),
            SyncMode::EpochMerge => 1,
        };
        let layout = Layout::new(&state, cfg.n_threads, n_slices);
        let extra_rngs = (1..cfg.n_threads).map(|w| stream_rng(cfg.base.seed, w as u64)).collect();
        Ok(ParallelSampler { cfg: cfg.clone(), state, layout, extra_rngs })
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn into_state(self) -> SamplerState {
        self.state
    }

    /// Document range `[start, end)` owned by each worker.
    pub fn doc_partition(&self) -> Vec<(usize, usize)> {
        self.layout.doc_bounds.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Word range `[start, end)` of each rotation slice.
    pub fn word_partition(&self) -> Vec<(usize, usize)> {
        self.layout.word_bounds.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn iteration(&mut self) -> Result<()> {
        match self.cfg.sync_mode {
            SyncMode::Rotation => self.rotation_iteration(),
            SyncMode::EpochMerge => self.epoch_merge_iteration(),
        }
    }

    fn rotation_iteration(&mut self) -> Result<()> {
        let z = self.state.n_topics();
        let n_workers = self.cfg.n_threads;
        let n_slices = self.layout.word_bounds.len() - 1;
        let priors = Priors::new(&self.cfg.base, self.state.vocab_size());
        let layout = &self.layout;
        let words = &layout.words;
        let tables = &mut self.state.tables;
        let mut totals = tables.topic_total.clone();

        // topic_word is split into one disjoint borrow per slice
        let mut slices: Vec<Option<&mut [u32]>> = Vec::with_capacity(n_slices);
        let mut rest: &mut [u32] = &mut tables.word_topic;
        for s in 0..n_slices {
            let rows = layout.word_bounds[s + 1] - layout.word_bounds[s];
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(rows * z);
            slices.push(Some(head));
            rest = tail;
        }
        let rngs = std::iter::once(&mut self.state.rng).chain(self.extra_rngs.iter_mut());
        let shards = split_shards(layout, z, &mut self.state.assignments, &mut tables.doc_topic, rngs);

        thread::scope(|scope| -> Result<()> {
            let (reply_tx, reply_rx) = mpsc::channel::<RoundReply<'_>>();
            let mut task_txs = Vec::with_capacity(n_workers);
            for (w, shard) in shards.into_iter().enumerate() {
                let (tx, rx) = mpsc::channel::<RoundTask<'_>>();
                task_txs.push(tx);
                let reply_tx = reply_tx.clone();
                scope.spawn(move || {
                    let Shard { first_doc, first_token, assignments, doc_topic, rng } = shard;
                    let mut cumulative = vec![0.0; z];
                    for RoundTask { slice, rows, mut totals } in rx {
                        let start_totals = totals.clone();
                        let word_start = layout.word_bounds[slice];
                        let result = (|| -> Result<()> {
                            for &local in &layout.schedule[w][slice] {
                                let i = first_token + local as usize;
                                let m = layout.token_doc[i] as usize - first_doc;
                                let word = words[i] as usize - word_start;
                                assignments[local as usize] = resample_token(
                                    &mut doc_topic[m * z..(m + 1) * z],
                                    &mut rows[word * z..(word + 1) * z],
                                    &mut totals,
                                    assignments[local as usize],
                                    priors,
                                    rng,
                                    &mut cumulative,
                                )?;
                            }
                            Ok(())
                        })();
                        let delta = totals.iter().zip(&start_totals).map(|(&a, &b)| a as i64 - b as i64).collect();
                        if reply_tx.send(RoundReply { worker: w, slice, rows, delta, result }).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(reply_tx);

            let mut failure = None;
            for round in 0..n_slices {
                let mut held = vec![false; n_slices];
                for (w, tx) in task_txs.iter().enumerate() {
                    let slice = rotation_slice(w, round, n_slices);
                    debug_assert!(!held[slice], "slice {slice} handed to two workers in round {round}");
                    held[slice] = true;
                    let rows = slices[slice].take().expect("slice returned by its previous holder");
                    tx.send(RoundTask { slice, rows, totals: totals.clone() })
                        .map_err(|_| Error::Reconciliation(format!("worker {w} exited early")))?;
                }
                let mut merged: Vec<i64> = totals.iter().map(|&t| t as i64).collect();
                for _ in 0..n_workers {
                    let reply = reply_rx.recv().map_err(|_| Error::Reconciliation("worker exited early".into()))?;
                    debug_assert_eq!(reply.slice, rotation_slice(reply.worker, round, n_slices));
                    slices[reply.slice] = Some(reply.rows);
                    for (m, d) in merged.iter_mut().zip(&reply.delta) {
                        *m += d;
                    }
                    if let Err(e) = reply.result {
                        failure.get_or_insert(e);
                    }
                }
                if let Some(e) = failure.take() {
                    return Err(e);
                }
                for (k, (t, m)) in totals.iter_mut().zip(&merged).enumerate() {
                    *t = u32::try_from(*m)
                        .map_err(|_| Error::Reconciliation(format!("topic_total[{k}] reconciled to {m}")))?;
                }
            }
            drop(task_txs);
            Ok(())
        })?;

        tables.topic_total = totals;
        Ok(())
    }

    fn epoch_merge_iteration(&mut self) -> Result<()> {
        let z = self.state.n_topics();
        let priors = Priors::new(&self.cfg.base, self.state.vocab_size());
        let snapshot_words = self.state.tables.word_topic.clone();
        let snapshot_totals = self.state.tables.topic_total.clone();
        let layout = &self.layout;
        let (words, offsets) = (&layout.words, &layout.doc_offsets);
        let rngs = std::iter::once(&mut self.state.rng).chain(self.extra_rngs.iter_mut());
        let shards = split_shards(layout, z, &mut self.state.assignments, &mut self.state.tables.doc_topic, rngs);

        let results: Vec<Result<(Vec<u32>, Vec<u32>)>> = thread::scope(|scope| {
            let handles: Vec<_> = shards
                .into_iter()
                .map(|shard| {
                    let (snapshot_words, snapshot_totals) = (&snapshot_words, &snapshot_totals);
                    scope.spawn(move || -> Result<(Vec<u32>, Vec<u32>)> {
                        let Shard { first_doc, first_token, assignments, doc_topic, rng } = shard;
                        let mut word_topic = snapshot_words.clone();
                        let mut totals = snapshot_totals.clone();
                        let mut cumulative = vec![0.0; z];
                        let n_docs = doc_topic.len() / z;
                        for m in 0..n_docs {
                            let (t0, t1) = (offsets[first_doc + m], offsets[first_doc + m + 1]);
                            let doc_row = &mut doc_topic[m * z..(m + 1) * z];
                            for (i, &w) in (t0..t1).zip(&words[t0..t1]) {
                                let w = w as usize;
                                let local = i - first_token;
                                assignments[local] = resample_token(
                                    doc_row,
                                    &mut word_topic[w * z..(w + 1) * z],
                                    &mut totals,
                                    assignments[local],
                                    priors,
                                    rng,
                                    &mut cumulative,
                                )?;
                            }
                        }
                        Ok((word_topic, totals))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });

        let locals = results.into_iter().collect::<Result<Vec<_>>>()?;
        let merge = |snapshot: &[u32], pick: &dyn Fn(&LocalCounts) -> &Vec<u32>, name: &str| -> Result<Vec<u32>> {
            let mut acc: Vec<i64> = snapshot.iter().map(|&c| c as i64).collect();
            for local in &locals {
                for ((a, &l), &s) in acc.iter_mut().zip(pick(local)).zip(snapshot) {
                    *a += l as i64 - s as i64;
                }
            }
            acc.into_iter()
                .enumerate()
                .map(|(i, v)| u32::try_from(v).map_err(|_| Error::Reconciliation(format!("{name}[{i}] merged to {v}"))))
                .collect()
        };
        let word_topic = merge(&snapshot_words, &|l| &l.0, "topic_word")?;
        let totals = merge(&snapshot_totals, &|l| &l.1, "topic_total")?;
        self.state.tables.word_topic = word_topic;
        self.state.tables.topic_total = totals;
        Ok(())
    }
}

/// Runs `pcfg.base.n_iterations` parallel iterations. The tables are checked
/// against a fresh tally after the last iteration (and after every iteration
/// in debug builds); a mismatch is an error.
pub fn run_parallel<F>(corpus: &TokenizedCorpus, pcfg: &ParallelConfig, mut hook: F) -> Result<(SamplerState, TraceLog)>
where
    F: FnMut(usize, &SamplerState),
{
    let mut sampler = ParallelSampler::new(corpus, pcfg)?;
    let mut trace = TraceLog::default();
    for it in 1..=pcfg.base.n_iterations {
        let start = Instant::now();
        sampler.iteration()?;
        let duration_ms = start.elapsed().as_secs_f64() * 1e3;
        if cfg!(debug_assertions) || it == pcfg.base.n_iterations {
            sampler.state.check_consistency()?;
        }
        trace.iterations.push(IterationTrace {
            iteration: it,
            duration_ms,
            log_likelihood: estimate_log_likelihood(&sampler.state, &pcfg.base),
        });
        hook(it, &sampler.state);
    }
    Ok((sampler.into_state(), trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRecord {
    pub n_threads: usize,
    pub per_iteration_ms: Vec<f64>,
    /// Median of iterations 3 onward, in ms.
    pub median_ms: f64,
    /// `median_ms * base.n_iterations`
    pub estimated_total_ms: f64,
    pub final_log_likelihood: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScalingReport {
    pub records: Vec<ScalingRecord>,
}

impl ScalingReport {
    /// Median-time speedup of each record over the first one.
    pub fn speedups(&self) -> Vec<f64> {
        let base = self.records.first().map(|r| r.median_ms).unwrap_or(f64::NAN);
        self.records.iter().map(|r| base / r.median_ms).collect()
    }

    /// CSV `n_threads,iteration,duration_ms`.
    pub fn write_iterations_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "n_threads,iteration,duration_ms")?;
        for r in &self.records {
            for (i, d) in r.per_iteration_ms.iter().enumerate() {
                writeln!(w, "{},{},{:.3}", r.n_threads, i + 1, d)?;
            }
        }
        Ok(())
    }

    /// CSV `n_threads,median_ms,estimated_total_ms,final_ll`.
    pub fn write_summary_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "n_threads,median_ms,estimated_total_ms,final_ll")?;
        for r in &self.records {
            writeln!(w, "{},{:.3},{:.1},{}", r.n_threads, r.median_ms, r.estimated_total_ms, r.final_log_likelihood)?;
        }
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median absolute deviation from the median.
pub fn median_abs_deviation(values: &[f64]) -> f64 {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median(&dev)
}

/// Times `measure_iterations` rotation-mode iterations per thread count and
/// extrapolates to `base.n_iterations` from the median of iterations 3+.
pub fn scaling_benchmark(
    corpus: &TokenizedCorpus,
    base: &LdaConfig,
    thread_counts: &[usize],
    measure_iterations: usize,
) -> Result<ScalingReport> {
    if measure_iterations < 2 {
        return Err(Error::InvalidConfig("measure_iterations must be at least 2".into()));
    }
    let mut report = ScalingReport::default();
    for &p in thread_counts {
        let cfg = LdaConfig { n_iterations: measure_iterations, burn_in: 0, ..base.clone() };
        let pcfg = ParallelConfig::new(cfg, p, SyncMode::Rotation);
        let (_, trace) = run_parallel(corpus, &pcfg, |_, _| {})?;
        let durations = trace.durations_ms();
        let warm = if durations.len() > 2 { &durations[2..] } else { &durations[..] };
        let median_ms = median(warm);
        report.records.push(ScalingRecord {
            n_threads: p,
            estimated_total_ms: median_ms * base.n_iterations as f64,
            median_ms,
            per_iteration_ms: durations,
            final_log_likelihood: trace.iterations.last().map(|t| t.log_likelihood).unwrap_or(f64::NAN),
        });
    }
    Ok(report)
}

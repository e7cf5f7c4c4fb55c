//! Synthetic corpora with known topic structure.
//!
//! Topic `k` owns the `k`-th contiguous block of `W / Z` words. A token of
//! topic `k` is drawn from that block with probability `separation` and from
//! the whole vocabulary otherwise, so `separation = 1.0` gives disjoint
//! topics. Documents are split evenly into `Z` categories and every token of
//! a document comes from its category's topic. A fraction `mislabel_rate`
//! of documents gets a wrong category label.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{FeatureMatrix, TokenizedCorpus};
use crate::error::{Error, Result};
use crate::sampler::MAX_TOPICS;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_topics: usize,
    pub vocab_size: usize,
    pub tokens_per_doc: usize,
    pub separation: f64,
    pub mislabel_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 400,
            n_topics: 4,
            vocab_size: 100,
            tokens_per_doc: 20,
            separation: 1.0,
            mislabel_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    /// Carries the observed (possibly wrong) category labels.
    pub corpus: TokenizedCorpus,
    /// Generating topic of each document, which is also its true category.
    pub true_topic: Vec<usize>,
    /// Indices of documents whose label was changed, ascending.
    pub planted: Vec<usize>,
}

pub fn category_label(k: usize) -> String {
    format!("cat{k}")
}

pub fn topic_block(topic: usize, n_topics: usize, vocab_size: usize) -> (usize, usize) {
    (topic * vocab_size / n_topics, (topic + 1) * vocab_size / n_topics)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_topics < 1 || cfg.n_topics > MAX_TOPICS {
        return Err(Error::InvalidConfig(format!("n_topics must be in 1..={MAX_TOPICS}")));
    }
    if cfg.vocab_size < cfg.n_topics {
        return Err(Error::InvalidConfig("vocab_size must be at least n_topics".into()));
    }
    if cfg.n_docs == 0 || cfg.tokens_per_doc == 0 {
        return Err(Error::InvalidConfig("n_docs and tokens_per_doc must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.separation) || !(0.0..=1.0).contains(&cfg.mislabel_rate) {
        return Err(Error::InvalidConfig("separation and mislabel_rate must lie in [0, 1]".into()));
    }
    if cfg.mislabel_rate > 0.0 && cfg.n_topics < 2 {
        return Err(Error::InvalidConfig("mislabeling needs at least two categories".into()));
    }

    let mut rng = crate::sampler::stream_rng(cfg.seed, 0);
    let (z, w) = (cfg.n_topics, cfg.vocab_size);
    let true_topic: Vec<usize> = (0..cfg.n_docs).map(|i| i * z / cfg.n_docs).collect();
    let docs: Vec<Vec<u32>> = true_topic
        .iter()
        .map(|&k| {
            let (lo, hi) = topic_block(k, z, w);
            (0..cfg.tokens_per_doc)
                .map(|_| {
                    if rng.random::<f64>() < cfg.separation {
                        rng.random_range(lo..hi) as u32
                    } else {
                        rng.random_range(0..w) as u32
                    }
                })
                .collect()
        })
        .collect();

    let n_planted = (cfg.mislabel_rate * cfg.n_docs as f64).round() as usize;
    let mut planted = sample(&mut rng, cfg.n_docs, n_planted).into_vec();
    planted.sort_unstable();
    let mut labels: Vec<Option<String>> = true_topic.iter().map(|&k| Some(category_label(k))).collect();
    for &d in &planted {
        let wrong = (true_topic[d] + rng.random_range(1..z)) % z;
        labels[d] = Some(category_label(wrong));
    }

    let width = (cfg.n_docs.max(2) - 1).to_string().len();
    let ids = (0..cfg.n_docs).map(|i| format!("doc{i:0width$}")).collect();
    let corpus = TokenizedCorpus::new(w, docs, ids, labels)?;
    Ok(SynthCorpus { corpus, true_topic, planted })
}

/// Stand-in for raw classifier scores: each document's word frequencies
/// scaled to a maximum of 1, plus independent Gaussian noise with standard
/// deviation `noise_scale` on every dimension.
pub fn raw_scores(corpus: &TokenizedCorpus, noise_scale: f64, seed: u64) -> Result<FeatureMatrix> {
    let noise =
        Normal::new(0.0, noise_scale).map_err(|e| Error::InvalidConfig(format!("noise scale {noise_scale}: {e}")))?;
    let mut rng = crate::sampler::stream_rng(seed, 1);
    let w = corpus.vocab_size();
    let mut values = Vec::with_capacity(corpus.n_docs() * w);
    let mut counts = vec![0u32; w];
    for doc in corpus.docs() {
        counts.fill(0);
        for &t in doc {
            counts[t as usize] += 1;
        }
        let max = *counts.iter().max().unwrap_or(&1) as f64;
        values.extend(counts.iter().map(|&c| (c as f64 / max + noise.sample(&mut rng)) as f32));
    }
    FeatureMatrix::new(w, values, corpus.doc_ids().to_vec(), corpus.categories().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_topics_use_their_block() {
        let s = generate(&SynthConfig::default()).unwrap();
        assert_eq!(s.corpus.n_docs(), 400);
        assert_eq!(s.corpus.total_tokens(), 8000);
        for (doc, &k) in s.corpus.docs().iter().zip(&s.true_topic) {
            let (lo, hi) = topic_block(k, 4, 100);
            assert!(doc.iter().all(|&t| (lo..hi).contains(&(t as usize))));
        }
        assert_eq!(s.true_topic.iter().filter(|&&k| k == 3).count(), 100);
        assert!(s.planted.is_empty());
    }

    #[test]
    fn planted_labels_are_wrong_and_counted() {
        let cfg = SynthConfig { mislabel_rate: 0.05, seed: 3, ..Default::default() };
        let s = generate(&cfg).unwrap();
        assert_eq!(s.planted.len(), 20);
        for (d, label) in s.corpus.categories().iter().enumerate() {
            let truth = category_label(s.true_topic[d]);
            assert_eq!(label.as_deref() != Some(truth.as_str()), s.planted.contains(&d));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SynthConfig { separation: 0.7, mislabel_rate: 0.1, seed: 9, ..Default::default() };
        let (a, b) = (generate(&cfg).unwrap(), generate(&cfg).unwrap());
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.planted, b.planted);
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&SynthConfig { vocab_size: 3, ..Default::default() }).is_err());
        assert!(generate(&SynthConfig { separation: 1.5, ..Default::default() }).is_err());
        assert!(generate(&SynthConfig { n_topics: 1, mislabel_rate: 0.1, ..Default::default() }).is_err());
    }

    #[test]
    fn raw_scores_shape() {
        let s = generate(&SynthConfig { n_docs: 8, ..Default::default() }).unwrap();
        let m = raw_scores(&s.corpus, 0.0, 1).unwrap();
        assert_eq!((m.n_docs(), m.n_dims()), (8, 100));
        assert!(m.row(0).iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(m.row(0).contains(&1.0));
    }
}

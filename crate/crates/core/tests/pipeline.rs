//! End to end through the library: feature files on disk, tokenization,
//! sequential and parallel training, evaluation.

use topiclens::corpus::{
    load_corpus, load_feature_matrix, save_corpus, save_feature_matrix, threshold_tokenize, MatrixFormat,
    TokenizeOptions,
};
use topiclens::eval::{consistent_rate, flag_outliers, CategoryPartition, Method, ScoreTable};
use topiclens::parallel::{run_parallel, ParallelConfig, SyncMode};
use topiclens::sampler::{read_checkpoint, recover_phi, recover_theta, run, write_checkpoint, LdaConfig, SamplerState};
use topiclens::synth::{self, SynthConfig};

#[test]
fn feature_files_to_consistency_report() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth::generate(&SynthConfig { n_docs: 120, n_topics: 3, vocab_size: 30, seed: 2, ..Default::default() })
        .unwrap();
    let m = synth::raw_scores(&s.corpus, 0.05, 2).unwrap();

    for (name, fmt) in [("f.txt", MatrixFormat::Text), ("f.fmx", MatrixFormat::Binary)] {
        let path = dir.path().join(name);
        save_feature_matrix(&m, &path, fmt).unwrap();
        let back = load_feature_matrix(&path, fmt).unwrap();
        assert_eq!(back.doc_ids(), m.doc_ids());
        assert_eq!(back.categories(), m.categories());
        if fmt == MatrixFormat::Binary {
            assert_eq!(back.values(), m.values());
        }
    }

    let (corpus, dropped) = threshold_tokenize(&m, &TokenizeOptions { threshold: 0.5, ..Default::default() }).unwrap();
    assert!(dropped.rows.is_empty());
    let corpus_path = dir.path().join("c.corpus");
    save_corpus(&corpus, &corpus_path).unwrap();
    let corpus = load_corpus(&corpus_path).unwrap();

    let cfg = LdaConfig { n_topics: 3, alpha: 0.3, beta: 0.05, n_iterations: 200, burn_in: 50, seed: 1 };
    let (state, trace) = run(&corpus, &cfg, |_, s| s.check_consistency().unwrap()).unwrap();
    assert_eq!(trace.len(), 200);
    let lls = trace.log_likelihoods();
    assert!(lls[199] > lls[0]);

    let theta = recover_theta(&state, &cfg);
    let phi = recover_phi(&state, &cfg);
    for row in theta.view().rows().into_iter().chain(phi.view().rows()) {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }

    let table = ScoreTable::new(corpus.doc_ids().to_vec(), "topic", theta.into_inner());
    let theta_path = dir.path().join("theta.csv");
    let mut f = std::fs::File::create(&theta_path).unwrap();
    table.write_csv(&mut f).unwrap();
    drop(f);
    let back = ScoreTable::load(&theta_path).unwrap();
    assert_eq!(back.values, table.values);

    let part = CategoryPartition::from_labels(corpus.categories());
    let report = consistent_rate(back.values.view(), &part, &[1, 2], Method::Lda).unwrap();
    for c in &report.categories {
        assert!(c.rate_at_k[&1] >= 0.9, "{report}");
        assert_eq!(c.rate_at_k[&2], 1.0);
    }
    assert!(flag_outliers(back.values.view(), &part, &back.doc_ids).unwrap().len() <= 12);
}

#[test]
fn checkpoint_resumes_parallel_run() {
    let s = synth::generate(&SynthConfig { n_docs: 80, separation: 0.8, seed: 6, ..Default::default() }).unwrap();
    let cfg = LdaConfig { n_topics: 4, alpha: 0.5, beta: 0.1, n_iterations: 10, burn_in: 2, seed: 4 };
    let pcfg = ParallelConfig::new(cfg.clone(), 3, SyncMode::Rotation);
    let (state, _) = run_parallel(&s.corpus, &pcfg, |_, _| {}).unwrap();

    let mut bytes = Vec::new();
    write_checkpoint(state.assignments(), &mut bytes).unwrap();
    let z = read_checkpoint(&mut bytes.as_slice()).unwrap();
    let resumed = SamplerState::from_assignments(&s.corpus, &cfg, z).unwrap();
    resumed.check_consistency().unwrap();
    assert_eq!(resumed.tables().word_topic, state.tables().word_topic);
    assert_eq!(resumed.tables().doc_topic, state.tables().doc_topic);
}

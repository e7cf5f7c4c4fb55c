//! `topiclens` command-line tool.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 bad flags or
//! malformed input, 3 empty corpus, 4 corpus/config mismatch, 5 categories
//! reference a document missing from the scores.

mod manifest;

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use topiclens::corpus::{
    corpus_stats, load_corpus, load_feature_matrix, save_corpus, save_feature_matrix, threshold_tokenize, MatrixFormat,
    TokenizeOptions, Weighting,
};
use topiclens::eval::{
    consistent_rate, flag_outliers, raw_baseline_probs, spectrogram_export, top_documents_per_topic,
    write_outliers_csv, CategoryPartition, Method, ScoreTable,
};
use topiclens::parallel::{run_parallel, scaling_benchmark, ParallelConfig, SyncMode};
use topiclens::sampler::{
    read_checkpoint, recover_phi, recover_theta, run, write_checkpoint, LdaConfig, SamplerState, TraceLog,
};
use topiclens::synth::{self, SynthConfig};
use topiclens::Error;

use manifest::{unix_now, RunManifest};

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CmdResult = std::result::Result<(), Failure>;

fn fail(code: u8, err: impl Into<anyhow::Error>) -> Failure {
    Failure { code, err: err.into() }
}

fn code_for(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        Error::EmptyCorpus => 3,
        Error::CountUnderflow { .. } | Error::Reconciliation(_) => 1,
        _ => 2,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: code_for(&e), err: e.into() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        fail(1, e)
    }
}

trait Ctx<T> {
    fn ctx(self, msg: impl Fn() -> String) -> std::result::Result<T, Failure>;
}

impl<T> Ctx<T> for topiclens::Result<T> {
    fn ctx(self, msg: impl Fn() -> String) -> std::result::Result<T, Failure> {
        self.map_err(|e| {
            let code = code_for(&e);
            fail(code, anyhow::Error::from(e).context(msg()))
        })
    }
}

impl<T> Ctx<T> for std::io::Result<T> {
    fn ctx(self, msg: impl Fn() -> String) -> std::result::Result<T, Failure> {
        self.with_context(msg).map_err(|e| fail(1, e))
    }
}

#[derive(Parser)]
#[command(name = "topiclens", version, about = "Topic extraction from image feature vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Threshold a feature matrix into a bag-of-words corpus.
    Tokenize(TokenizeArgs),
    /// Fit LDA by collapsed Gibbs sampling.
    Train(TrainArgs),
    /// List the top documents of every topic.
    Topics(TopicsArgs),
    /// Consistent rate and outlier reports against ground-truth categories.
    Eval(EvalArgs),
    /// Export a document-topic heatmap as CSV and PGM.
    Spectrogram(SpectrogramArgs),
    /// Per-iteration timing across thread counts.
    Bench(BenchArgs),
    /// Generate a synthetic corpus with known topics.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Binary,
}

impl From<FormatArg> for MatrixFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => MatrixFormat::Text,
            FormatArg::Binary => MatrixFormat::Binary,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Binary,
    Proportional,
}

#[derive(Clone, Copy, ValueEnum)]
enum SyncArg {
    Rotation,
    EpochMerge,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Raw,
    Lda,
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: FormatArg,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    threshold: f64,
    /// Keep every dimension regardless of score.
    #[arg(long, conflicts_with = "threshold")]
    keep_all: bool,
    #[arg(long, value_enum, default_value = "binary")]
    weighting: WeightingArg,
    #[arg(long, default_value_t = 8)]
    max_repeats: u32,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    topics: usize,
    /// Defaults to 50 / topics.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 200)]
    burn_in: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "TOPICLENS_THREADS", default_value_t = 1)]
    threads: usize,
    #[arg(long, value_enum, default_value = "rotation")]
    sync: SyncArg,
    /// Rotation mode; defaults to the thread count.
    #[arg(long)]
    word_slices: Option<usize>,
    /// Start from a saved assignment instead of a random one (sequential only).
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Suppress the per-iteration progress line on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct TopicsArgs {
    #[arg(long)]
    theta: PathBuf,
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Score CSV (`doc_id,...`), e.g. theta.csv from `train`.
    #[arg(long, required_unless_present = "features", conflicts_with = "features")]
    scores: Option<PathBuf>,
    /// Raw feature matrix to score directly.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: FormatArg,
    /// Softmax-normalize raw feature rows first.
    #[arg(long)]
    softmax: bool,
    /// CSV `doc_id,category`.
    #[arg(long)]
    categories: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    k: Vec<usize>,
    /// Defaults to `raw` with --features and `lda` with --scores.
    #[arg(long, value_enum)]
    method_tag: Option<MethodArg>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SpectrogramArgs {
    #[arg(long)]
    theta: PathBuf,
    /// CSV `doc_id,category`; documents are grouped by category.
    #[arg(long)]
    group_by: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Pixel width of each topic column.
    #[arg(long, default_value_t = 16)]
    cell_width: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    topics: usize,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    /// Iteration count the totals are extrapolated to.
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    measure_iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 400)]
    docs: usize,
    #[arg(long, default_value_t = 4)]
    topics: usize,
    #[arg(long, default_value_t = 100)]
    vocab: usize,
    #[arg(long, default_value_t = 20)]
    tokens_per_doc: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.0)]
    mislabel_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus path; `<output>.categories.csv` and `<output>.planted.csv` are
    /// written alongside.
    #[arg(long)]
    output: PathBuf,
    /// Also write noisy raw scores (word frequencies plus Gaussian noise of
    /// this standard deviation) as `<output>.features.txt`.
    #[arg(long)]
    raw_noise: Option<f64>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> std::result::Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).ctx(|| format!("creating {}", path.display()))
}

fn read_categories(path: &Path) -> std::result::Result<Vec<(String, String)>, Failure> {
    let reader = BufReader::new(File::open(path).ctx(|| format!("opening {}", path.display()))?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() || (i == 0 && line == "doc_id,category") {
            continue;
        }
        let (id, cat) = line
            .split_once(',')
            .ok_or_else(|| fail(2, anyhow!("{}:{}: expected `doc_id,category`", path.display(), i + 1)))?;
        pairs.push((id.to_string(), cat.to_string()));
    }
    Ok(pairs)
}

fn partition_for(doc_ids: &[String], pairs: &[(String, String)]) -> std::result::Result<CategoryPartition, Failure> {
    let known: HashSet<&str> = doc_ids.iter().map(String::as_str).collect();
    if let Some((id, _)) = pairs.iter().find(|(id, _)| !known.contains(id.as_str())) {
        return Err(fail(5, anyhow!("categories reference doc_id {id:?}, which is missing from the scores")));
    }
    Ok(CategoryPartition::from_assignments(doc_ids, pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())))?)
}

fn cmd_tokenize(a: TokenizeArgs) -> CmdResult {
    let started = unix_now();
    let m = load_feature_matrix(&a.input, a.format.into()).ctx(|| format!("reading {}", a.input.display()))?;
    let opts = TokenizeOptions {
        threshold: if a.keep_all { f64::NEG_INFINITY } else { a.threshold },
        weighting: match a.weighting {
            WeightingArg::Binary => Weighting::Binary,
            WeightingArg::Proportional => Weighting::Proportional,
        },
        max_repeats: a.max_repeats,
    };
    let (corpus, dropped) = threshold_tokenize(&m, &opts).ctx(|| "tokenizing".into())?;
    save_corpus(&corpus, &a.output).ctx(|| format!("writing {}", a.output.display()))?;
    let dropped_path = sibling(&a.output, ".dropped.csv");
    let mut w = create(&dropped_path)?;
    dropped.write_csv(&mut w)?;
    w.flush()?;

    let mut manifest = RunManifest::new(
        "tokenize",
        json!({
            "threshold": if a.keep_all { "keep-all".to_string() } else { a.threshold.to_string() },
            "weighting": format!("{:?}", opts.weighting),
            "max_repeats": a.max_repeats,
        }),
        started,
    );
    manifest.add_input(&a.input)?;
    manifest.outputs = vec![a.output.clone(), dropped_path];
    manifest.write(&sibling(&a.output, ".manifest.json"))?;

    println!("{}", corpus_stats(&corpus));
    if !dropped.rows.is_empty() {
        eprintln!("dropped {} rows with no score above the threshold", dropped.rows.len());
    }
    Ok(())
}

fn write_trace(trace: &TraceLog, path: &Path) -> CmdResult {
    let mut w = create(path)?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let started = unix_now();
    let corpus = load_corpus(&a.corpus).ctx(|| format!("reading {}", a.corpus.display()))?;
    let cfg = LdaConfig {
        n_topics: a.topics,
        alpha: a.alpha.unwrap_or(50.0 / a.topics.max(1) as f64),
        beta: a.beta,
        n_iterations: a.iterations,
        burn_in: a.burn_in,
        seed: a.seed,
    };
    cfg.validate()?;
    let sync = match a.sync {
        SyncArg::Rotation => SyncMode::Rotation,
        SyncArg::EpochMerge => SyncMode::EpochMerge,
    };
    let pcfg =
        ParallelConfig { base: cfg.clone(), n_threads: a.threads, sync_mode: sync, n_word_slices: a.word_slices };
    pcfg.validate()?;
    fs::create_dir_all(&a.out_dir).ctx(|| format!("creating {}", a.out_dir.display()))?;

    let quiet = a.quiet;
    let n_iter = cfg.n_iterations;
    let progress = |it: usize, s: &SamplerState| {
        if !quiet && (it == n_iter || it.is_multiple_of(10) || it == 1) {
            eprintln!("iteration {it}/{n_iter} tokens={}", s.n_tokens());
        }
    };

    let (state, trace) = if let Some(ckpt) = &a.init_from {
        if a.threads != 1 {
            return Err(fail(2, anyhow!("--init-from is only supported with --threads 1")));
        }
        let z = read_checkpoint(BufReader::new(File::open(ckpt).ctx(|| format!("opening {}", ckpt.display()))?))?;
        let mut state = SamplerState::from_assignments(&corpus, &cfg, z).map_err(|e| {
            fail(4, anyhow::Error::from(e).context(format!("{} does not fit the corpus", ckpt.display())))
        })?;
        let mut trace = TraceLog::default();
        for it in 1..=n_iter {
            let t = std::time::Instant::now();
            state.gibbs_iteration(&cfg)?;
            let duration_ms = t.elapsed().as_secs_f64() * 1e3;
            trace.iterations.push(topiclens::sampler::IterationTrace {
                iteration: it,
                duration_ms,
                log_likelihood: topiclens::sampler::estimate_log_likelihood(&state, &cfg),
            });
            progress(it, &state);
        }
        (state, trace)
    } else if a.threads == 1 {
        run(&corpus, &cfg, progress)?
    } else {
        run_parallel(&corpus, &pcfg, progress)?
    };
    state.check_consistency()?;
    let last_ll = trace.iterations.last().map_or(f64::NAN, |t| t.log_likelihood);

    let ckpt_path = a.out_dir.join("z.ldz");
    let mut w = create(&ckpt_path)?;
    write_checkpoint(state.assignments(), &mut w)?;
    w.flush()?;

    let theta = recover_theta(&state, &cfg);
    let theta_path = a.out_dir.join("theta.csv");
    let mut w = create(&theta_path)?;
    ScoreTable::new(corpus.doc_ids().to_vec(), "topic_", theta.into_inner()).write_csv(&mut w)?;
    w.flush()?;

    let phi = recover_phi(&state, &cfg);
    let phi_path = a.out_dir.join("phi.csv");
    let topic_ids = (0..cfg.n_topics).map(|k| format!("topic_{k}")).collect();
    let mut w = create(&phi_path)?;
    ScoreTable::new(topic_ids, "word_", phi.into_inner()).write_csv(&mut w)?;
    w.flush()?;

    let trace_path = a.out_dir.join("trace.csv");
    write_trace(&trace, &trace_path)?;

    let mut manifest = RunManifest::new(
        "train",
        json!({
            "n_topics": cfg.n_topics,
            "alpha": cfg.alpha,
            "beta": cfg.beta,
            "n_iterations": cfg.n_iterations,
            "burn_in": cfg.burn_in,
            "seed": cfg.seed,
            "n_threads": a.threads,
            "sync_mode": format!("{sync:?}"),
            "n_word_slices": pcfg.word_slices(),
            "init_from": a.init_from,
        }),
        started,
    );
    manifest.add_input(&a.corpus)?;
    if let Some(ckpt) = &a.init_from {
        manifest.add_input(ckpt)?;
    }
    manifest.outputs = vec![ckpt_path, theta_path, phi_path, trace_path];
    manifest.write(&a.out_dir.join("manifest.json"))?;

    println!(
        "docs={} tokens={} topics={} iterations={} threads={} final_ll={}",
        corpus.n_docs(),
        state.n_tokens(),
        cfg.n_topics,
        cfg.n_iterations,
        a.threads,
        last_ll
    );
    Ok(())
}

fn cmd_topics(a: TopicsArgs) -> CmdResult {
    let table = ScoreTable::load(&a.theta).ctx(|| format!("reading {}", a.theta.display()))?;
    if a.top == 0 {
        return Err(fail(2, anyhow!("--top must be at least 1")));
    }
    let tops = top_documents_per_topic(table.values.view(), a.top);
    if a.json {
        let topics: Vec<_> = tops
            .iter()
            .enumerate()
            .map(|(k, docs)| {
                json!({
                    "topic": k,
                    "docs": docs.iter().map(|&d| json!({
                        "doc_id": table.doc_ids[d],
                        "theta": table.values[[d, k]],
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&json!({ "topics": topics })).map_err(|e| fail(1, e))?);
    } else {
        for (k, docs) in tops.iter().enumerate() {
            let ids: Vec<&str> = docs.iter().map(|&d| table.doc_ids[d].as_str()).collect();
            println!("topic {k}: {}", ids.join(" "));
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (doc_ids, scores, default_method) = match (&a.scores, &a.features) {
        (Some(path), _) => {
            let t = ScoreTable::load(path).ctx(|| format!("reading {}", path.display()))?;
            (t.doc_ids, t.values, Method::Lda)
        }
        (None, Some(path)) => {
            let m = load_feature_matrix(path, a.format.into()).ctx(|| format!("reading {}", path.display()))?;
            (m.doc_ids().to_vec(), raw_baseline_probs(&m, a.softmax), Method::Raw)
        }
        (None, None) => unreachable!("clap requires one of --scores / --features"),
    };
    let method = match a.method_tag {
        Some(MethodArg::Raw) => Method::Raw,
        Some(MethodArg::Lda) => Method::Lda,
        None => default_method,
    };
    let pairs = read_categories(&a.categories)?;
    let part = partition_for(&doc_ids, &pairs)?;
    let report = consistent_rate(scores.view(), &part, &a.k, method)?;
    let outliers = flag_outliers(scores.view(), &part, &doc_ids)?;

    fs::create_dir_all(&a.out_dir).ctx(|| format!("creating {}", a.out_dir.display()))?;
    let report_path = a.out_dir.join("consistency.csv");
    let mut w = create(&report_path)?;
    report.write_csv(&mut w, true)?;
    w.flush()?;
    let outlier_path = a.out_dir.join("outliers.csv");
    let mut w = create(&outlier_path)?;
    write_outliers_csv(&outliers, &mut w)?;
    w.flush()?;

    print!("{report}");
    println!("flagged={}", outliers.len());
    Ok(())
}

fn cmd_spectrogram(a: SpectrogramArgs) -> CmdResult {
    let table = ScoreTable::load(&a.theta).ctx(|| format!("reading {}", a.theta.display()))?;
    let order = match &a.group_by {
        Some(path) => {
            let pairs = read_categories(path)?;
            partition_for(&table.doc_ids, &pairs)?.grouped_order(table.doc_ids.len())
        }
        None => (0..table.doc_ids.len()).collect(),
    };
    let (csv, pgm) = spectrogram_export(table.values.view(), &table.doc_ids, &order, &a.output, a.cell_width)
        .ctx(|| format!("writing {}", a.output.display()))?;
    println!("{}\n{}", csv.display(), pgm.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let started = unix_now();
    if a.threads.is_empty() || a.threads.contains(&0) {
        return Err(fail(2, anyhow!("--threads needs positive thread counts")));
    }
    let corpus = load_corpus(&a.corpus).ctx(|| format!("reading {}", a.corpus.display()))?;
    let base = LdaConfig {
        n_topics: a.topics,
        alpha: a.alpha.unwrap_or(50.0 / a.topics.max(1) as f64),
        beta: a.beta,
        n_iterations: a.iterations,
        burn_in: 0,
        seed: a.seed,
    };
    base.validate()?;
    let report = scaling_benchmark(&corpus, &base, &a.threads, a.measure_iterations)?;

    fs::create_dir_all(&a.out_dir).ctx(|| format!("creating {}", a.out_dir.display()))?;
    let iter_path = a.out_dir.join("bench_iterations.csv");
    let mut w = create(&iter_path)?;
    report.write_iterations_csv(&mut w)?;
    w.flush()?;
    let summary_path = a.out_dir.join("bench_summary.csv");
    let mut w = create(&summary_path)?;
    report.write_summary_csv(&mut w)?;
    w.flush()?;

    let mut manifest = RunManifest::new(
        "bench",
        json!({
            "n_topics": base.n_topics,
            "alpha": base.alpha,
            "beta": base.beta,
            "n_iterations": base.n_iterations,
            "seed": base.seed,
            "threads": a.threads,
            "measure_iterations": a.measure_iterations,
        }),
        started,
    );
    manifest.add_input(&a.corpus)?;
    manifest.outputs = vec![iter_path, summary_path];
    manifest.write(&a.out_dir.join("manifest.json"))?;

    println!("n_threads,median_ms,estimated_total_ms,speedup");
    for (r, s) in report.records.iter().zip(report.speedups()) {
        println!("{},{:.3},{:.1},{:.3}", r.n_threads, r.median_ms, r.estimated_total_ms, s);
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        n_docs: a.docs,
        n_topics: a.topics,
        vocab_size: a.vocab,
        tokens_per_doc: a.tokens_per_doc,
        separation: a.separation,
        mislabel_rate: a.mislabel_rate,
        seed: a.seed,
    };
    let s = synth::generate(&cfg)?;
    save_corpus(&s.corpus, &a.output).ctx(|| format!("writing {}", a.output.display()))?;

    let mut w = create(&sibling(&a.output, ".categories.csv"))?;
    writeln!(w, "doc_id,category")?;
    for (id, cat) in s.corpus.doc_ids().iter().zip(s.corpus.categories()) {
        writeln!(w, "{id},{}", cat.as_deref().unwrap_or(""))?;
    }
    w.flush()?;

    let mut w = create(&sibling(&a.output, ".planted.csv"))?;
    writeln!(w, "doc_id,true_category,label")?;
    for &d in &s.planted {
        writeln!(
            w,
            "{},{},{}",
            s.corpus.doc_ids()[d],
            synth::category_label(s.true_topic[d]),
            s.corpus.categories()[d].as_deref().unwrap_or("")
        )?;
    }
    w.flush()?;

    if let Some(noise) = a.raw_noise {
        let m = synth::raw_scores(&s.corpus, noise, a.seed)?;
        let path = sibling(&a.output, ".features.txt");
        save_feature_matrix(&m, &path, MatrixFormat::Text).ctx(|| format!("writing {}", path.display()))?;
    }
    println!("{}", corpus_stats(&s.corpus));
    println!("planted={}", s.planted.len());
    Ok(())
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Tokenize(a) => cmd_tokenize(a),
        Command::Train(a) => cmd_train(a),
        Command::Topics(a) => cmd_topics(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Spectrogram(a) => cmd_spectrogram(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}

//! Command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then a flat
//! `key = value` config file (`--config`), then individual flags. Every run
//! writes `manifest.json` and `config.txt` next to its outputs;
//! `config.txt` can be passed back as `--config` to repeat the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    apply_preprocess, generate_synthetic, load_embeddings, parse_corpus, preprocess,
    split_train_val, write_corpus, PatientRecord, PreprocessConfig, SyntheticSpec,
    DEFAULT_EMBEDDING_DIM,
};
use crate::evaluation::{
    evaluate, export_pca, run_ablations, write_metrics_csv, write_pca_csv, MetricReport,
};
use crate::hypergraph::{construct, construct_all, FeatureScale, GraphContext};
use crate::model::VARIANT_NAMES;
use crate::training::{fit, grad_check, seeds, write_epoch_csv, GradCheckConfig, TrainConfig};

/// Gradient checks at or above this relative error fail.
pub const GRADCHECK_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(
    name = "mlhgnn",
    version,
    about = "Multi-level hypergraph classifier for hierarchical note corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic JSONL corpus.
    Synth(SynthArgs),
    /// Preprocess a corpus, train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a corpus with a checkpoint and write bucketed metrics.
    Eval(EvalArgs),
    /// Train and evaluate several variants over several seeds.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Project one patient's final word-node embeddings to 2-d.
    ExportPca(ExportPcaArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON file with generator settings; defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Settings shared by every subcommand that trains.
#[derive(Debug, Args, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    max_notes: Option<usize>,
    #[arg(long)]
    top_taxonomies: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write the named patient's graph as JSON.
    #[arg(long, value_name = "PATIENT_ID")]
    dump_graph: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Label written to the `split` column.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Held-out corpus; without it `test_fraction` of `--corpus` is held out.
    #[arg(long)]
    test_corpus: Option<PathBuf>,
    /// Comma-separated variant names (default: all).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Comma-separated seeds (default: 0..9).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExportPcaArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    patient: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write the patient's graph as JSON.
    #[arg(long)]
    dump_graph: bool,
}

/// A problem with how the program was invoked; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Fully resolved settings for a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub embedding_dim: usize,
    pub test_fraction: f64,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            corpus: None,
            test_corpus: None,
            embeddings: None,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            test_fraction: 0.3,
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Keys accepted in a config file, in echo order.
pub const CONFIG_KEYS: [&str; 19] = [
    "corpus",
    "test_corpus",
    "embeddings",
    "embedding_dim",
    "seed",
    "variant",
    "learning_rate",
    "dropout",
    "hidden_dim",
    "epochs",
    "batch_size",
    "val_fraction",
    "test_fraction",
    "beta1",
    "beta2",
    "epsilon",
    "max_notes",
    "top_taxonomies",
    "min_token_freq",
];

impl Settings {
    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> anyhow::Result<T> {
            value
                .parse()
                .map_err(|_| anyhow::anyhow!("invalid value `{value}` for `{key}`"))
        }
        let path = |v: &str| {
            if v.is_empty() {
                None
            } else {
                Some(PathBuf::from(v))
            }
        };
        match key {
            "corpus" => self.corpus = path(value),
            "test_corpus" => self.test_corpus = path(value),
            "embeddings" => self.embeddings = path(value),
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "variant" => self.train.variant = value.to_string(),
            "learning_rate" => self.train.learning_rate = num(key, value)?,
            "dropout" => self.train.dropout = num(key, value)?,
            "hidden_dim" => self.train.hidden_dim = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "val_fraction" => self.train.val_fraction = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "beta1" => self.train.beta1 = num(key, value)?,
            "beta2" => self.train.beta2 = num(key, value)?,
            "epsilon" => self.train.epsilon = num(key, value)?,
            "max_notes" => self.preprocess.max_notes = num(key, value)?,
            "top_taxonomies" => self.preprocess.top_taxonomies = num(key, value)?,
            "min_token_freq" => self.preprocess.min_token_freq = num(key, value)?,
            "lowercase" => self.preprocess.lowercase = num(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Parses a config file body. Blank lines and `#` comments are ignored.
    pub fn apply_config_text(&mut self, text: &str) -> anyhow::Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("config line {}: expected `key = value`", i + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(())
    }

    fn apply_overrides(&mut self, o: &Overrides) -> anyhow::Result<()> {
        if let Some(path) = &o.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            self.apply_config_text(&text)
                .with_context(|| format!("in config file {}", path.display()))?;
        }
        if let Some(v) = &o.corpus {
            self.corpus = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = &o.variant {
            self.train.variant = v.clone();
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.lr {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.dropout {
            self.train.dropout = v;
        }
        if let Some(v) = o.hidden {
            self.train.hidden_dim = v;
        }
        if let Some(v) = o.batch {
            self.train.batch_size = v;
        }
        if let Some(v) = &o.embeddings {
            self.embeddings = Some(v.clone());
        }
        if let Some(v) = o.embedding_dim {
            self.embedding_dim = v;
        }
        if let Some(v) = o.max_notes {
            self.preprocess.max_notes = v;
        }
        if let Some(v) = o.top_taxonomies {
            self.preprocess.top_taxonomies = v;
        }
        Ok(())
    }

    /// Defaults, then the config file, then flags.
    fn resolve(o: &Overrides) -> anyhow::Result<Self> {
        let mut s = Self::default();
        s.apply_overrides(o)?;
        Ok(s)
    }

    /// `key = value` lines in the config-file format.
    pub fn to_config_text(&self) -> String {
        let p = |v: &Option<PathBuf>| {
            v.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let t = &self.train;
        let values = [
            p(&self.corpus),
            p(&self.test_corpus),
            p(&self.embeddings),
            self.embedding_dim.to_string(),
            t.seed.to_string(),
            t.variant.clone(),
            t.learning_rate.to_string(),
            t.dropout.to_string(),
            t.hidden_dim.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.val_fraction.to_string(),
            self.test_fraction.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.epsilon.to_string(),
            self.preprocess.max_notes.to_string(),
            self.preprocess.top_taxonomies.to_string(),
            self.preprocess.min_token_freq.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "lowercase = {}", self.preprocess.lowercase);
        out
    }

    fn require_corpus(&self) -> anyhow::Result<&Path> {
        match &self.corpus {
            Some(p) => Ok(p),
            None => Err(UsageError(
                "no corpus given (use --corpus or `corpus = ...` in --config)".into(),
            )
            .into()),
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    artifact_version: &'static str,
    subcommand: String,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_manifest(
    out: &Path,
    subcommand: &str,
    seed: u64,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&str],
) -> anyhow::Result<()> {
    let mut hashes = BTreeMap::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = Manifest {
        artifact_version: env!("CARGO_PKG_VERSION"),
        subcommand: subcommand.to_string(),
        seed,
        config,
        inputs: hashes,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Runs the program on `argv` (including the program name) and returns the
/// process exit status: 0 on success, 1 on runtime failure, 2 on usage
/// errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ExportPca(a) => export(a),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<i32> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let records = generate_synthetic(&spec)?;
    ensure_dir(&a.out)?;
    let path = a.out.join("corpus.jsonl");
    write_corpus(&path, &records)?;
    let inputs: Vec<&Path> = a.spec.as_deref().into_iter().collect();
    write_manifest(
        &a.out,
        "synth",
        spec.seed,
        serde_json::to_value(&spec)?,
        &inputs,
        &["corpus.jsonl"],
    )?;
    let positives = records.iter().filter(|r| r.label == 1).count();
    println!(
        "wrote {} patients ({positives} positive) to {}",
        records.len(),
        path.display()
    );
    Ok(0)
}

fn train(a: TrainArgs) -> anyhow::Result<i32> {
    let settings = Settings::resolve(&a.overrides)?;
    print!("{}", settings.to_config_text());
    let corpus_path = settings.require_corpus()?.to_path_buf();
    settings.train.validate()?;

    let raw = parse_corpus(&corpus_path)?;
    let pre = preprocess(&raw, &settings.preprocess)?;
    let embeddings = load_embeddings(
        settings.embeddings.as_deref(),
        &pre.vocab,
        settings.embedding_dim,
        seeds::derive(settings.train.seed, seeds::EMBEDDINGS),
    )?;
    let ctx = GraphContext {
        vocab: &pre.vocab,
        embeddings: &embeddings,
        taxonomies: &pre.taxonomies,
        scale: FeatureScale::new(
            pre.vocab.len(),
            settings.preprocess.max_notes,
            pre.taxonomies.len(),
        ),
        lowercase: settings.preprocess.lowercase,
    };
    let graphs = construct_all(&pre.records, &ctx)?;
    println!(
        "{} patients, vocabulary {}, {} taxonomies",
        graphs.len(),
        pre.vocab.len(),
        pre.taxonomies.len()
    );

    ensure_dir(&a.out)?;
    let mut outputs = vec!["config.txt", "epochs.csv", "checkpoint.json"];
    if let Some(id) = &a.dump_graph {
        let g = graphs
            .iter()
            .find(|g| &g.patient_id == id)
            .ok_or_else(|| UsageError(format!("patient `{id}` not in the preprocessed corpus")))?;
        let json = g.debug_json(&pre.vocab, &pre.taxonomies);
        write_text(
            &a.out.join("graph.json"),
            &serde_json::to_string_pretty(&json)?,
        )?;
        outputs.push("graph.json");
    }

    let result = fit(&graphs, &settings.train)?;
    for r in &result.reports {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
        println!(
            "epoch {:>3}  loss {:.6}  val_auprc {}  val_auroc {}",
            r.epoch,
            r.loss,
            fmt(r.val_auprc),
            fmt(r.val_auroc)
        );
    }
    write_text(&a.out.join("config.txt"), &settings.to_config_text())?;
    write_epoch_csv(&a.out.join("epochs.csv"), &result.reports)?;
    let scale = ctx.scale;
    Checkpoint::new(
        result.params,
        settings.train.seed,
        settings.preprocess.clone(),
        pre.vocab,
        pre.taxonomies,
        scale,
        embeddings,
    )
    .save(&a.out.join("checkpoint.json"))?;

    let mut inputs = vec![corpus_path.as_path()];
    inputs.extend(settings.embeddings.as_deref());
    inputs.extend(a.overrides.config.as_deref());
    write_manifest(
        &a.out,
        "train",
        settings.train.seed,
        serde_json::to_value(&settings)?,
        &inputs,
        &outputs,
    )?;
    Ok(0)
}

/// Loads a checkpoint and rebuilds graphs for `records` with its fitted
/// vocabulary, taxonomy table and embeddings.
fn checkpoint_graphs(
    ckpt: &Checkpoint,
    records: &[PatientRecord],
) -> anyhow::Result<Vec<crate::hypergraph::PatientHypergraph>> {
    let kept = apply_preprocess(records, &ckpt.vocab, &ckpt.taxonomies, &ckpt.preprocess)?;
    let ctx = GraphContext {
        vocab: &ckpt.vocab,
        embeddings: &ckpt.embeddings,
        taxonomies: &ckpt.taxonomies,
        scale: ckpt.scale,
        lowercase: ckpt.preprocess.lowercase,
    };
    Ok(construct_all(&kept, &ctx)?)
}

fn eval(a: EvalArgs) -> anyhow::Result<i32> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let records = parse_corpus(&a.corpus)?;
    let graphs = checkpoint_graphs(&ckpt, &records)?;
    if graphs.len() < records.len() {
        eprintln!(
            "note: {} of {} patients had no in-vocabulary text and were skipped",
            records.len() - graphs.len(),
            records.len()
        );
    }
    let report = evaluate(&ckpt.params, &graphs, ckpt.seed, &a.split)?;
    ensure_dir(&a.out)?;
    write_metrics_csv(&a.out.join("metrics.csv"), std::slice::from_ref(&report))?;
    print!("{}", report.csv_rows());
    write_manifest(
        &a.out,
        "eval",
        ckpt.seed,
        serde_json::json!({ "split": a.split, "variant": ckpt.variant }),
        &[a.checkpoint.as_path(), a.corpus.as_path()],
        &["metrics.csv"],
    )?;
    Ok(0)
}

fn ablate(a: AblateArgs) -> anyhow::Result<i32> {
    let mut settings = Settings::resolve(&a.overrides)?;
    if let Some(p) = &a.test_corpus {
        settings.test_corpus = Some(p.clone());
    }
    print!("{}", settings.to_config_text());
    let corpus_path = settings.require_corpus()?.to_path_buf();
    settings.train.validate()?;
    let variants: Vec<String> = if a.variants.is_empty() {
        VARIANT_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        a.variants.clone()
    };
    let seed_list: Vec<u64> = if a.seeds.is_empty() {
        (0..10).collect()
    } else {
        a.seeds.clone()
    };

    let raw = parse_corpus(&corpus_path)?;
    let (train_raw, test_raw) = match &settings.test_corpus {
        Some(p) => (raw, parse_corpus(p)?),
        None => {
            let split_seed = seeds::derive(settings.train.seed, seeds::SPLIT);
            split_train_val(&raw, settings.test_fraction, split_seed)?
        }
    };
    let pre = preprocess(&train_raw, &settings.preprocess)?;
    let embeddings = load_embeddings(
        settings.embeddings.as_deref(),
        &pre.vocab,
        settings.embedding_dim,
        seeds::derive(settings.train.seed, seeds::EMBEDDINGS),
    )?;
    let ctx = GraphContext {
        vocab: &pre.vocab,
        embeddings: &embeddings,
        taxonomies: &pre.taxonomies,
        scale: FeatureScale::new(
            pre.vocab.len(),
            settings.preprocess.max_notes,
            pre.taxonomies.len(),
        ),
        lowercase: settings.preprocess.lowercase,
    };
    let train_graphs = construct_all(&pre.records, &ctx)?;
    let test_kept = apply_preprocess(&test_raw, &pre.vocab, &pre.taxonomies, &settings.preprocess)?;
    let test_graphs = construct_all(&test_kept, &ctx)?;
    println!(
        "{} train / {} test patients",
        train_graphs.len(),
        test_graphs.len()
    );

    let start = Instant::now();
    let table = run_ablations(
        &train_graphs,
        &test_graphs,
        &settings.train,
        &variants,
        &seed_list,
        |r: &MetricReport| {
            eprintln!(
                "[{:>7.1}s] {} seed {}: auprc {:.4} auroc {:.4}",
                start.elapsed().as_secs_f64(),
                r.variant,
                r.seed,
                r.auprc(),
                r.auroc()
            );
        },
    )?;
    ensure_dir(&a.out)?;
    let csv = table.to_csv();
    write_text(&a.out.join("ablation.csv"), &csv)?;
    let runs: Vec<MetricReport> = table.rows.iter().flat_map(|r| r.runs.clone()).collect();
    write_metrics_csv(&a.out.join("ablation_runs.csv"), &runs)?;
    write_text(&a.out.join("config.txt"), &settings.to_config_text())?;
    print!("{csv}");

    let mut inputs = vec![corpus_path.as_path()];
    inputs.extend(settings.test_corpus.as_deref());
    inputs.extend(settings.embeddings.as_deref());
    inputs.extend(a.overrides.config.as_deref());
    let config =
        serde_json::json!({ "settings": settings, "variants": variants, "seeds": seed_list });
    write_manifest(
        &a.out,
        "ablate",
        settings.train.seed,
        config,
        &inputs,
        &["config.txt", "ablation.csv", "ablation_runs.csv"],
    )?;
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<i32> {
    let start = Instant::now();
    let report = grad_check(&GradCheckConfig::default(), a.seed)?;
    for t in &report.tensors {
        println!(
            "{:<12} {:<24} {:.3e}",
            t.variant, t.tensor, t.max_relative_error
        );
    }
    println!("max relative error: {:.3e}", report.max_relative_error);
    println!("elapsed: {:.2}s", start.elapsed().as_secs_f64());
    if report.max_relative_error < GRADCHECK_THRESHOLD {
        Ok(0)
    } else {
        eprintln!("gradient check failed: threshold {GRADCHECK_THRESHOLD:e}");
        Ok(1)
    }
}

fn export(a: ExportPcaArgs) -> anyhow::Result<i32> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let records = parse_corpus(&a.corpus)?;
    let record = records
        .iter()
        .find(|r| r.patient_id == a.patient)
        .ok_or_else(|| {
            UsageError(format!(
                "patient `{}` not in {}",
                a.patient,
                a.corpus.display()
            ))
        })?;
    let kept = apply_preprocess(
        std::slice::from_ref(record),
        &ckpt.vocab,
        &ckpt.taxonomies,
        &ckpt.preprocess,
    )?;
    let ctx = GraphContext {
        vocab: &ckpt.vocab,
        embeddings: &ckpt.embeddings,
        taxonomies: &ckpt.taxonomies,
        scale: ckpt.scale,
        lowercase: ckpt.preprocess.lowercase,
    };
    let graph = construct(&kept[0], &ctx)?;
    let (projection, rows) = export_pca(
        &ckpt.params,
        &graph,
        &ckpt.vocab,
        &ckpt.taxonomies,
        ckpt.seed,
    )?;
    ensure_dir(&a.out)?;
    write_pca_csv(&a.out.join("pca.csv"), &rows)?;
    let mut outputs = vec!["pca.csv"];
    if a.dump_graph {
        let json = graph.debug_json(&ckpt.vocab, &ckpt.taxonomies);
        write_text(
            &a.out.join("graph.json"),
            &serde_json::to_string_pretty(&json)?,
        )?;
        outputs.push("graph.json");
    }
    println!(
        "{} word nodes, explained variance {:.4} / {:.4}",
        rows.len(),
        projection.explained_variance_ratio[0],
        projection.explained_variance_ratio[1]
    );
    write_manifest(
        &a.out,
        "export-pca",
        ckpt.seed,
        serde_json::json!({ "patient": a.patient }),
        &[a.checkpoint.as_path(), a.corpus.as_path()],
        &outputs,
    )?;
    Ok(0)
}

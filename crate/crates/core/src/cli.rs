//! The `temprank` command line: corpus generation, statistics, training,
//! prediction and the evaluation protocols.
//!
//! Settings come from an optional JSON config file (a serialized
//! [`RunConfig`]) overridden by flags. Every artifact carries the
//! fingerprint of the merged config, and every subcommand prints a one-line
//! summary to stdout. Logs go to stderr. `TEMPRANK_THREADS` caps the worker
//! pool.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::baselines::Method;
use crate::corpus::{
    frequency_buckets, generate_synthetic, load_jsonl, split_stats, DatasetSplit, LabelSchema, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    bucket_report, compare_methods, fewshot_curve, fingerprint, fit, template_sweep, vocab_for, zeroshot_transfer, Domain,
    EvalReport, ExperimentConfig, Fitted, ReportRow,
};
use crate::inference::{Candidates, Prediction, Task};
use crate::io::write_atomic;
use crate::model::{load_checkpoint, read_meta, save_checkpoint, Precision, Real};
use crate::templates::TemplateTask;

#[derive(Debug, Parser)]
#[command(name = "temprank", version, about = "Template-ranking aspect sentiment classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled corpus (schema.json and three JSONL splits).
    Synth(SynthArgs),
    /// Split statistics and category frequency buckets.
    Stats(RunArgs),
    /// Train one method and save a checkpoint plus training history.
    Train(RunArgs),
    /// Predict the test split with a saved checkpoint.
    Predict(RunArgs),
    /// Evaluate a checkpoint, or train and evaluate every --method.
    Eval(RunArgs),
    /// Learning curve over per-category sample sizes (--k-list).
    Fewshot(RunArgs),
    /// Train on one domain and test on another, in both directions.
    Zeroshot(RunArgs),
    /// Compare sentiment template variants on the dev split.
    Sweep(RunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthDomain {
    Restaurant,
    Hotel,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "restaurant")]
    pub domain: SynthDomain,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// JSON file holding a RunConfig; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory with schema.json, train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Second domain directory for zero-shot transfer.
    #[arg(long)]
    pub target_data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// One method, or a comma-separated list for comparisons.
    #[arg(long, value_delimiter = ',')]
    pub method: Vec<Method>,
    #[arg(long)]
    pub task: Option<Task>,
    /// Run seed, or a comma-separated list for multi-seed protocols.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub k_list: Vec<usize>,
    /// Sentiment template id; a comma-separated list for `sweep`.
    #[arg(long, value_delimiter = ',')]
    pub template_id: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train and score in f64 instead of f32.
    #[arg(long)]
    pub double: bool,
}

/// The merged configuration of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub target_data: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub k_list: Vec<usize>,
    pub template_ids: Vec<String>,
    pub experiment: ExperimentConfig,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: None,
            train: None,
            dev: None,
            test: None,
            target_data: None,
            methods: vec![Method::Generation],
            seeds: vec![crate::training::TrainConfig::default().seed],
            k_list: vec![10, 20, 50, 100, 500],
            template_ids: Vec::new(),
            experiment: ExperimentConfig::default(),
            out: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Read `--config` (if any) and apply the flags on top.
    pub fn from_args(args: &RunArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => {
                require_file(p, "--config")?;
                let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(dir) = &args.data {
            cfg.schema = Some(dir.join("schema.json"));
            cfg.train = Some(dir.join("train.jsonl"));
            cfg.dev = Some(dir.join("dev.jsonl"));
            cfg.test = Some(dir.join("test.jsonl"));
        }
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if let Some(v) = v {
                *slot = Some(v.clone());
            }
        };
        set(&mut cfg.schema, &args.schema);
        set(&mut cfg.train, &args.train);
        set(&mut cfg.dev, &args.dev);
        set(&mut cfg.test, &args.test);
        set(&mut cfg.target_data, &args.target_data);
        set(&mut cfg.checkpoint, &args.checkpoint);
        if let Some(o) = &args.out {
            cfg.out = o.clone();
        }
        if !args.method.is_empty() {
            cfg.methods = args.method.clone();
        }
        if !args.seed.is_empty() {
            cfg.seeds = args.seed.clone();
        }
        if !args.k_list.is_empty() {
            cfg.k_list = args.k_list.clone();
        }
        if !args.template_id.is_empty() {
            cfg.template_ids = args.template_id.clone();
            cfg.experiment.template_id = args.template_id.first().cloned();
        }
        let exp = &mut cfg.experiment;
        if let Some(t) = args.task {
            exp.task = t;
        }
        if let Some(e) = args.epochs {
            exp.train.max_epochs = e;
            exp.train.patience = exp.train.patience.min(e);
        }
        if let Some(lr) = args.lr {
            exp.train.lr = lr;
        }
        if let Some(p) = args.patience {
            exp.train.patience = p;
        }
        if let Some(b) = args.batch_size {
            exp.train.batch_size = b;
        }
        if args.double {
            exp.model.precision = Precision::Double;
        }
        if cfg.seeds.is_empty() {
            return Err(Error::Config("at least one --seed is required".into()));
        }
        exp.train.seed = cfg.seeds[0];
        Ok(cfg)
    }

    /// Hash of the merged config. The output directory is left out so the
    /// same run written to two places shares a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out");
        }
        fingerprint(&v)
    }

    fn method(&self) -> Result<Method> {
        match self.methods.as_slice() {
            [m] => Ok(*m),
            other => Err(Error::Config(format!("this command takes exactly one --method, got {other:?}"))),
        }
    }

    fn path(&self, slot: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        let p = slot
            .clone()
            .ok_or_else(|| Error::Config(format!("missing {flag} (or --data pointing at a corpus directory)")))?;
        require_file(&p, flag)?;
        Ok(p)
    }

    fn load_schema(&self) -> Result<LabelSchema> {
        LabelSchema::load(&self.path(&self.schema, "--schema")?)
    }

    fn load_split(&self, slot: &Option<PathBuf>, flag: &str, schema: &LabelSchema) -> Result<DatasetSplit> {
        load_jsonl(&self.path(slot, flag)?, schema)
    }
}

fn require_file(path: &Path, flag: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{flag}: no such file {}", path.display())))
    }
}

/// Loaded corpus of one domain.
struct Corpus {
    schema: LabelSchema,
    train: DatasetSplit,
    dev: DatasetSplit,
    test: DatasetSplit,
}

impl Corpus {
    fn load(cfg: &RunConfig) -> Result<Self> {
        // Validate every path before reading any of them.
        for (slot, flag) in [(&cfg.schema, "--schema"), (&cfg.train, "--train"), (&cfg.dev, "--dev"), (&cfg.test, "--test")] {
            cfg.path(slot, flag)?;
        }
        let schema = cfg.load_schema()?;
        Ok(Corpus {
            train: cfg.load_split(&cfg.train, "--train", &schema)?,
            dev: cfg.load_split(&cfg.dev, "--dev", &schema)?,
            test: cfg.load_split(&cfg.test, "--test", &schema)?,
            schema,
        })
    }

    fn from_dir(dir: &Path) -> Result<Self> {
        let cfg = RunConfig {
            schema: Some(dir.join("schema.json")),
            train: Some(dir.join("train.jsonl")),
            dev: Some(dir.join("dev.jsonl")),
            test: Some(dir.join("test.jsonl")),
            ..RunConfig::default()
        };
        Self::load(&cfg)
    }

    fn domain<'a>(&'a self, name: &'a str) -> Domain<'a> {
        Domain {
            name,
            schema: &self.schema,
            train: &self.train,
            dev: &self.dev,
            test: &self.test,
        }
    }
}

/// Parse `argv` and run; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("TEMPRANK_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("TEMPRANK_THREADS must be a positive integer, got {raw:?}")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Run a parsed command; returns its one-line summary.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Stats(a) => stats(&RunConfig::from_args(a)?),
        Command::Train(a) => with_precision(&RunConfig::from_args(a)?, Runner::Train),
        Command::Predict(a) => with_precision(&RunConfig::from_args(a)?, Runner::Predict),
        Command::Eval(a) => with_precision(&RunConfig::from_args(a)?, Runner::Eval),
        Command::Fewshot(a) => with_precision(&RunConfig::from_args(a)?, Runner::Fewshot),
        Command::Zeroshot(a) => with_precision(&RunConfig::from_args(a)?, Runner::Zeroshot),
        Command::Sweep(a) => with_precision(&RunConfig::from_args(a)?, Runner::Sweep),
    }
}

#[derive(Clone, Copy)]
enum Runner {
    Train,
    Predict,
    Eval,
    Fewshot,
    Zeroshot,
    Sweep,
}

fn with_precision(cfg: &RunConfig, runner: Runner) -> Result<String> {
    let precision = match (&cfg.checkpoint, runner) {
        (Some(p), Runner::Predict | Runner::Eval) => {
            require_file(p, "--checkpoint")?;
            read_meta(p)?.config.precision
        }
        _ => cfg.experiment.model.precision,
    };
    match precision {
        Precision::Single => dispatch::<f32>(cfg, runner),
        Precision::Double => dispatch::<f64>(cfg, runner),
    }
}

fn dispatch<F: Real>(cfg: &RunConfig, runner: Runner) -> Result<String> {
    match runner {
        Runner::Train => train_cmd::<F>(cfg),
        Runner::Predict => predict_cmd::<F>(cfg),
        Runner::Eval => eval_cmd::<F>(cfg),
        Runner::Fewshot => fewshot_cmd::<F>(cfg),
        Runner::Zeroshot => zeroshot_cmd::<F>(cfg),
        Runner::Sweep => sweep_cmd::<F>(cfg),
    }
}

fn synth(a: &SynthArgs) -> Result<String> {
    let config = match a.domain {
        SynthDomain::Restaurant => SynthConfig::restaurant(a.seed),
        SynthDomain::Hotel => SynthConfig::hotel(a.seed),
    };
    let corpus = generate_synthetic(&config)?;
    corpus.save(&a.out)?;
    Ok(format!(
        "synth: {} train / {} dev / {} test sentences, {} categories -> {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.schema.num_categories(),
        a.out.display()
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    write_atomic(path, &bytes)
}

fn stats(cfg: &RunConfig) -> Result<String> {
    let c = Corpus::load(cfg)?;
    let fp = cfg.fingerprint();
    let buckets = frequency_buckets(&c.train, &c.schema);
    let value = serde_json::json!({
        "fingerprint": fp,
        "train": split_stats(&c.train, &c.schema),
        "dev": split_stats(&c.dev, &c.schema),
        "test": split_stats(&c.test, &c.schema),
        "buckets": buckets,
    });
    let path = cfg.out.join("stats.json");
    write_json(&path, &value)?;
    Ok(format!(
        "stats: {} / {} / {} examples, {} categories -> {}",
        c.train.len(),
        c.dev.len(),
        c.test.len(),
        c.schema.num_categories(),
        path.display()
    ))
}

fn train_cmd<F: Real>(cfg: &RunConfig) -> Result<String> {
    let method = cfg.method()?;
    method.require(cfg.experiment.task)?;
    let c = Corpus::load(cfg)?;
    let fp = cfg.fingerprint();
    let templates = cfg.experiment.templates(&c.schema.templates)?;
    let vocab = vocab_for(&[&c.train], &[&c.schema]);
    let ctx = Candidates {
        schema: &c.schema,
        templates: &templates,
        vocab: &vocab,
    };
    let out = fit::<F>(method, &c.train, Some(&c.dev), ctx, &cfg.experiment)?;
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"));
    save_checkpoint(&out.fitted.to_checkpoint(&vocab, cfg.experiment.task, &templates, &fp), &ckpt)?;
    let mut parts = Vec::new();
    for (stage, h) in &out.histories {
        h.save_csv(&cfg.out.join(format!("history_{stage}.csv")), Some(&fp))?;
        parts.push(format!(
            "{stage}: best epoch {} dev {:.4} ({:?})",
            h.best_epoch,
            h.best_metric.unwrap_or(f64::NAN),
            h.stop
        ));
    }
    Ok(format!(
        "train: {method} {} {} fingerprint={} -> {}",
        cfg.experiment.task,
        parts.join("; "),
        &fp[..12],
        ckpt.display()
    ))
}

fn load_fitted<F: Real>(cfg: &RunConfig, schema: &LabelSchema) -> Result<crate::eval::LoadedModel<F>> {
    let path = cfg.path(&cfg.checkpoint, "--checkpoint")?;
    Fitted::from_checkpoint(load_checkpoint::<F>(&path)?, schema)
}

#[derive(Serialize)]
struct PredictionFile<'a> {
    fingerprint: &'a str,
    checkpoint_fingerprint: &'a str,
    task: Task,
    predictions: &'a [Prediction],
}

fn predict_cmd<F: Real>(cfg: &RunConfig) -> Result<String> {
    let schema = cfg.load_schema()?;
    let test = cfg.load_split(&cfg.test, "--test", &schema)?;
    let loaded = load_fitted::<F>(cfg, &schema)?;
    let ctx = Candidates {
        schema: &schema,
        templates: &loaded.templates,
        vocab: &loaded.vocab,
    };
    let preds = loaded.fitted.predict(&test.examples, loaded.task, ctx)?;
    let fp = cfg.fingerprint();
    let path = cfg.out.join("predictions.json");
    write_json(
        &path,
        &PredictionFile {
            fingerprint: &fp,
            checkpoint_fingerprint: &loaded.fingerprint,
            task: loaded.task,
            predictions: &preds,
        },
    )?;
    Ok(format!(
        "predict: {} {} on {} examples -> {}",
        loaded.fitted.method(),
        loaded.task,
        preds.len(),
        path.display()
    ))
}

fn finish(mut report: EvalReport, out: &Path, what: &str) -> Result<String> {
    let (csv, _) = report.write(out)?;
    let shown: Vec<String> = report
        .summary()
        .iter()
        .take(6)
        .map(|r| format!("{} {} {}={:.4}", r.method, r.setting, r.metric, r.mean))
        .collect();
    Ok(format!("{what}: {} -> {}", shown.join(", "), csv.display()))
}

fn eval_cmd<F: Real>(cfg: &RunConfig) -> Result<String> {
    let fp = cfg.fingerprint();
    if cfg.checkpoint.is_some() {
        let schema = cfg.load_schema()?;
        let test = cfg.load_split(&cfg.test, "--test", &schema)?;
        let loaded = load_fitted::<F>(cfg, &schema)?;
        let ctx = Candidates {
            schema: &schema,
            templates: &loaded.templates,
            vocab: &loaded.vocab,
        };
        let preds = loaded.fitted.predict(&test.examples, loaded.task, ctx)?;
        let metrics = crate::eval::task_metrics(&preds, &test, loaded.task, &schema)?;
        let mut report = EvalReport::new("eval", fp, vec![]);
        let method = loaded.fitted.method();
        for (name, v) in metrics.rows() {
            report.rows.push(ReportRow::new(method, loaded.task.to_string(), None, name, v));
        }
        if loaded.task == Task::Acsa {
            let buckets = frequency_buckets(&test, &schema);
            for row in bucket_report(&preds, &test, &buckets)? {
                let mut r = ReportRow::new(method, format!("bucket={}", row.bucket), None, "accuracy", row.accuracy);
                r.note = format!("{} instances", row.instances);
                report.rows.push(r);
            }
        }
        return finish(report, &cfg.out, "eval");
    }
    let c = Corpus::load(cfg)?;
    let mut report = compare_methods::<F>(c.domain("data"), &cfg.methods, &cfg.seeds, &cfg.experiment)?;
    report.fingerprint = fp;
    finish(report, &cfg.out, "eval")
}

fn fewshot_cmd<F: Real>(cfg: &RunConfig) -> Result<String> {
    let c = Corpus::load(cfg)?;
    let mut report = fewshot_curve::<F>(c.domain("data"), &cfg.k_list, &cfg.seeds, &cfg.methods, &cfg.experiment)?;
    report.fingerprint = cfg.fingerprint();
    finish(report, &cfg.out, "fewshot")
}

fn zeroshot_cmd<F: Real>(cfg: &RunConfig) -> Result<String> {
    let target_dir = cfg
        .target_data
        .clone()
        .ok_or_else(|| Error::Config("zeroshot needs --target-data pointing at a second corpus directory".into()))?;
    let src = Corpus::load(cfg)?;
    let tgt = Corpus::from_dir(&target_dir)?;
    let mut report = zeroshot_transfer::<F>(src.domain("source"), tgt.domain("target"), true, &cfg.methods, &cfg.experiment)?;
    report.fingerprint = cfg.fingerprint();
    finish(report, &cfg.out, "zeroshot")
}

fn sweep_cmd<F: Real>(cfg: &RunConfig) -> Result<String> {
    let c = Corpus::load(cfg)?;
    let registry = &c.schema.templates;
    let specs: Vec<_> = if cfg.template_ids.is_empty() {
        registry.by_task(TemplateTask::Acsa).cloned().collect()
    } else {
        cfg.template_ids
            .iter()
            .map(|id| {
                registry
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Template(format!("unknown template id {id:?}")))
            })
            .collect::<Result<_>>()?
    };
    let mut report = template_sweep::<F>(c.domain("data"), &specs, &cfg.experiment)?;
    report.fingerprint = cfg.fingerprint();
    finish(report, &cfg.out, "sweep")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut file_cfg = RunConfig::default();
        file_cfg.experiment.train.lr = 0.5;
        file_cfg.seeds = vec![3];
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, serde_json::to_string(&file_cfg).unwrap()).unwrap();
        let args = RunArgs {
            config: Some(p),
            lr: Some(0.01),
            ..RunArgs::default()
        };
        let cfg = RunConfig::from_args(&args).unwrap();
        assert_eq!(cfg.experiment.train.lr, 0.01);
        assert_eq!(cfg.experiment.train.seed, 3);
    }

    #[test]
    fn fingerprint_ignores_output_directory() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = RunConfig {
            seeds: vec![1],
            ..a.clone()
        };
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn missing_file_is_reported_with_flag() {
        let cfg = RunConfig {
            schema: Some("/nonexistent/schema.json".into()),
            ..RunConfig::default()
        };
        let err = cfg.load_schema().unwrap_err().to_string();
        assert!(err.contains("--schema"), "{err}");
    }

    #[test]
    fn unknown_flag_fails_to_parse() {
        assert!(Cli::try_parse_from(["temprank", "train", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["temprank", "train", "--method", "generation,mlm", "--task", "acd"]).is_ok());
    }

    #[test]
    fn synth_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["a", "b"] {
            let out = dir.path().join(sub);
            assert_eq!(run(["temprank", "synth", "--seed", "7", "--out", out.to_str().unwrap()]), 0);
        }
        for f in ["schema.json", "train.jsonl", "dev.jsonl", "test.jsonl"] {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(f)).unwrap(),
                std::fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
    }
}

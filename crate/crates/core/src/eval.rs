//! Metrics, a uniform train/predict runner over the three methods, and the
//! experiment protocols (method comparison, few-shot curves, zero-shot
//! transfer, template sweeps, frequency buckets).
//!
//! Every protocol returns an [`EvalReport`] whose rows carry one metric
//! value each. Reports are written as CSV (first line
//! `# fingerprint=<sha256>`) plus a markdown rendering.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{Classifier, Method, Mlm};
use crate::corpus::{fewshot_sample, Bucket, DatasetSplit, Example, FrequencyBuckets, LabelSchema};
use crate::error::{Error, Result};
use crate::inference::{predict_all, Candidates, Prediction, Scorers, Task};
use crate::model::{Checkpoint, InitMode, Model, ModelConfig, NamedTensor, Real};
use crate::scoring::LocalScorer;
use crate::templates::{TemplateRegistry, TemplateSet, TemplateSpec, TemplateTask, PRESENT};
use crate::text::Vocab;
use crate::training::{build_pairs, train, PairMode, TrainConfig, TrainHistory};

/// Fraction of exact matches.
pub fn accuracy<A: AsRef<str>, B: AsRef<str>>(pairs: &[(A, B)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Eval("accuracy of an empty prediction list".into()));
    }
    let hits = pairs.iter().filter(|(g, p)| g.as_ref() == p.as_ref()).count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub zero_denominator: bool,
}

/// A per-example set of predicted or gold labels.
pub type LabelSet = (String, BTreeSet<String>);

/// Micro-averaged precision, recall and F1 with counts pooled over all
/// examples. Inputs are aligned by position and must agree on ids.
pub fn micro_prf(pred: &[LabelSet], gold: &[LabelSet]) -> Result<MicroPrf> {
    if pred.len() != gold.len() {
        return Err(Error::Eval(format!(
            "{} predicted sets but {} gold sets",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for ((pid, p), (gid, g)) in pred.iter().zip(gold) {
        if pid != gid {
            return Err(Error::Eval(format!("id mismatch: predicted {pid:?} against gold {gid:?}")));
        }
        let hit = p.intersection(g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    let mut zero = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            zero = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        zero = true;
        0.0
    };
    Ok(MicroPrf {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        zero_denominator: zero,
    })
}

/// Scores of one task run: accuracy for ACSA, micro P/R/F1 otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub accuracy: Option<f64>,
    pub prf: Option<MicroPrf>,
}

impl TaskMetrics {
    /// The selection metric: accuracy when present, else F1.
    pub fn primary(&self) -> f64 {
        self.accuracy.or(self.prf.map(|p| p.f1)).unwrap_or(0.0)
    }

    pub fn primary_name(&self) -> &'static str {
        if self.accuracy.is_some() {
            "accuracy"
        } else {
            "f1"
        }
    }

    /// (metric name, value) rows.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        if let Some(a) = self.accuracy {
            out.push(("accuracy", a));
        }
        if let Some(p) = self.prf {
            out.extend([("precision", p.precision), ("recall", p.recall), ("f1", p.f1)]);
        }
        out
    }
}

/// (gold polarity, predicted label) for every gold label; a category without
/// a decision counts as the empty label.
pub fn acsa_pairs(preds: &[Prediction], split: &DatasetSplit) -> Result<Vec<(String, String)>> {
    check_alignment(preds, split)?;
    let mut out = Vec::new();
    for (p, ex) in preds.iter().zip(&split.examples) {
        for l in &ex.labels {
            let got = p
                .decisions
                .iter()
                .find(|d| d.category == l.category)
                .map(|d| d.label.clone())
                .unwrap_or_default();
            out.push((l.polarity.clone(), got));
        }
    }
    Ok(out)
}

fn check_alignment(preds: &[Prediction], split: &DatasetSplit) -> Result<()> {
    if preds.len() != split.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} examples",
            preds.len(),
            split.len()
        )));
    }
    Ok(())
}

/// Evaluate predictions of `task` against the gold labels of `split`.
pub fn task_metrics(preds: &[Prediction], split: &DatasetSplit, task: Task, schema: &LabelSchema) -> Result<TaskMetrics> {
    check_alignment(preds, split)?;
    match task {
        Task::Acsa => Ok(TaskMetrics {
            accuracy: Some(accuracy(&acsa_pairs(preds, split)?)?),
            prf: None,
        }),
        Task::Acd => {
            let pred: Vec<LabelSet> = preds
                .iter()
                .map(|p| (p.id.clone(), p.detected().into_iter().map(String::from).collect()))
                .collect();
            let gold: Vec<LabelSet> = split
                .examples
                .iter()
                .map(|e| (e.id.clone(), e.categories().map(String::from).collect()))
                .collect();
            Ok(TaskMetrics {
                accuracy: None,
                prf: Some(micro_prf(&pred, &gold)?),
            })
        }
        Task::Joint | Task::Pipeline => {
            let key = |c: &str, p: &str| format!("{c}#{p}");
            let pred: Vec<LabelSet> = preds
                .iter()
                .map(|p| {
                    let set = p.pairs(schema).iter().map(|l| key(&l.category, &l.polarity)).collect();
                    (p.id.clone(), set)
                })
                .collect();
            let gold: Vec<LabelSet> = split
                .examples
                .iter()
                .map(|e| (e.id.clone(), e.labels.iter().map(|l| key(&l.category, &l.polarity)).collect()))
                .collect();
            Ok(TaskMetrics {
                accuracy: None,
                prf: Some(micro_prf(&pred, &gold)?),
            })
        }
    }
}

/// SHA-256 of the canonical JSON form (object keys sorted) of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value)
        .and_then(|v| serde_json::to_string(&v))
        .expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Everything a single train/evaluate cell needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Model shape; the vocabulary size is filled in per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: Task,
    /// Sentiment template id; `None` takes the registry's first.
    pub template_id: Option<String>,
    /// Presence template pair variant; `None` takes the registry's first.
    pub acd_variant: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::with_vocab(0),
            train: TrainConfig::default(),
            task: Task::Acsa,
            template_id: None,
            acd_variant: None,
        }
    }
}

impl ExperimentConfig {
    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }

    pub fn templates(&self, registry: &TemplateRegistry) -> Result<TemplateSet> {
        TemplateSet::select(registry, self.template_id.as_deref(), self.acd_variant.as_deref())
    }

    /// Same config with a different run seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }
}

/// A trained method ready to predict.
#[derive(Clone, Debug)]
pub enum Fitted<F> {
    /// Template scoring. The pipeline keeps a detection model in `model`
    /// and a sentiment model in `acsa`.
    Generation { model: Model<F>, acsa: Option<Model<F>> },
    Classification(Classifier<F>),
    Mlm(Mlm<F>),
}

pub struct FitOutcome<F> {
    pub fitted: Fitted<F>,
    /// One history per trained stage, named by stage.
    pub histories: Vec<(String, TrainHistory)>,
}

impl<F: Real> Fitted<F> {
    pub fn method(&self) -> Method {
        match self {
            Fitted::Generation { .. } => Method::Generation,
            Fitted::Classification(_) => Method::Classification,
            Fitted::Mlm(_) => Method::Mlm,
        }
    }

    /// Predict every example; output order follows `examples`.
    pub fn predict(&self, examples: &[Example], task: Task, ctx: Candidates) -> Result<Vec<Prediction>> {
        match self {
            Fitted::Generation { model, acsa } => {
                let primary = LocalScorer::new(model.clone());
                let second = acsa.as_ref().map(|m| LocalScorer::new(m.clone()));
                let scorers = Scorers {
                    primary: &primary,
                    acsa: second.as_ref().map(|s| s as &dyn crate::scoring::TemplateScorer),
                };
                predict_all(scorers, examples, task, ctx)
            }
            Fitted::Classification(c) => {
                check_task(Method::Classification, c.task, task)?;
                examples.par_iter().map(|ex| c.predict(ex, ctx.schema, ctx.vocab)).collect()
            }
            Fitted::Mlm(m) => {
                check_task(Method::Mlm, m.task, task)?;
                examples.par_iter().map(|ex| m.predict(ex, ctx.schema, ctx.vocab)).collect()
            }
        }
    }

    pub fn evaluate(&self, split: &DatasetSplit, task: Task, ctx: Candidates) -> Result<TaskMetrics> {
        let preds = self.predict(&split.examples, task, ctx)?;
        task_metrics(&preds, split, task, ctx.schema)
    }
}

/// A fitted method restored from disk with what is needed to predict.
#[derive(Clone, Debug)]
pub struct LoadedModel<F> {
    pub fitted: Fitted<F>,
    pub task: Task,
    pub templates: TemplateSet,
    pub vocab: Vocab,
    pub fingerprint: String,
}

const PIPELINE_SENTIMENT: &str = "pipeline.acsa";

impl<F: Real> Fitted<F> {
    /// Package the method, its task, templates and run fingerprint.
    pub fn to_checkpoint(&self, vocab: &Vocab, task: Task, templates: &TemplateSet, fingerprint: &str) -> Checkpoint<F> {
        let mut ck = match self {
            Fitted::Generation { model, acsa } => {
                let mut ck = Checkpoint::new(model.clone(), vocab.clone());
                ck.extra = serde_json::json!({ "method": "generation", "task": task });
                if let Some(m) = acsa {
                    ck.aux.push(NamedTensor {
                        name: PIPELINE_SENTIMENT.into(),
                        shape: vec![m.params.len()],
                        data: m.params.clone(),
                    });
                }
                ck
            }
            Fitted::Classification(c) => c.to_checkpoint(vocab),
            Fitted::Mlm(m) => m.to_checkpoint(vocab),
        };
        ck.extra["templates"] = serde_json::to_value(templates).expect("templates serialize");
        ck.extra["fingerprint"] = serde_json::Value::String(fingerprint.to_string());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint<F>, schema: &LabelSchema) -> Result<LoadedModel<F>> {
        let field = |name: &str| ck.extra.get(name).cloned().unwrap_or(serde_json::Value::Null);
        let method: Method = field("method")
            .as_str()
            .ok_or_else(|| Error::Config("checkpoint does not record its method".into()))?
            .parse()?;
        let task: Task = serde_json::from_value(field("task")).map_err(|e| Error::Config(format!("checkpoint task: {e}")))?;
        let templates: TemplateSet =
            serde_json::from_value(field("templates")).map_err(|e| Error::Config(format!("checkpoint templates: {e}")))?;
        let fingerprint = field("fingerprint").as_str().unwrap_or_default().to_string();
        let vocab = ck.vocab.clone();
        let fitted = match method {
            Method::Generation => {
                let acsa = match ck.aux_tensor(PIPELINE_SENTIMENT) {
                    Some(t) => Some(Model::from_params(ck.model.config().clone(), t.data.clone())?),
                    None => None,
                };
                Fitted::Generation { model: ck.model, acsa }
            }
            Method::Classification => Fitted::Classification(Classifier::from_checkpoint(ck)?),
            Method::Mlm => Fitted::Mlm(Mlm::from_checkpoint(ck, schema)?),
        };
        Ok(LoadedModel {
            fitted,
            task,
            templates,
            vocab,
            fingerprint,
        })
    }
}

fn check_task(method: Method, trained: Task, asked: Task) -> Result<()> {
    if trained != asked {
        return Err(Error::Config(format!("{method} model was trained for {trained}, not {asked}")));
    }
    Ok(())
}

fn fresh_model<F: Real>(cfg: &ExperimentConfig, vocab: &Vocab) -> Result<Model<F>> {
    let mut mc = cfg.model.clone();
    mc.vocab_size = vocab.len();
    mc.precision = F::PRECISION;
    Model::init(mc, cfg.train.seed, InitMode::Random)
}

fn pair_mode(task: Task) -> PairMode {
    match task {
        Task::Acsa => PairMode::Acsa,
        Task::Acd => PairMode::Acd,
        Task::Joint | Task::Pipeline => PairMode::Joint,
    }
}

/// Train a generation model on one pair mode, selecting on `dev` with the
/// metric of `eval_task`.
fn fit_generation_stage<F: Real>(
    train_split: &DatasetSplit,
    dev: Option<&DatasetSplit>,
    mode: PairMode,
    eval_task: Task,
    ctx: Candidates,
    cfg: &ExperimentConfig,
) -> Result<(Model<F>, TrainHistory)> {
    let pairs = build_pairs(train_split, ctx.schema, ctx.templates, ctx.vocab, mode)?;
    let init = fresh_model::<F>(cfg, ctx.vocab)?;
    let metric = dev.map(|dev| {
        move |m: &Model<F>| -> Result<f64> {
            let fitted = Fitted::Generation { model: m.clone(), acsa: None };
            Ok(fitted.evaluate(dev, eval_task, ctx)?.primary())
        }
    });
    let out = train(init, &pairs, &cfg.train, metric)?;
    Ok((out.best, out.history))
}

/// Train `method` for `cfg.task` on `train_split`, selecting epochs on `dev`.
pub fn fit<F: Real>(
    method: Method,
    train_split: &DatasetSplit,
    dev: Option<&DatasetSplit>,
    ctx: Candidates,
    cfg: &ExperimentConfig,
) -> Result<FitOutcome<F>> {
    let task = cfg.task;
    method.require(task)?;
    match method {
        Method::Generation if task == Task::Pipeline => {
            let (detector, h1) = fit_generation_stage::<F>(train_split, dev, PairMode::Acd, Task::Acd, ctx, cfg)?;
            let (sentiment, h2) = fit_generation_stage::<F>(train_split, dev, PairMode::Acsa, Task::Acsa, ctx, cfg)?;
            Ok(FitOutcome {
                fitted: Fitted::Generation {
                    model: detector,
                    acsa: Some(sentiment),
                },
                histories: vec![("acd".into(), h1), ("acsa".into(), h2)],
            })
        }
        Method::Generation => {
            let (model, h) = fit_generation_stage::<F>(train_split, dev, pair_mode(task), task, ctx, cfg)?;
            Ok(FitOutcome {
                fitted: Fitted::Generation { model, acsa: None },
                histories: vec![(task.to_string(), h)],
            })
        }
        Method::Classification => {
            let mut init = Classifier::new(fresh_model::<F>(cfg, ctx.vocab)?, ctx.schema, task, cfg.train.seed)?;
            init.head.mark_trained();
            let items = init.items(train_split, ctx.schema, ctx.vocab)?;
            let metric = dev.map(|dev| {
                move |c: &Classifier<F>| -> Result<f64> {
                    Ok(Fitted::Classification(c.clone()).evaluate(dev, task, ctx)?.primary())
                }
            });
            let out = train(init, &items, &cfg.train, metric)?;
            Ok(FitOutcome {
                fitted: Fitted::Classification(out.best),
                histories: vec![(task.to_string(), out.history)],
            })
        }
        Method::Mlm => {
            let prompt = match task {
                Task::Joint => ctx.templates.joint.clone(),
                _ => ctx.templates.acsa.clone(),
            };
            let init = Mlm::new(fresh_model::<F>(cfg, ctx.vocab)?, ctx.schema, task, prompt, ctx.vocab)?;
            let items = init.items(train_split, ctx.schema, ctx.vocab)?;
            let metric = dev.map(|dev| {
                move |m: &Mlm<F>| -> Result<f64> { Ok(Fitted::Mlm(m.clone()).evaluate(dev, task, ctx)?.primary()) }
            });
            let out = train(init, &items, &cfg.train, metric)?;
            Ok(FitOutcome {
                fitted: Fitted::Mlm(out.best),
                histories: vec![(task.to_string(), out.history)],
            })
        }
    }
}

/// Vocabulary over the tokens of `splits` plus the words of every schema.
pub fn vocab_for(splits: &[&DatasetSplit], schemas: &[&LabelSchema]) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for split in splits {
        for ex in &split.examples {
            for t in &ex.tokens {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
    }
    let words: BTreeSet<String> = schemas.iter().flat_map(|s| s.words()).collect();
    Vocab::from_counts(&counts, words.iter().map(String::as_str))
}

/// One metric value of one (method, setting, seed) cell. A failed cell has
/// no value and the error text in `note`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub setting: String,
    pub seed: Option<u64>,
    pub metric: String,
    pub value: Option<f64>,
    pub note: String,
}

impl ReportRow {
    pub fn new(method: impl ToString, setting: impl Into<String>, seed: Option<u64>, metric: &str, value: f64) -> Self {
        ReportRow {
            method: method.to_string(),
            setting: setting.into(),
            seed,
            metric: metric.to_string(),
            value: Some(value),
            note: String::new(),
        }
    }

    pub fn failed(method: impl ToString, setting: impl Into<String>, seed: Option<u64>, metric: &str, err: &Error) -> Self {
        ReportRow {
            method: method.to_string(),
            setting: setting.into(),
            seed,
            metric: metric.to_string(),
            value: None,
            note: err.to_string(),
        }
    }
}

/// Mean and standard deviation over seeds for one (method, setting, metric).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub setting: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    /// Files written by [`EvalReport::write`].
    #[serde(default)]
    pub paths: Vec<PathBuf>,
}

impl EvalReport {
    pub fn new(protocol: &str, fingerprint: String, seeds: Vec<u64>) -> Self {
        EvalReport {
            protocol: protocol.to_string(),
            fingerprint,
            seeds,
            rows: Vec::new(),
            paths: Vec::new(),
        }
    }

    /// Rows of `metric` for `method`, in report order.
    pub fn values(&self, method: &str, metric: &str) -> Vec<(&str, Option<f64>)> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
            .map(|r| (r.setting.as_str(), r.value))
            .collect()
    }

    /// Aggregate successful rows over seeds. The standard deviation is the
    /// population one; a single run has spread 0.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: Vec<((String, String, String), Vec<f64>)> = Vec::new();
        for r in &self.rows {
            let key = (r.method.clone(), r.setting.clone(), r.metric.clone());
            let slot = match groups.iter().position(|(k, _)| *k == key) {
                Some(i) => i,
                None => {
                    groups.push((key, Vec::new()));
                    groups.len() - 1
                }
            };
            if let Some(v) = r.value {
                groups[slot].1.push(v);
            }
        }
        groups
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|((method, setting, metric), v)| {
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n as f64;
                let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                SummaryRow {
                    method,
                    setting,
                    metric,
                    n,
                    mean,
                    std,
                    median: median(&v),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "setting", "seed", "metric", "value", "note"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.setting.clone(),
                r.seed.map(|s| s.to_string()).unwrap_or_default(),
                r.metric.clone(),
                r.value.map(|v| format!("{v}")).unwrap_or_default(),
                r.note.clone(),
            ])
            .expect("in-memory write");
        }
        let body = String::from_utf8(w.into_inner().expect("flush")).expect("utf8");
        format!("# fingerprint={}\n{body}", self.fingerprint)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("# {}\n\nfingerprint: `{}`\n\n", self.protocol, self.fingerprint);
        s.push_str("| method | setting | seed | metric | value | note |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                r.method,
                r.setting,
                r.seed.map(|x| x.to_string()).unwrap_or_default(),
                r.metric,
                r.value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "failed".into()),
                r.note.replace('|', "/"),
            ));
        }
        let summary = self.summary();
        if summary.iter().any(|r| r.n > 1) {
            s.push_str("\n| method | setting | metric | runs | mean (std) | median |\n|---|---|---|---|---|---|\n");
            for r in summary {
                s.push_str(&format!(
                    "| {} | {} | {} | {} | {:.4} ({:.4}) | {:.4} |\n",
                    r.method, r.setting, r.metric, r.n, r.mean, r.std, r.median
                ));
            }
        }
        s
    }

    /// Write `{protocol}_{timestamp}.csv` and the matching `.md` into `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string().replace('.', "");
        let csv_path = dir.join(format!("{}_{stamp}.csv", self.protocol));
        let md_path = dir.join(format!("{}_{stamp}.md", self.protocol));
        crate::io::write_atomic(&csv_path, self.to_csv().as_bytes())?;
        crate::io::write_atomic(&md_path, self.to_markdown().as_bytes())?;
        self.paths = vec![csv_path.clone(), md_path.clone()];
        Ok((csv_path, md_path))
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
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Train, dev-select and test one method; returns test metrics.
pub fn run_cell<F: Real>(
    method: Method,
    train_split: &DatasetSplit,
    dev: &DatasetSplit,
    test: &DatasetSplit,
    ctx: Candidates,
    cfg: &ExperimentConfig,
) -> Result<TaskMetrics> {
    let out = fit::<F>(method, train_split, Some(dev), ctx, cfg)?;
    out.fitted.evaluate(test, cfg.task, ctx)
}

/// A labelled corpus with its own schema.
#[derive(Clone, Copy, Debug)]
pub struct Domain<'a> {
    pub name: &'a str,
    pub schema: &'a LabelSchema,
    pub train: &'a DatasetSplit,
    pub dev: &'a DatasetSplit,
    pub test: &'a DatasetSplit,
}

/// Every method on the same splits, one row per (method, seed, metric).
pub fn compare_methods<F: Real>(domain: Domain, methods: &[Method], seeds: &[u64], cfg: &ExperimentConfig) -> Result<EvalReport> {
    let vocab = vocab_for(&[domain.train], &[domain.schema]);
    let templates = cfg.templates(&domain.schema.templates)?;
    let ctx = Candidates {
        schema: domain.schema,
        templates: &templates,
        vocab: &vocab,
    };
    let mut report = EvalReport::new("compare", cfg.fingerprint(), seeds.to_vec());
    let setting = cfg.task.to_string();
    for &method in methods {
        for &seed in seeds {
            let run = cfg.with_seed(seed);
            match run_cell::<F>(method, domain.train, domain.dev, domain.test, ctx, &run) {
                Ok(m) => {
                    for (name, v) in m.rows() {
                        report.rows.push(ReportRow::new(method, setting.clone(), Some(seed), name, v));
                    }
                }
                Err(e) => {
                    log::warn!("{method} seed {seed} failed: {e}");
                    report.rows.push(ReportRow::failed(method, setting.clone(), Some(seed), "primary", &e));
                }
            }
        }
    }
    Ok(report)
}

/// Learning curve over per-category sample sizes. Each (k, seed, method)
/// cell subsamples the training split, trains from scratch and reports the
/// primary test metric; a failing cell is recorded and the sweep goes on.
pub fn fewshot_curve<F: Real>(domain: Domain, ks: &[usize], seeds: &[u64], methods: &[Method], cfg: &ExperimentConfig) -> Result<EvalReport> {
    if ks.is_empty() || ks.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!("k list must be non-empty and ascending, got {ks:?}")));
    }
    let templates = cfg.templates(&domain.schema.templates)?;
    let mut report = EvalReport::new("fewshot", cfg.fingerprint(), seeds.to_vec());
    for &k in ks {
        for &seed in seeds {
            let sample = fewshot_sample(domain.train, k, seed);
            if !sample.shortfall.is_empty() {
                log::info!("k={k} seed={seed}: categories short of k: {:?}", sample.shortfall);
            }
            let vocab = vocab_for(&[&sample.split], &[domain.schema]);
            let ctx = Candidates {
                schema: domain.schema,
                templates: &templates,
                vocab: &vocab,
            };
            let run = cfg.with_seed(seed);
            for &method in methods {
                let setting = format!("k={k}");
                match run_cell::<F>(method, &sample.split, domain.dev, domain.test, ctx, &run) {
                    Ok(m) => report.rows.push(ReportRow::new(method, setting, Some(seed), m.primary_name(), m.primary())),
                    Err(e) => {
                        log::warn!("few-shot k={k} seed={seed} {method} failed: {e}");
                        report.rows.push(ReportRow::failed(method, setting, Some(seed), "primary", &e));
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Accuracy of always answering the most frequent gold polarity of `split`
/// (first in schema order on ties).
pub fn majority_baseline(split: &DatasetSplit, schema: &LabelSchema) -> Result<(String, f64)> {
    let mut counts = vec![0usize; schema.num_polarities()];
    let mut total = 0;
    for l in split.examples.iter().flat_map(|e| &e.labels) {
        if let Some(i) = schema.polarity_index(&l.polarity) {
            counts[i] += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::Eval("majority baseline of a split without labels".into()));
    }
    let best = crate::inference::argmax_first(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    Ok((schema.polarities[best].clone(), counts[best] as f64 / total as f64))
}

/// Train on each source domain and test on the other with no target-domain
/// updates. Category sets may differ; the polarity sets must match exactly.
/// Rows: `{src}->{tgt}` for every method plus a `majority` row per direction.
pub fn zeroshot_transfer<F: Real>(a: Domain, b: Domain, both_directions: bool, methods: &[Method], cfg: &ExperimentConfig) -> Result<EvalReport> {
    if a.schema.polarities != b.schema.polarities {
        return Err(Error::Config(format!(
            "cannot translate polarity labels between {:?} and {:?}",
            a.schema.polarities, b.schema.polarities
        )));
    }
    let mut report = EvalReport::new("zeroshot", cfg.fingerprint(), vec![cfg.train.seed]);
    let mut directions = vec![(a, b)];
    if both_directions {
        directions.push((b, a));
    }
    for (src, tgt) in directions {
        let setting = format!("{}->{}", src.name, tgt.name);
        let vocab = vocab_for(&[src.train], &[src.schema, tgt.schema]);
        let src_templates = cfg.templates(&src.schema.templates)?;
        let tgt_templates = cfg.templates(&tgt.schema.templates)?;
        let src_ctx = Candidates {
            schema: src.schema,
            templates: &src_templates,
            vocab: &vocab,
        };
        let tgt_ctx = Candidates {
            schema: tgt.schema,
            templates: &tgt_templates,
            vocab: &vocab,
        };
        for &method in methods {
            let result = fit::<F>(method, src.train, Some(src.dev), src_ctx, cfg)
                .and_then(|out| retarget(out.fitted, tgt.schema, &vocab))
                .and_then(|f| f.evaluate(tgt.test, cfg.task, tgt_ctx));
            match result {
                Ok(m) => report.rows.push(ReportRow::new(method, setting.clone(), Some(cfg.train.seed), m.primary_name(), m.primary())),
                Err(e) => {
                    log::warn!("zero-shot {setting} {method} failed: {e}");
                    report.rows.push(ReportRow::failed(method, setting.clone(), Some(cfg.train.seed), "primary", &e));
                }
            }
        }
        let (label, acc) = majority_baseline(tgt.test, tgt.schema)?;
        let mut row = ReportRow::new("majority", setting, None, "accuracy", acc);
        row.note = label;
        report.rows.push(row);
    }
    Ok(report)
}

/// Point a fitted method at another schema with the same label set.
fn retarget<F: Real>(fitted: Fitted<F>, schema: &LabelSchema, vocab: &Vocab) -> Result<Fitted<F>> {
    Ok(match fitted {
        Fitted::Mlm(m) => Fitted::Mlm(Mlm::new(m.model, schema, m.task, m.prompt, vocab)?),
        other => other,
    })
}

/// Train once per sentiment template variant and compare dev accuracy. The
/// best variant (first on ties) gets `best` in its note.
pub fn template_sweep<F: Real>(domain: Domain, specs: &[TemplateSpec], cfg: &ExperimentConfig) -> Result<EvalReport> {
    if specs.is_empty() {
        return Err(Error::Config("template sweep needs at least one variant".into()));
    }
    let vocab_schema = domain.schema;
    let base = cfg.templates(&domain.schema.templates)?;
    let mut report = EvalReport::new("sweep", cfg.fingerprint(), vec![cfg.train.seed]);
    // Template words must be in the vocabulary even when not registered.
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in domain.train.examples.iter().flat_map(|e| &e.tokens) {
        *counts.entry(t.clone()).or_insert(0) += 1;
    }
    let mut words: BTreeSet<String> = vocab_schema.words().into_iter().collect();
    words.extend(specs.iter().flat_map(|s| s.words()));
    let vocab = Vocab::from_counts(&counts, words.iter().map(String::as_str));
    let mut run = cfg.clone();
    run.task = Task::Acsa;
    for spec in specs {
        let result = (|| {
            if spec.task != TemplateTask::Acsa {
                return Err(Error::Template(format!("template {:?} is not a sentiment template", spec.id)));
            }
            spec.validate()?;
            let templates = TemplateSet {
                acsa: spec.clone(),
                ..base.clone()
            };
            let ctx = Candidates {
                schema: domain.schema,
                templates: &templates,
                vocab: &vocab,
            };
            let out = fit::<F>(Method::Generation, domain.train, Some(domain.dev), ctx, &run)?;
            out.fitted.evaluate(domain.dev, Task::Acsa, ctx)
        })();
        match result {
            Ok(m) => report.rows.push(ReportRow::new(Method::Generation, spec.id.clone(), Some(cfg.train.seed), "dev_accuracy", m.primary())),
            Err(e) => {
                log::warn!("template {} failed: {e}", spec.id);
                report.rows.push(ReportRow::failed(Method::Generation, spec.id.clone(), Some(cfg.train.seed), "dev_accuracy", &e));
            }
        }
    }
    let best = report
        .rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.value.map(|v| (i, v)))
        .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
            Some((_, b)) if b >= v => acc,
            _ => Some((i, v)),
        });
    if let Some((i, _)) = best {
        report.rows[i].note = "best".into();
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketRow {
    pub bucket: Bucket,
    pub instances: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// ACSA accuracy within each frequency bucket; empty buckets are omitted and
/// categories outside `buckets` are skipped.
pub fn bucket_report(preds: &[Prediction], split: &DatasetSplit, buckets: &FrequencyBuckets) -> Result<Vec<BucketRow>> {
    check_alignment(preds, split)?;
    let map = buckets.as_map();
    let mut tally: BTreeMap<Bucket, (usize, usize)> = BTreeMap::new();
    for (p, ex) in preds.iter().zip(&split.examples) {
        for l in &ex.labels {
            let Some(&b) = map.get(&l.category) else { continue };
            let hit = p.decisions.iter().any(|d| d.category == l.category && d.label == l.polarity);
            let e = tally.entry(b).or_insert((0, 0));
            e.0 += 1;
            e.1 += usize::from(hit);
        }
    }
    Ok(tally
        .into_iter()
        .map(|(bucket, (n, c))| BucketRow {
            bucket,
            instances: n,
            correct: c,
            accuracy: c as f64 / n as f64,
        })
        .collect())
}

/// Whether a detection decision list marks `category` present.
pub fn is_detected(pred: &Prediction, category: &str) -> bool {
    pred.decisions.iter().any(|d| d.category == category && d.label == PRESENT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{frequency_buckets, AspectLabel, SplitName};
    use crate::inference::Decision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(id: &str, items: &[&str]) -> LabelSet {
        (id.to_string(), items.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[("pos", "pos"), ("neg", "neu")]).unwrap(), 0.5);
        assert_eq!(accuracy(&[("a", "a")]).unwrap(), 1.0);
        assert!(accuracy::<&str, &str>(&[]).is_err());
    }

    #[test]
    fn micro_prf_examples() {
        let m = micro_prf(&[set("1", &["food", "price"])], &[set("1", &["food", "service"])]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        let m = micro_prf(&[set("1", &["a"])], &[set("1", &["a"])]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert!(!m.zero_denominator);
        let m = micro_prf(&[set("1", &[])], &[set("1", &[])]).unwrap();
        assert_eq!(m.f1, 0.0);
        assert!(m.zero_denominator);
        assert!(micro_prf(&[set("1", &[])], &[set("2", &[])]).is_err());
    }

    #[test]
    fn micro_prf_matches_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cats = ["a", "b", "c", "d"];
        let draw = |rng: &mut ChaCha8Rng| -> BTreeSet<String> {
            cats.iter().filter(|_| rng.gen_bool(0.4)).map(|s| s.to_string()).collect()
        };
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        for i in 0..500 {
            pred.push((i.to_string(), draw(&mut rng)));
            gold.push((i.to_string(), draw(&mut rng)));
        }
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for ((_, p), (_, g)) in pred.iter().zip(&gold) {
            for c in cats {
                match (p.contains(c), g.contains(c)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
        let m = micro_prf(&pred, &gold).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (tp, fp, fn_));
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / (tp + fn_) as f64;
        assert_eq!(m.f1, 2.0 * p * r / (p + r));
    }

    #[test]
    fn fingerprint_is_key_order_independent() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":[1,2],"x":1}"#).unwrap();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        assert_eq!(fingerprint(&a).len(), 64);
        let c = ExperimentConfig::default();
        assert_eq!(c.fingerprint(), c.clone().fingerprint());
        assert_ne!(c.fingerprint(), c.with_seed(99).fingerprint());
    }

    fn dec(cat: &str, label: &str) -> Decision {
        Decision {
            category: cat.into(),
            label: label.into(),
            scores: BTreeMap::new(),
        }
    }

    #[test]
    fn task_metrics_per_task() {
        let schema = LabelSchema::new(vec!["food".into(), "price".into()], vec!["positive".into(), "negative".into()]).unwrap();
        let split = DatasetSplit::new(
            SplitName::Test,
            vec![Example::new(
                "e",
                "x",
                vec![AspectLabel::new("food", "positive"), AspectLabel::new("price", "negative")],
            )],
        );
        let acsa = vec![Prediction {
            id: "e".into(),
            decisions: vec![dec("food", "positive"), dec("price", "positive")],
        }];
        assert_eq!(task_metrics(&acsa, &split, Task::Acsa, &schema).unwrap().accuracy, Some(0.5));
        let acd = vec![Prediction {
            id: "e".into(),
            decisions: vec![dec("food", PRESENT), dec("price", crate::templates::ABSENT)],
        }];
        let m = task_metrics(&acd, &split, Task::Acd, &schema).unwrap().prf.unwrap();
        assert_eq!((m.precision, m.recall), (1.0, 0.5));
        let m = task_metrics(&acsa, &split, Task::Joint, &schema).unwrap().prf.unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 1));
    }

    #[test]
    fn report_csv_and_summary() {
        let mut r = EvalReport::new("fewshot", "ab".into(), vec![1, 2]);
        r.rows.push(ReportRow::new("generation", "k=10", Some(1), "accuracy", 0.5));
        r.rows.push(ReportRow::new("generation", "k=10", Some(2), "accuracy", 0.7));
        r.rows.push(ReportRow::failed("mlm", "k=10", Some(1), "primary", &Error::Eval("boom".into())));
        let csv = r.to_csv();
        assert!(csv.starts_with("# fingerprint=ab\nmethod,setting,seed,metric,value,note\n"));
        assert_eq!(csv.lines().count(), 5);
        let s = r.summary();
        assert_eq!(s.len(), 1);
        assert!((s[0].mean - 0.6).abs() < 1e-12);
        assert!((s[0].std - 0.1).abs() < 1e-12);
        assert!((s[0].median - 0.6).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let (csv_path, md_path) = r.write(dir.path()).unwrap();
        let name = csv_path.file_name().unwrap().to_str().unwrap();
        assert!(name.starts_with("fewshot_") && name.ends_with(".csv"));
        assert!(md_path.exists());
        assert_eq!(std::fs::read_to_string(csv_path).unwrap(), csv);
    }

    #[test]
    fn bucket_report_weighted_mean_identity() {
        let schema = LabelSchema::new(
            vec!["food".into(), "misc".into()],
            vec!["positive".into(), "negative".into()],
        )
        .unwrap();
        let split = DatasetSplit::new(
            SplitName::Test,
            vec![
                Example::new("a", "the food was good", vec![AspectLabel::new("food", "positive")]),
                Example::new(
                    "b",
                    "the pizza was bad and overall it was good",
                    vec![AspectLabel::new("food", "negative"), AspectLabel::new("misc", "positive")],
                ),
            ],
        );
        let buckets = frequency_buckets(&split, &schema);
        assert_eq!(buckets.bucket_of("misc"), Some(Bucket::Zero));
        let preds = vec![
            Prediction {
                id: "a".into(),
                decisions: vec![dec("food", "positive")],
            },
            Prediction {
                id: "b".into(),
                decisions: vec![dec("food", "positive"), dec("misc", "positive")],
            },
        ];
        let rows = bucket_report(&preds, &split, &buckets).unwrap();
        assert!(rows.iter().any(|r| r.bucket == Bucket::Zero && r.accuracy == 1.0));
        let n: usize = rows.iter().map(|r| r.instances).sum();
        let weighted: f64 = rows.iter().map(|r| r.accuracy * r.instances as f64).sum::<f64>() / n as f64;
        let overall = accuracy(&acsa_pairs(&preds, &split).unwrap()).unwrap();
        assert!((weighted - overall).abs() < 1e-12);
    }

    #[test]
    fn majority_counts() {
        let schema = LabelSchema::new(vec!["food".into()], vec!["positive".into(), "negative".into()]).unwrap();
        let split = DatasetSplit::new(
            SplitName::Test,
            vec![
                Example::new("a", "x", vec![AspectLabel::new("food", "negative")]),
                Example::new("b", "x", vec![AspectLabel::new("food", "negative")]),
                Example::new("c", "x", vec![AspectLabel::new("food", "positive")]),
            ],
        );
        let (label, acc) = majority_baseline(&split, &schema).unwrap();
        assert_eq!(label, "negative");
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fewshot_rejects_unsorted_ks() {
        let schema = LabelSchema::new(vec!["food".into()], vec!["positive".into()]).unwrap();
        let split = DatasetSplit::new(SplitName::Train, vec![]);
        let d = Domain {
            name: "x",
            schema: &schema,
            train: &split,
            dev: &split,
            test: &split,
        };
        assert!(fewshot_curve::<f32>(d, &[500, 10], &[1], &[Method::Generation], &ExperimentConfig::default()).is_err());
    }
}

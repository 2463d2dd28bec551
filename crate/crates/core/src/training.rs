//! Training pairs and the optimization loop.
//!
//! The loop is generic over [`Trainable`], so the generation model and the
//! two baselines share batching, Adam, early stopping and best-epoch
//! selection; only the per-item loss differs.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, LabelSchema};
use crate::error::{Error, Result};
use crate::model::{Dropout, Model, Real};
use crate::templates::{fill, FilledTemplate, TemplateSet};
use crate::text::{TokenSeq, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    Acsa,
    Acd,
    Joint,
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::Acsa => "acsa",
            PairMode::Acd => "acd",
            PairMode::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub source: TokenSeq,
    pub target: FilledTemplate,
    pub mode: PairMode,
}

/// (sentence, filled template) pairs for one task.
///
/// * acsa: one pair per gold (category, polarity).
/// * acd: a presence pair per gold category and an absence pair for every
///   other schema category.
/// * joint: one pair per schema category, labelled with the gold polarity or
///   the none label.
pub fn build_pairs(
    split: &DatasetSplit,
    schema: &LabelSchema,
    templates: &TemplateSet,
    vocab: &Vocab,
    mode: PairMode,
) -> Result<Vec<TrainPair>> {
    let mut pairs = Vec::new();
    for ex in &split.examples {
        let source = vocab.encode_tokens(&ex.tokens);
        let mut push = |target: FilledTemplate| {
            pairs.push(TrainPair {
                source: source.clone(),
                target,
                mode,
            })
        };
        match mode {
            PairMode::Acsa => {
                for l in &ex.labels {
                    push(fill(&templates.acsa, &l.category, Some(&l.polarity), schema, vocab)?);
                }
            }
            PairMode::Acd => {
                for cat in &schema.categories {
                    let spec = if ex.polarity_of(cat).is_some() {
                        &templates.acd_pos
                    } else {
                        &templates.acd_neg
                    };
                    push(fill(spec, cat, None, schema, vocab)?);
                }
            }
            PairMode::Joint => {
                for cat in &schema.categories {
                    let label = ex.polarity_of(cat).unwrap_or(&schema.none_label);
                    push(fill(&templates.joint, cat, Some(label), schema, vocab)?);
                }
            }
        }
    }
    Ok(pairs)
}

/// Keep every presence pair and a `ratio` share of the absence pairs. Not
/// used by default: the complement is taken exhaustively.
pub fn subsample_negatives(pairs: Vec<TrainPair>, ratio: f64, seed: u64) -> Vec<TrainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .into_iter()
        .filter(|p| p.target.label != crate::templates::ABSENT || rng.gen_bool(ratio.clamp(0.0, 1.0)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    /// Linear learning-rate warmup over this many optimizer steps.
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 30,
            patience: 5,
            lr: 3e-4,
            batch_size: 16,
            seed: 13,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Something the loop can optimize: a flat parameter view plus a per-item
/// loss with gradient.
pub trait Trainable<F: Real>: Clone + Send + Sync {
    type Item: Sync;

    fn num_params(&self) -> usize;

    /// Parameter buffers in a fixed order; the gradient buffer is their
    /// concatenation.
    fn param_slices_mut(&mut self) -> Vec<&mut [F]>;

    fn dropout_rate(&self) -> f64;

    /// Loss for one item, adding its gradient into `grad`.
    fn item_loss_grad(&self, item: &Self::Item, grad: &mut [F], dropout: Option<&mut Dropout>) -> Result<F>;
}

impl<F: Real> Trainable<F> for Model<F> {
    type Item = TrainPair;

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        vec![&mut self.params]
    }

    fn dropout_rate(&self) -> f64 {
        self.config().dropout
    }

    fn item_loss_grad(&self, item: &TrainPair, grad: &mut [F], dropout: Option<&mut Dropout>) -> Result<F> {
        self.pair_loss_grad(item.source.ids(), item.target.tokens.ids(), grad, dropout)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    warmup: usize,
}

impl<F: Real> Adam<F> {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Adam {
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            warmup: cfg.warmup_steps,
        }
    }

    pub fn step(&mut self, params: Vec<&mut [F]>, grad: &[F]) {
        self.t += 1;
        let b1 = F::c(self.beta1);
        let b2 = F::c(self.beta2);
        let one = F::one();
        let lr = if (self.t as usize) < self.warmup {
            self.lr * self.t as f64 / self.warmup as f64
        } else {
            self.lr
        };
        let step = F::c(lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t)));
        let eps = F::c(self.eps);
        let wd = F::c(lr * self.weight_decay);
        let mut off = 0;
        for slice in params {
            for (j, p) in slice.iter_mut().enumerate() {
                let i = off + j;
                let g = grad[i];
                self.m[i] = b1 * self.m[i] + (one - b1) * g;
                self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
                *p -= step * self.m[i] / (self.v[i].sqrt() + eps) + wd * *p;
            }
            off += slice.len();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-item loss over the epoch.
    pub train_loss: f64,
    pub dev_metric: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    /// A non-finite loss appeared; the returned parameters are the best
    /// finished epoch, or the last finite state if none finished.
    Diverged { epoch: usize, step: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub stop: StopReason,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "dev_metric"]).expect("in-memory write");
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{}", e.train_loss),
                e.dev_metric.map(|m| format!("{m}")).unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn save_csv(&self, path: &Path, fingerprint: Option<&str>) -> Result<()> {
        let mut body = String::new();
        if let Some(fp) = fingerprint {
            body.push_str(&format!("# fingerprint={fp}\n"));
        }
        body.push_str(&self.to_csv());
        crate::io::write_atomic(path, body.as_bytes())
    }
}

pub struct TrainOutcome<T> {
    pub best: T,
    pub history: TrainHistory,
}

/// Early-stopping bookkeeping: tracks the best metric and how many epochs
/// have passed without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record `metric` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }
}

fn item_rng(seed: u64, epoch: usize, step: usize, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 40) ^ ((step as u64) << 16) ^ idx as u64);
    rng
}

/// One optimizer step on `batch`; returns the summed loss, or `None` when it
/// was not finite (parameters are then left untouched).
fn batch_step<F: Real, T: Trainable<F>>(
    state: &mut T,
    opt: &mut Adam<F>,
    batch: &[&T::Item],
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<Option<F>> {
    let n = state.num_params();
    let rate = state.dropout_rate();
    let snapshot = &*state;
    // Per-item gradients run in parallel and are summed in item order so the
    // result does not depend on the thread count.
    let parts: Vec<Result<(F, Vec<F>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut g = vec![F::zero(); n];
            let loss = if rate > 0.0 {
                let mut rng = item_rng(cfg.seed, epoch, step, i);
                let mut drop = Dropout { rate, rng: &mut rng };
                snapshot.item_loss_grad(item, &mut g, Some(&mut drop))?
            } else {
                snapshot.item_loss_grad(item, &mut g, None)?
            };
            Ok((loss, g))
        })
        .collect();
    let mut grad = vec![F::zero(); n];
    let mut loss = F::zero();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        crate::model::linalg::add_assign(&mut grad, &g);
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Ok(None);
    }
    let scale = F::one() / F::c(batch.len() as f64);
    grad.iter_mut().for_each(|g| *g *= scale);
    if let Some(clip) = cfg.grad_clip {
        let norm = grad.iter().map(|&g| g * g).sum::<F>().sqrt();
        if norm.f64() > clip {
            let s = F::c(clip) / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    opt.step(state.param_slices_mut(), &grad);
    Ok(Some(loss))
}

/// Mini-batch training with per-epoch dev selection and early stopping.
///
/// After every epoch `dev_metric` (higher is better) is evaluated on the
/// current parameters; the parameters of the best epoch are returned.
/// Training stops after `max_epochs` or once `patience` epochs pass without a
/// strict improvement. Without a dev metric the final parameters are
/// returned.
pub fn train<F, T, M>(init: T, items: &[T::Item], cfg: &TrainConfig, mut dev_metric: Option<M>) -> Result<TrainOutcome<T>>
where
    F: Real,
    T: Trainable<F>,
    M: FnMut(&T) -> Result<f64>,
{
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Config("no training items".into()));
    }
    let mut state = init;
    let mut opt = Adam::new(state.num_params(), cfg);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best: Option<T> = None;
    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&T::Item> = chunk.iter().map(|&i| &items[i]).collect();
            match batch_step(&mut state, &mut opt, &batch, cfg, epoch, step)? {
                Some(loss) => total += loss.f64(),
                None => {
                    log::warn!("non-finite loss at epoch {epoch}, step {step}; stopping");
                    stop = StopReason::Diverged { epoch, step };
                    break 'epochs;
                }
            }
        }
        let train_loss = total / items.len() as f64;
        let metric = match dev_metric.as_mut() {
            Some(f) => Some(f(&state)?),
            None => None,
        };
        log::info!(
            "epoch {epoch}: train_loss={train_loss:.5} dev={}",
            metric.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into())
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_metric: metric,
        });
        if let Some(m) = metric {
            if stopper.observe(epoch, m) {
                best = Some(state.clone());
            }
            if stopper.should_stop() {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }

    let (best_epoch, best_metric, best_state) = match (stopper.best(), best) {
        (Some((e, m)), Some(s)) => (e, Some(m), s),
        _ => (epochs.len(), None, state),
    };
    Ok(TrainOutcome {
        best: best_state,
        history: TrainHistory {
            epochs,
            best_epoch,
            best_metric,
            stop,
        },
    })
}

/// Run a fixed number of optimizer steps over `items` in order (cycling),
/// returning the loss of each step. Useful for memorization probes.
pub fn fit_steps<F: Real, T: Trainable<F>>(state: &mut T, items: &[T::Item], steps: usize, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Config("no training items".into()));
    }
    let mut opt = Adam::new(state.num_params(), cfg);
    let mut losses = Vec::with_capacity(steps);
    let mut cursor = 0;
    for step in 0..steps {
        let batch: Vec<&T::Item> = (0..cfg.batch_size.min(items.len()))
            .map(|j| &items[(cursor + j) % items.len()])
            .collect();
        cursor = (cursor + batch.len()) % items.len();
        match batch_step(state, &mut opt, &batch, cfg, 0, step)? {
            Some(l) => losses.push(l.f64() / batch.len() as f64),
            None => {
                return Err(Error::NonFiniteLoss {
                    loss: f64::NAN,
                    epoch: 0,
                    step,
                })
            }
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_jsonl_str, SplitName};
    use crate::model::{InitMode, ModelConfig};
    use crate::templates::TemplateRegistry;
    use crate::text::build_vocab;

    fn schema5() -> LabelSchema {
        LabelSchema::new(
            ["food", "price", "service", "ambience", "miscellaneous"].map(String::from).to_vec(),
            ["positive", "negative", "neutral"].map(String::from).to_vec(),
        )
        .unwrap()
    }

    fn one_example(schema: &LabelSchema) -> DatasetSplit {
        parse_jsonl_str(
            r#"{"id":"1","text":"Prices are higher but the food was great","labels":[{"category":"price","polarity":"negative"},{"category":"food","polarity":"positive"}]}"#,
            SplitName::Train,
            schema,
        )
        .unwrap()
    }

    #[test]
    fn pair_counts_follow_task_rules() {
        let schema = schema5();
        let split = one_example(&schema);
        let vocab = build_vocab(&[&split], &schema);
        let set = TemplateSet::select(&TemplateRegistry::default(), None, None).unwrap();
        let acsa = build_pairs(&split, &schema, &set, &vocab, PairMode::Acsa).unwrap();
        assert_eq!(acsa.len(), 2);
        let acd = build_pairs(&split, &schema, &set, &vocab, PairMode::Acd).unwrap();
        assert_eq!(acd.iter().filter(|p| p.target.label == crate::templates::PRESENT).count(), 2);
        assert_eq!(acd.iter().filter(|p| p.target.label == crate::templates::ABSENT).count(), 3);
        let joint = build_pairs(&split, &schema, &set, &vocab, PairMode::Joint).unwrap();
        assert_eq!(joint.len(), 5);
        assert_eq!(joint.iter().filter(|p| p.target.label == "none").count(), 3);
        let empty = DatasetSplit::new(SplitName::Train, vec![]);
        assert!(build_pairs(&empty, &schema, &set, &vocab, PairMode::Acd).unwrap().is_empty());
        assert_eq!(subsample_negatives(acd.clone(), 0.0, 1).len(), 2);
        assert_eq!(subsample_negatives(acd, 1.0, 1).len(), 5);
    }

    #[test]
    fn early_stopper_plateau_from_epoch_three_stops_at_eight() {
        let mut s = EarlyStopper::new(5);
        let metrics = [0.1, 0.2, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3];
        let mut stopped = None;
        for (i, &m) in metrics.iter().enumerate() {
            s.observe(i + 1, m);
            if s.should_stop() {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(8));
        assert_eq!(s.best(), Some((3, 0.3)));
    }

    fn tiny_model(v: usize) -> Model<f64> {
        let cfg = ModelConfig {
            d_model: 16,
            d_ffn: 16,
            n_layers_enc: 1,
            n_layers_dec: 1,
            dropout: 0.0,
            ..ModelConfig::with_vocab(v)
        };
        Model::init(cfg, 1, InitMode::Random).unwrap()
    }

    #[test]
    fn loop_stops_early_and_returns_best_epoch() {
        let schema = schema5();
        let split = one_example(&schema);
        let vocab = build_vocab(&[&split], &schema);
        let set = TemplateSet::default();
        let pairs = build_pairs(&split, &schema, &set, &vocab, PairMode::Acsa).unwrap();
        let cfg = TrainConfig {
            max_epochs: 20,
            patience: 5,
            batch_size: 2,
            ..Default::default()
        };
        let mut calls = 0;
        let metric = |_: &Model<f64>| {
            calls += 1;
            Ok([0.1, 0.2, 0.3][(calls - 1).min(2)])
        };
        let out = train(tiny_model(vocab.len()), &pairs, &cfg, Some(metric)).unwrap();
        assert_eq!(out.history.epochs.len(), 8);
        assert_eq!(out.history.best_epoch, 3);
        assert_eq!(out.history.stop, StopReason::EarlyStopped);
    }

    #[test]
    fn training_is_deterministic_and_first_step_descends() {
        let schema = schema5();
        let split = one_example(&schema);
        let vocab = build_vocab(&[&split], &schema);
        let pairs = build_pairs(&split, &schema, &TemplateSet::default(), &vocab, PairMode::Joint).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            patience: 3,
            batch_size: 2,
            lr: 1e-4,
            ..Default::default()
        };
        let run = || {
            let mut m = tiny_model(vocab.len());
            let mut cfg_m = m.config().clone();
            cfg_m.dropout = 0.1;
            m = Model::from_params(cfg_m, m.params).unwrap();
            train(m, &pairs, &cfg, None::<fn(&Model<f64>) -> Result<f64>>).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best.params, b.best.params);

        let mut m = tiny_model(vocab.len());
        let before = m.loss_and_grad(&[(pairs[0].source.ids(), pairs[0].target.tokens.ids())]).unwrap().0;
        let one = TrainConfig {
            batch_size: 1,
            lr: 1e-4,
            ..Default::default()
        };
        fit_steps(&mut m, &pairs[..1], 1, &one).unwrap();
        let after = m.loss_and_grad(&[(pairs[0].source.ids(), pairs[0].target.tokens.ids())]).unwrap().0;
        assert!(after < before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 40, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}

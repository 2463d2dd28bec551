//! Comparison methods on the same encoder-decoder backbone.
//!
//! * [`Classifier`]: the sequence `<s> X <sep> category <sep>` goes through
//!   both encoder and decoder, and a two-layer perceptron reads the decoder
//!   state at the last position.
//! * [`Mlm`]: the sentence is followed by a prompt whose label slot holds
//!   `<mask>`; the decoder row at the mask position is restricted to the
//!   label words.
//!
//! Both implement [`Trainable`] so they reuse [`crate::training::train`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{DatasetSplit, Example, LabelSchema};
use crate::error::{Error, Result};
use crate::inference::{argmax_first, joint_choice, Decision, Prediction, Task};
use crate::model::linalg::{add_assign, log_softmax_in_place, matmul_bias, matmul_nt_acc, matmul_tn_acc};
use crate::model::{gelu, gelu_grad, Checkpoint, Dropout, Model, NamedTensor, Real};
use crate::templates::{TemplateSpec, ABSENT, POLARITY_SLOT, PRESENT};
use crate::text::{is_single_token, tokenize, TokenSeq, Vocab, BOS, MASK, SEP};
use crate::training::Trainable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Generation,
    Classification,
    Mlm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Generation, Method::Classification, Method::Mlm];

    /// Whether the method can be trained and evaluated on `task`.
    pub fn supports(self, task: Task) -> bool {
        match self {
            Method::Generation => true,
            Method::Classification => task != Task::Pipeline,
            Method::Mlm => matches!(task, Task::Acsa | Task::Joint),
        }
    }

    pub fn require(self, task: Task) -> Result<()> {
        if self.supports(task) {
            Ok(())
        } else {
            Err(Error::Unsupported {
                method: self.to_string(),
                task: task.to_string(),
            })
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Generation => "generation",
            Method::Classification => "classification",
            Method::Mlm => "mlm",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generation" => Ok(Method::Generation),
            "classification" => Ok(Method::Classification),
            "mlm" => Ok(Method::Mlm),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected generation, classification or mlm)"
            ))),
        }
    }
}

/// Output labels for a baseline, in decision order.
///
/// ACSA uses the schema polarities, the joint task appends the none label,
/// and detection uses `[absent, present]` so that a tie means absent.
pub fn task_labels(schema: &LabelSchema, task: Task) -> Vec<String> {
    match task {
        Task::Acsa => schema.polarities.clone(),
        Task::Joint => {
            let mut l = schema.polarities.clone();
            l.push(schema.none_label.clone());
            l
        }
        Task::Acd | Task::Pipeline => vec![ABSENT.to_string(), PRESENT.to_string()],
    }
}

/// One training instance: an input sequence, the row to read, and the gold
/// class index into the method's label list.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineItem {
    pub input: TokenSeq,
    pub row: usize,
    pub class: usize,
}

fn category_ids(vocab: &Vocab, category: &str) -> Vec<u32> {
    vocab.encode_tokens(&tokenize(category)).0
}

/// `<s> X <sep> category <sep>`; the last position is read by the head.
pub fn classification_input<S: AsRef<str>>(vocab: &Vocab, sentence: &[S], category: &str) -> TokenSeq {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode_tokens(sentence).0);
    ids.push(SEP);
    ids.extend(category_ids(vocab, category));
    ids.push(SEP);
    TokenSeq(ids)
}

/// `<s> X <sep> prompt` with `<mask>` in the label slot. Returns the sequence
/// and the mask position.
pub fn mlm_input<S: AsRef<str>>(vocab: &Vocab, sentence: &[S], prompt: &TemplateSpec, category: &str) -> Result<(TokenSeq, usize)> {
    let filled = prompt.pattern.replace(crate::templates::CATEGORY_SLOT, category);
    let mut parts = filled.split(POLARITY_SLOT);
    let (left, right) = match (parts.next(), parts.next(), parts.next()) {
        (Some(l), Some(r), None) => (l, r),
        _ => {
            return Err(Error::Template(format!(
                "prompt {:?} needs exactly one {POLARITY_SLOT} slot for the mask",
                prompt.id
            )))
        }
    };
    let mut ids = vec![BOS];
    ids.extend(vocab.encode_tokens(sentence).0);
    ids.push(SEP);
    ids.extend(vocab.encode_tokens(&tokenize(left)).0);
    let pos = ids.len();
    ids.push(MASK);
    ids.extend(vocab.encode_tokens(&tokenize(right)).0);
    Ok((TokenSeq(ids), pos))
}

/// Instances for `task`, built by `make(example, category) -> (input, row)`.
fn build_items(
    split: &DatasetSplit,
    schema: &LabelSchema,
    task: Task,
    mut make: impl FnMut(&Example, &str) -> Result<(TokenSeq, usize)>,
) -> Result<Vec<BaselineItem>> {
    let labels = task_labels(schema, task);
    let class_of = |l: &str| labels.iter().position(|x| x == l).expect("label list covers task labels");
    let mut items = Vec::new();
    for ex in &split.examples {
        match task {
            Task::Acsa => {
                for l in &ex.labels {
                    let (input, row) = make(ex, &l.category)?;
                    items.push(BaselineItem { input, row, class: class_of(&l.polarity) });
                }
            }
            Task::Joint => {
                for cat in &schema.categories {
                    let (input, row) = make(ex, cat)?;
                    let label = ex.polarity_of(cat).unwrap_or(&schema.none_label);
                    items.push(BaselineItem { input, row, class: class_of(label) });
                }
            }
            Task::Acd => {
                for cat in &schema.categories {
                    let (input, row) = make(ex, cat)?;
                    let class = usize::from(ex.polarity_of(cat).is_some());
                    items.push(BaselineItem { input, row, class });
                }
            }
            Task::Pipeline => {
                return Err(Error::Unsupported {
                    method: "baseline".into(),
                    task: task.to_string(),
                })
            }
        }
    }
    Ok(items)
}

/// Softmax cross-entropy of `logits` against `class`; overwrites `logits`
/// with the gradient and returns the loss.
fn softmax_xent<F: Real>(logits: &mut [F], class: usize) -> F {
    log_softmax_in_place(logits);
    let loss = -logits[class];
    for x in logits.iter_mut() {
        *x = x.exp();
    }
    logits[class] -= F::one();
    loss
}

/// Pick the label index from per-label scores under the task's tie rule.
fn decide(task: Task, scores: &[f64]) -> Option<usize> {
    match task {
        Task::Joint => joint_choice(scores),
        _ => Some(argmax_first(scores)),
    }
}

fn to_decision(category: &str, labels: &[String], scores: &[f64], chosen: usize) -> Decision {
    Decision {
        category: category.to_string(),
        label: labels[chosen].clone(),
        scores: labels.iter().cloned().zip(scores.iter().copied()).collect(),
    }
}

/// Categories a baseline decides on for one example.
fn task_categories<'a>(ex: &'a Example, schema: &'a LabelSchema, task: Task) -> Vec<&'a str> {
    match task {
        Task::Acsa => ex.labels.iter().map(|l| l.category.as_str()).collect(),
        _ => schema.categories.iter().map(String::as_str).collect(),
    }
}

/// Two-layer perceptron `d → d → n` with a GELU in between, stored as one
/// flat buffer `[w1 | b1 | w2 | b2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<F> {
    pub d_in: usize,
    pub hidden: usize,
    pub n_out: usize,
    pub params: Vec<F>,
    trained: bool,
}

struct HeadCache<F> {
    pre: Vec<F>,
    act: Vec<F>,
}

impl<F: Real> ClassifierHead<F> {
    pub fn new(d_in: usize, n_out: usize, seed: u64) -> Self {
        let hidden = d_in;
        let mut head = Self::zeros(d_in, n_out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        let a1 = (6.0 / (d_in + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + n_out) as f64).sqrt();
        let (w1, w2) = (head.w1_range(), head.w2_range());
        head.params[w1].iter_mut().for_each(|x| *x = F::c(rng.gen_range(-a1..a1)));
        head.params[w2].iter_mut().for_each(|x| *x = F::c(rng.gen_range(-a2..a2)));
        head
    }

    pub fn zeros(d_in: usize, n_out: usize) -> Self {
        let hidden = d_in;
        ClassifierHead {
            d_in,
            hidden,
            n_out,
            params: vec![F::zero(); d_in * hidden + hidden + hidden * n_out + n_out],
            trained: false,
        }
    }

    fn w1_range(&self) -> std::ops::Range<usize> {
        0..self.d_in * self.hidden
    }
    fn b1_range(&self) -> std::ops::Range<usize> {
        let s = self.d_in * self.hidden;
        s..s + self.hidden
    }
    fn w2_range(&self) -> std::ops::Range<usize> {
        let s = self.b1_range().end;
        s..s + self.hidden * self.n_out
    }
    fn b2_range(&self) -> std::ops::Range<usize> {
        let s = self.w2_range().end;
        s..s + self.n_out
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn forward(&self, h: &[F]) -> (Vec<F>, HeadCache<F>) {
        let p = &self.params;
        let pre = matmul_bias(h, &p[self.w1_range()], &p[self.b1_range()], 1, self.d_in, self.hidden);
        let act: Vec<F> = pre.iter().map(|&z| gelu(z)).collect();
        let logits = matmul_bias(&act, &p[self.w2_range()], &p[self.b2_range()], 1, self.hidden, self.n_out);
        (logits, HeadCache { pre, act })
    }

    pub fn logits(&self, h: &[F]) -> Vec<F> {
        self.forward(h).0
    }

    /// Accumulates head gradients into `g` and returns d(loss)/d(h).
    fn backward(&self, h: &[F], c: &HeadCache<F>, dlogits: &[F], g: &mut [F]) -> Vec<F> {
        let p = &self.params;
        matmul_tn_acc(&c.act, dlogits, &mut g[self.w2_range()], 1, self.hidden, self.n_out);
        add_assign(&mut g[self.b2_range()], dlogits);
        let mut dact = vec![F::zero(); self.hidden];
        matmul_nt_acc(dlogits, &p[self.w2_range()], &mut dact, 1, self.n_out, self.hidden);
        for (da, &z) in dact.iter_mut().zip(&c.pre) {
            *da *= gelu_grad(z);
        }
        matmul_tn_acc(h, &dact, &mut g[self.w1_range()], 1, self.d_in, self.hidden);
        add_assign(&mut g[self.b1_range()], &dact);
        let mut dh = vec![F::zero(); self.d_in];
        matmul_nt_acc(&dact, &p[self.w1_range()], &mut dh, 1, self.hidden, self.d_in);
        dh
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor<F>> {
        let t = |name: &str, shape: Vec<usize>, r: std::ops::Range<usize>| NamedTensor {
            name: name.to_string(),
            shape,
            data: self.params[r].to_vec(),
        };
        vec![
            t("head.w1", vec![self.d_in, self.hidden], self.w1_range()),
            t("head.b1", vec![self.hidden], self.b1_range()),
            t("head.w2", vec![self.hidden, self.n_out], self.w2_range()),
            t("head.b2", vec![self.n_out], self.b2_range()),
        ]
    }

    /// Rebuild a trained head from checkpoint tensors.
    pub fn from_tensors(tensors: &[NamedTensor<F>]) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks classifier tensor {name}")))
        };
        let w1 = get("head.w1")?;
        let w2 = get("head.w2")?;
        if w1.shape.len() != 2 || w2.shape.len() != 2 || w1.shape[1] != w1.shape[0] || w2.shape[0] != w1.shape[1] {
            return Err(Error::Config("classifier head tensors have inconsistent shapes".into()));
        }
        let mut head = Self::zeros(w1.shape[0], w2.shape[1]);
        for (name, r) in [
            ("head.w1", head.w1_range()),
            ("head.b1", head.b1_range()),
            ("head.w2", head.w2_range()),
            ("head.b2", head.b2_range()),
        ] {
            let t = get(name)?;
            if t.data.len() != r.len() {
                return Err(Error::Config(format!("classifier tensor {name} has {} values, expected {}", t.data.len(), r.len())));
            }
            head.params[r].copy_from_slice(&t.data);
        }
        head.trained = true;
        Ok(head)
    }
}

/// Classification baseline: backbone plus [`ClassifierHead`].
#[derive(Clone, Debug)]
pub struct Classifier<F> {
    pub model: Model<F>,
    pub head: ClassifierHead<F>,
    pub task: Task,
    pub labels: Vec<String>,
}

impl<F: Real> Classifier<F> {
    pub fn new(model: Model<F>, schema: &LabelSchema, task: Task, seed: u64) -> Result<Self> {
        Method::Classification.require(task)?;
        let labels = task_labels(schema, task);
        let head = ClassifierHead::new(model.d_model(), labels.len(), seed);
        Ok(Classifier { model, head, task, labels })
    }

    pub fn items(&self, split: &DatasetSplit, schema: &LabelSchema, vocab: &Vocab) -> Result<Vec<BaselineItem>> {
        build_items(split, schema, self.task, |ex, cat| {
            let input = classification_input(vocab, &ex.tokens, cat);
            let row = input.len() - 1;
            Ok((input, row))
        })
    }

    /// Head logits for one input, read at its last position.
    pub fn logits(&self, input: &TokenSeq) -> Result<Vec<F>> {
        if !self.head.is_trained() {
            return Err(Error::UntrainedHead);
        }
        let enc = self.model.encode(input.ids(), None)?;
        let dec = self.model.decode(&enc, input.ids(), None)?;
        let d = self.model.d_model();
        let last = input.len() - 1;
        Ok(self.head.logits(&dec.hidden[last * d..(last + 1) * d]))
    }

    /// Label decision for one (sentence, category), or `None` when the joint
    /// task picks none.
    pub fn classify<S: AsRef<str>>(&self, sentence: &[S], category: &str, vocab: &Vocab) -> Result<(Option<usize>, Vec<f64>)> {
        let logits = self.logits(&classification_input(vocab, sentence, category))?;
        let scores: Vec<f64> = logits.iter().map(|x| x.f64()).collect();
        Ok((decide(self.task, &scores), scores))
    }

    pub fn predict(&self, ex: &Example, schema: &LabelSchema, vocab: &Vocab) -> Result<Prediction> {
        let mut decisions = Vec::new();
        for cat in task_categories(ex, schema, self.task) {
            let (choice, scores) = self.classify(&ex.tokens, cat, vocab)?;
            if let Some(i) = choice {
                decisions.push(to_decision(cat, &self.labels, &scores, i));
            }
        }
        Ok(Prediction { id: ex.id.clone(), decisions })
    }

    pub fn to_checkpoint(&self, vocab: &Vocab) -> Checkpoint<F> {
        let mut ck = Checkpoint::new(self.model.clone(), vocab.clone());
        ck.extra = json!({ "method": "classification", "task": self.task, "labels": self.labels });
        ck.aux = self.head.to_tensors();
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint<F>) -> Result<Self> {
        let head = ClassifierHead::from_tensors(&ck.aux)?;
        let task: Task = serde_json::from_value(ck.extra["task"].clone())
            .map_err(|e| Error::Config(format!("checkpoint task: {e}")))?;
        let labels: Vec<String> = serde_json::from_value(ck.extra["labels"].clone())
            .map_err(|e| Error::Config(format!("checkpoint labels: {e}")))?;
        if labels.len() != head.n_out {
            return Err(Error::Config(format!(
                "checkpoint lists {} labels but the head has {} outputs",
                labels.len(),
                head.n_out
            )));
        }
        Ok(Classifier { model: ck.model, head, task, labels })
    }
}

impl<F: Real> Trainable<F> for Classifier<F> {
    type Item = BaselineItem;

    fn num_params(&self) -> usize {
        self.model.params.len() + self.head.params.len()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        vec![&mut self.model.params, &mut self.head.params]
    }

    fn dropout_rate(&self) -> f64 {
        self.model.config().dropout
    }

    fn item_loss_grad(&self, item: &BaselineItem, grad: &mut [F], mut dropout: Option<&mut Dropout>) -> Result<F> {
        let ids = item.input.ids();
        let enc = self.model.encode(ids, dropout.as_deref_mut())?;
        let dec = self.model.decode(&enc, ids, dropout)?;
        let d = self.model.d_model();
        let h = &dec.hidden[item.row * d..(item.row + 1) * d];
        let (mut logits, cache) = self.head.forward(h);
        let loss = softmax_xent(&mut logits, item.class);
        let (gm, gh) = grad.split_at_mut(self.model.params.len());
        let dh = self.head.backward(h, &cache, &logits, gh);
        let mut d_hidden = vec![F::zero(); dec.hidden.len()];
        d_hidden[item.row * d..(item.row + 1) * d].copy_from_slice(&dh);
        self.model.backward(&enc, &dec, &d_hidden, gm);
        Ok(loss)
    }
}

/// Masked-label baseline over a generation template used as a prompt.
#[derive(Clone, Debug)]
pub struct Mlm<F> {
    pub model: Model<F>,
    pub task: Task,
    pub prompt: TemplateSpec,
    pub labels: Vec<String>,
    label_ids: Vec<u32>,
}

impl<F: Real> Mlm<F> {
    /// The prompt must carry a label slot; every label must be a single
    /// in-vocabulary token.
    pub fn new(model: Model<F>, schema: &LabelSchema, task: Task, prompt: TemplateSpec, vocab: &Vocab) -> Result<Self> {
        Method::Mlm.require(task)?;
        prompt.validate()?;
        if prompt.pattern.matches(POLARITY_SLOT).count() != 1 {
            return Err(Error::Template(format!("prompt {:?} has no label slot for the mask", prompt.id)));
        }
        let labels = task_labels(schema, task);
        let label_ids = labels
            .iter()
            .map(|l| {
                if !is_single_token(l) {
                    return Err(Error::Schema(format!("label word {l:?} is not a single token")));
                }
                vocab
                    .id(l)
                    .ok_or_else(|| Error::Schema(format!("label word {l:?} is not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlm { model, task, prompt, labels, label_ids })
    }

    pub fn label_ids(&self) -> &[u32] {
        &self.label_ids
    }

    pub fn items(&self, split: &DatasetSplit, schema: &LabelSchema, vocab: &Vocab) -> Result<Vec<BaselineItem>> {
        build_items(split, schema, self.task, |ex, cat| mlm_input(vocab, &ex.tokens, &self.prompt, cat))
    }

    /// Log-probabilities of the label words at the mask, renormalized over
    /// the label set.
    pub fn label_logprobs(&self, input: &TokenSeq, row: usize) -> Result<Vec<F>> {
        let enc = self.model.encode(input.ids(), None)?;
        let dec = self.model.decode(&enc, input.ids(), None)?;
        let full = self.model.lm_logits_row(&dec.hidden, row);
        let mut restricted: Vec<F> = self.label_ids.iter().map(|&i| full[i as usize]).collect();
        log_softmax_in_place(&mut restricted);
        Ok(restricted)
    }

    pub fn fill_mask<S: AsRef<str>>(&self, sentence: &[S], category: &str, vocab: &Vocab) -> Result<(Option<usize>, Vec<f64>)> {
        let (input, row) = mlm_input(vocab, sentence, &self.prompt, category)?;
        let scores: Vec<f64> = self.label_logprobs(&input, row)?.iter().map(|x| x.f64()).collect();
        Ok((decide(self.task, &scores), scores))
    }

    pub fn predict(&self, ex: &Example, schema: &LabelSchema, vocab: &Vocab) -> Result<Prediction> {
        let mut decisions = Vec::new();
        for cat in task_categories(ex, schema, self.task) {
            let (choice, scores) = self.fill_mask(&ex.tokens, cat, vocab)?;
            if let Some(i) = choice {
                decisions.push(to_decision(cat, &self.labels, &scores, i));
            }
        }
        Ok(Prediction { id: ex.id.clone(), decisions })
    }

    pub fn to_checkpoint(&self, vocab: &Vocab) -> Checkpoint<F> {
        let mut ck = Checkpoint::new(self.model.clone(), vocab.clone());
        ck.extra = json!({ "method": "mlm", "task": self.task, "prompt": self.prompt, "labels": self.labels });
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint<F>, schema: &LabelSchema) -> Result<Self> {
        let task: Task = serde_json::from_value(ck.extra["task"].clone())
            .map_err(|e| Error::Config(format!("checkpoint task: {e}")))?;
        let prompt: TemplateSpec = serde_json::from_value(ck.extra["prompt"].clone())
            .map_err(|e| Error::Config(format!("checkpoint prompt: {e}")))?;
        Mlm::new(ck.model, schema, task, prompt, &ck.vocab)
    }
}

impl<F: Real> Trainable<F> for Mlm<F> {
    type Item = BaselineItem;

    fn num_params(&self) -> usize {
        self.model.params.len()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        vec![&mut self.model.params]
    }

    fn dropout_rate(&self) -> f64 {
        self.model.config().dropout
    }

    fn item_loss_grad(&self, item: &BaselineItem, grad: &mut [F], mut dropout: Option<&mut Dropout>) -> Result<F> {
        let ids = item.input.ids();
        let enc = self.model.encode(ids, dropout.as_deref_mut())?;
        let dec = self.model.decode(&enc, ids, dropout)?;
        let full = self.model.lm_logits_row(&dec.hidden, item.row);
        let mut restricted: Vec<F> = self.label_ids.iter().map(|&i| full[i as usize]).collect();
        let loss = softmax_xent(&mut restricted, item.class);
        let mut dlogits = vec![F::zero(); full.len()];
        for (&i, &g) in self.label_ids.iter().zip(&restricted) {
            dlogits[i as usize] = g;
        }
        let dh = self.model.lm_backward_row(&dec.hidden, item.row, &dlogits, grad);
        self.model.backward(&enc, &dec, &dh, grad);
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AspectLabel;
    use crate::model::{InitMode, ModelConfig};
    use crate::templates::TemplateSet;
    use crate::text::build_vocab;

    fn setup() -> (LabelSchema, Vocab, DatasetSplit) {
        let schema = LabelSchema::new(
            vec!["food".into(), "price".into()],
            vec!["positive".into(), "negative".into(), "neutral".into()],
        )
        .unwrap();
        let split = DatasetSplit::new(
            crate::corpus::SplitName::Train,
            vec![
                Example::new("a", "the pizza was awful", vec![AspectLabel::new("food", "negative")]),
                Example::new(
                    "b",
                    "the bill was fine and the pasta was great",
                    vec![AspectLabel::new("price", "neutral"), AspectLabel::new("food", "positive")],
                ),
            ],
        );
        let vocab = build_vocab(&[&split], &schema);
        (schema, vocab, split)
    }

    fn tiny(vocab: &Vocab, mode: InitMode) -> Model<f64> {
        let mut cfg = ModelConfig::with_vocab(vocab.len());
        cfg.d_model = 16;
        cfg.d_ffn = 32;
        cfg.dropout = 0.0;
        Model::init(cfg, 3, mode).unwrap()
    }

    #[test]
    fn method_parsing_and_support() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("bert".parse::<Method>().is_err());
        assert!(!Method::Mlm.supports(Task::Acd));
        assert!(!Method::Classification.supports(Task::Pipeline));
        assert!(matches!(Method::Mlm.require(Task::Acd), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn classification_input_layout() {
        let (_, vocab, _) = setup();
        let seq = classification_input(&vocab, &["the", "pizza"], "food");
        let ids = seq.ids();
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[3], SEP);
        assert_eq!(ids[4], vocab.id("food").unwrap());
        assert_eq!(*ids.last().unwrap(), SEP);
        assert_eq!(ids.len(), 6);
    }

    #[test]
    fn mlm_input_places_single_mask() {
        let (_, vocab, _) = setup();
        let t = TemplateSet::default();
        let (seq, pos) = mlm_input(&vocab, &["the", "pizza"], &t.acsa, "food").unwrap();
        assert_eq!(seq.ids().iter().filter(|&&i| i == MASK).count(), 1);
        assert_eq!(seq.ids()[pos], MASK);
        assert_eq!(seq.ids()[3], SEP);
    }

    #[test]
    fn untrained_head_is_an_error() {
        let (schema, vocab, _) = setup();
        let c = Classifier::new(tiny(&vocab, InitMode::Random), &schema, Task::Acsa, 1).unwrap();
        assert!(matches!(c.logits(&classification_input(&vocab, &["x"], "food")), Err(Error::UntrainedHead)));
    }

    #[test]
    fn constructed_head_forces_argmax() {
        let (schema, vocab, _) = setup();
        let mut c = Classifier::new(tiny(&vocab, InitMode::Random), &schema, Task::Acsa, 1).unwrap();
        let r = c.head.b2_range();
        c.head.params.iter_mut().for_each(|x| *x = 0.0);
        c.head.params[r.start + 2] = 5.0;
        c.head.mark_trained();
        let (choice, _) = c.classify(&["the", "pizza"], "food", &vocab).unwrap();
        assert_eq!(choice, Some(2));
        // Equal logits fall back to the first label.
        c.head.params[r.start + 2] = 0.0;
        assert_eq!(c.classify(&["the", "pizza"], "food", &vocab).unwrap().0, Some(0));
    }

    #[test]
    fn zero_model_mlm_picks_first_label() {
        let (schema, vocab, _) = setup();
        let m = Mlm::new(tiny(&vocab, InitMode::Zero), &schema, Task::Acsa, TemplateSet::default().acsa, &vocab).unwrap();
        let (choice, scores) = m.fill_mask(&["the", "pizza"], "food", &vocab).unwrap();
        assert_eq!(choice, Some(0));
        let expect = -(3f64).ln();
        assert!(scores.iter().all(|s| (s - expect).abs() < 1e-12));
    }

    #[test]
    fn mlm_rejects_multi_token_labels_and_acd() {
        let (_, vocab, _) = setup();
        let schema = LabelSchema::new(vec!["food".into()], vec!["positive".into(), "negative".into()]).unwrap();
        let model = tiny(&vocab, InitMode::Random);
        assert!(Mlm::new(model.clone(), &schema, Task::Acd, TemplateSet::default().acsa, &vocab).is_err());
        let mut bad = schema.clone();
        bad.polarities[1] = "notinvocab".into();
        assert!(Mlm::new(model, &bad, Task::Acsa, TemplateSet::default().acsa, &vocab).is_err());
    }

    #[test]
    fn item_counts_per_task() {
        let (schema, vocab, split) = setup();
        let c = Classifier::new(tiny(&vocab, InitMode::Random), &schema, Task::Joint, 1).unwrap();
        let items = c.items(&split, &schema, &vocab).unwrap();
        assert_eq!(items.len(), 4);
        // Example a lacks price, which maps to the trailing none label.
        assert_eq!(items[1].class, 3);
        let c = Classifier::new(tiny(&vocab, InitMode::Random), &schema, Task::Acd, 1).unwrap();
        let classes: Vec<usize> = c.items(&split, &schema, &vocab).unwrap().iter().map(|i| i.class).collect();
        assert_eq!(classes, vec![1, 0, 1, 1]);
    }

    fn fd_check<T: Trainable<f64, Item = BaselineItem>>(mut t: T, item: &BaselineItem, coords: &[usize]) {
        let n = t.num_params();
        let mut g = vec![0.0; n];
        t.item_loss_grad(item, &mut g, None).unwrap();
        let h = 1e-5;
        for &i in coords {
            let bump = |t: &mut T, delta: f64| {
                let mut k = i;
                for s in t.param_slices_mut() {
                    if k < s.len() {
                        s[k] += delta;
                        return;
                    }
                    k -= s.len();
                }
            };
            bump(&mut t, h);
            let up = t.item_loss_grad(item, &mut vec![0.0; n], None).unwrap();
            bump(&mut t, -2.0 * h);
            let down = t.item_loss_grad(item, &mut vec![0.0; n], None).unwrap();
            bump(&mut t, h);
            let num = (up - down) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-4);
            assert!(rel < 1e-5, "coord {i}: analytic {} numeric {num}", g[i]);
        }
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let (schema, vocab, split) = setup();
        let c = Classifier::new(tiny(&vocab, InitMode::Random), &schema, Task::Acsa, 1).unwrap();
        let item = c.items(&split, &schema, &vocab).unwrap().remove(0);
        let n = c.num_params();
        let coords: Vec<usize> = (0..40).map(|k| (k * 7919) % n).chain(n - 30..n).collect();
        fd_check(c, &item, &coords);

        let m = Mlm::new(tiny(&vocab, InitMode::Random), &schema, Task::Joint, TemplateSet::default().joint, &vocab).unwrap();
        let item = m.items(&split, &schema, &vocab).unwrap().remove(1);
        let n = m.num_params();
        let coords: Vec<usize> = (0..60).map(|k| (k * 7919) % n).collect();
        fd_check(m, &item, &coords);
    }

    #[test]
    fn classifier_checkpoint_round_trip() {
        let (schema, vocab, _) = setup();
        let mut c = Classifier::new(tiny(&vocab, InitMode::Random), &schema, Task::Acsa, 1).unwrap();
        c.head.mark_trained();
        let ck = c.to_checkpoint(&vocab);
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes(), std::path::Path::new("mem")).unwrap();
        let c2 = Classifier::from_checkpoint(back).unwrap();
        let input = classification_input(&vocab, &["the", "pizza"], "food");
        assert_eq!(c.logits(&input).unwrap(), c2.logits(&input).unwrap());
        assert_eq!(c2.labels, schema.polarities);
    }
}

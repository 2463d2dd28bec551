//! Turning candidate scores into predictions.
//!
//! Tie rules: polarity ties go to the first polarity in schema order; a
//! presence tie means absent; in the joint task a polarity beats the none
//! label only with a strictly greater score.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AspectLabel, Example, LabelSchema};
use crate::error::Result;
use crate::scoring::{score_candidates, ScoredCandidate, TemplateScorer};
use crate::templates::{candidates_acd, candidates_acsa, candidates_joint, TemplateSet, ABSENT, PRESENT};
use crate::text::{TokenSeq, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Acsa,
    Acd,
    Joint,
    Pipeline,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Acsa => "acsa",
            Task::Acd => "acd",
            Task::Joint => "joint",
            Task::Pipeline => "pipeline",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acsa" => Ok(Task::Acsa),
            "acd" => Ok(Task::Acd),
            "joint" => Ok(Task::Joint),
            "pipeline" => Ok(Task::Pipeline),
            other => Err(crate::Error::Config(format!(
                "unknown task {other:?} (expected acsa, acd, joint or pipeline)"
            ))),
        }
    }
}

/// One per-category decision with every candidate score kept for auditing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub category: String,
    /// A polarity, the none label, or present/absent.
    pub label: String,
    pub scores: BTreeMap<String, f64>,
}

impl Decision {
    fn from_scored(category: &str, label: &str, scored: &[ScoredCandidate]) -> Self {
        Decision {
            category: category.to_string(),
            label: label.to_string(),
            scores: scored.iter().map(|s| (s.label.clone(), s.score)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub decisions: Vec<Decision>,
}

impl Prediction {
    /// Categories decided present, for detection output.
    pub fn detected(&self) -> Vec<&str> {
        self.decisions
            .iter()
            .filter(|d| d.label == PRESENT)
            .map(|d| d.category.as_str())
            .collect()
    }

    /// (category, polarity) pairs, skipping none and presence decisions.
    pub fn pairs(&self, schema: &LabelSchema) -> Vec<AspectLabel> {
        self.decisions
            .iter()
            .filter(|d| schema.polarity_index(&d.label).is_some())
            .map(|d| AspectLabel::new(d.category.clone(), d.label.clone()))
            .collect()
    }
}

pub fn save_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    crate::io::write_jsonl(path, preds)
}

/// Index of the first maximum.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Presence iff the positive template scores strictly higher.
pub fn acd_present(pos: f64, neg: f64) -> bool {
    pos > neg
}

/// Joint rule over polarity scores followed by the none score: the best
/// polarity (first on ties) wins only if strictly above none.
pub fn joint_choice(scores: &[f64]) -> Option<usize> {
    let (none, pols) = scores.split_last()?;
    if pols.is_empty() {
        return None;
    }
    let best = argmax_first(pols);
    (pols[best] > *none).then_some(best)
}

/// Everything needed to enumerate candidates.
#[derive(Clone, Copy, Debug)]
pub struct Candidates<'a> {
    pub schema: &'a LabelSchema,
    pub templates: &'a TemplateSet,
    pub vocab: &'a Vocab,
}

pub fn predict_acsa<S: TemplateScorer + ?Sized>(scorer: &S, source: &TokenSeq, category: &str, ctx: Candidates) -> Result<Decision> {
    let cands = candidates_acsa(ctx.templates, category, ctx.schema, ctx.vocab)?;
    let scored = score_candidates(scorer, source, &cands)?;
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let label = &ctx.schema.polarities[argmax_first(&scores)];
    Ok(Decision::from_scored(category, label, &scored))
}

/// One decision per schema category, labelled present or absent.
pub fn predict_acd<S: TemplateScorer + ?Sized>(scorer: &S, source: &TokenSeq, ctx: Candidates) -> Result<Vec<Decision>> {
    ctx.schema
        .categories
        .iter()
        .map(|cat| {
            let (pos, neg) = candidates_acd(ctx.templates, cat, ctx.schema, ctx.vocab)?;
            let scored = score_candidates(scorer, source, &[pos, neg])?;
            let label = if acd_present(scored[0].score, scored[1].score) { PRESENT } else { ABSENT };
            Ok(Decision::from_scored(cat, label, &scored))
        })
        .collect()
}

/// Decisions for the categories whose best joint candidate is a polarity.
pub fn predict_joint<S: TemplateScorer + ?Sized>(scorer: &S, source: &TokenSeq, ctx: Candidates) -> Result<Vec<Decision>> {
    let mut out = Vec::new();
    for cat in &ctx.schema.categories {
        let cands = candidates_joint(ctx.templates, cat, ctx.schema, ctx.vocab)?;
        let scored = score_candidates(scorer, source, &cands)?;
        let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
        if let Some(i) = joint_choice(&scores) {
            out.push(Decision::from_scored(cat, &ctx.schema.polarities[i], &scored));
        }
    }
    Ok(out)
}

/// Detection with `acd_scorer`, then a polarity for each detected category
/// with `acsa_scorer`.
pub fn predict_pipeline<A, B>(acd_scorer: &A, acsa_scorer: &B, source: &TokenSeq, ctx: Candidates) -> Result<Vec<Decision>>
where
    A: TemplateScorer + ?Sized,
    B: TemplateScorer + ?Sized,
{
    let detected = predict_acd(acd_scorer, source, ctx)?;
    detected
        .iter()
        .filter(|d| d.label == PRESENT)
        .map(|d| predict_acsa(acsa_scorer, source, &d.category, ctx))
        .collect()
}

/// The scorers a task needs: pipeline uses both, everything else `primary`.
#[derive(Clone, Copy)]
pub struct Scorers<'a> {
    pub primary: &'a dyn TemplateScorer,
    /// ACSA scorer for the second pipeline stage.
    pub acsa: Option<&'a dyn TemplateScorer>,
}

impl<'a> Scorers<'a> {
    pub fn single(scorer: &'a dyn TemplateScorer) -> Self {
        Scorers {
            primary: scorer,
            acsa: None,
        }
    }
}

/// Predict one example. ACSA decides the example's gold categories; the
/// other tasks decide over the whole schema.
pub fn predict_example(scorers: Scorers, example: &Example, task: Task, ctx: Candidates) -> Result<Prediction> {
    let source = ctx.vocab.encode_tokens(&example.tokens);
    let decisions = match task {
        Task::Acsa => example
            .labels
            .iter()
            .map(|l| predict_acsa(scorers.primary, &source, &l.category, ctx))
            .collect::<Result<Vec<_>>>()?,
        Task::Acd => predict_acd(scorers.primary, &source, ctx)?,
        Task::Joint => predict_joint(scorers.primary, &source, ctx)?,
        Task::Pipeline => {
            let acsa = scorers.acsa.ok_or_else(|| crate::Error::Config("pipeline needs an ACSA scorer".into()))?;
            predict_pipeline(scorers.primary, acsa, &source, ctx)?
        }
    };
    Ok(Prediction {
        id: example.id.clone(),
        decisions,
    })
}

/// Predict every example, in parallel, keeping input order.
pub fn predict_all(scorers: Scorers, examples: &[Example], task: Task, ctx: Candidates) -> Result<Vec<Prediction>> {
    examples
        .par_iter()
        .map(|ex| predict_example(scorers, ex, task, ctx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templates::FilledTemplate;
    use std::collections::HashMap;

    /// Scores looked up by (category, label); anything missing is -100.
    struct Table(HashMap<(String, String), f64>);

    impl Table {
        fn new(rows: &[(&str, &str, f64)]) -> Self {
            Table(rows.iter().map(|(c, l, s)| ((c.to_string(), l.to_string()), *s)).collect())
        }
    }

    impl TemplateScorer for Table {
        fn score_target(&self, _: &TokenSeq, t: &FilledTemplate) -> Result<f64> {
            Ok(*self.0.get(&(t.category.clone(), t.label.clone())).unwrap_or(&-100.0))
        }
    }

    fn setup() -> (LabelSchema, Vocab, TemplateSet) {
        let schema = LabelSchema::new(
            vec!["food".into(), "price".into(), "service".into()],
            vec!["positive".into(), "negative".into(), "neutral".into()],
        )
        .unwrap();
        let vocab = crate::text::build_vocab(&[], &schema);
        (schema, vocab, TemplateSet::default())
    }

    #[test]
    fn decision_rules() {
        assert_eq!(argmax_first(&[-5.2, -3.1, -7.0]), 1);
        assert_eq!(argmax_first(&[-1.0, -1.0, -2.0]), 0);
        assert!(acd_present(-4.0, -4.5));
        assert!(!acd_present(-4.0, -4.0));
        assert_eq!(joint_choice(&[-2.0, -1.0, -3.0, -1.0]), None);
        assert_eq!(joint_choice(&[-2.0, -0.5, -3.0, -1.0]), Some(1));
        assert_eq!(joint_choice(&[-1.0]), None);
    }

    #[test]
    fn acsa_acd_joint_and_pipeline_on_tables() {
        let (schema, vocab, set) = setup();
        let ctx = Candidates {
            schema: &schema,
            templates: &set,
            vocab: &vocab,
        };
        let src = TokenSeq(vec![7, 8]);
        let t = Table::new(&[("price", "positive", -5.2), ("price", "negative", -3.1), ("price", "neutral", -7.0)]);
        let d = predict_acsa(&t, &src, "price", ctx).unwrap();
        assert_eq!(d.label, "negative");
        assert_eq!(d.scores.len(), 3);

        let acd = Table::new(&[("price", PRESENT, -4.0), ("price", ABSENT, -4.5), ("food", PRESENT, -1.0), ("food", ABSENT, -1.0)]);
        let det = predict_acd(&acd, &src, ctx).unwrap();
        let present: Vec<_> = det.iter().filter(|d| d.label == PRESENT).map(|d| d.category.as_str()).collect();
        assert_eq!(present, vec!["price"]);

        let joint = Table::new(&[
            ("food", "positive", -1.0),
            ("food", "none", -2.0),
            ("price", "none", -1.0),
            ("service", "none", -1.0),
        ]);
        let j = predict_joint(&joint, &src, ctx).unwrap();
        assert_eq!(j.len(), 1);
        assert_eq!((j[0].category.as_str(), j[0].label.as_str()), ("food", "positive"));

        let p = predict_pipeline(&acd, &t, &src, ctx).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].category.as_str(), p[0].label.as_str()), ("price", "negative"));
        let nothing = Table::new(&[]);
        assert!(predict_pipeline(&nothing, &t, &src, ctx).unwrap().is_empty());
    }

    #[test]
    fn joint_inspects_categories_times_labels_plus_one() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        struct Counting(AtomicUsize);
        impl TemplateScorer for Counting {
            fn score_target(&self, _: &TokenSeq, _: &FilledTemplate) -> Result<f64> {
                self.0.fetch_add(1, Ordering::Relaxed);
                Ok(-1.0)
            }
        }
        let (schema, vocab, set) = setup();
        let ctx = Candidates {
            schema: &schema,
            templates: &set,
            vocab: &vocab,
        };
        let c = Counting(AtomicUsize::new(0));
        assert!(predict_joint(&c, &TokenSeq(vec![7]), ctx).unwrap().is_empty());
        assert_eq!(c.0.load(Ordering::Relaxed), 3 * 4);
    }
}

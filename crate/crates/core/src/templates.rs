//! Natural-language templates and candidate enumeration.
//!
//! A template pattern carries a `{CATEGORY}` slot and, for sentiment
//! templates, a `{POLARITY}` slot. Filling both produces a target sequence
//! that a seq2seq scorer can rank against its competitors.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSchema;
use crate::error::{Error, Result};
use crate::text::{tokenize, TokenSeq, Vocab, EOS, UNK};

pub const CATEGORY_SLOT: &str = "{CATEGORY}";
pub const POLARITY_SLOT: &str = "{POLARITY}";

/// Label recorded on filled presence templates.
pub const PRESENT: &str = "present";
pub const ABSENT: &str = "absent";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateTask {
    Acsa,
    AcdPos,
    AcdNeg,
    Joint,
}

impl TemplateTask {
    fn has_polarity_slot(self) -> bool {
        matches!(self, TemplateTask::Acsa | TemplateTask::Joint)
    }
}

impl fmt::Display for TemplateTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateTask::Acsa => "acsa",
            TemplateTask::AcdPos => "acd_pos",
            TemplateTask::AcdNeg => "acd_neg",
            TemplateTask::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub id: String,
    pub task: TemplateTask,
    pub pattern: String,
    /// Groups a presence/absence pair; defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

impl TemplateSpec {
    pub fn new(id: &str, task: TemplateTask, pattern: &str) -> Self {
        TemplateSpec {
            id: id.to_string(),
            task,
            pattern: pattern.to_string(),
            variant: None,
        }
    }

    fn paired(id: &str, variant: &str, task: TemplateTask, pattern: &str) -> Self {
        TemplateSpec {
            variant: Some(variant.to_string()),
            ..Self::new(id, task, pattern)
        }
    }

    pub fn variant(&self) -> &str {
        self.variant.as_deref().unwrap_or(&self.id)
    }

    pub fn validate(&self) -> Result<()> {
        let cats = self.pattern.matches(CATEGORY_SLOT).count();
        let pols = self.pattern.matches(POLARITY_SLOT).count();
        let want_pol = usize::from(self.task.has_polarity_slot());
        if cats != 1 || pols != want_pol {
            return Err(Error::Template(format!(
                "template {:?} ({}) needs exactly one {CATEGORY_SLOT} and {want_pol} {POLARITY_SLOT} slot(s), found {cats} and {pols}",
                self.id, self.task
            )));
        }
        Ok(())
    }

    /// Pattern text with slots replaced, before tokenization.
    pub fn render(&self, category: &str, label: Option<&str>) -> String {
        let s = self.pattern.replace(CATEGORY_SLOT, category);
        match label {
            Some(l) => s.replace(POLARITY_SLOT, l),
            None => s,
        }
    }

    /// Non-slot words of the pattern.
    pub fn words(&self) -> Vec<String> {
        tokenize(&self.pattern.replace(CATEGORY_SLOT, " ").replace(POLARITY_SLOT, " "))
    }
}

/// All known template variants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateRegistry {
    specs: Vec<TemplateSpec>,
}

impl Default for TemplateRegistry {
    /// Three sentiment templates, three presence pairs and the joint
    /// template (the first sentiment template with a "none" label).
    fn default() -> Self {
        use TemplateTask::*;
        TemplateRegistry {
            specs: vec![
                TemplateSpec::new("polarity-of", Acsa, "The sentiment polarity of {CATEGORY} is {POLARITY}"),
                TemplateSpec::new("sentiment-is", Acsa, "The sentiment is {POLARITY} for {CATEGORY}"),
                TemplateSpec::new("category-has", Acsa, "The {CATEGORY} category has a {POLARITY} label"),
                TemplateSpec::paired("discussed+", "discussed", AcdPos, "The {CATEGORY} category is discussed"),
                TemplateSpec::paired("discussed-", "discussed", AcdNeg, "The {CATEGORY} category is not discussed"),
                TemplateSpec::paired(
                    "sentence-discusses+",
                    "sentence-discusses",
                    AcdPos,
                    "The sentence discusses the {CATEGORY} category",
                ),
                TemplateSpec::paired(
                    "sentence-discusses-",
                    "sentence-discusses",
                    AcdNeg,
                    "The sentence discusses no {CATEGORY} category",
                ),
                TemplateSpec::paired("about+", "about", AcdPos, "It is about the {CATEGORY} category"),
                TemplateSpec::paired("about-", "about", AcdNeg, "It is not about the {CATEGORY} category"),
                TemplateSpec::new("joint-polarity-of", Joint, "The sentiment polarity of {CATEGORY} is {POLARITY}"),
            ],
        }
    }
}

impl TemplateRegistry {
    pub fn new(specs: Vec<TemplateSpec>) -> Result<Self> {
        let mut ids = HashSet::new();
        for s in &specs {
            s.validate()?;
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Template(format!("duplicate template id {:?}", s.id)));
            }
        }
        let reg = TemplateRegistry { specs };
        for v in reg.variants(TemplateTask::AcdPos).chain(reg.variants(TemplateTask::AcdNeg)) {
            reg.acd_pair(v)?;
        }
        Ok(reg)
    }

    pub fn specs(&self) -> &[TemplateSpec] {
        &self.specs
    }

    pub fn get(&self, id: &str) -> Option<&TemplateSpec> {
        self.specs.iter().find(|s| s.id == id)
    }

    pub fn by_task(&self, task: TemplateTask) -> impl Iterator<Item = &TemplateSpec> {
        self.specs.iter().filter(move |s| s.task == task)
    }

    fn variants(&self, task: TemplateTask) -> impl Iterator<Item = &str> {
        self.by_task(task).map(TemplateSpec::variant)
    }

    /// Presence and absence templates sharing `variant`, keyed by task tag.
    pub fn acd_pair(&self, variant: &str) -> Result<(&TemplateSpec, &TemplateSpec)> {
        let find = |task| {
            self.by_task(task)
                .find(|s| s.variant() == variant)
                .ok_or_else(|| Error::Template(format!("no {task} template for variant {variant:?}")))
        };
        Ok((find(TemplateTask::AcdPos)?, find(TemplateTask::AcdNeg)?))
    }

    pub fn words(&self) -> BTreeSet<String> {
        self.specs.iter().flat_map(TemplateSpec::words).collect()
    }

    pub fn from_json_str(raw: &str) -> Result<Self> {
        let specs: Vec<TemplateSpec> =
            serde_json::from_str(raw).map_err(|e| Error::Template(format!("registry file: {e}")))?;
        Self::new(specs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&raw)
    }
}

/// The templates in use for each task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub acsa: TemplateSpec,
    pub acd_pos: TemplateSpec,
    pub acd_neg: TemplateSpec,
    pub joint: TemplateSpec,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::select(&TemplateRegistry::default(), None, None).expect("default registry is complete")
    }
}

impl TemplateSet {
    /// Pick the sentiment template by id and the presence pair by variant;
    /// `None` takes the first registered one.
    pub fn select(registry: &TemplateRegistry, acsa_id: Option<&str>, acd_variant: Option<&str>) -> Result<Self> {
        let first = |task: TemplateTask| {
            registry
                .by_task(task)
                .next()
                .cloned()
                .ok_or_else(|| Error::Template(format!("registry has no {task} template")))
        };
        let acsa = match acsa_id {
            Some(id) => registry
                .get(id)
                .filter(|s| s.task == TemplateTask::Acsa)
                .cloned()
                .ok_or_else(|| Error::Template(format!("no acsa template with id {id:?}")))?,
            None => first(TemplateTask::Acsa)?,
        };
        let variant = match acd_variant {
            Some(v) => v.to_string(),
            None => first(TemplateTask::AcdPos)?.variant().to_string(),
        };
        let (pos, neg) = registry.acd_pair(&variant)?;
        Ok(TemplateSet {
            acsa,
            acd_pos: pos.clone(),
            acd_neg: neg.clone(),
            joint: first(TemplateTask::Joint)?,
        })
    }

    /// Select by a single id: an acsa template id or an acd variant name.
    pub fn with_template_id(registry: &TemplateRegistry, id: &str) -> Result<Self> {
        if registry.get(id).is_some_and(|s| s.task == TemplateTask::Acsa) {
            Self::select(registry, Some(id), None)
        } else {
            Self::select(registry, None, Some(id))
        }
    }
}

/// A concrete target sequence produced by slot filling.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilledTemplate {
    pub spec_id: String,
    pub category: String,
    /// Polarity, none label, or [`PRESENT`]/[`ABSENT`].
    pub label: String,
    /// Normalized surface text without EOS.
    pub text: String,
    /// Encoded text followed by EOS.
    pub tokens: TokenSeq,
}

pub fn fill(
    spec: &TemplateSpec,
    category: &str,
    label: Option<&str>,
    schema: &LabelSchema,
    vocab: &Vocab,
) -> Result<FilledTemplate> {
    spec.validate()?;
    schema.require_category(category)?;
    let stored_label = match (spec.task, label) {
        (TemplateTask::Acsa, Some(l)) => {
            if schema.polarity_index(l).is_none() {
                return Err(Error::UnknownLabel {
                    kind: "polarity",
                    value: l.to_string(),
                    context: format!(" for template {:?}", spec.id),
                });
            }
            l.to_string()
        }
        (TemplateTask::Joint, Some(l)) => {
            if schema.polarity_index(l).is_none() && l != schema.none_label {
                return Err(Error::UnknownLabel {
                    kind: "joint label",
                    value: l.to_string(),
                    context: format!(" for template {:?}", spec.id),
                });
            }
            l.to_string()
        }
        (TemplateTask::AcdPos, None) => PRESENT.to_string(),
        (TemplateTask::AcdNeg, None) => ABSENT.to_string(),
        (task, Some(l)) => {
            return Err(Error::Template(format!(
                "{task} template {:?} takes no label, got {l:?}",
                spec.id
            )))
        }
        (task, None) => {
            return Err(Error::Template(format!(
                "{task} template {:?} needs a label",
                spec.id
            )))
        }
    };
    let words = tokenize(&spec.render(category, label));
    let mut ids = vocab.encode_tokens(&words).0;
    if let Some(pos) = ids.iter().position(|&id| id == UNK) {
        return Err(Error::Template(format!(
            "word {:?} of template {:?} is not in the vocabulary",
            words[pos], spec.id
        )));
    }
    ids.push(EOS);
    Ok(FilledTemplate {
        spec_id: spec.id.clone(),
        category: category.to_string(),
        label: stored_label,
        text: words.join(" "),
        tokens: TokenSeq(ids),
    })
}

/// One candidate per polarity, in schema order.
pub fn candidates_acsa(
    set: &TemplateSet,
    category: &str,
    schema: &LabelSchema,
    vocab: &Vocab,
) -> Result<Vec<FilledTemplate>> {
    if schema.polarities.is_empty() {
        return Err(Error::Template("schema has no polarities".into()));
    }
    schema
        .polarities
        .iter()
        .map(|p| fill(&set.acsa, category, Some(p), schema, vocab))
        .collect()
}

/// Presence and absence templates for `category`.
pub fn candidates_acd(
    set: &TemplateSet,
    category: &str,
    schema: &LabelSchema,
    vocab: &Vocab,
) -> Result<(FilledTemplate, FilledTemplate)> {
    Ok((
        fill(&set.acd_pos, category, None, schema, vocab)?,
        fill(&set.acd_neg, category, None, schema, vocab)?,
    ))
}

/// One candidate per polarity followed by the none candidate.
pub fn candidates_joint(
    set: &TemplateSet,
    category: &str,
    schema: &LabelSchema,
    vocab: &Vocab,
) -> Result<Vec<FilledTemplate>> {
    if schema.polarities.is_empty() {
        return Err(Error::Template("joint candidates need at least one polarity".into()));
    }
    schema
        .polarities
        .iter()
        .chain(std::iter::once(&schema.none_label))
        .map(|p| fill(&set.joint, category, Some(p), schema, vocab))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::build_vocab;

    fn setup() -> (LabelSchema, Vocab) {
        let schema = LabelSchema::new(
            vec!["food".into(), "price".into(), "service".into()],
            vec!["positive".into(), "negative".into(), "neutral".into()],
        )
        .unwrap();
        let vocab = build_vocab(&[], &schema);
        (schema, vocab)
    }

    #[test]
    fn fill_acsa() {
        let (schema, vocab) = setup();
        let set = TemplateSet::default();
        let t = fill(&set.acsa, "price", Some("negative"), &schema, &vocab).unwrap();
        assert_eq!(t.text, "the sentiment polarity of price is negative");
        assert_eq!(*t.tokens.ids().last().unwrap(), EOS);
        assert_eq!(vocab.decode(&t.tokens).unwrap(), "the sentiment polarity of price is negative </s>");
    }

    #[test]
    fn fill_acd_and_joint() {
        let (schema, vocab) = setup();
        let set = TemplateSet::default();
        let (pos, neg) = candidates_acd(&set, "food", &schema, &vocab).unwrap();
        assert_eq!(pos.text, "the food category is discussed");
        assert_eq!(neg.text, "the food category is not discussed");
        assert_eq!((pos.label.as_str(), neg.label.as_str()), (PRESENT, ABSENT));
        let j = fill(&set.joint, "service", Some("none"), &schema, &vocab).unwrap();
        assert_eq!(j.text, "the sentiment polarity of service is none");
    }

    #[test]
    fn fill_errors() {
        let (schema, vocab) = setup();
        let set = TemplateSet::default();
        assert!(fill(&set.acsa, "price", None, &schema, &vocab).is_err());
        assert!(fill(&set.acd_pos, "price", Some("positive"), &schema, &vocab).is_err());
        assert!(fill(&set.acsa, "decor", Some("positive"), &schema, &vocab).is_err());
        assert!(fill(&set.acsa, "price", Some("none"), &schema, &vocab).is_err());
        assert!(fill(&set.acsa, "price", Some("happy"), &schema, &vocab).is_err());
    }

    #[test]
    fn acsa_candidates_differ_only_at_polarity_slot() {
        let (schema, vocab) = setup();
        let set = TemplateSet::default();
        let cands = candidates_acsa(&set, "price", &schema, &vocab).unwrap();
        assert_eq!(
            cands.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(),
            vec!["positive", "negative", "neutral"]
        );
        let m = cands[0].tokens.len();
        assert!(cands.iter().all(|c| c.tokens.len() == m));
        // Token-diff oracle: positions where any pair differs.
        let mut diff = BTreeSet::new();
        for a in &cands {
            for b in &cands {
                for (i, (x, y)) in a.tokens.ids().iter().zip(b.tokens.ids()).enumerate() {
                    if x != y {
                        diff.insert(i);
                    }
                }
            }
        }
        let slot = tokenize(&set.acsa.pattern.replace(CATEGORY_SLOT, "price").replace(POLARITY_SLOT, "polarityslot"))
            .iter()
            .position(|w| w == "polarityslot")
            .unwrap();
        assert_eq!(diff.into_iter().collect::<Vec<_>>(), vec![slot]);
    }

    #[test]
    fn single_polarity_schema_gives_one_candidate() {
        let schema = LabelSchema::new(vec!["food".into()], vec!["positive".into()]).unwrap();
        let vocab = build_vocab(&[], &schema);
        let c = candidates_acsa(&TemplateSet::default(), "food", &schema, &vocab).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn joint_candidates() {
        let (schema, vocab) = setup();
        let set = TemplateSet::default();
        let c = candidates_joint(&set, "food", &schema, &vocab).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.last().unwrap().label, "none");
        let total: usize = schema
            .categories
            .iter()
            .map(|cat| candidates_joint(&set, cat, &schema, &vocab).unwrap().len())
            .sum();
        assert_eq!(total, schema.num_categories() * (schema.num_polarities() + 1));

        let empty = LabelSchema::new(vec!["food".into()], vec![]).unwrap();
        let v = build_vocab(&[], &empty);
        assert!(candidates_joint(&set, "food", &empty, &v).is_err());
    }

    #[test]
    fn acd_pair_shares_all_but_negation() {
        let (schema, vocab) = setup();
        let (pos, neg) = candidates_acd(&TemplateSet::default(), "food", &schema, &vocab).unwrap();
        let mut n = neg.tokens.0.clone();
        let not = vocab.id("not").unwrap();
        n.retain(|&t| t != not);
        assert_eq!(n, pos.tokens.0);
    }

    #[test]
    fn registration_order_does_not_swap_roles() {
        let mut specs = TemplateRegistry::default().specs().to_vec();
        specs.reverse();
        let reg = TemplateRegistry::new(specs).unwrap();
        let set = TemplateSet::select(&reg, Some("polarity-of"), Some("discussed")).unwrap();
        assert_eq!(set.acd_pos.task, TemplateTask::AcdPos);
        assert!(!set.acd_pos.pattern.contains("not"));
        assert!(set.acd_neg.pattern.contains("not"));
    }

    #[test]
    fn default_registry_texts() {
        let reg = TemplateRegistry::default();
        let acsa: Vec<_> = reg.by_task(TemplateTask::Acsa).map(|s| s.pattern.as_str()).collect();
        assert_eq!(
            acsa,
            vec![
                "The sentiment polarity of {CATEGORY} is {POLARITY}",
                "The sentiment is {POLARITY} for {CATEGORY}",
                "The {CATEGORY} category has a {POLARITY} label",
            ]
        );
        for v in ["discussed", "sentence-discusses", "about"] {
            reg.acd_pair(v).unwrap();
        }
        assert_eq!(reg.by_task(TemplateTask::AcdPos).count(), 3);
    }

    #[test]
    fn registry_validation() {
        let bad = r#"[{"id":"x","task":"acsa","pattern":"the {CATEGORY} is nice"}]"#;
        assert!(TemplateRegistry::from_json_str(bad).is_err());
        let unpaired = r#"[{"id":"x","task":"acd_pos","pattern":"the {CATEGORY} is here"}]"#;
        assert!(TemplateRegistry::from_json_str(unpaired).is_err());
        let reg = TemplateRegistry::default();
        let raw = serde_json::to_string(&reg).unwrap();
        assert_eq!(TemplateRegistry::from_json_str(&raw).unwrap(), reg);
    }

    #[test]
    fn fill_is_injective_over_registered_specs() {
        let (schema, vocab) = setup();
        let reg = schema.templates.clone();
        let mut seen = HashSet::new();
        for spec in reg.specs() {
            for cat in &schema.categories {
                let labels: Vec<Option<&str>> = match spec.task {
                    TemplateTask::Acsa => schema.polarities.iter().map(|p| Some(p.as_str())).collect(),
                    TemplateTask::Joint => schema
                        .polarities
                        .iter()
                        .map(|p| Some(p.as_str()))
                        .chain([Some("none")])
                        .collect(),
                    _ => vec![None],
                };
                for l in labels {
                    let t = fill(spec, cat, l, &schema, &vocab).unwrap();
                    // Joint and acsa share a surface pattern; key by spec.
                    assert!(seen.insert((spec.id.clone(), t.tokens.clone())));
                }
            }
        }
    }
}

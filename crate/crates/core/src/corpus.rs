//! Dataset model: examples, label schemas, JSONL ingestion, few-shot
//! subsampling, the hard-subset filter, category frequency buckets and a
//! deterministic synthetic corpus generator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::templates::TemplateRegistry;
use crate::text::{is_single_token, tokenize};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AspectLabel {
    pub category: String,
    pub polarity: String,
}

impl AspectLabel {
    pub fn new(category: impl Into<String>, polarity: impl Into<String>) -> Self {
        AspectLabel {
            category: category.into(),
            polarity: polarity.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    /// Derived from `text`; never serialized.
    #[serde(skip)]
    pub tokens: Vec<String>,
    pub labels: Vec<AspectLabel>,
}

impl Example {
    pub fn new(id: impl Into<String>, text: impl Into<String>, labels: Vec<AspectLabel>) -> Self {
        let text = text.into();
        Example {
            id: id.into(),
            tokens: tokenize(&text),
            text,
            labels,
        }
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|l| l.category.as_str())
    }

    pub fn polarity_of(&self, category: &str) -> Option<&str> {
        self.labels
            .iter()
            .find(|l| l.category == category)
            .map(|l| l.polarity.as_str())
    }

    pub fn validate(&self, schema: &LabelSchema) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::InvalidExample(format!("example {:?} has empty text", self.id)));
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            if schema.category_index(&l.category).is_none() {
                return Err(Error::UnknownLabel {
                    kind: "category",
                    value: l.category.clone(),
                    context: format!(" in example {:?}", self.id),
                });
            }
            if schema.polarity_index(&l.polarity).is_none() {
                return Err(Error::UnknownLabel {
                    kind: "polarity",
                    value: l.polarity.clone(),
                    context: format!(" in example {:?}", self.id),
                });
            }
            if !seen.insert(l.category.as_str()) {
                return Err(Error::DuplicateCategory {
                    id: self.id.clone(),
                    category: l.category.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    categories: Vec<String>,
    polarities: Vec<String>,
    #[serde(default = "default_none_label")]
    none_label: String,
}

fn default_none_label() -> String {
    "none".to_string()
}

/// Category vocabulary, polarity vocabulary and the template registry used
/// to verbalize them. Order of both lists is significant: it breaks ties.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSchema {
    pub categories: Vec<String>,
    pub polarities: Vec<String>,
    pub none_label: String,
    pub templates: TemplateRegistry,
}

impl LabelSchema {
    pub fn new(categories: Vec<String>, polarities: Vec<String>) -> Result<Self> {
        Self::with_registry(categories, polarities, default_none_label(), TemplateRegistry::default())
    }

    pub fn with_registry(
        categories: Vec<String>,
        polarities: Vec<String>,
        none_label: String,
        templates: TemplateRegistry,
    ) -> Result<Self> {
        let schema = LabelSchema {
            categories,
            polarities,
            none_label,
            templates,
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Schema("at least one category is required".into()));
        }
        let mut seen = HashSet::new();
        for w in self.categories.iter().chain(&self.polarities) {
            if !is_single_token(w) {
                return Err(Error::Schema(format!(
                    "label {w:?} is not a single lowercase word token"
                )));
            }
            if !seen.insert(w.as_str()) {
                return Err(Error::Schema(format!("duplicate label {w:?}")));
            }
        }
        if !is_single_token(&self.none_label) {
            return Err(Error::Schema(format!(
                "none label {:?} is not a single lowercase word token",
                self.none_label
            )));
        }
        if seen.contains(self.none_label.as_str()) {
            return Err(Error::Schema(format!(
                "none label {:?} collides with a category or polarity",
                self.none_label
            )));
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn num_polarities(&self) -> usize {
        self.polarities.len()
    }

    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == category)
    }

    pub fn polarity_index(&self, polarity: &str) -> Option<usize> {
        self.polarities.iter().position(|p| p == polarity)
    }

    pub fn require_category(&self, category: &str) -> Result<usize> {
        self.category_index(category).ok_or_else(|| Error::UnknownLabel {
            kind: "category",
            value: category.to_string(),
            context: String::new(),
        })
    }

    /// Every word the schema and its templates can put in a target sequence.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .categories
            .iter()
            .chain(&self.polarities)
            .cloned()
            .collect();
        out.push(self.none_label.clone());
        out.extend(self.templates.words());
        out
    }

    pub fn from_json_str(raw: &str) -> Result<Self> {
        let f: SchemaFile =
            serde_json::from_str(raw).map_err(|e| Error::Schema(format!("schema file: {e}")))?;
        Self::with_registry(f.categories, f.polarities, f.none_label, TemplateRegistry::default())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&SchemaFile {
            categories: self.categories.clone(),
            polarities: self.polarities.clone(),
            none_label: self.none_label.clone(),
        })
        .expect("schema serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&raw)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json_string().as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    /// Guess from a file stem such as `train`, `dev`, `valid` or `test`;
    /// anything else is treated as training data.
    pub fn from_path(path: &Path) -> Self {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if stem.contains("test") {
            SplitName::Test
        } else if stem.contains("dev") || stem.contains("valid") {
            SplitName::Dev
        } else {
            SplitName::Train
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub examples: Vec<Example>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, examples: Vec<Example>) -> Self {
        DatasetSplit { name, examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.examples.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn validate(&self, schema: &LabelSchema) -> Result<()> {
        let mut ids = HashSet::new();
        for ex in &self.examples {
            ex.validate(schema)?;
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::InvalidExample(format!(
                    "duplicate id {:?} in {} split",
                    ex.id, self.name
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_jsonl().as_bytes())
    }
}

/// Read and validate a JSONL split. Blank lines are skipped.
pub fn load_jsonl(path: &Path, schema: &LabelSchema) -> Result<DatasetSplit> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        examples.push(Example::new(ex.id, ex.text, ex.labels));
    }
    let split = DatasetSplit::new(SplitName::from_path(path), examples);
    split.validate(schema)?;
    Ok(split)
}

pub fn parse_jsonl_str(raw: &str, name: SplitName, schema: &LabelSchema) -> Result<DatasetSplit> {
    let mut examples = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            path: "<memory>".into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        examples.push(Example::new(ex.id, ex.text, ex.labels));
    }
    let split = DatasetSplit::new(name, examples);
    split.validate(schema)?;
    Ok(split)
}

#[derive(Clone, Debug)]
pub struct FewShotSample {
    pub split: DatasetSplit,
    /// Categories with fewer than `k` carrying examples, and how many exist.
    pub shortfall: BTreeMap<String, usize>,
}

/// Pick up to `k` examples per category, deduplicated by id, in the
/// original split order. Categories are visited in lexicographic order with
/// one RNG stream seeded by `seed`.
pub fn fewshot_sample(split: &DatasetSplit, k: usize, seed: u64) -> FewShotSample {
    let k = k.max(1);
    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in split.examples.iter().enumerate() {
        for c in ex.categories() {
            by_category.entry(c).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    let mut shortfall = BTreeMap::new();
    for (cat, mut idx) in by_category {
        if idx.len() < k {
            shortfall.insert(cat.to_string(), idx.len());
        }
        idx.shuffle(&mut rng);
        chosen.extend(idx.into_iter().take(k));
    }
    let examples = chosen.into_iter().map(|i| split.examples[i].clone()).collect();
    FewShotSample {
        split: DatasetSplit::new(split.name, examples),
        shortfall,
    }
}

/// Keep examples with at least two labels carrying at least two distinct
/// polarities.
pub fn filter_hard_subset(split: &DatasetSplit) -> DatasetSplit {
    let examples = split
        .examples
        .iter()
        .filter(|ex| {
            let pols: HashSet<&str> = ex.labels.iter().map(|l| l.polarity.as_str()).collect();
            ex.labels.len() >= 2 && pols.len() >= 2
        })
        .cloned()
        .collect();
    DatasetSplit::new(split.name, examples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Zero,
    Low,
    Mid,
    High,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Zero => "zero",
            Bucket::Low => "low",
            Bucket::Mid => "mid",
            Bucket::High => "high",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencyBuckets {
    /// Bucket per category with at least one labeled example, in schema order.
    pub buckets: Vec<(String, Bucket)>,
    /// Fraction of a category's labeled examples whose tokens contain it.
    pub fractions: Vec<(String, f64)>,
    /// Categories without labeled examples.
    pub excluded: Vec<String>,
}

impl FrequencyBuckets {
    pub fn bucket_of(&self, category: &str) -> Option<Bucket> {
        self.buckets
            .iter()
            .find(|(c, _)| c == category)
            .map(|(_, b)| *b)
    }

    pub fn as_map(&self) -> BTreeMap<String, Bucket> {
        self.buckets.iter().cloned().collect()
    }
}

pub const LOW_BUCKET_SHARE: f64 = 0.15;
pub const HIGH_BUCKET_SHARE: f64 = 0.30;

/// Group categories by how often the category word itself occurs in the
/// sentences labeled with it. Categories that never occur are `Zero`; the
/// rest are ranked by occurrence fraction and split into the top 30%
/// (`High`), the bottom 15% (`Low`, at least one) and the remainder (`Mid`),
/// counting categories and rounding up.
pub fn frequency_buckets(split: &DatasetSplit, schema: &LabelSchema) -> FrequencyBuckets {
    let mut labeled = vec![0usize; schema.num_categories()];
    let mut occurs = vec![0usize; schema.num_categories()];
    for ex in &split.examples {
        let toks: HashSet<&str> = ex.tokens.iter().map(String::as_str).collect();
        for c in ex.categories() {
            if let Some(ci) = schema.category_index(c) {
                labeled[ci] += 1;
                if toks.contains(c.to_lowercase().as_str()) {
                    occurs[ci] += 1;
                }
            }
        }
    }

    let mut excluded = Vec::new();
    let mut fractions = Vec::new();
    let mut nonzero: Vec<(usize, f64)> = Vec::new();
    let mut bucket = vec![None; schema.num_categories()];
    for (ci, cat) in schema.categories.iter().enumerate() {
        if labeled[ci] == 0 {
            log::warn!("category {cat:?} has no labeled examples; excluded from frequency buckets");
            excluded.push(cat.clone());
            continue;
        }
        let frac = occurs[ci] as f64 / labeled[ci] as f64;
        fractions.push((cat.clone(), frac));
        if occurs[ci] == 0 {
            bucket[ci] = Some(Bucket::Zero);
        } else {
            nonzero.push((ci, frac));
        }
    }

    // Ascending by fraction, schema order among equals.
    nonzero.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let n = nonzero.len();
    let n_high = (HIGH_BUCKET_SHARE * n as f64).ceil() as usize;
    let remaining = n - n_high.min(n);
    let n_low = if remaining == 0 {
        0
    } else {
        ((LOW_BUCKET_SHARE * n as f64).ceil() as usize).clamp(1, remaining)
    };
    for (rank, (ci, _)) in nonzero.iter().enumerate() {
        bucket[*ci] = Some(if rank >= n - n_high.min(n) {
            Bucket::High
        } else if rank < n_low {
            Bucket::Low
        } else {
            Bucket::Mid
        });
    }

    let buckets = schema
        .categories
        .iter()
        .zip(bucket)
        .filter_map(|(c, b)| b.map(|b| (c.clone(), b)))
        .collect();
    FrequencyBuckets {
        buckets,
        fractions,
        excluded,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub examples: usize,
    pub labels: usize,
    pub per_polarity: Vec<(String, usize)>,
    pub per_category: Vec<(String, usize)>,
}

pub fn split_stats(split: &DatasetSplit, schema: &LabelSchema) -> SplitStats {
    let mut pol = vec![0usize; schema.num_polarities()];
    let mut cat = vec![0usize; schema.num_categories()];
    let mut labels = 0;
    for ex in &split.examples {
        for l in &ex.labels {
            labels += 1;
            if let Some(i) = schema.polarity_index(&l.polarity) {
                pol[i] += 1;
            }
            if let Some(i) = schema.category_index(&l.category) {
                cat[i] += 1;
            }
        }
    }
    SplitStats {
        examples: split.len(),
        labels,
        per_polarity: schema.polarities.iter().cloned().zip(pol).collect(),
        per_category: schema.categories.iter().cloned().zip(cat).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryLexicon {
    pub category: String,
    /// Surface terms that realize the category. Empty for implicit categories.
    #[serde(default)]
    pub terms: Vec<String>,
    /// Clause opener used instead of "the TERM was" for implicit categories,
    /// e.g. "overall it was".
    #[serde(default)]
    pub implicit_phrase: Option<String>,
}

impl CategoryLexicon {
    pub fn explicit(category: &str, terms: &[&str]) -> Self {
        CategoryLexicon {
            category: category.to_string(),
            terms: terms.iter().map(|s| s.to_string()).collect(),
            implicit_phrase: None,
        }
    }

    pub fn implicit(category: &str, phrase: &str) -> Self {
        CategoryLexicon {
            category: category.to_string(),
            terms: Vec::new(),
            implicit_phrase: Some(phrase.to_string()),
        }
    }

    pub fn is_implicit(&self) -> bool {
        self.terms.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarityLexicon {
    pub polarity: String,
    pub words: Vec<String>,
}

impl PolarityLexicon {
    pub fn new(polarity: &str, words: &[&str]) -> Self {
        PolarityLexicon {
            polarity: polarity.to_string(),
            words: words.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Total sentences across all three splits.
    pub n_sentences: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub categories: Vec<CategoryLexicon>,
    pub polarities: Vec<PolarityLexicon>,
    pub connectors: Vec<String>,
    /// Probability that a sentence carries an implicit-category clause.
    pub implicit_fraction: f64,
    pub max_clauses: usize,
    /// Prefix for example ids, e.g. "rest" gives "rest-train-00000".
    pub id_prefix: String,
}

impl SynthConfig {
    /// Restaurant-review domain: four explicit categories and one implicit
    /// `miscellaneous` category.
    pub fn restaurant(seed: u64) -> Self {
        SynthConfig {
            seed,
            n_sentences: 700,
            n_dev: 100,
            n_test: 100,
            categories: vec![
                CategoryLexicon::explicit(
                    "food",
                    &["pizza", "pasta", "sushi", "burger", "salad", "dessert", "steak", "food"],
                ),
                CategoryLexicon::explicit("price", &["bill", "cost", "prices", "tab", "price"]),
                CategoryLexicon::explicit(
                    "service",
                    &["waiter", "waitress", "staff", "host", "server", "service"],
                ),
                CategoryLexicon::explicit(
                    "ambience",
                    &["decor", "music", "atmosphere", "lighting", "patio", "ambience"],
                ),
                CategoryLexicon::implicit("miscellaneous", "overall it was"),
            ],
            polarities: default_polarity_lexicons(),
            connectors: ["and", "but", "while", "although"].iter().map(|s| s.to_string()).collect(),
            implicit_fraction: 0.15,
            max_clauses: 3,
            id_prefix: "rest".into(),
        }
    }

    /// Hotel-review domain whose aspect terms share nothing with
    /// [`SynthConfig::restaurant`].
    pub fn hotel(seed: u64) -> Self {
        SynthConfig {
            seed,
            n_sentences: 700,
            n_dev: 100,
            n_test: 100,
            categories: vec![
                CategoryLexicon::explicit("room", &["bed", "suite", "bathroom", "shower", "pillow", "room"]),
                CategoryLexicon::explicit("location", &["neighborhood", "area", "street", "beach", "location"]),
                CategoryLexicon::explicit("price", &["rate", "fee", "charge", "deposit"]),
                CategoryLexicon::explicit(
                    "service",
                    &["receptionist", "concierge", "housekeeping", "porter", "valet"],
                ),
                CategoryLexicon::implicit("miscellaneous", "all in all it was"),
            ],
            polarities: default_polarity_lexicons(),
            connectors: ["and", "but", "while", "although"].iter().map(|s| s.to_string()).collect(),
            implicit_fraction: 0.15,
            max_clauses: 3,
            id_prefix: "hotel".into(),
        }
    }

    pub fn n_train(&self) -> usize {
        self.n_sentences.saturating_sub(self.n_dev + self.n_test)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dev + self.n_test > self.n_sentences {
            return Err(Error::Synth("dev + test sizes exceed n_sentences".into()));
        }
        if self.categories.is_empty() || self.polarities.is_empty() {
            return Err(Error::Synth("need at least one category and one polarity".into()));
        }
        if !self.categories.iter().any(CategoryLexicon::is_implicit) {
            return Err(Error::Synth("at least one implicit category is required".into()));
        }
        for c in &self.categories {
            if c.is_implicit() && c.implicit_phrase.as_deref().unwrap_or("").trim().is_empty() {
                return Err(Error::Synth(format!(
                    "implicit category {:?} needs an implicit_phrase",
                    c.category
                )));
            }
        }
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for p in &self.polarities {
            if p.words.is_empty() {
                return Err(Error::Synth(format!("polarity {:?} has no opinion words", p.polarity)));
            }
            for w in &p.words {
                if let Some(prev) = owner.insert(w.as_str(), p.polarity.as_str()) {
                    if prev != p.polarity {
                        return Err(Error::Synth(format!(
                            "opinion word {w:?} is listed under both {prev:?} and {:?}",
                            p.polarity
                        )));
                    }
                }
            }
        }
        if self.connectors.is_empty() {
            return Err(Error::Synth("at least one connector is required".into()));
        }
        if !(0.0..=1.0).contains(&self.implicit_fraction) {
            return Err(Error::Synth("implicit_fraction must lie in [0, 1]".into()));
        }
        if self.max_clauses == 0 {
            return Err(Error::Synth("max_clauses must be at least 1".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<LabelSchema> {
        LabelSchema::new(
            self.categories.iter().map(|c| c.category.clone()).collect(),
            self.polarities.iter().map(|p| p.polarity.clone()).collect(),
        )
    }
}

fn default_polarity_lexicons() -> Vec<PolarityLexicon> {
    vec![
        PolarityLexicon::new(
            "positive",
            &["great", "delicious", "excellent", "friendly", "wonderful", "amazing", "good"],
        ),
        PolarityLexicon::new(
            "negative",
            &["awful", "terrible", "overpriced", "rude", "bland", "bad", "horrible"],
        ),
        PolarityLexicon::new(
            "neutral",
            &["okay", "average", "ordinary", "acceptable", "standard", "typical"],
        ),
    ]
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub schema: LabelSchema,
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
}

impl SyntheticCorpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.schema.save(&dir.join("schema.json"))?;
        self.train.save_jsonl(&dir.join("train.jsonl"))?;
        self.dev.save_jsonl(&dir.join("dev.jsonl"))?;
        self.test.save_jsonl(&dir.join("test.jsonl"))?;
        Ok(())
    }
}

/// Generate a corpus of "the TERM was OPINION" clauses joined by connectors.
/// Each clause labels its category with the opinion word's polarity.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let schema = config.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let explicit: Vec<&CategoryLexicon> = config.categories.iter().filter(|c| !c.is_implicit()).collect();
    let implicit: Vec<&CategoryLexicon> = config.categories.iter().filter(|c| c.is_implicit()).collect();

    let mut sentences = Vec::with_capacity(config.n_sentences);
    for _ in 0..config.n_sentences {
        let with_implicit = rng.gen_bool(config.implicit_fraction);
        let max_explicit = config.max_clauses.min(explicit.len());
        let n_explicit = if with_implicit {
            rng.gen_range(0..config.max_clauses.min(explicit.len() + 1))
                .min(max_explicit)
        } else {
            rng.gen_range(1..=max_explicit.max(1))
        };
        let mut cats: Vec<&CategoryLexicon> = explicit.clone();
        cats.shuffle(&mut rng);
        cats.truncate(n_explicit);
        if with_implicit {
            cats.push(implicit[rng.gen_range(0..implicit.len())]);
        }

        let mut clauses = Vec::with_capacity(cats.len());
        let mut labels = Vec::with_capacity(cats.len());
        for cat in cats {
            let pol = &config.polarities[rng.gen_range(0..config.polarities.len())];
            let opinion = &pol.words[rng.gen_range(0..pol.words.len())];
            let clause = match &cat.implicit_phrase {
                Some(phrase) if cat.is_implicit() => format!("{phrase} {opinion}"),
                _ => {
                    let term = &cat.terms[rng.gen_range(0..cat.terms.len())];
                    format!("the {term} was {opinion}")
                }
            };
            clauses.push(clause);
            labels.push(AspectLabel::new(cat.category.clone(), pol.polarity.clone()));
        }
        let mut text = clauses[0].clone();
        for clause in &clauses[1..] {
            let conn = &config.connectors[rng.gen_range(0..config.connectors.len())];
            text.push(' ');
            text.push_str(conn);
            text.push(' ');
            text.push_str(clause);
        }
        sentences.push((text, labels));
    }

    let n_train = config.n_train();
    let make = |name: SplitName, range: std::ops::Range<usize>| {
        let examples = sentences[range]
            .iter()
            .enumerate()
            .map(|(i, (text, labels))| {
                Example::new(format!("{}-{name}-{i:05}", config.id_prefix), text.clone(), labels.clone())
            })
            .collect();
        DatasetSplit::new(name, examples)
    };
    let train = make(SplitName::Train, 0..n_train);
    let dev = make(SplitName::Dev, n_train..n_train + config.n_dev);
    let test = make(SplitName::Test, n_train + config.n_dev..config.n_sentences);
    Ok(SyntheticCorpus {
        schema,
        train,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema3() -> LabelSchema {
        LabelSchema::new(
            vec!["food".into(), "price".into(), "service".into()],
            vec!["positive".into(), "negative".into(), "neutral".into()],
        )
        .unwrap()
    }

    fn ex(id: &str, text: &str, labels: &[(&str, &str)]) -> Example {
        Example::new(id, text, labels.iter().map(|(c, p)| AspectLabel::new(*c, *p)).collect())
    }

    #[test]
    fn parses_documented_example_line() {
        let line = r#"{"id":"e1","text":"The restaurant was too expensive","labels":[{"category":"price","polarity":"negative"}]}"#;
        let split = parse_jsonl_str(line, SplitName::Train, &schema3()).unwrap();
        assert_eq!(split.len(), 1);
        assert_eq!(split.examples[0].labels.len(), 1);
        assert_eq!(split.examples[0].tokens, vec!["the", "restaurant", "was", "too", "expensive"]);
    }

    #[test]
    fn empty_input_is_empty_split() {
        let split = parse_jsonl_str("", SplitName::Test, &schema3()).unwrap();
        assert!(split.is_empty());
    }

    #[test]
    fn unknown_polarity_is_named() {
        let line = r#"{"id":"e1","text":"fine","labels":[{"category":"price","polarity":"happy"}]}"#;
        let err = parse_jsonl_str(line, SplitName::Train, &schema3()).unwrap_err();
        assert!(err.to_string().contains("\"happy\""), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let raw = "{\"id\":\"a\",\"text\":\"x\",\"labels\":[]}\n{not json\n";
        match parse_jsonl_str(raw, SplitName::Train, &schema3()).unwrap_err() {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_category_rejected() {
        let raw = r#"{"id":"a","text":"x","labels":[{"category":"food","polarity":"positive"},{"category":"food","polarity":"negative"}]}"#;
        assert!(matches!(
            parse_jsonl_str(raw, SplitName::Train, &schema3()),
            Err(Error::DuplicateCategory { .. })
        ));
    }

    #[test]
    fn empty_text_and_duplicate_ids_rejected() {
        let raw = r#"{"id":"a","text":"  ","labels":[]}"#;
        assert!(parse_jsonl_str(raw, SplitName::Train, &schema3()).is_err());
        let raw = "{\"id\":\"a\",\"text\":\"x\",\"labels\":[]}\n{\"id\":\"a\",\"text\":\"y\",\"labels\":[]}";
        assert!(parse_jsonl_str(raw, SplitName::Train, &schema3()).is_err());
    }

    #[test]
    fn schema_validation() {
        assert!(LabelSchema::new(vec![], vec!["positive".into()]).is_err());
        assert!(LabelSchema::new(vec!["food".into(), "food".into()], vec![]).is_err());
        assert!(LabelSchema::new(vec!["anecdotes/miscellaneous".into()], vec![]).is_err());
        assert!(LabelSchema::new(vec!["food".into()], vec!["none".into()]).is_err());
        let s = LabelSchema::from_json_str(r#"{"categories":["food"],"polarities":["positive"]}"#).unwrap();
        assert_eq!(s.none_label, "none");
        let back = LabelSchema::from_json_str(&s.to_json_string()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn hard_subset_filter() {
        let split = DatasetSplit::new(
            SplitName::Test,
            vec![
                ex("a", "x", &[("price", "negative"), ("food", "positive")]),
                ex("b", "x", &[("price", "negative"), ("food", "negative")]),
                ex("c", "x", &[("price", "negative")]),
            ],
        );
        let hard = filter_hard_subset(&split);
        assert_eq!(hard.ids().into_iter().collect::<Vec<_>>(), vec!["a"]);
        assert_eq!(filter_hard_subset(&hard), hard);
    }

    #[test]
    fn stats_count_labels() {
        let split = DatasetSplit::new(
            SplitName::Train,
            vec![ex("a", "x", &[("food", "positive"), ("price", "negative")])],
        );
        let st = split_stats(&split, &schema3());
        assert_eq!(
            st.per_polarity,
            vec![("positive".into(), 1), ("negative".into(), 1), ("neutral".into(), 0)]
        );
        let empty = split_stats(&DatasetSplit::new(SplitName::Train, vec![]), &schema3());
        assert_eq!(empty.labels, 0);
        assert!(empty.per_polarity.iter().all(|(_, n)| *n == 0));
    }

    #[test]
    fn fewshot_bounds_and_shortfall() {
        let corpus = generate_synthetic(&SynthConfig::restaurant(3)).unwrap();
        let s = fewshot_sample(&corpus.train, 10, 1);
        assert!(s.split.len() <= 10 * corpus.schema.num_categories());
        for cat in &corpus.schema.categories {
            let n = s.split.examples.iter().filter(|e| e.polarity_of(cat).is_some()).count();
            assert!(n >= 10, "{cat} has {n}");
        }
        assert!(s.shortfall.is_empty());

        let big = fewshot_sample(&corpus.train, 100_000, 1);
        assert_eq!(big.split.len(), corpus.train.len());
        assert_eq!(big.shortfall.len(), corpus.schema.num_categories());
    }

    #[test]
    fn fewshot_is_deterministic() {
        let corpus = generate_synthetic(&SynthConfig::restaurant(3)).unwrap();
        let a = fewshot_sample(&corpus.train, 7, 42);
        let b = fewshot_sample(&corpus.train, 7, 42);
        assert_eq!(a.split.ids(), b.split.ids());
        let c = fewshot_sample(&corpus.train, 7, 43);
        assert_ne!(a.split.ids(), c.split.ids());
    }

    #[test]
    fn buckets_from_controlled_rates() {
        // a occurs in 9/10, b in 5/10, c in 1/10, d never.
        let schema = LabelSchema::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec!["positive".into()],
        )
        .unwrap();
        let mut examples = Vec::new();
        for (cat, hits) in [("a", 9), ("b", 5), ("c", 1), ("d", 0)] {
            for i in 0..10 {
                let text = if i < hits { format!("the {cat} was fine") } else { "it was fine".into() };
                examples.push(ex(&format!("{cat}{i}"), &text, &[(cat, "positive")]));
            }
        }
        let split = DatasetSplit::new(SplitName::Test, examples);

        // Direct counting oracle for the fractions.
        for (cat, want) in [("a", 0.9), ("b", 0.5), ("c", 0.1), ("d", 0.0)] {
            let labeled: Vec<_> = split.examples.iter().filter(|e| e.polarity_of(cat).is_some()).collect();
            let hit = labeled.iter().filter(|e| e.text.split(' ').any(|w| w == cat)).count();
            assert!((hit as f64 / labeled.len() as f64 - want).abs() < 1e-12);
        }

        let b = frequency_buckets(&split, &schema);
        assert_eq!(b.bucket_of("a"), Some(Bucket::High));
        assert_eq!(b.bucket_of("b"), Some(Bucket::Mid));
        assert_eq!(b.bucket_of("c"), Some(Bucket::Low));
        assert_eq!(b.bucket_of("d"), Some(Bucket::Zero));
    }

    #[test]
    fn single_nonzero_category_is_high_and_unlabeled_excluded() {
        let schema = LabelSchema::new(vec!["food".into(), "price".into()], vec!["positive".into()]).unwrap();
        let split = DatasetSplit::new(SplitName::Test, vec![ex("a", "the food was good", &[("food", "positive")])]);
        let b = frequency_buckets(&split, &schema);
        assert_eq!(b.bucket_of("food"), Some(Bucket::High));
        assert_eq!(b.excluded, vec!["price".to_string()]);
        assert_eq!(b.buckets.len(), 1);
    }

    #[test]
    fn implicit_category_lands_in_zero_bucket() {
        let corpus = generate_synthetic(&SynthConfig::restaurant(5)).unwrap();
        let b = frequency_buckets(&corpus.train, &corpus.schema);
        assert_eq!(b.bucket_of("miscellaneous"), Some(Bucket::Zero));
        assert_eq!(b.buckets.len() + b.excluded.len(), corpus.schema.num_categories());
    }

    #[test]
    fn synthetic_is_deterministic_and_disjoint() {
        let a = generate_synthetic(&SynthConfig::restaurant(7)).unwrap();
        let b = generate_synthetic(&SynthConfig::restaurant(7)).unwrap();
        assert_eq!(a.train.to_jsonl(), b.train.to_jsonl());
        assert_eq!(a.test.to_jsonl(), b.test.to_jsonl());
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (500, 100, 100));
        let train = a.train.ids();
        assert!(a.dev.ids().iter().all(|id| !train.contains(id)));
        assert!(a.test.ids().iter().all(|id| !train.contains(id)));
        for s in [&a.train, &a.dev, &a.test] {
            s.validate(&a.schema).unwrap();
        }
    }

    #[test]
    fn clause_polarity_follows_lexicon() {
        let cfg = SynthConfig::restaurant(11);
        let corpus = generate_synthetic(&cfg).unwrap();
        let lex: HashMap<&str, &str> = cfg
            .polarities
            .iter()
            .flat_map(|p| p.words.iter().map(move |w| (w.as_str(), p.polarity.as_str())))
            .collect();
        let term_cat: HashMap<&str, &str> = cfg
            .categories
            .iter()
            .flat_map(|c| c.terms.iter().map(move |t| (t.as_str(), c.category.as_str())))
            .collect();
        for e in &corpus.train.examples {
            // Every "TERM was OPINION" triple agrees with the gold labels.
            for w in e.tokens.windows(3).filter(|w| w[1] == "was") {
                if let (Some(cat), Some(pol)) = (term_cat.get(w[0].as_str()), lex.get(w[2].as_str())) {
                    assert_eq!(e.polarity_of(cat), Some(*pol), "{}", e.text);
                }
            }
        }
    }

    #[test]
    fn implicit_fraction_count() {
        let mut cfg = SynthConfig::restaurant(9);
        cfg.n_sentences = 600;
        cfg.n_dev = 0;
        cfg.n_test = 0;
        let corpus = generate_synthetic(&cfg).unwrap();
        let n = corpus
            .train
            .examples
            .iter()
            .filter(|e| e.polarity_of("miscellaneous").is_some())
            .count();
        // Binomial(600, 0.15): mean 90, sd about 8.7.
        assert!((60..=120).contains(&n), "{n}");
    }

    #[test]
    fn lexicon_conflicts_rejected() {
        let mut cfg = SynthConfig::restaurant(1);
        cfg.polarities[1].words.push("great".into());
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = SynthConfig::restaurant(1);
        cfg.categories.retain(|c| !c.is_implicit());
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn synthetic_stats_match_recount() {
        let corpus = generate_synthetic(&SynthConfig::restaurant(13)).unwrap();
        let st = split_stats(&corpus.train, &corpus.schema);
        let mut recount: HashMap<String, usize> = HashMap::new();
        for line in corpus.train.to_jsonl().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for l in v["labels"].as_array().unwrap() {
                *recount.entry(l["polarity"].as_str().unwrap().to_string()).or_default() += 1;
            }
        }
        for (p, n) in &st.per_polarity {
            assert_eq!(recount.get(p).copied().unwrap_or(0), *n);
        }
        assert_eq!(st.per_polarity.iter().map(|x| x.1).sum::<usize>(), st.labels);
        assert_eq!(st.per_category.iter().map(|x| x.1).sum::<usize>(), st.labels);
    }
}

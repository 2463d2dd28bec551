//! Score filled sentiment templates against a sentence and rank them.
//!
//! An all-zero model assigns every token probability 1/|V|, so each
//! candidate scores exactly -m ln|V| for a target of m tokens (EOS
//! included). A randomly initialised model breaks the tie arbitrarily.

use temprank::corpus::{generate_synthetic, SynthConfig};
use temprank::inference::{predict_acsa, Candidates};
use temprank::model::{InitMode, Model, ModelConfig};
use temprank::scoring::{score_candidates, LocalScorer};
use temprank::templates::{candidates_acsa, TemplateSet};
use temprank::text::build_vocab;

fn main() -> temprank::Result<()> {
    let corpus = generate_synthetic(&SynthConfig::restaurant(7))?;
    let vocab = build_vocab(&[&corpus.train], &corpus.schema);
    let templates = TemplateSet::default();
    let ex = &corpus.test.examples[0];
    let source = vocab.encode_tokens(&ex.tokens);
    let category = ex.labels[0].category.as_str();
    println!("sentence: {}\ncategory: {category}", ex.text);

    let cands = candidates_acsa(&templates, category, &corpus.schema, &vocab)?;
    for init in [InitMode::Zero, InitMode::Random] {
        let model = Model::<f64>::init(ModelConfig::with_vocab(vocab.len()), 1, init)?;
        let scorer = LocalScorer::new(model);
        println!("\n{init:?} init (|V| = {}):", vocab.len());
        for (c, filled) in score_candidates(&scorer, &source, &cands)?.iter().zip(&cands) {
            println!("  {:>9.4}  {}", c.score, filled.text);
        }
        let ctx = Candidates { schema: &corpus.schema, templates: &templates, vocab: &vocab };
        let d = predict_acsa(&scorer, &source, category, ctx)?;
        println!("  prediction: {}", d.label);
    }
    let m = cands[0].tokens.len();
    println!("\n-m ln|V| with m = {m}: {:.4}", -(m as f64) * (vocab.len() as f64).ln());
    Ok(())
}

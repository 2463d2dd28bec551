//! Save a model to the binary checkpoint format, load it back and confirm
//! the scores are bit-identical.

use temprank::corpus::{generate_synthetic, SynthConfig};
use temprank::model::{load_checkpoint, read_meta, save_checkpoint, Checkpoint, InitMode, Model, ModelConfig};
use temprank::scoring::LocalScorer;
use temprank::templates::{candidates_acsa, TemplateSet};
use temprank::text::build_vocab;

fn main() -> temprank::Result<()> {
    let corpus = generate_synthetic(&SynthConfig::restaurant(7))?;
    let vocab = build_vocab(&[&corpus.train], &corpus.schema);
    let model = Model::<f32>::init(ModelConfig::with_vocab(vocab.len()), 5, InitMode::Random)?;
    let path = std::env::temp_dir().join("temprank_example.ckpt");
    save_checkpoint(&Checkpoint::new(model.clone(), vocab.clone()), &path)?;
    let meta = read_meta(&path)?;
    println!("{} tensors, vocab {}, {} bytes", meta.tensors.len(), meta.config.vocab_size, std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));

    let restored = load_checkpoint::<f32>(&path)?;
    let (a, b) = (LocalScorer::new(model), LocalScorer::new(restored.model));
    let templates = TemplateSet::default();
    let mut identical = 0;
    for ex in corpus.test.examples.iter().take(20) {
        let src = vocab.encode_tokens(&ex.tokens);
        let cand = &candidates_acsa(&templates, &ex.labels[0].category, &corpus.schema, &vocab)?[0];
        let (x, y) = (a.score_ids(src.ids(), cand.tokens.ids())?, b.score_ids(src.ids(), cand.tokens.ids())?);
        identical += usize::from(x.to_bits() == y.to_bits());
    }
    println!("{identical}/20 scores bit-identical after reload");
    Ok(())
}

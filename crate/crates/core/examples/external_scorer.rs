//! Score templates through a child process speaking the line-delimited JSON
//! bridge protocol. The example re-launches itself with `--serve` as the
//! child, so the remote and local scores can be compared directly.

use temprank::corpus::{generate_synthetic, SynthConfig};
use temprank::inference::{predict_acsa, Candidates};
use temprank::model::{InitMode, Model, ModelConfig};
use temprank::scoring::{serve, ExternalScorer, ExternalScorerConfig, LocalScorer};
use temprank::templates::TemplateSet;
use temprank::text::build_vocab;

fn setup() -> temprank::Result<(temprank::corpus::SyntheticCorpus, temprank::text::Vocab, LocalScorer<f64>)> {
    let corpus = generate_synthetic(&SynthConfig::restaurant(7))?;
    let vocab = build_vocab(&[&corpus.train], &corpus.schema);
    let model = Model::<f64>::init(ModelConfig::with_vocab(vocab.len()), 9, InitMode::Random)?;
    Ok((corpus, vocab, LocalScorer::new(model)))
}

fn main() -> temprank::Result<()> {
    let (corpus, vocab, local) = setup()?;
    if std::env::args().any(|a| a == "--serve") {
        let stdin = std::io::stdin();
        return serve(&local, &vocab, stdin.lock(), std::io::stdout().lock());
    }
    let exe = std::env::current_exe().expect("own path").to_string_lossy().into_owned();
    let remote = ExternalScorer::spawn(ExternalScorerConfig::new(exe, vec!["--serve".into()]), vocab.clone())?;
    let templates = TemplateSet::default();
    let ctx = Candidates { schema: &corpus.schema, templates: &templates, vocab: &vocab };
    for ex in corpus.test.examples.iter().take(3) {
        let src = vocab.encode_tokens(&ex.tokens);
        let cat = &ex.labels[0].category;
        let l = predict_acsa(&local, &src, cat, ctx)?;
        let r = predict_acsa(&remote, &src, cat, ctx)?;
        println!("{} [{cat}]", ex.text);
        for (label, score) in &l.scores {
            println!("  {label:<9} local {score:>10.5}  remote {:>10.5}", r.scores[label]);
        }
    }
    Ok(())
}

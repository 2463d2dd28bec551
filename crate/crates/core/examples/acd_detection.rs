//! Aspect-category detection by ranking the "is discussed" template against
//! the "is not discussed" one for every category.
//!
//! cargo run --release --example acd_detection -- [MAX_EPOCHS]

use temprank::baselines::Method;
use temprank::corpus::{generate_synthetic, SynthConfig};
use temprank::eval::{fit, vocab_for, ExperimentConfig};
use temprank::inference::{Candidates, Task};

fn main() -> temprank::Result<()> {
    let corpus = generate_synthetic(&SynthConfig::restaurant(7))?;
    let mut cfg = ExperimentConfig { task: Task::Acd, ..ExperimentConfig::default() };
    if let Some(e) = std::env::args().nth(1) {
        cfg.train.max_epochs = e.parse().expect("MAX_EPOCHS must be an integer");
        cfg.train.patience = cfg.train.patience.min(cfg.train.max_epochs);
    }
    let vocab = vocab_for(&[&corpus.train], &[&corpus.schema]);
    let templates = cfg.templates(&corpus.schema.templates)?;
    let ctx = Candidates { schema: &corpus.schema, templates: &templates, vocab: &vocab };
    let out = fit::<f32>(Method::Generation, &corpus.train, Some(&corpus.dev), ctx, &cfg)?;
    let preds = out.fitted.predict(&corpus.test.examples, Task::Acd, ctx)?;
    for (p, ex) in preds.iter().zip(&corpus.test.examples).take(5) {
        let gold: Vec<&str> = ex.categories().collect();
        println!("{}\n  gold {:?}  predicted {:?}", ex.text, gold, p.detected());
    }
    let m = temprank::eval::task_metrics(&preds, &corpus.test, Task::Acd, &corpus.schema)?.prf.expect("detection has P/R/F1");
    println!("P {:.4}  R {:.4}  F1 {:.4}", m.precision, m.recall, m.f1);
    Ok(())
}

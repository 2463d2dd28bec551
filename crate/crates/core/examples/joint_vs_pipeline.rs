//! Detect categories and their sentiment at once (joint templates with a
//! "none" label) or in two stages (detection, then sentiment on detected
//! categories), and print both scores side by side.
//!
//! cargo run --release --example joint_vs_pipeline -- [MAX_EPOCHS]

use temprank::baselines::Method;
use temprank::corpus::{generate_synthetic, SynthConfig};
use temprank::eval::{fit, vocab_for, ExperimentConfig};
use temprank::inference::{Candidates, Task};

fn main() -> temprank::Result<()> {
    let corpus = generate_synthetic(&SynthConfig::restaurant(7))?;
    let vocab = vocab_for(&[&corpus.train], &[&corpus.schema]);
    let mut rows = Vec::new();
    for task in [Task::Joint, Task::Pipeline] {
        let mut cfg = ExperimentConfig { task, ..ExperimentConfig::default() };
        if let Some(e) = std::env::args().nth(1) {
            cfg.train.max_epochs = e.parse().expect("MAX_EPOCHS must be an integer");
            cfg.train.patience = cfg.train.patience.min(cfg.train.max_epochs);
        }
        let templates = cfg.templates(&corpus.schema.templates)?;
        let ctx = Candidates { schema: &corpus.schema, templates: &templates, vocab: &vocab };
        let out = fit::<f32>(Method::Generation, &corpus.train, Some(&corpus.dev), ctx, &cfg)?;
        let m = out.fitted.evaluate(&corpus.test, task, ctx)?.prf.expect("pair-level P/R/F1");
        rows.push((task, m));
    }
    println!("{:<9} {:>7} {:>7} {:>7}", "task", "P", "R", "F1");
    for (task, m) in rows {
        println!("{:<9} {:>7.4} {:>7.4} {:>7.4}", task.to_string(), m.precision, m.recall, m.f1);
    }
    Ok(())
}

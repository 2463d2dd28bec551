//! Train the generation method for aspect-category sentiment on the
//! synthetic restaurant corpus, then report test accuracy overall and per
//! category frequency bucket.
//!
//! cargo run --release --example train_acsa -- [MAX_EPOCHS]

use temprank::baselines::Method;
use temprank::corpus::{frequency_buckets, generate_synthetic, SynthConfig};
use temprank::eval::{bucket_report, fit, vocab_for, ExperimentConfig};
use temprank::inference::{Candidates, Task};

fn main() -> temprank::Result<()> {
    let corpus = generate_synthetic(&SynthConfig::restaurant(7))?;
    let mut cfg = ExperimentConfig { task: Task::Acsa, ..ExperimentConfig::default() };
    if let Some(e) = std::env::args().nth(1) {
        cfg.train.max_epochs = e.parse().expect("MAX_EPOCHS must be an integer");
        cfg.train.patience = cfg.train.patience.min(cfg.train.max_epochs);
    }
    let vocab = vocab_for(&[&corpus.train], &[&corpus.schema]);
    let templates = cfg.templates(&corpus.schema.templates)?;
    let ctx = Candidates { schema: &corpus.schema, templates: &templates, vocab: &vocab };

    let start = std::time::Instant::now();
    let out = fit::<f32>(Method::Generation, &corpus.train, Some(&corpus.dev), ctx, &cfg)?;
    let (_, history) = &out.histories[0];
    for e in &history.epochs {
        println!("epoch {:>2}  loss {:.4}  dev acc {:.4}", e.epoch, e.train_loss, e.dev_metric.unwrap_or(f64::NAN));
    }
    println!("stopped: {:?}, best epoch {}, {:.0}s", history.stop, history.best_epoch, start.elapsed().as_secs_f64());

    let preds = out.fitted.predict(&corpus.test.examples, Task::Acsa, ctx)?;
    let metrics = temprank::eval::task_metrics(&preds, &corpus.test, Task::Acsa, &corpus.schema)?;
    println!("test accuracy {:.4}", metrics.primary());
    for row in bucket_report(&preds, &corpus.test, &frequency_buckets(&corpus.train, &corpus.schema))? {
        println!("  bucket {:<5} {:>4} instances  accuracy {:.4}", row.bucket.to_string(), row.instances, row.accuracy);
    }
    Ok(())
}

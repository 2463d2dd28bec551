//! Template generation against the two fine-tuning baselines (a
//! classification head on the encoder and masked-word prediction) on the
//! same sentiment task and splits.
//!
//! cargo run --release --example baselines_comparison -- [MAX_EPOCHS]

use temprank::baselines::Method;
use temprank::corpus::{generate_synthetic, SynthConfig};
use temprank::eval::{compare_methods, Domain, ExperimentConfig};
use temprank::inference::Task;

fn main() -> temprank::Result<()> {
    let corpus = generate_synthetic(&SynthConfig::restaurant(7))?;
    let mut cfg = ExperimentConfig { task: Task::Acsa, ..ExperimentConfig::default() };
    cfg.train.max_epochs = std::env::args().nth(1).map_or(10, |e| e.parse().expect("MAX_EPOCHS must be an integer"));
    cfg.train.patience = cfg.train.patience.min(cfg.train.max_epochs);
    let domain = Domain {
        name: "restaurant",
        schema: &corpus.schema,
        train: &corpus.train,
        dev: &corpus.dev,
        test: &corpus.test,
    };
    let report = compare_methods::<f32>(domain, &Method::ALL, &[cfg.train.seed], &cfg)?;
    print!("{}", report.to_markdown());
    println!("chance level: {:.4}", 1.0 / corpus.schema.num_polarities() as f64);
    Ok(())
}

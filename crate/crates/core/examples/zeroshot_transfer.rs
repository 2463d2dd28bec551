//! Train on one synthetic domain and test on another whose category names
//! and aspect terms are disjoint, in both directions, next to the
//! majority-class baseline of the target test split.
//!
//! cargo run --release --example zeroshot_transfer -- [MAX_EPOCHS]

use temprank::baselines::Method;
use temprank::corpus::{generate_synthetic, SynthConfig};
use temprank::eval::{zeroshot_transfer, Domain, ExperimentConfig};
use temprank::inference::Task;

fn main() -> temprank::Result<()> {
    let rest = generate_synthetic(&SynthConfig::restaurant(7))?;
    let hotel = generate_synthetic(&SynthConfig::hotel(7))?;
    let mut cfg = ExperimentConfig { task: Task::Acsa, ..ExperimentConfig::default() };
    cfg.train.max_epochs = std::env::args().nth(1).map_or(10, |e| e.parse().expect("MAX_EPOCHS must be an integer"));
    cfg.train.patience = cfg.train.patience.min(cfg.train.max_epochs);
    let domain = |name, c: &'static temprank::corpus::SyntheticCorpus| Domain {
        name,
        schema: &c.schema,
        train: &c.train,
        dev: &c.dev,
        test: &c.test,
    };
    let rest: &'static _ = Box::leak(Box::new(rest));
    let hotel: &'static _ = Box::leak(Box::new(hotel));
    let report = zeroshot_transfer::<f32>(domain("restaurant", rest), domain("hotel", hotel), true, &[Method::Generation], &cfg)?;
    print!("{}", report.to_markdown());
    Ok(())
}

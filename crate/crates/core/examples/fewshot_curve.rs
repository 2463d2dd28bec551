//! Few-shot learning curve: subsample k examples per category, train from
//! scratch and test, for several k and seeds.
//!
//! cargo run --release --example fewshot_curve -- [MAX_EPOCHS]

use temprank::baselines::Method;
use temprank::corpus::{generate_synthetic, SynthConfig};
use temprank::eval::{fewshot_curve, Domain, ExperimentConfig};
use temprank::inference::Task;

fn main() -> temprank::Result<()> {
    let corpus = generate_synthetic(&SynthConfig::restaurant(7))?;
    let mut cfg = ExperimentConfig { task: Task::Acsa, ..ExperimentConfig::default() };
    cfg.train.max_epochs = std::env::args().nth(1).map_or(5, |e| e.parse().expect("MAX_EPOCHS must be an integer"));
    cfg.train.patience = cfg.train.patience.min(cfg.train.max_epochs);
    let domain = Domain {
        name: "restaurant",
        schema: &corpus.schema,
        train: &corpus.train,
        dev: &corpus.dev,
        test: &corpus.test,
    };
    let report = fewshot_curve::<f32>(domain, &[10, 50, 500], &[1, 2], &[Method::Generation], &cfg)?;
    for s in report.summary() {
        println!("{:<11} {:<6} {} mean {:.4} median {:.4} (n={})", s.method, s.setting, s.metric, s.mean, s.median, s.n);
    }
    let mut report = report;
    let (csv, _) = report.write(&std::env::temp_dir())?;
    println!("rows written to {}", csv.display());
    Ok(())
}

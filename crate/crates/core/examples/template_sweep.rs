//! Compare sentiment template wordings by dev accuracy.
//!
//! cargo run --release --example template_sweep -- [MAX_EPOCHS]

use temprank::corpus::{generate_synthetic, SynthConfig};
use temprank::eval::{template_sweep, Domain, ExperimentConfig};
use temprank::templates::{TemplateSpec, TemplateTask};

fn main() -> temprank::Result<()> {
    let corpus = generate_synthetic(&SynthConfig::restaurant(7))?;
    let mut cfg = ExperimentConfig::default();
    cfg.train.max_epochs = std::env::args().nth(1).map_or(5, |e| e.parse().expect("MAX_EPOCHS must be an integer"));
    cfg.train.patience = cfg.train.patience.min(cfg.train.max_epochs);
    let mut specs: Vec<TemplateSpec> = corpus.schema.templates.by_task(TemplateTask::Acsa).cloned().collect();
    specs.push(TemplateSpec::new("acsa-feel", TemplateTask::Acsa, "i feel {POLARITY} about the {CATEGORY}"));
    let domain = Domain {
        name: "restaurant",
        schema: &corpus.schema,
        train: &corpus.train,
        dev: &corpus.dev,
        test: &corpus.test,
    };
    let report = template_sweep::<f32>(domain, &specs, &cfg)?;
    for (row, spec) in report.rows.iter().zip(&specs) {
        println!("{:<10} {:.4} {:<5} {}", row.setting, row.value.unwrap_or(f64::NAN), row.note, spec.pattern);
    }
    Ok(())
}

//! Compare analytic gradients of the default-size model against central
//! finite differences in double precision, and list the worst coordinates.
//!
//! cargo run --release --example gradient_check -- [COORDINATES]

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temprank::model::{InitMode, Model, ModelConfig, Precision};

fn main() -> temprank::Result<()> {
    let coords: usize = std::env::args().nth(1).map_or(300, |c| c.parse().expect("COORDINATES must be an integer"));
    let vocab_size = 60;
    let config = ModelConfig {
        dropout: 0.0,
        precision: Precision::Double,
        ..ModelConfig::with_vocab(vocab_size)
    };
    let mut model = Model::<f64>::init(config, 3, InitMode::Random)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let source: Vec<u32> = (0..9).map(|_| rng.gen_range(7..vocab_size as u32)).collect();
    let target: Vec<u32> = (0..6).map(|_| rng.gen_range(7..vocab_size as u32)).collect();

    let start = Instant::now();
    let mut grad = model.zero_grads();
    model.pair_loss_grad(&source, &target, &mut grad, None)?;
    let loss = |m: &Model<f64>| -> temprank::Result<f64> {
        let enc = m.encode(&source, None)?;
        Ok(-m.target_logprob(&enc, &target)?)
    };

    let h = 1e-5;
    let mut checked = Vec::with_capacity(coords);
    for _ in 0..coords {
        let i = rng.gen_range(0..model.num_params());
        let orig = model.params[i];
        model.params[i] = orig + h;
        let up = loss(&model)?;
        model.params[i] = orig - h;
        let down = loss(&model)?;
        model.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        // Coordinates with a true gradient of zero would otherwise compare
        // two round-off values.
        let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-4);
        checked.push((rel, i, grad[i], numeric));
    }
    checked.sort_by(|a, b| b.0.total_cmp(&a.0));
    for &(rel, i, analytic, numeric) in checked.iter().take(5) {
        let name = &model.layout().tensors.iter().find(|t| t.offset <= i && i < t.offset + t.len()).expect("offset in layout").name;
        println!("{name:<28} [{i:>6}]  analytic {analytic:>11.3e}  numeric {numeric:>11.3e}  rel {rel:.2e}");
    }
    println!(
        "{coords} coordinates of {} parameters: max relative error {:.2e} in {:.1}s",
        model.num_params(),
        checked[0].0,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

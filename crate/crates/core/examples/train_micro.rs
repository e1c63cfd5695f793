//! Overfit the Micro model on eight synthetic images and report training-set
//! metrics. Takes about half a minute in release mode.
//!
//! `cargo run --release --example train_micro -- 300`

use fluxamba::data::{generate, GenSpec};
use fluxamba::model::{evaluate, train_loop, EvalOptions, Model, ModelConfig, TrainConfig};

fn main() -> fluxamba::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let samples = generate(&GenSpec { count: 8, size: 64, ..GenSpec::default() })?;
    let mut model = Model::<f32>::build(&ModelConfig::micro())?;
    println!("micro: {} parameters", model.count_params());

    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: steps,
        batch: 8,
        power: 0.0,
        augment: false,
        validate: false,
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let report = train_loop(&mut model, &samples, &[], &cfg, |e| {
        if e.step == 1 || e.step % 50 == 0 {
            println!("step {:>4}  loss {:.5}", e.step, e.loss);
        }
    })?;
    let first = report.log[0].loss;
    let last = report.log.last().map_or(first, |e| e.loss);
    println!("loss {first:.4} -> {last:.4} ({:.1}% lower)", 100.0 * (1.0 - last / first));
    println!("{}", evaluate(&model, &samples, 0.0, &EvalOptions::default())?);
    Ok(())
}

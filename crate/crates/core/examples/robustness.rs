//! Briefly train Micro, then evaluate it under increasing Gaussian input
//! noise and print the relative mIoU decline.

use fluxamba::data::{generate, GenSpec};
use fluxamba::model::{robustness, train_loop, EvalOptions, Model, ModelConfig, TrainConfig};

fn main() -> fluxamba::Result<()> {
    let samples = generate(&GenSpec { count: 8, size: 64, seed: 3, ..GenSpec::default() })?;
    let mut model = Model::<f32>::build(&ModelConfig::micro())?;
    let cfg = TrainConfig { lr: 1e-3, epochs: 100, batch: 8, power: 0.0, augment: false, validate: false, ..TrainConfig::default() };
    train_loop(&mut model, &samples, &[], &cfg, |_| {})?;

    let report = robustness(&model, &samples, &[0.0, 0.05, 0.1, 0.2, 0.3], &EvalOptions::default())?;
    print!("{}", report.table());
    println!("\nCSV has {} data rows", report.to_csv().lines().count() - 1);
    Ok(())
}

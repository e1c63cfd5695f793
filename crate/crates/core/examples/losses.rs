//! The three training losses on a small prediction, separately and combined.

use fluxamba::loss::{boundary_loss, soft_dice, total_loss, wbce, LossWeights};
use fluxamba::model::{Model, ModelConfig};
use fluxamba::data::{collate, generate, GenSpec};
use fluxamba::nn::Ctx;
use fluxamba::numerics::{Tape, Tensor};

fn main() -> fluxamba::Result<()> {
    let tape = Tape::<f64>::new();
    let y = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let p = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![0.9, 0.2, 0.4, 0.6])?);
    let w = LossWeights::default();
    println!("weighted bce (w_pos {}): {:.6}", w.w_pos, tape.value(wbce(&tape, p, &y, w.w_pos)?).item());
    println!("soft dice:                {:.6}", tape.value(soft_dice(&tape, p, &y, w.eps)?).item());
    // The boundary map lives at a quarter of the mask resolution.
    let y8 = Tensor::new(&[1, 1, 8, 8], (0..64).map(|i| if i / 8 == i % 8 { 1.0 } else { 0.0 }).collect())?;
    println!("boundary bce (2x2 vs 8x8): {:.6}", tape.value(boundary_loss(&tape, p, &y8)?).item());

    let samples = generate(&GenSpec { count: 2, size: 64, ..GenSpec::default() })?;
    let (x, y) = collate::<f64>(&samples.iter().collect::<Vec<_>>())?;
    let model = Model::<f64>::build(&ModelConfig::micro())?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, true);
    let out = model.forward(&ctx, tape.constant(x))?;
    let b = total_loss(&tape, &out, &y, &w)?;
    println!(
        "\nuntrained micro: total {:.4} = {} x bce {:.4} + {} x dice {:.4} + {} x boundary {:.4}",
        tape.value(b.total).item(),
        w.bce,
        b.bce,
        w.dice,
        b.dice,
        w.boundary,
        b.boundary
    );
    Ok(())
}

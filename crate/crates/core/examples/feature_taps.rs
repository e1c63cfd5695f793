//! Collect the six named intermediate features of every stage during one
//! forward pass.

use fluxamba::model::{Model, ModelConfig};
use fluxamba::nn::Ctx;
use fluxamba::numerics::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fluxamba::Result<()> {
    let model = Model::<f64>::build(&ModelConfig::micro())?;
    let x = Tensor::<f64>::uniform(&[1, 1, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &model.store, false).with_taps();
    model.forward(&ctx, tape.constant(x))?;
    for (name, t) in ctx.take_taps() {
        let rms = (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt();
        println!("{name:<16} {:?}  rms {rms:.4}", t.shape());
    }
    Ok(())
}

//! One Structural Flux Block on a random feature map: output shape, the
//! per-pixel direction weights, and how the output changes as sub-modules are
//! switched off.

use fluxamba::blocks::{sfb_forward, BlockConfig, FeatureMap, SfbWeights};
use fluxamba::nn::{Ctx, Init, ParamStore};
use fluxamba::numerics::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fluxamba::Result<()> {
    let x = Tensor::<f64>::uniform(&[1, 8, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    for toggles in [[true; 4], [true, false, true, true], [false; 4]] {
        let cfg = BlockConfig::new(8).with_toggles(toggles);
        let mut store = ParamStore::new();
        let w = SfbWeights::build(&mut Init::new(&mut store, 7), "block", 1, &cfg)?;
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store, false);
        let out = sfb_forward(&ctx, &FeatureMap::new(tape.constant(x.clone()), 1), &w)?;
        let y = tape.tensor(out.out.values);
        let mean_abs = y.data().iter().map(|v| v.abs()).sum::<f64>() / y.numel() as f64;
        println!("toggles (asg, pmf, hsr, hffu) = {toggles:?}: {} params, output {:?}, mean |y| {mean_abs:.4}", store.trainable_count(), y.shape());
        if let Some(g) = out.directional_gates {
            let g = tape.tensor(g.values);
            let px: Vec<String> = (0..4).map(|d| format!("{:.3}", g.data()[d * 64])).collect();
            println!("  direction weights at pixel (0,0): {}", px.join(" "));
        }
    }
    Ok(())
}

//! All sixteen combinations of the four block sub-modules, with parameter
//! counts and the mean logit on a fixed input.

use fluxamba::model::{Model, ModelConfig};
use fluxamba::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fluxamba::Result<()> {
    let x = Tensor::<f32>::uniform(&[1, 1, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    println!("asg   pmf   hsr   hffu   params   mean logit");
    for bits in 0..16u32 {
        let t = [0, 1, 2, 3].map(|k| bits & (1 << k) != 0);
        let m = Model::<f32>::build(&ModelConfig::micro().with_toggles(t))?;
        let l = m.infer_logits(&x)?;
        let mean = l.data().iter().map(|&v| v as f64).sum::<f64>() / l.numel() as f64;
        println!("{:<5} {:<5} {:<5} {:<5} {:>8}   {mean:+.4}", t[0], t[1], t[2], t[3], m.count_params());
    }
    Ok(())
}

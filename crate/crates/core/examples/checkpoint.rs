//! Save a model, load it back in another precision, and show how damaged
//! files are reported.

use fluxamba::model::{Model, ModelConfig};
use fluxamba::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fluxamba::Result<()> {
    let dir = std::env::temp_dir().join("fluxamba-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| fluxamba::Error::Data(e.to_string()))?;
    let path = dir.join("micro.flxa");

    let model = Model::<f32>::build(&ModelConfig::micro())?;
    model.save(&path)?;
    let same = Model::<f32>::load(&path)?;
    let wide = Model::<f64>::load(&path)?;
    let x = Tensor::<f32>::uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    println!("{} tensors, {} bytes", model.store.len(), std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));
    println!("f32 reload gives identical logits: {}", model.infer_logits(&x)? == same.infer_logits(&x)?);
    println!("f64 reload max logit difference: {:.2e}", model.cast::<f64>().infer_logits(&x.cast())?.max_abs_diff(&wide.infer_logits(&x.cast())?));

    let bytes = model.to_bytes()?;
    let mut bad = bytes.clone();
    bad[0] = b'X';
    for (what, b) in [("bad magic", &bad[..]), ("truncated", &bytes[..bytes.len() - 3])] {
        let err = Model::<f32>::from_bytes(b).unwrap_err();
        println!("{what}: {err} (exit code {})", err.exit_code());
    }
    Ok(())
}

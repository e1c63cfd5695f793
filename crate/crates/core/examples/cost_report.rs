//! Parameters, FLOPs and checkpoint size of every variant, plus the FLOP
//! growth when the input side doubles.

use fluxamba::model::{Model, ModelConfig, Variant};

fn main() -> fluxamba::Result<()> {
    for v in Variant::ALL {
        let m = Model::<f32>::build(&ModelConfig::variant(v))?;
        let c = m.cost(64, 64)?;
        let ratio = m.count_flops(128, 128)? as f64 / c.flops as f64;
        println!(
            "{:<6} depths {:?}: {:>9} params, {:>6.3} GFLOPs at 64x64, {:>6.2} MB, FLOPs x{ratio:.2} at 128x128",
            v.name(),
            v.depths(),
            c.params,
            c.flops as f64 / 1e9,
            c.size_bytes as f64 / 1e6
        );
    }
    Ok(())
}

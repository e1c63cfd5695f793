//! Run the selective state-space recurrence on a sequence and time it at a
//! few lengths to see the linear cost.

use fluxamba::bench::{scan_scaling, SCAN_LENGTHS};
use fluxamba::numerics::Tensor;
use fluxamba::scan::{selective_scan, SsmParams, DEFAULT_STATE_SIZE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fluxamba::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = SsmParams::<f64>::init(4, DEFAULT_STATE_SIZE, &mut rng);
    let seq = Tensor::<f64>::uniform(&[1, 4, 12], -1.0, 1.0, &mut rng);
    let y = selective_scan(&seq, &params)?;
    println!("input  channel 0: {:?}", seq.data()[..12].iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    println!("output channel 0: {:?}", y.data()[..12].iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());

    println!("\n{}", scan_scaling(&SCAN_LENGTHS, 3, 1)?.table());
    Ok(())
}

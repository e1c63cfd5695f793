//! Print the visiting order of each of the six scan routes on a 4x5 grid and
//! check that serializing and restoring a feature map is lossless.

use fluxamba::numerics::Tensor;
use fluxamba::scan::{deserialize_tensor, make_route, serialize_tensor, ScanStrategy};

fn main() -> fluxamba::Result<()> {
    let (h, w) = (4, 5);
    for s in ScanStrategy::ALL {
        let route = make_route(s, h, w)?;
        println!("{s}:");
        let mut step = vec![0; h * w];
        for (t, &pos) in route.order.iter().enumerate() {
            step[pos] = t;
        }
        for row in step.chunks(w) {
            println!("  {}", row.iter().map(|t| format!("{t:>3}")).collect::<String>());
        }
        let x = Tensor::<f64>::new(&[1, 1, h, w], (0..h * w).map(|v| v as f64).collect())?;
        let back = deserialize_tensor(&serialize_tensor(&x, &route)?, &route)?;
        println!("  round trip exact: {}", back == x);
    }
    Ok(())
}

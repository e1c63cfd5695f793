//! Threshold-sweep metrics on hand-made predictions: F1 at 0.5, the dataset
//! optimum (ODS), the per-image optimum (OIS) and mIoU.

use fluxamba::metrics::{ConfusionCounts, EvalReport, ThresholdSweep, default_thresholds};

fn main() -> fluxamba::Result<()> {
    let y1 = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let p1 = [0.9, 0.35, 0.3, 0.1, 0.05, 0.2];
    let y2 = [0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    let p2 = [0.6, 0.7, 0.8, 0.65, 0.2, 0.1];
    let report = EvalReport::compute([(&p1[..], &y1[..]), (&p2[..], &y2[..])])?;
    println!("{report}\n");
    print!("{}", report.to_csv(0.0));

    // Per-image best thresholds differ, which is what OIS rewards.
    let sweep = ThresholdSweep::build(default_thresholds(), [(&p1[..], &y1[..]), (&p2[..], &y2[..])])?;
    for (i, row) in sweep.counts.iter().enumerate() {
        let (k, best) = row.iter().enumerate().map(|(k, c)| (k, c.f1())).fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        println!("image {i}: best F1 {best:.3} at t = {:.2}", sweep.thresholds[k]);
    }

    let c = ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 2 };
    println!("\ntp=1 fp=1 fn=0 tn=2: precision {:.3}, recall {:.3}, mIoU {:.5}", c.precision(), c.recall(), c.miou());
    Ok(())
}

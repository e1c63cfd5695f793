//! Wall-clock measurements: model forward latency and selective-scan scaling.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Scalar, Tensor};
use crate::scan::{selective_scan, SsmParams, DEFAULT_STATE_SIZE};

/// Warm-up runs preceding `repeat` timed runs: one tenth, rounded up.
pub fn warmup_runs(repeat: usize) -> usize {
    repeat.div_ceil(10)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latency {
    pub runs: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
}

impl fmt::Display for Latency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "latency    mean {:.3} ms, median {:.3} ms over {} runs ({} warm-up)",
            self.mean_ms, self.median_ms, self.runs, self.warmup
        )
    }
}

/// Mean and median of single-image eval forward passes at `size x size`.
pub fn forward_latency<T: Scalar>(model: &Model<T>, size: usize, repeat: usize, seed: u64) -> Result<Latency> {
    if repeat == 0 {
        return Err(Error::Config("--repeat must be positive".into()));
    }
    let x = Tensor::<T>::uniform(&[1, model.cfg.in_channels, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let warmup = warmup_runs(repeat);
    for _ in 0..warmup {
        model.infer_logits(&x)?;
    }
    let mut times = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let t = Instant::now();
        model.infer_logits(&x)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / repeat as f64;
    times.sort_by(f64::total_cmp);
    let median_ms = if repeat % 2 == 1 {
        times[repeat / 2]
    } else {
        0.5 * (times[repeat / 2 - 1] + times[repeat / 2])
    };
    Ok(Latency {
        runs: repeat,
        warmup,
        mean_ms,
        median_ms,
    })
}

/// Least-squares line `y = slope x + intercept` and its coefficient of
/// determination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("a linear fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("a linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r2 })
}

pub const SCAN_LENGTHS: [usize; 3] = [4096, 16384, 65536];
pub const SCAN_CHANNELS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ScanScaling {
    /// `(L, best-of-repeats seconds)`.
    pub points: Vec<(usize, f64)>,
    pub fit: LinearFit,
}

impl ScanScaling {
    pub fn table(&self) -> String {
        let mut s = String::from("scan length      time (ms)\n");
        for &(l, t) in &self.points {
            s.push_str(&format!("{l:>11}  {:>13.3}\n", t * 1e3));
        }
        s.push_str(&format!(
            "linear fit: {:.3} ns per step, R^2 = {:.4}",
            self.fit.slope * 1e9,
            self.fit.r2
        ));
        s
    }
}

/// Time the plain selective scan over each length (fastest of `repeats`)
/// and fit time against length.
pub fn scan_scaling(lengths: &[usize], repeats: usize, seed: u64) -> Result<ScanScaling> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SsmParams::<f32>::init(SCAN_CHANNELS, DEFAULT_STATE_SIZE, &mut rng);
    let mut points = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let seq = Tensor::<f32>::uniform(&[1, SCAN_CHANNELS, l], -1.0, 1.0, &mut rng);
        selective_scan(&seq, &params)?;
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let t = Instant::now();
            selective_scan(&seq, &params)?;
            best = best.min(t.elapsed().as_secs_f64());
        }
        points.push((l, best));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let fit = linear_fit(&xs, &ys)?;
    Ok(ScanScaling { points, fit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_a_tenth_rounded_up() {
        assert_eq!(warmup_runs(1000), 100);
        assert_eq!(warmup_runs(5), 1);
        assert_eq!(warmup_runs(11), 2);
    }

    #[test]
    fn exact_line_has_unit_r2() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let g = linear_fit(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((g.r2 - 0.2).abs() < 1e-12);
        assert!(linear_fit(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }
}

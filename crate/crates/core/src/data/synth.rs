//! Procedural curvilinear-structure images: textured background, crater
//! distractors and thin Bezier strokes whose hard support is the mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub count: usize,
    /// Image side length `H = W`.
    pub size: usize,
    /// Inclusive range of strokes per image.
    pub strokes: (usize, usize),
    /// Stroke width range in pixels.
    pub thickness: (f64, f64),
    /// Brightness added along a stroke.
    pub contrast: (f64, f64),
    pub craters: usize,
    /// Coarsest value-noise cell size in pixels.
    pub texture_scale: f64,
    /// Peak-to-peak amplitude of the background texture; 0 is flat.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            count: 10,
            size: 64,
            strokes: (1, 3),
            thickness: (1.5, 4.0),
            contrast: (0.15, 0.4),
            craters: 3,
            texture_scale: 16.0,
            texture_amplitude: 0.3,
            seed: 42,
        }
    }
}

/// Gray level of a flat background.
pub const BACKGROUND_LEVEL: f64 = 0.35;
const BEZIER_SEGMENTS: usize = 48;

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.size < 4 {
            return bad(&format!("image size {} is degenerate (need >= 4)", self.size));
        }
        if self.strokes.0 > self.strokes.1 {
            return bad("stroke range is reversed");
        }
        for (name, (lo, hi)) in [("thickness", self.thickness), ("contrast", self.contrast)] {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return bad(&format!("{name} range ({lo}, {hi}) is invalid"));
            }
        }
        if !(self.texture_scale >= 1.0) || !(self.texture_amplitude >= 0.0) {
            return bad("texture scale must be >= 1 and amplitude >= 0");
        }
        Ok(())
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Octave-summed value noise in roughly `[-0.5, 0.5]`.
fn value_noise(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let (mut cell, mut amp, mut norm) = (scale, 1.0, 0.0);
    while cell >= 2.0 {
        let g = (n as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..g * g).map(|_| rng.gen::<f64>() - 0.5).collect();
        for i in 0..n {
            for j in 0..n {
                let (y, x) = (i as f64 / cell, j as f64 / cell);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (fy, fx) = (smooth(y - y0 as f64), smooth(x - x0 as f64));
                let at = |a: usize, b: usize| lattice[a * g + b];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                out[i * n + j] += amp * (top * (1.0 - fy) + bot * fy);
            }
        }
        norm += amp;
        amp *= 0.5;
        cell /= 2.0;
    }
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn bezier(p: &[(f64, f64); 4], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0,
        a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1,
    )
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Render sample `index` of `spec`; depends only on `(spec.seed, index)` and
/// the shape parameters.
pub fn generate_one(spec: &GenSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let n = spec.size;
    let nf = n as f64;
    let mut rng = sample_rng(spec.seed, index);

    let noise = value_noise(&mut rng, n, spec.texture_scale.min(nf));
    let mut img: Vec<f64> = noise.iter().map(|v| BACKGROUND_LEVEL + spec.texture_amplitude * v).collect();

    for _ in 0..spec.craters {
        let (cy, cx) = (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf));
        let r = rng.gen_range(2.0..(nf / 6.0).max(3.0));
        let depth = rng.gen_range(0.05..0.15);
        for i in 0..n {
            for j in 0..n {
                let d = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
                if d < r {
                    img[i * n + j] -= depth * (1.0 - (d / r).powi(2));
                } else if d < r + 2.0 {
                    img[i * n + j] += depth * (1.0 - (d - r) / 2.0);
                }
            }
        }
    }

    let mut mask = vec![0.0; n * n];
    let mut stroke_gain = vec![0.0f64; n * n];
    let k = rng.gen_range(spec.strokes.0..=spec.strokes.1);
    for _ in 0..k {
        let ctrl: [(f64, f64); 4] = std::array::from_fn(|_| (rng.gen_range(-0.1 * nf..1.1 * nf), rng.gen_range(-0.1 * nf..1.1 * nf)));
        let half = draw(&mut rng, spec.thickness) / 2.0;
        let contrast = draw(&mut rng, spec.contrast);
        let pts: Vec<(f64, f64)> = (0..=BEZIER_SEGMENTS).map(|s| bezier(&ctrl, s as f64 / BEZIER_SEGMENTS as f64)).collect();
        for i in 0..n {
            for j in 0..n {
                let p = (i as f64, j as f64);
                let d = pts.windows(2).map(|w| dist_to_segment(p, w[0], w[1])).fold(f64::INFINITY, f64::min);
                if d <= half {
                    mask[i * n + j] = 1.0;
                }
                // Full strength inside the support, one-pixel linear falloff outside.
                let weight = (1.0 - (d - half)).clamp(0.0, 1.0);
                stroke_gain[i * n + j] = stroke_gain[i * n + j].max(contrast * weight);
            }
        }
    }
    // Snap to the 8-bit levels a PGM stores, so a sample read back from disk
    // is identical to the generated one.
    for (v, g) in img.iter_mut().zip(&stroke_gain) {
        *v = ((*v + g).clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    Ok(Sample {
        image: Tensor::new(&[1, n, n], img)?,
        mask: Tensor::new(&[1, n, n], mask)?,
        id: format!("{:05}", index),
    })
}

pub fn generate(spec: &GenSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count).map(|i| generate_one(spec, i)).collect()
}

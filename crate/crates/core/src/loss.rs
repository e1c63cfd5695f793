//! Hybrid segmentation objective: weighted BCE, soft Dice and a boundary BCE
//! supervised by the morphological gradient of the mask.

use crate::decoder::BoundaryOutput;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub boundary: f64,
    pub w_pos: f64,
    /// Dice smoothing term.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 0.3,
            dice: 0.4,
            boundary: 0.2,
            w_pos: 5.0,
            eps: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.bce, self.dice, self.boundary, self.w_pos, self.eps];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn check_same<T: Scalar>(tape: &Tape<T>, op: &'static str, p: Var, y: &Tensor<T>) -> Result<()> {
    let ps = tape.shape(p);
    if ps != y.shape() {
        return Err(Error::shape(op, format!("prediction {ps:?} vs target {:?}", y.shape())));
    }
    Ok(())
}

/// `-(1/N) sum[w_pos y ln p + (1 - y) ln(1 - p)]` on clamped probabilities.
pub fn wbce<T: Scalar>(tape: &Tape<T>, p: Var, y: &Tensor<T>, w_pos: f64) -> Result<Var> {
    check_same(tape, "wbce", p, y)?;
    let pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let yv = tape.constant(y.clone());
    let pos = tape.mul_scalar(tape.mul(yv, tape.ln(pc))?, w_pos);
    let neg = tape.mul(tape.one_minus(yv), tape.ln(tape.one_minus(pc)))?;
    Ok(tape.neg(tape.mean(tape.add(pos, neg)?)))
}

/// `1 - (2 sum(p y) + eps) / (sum p + sum y + eps)` over the whole batch.
pub fn soft_dice<T: Scalar>(tape: &Tape<T>, p: Var, y: &Tensor<T>, eps: f64) -> Result<Var> {
    check_same(tape, "soft_dice", p, y)?;
    let yv = tape.constant(y.clone());
    let inter = tape.add_scalar(tape.mul_scalar(tape.sum(tape.mul(p, yv)?), 2.0), eps);
    let denom = tape.add_scalar(tape.add(tape.sum(p), tape.sum(yv))?, eps);
    Ok(tape.one_minus(tape.div(inter, denom)?))
}

/// Binary morphology with a 3x3 square; out-of-image neighbours are ignored.
fn morph<T: Scalar>(y: &Tensor<T>, dilate: bool) -> Result<Tensor<T>> {
    let (b, c, h, w) = y.dims4()?;
    let d = y.data();
    let mut out = vec![T::zero(); d.len()];
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = !dilate;
                for ii in i.saturating_sub(1)..(i + 2).min(h) {
                    for jj in j.saturating_sub(1)..(j + 2).min(w) {
                        let on = d[base + ii * w + jj] > T::from_f64_lossy(0.5);
                        acc = if dilate { acc || on } else { acc && on };
                    }
                }
                out[base + i * w + j] = if acc { T::one() } else { T::zero() };
            }
        }
    }
    Tensor::new(y.shape(), out)
}

pub fn dilate<T: Scalar>(y: &Tensor<T>) -> Result<Tensor<T>> {
    morph(y, true)
}

pub fn erode<T: Scalar>(y: &Tensor<T>) -> Result<Tensor<T>> {
    morph(y, false)
}

/// Morphological gradient `dilate(y) - erode(y)` of a binary `[B,C,H,W]` mask.
pub fn boundary_gt<T: Scalar>(y: &Tensor<T>) -> Result<Tensor<T>> {
    dilate(y)?.zip_map(&erode(y)?, |a, b| a - b)
}

/// Max-pool a mask by an integer factor.
pub fn max_pool_mask<T: Scalar>(y: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = y.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape("max_pool_mask", format!("{h}x{w} not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let d = y.data();
    let mut out = vec![T::zero(); b * c * oh * ow];
    for plane in 0..b * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = d[plane * h * w + i * factor * w + j * factor];
                for ii in 0..factor {
                    for jj in 0..factor {
                        m = m.max(d[plane * h * w + (i * factor + ii) * w + j * factor + jj]);
                    }
                }
                out[plane * oh * ow + i * ow + j] = m;
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// Plain BCE between the boundary map and the morphological gradient of the
/// mask max-pooled to the boundary map's resolution.
pub fn boundary_loss<T: Scalar>(tape: &Tape<T>, m_bound: Var, y: &Tensor<T>) -> Result<Var> {
    let ms = tape.shape(m_bound);
    let ys = y.shape();
    if ms.len() != 4 || ys.len() != 4 || ms[2] == 0 || !ys[2].is_multiple_of(ms[2]) || ys[2] / ms[2] * ms[3] != ys[3] {
        return Err(Error::shape("boundary_loss", format!("boundary map {ms:?} vs mask {ys:?}")));
    }
    let gt = boundary_gt(&max_pool_mask(y, ys[2] / ms[2])?)?;
    wbce(tape, m_bound, &gt, 1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub bce: f64,
    pub dice: f64,
    pub boundary: f64,
}

/// `lambda_bce wbce + lambda_dice dice + lambda_b boundary` on the decoder
/// outputs against a full-resolution binary mask `[B,1,H,W]`.
pub fn total_loss<T: Scalar>(tape: &Tape<T>, out: &BoundaryOutput, y: &Tensor<T>, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let p = tape.sigmoid(out.logits);
    let bce = wbce(tape, p, y, w.w_pos)?;
    let dice = soft_dice(tape, p, y, w.eps)?;
    let bnd = boundary_loss(tape, out.m_bound, y)?;
    let total = tape.add(
        tape.add(tape.mul_scalar(bce, w.bce), tape.mul_scalar(dice, w.dice))?,
        tape.mul_scalar(bnd, w.boundary),
    )?;
    let item = |v: Var| tape.value(v).item().as_f64();
    Ok(LossBreakdown {
        total,
        bce: item(bce),
        dice: item(dice),
        boundary: item(bnd),
    })
}

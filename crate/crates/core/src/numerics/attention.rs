//! Multi-head self-attention restricted to one spatial axis.

use super::conv::ConvParams;
use super::tape::{Tape, Var};
use super::tensor::{dims4, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnAxis {
    /// Each column attends over its H positions.
    Height,
    /// Each row attends over its W positions.
    Width,
}

/// Projection weights, each `[C, C, 1, 1]` (bias-free 1x1 convolutions).
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Scaled dot-product attention along `axis` with `heads` heads and scale
/// `1/sqrt(C/heads)`; the other spatial axis is treated as batch.
pub fn multi_head_axial_attention<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    axis: AttnAxis,
    heads: usize,
    weights: AttnWeights,
) -> Result<Var> {
    let (b, c, h, w) = dims4(&tape.shape(x), "axial_attention")?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "axial attention: {heads} heads do not divide {c} channels"
        )));
    }
    let dh = c / heads;
    let p = ConvParams::default();
    let q = tape.conv2d(x, weights.wq, None, p)?;
    let k = tape.conv2d(x, weights.wk, None, p)?;
    let v = tape.conv2d(x, weights.wv, None, p)?;

    // [B, heads, dh, H, W] axes: 0 b, 1 head, 2 d, 3 h, 4 w
    let split = [b, heads, dh, h, w];
    let (seq, other, rows_perm, keys_perm, back_perm) = match axis {
        AttnAxis::Height => (h, w, [0, 4, 1, 3, 2], [0, 4, 1, 2, 3], [0, 2, 4, 3, 1]),
        AttnAxis::Width => (w, h, [0, 3, 1, 4, 2], [0, 3, 1, 2, 4], [0, 2, 4, 1, 3]),
    };
    let n = b * other * heads;
    let to_rows = |t: Var| -> Result<Var> {
        let t = tape.permute(tape.reshape(t, &split)?, &rows_perm)?;
        tape.reshape(t, &[n, seq, dh])
    };
    let qr = to_rows(q)?;
    let vr = to_rows(v)?;
    let kt = tape.permute(tape.reshape(k, &split)?, &keys_perm)?;
    let kt = tape.reshape(kt, &[n, dh, seq])?;

    let scores = tape.mul_scalar(tape.bmm(qr, kt)?, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.bmm(attn, vr)?;
    // back to [B, C, H, W]
    let ctx = match axis {
        AttnAxis::Height => tape.reshape(ctx, &[b, w, heads, h, dh])?,
        AttnAxis::Width => tape.reshape(ctx, &[b, h, heads, w, dh])?,
    };
    let ctx = tape.reshape(tape.permute(ctx, &back_perm)?, &[b, c, h, w])?;
    tape.conv2d(ctx, weights.wo, None, p)
}

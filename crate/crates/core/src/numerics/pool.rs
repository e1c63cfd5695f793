//! Axis pooling and strip pooling.

use super::conv::ConvParams;
use super::tape::{Tape, Var};
use super::tensor::{dims4, Scalar};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    /// Average over H, giving `[B,C,1,W]`.
    Height,
    /// Average over W, giving `[B,C,H,1]`.
    Width,
    /// Global average pooling, `[B,C,1,1]`.
    Both,
}

pub fn pool_axis_avg<T: Scalar>(tape: &Tape<T>, x: Var, axis: PoolAxis) -> Result<Var> {
    dims4(&tape.shape(x), "pool_axis_avg")?;
    let axes: &[usize] = match axis {
        PoolAxis::Height => &[2],
        PoolAxis::Width => &[3],
        PoolAxis::Both => &[2, 3],
    };
    tape.mean_axes(x, axes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StripOrientation {
    /// One `1 x W` strip per row.
    Horizontal,
    /// One `H x 1` strip per column.
    Vertical,
}

impl StripOrientation {
    /// Kernel shape `(K_h, K_w)` of the 1-D convolution along the strip profile.
    pub fn kernel(self) -> (usize, usize) {
        match self {
            StripOrientation::Horizontal => (3, 1),
            StripOrientation::Vertical => (1, 3),
        }
    }
}

/// Average each strip, run a kernel-3 convolution along the remaining axis
/// (`weight: [C_out, C, 3, 1]` or `[C_out, C, 1, 3]`), and broadcast back.
pub fn strip_pool<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    orientation: StripOrientation,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let (b, _, h, w) = dims4(&tape.shape(x), "strip_pool")?;
    let (pooled, params) = match orientation {
        StripOrientation::Horizontal => (
            tape.mean_axes(x, &[3])?,
            ConvParams {
                padding: (1, 0),
                ..ConvParams::default()
            },
        ),
        StripOrientation::Vertical => (
            tape.mean_axes(x, &[2])?,
            ConvParams {
                padding: (0, 1),
                ..ConvParams::default()
            },
        ),
    };
    let profile = tape.conv2d(pooled, weight, bias, params)?;
    let cout = tape.shape(profile)[1];
    tape.expand(profile, &[b, cout, h, w])
}

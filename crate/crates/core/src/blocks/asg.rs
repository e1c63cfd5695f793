//! Anisotropic strip gating: coordinate pooling plus strip pooling drive a
//! sigmoid gate that re-weights the input.

use crate::error::Result;
use crate::nn::{Conv2d, Ctx, Init};
use crate::numerics::{pool_axis_avg, strip_pool, ConvParams, PoolAxis, Scalar, StripOrientation};

use super::{FeatureMap, GateKind, GateMap};

#[derive(Debug, Clone, Copy)]
pub struct AsgWeights {
    /// 1x1 mixing of the width-pooled `[B,C,H,1]` profile.
    pub coord_h: Conv2d,
    /// 1x1 mixing of the height-pooled `[B,C,1,W]` profile.
    pub coord_w: Conv2d,
    /// Kernel `(3,1)` along the row-strip profile.
    pub strip_h: Conv2d,
    /// Kernel `(1,3)` along the column-strip profile.
    pub strip_v: Conv2d,
    /// `2C -> C` gate projection.
    pub gate: Conv2d,
}

impl AsgWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, c: usize) -> Result<Self> {
        init.scope("asg", |init| {
            Ok(Self {
                coord_h: Conv2d::build(init, "coord_h", c, c, 1, true)?,
                coord_w: Conv2d::build(init, "coord_w", c, c, 1, true)?,
                strip_h: Conv2d::build_with(init, "strip_h", c, c, (3, 1), ConvParams::default(), true)?,
                strip_v: Conv2d::build_with(init, "strip_v", c, c, (1, 3), ConvParams::default(), true)?,
                gate: Conv2d::build(init, "gate", 2 * c, c, 1, true)?,
            })
        })
    }
}

pub fn asg_forward<T: Scalar>(ctx: &Ctx<T>, x_base: &FeatureMap, w: &AsgWeights) -> Result<(FeatureMap, GateMap)> {
    let t = ctx.tape;
    let x = x_base.values;
    let shape = t.shape(x);

    let rows = w.coord_h.forward(ctx, pool_axis_avg(t, x, PoolAxis::Width)?)?;
    let cols = w.coord_w.forward(ctx, pool_axis_avg(t, x, PoolAxis::Height)?)?;
    let f_coord = t.add(t.expand(rows, &shape)?, t.expand(cols, &shape)?)?;

    let sh = strip_pool(t, x, StripOrientation::Horizontal, ctx.p(w.strip_h.weight), w.strip_h.bias.map(|b| ctx.p(b)))?;
    let sv = strip_pool(t, x, StripOrientation::Vertical, ctx.p(w.strip_v.weight), w.strip_v.bias.map(|b| ctx.p(b)))?;
    let f_strip = t.add(sh, sv)?;

    let gate = t.sigmoid(w.gate.forward(ctx, t.concat(&[f_coord, f_strip], 1)?)?);
    let x_asg = t.add(x, t.mul(x, gate)?)?;
    Ok((
        x_base.with(x_asg),
        GateMap {
            values: gate,
            kind: GateKind::Asg,
        },
    ))
}

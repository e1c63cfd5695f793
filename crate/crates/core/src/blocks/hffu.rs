//! Channel and spatial gates summed without an identity path.

use crate::error::Result;
use crate::nn::{Conv2d, Ctx, Init};
use crate::numerics::{pool_axis_avg, PoolAxis, Scalar};

use super::{FeatureMap, GateKind, GateMap};

#[derive(Debug, Clone, Copy)]
pub struct HffuWeights {
    pub excite: Conv2d,
    /// `C -> 1` spatial mask.
    pub spatial: Conv2d,
}

impl HffuWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, c: usize) -> Result<Self> {
        init.scope("hffu", |init| {
            Ok(Self {
                excite: Conv2d::build(init, "excite", c, c, 1, true)?,
                spatial: Conv2d::build(init, "spatial", c, 1, 1, true)?,
            })
        })
    }
}

/// `G_ch * x + G_sp * x`. Returns the output and both gates.
pub fn hffu_forward<T: Scalar>(ctx: &Ctx<T>, x_hsr: &FeatureMap, w: &HffuWeights) -> Result<(FeatureMap, GateMap, GateMap)> {
    let t = ctx.tape;
    let x = x_hsr.values;
    let g_ch = t.sigmoid(w.excite.forward(ctx, pool_axis_avg(t, x, PoolAxis::Both)?)?);
    let g_sp = t.sigmoid(w.spatial.forward(ctx, x)?);
    let out = t.add(t.mul(g_ch, x)?, t.mul(g_sp, x)?)?;
    Ok((
        x_hsr.with(out),
        GateMap { values: g_ch, kind: GateKind::Channel },
        GateMap { values: g_sp, kind: GateKind::Spatial },
    ))
}

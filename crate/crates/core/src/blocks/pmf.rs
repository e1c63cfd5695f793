//! Per-pixel mixing of the four directional scan outputs.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init};
use crate::numerics::{pool_axis_avg, PoolAxis, Scalar};
use crate::scan::DirectionalSequences;

use super::{FeatureMap, GateKind, GateMap};

#[derive(Debug, Clone, Copy)]
pub struct PmfWeights {
    /// 3x3, `C -> 4`.
    pub local: Conv2d,
    /// 1x1 on the pooled descriptor, `C -> 4`.
    pub global: Conv2d,
}

impl PmfWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, c: usize) -> Result<Self> {
        init.scope("pmf", |init| {
            Ok(Self {
                local: Conv2d::build(init, "local", c, 4, 3, true)?,
                global: Conv2d::build(init, "global", c, 4, 1, true)?,
            })
        })
    }
}

/// Direction weights `softmax_k(M)` with `M = local(x_asg) + global(GAP(x_asg))`.
pub fn directional_gates<T: Scalar>(ctx: &Ctx<T>, x_asg: &FeatureMap, w: &PmfWeights) -> Result<GateMap> {
    let t = ctx.tape;
    let local = w.local.forward(ctx, x_asg.values)?;
    let global = w.global.forward(ctx, pool_axis_avg(t, x_asg.values, PoolAxis::Both)?)?;
    let m = t.add(local, global)?;
    Ok(GateMap {
        values: t.softmax(m, 1)?,
        kind: GateKind::Directional,
    })
}

/// `sum_k Y_k * M_k`, with each single-channel `M_k` broadcast over features.
pub fn aggregate<T: Scalar>(ctx: &Ctx<T>, gates: &GateMap, ys: &[crate::numerics::Var; 4]) -> Result<crate::numerics::Var> {
    let t = ctx.tape;
    let mut acc = None;
    for (k, &y) in ys.iter().enumerate() {
        if t.shape(y)[2..] != t.shape(gates.values)[2..] {
            return Err(Error::shape(
                "pmf",
                format!("direction {k} map {:?} vs gates {:?}", t.shape(y), t.shape(gates.values)),
            ));
        }
        let term = t.mul(y, t.slice(gates.values, 1, k, 1)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => t.add(a, term)?,
        });
    }
    Ok(acc.expect("four directions"))
}

/// Returns the mixed map and the directional gates.
pub fn pmf_forward<T: Scalar>(
    ctx: &Ctx<T>,
    x_base: &FeatureMap,
    x_asg: &FeatureMap,
    fs2d_out: &DirectionalSequences,
    w: &PmfWeights,
) -> Result<(FeatureMap, GateMap)> {
    let gates = directional_gates(ctx, x_asg, w)?;
    let out = aggregate(ctx, &gates, &fs2d_out.maps)?;
    Ok((x_base.with(out), gates))
}

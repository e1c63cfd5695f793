//! Stage-dependent refinement: dilated local convolutions with a gated
//! injection in the shallow stages, axial self-attention in the deep ones.

use crate::error::{Error, Result};
use crate::nn::{ChannelLayerNorm, Conv2d, Ctx, Init};
use crate::numerics::{multi_head_axial_attention, AttnAxis, AttnWeights, ConvParams, Scalar, Var};

use super::{check_stage, BlockConfig, FeatureMap, GateKind, GateMap};

#[derive(Debug, Clone)]
pub struct LmrWeights {
    /// Depthwise 3x3, one per dilation rate.
    pub branches: Vec<Conv2d>,
    /// `|R| C -> C`.
    pub proj: Conv2d,
    pub gate: Conv2d,
}

impl LmrWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, c: usize, dilations: &[usize]) -> Result<Self> {
        init.scope("lmr", |init| {
            let branches = dilations
                .iter()
                .map(|&r| {
                    Conv2d::build_with(init, &format!("dw{r}"), c, c, (3, 3), ConvParams::same(3, r).with_groups(c), true)
                })
                .collect::<Result<_>>()?;
            Ok(Self {
                branches,
                proj: Conv2d::build(init, "proj", dilations.len() * c, c, 1, true)?,
                gate: Conv2d::build(init, "gate", c, c, 1, true)?,
            })
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnProj {
    pub wq: Conv2d,
    pub wk: Conv2d,
    pub wv: Conv2d,
    pub wo: Conv2d,
}

impl AttnProj {
    fn build<T: Scalar>(init: &mut Init<T>, name: &str, c: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(Self {
                wq: Conv2d::build(init, "wq", c, c, 1, false)?,
                wk: Conv2d::build(init, "wk", c, c, 1, false)?,
                wv: Conv2d::build(init, "wv", c, c, 1, false)?,
                wo: Conv2d::build(init, "wo", c, c, 1, false)?,
            })
        })
    }

    fn vars<T: Scalar>(&self, ctx: &Ctx<T>) -> AttnWeights {
        AttnWeights {
            wq: ctx.p(self.wq.weight),
            wk: ctx.p(self.wk.weight),
            wv: ctx.p(self.wv.weight),
            wo: ctx.p(self.wo.weight),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GtrWeights {
    pub ln_h: ChannelLayerNorm,
    pub attn_h: AttnProj,
    pub ln_w: ChannelLayerNorm,
    pub attn_w: AttnProj,
    pub ln_ffn: ChannelLayerNorm,
    pub ffn_in: Conv2d,
    pub ffn_out: Conv2d,
    pub heads: usize,
}

impl GtrWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, c: usize, heads: usize, expansion: usize) -> Result<Self> {
        init.scope("gtr", |init| {
            Ok(Self {
                ln_h: ChannelLayerNorm::build(init, "ln_h", c)?,
                attn_h: AttnProj::build(init, "attn_h", c)?,
                ln_w: ChannelLayerNorm::build(init, "ln_w", c)?,
                attn_w: AttnProj::build(init, "attn_w", c)?,
                ln_ffn: ChannelLayerNorm::build(init, "ln_ffn", c)?,
                ffn_in: Conv2d::build(init, "ffn_in", c, expansion * c, 1, true)?,
                ffn_out: Conv2d::build(init, "ffn_out", expansion * c, c, 1, true)?,
                heads,
            })
        })
    }
}

#[derive(Debug, Clone)]
pub enum HsrWeights {
    Lmr(LmrWeights),
    Gtr(GtrWeights),
}

impl HsrWeights {
    /// LMR for stages 1-2, GTR for stages 3-4.
    pub fn build<T: Scalar>(init: &mut Init<T>, stage: usize, cfg: &BlockConfig) -> Result<Self> {
        check_stage(stage)?;
        if stage <= 2 {
            Ok(HsrWeights::Lmr(LmrWeights::build(init, cfg.channels, &cfg.dilations)?))
        } else {
            Ok(HsrWeights::Gtr(GtrWeights::build(init, cfg.channels, cfg.heads, cfg.ffn_expansion)?))
        }
    }
}

/// `out = (1 - G) x_base + G F~`, where `F~` projects the concatenated
/// dilated depthwise responses of `x_pmf` and `G = sigmoid(1x1(F~))`.
pub fn lmr_forward<T: Scalar>(
    ctx: &Ctx<T>,
    x_pmf: &FeatureMap,
    x_base: &FeatureMap,
    w: &LmrWeights,
) -> Result<(FeatureMap, GateMap)> {
    if x_pmf.stage > 2 {
        return Err(Error::Config(format!("local refinement requested at stage {}", x_pmf.stage)));
    }
    let t = ctx.tape;
    let branches = w
        .branches
        .iter()
        .map(|b| b.forward(ctx, x_pmf.values))
        .collect::<Result<Vec<Var>>>()?;
    let f_cat = t.concat(&branches, 1)?;
    let f_tilde = w.proj.forward(ctx, f_cat)?;
    let g = t.sigmoid(w.gate.forward(ctx, f_tilde)?);
    let out = t.add(t.mul(t.one_minus(g), x_base.values)?, t.mul(g, f_tilde)?)?;
    Ok((x_base.with(out), GateMap { values: g, kind: GateKind::Lmr }))
}

/// Axial transformer refinement with pre-norm residual sub-layers:
/// `X_in = x_pmf + x_base`, height attention, width attention, then the FFN.
pub fn gtr_forward<T: Scalar>(ctx: &Ctx<T>, x_pmf: &FeatureMap, x_base: &FeatureMap, w: &GtrWeights) -> Result<FeatureMap> {
    if x_pmf.stage < 3 {
        return Err(Error::Config(format!("global refinement requested at stage {}", x_pmf.stage)));
    }
    let t = ctx.tape;
    let x_in = t.add(x_pmf.values, x_base.values)?;
    let a = multi_head_axial_attention(t, w.ln_h.forward(ctx, x_in)?, AttnAxis::Height, w.heads, w.attn_h.vars(ctx))?;
    let x_h = t.add(a, x_in)?;
    let a = multi_head_axial_attention(t, w.ln_w.forward(ctx, x_h)?, AttnAxis::Width, w.heads, w.attn_w.vars(ctx))?;
    let x_w = t.add(a, x_h)?;
    let f = w.ffn_out.forward(ctx, t.gelu(w.ffn_in.forward(ctx, w.ln_ffn.forward(ctx, x_w)?)?))?;
    Ok(x_base.with(t.add(f, x_w)?))
}

pub fn hsr_forward<T: Scalar>(
    ctx: &Ctx<T>,
    x_pmf: &FeatureMap,
    x_base: &FeatureMap,
    stage: usize,
    w: &HsrWeights,
) -> Result<FeatureMap> {
    check_stage(stage)?;
    let x_pmf = FeatureMap { stage, ..*x_pmf };
    match (stage <= 2, w) {
        (true, HsrWeights::Lmr(lw)) => Ok(lmr_forward(ctx, &x_pmf, x_base, lw)?.0),
        (false, HsrWeights::Gtr(gw)) => gtr_forward(ctx, &x_pmf, x_base, gw),
        _ => Err(Error::Config(format!("refinement weights do not match stage {stage}"))),
    }
}

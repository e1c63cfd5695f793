//! Boundary-modulated fusion head.
//!
//! Each encoder stage is projected to a shared width, brought to the stage-1
//! resolution by offset-guided sampling, and recalibrated channel-wise. The
//! summed features receive a boundary-weighted injection from stage 1 before
//! the segmentation head predicts full-resolution logits.

use std::fmt;
use std::str::FromStr;

use crate::blocks::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Init};
use crate::numerics::{pool_axis_avg, PoolAxis, Scalar, Var};

/// Dropout rate before the final classifier.
pub const SEG_DROPOUT: f64 = 0.1;
/// Bound on learned sampling offsets, in input pixels.
pub const OFFSET_RANGE: f64 = 0.25;
/// Bottleneck ratio of the channel gate.
pub const GATE_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Dynamic,
    Bilinear,
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMode::Dynamic => "dynamic",
            UpsampleMode::Bilinear => "bilinear",
        })
    }
}

impl FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(UpsampleMode::Dynamic),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            _ => Err(Error::Config(format!("unknown upsample mode {s:?}"))),
        }
    }
}

/// Encoder outputs at H/4, H/8, H/16 and H/32.
#[derive(Debug, Clone, Copy)]
pub struct StageFeatures {
    pub f: [FeatureMap; 4],
}

/// Decoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryOutput {
    /// `[B,1,H/4,W/4]`, strictly inside (0, 1).
    pub m_bound: Var,
    /// `F_sum + lambda * proj(F'_1) * M_bound`, `[B,C_e,H/4,W/4]`.
    pub fused: Var,
    /// `[B,1,H,W]`.
    pub logits: Var,
    /// Aligned and recalibrated stage features `F'_s`.
    pub f_prime: [Var; 4],
    pub f_sum: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ScaleGateWeights {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

impl ScaleGateWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, c: usize) -> Result<Self> {
        let hidden = (c / GATE_RATIO).max(1);
        init.scope("scale_gate", |init| {
            Ok(Self {
                squeeze: Conv2d::build(init, "squeeze", c, hidden, 1, true)?,
                excite: Conv2d::build(init, "excite", hidden, c, 1, true)?,
            })
        })
    }
}

/// `alpha = sigmoid(W2 relu(W1 GAP(f)))`, shaped `[B,C,1,1]`.
pub fn scale_gate<T: Scalar>(ctx: &Ctx<T>, f: Var, w: &ScaleGateWeights) -> Result<Var> {
    let t = ctx.tape;
    let hidden = t.relu(w.squeeze.forward(ctx, pool_axis_avg(t, f, PoolAxis::Both)?)?);
    Ok(t.sigmoid(w.excite.forward(ctx, hidden)?))
}

#[derive(Debug, Clone, Copy)]
pub struct DynUpsampleWeights {
    /// `C -> 2 s^2` offset generator.
    pub offset: Conv2d,
    pub scale: usize,
}

impl DynUpsampleWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, c: usize, scale: usize) -> Result<Self> {
        check_scale(scale)?;
        init.scope("upsample", |init| {
            Ok(Self {
                offset: Conv2d::build(init, "offset", c, 2 * scale * scale, 1, true)?,
                scale,
            })
        })
    }
}

fn check_scale(scale: usize) -> Result<()> {
    if matches!(scale, 1 | 2 | 4 | 8) {
        Ok(())
    } else {
        Err(Error::Config(format!("upsample scale {scale} not in {{1, 2, 4, 8}}")))
    }
}

/// `[B, 2 s^2, H, W] -> [B, 2, sH, sW]`, channel `k s^2 + dy s + dx` landing
/// at output pixel `(y s + dy, x s + dx)` of component `k`.
pub fn pixel_shuffle_offsets<T: Scalar>(ctx: &Ctx<T>, raw: Var, scale: usize) -> Result<Var> {
    let t = ctx.tape;
    let s = t.shape(raw);
    let (b, h, w) = (s[0], s[2], s[3]);
    let r = t.reshape(raw, &[b, 2, scale, scale, h, w])?;
    let r = t.permute(r, &[0, 1, 4, 2, 5, 3])?;
    t.reshape(r, &[b, 2, h * scale, w * scale])
}

/// Upsample by `scale`. Dynamic mode samples bilinearly at the regular grid
/// displaced by `0.25 tanh(conv1x1(f))`; bilinear mode ignores the weights.
pub fn dyn_upsample<T: Scalar>(
    ctx: &Ctx<T>,
    f: Var,
    scale: usize,
    w: Option<&DynUpsampleWeights>,
    mode: UpsampleMode,
) -> Result<Var> {
    check_scale(scale)?;
    let t = ctx.tape;
    match (mode, w) {
        (UpsampleMode::Bilinear, _) => t.interpolate_bilinear(f, scale),
        (UpsampleMode::Dynamic, None) => Err(Error::Config("dynamic upsampling needs offset weights".into())),
        (UpsampleMode::Dynamic, Some(w)) => {
            if w.scale != scale {
                return Err(Error::Config(format!("offset weights built for scale {}, asked for {scale}", w.scale)));
            }
            let raw = t.mul_scalar(t.tanh(w.offset.forward(ctx, f)?), OFFSET_RANGE);
            let offsets = pixel_shuffle_offsets(ctx, raw, scale)?;
            t.sample_bilinear(f, scale, Some(offsets))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Stage widths `C_1..C_4`.
    pub in_channels: [usize; 4],
    /// Shared embedding width `C_e`.
    pub embed: usize,
    pub lambda: f64,
    pub upsample: UpsampleMode,
}

#[derive(Debug, Clone)]
pub struct StageHead {
    pub mlp: Conv2d,
    pub up: Option<DynUpsampleWeights>,
    pub gate: ScaleGateWeights,
    pub scale: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderWeights {
    pub cfg: DecoderConfig,
    pub stages: Vec<StageHead>,
    pub boundary_conv: Conv2d,
    pub boundary_bn: BatchNorm2d,
    pub boundary_out: Conv2d,
    pub proj: Conv2d,
    pub seg_conv: Conv2d,
    pub seg_bn: BatchNorm2d,
    pub seg_out: Conv2d,
}

impl DecoderWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, cfg: &DecoderConfig) -> Result<Self> {
        let e = cfg.embed;
        if e == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        init.scope("decoder", |init| {
            let stages = (0..4)
                .map(|s| {
                    init.scope(&format!("stage{}", s + 1), |init| {
                        let scale = 1 << s;
                        Ok(StageHead {
                            mlp: Conv2d::build(init, "mlp", cfg.in_channels[s], e, 1, true)?,
                            up: (cfg.upsample == UpsampleMode::Dynamic && scale > 1)
                                .then(|| DynUpsampleWeights::build(init, e, scale))
                                .transpose()?,
                            gate: ScaleGateWeights::build(init, e)?,
                            scale,
                        })
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Self {
                cfg: cfg.clone(),
                stages,
                boundary_conv: Conv2d::build(init, "boundary_conv", e, e, 3, false)?,
                boundary_bn: BatchNorm2d::build(init, "boundary_bn", e)?,
                boundary_out: Conv2d::build(init, "boundary_out", e, 1, 1, true)?,
                proj: Conv2d::build(init, "proj", e, e, 1, true)?,
                seg_conv: Conv2d::build(init, "seg_conv", e, e, 3, false)?,
                seg_bn: BatchNorm2d::build(init, "seg_bn", e)?,
                seg_out: Conv2d::build(init, "seg_out", e, 1, 1, true)?,
            })
        })
    }
}

/// Aligned, recalibrated feature `F'_s` for one stage.
pub fn align_stage<T: Scalar>(ctx: &Ctx<T>, f: Var, head: &StageHead, mode: UpsampleMode) -> Result<Var> {
    let z = head.mlp.forward(ctx, f)?;
    let up = if head.scale == 1 {
        z
    } else {
        dyn_upsample(ctx, z, head.scale, head.up.as_ref(), mode)?
    };
    let alpha = scale_gate(ctx, up, &head.gate)?;
    ctx.tape.mul(up, alpha)
}

/// Full decoder with balancing factor `lambda` taken from the weights' config.
pub fn bmf_forward<T: Scalar>(ctx: &Ctx<T>, stages: &StageFeatures, w: &DecoderWeights) -> Result<BoundaryOutput> {
    bmf_forward_with(ctx, stages, w, w.cfg.lambda)
}

pub fn bmf_forward_with<T: Scalar>(
    ctx: &Ctx<T>,
    stages: &StageFeatures,
    w: &DecoderWeights,
    lambda: f64,
) -> Result<BoundaryOutput> {
    let t = ctx.tape;
    let base = t.shape(stages.f[0].values);
    let (h4, w4) = (base[2], base[3]);
    for (s, fm) in stages.f.iter().enumerate() {
        let sh = t.shape(fm.values);
        let want = (h4 >> s, w4 >> s);
        if sh.len() != 4 || (sh[2] << s, sh[3] << s) != (h4, w4) || sh[1] != w.cfg.in_channels[s] {
            return Err(Error::shape(
                "bmf",
                format!("stage {} feature {sh:?}; expected {} channels at {}x{}", s + 1, w.cfg.in_channels[s], want.0, want.1),
            ));
        }
    }

    let mut f_prime = Vec::with_capacity(4);
    for (fm, head) in stages.f.iter().zip(&w.stages) {
        let fp = align_stage(ctx, fm.values, head, w.cfg.upsample)?;
        ctx.tap(format!("stage{}.f_prime", fm.stage), fp);
        f_prime.push(fp);
    }
    let mut f_sum = f_prime[0];
    for &fp in &f_prime[1..] {
        f_sum = t.add(f_sum, fp)?;
    }

    let b = w.boundary_bn.forward(ctx, w.boundary_conv.forward(ctx, f_prime[0])?)?;
    let m_bound = t.sigmoid(w.boundary_out.forward(ctx, t.relu(b))?);

    let injected = t.mul(w.proj.forward(ctx, f_prime[0])?, m_bound)?;
    let fused = t.add(f_sum, t.mul_scalar(injected, lambda))?;

    let s = w.seg_bn.forward(ctx, w.seg_conv.forward(ctx, fused)?)?;
    let s = ctx.dropout(t.relu(s), SEG_DROPOUT)?;
    let logits = t.interpolate_bilinear(w.seg_out.forward(ctx, s)?, 4)?;

    Ok(BoundaryOutput {
        m_bound,
        fused,
        logits,
        f_prime: f_prime.try_into().expect("four stages"),
        f_sum,
    })
}

#[cfg(test)]
mod tests;

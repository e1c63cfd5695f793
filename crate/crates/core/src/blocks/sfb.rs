//! One Structural Flux Block: gating, directional mixing, refinement and
//! fusion in sequence, each stage replaceable by its pass-through.

use crate::error::{Error, Result};
use crate::nn::{ChannelLayerNorm, Ctx, Init};
use crate::numerics::{Scalar, Var};
use crate::scan::{fs2d, make_route, route_scan, ScanStrategy, SsmLayer};

use super::{
    asg_forward, check_stage, hffu_forward, hsr_forward, pmf::aggregate, pmf::directional_gates, AsgWeights,
    BlockConfig, FeatureMap, GateMap, HffuWeights, HsrWeights, PmfWeights, ScanMode,
};

#[derive(Debug, Clone)]
pub struct SfbWeights {
    pub cfg: BlockConfig,
    pub stage: usize,
    pub asg: Option<AsgWeights>,
    pub pmf: Option<PmfWeights>,
    /// Channel layer norm on the scan input.
    pub scan_norm: ChannelLayerNorm,
    /// Channel layer norm on the merged scan output.
    pub out_norm: ChannelLayerNorm,
    /// Scan parameters, one per route actually used.
    pub ssm: Vec<SsmLayer>,
    pub hsr: Option<HsrWeights>,
    pub hffu: Option<HffuWeights>,
}

/// Routes scanned by a block, in the order of its [`SsmLayer`]s.
pub fn block_routes(cfg: &BlockConfig) -> Vec<ScanStrategy> {
    match (cfg.enable_pmf, cfg.scan) {
        (false, _) => vec![ScanStrategy::HRaster],
        (true, ScanMode::Fs2d) => ScanStrategy::FOUR_DIRECTIONS.to_vec(),
        (true, ScanMode::Single(s)) => vec![s],
        (true, ScanMode::Sass) => vec![ScanStrategy::ParallelSnake, ScanStrategy::DiagSnake],
    }
}

impl SfbWeights {
    pub fn build<T: Scalar>(init: &mut Init<T>, name: &str, stage: usize, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        check_stage(stage)?;
        let c = cfg.channels;
        init.scope(name, |init| {
            let asg = cfg.enable_asg.then(|| AsgWeights::build(init, c)).transpose()?;
            let gated = cfg.enable_pmf && cfg.scan == ScanMode::Fs2d;
            let pmf = gated.then(|| PmfWeights::build(init, c)).transpose()?;
            let scan_norm = ChannelLayerNorm::build(init, "scan_norm", c)?;
            let out_norm = ChannelLayerNorm::build(init, "out_norm", c)?;
            let ssm = block_routes(cfg)
                .into_iter()
                .enumerate()
                .map(|(k, s)| SsmLayer::build(init, &format!("ssm{k}_{s}"), c, cfg.state_size))
                .collect::<Result<_>>()?;
            let hsr = cfg.enable_hsr.then(|| HsrWeights::build(init, stage, cfg)).transpose()?;
            let hffu = cfg.enable_hffu.then(|| HffuWeights::build(init, c)).transpose()?;
            Ok(Self {
                cfg: cfg.clone(),
                stage,
                asg,
                pmf,
                scan_norm,
                out_norm,
                ssm,
                hsr,
                hffu,
            })
        })
    }
}

/// Every intermediate of one block, for inspection and feature dumps.
#[derive(Debug, Clone)]
pub struct SfbOutputs {
    pub x_base: FeatureMap,
    pub x_asg: FeatureMap,
    pub x_pmf: FeatureMap,
    pub x_hsr: FeatureMap,
    pub out: FeatureMap,
    pub directional_gates: Option<GateMap>,
}

/// Mean of single-route scans of `x` over `strategies`.
fn averaged_scans<T: Scalar>(ctx: &Ctx<T>, x: Var, w: &SfbWeights, strategies: &[ScanStrategy]) -> Result<Var> {
    let shape = ctx.tape.shape(x);
    let (h, wd) = (shape[2], shape[3]);
    let mut acc: Option<Var> = None;
    for (k, &s) in strategies.iter().enumerate() {
        let y = route_scan(ctx, x, &make_route(s, h, wd)?, &w.ssm[k])?;
        acc = Some(match acc {
            None => y,
            Some(a) => ctx.tape.add(a, y)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Config("block has no scan routes".into()))?;
    Ok(if strategies.len() == 1 {
        acc
    } else {
        ctx.tape.mul_scalar(acc, 1.0 / strategies.len() as f64)
    })
}

pub fn sfb_forward<T: Scalar>(ctx: &Ctx<T>, x_base: &FeatureMap, w: &SfbWeights) -> Result<SfbOutputs> {
    let t = ctx.tape;
    let shape = t.shape(x_base.values);
    if shape.len() != 4 || shape[1] != w.cfg.channels {
        return Err(Error::shape(
            "sfb",
            format!("input {shape:?} for a {}-channel block", w.cfg.channels),
        ));
    }
    let x_base = FeatureMap::new(x_base.values, w.stage);

    let x_asg = match &w.asg {
        Some(aw) => asg_forward(ctx, &x_base, aw)?.0,
        None => x_base,
    };

    let (x_pmf, gates) = match &w.pmf {
        Some(pw) => {
            let ssm: &[SsmLayer; 4] = w.ssm.as_slice().try_into().map_err(|_| Error::Config("four-direction scan needs four parameter sets".into()))?;
            let dirs = fs2d(ctx, w.scan_norm.forward(ctx, x_base.values)?, ssm)?;
            let g = directional_gates(ctx, &x_asg, pw)?;
            let merged = aggregate(ctx, &g, &dirs.maps)?;
            (x_base.with(w.out_norm.forward(ctx, merged)?), Some(g))
        }
        None => {
            let y = averaged_scans(ctx, w.scan_norm.forward(ctx, x_asg.values)?, w, &block_routes(&w.cfg))?;
            (x_base.with(w.out_norm.forward(ctx, y)?), None)
        }
    };

    let x_hsr = match &w.hsr {
        Some(hw) => hsr_forward(ctx, &x_pmf, &x_base, w.stage, hw)?,
        None => x_base.with(t.add(x_pmf.values, x_base.values)?),
    };

    let out = match &w.hffu {
        Some(fw) => hffu_forward(ctx, &x_hsr, fw)?.0,
        None => x_hsr,
    };

    Ok(SfbOutputs {
        x_base,
        x_asg,
        x_pmf,
        x_hsr,
        out,
        directional_gates: gates,
    })
}

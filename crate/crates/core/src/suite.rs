//! Finite-difference suites behind `fluxamba gradcheck --scope ...`.
//!
//! All checks run in f64. Op checks compare every input element with the
//! analytic gradient; block and model checks sample parameter coordinates
//! (see [`check_param_grads`]).

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{sfb_forward, BlockConfig, FeatureMap, ScanMode, SfbWeights};
use crate::data::{collate, generate, GenSpec};
use crate::decoder::{bmf_forward, DecoderConfig, DecoderWeights, StageFeatures, UpsampleMode};
use crate::error::{Error, Result};
use crate::loss::{boundary_loss, soft_dice, total_loss, wbce, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::nn::{check_param_grads, Ctx, Init, ParamCheck, ParamStore};
use crate::numerics::{
    batch_norm, check_op, layer_norm, multi_head_axial_attention, pool_axis_avg, strip_pool, AttnAxis, AttnWeights,
    ConvParams, GradCheckReport, NormMode, PoolAxis, RunningStats, StripOrientation, Tape, Tensor, Var,
};
use crate::scan::{deserialize, make_route, selective_scan_tape, serialize, ScanStrategy, SsmParams, SsmVars};

/// Tolerance for single ops and blocks.
pub const OP_TOL: f64 = 1e-6;
/// Tolerance for the assembled model.
pub const MODEL_TOL: f64 = 1e-5;
/// Side of the model-scope input.
pub const MODEL_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    Model,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Blocks => "blocks",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!("unknown gradcheck scope {s:?} (ops, blocks, model)"))),
        }
    }
}

pub fn run_scope(scope: Scope) -> Result<Vec<GradCheckReport>> {
    match scope {
        Scope::Ops => op_suite(20),
        Scope::Blocks => block_suite(),
        Scope::Model => model_suite(),
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

type Build = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

/// Worst case of one op over `instances` random inputs.
fn over_instances(name: &str, shapes: &[&[usize]], instances: u64, build: Build) -> Result<GradCheckReport> {
    let mut worst: Option<GradCheckReport> = None;
    let mut checked = 0;
    for seed in 0..instances {
        let inputs: Vec<_> = shapes.iter().enumerate().map(|(i, s)| rand_t(s, 1000 * seed + i as u64)).collect();
        let r = check_op(name, &inputs, OP_TOL, seed, &build)?;
        checked += r.checked;
        if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err) {
            worst = Some(r);
        }
    }
    let mut r = worst.ok_or_else(|| Error::Config("op suite needs at least one instance".into()))?;
    r.checked = checked;
    Ok(r)
}

/// Every differentiable tape op over `instances` random inputs each.
pub fn op_suite(instances: u64) -> Result<Vec<GradCheckReport>> {
    let cases: Vec<(&str, Vec<&[usize]>, Build)> = vec![
        ("sigmoid", vec![&[3, 4]], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("softplus", vec![&[3, 4]], Box::new(|t, v| Ok(t.softplus(v[0])))),
        ("relu", vec![&[3, 4]], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("gelu", vec![&[3, 4]], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("tanh", vec![&[3, 4]], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("exp", vec![&[3, 4]], Box::new(|t, v| Ok(t.exp(v[0])))),
        ("ln", vec![&[3, 4]], Box::new(|t, v| Ok(t.ln(t.add_scalar(t.square(v[0]), 0.5))))),
        ("powf", vec![&[3, 4]], Box::new(|t, v| Ok(t.powf(t.add_scalar(t.square(v[0]), 0.5), -0.5)))),
        ("clamp", vec![&[3, 4]], Box::new(|t, v| Ok(t.clamp(v[0], -0.5, 0.5)))),
        (
            "scalar ops",
            vec![&[3, 4]],
            Box::new(|t, v| Ok(t.one_minus(t.neg(t.mul_scalar(t.add_scalar(v[0], 0.2), 3.0))))),
        ),
        ("add", vec![&[2, 3, 4], &[1, 3, 1]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![&[2, 3, 4], &[2, 1, 4]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![&[2, 3, 4], &[1, 1, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        (
            "div",
            vec![&[2, 3, 4], &[2, 3, 1]],
            Box::new(|t, v| t.div(v[0], t.add_scalar(t.square(v[1]), 0.5))),
        ),
        ("sum/mean", vec![&[2, 3]], Box::new(|t, v| t.add(t.sum(v[0]), t.mean(t.square(v[0]))))),
        ("mean_axes", vec![&[2, 3, 4, 5]], Box::new(|t, v| t.mean_axes(v[0], &[0, 2]))),
        ("sum_to", vec![&[2, 3, 4]], Box::new(|t, v| t.sum_to(v[0], &[1, 3, 1]))),
        ("expand", vec![&[2, 1, 4]], Box::new(|t, v| t.expand(v[0], &[2, 3, 4]))),
        ("permute", vec![&[2, 3, 4]], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        ("reshape", vec![&[2, 3, 4]], Box::new(|t, v| t.reshape(v[0], &[6, 4]))),
        ("concat", vec![&[2, 3, 4], &[2, 1, 4]], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice", vec![&[2, 5, 3]], Box::new(|t, v| t.slice(v[0], 1, 1, 3))),
        ("gather_last", vec![&[2, 4]], Box::new(|t, v| t.gather_last(v[0], &[3, 0, 0, 2, 1]))),
        ("bmm", vec![&[2, 3, 4], &[2, 4, 5]], Box::new(|t, v| t.bmm(v[0], v[1]))),
        ("softmax", vec![&[3, 4, 2]], Box::new(|t, v| t.softmax(v[0], 1))),
        (
            "conv",
            vec![&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvParams::new(1, 1, 1, 1))),
        ),
        (
            "conv strided",
            vec![&[1, 2, 6, 6], &[3, 2, 3, 3]],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, ConvParams::new(2, 1, 1, 1))),
        ),
        (
            "conv dilated depthwise",
            vec![&[1, 3, 6, 6], &[3, 1, 3, 3]],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, ConvParams::same(3, 2).with_groups(3))),
        ),
        (
            "layer_norm",
            vec![&[2, 4, 2, 3], &[4], &[4]],
            Box::new(|t, v| layer_norm(t, v[0], &[1], v[1], v[2], 1e-5)),
        ),
        (
            "batch_norm",
            vec![&[2, 3, 2, 2], &[3], &[3]],
            Box::new(|t, v| Ok(batch_norm(t, v[0], v[1], v[2], &RunningStats::new(3), NormMode::Train, 0.1, 1e-5)?.0)),
        ),
        ("pool_axis_avg", vec![&[2, 2, 3, 4]], Box::new(|t, v| pool_axis_avg(t, v[0], PoolAxis::Height))),
        (
            "strip_pool",
            vec![&[1, 2, 4, 5], &[2, 2, 1, 3], &[2]],
            Box::new(|t, v| strip_pool(t, v[0], StripOrientation::Vertical, v[1], Some(v[2]))),
        ),
        (
            "axial attention",
            vec![&[1, 4, 3, 2], &[4, 4, 1, 1], &[4, 4, 1, 1], &[4, 4, 1, 1], &[4, 4, 1, 1]],
            Box::new(|t, v| {
                let w = AttnWeights {
                    wq: v[1],
                    wk: v[2],
                    wv: v[3],
                    wo: v[4],
                };
                let y = multi_head_axial_attention(t, v[0], AttnAxis::Height, 2, w)?;
                multi_head_axial_attention(t, y, AttnAxis::Width, 2, w)
            }),
        ),
        ("bilinear", vec![&[1, 2, 3, 3]], Box::new(|t, v| t.interpolate_bilinear(v[0], 2))),
        // Small offsets keep every sample away from the clamped border.
        (
            "dynamic sampling",
            vec![&[1, 2, 3, 3], &[1, 2, 6, 6]],
            Box::new(|t, v| {
                let off = t.mul_scalar(t.tanh(v[1]), 0.2);
                t.sample_bilinear(v[0], 2, Some(off))
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, shapes, build)| over_instances(name, &shapes, instances, build))
        .collect()
}

fn scan_inputs(c: usize, n: usize, l: usize, seed: u64) -> Vec<Tensor<f64>> {
    let p = SsmParams::<f64>::init(c, n, &mut ChaCha8Rng::seed_from_u64(seed));
    let a_log = p.a_log.zip_map(&rand_t(&[c, n], seed + 1), |a, r| a + 0.3 * r).expect("same shape");
    vec![
        rand_t(&[1, c, l], seed + 2),
        p.w_delta.reshape(&[c, c, 1, 1]).expect("square"),
        rand_t(&[c], seed + 3),
        p.w_b.reshape(&[n, c, 1, 1]).expect("projection"),
        p.w_c.reshape(&[n, c, 1, 1]).expect("projection"),
        a_log,
        rand_t(&[c], seed + 4),
    ]
}

fn ssm_vars(v: &[Var]) -> SsmVars {
    SsmVars {
        w_delta: v[1],
        b_delta: v[2],
        w_b: v[3],
        w_c: v[4],
        a_log: v[5],
        d: v[6],
    }
}

/// Parameters drawn away from their structured initial values so that every
/// gradient path carries signal.
fn randomize_biases(store: &mut ParamStore<f64>, seed: u64) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        if store.entry(id).name.ends_with("bias") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, rand_t(&shape, seed + k as u64).map(|v| 0.3 * v))?;
        }
    }
    Ok(())
}

fn sfb_check(name: &str, cfg: &BlockConfig, stage: usize, seed: u64, train: bool) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let w = SfbWeights::build(&mut Init::new(&mut store, seed), "sfb", stage, cfg)?;
    randomize_biases(&mut store, seed + 500)?;
    let x = rand_t(&[2, cfg.channels, 6, 6], seed + 1);
    let opts = ParamCheck {
        per_tensor: 3,
        seed,
        train,
        tol: OP_TOL,
        ..ParamCheck::default()
    };
    check_param_grads(name, &store, opts, |ctx| {
        Ok(sfb_forward(ctx, &FeatureMap::new(ctx.tape.constant(x.clone()), stage), &w)?.out.values)
    })
}

fn decoder_check(mode: UpsampleMode, train: bool, seed: u64) -> Result<GradCheckReport> {
    let cfg = DecoderConfig {
        in_channels: [2, 3, 4, 5],
        embed: 4,
        lambda: 0.5,
        upsample: mode,
    };
    let mut store = ParamStore::new();
    let w = DecoderWeights::build(&mut Init::new(&mut store, seed), &cfg)?;
    randomize_biases(&mut store, seed + 100)?;
    let feats: Vec<Tensor<f64>> = (0..4).map(|s| rand_t(&[2, cfg.in_channels[s], 8 >> s, 8 >> s], seed + s as u64)).collect();
    let opts = ParamCheck {
        per_tensor: 3,
        seed,
        train,
        tol: OP_TOL,
        ..ParamCheck::default()
    };
    let name = format!("decoder {mode}{}", if train { " train" } else { "" });
    check_param_grads(&name, &store, opts, |ctx| {
        let f: Vec<FeatureMap> = feats.iter().enumerate().map(|(s, t)| FeatureMap::new(ctx.tape.constant(t.clone()), s + 1)).collect();
        let stages = StageFeatures {
            f: f.try_into().expect("four stages"),
        };
        Ok(bmf_forward(ctx, &stages, &w)?.logits)
    })
}

/// Scan, block, decoder and loss checks.
pub fn block_suite() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    out.push(over_instances(
        "selective_scan",
        &[&[1, 3, 6], &[3, 3, 1, 1], &[3], &[4, 3, 1, 1], &[4, 3, 1, 1], &[3, 4], &[3]],
        1,
        Box::new(|t, v| selective_scan_tape(t, v[0], &ssm_vars(v))),
    )?);
    for (k, s) in ScanStrategy::ALL.into_iter().enumerate() {
        let mut inputs = scan_inputs(2, 3, 12, 100 + k as u64);
        inputs[0] = rand_t(&[1, 2, 3, 4], 200 + k as u64);
        let route = make_route(s, 3, 4)?;
        out.push(check_op(&format!("scan route {s}"), &inputs, OP_TOL, k as u64, |t, v| {
            let seq = serialize(t, v[0], &route)?;
            deserialize(t, selective_scan_tape(t, seq, &ssm_vars(v))?, &route)
        })?);
    }
    let sass = BlockConfig {
        scan: ScanMode::Sass,
        ..BlockConfig::new(4)
    };
    out.push(sfb_check("sfb stage1", &BlockConfig::new(4), 1, 11, false)?);
    out.push(sfb_check("sfb stage3", &BlockConfig::new(4), 3, 13, false)?);
    out.push(sfb_check("sfb toggles off", &BlockConfig::new(4).with_toggles([false; 4]), 2, 17, false)?);
    out.push(sfb_check("sfb sass", &sass, 2, 19, false)?);
    for (mode, train) in [(UpsampleMode::Dynamic, false), (UpsampleMode::Dynamic, true), (UpsampleMode::Bilinear, true)] {
        out.push(decoder_check(mode, train, 60)?);
    }
    let y = rand_t(&[2, 1, 8, 8], 300).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let logits = rand_t(&[2, 1, 8, 8], 301);
    out.push(check_op("wbce", std::slice::from_ref(&logits), OP_TOL, 0, |t, v| wbce(t, t.sigmoid(v[0]), &y, 5.0))?);
    out.push(check_op("soft dice", &[logits], OP_TOL, 1, |t, v| soft_dice(t, t.sigmoid(v[0]), &y, 1.0))?);
    out.push(check_op("boundary loss", &[rand_t(&[2, 1, 2, 2], 302)], OP_TOL, 2, |t, v| {
        boundary_loss(t, t.sigmoid(v[0]), &y)
    })?);
    Ok(out)
}

/// Micro model on two synthetic 32x32 images: logits in eval and training
/// mode, and the full training loss.
pub fn model_suite() -> Result<Vec<GradCheckReport>> {
    let samples = generate(&GenSpec {
        count: 2,
        size: MODEL_SIZE,
        ..GenSpec::default()
    })?;
    let refs: Vec<_> = samples.iter().collect();
    let (x, y) = collate::<f64>(&refs)?;
    let m = Model::<f64>::build(&ModelConfig::micro())?;
    let opts = |train| ParamCheck {
        per_tensor: 2,
        tol: MODEL_TOL,
        train,
        ..ParamCheck::default()
    };
    let logits = |ctx: &Ctx<f64>| Ok(m.forward(ctx, ctx.tape.constant(x.clone()))?.logits);
    let weights = LossWeights::default();
    Ok(vec![
        check_param_grads("model eval logits", &m.store, opts(false), logits)?,
        check_param_grads("model train logits", &m.store, opts(true), logits)?,
        check_param_grads("model train loss", &m.store, opts(true), |ctx| {
            let out = m.forward(ctx, ctx.tape.constant(x.clone()))?;
            Ok(total_loss(ctx.tape, &out, &y, &weights)?.total)
        })?,
    ])
}

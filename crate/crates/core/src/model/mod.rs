//! Full network: strided stem, four stages of stacked flux blocks joined by
//! strided downsamplers, and the boundary-modulated fusion head.

mod checkpoint;
mod cost;
mod eval;
mod train;

use std::fmt;
use std::str::FromStr;

use crate::blocks::{sfb_forward, BlockConfig, FeatureMap, ScanMode, SfbWeights};
use crate::decoder::{bmf_forward, BoundaryOutput, DecoderConfig, DecoderWeights, StageFeatures, UpsampleMode};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Init, ParamStore};
use crate::numerics::{ConvParams, Scalar, Tape, Tensor, Var};
use crate::scan::DEFAULT_STATE_SIZE;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_tensor_file, write_tensor_file, RawTensor, TensorFile, FORMAT_VERSION, MAGIC};
pub use cost::CostReport;
pub use eval::{evaluate, predict_probabilities, reflect_pad, robustness, EvalOptions};
pub use train::{train_loop, LogEntry, TrainConfig, TrainReport};

/// Total downsampling factor between input and the deepest stage.
pub const INPUT_MULTIPLE: usize = 32;

/// Named architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Desk-scale test model: channels `[4, 8, 16, 32]`, one block per stage.
    Micro,
    Tiny,
    Small,
    Base,
    Large,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Micro, Variant::Tiny, Variant::Small, Variant::Base, Variant::Large];

    pub fn depths(self) -> [usize; 4] {
        match self {
            Variant::Micro => [1, 1, 1, 1],
            Variant::Tiny => [1, 1, 2, 1],
            Variant::Small => [2, 2, 3, 2],
            Variant::Base => [2, 2, 4, 2],
            Variant::Large => [2, 3, 6, 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Micro => "micro",
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Large => "large",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "micro" => Ok(Variant::Micro),
            "tiny" | "t" => Ok(Variant::Tiny),
            "small" | "s" => Ok(Variant::Small),
            "base" | "b" => Ok(Variant::Base),
            "large" | "l" => Ok(Variant::Large),
            _ => Err(Error::Config(format!("unknown variant {s:?} (micro, tiny, small, base, large)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depths: [usize; 4],
    pub channels: [usize; 4],
    /// Input image channels (1 grayscale or 3).
    pub in_channels: usize,
    /// Block toggles `(ASG, PMF, HSR, HFFU)`.
    pub toggles: [bool; 4],
    pub scan: ScanMode,
    pub dilations: Vec<usize>,
    pub heads: usize,
    pub state_size: usize,
    pub ffn_expansion: usize,
    /// Shared decoder width `C_e`.
    pub embed: usize,
    pub lambda: f64,
    pub upsample: UpsampleMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        let (channels, embed) = match v {
            Variant::Micro => ([4, 8, 16, 32], 16),
            _ => ([32, 64, 128, 256], 64),
        };
        Self {
            depths: v.depths(),
            channels,
            in_channels: 1,
            toggles: [true; 4],
            scan: ScanMode::Fs2d,
            dilations: vec![1, 2, 3],
            heads: 4,
            state_size: DEFAULT_STATE_SIZE,
            ffn_expansion: 2,
            embed,
            lambda: 1.0,
            upsample: UpsampleMode::Dynamic,
            seed: 42,
        }
    }

    pub fn micro() -> Self {
        Self::variant(Variant::Micro)
    }

    pub fn with_toggles(mut self, toggles: [bool; 4]) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Block configuration for one stage (1-based).
    pub fn block_config(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            dilations: self.dilations.clone(),
            heads: self.heads,
            state_size: self.state_size,
            scan: self.scan,
            ffn_expansion: self.ffn_expansion,
            ..BlockConfig::new(self.channels[stage - 1])
        }
        .with_toggles(self.toggles)
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            in_channels: self.channels,
            embed: self.embed,
            lambda: self.lambda,
            upsample: self.upsample,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.contains(&0) {
            return Err(Error::Config(format!("stage depths must be positive, got {:?}", self.depths)));
        }
        if self.channels.contains(&0) || self.in_channels == 0 || self.embed == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        for s in 1..=4 {
            self.block_config(s).validate()?;
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let [asg, pmf, hsr, hffu] = self.toggles;
        format!(
            "depths={}\nchannels={}\nin_channels={}\nasg={asg}\npmf={pmf}\nhsr={hsr}\nhffu={hffu}\nscan={}\ndilations={}\nheads={}\nstate_size={}\nffn_expansion={}\nembed={}\nlambda={}\nupsample={}\nseed={}\n",
            list(&self.depths),
            list(&self.channels),
            self.in_channels,
            self.scan,
            list(&self.dilations),
            self.heads,
            self.state_size,
            self.ffn_expansion,
            self.embed,
            self.lambda,
            self.upsample,
            self.seed,
        )
    }

    /// Parse [`ModelConfig::to_kv`] output. Missing keys keep the Micro
    /// defaults; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::micro();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| Error::Config(format!("config key {k}: {what} {v:?}"));
            let list = || -> Result<Vec<usize>> { v.split(',').map(|x| x.trim().parse().map_err(|_| bad("bad list"))).collect() };
            let four = || -> Result<[usize; 4]> { list()?.try_into().map_err(|_| bad("expected four values")) };
            let num = || -> Result<usize> { v.parse().map_err(|_| bad("bad integer")) };
            let flag = || -> Result<bool> { v.parse().map_err(|_| bad("bad boolean")) };
            match k {
                "depths" => cfg.depths = four()?,
                "channels" => cfg.channels = four()?,
                "in_channels" => cfg.in_channels = num()?,
                "asg" => cfg.toggles[0] = flag()?,
                "pmf" => cfg.toggles[1] = flag()?,
                "hsr" => cfg.toggles[2] = flag()?,
                "hffu" => cfg.toggles[3] = flag()?,
                "scan" => cfg.scan = v.parse()?,
                "dilations" => cfg.dilations = list()?,
                "heads" => cfg.heads = num()?,
                "state_size" => cfg.state_size = num()?,
                "ffn_expansion" => cfg.ffn_expansion = num()?,
                "embed" => cfg.embed = num()?,
                "lambda" => cfg.lambda = v.parse().map_err(|_| bad("bad number"))?,
                "upsample" => cfg.upsample = v.parse()?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("bad integer"))?,
                _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        Ok(cfg)
    }
}

/// Handles into the parameter store for every layer.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub stem_conv1: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub stem_conv2: Conv2d,
    /// Stage `s -> s+1` downsamplers.
    pub down: Vec<Conv2d>,
    pub stages: Vec<Vec<SfbWeights>>,
    pub decoder: DecoderWeights,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub weights: ModelWeights,
}

fn strided(k: usize) -> ConvParams {
    ConvParams::new(2, k / 2, 1, 1)
}

impl<T: Scalar> Model<T> {
    /// Deterministic construction from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, cfg.seed);
        let c = cfg.channels;
        let (stem_conv1, stem_bn, stem_conv2) = init.scope("stem", |init| {
            Ok((
                Conv2d::build_with(init, "conv1", cfg.in_channels, c[0], (3, 3), strided(3), false)?,
                BatchNorm2d::build(init, "bn", c[0])?,
                Conv2d::build_with(init, "conv2", c[0], c[0], (3, 3), strided(3), true)?,
            ))
        })?;
        let mut stages = Vec::with_capacity(4);
        let mut down = Vec::with_capacity(3);
        for s in 1..=4 {
            let bc = cfg.block_config(s);
            let blocks = init.scope(&format!("stage{s}"), |init| {
                (0..cfg.depths[s - 1]).map(|k| SfbWeights::build(init, &format!("block{k}"), s, &bc)).collect::<Result<Vec<_>>>()
            })?;
            stages.push(blocks);
            if s < 4 {
                down.push(Conv2d::build_with(&mut init, &format!("down{s}"), c[s - 1], c[s], (3, 3), strided(3), true)?);
            }
        }
        let decoder = DecoderWeights::build(&mut init, &cfg.decoder_config())?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            weights: ModelWeights {
                stem_conv1,
                stem_bn,
                stem_conv2,
                down,
                stages,
                decoder,
            },
        })
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            weights: self.weights.clone(),
        }
    }

    /// Input checks: `[B, in_channels, H, W]` with `H`, `W` multiples of 32.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::shape(
                "model",
                format!("input {shape:?}, expected [B,{},H,W]", self.cfg.in_channels),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            let up = |n: usize| n.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
            return Err(Error::Config(format!(
                "input {h}x{w} is not a multiple of {INPUT_MULTIPLE}; pad to {}x{} (add {} rows, {} columns)",
                up(h),
                up(w),
                up(h) - h,
                up(w) - w
            )));
        }
        Ok(())
    }

    /// Encoder features at H/4 .. H/32. Records six taps per stage when the
    /// context collects them (five here, the aligned decoder feature later).
    pub fn encode(&self, ctx: &Ctx<T>, x: Var) -> Result<StageFeatures> {
        self.check_input(&ctx.tape.shape(x))?;
        let t = ctx.tape;
        let w = &self.weights;
        let h = t.relu(w.stem_bn.forward(ctx, w.stem_conv1.forward(ctx, x)?)?);
        let mut cur = w.stem_conv2.forward(ctx, h)?;
        let mut feats = Vec::with_capacity(4);
        for (s, blocks) in w.stages.iter().enumerate() {
            if s > 0 {
                cur = w.down[s - 1].forward(ctx, cur)?;
            }
            let mut last = None;
            for b in blocks {
                let o = sfb_forward(ctx, &FeatureMap::new(cur, s + 1), b)?;
                cur = o.out.values;
                last = Some(o);
            }
            if let Some(o) = last {
                let p = format!("stage{}", s + 1);
                ctx.tap(format!("{p}.x_base"), o.x_base.values);
                ctx.tap(format!("{p}.x_asg"), o.x_asg.values);
                ctx.tap(format!("{p}.x_pmf"), o.x_pmf.values);
                ctx.tap(format!("{p}.x_hsr"), o.x_hsr.values);
                ctx.tap(format!("{p}.x_hffu"), o.out.values);
            }
            feats.push(FeatureMap::new(cur, s + 1));
        }
        Ok(StageFeatures {
            f: feats.try_into().expect("four stages"),
        })
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: Var) -> Result<BoundaryOutput> {
        let stages = self.encode(ctx, x)?;
        bmf_forward(ctx, &stages, &self.weights.decoder)
    }

    /// Eval-mode logits for a `[B, C, H, W]` batch, without a gradient tape.
    pub fn infer_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &self.store, false);
        let out = self.forward(&ctx, tape.constant(x.clone()))?;
        let logits = tape.tensor(out.logits);
        logits.check_finite("model logits")?;
        Ok(logits)
    }

    /// Trainable scalar count.
    pub fn count_params(&self) -> usize {
        self.store.trainable_count()
    }
}

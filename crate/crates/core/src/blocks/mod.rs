//! The Structural Flux Block and its sub-modules.

pub mod asg;
pub mod hffu;
pub mod hsr;
pub mod pmf;
pub mod sfb;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Var};
use crate::scan::{ScanStrategy, DEFAULT_STATE_SIZE};

pub use asg::{asg_forward, AsgWeights};
pub use hffu::{hffu_forward, HffuWeights};
pub use hsr::{gtr_forward, hsr_forward, lmr_forward, GtrWeights, HsrWeights, LmrWeights};
pub use pmf::{pmf_forward, PmfWeights};
pub use sfb::{sfb_forward, SfbOutputs, SfbWeights};

/// A `[B,C,H,W]` value on a tape, tagged with its encoder stage (1..=4).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub values: Var,
    pub stage: usize,
}

impl FeatureMap {
    pub fn new(values: Var, stage: usize) -> Self {
        Self { values, stage }
    }

    pub fn with(self, values: Var) -> Self {
        Self { values, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Asg,
    Lmr,
    Channel,
    Spatial,
    /// The four per-pixel direction weights of the PMF, summing to one.
    Directional,
}

/// Gate values in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateMap {
    pub values: Var,
    pub kind: GateKind,
}

impl GateMap {
    /// True when every entry lies in `[0, 1]` and, for directional gates,
    /// the four entries at every pixel sum to one within `tol`.
    pub fn is_valid<T: Scalar>(&self, tape: &Tape<T>, tol: f64) -> bool {
        let v = tape.value(self.values);
        if !v.data().iter().all(|&g| g >= T::zero() && g <= T::one()) {
            return false;
        }
        if self.kind != GateKind::Directional {
            return true;
        }
        let s = v.shape();
        let (b, k, plane) = (s[0], s[1], s[2] * s[3]);
        (0..b).all(|bi| {
            (0..plane).all(|p| {
                let sum: f64 = (0..k).map(|kk| v.data()[(bi * k + kk) * plane + p].as_f64()).sum();
                (sum - 1.0).abs() <= tol
            })
        })
    }
}

/// Which scan realizes the block's directional mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    /// Four directions combined by the learned per-pixel gates.
    Fs2d,
    /// One route; its output replaces the gated aggregation.
    Single(ScanStrategy),
    /// Parallel snake and diagonal snake scans, averaged uniformly.
    Sass,
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScanMode::Fs2d => f.write_str("fs2d"),
            ScanMode::Sass => f.write_str("sass"),
            ScanMode::Single(s) => write!(f, "{s}"),
        }
    }
}

impl FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fs2d" => Ok(ScanMode::Fs2d),
            "sass" => Ok(ScanMode::Sass),
            other => other.parse().map(ScanMode::Single),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub enable_asg: bool,
    pub enable_pmf: bool,
    pub enable_hsr: bool,
    pub enable_hffu: bool,
    /// Dilation rates of the local branch.
    pub dilations: Vec<usize>,
    pub heads: usize,
    pub state_size: usize,
    pub channels: usize,
    pub scan: ScanMode,
    pub ffn_expansion: usize,
}

impl BlockConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            enable_asg: true,
            enable_pmf: true,
            enable_hsr: true,
            enable_hffu: true,
            dilations: vec![1, 2, 3],
            heads: 4,
            state_size: DEFAULT_STATE_SIZE,
            channels,
            scan: ScanMode::Fs2d,
            ffn_expansion: 2,
        }
    }

    /// Toggles in the order (ASG, PMF, HSR, HFFU).
    pub fn with_toggles(mut self, toggles: [bool; 4]) -> Self {
        [self.enable_asg, self.enable_pmf, self.enable_hsr, self.enable_hffu] = toggles;
        self
    }

    pub fn toggles(&self) -> [bool; 4] {
        [self.enable_asg, self.enable_pmf, self.enable_hsr, self.enable_hffu]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.state_size == 0 {
            return Err(Error::Config("block channels and state size must be positive".into()));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config(format!("invalid dilation set {:?}", self.dilations)));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} attention heads do not divide {} channels",
                self.heads, self.channels
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("ffn expansion must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_stage(stage: usize) -> Result<()> {
    if (1..=4).contains(&stage) {
        Ok(())
    } else {
        Err(Error::Config(format!("stage {stage} outside 1..=4")))
    }
}

#[cfg(test)]
mod tests;

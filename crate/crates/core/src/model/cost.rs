//! Parameter, FLOP and serialized-size accounting.
//!
//! FLOPs count two per multiply-accumulate: convolutions
//! `2 K_h K_w (C_in/g) C_out H' W'`, batched matmuls (attention scores and
//! mixing) `2 n p q r`, and the selective scan `6 B C L N` (discretization,
//! state update and readout). Elementwise work is not counted.

use std::fmt;

use super::Model;
use crate::error::Result;
use crate::nn::Ctx;
use crate::numerics::{Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub params: usize,
    pub flops: u64,
    pub size_bytes: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "params     {} ({:.3} M)", self.params, self.params as f64 / 1e6)?;
        writeln!(f, "flops      {} ({:.3} G) at {}x{}", self.flops, self.flops as f64 / 1e9, self.height, self.width)?;
        write!(f, "size       {} bytes ({:.3} MB)", self.size_bytes, self.size_bytes as f64 / 1e6)
    }
}

impl<T: Scalar> Model<T> {
    /// FLOPs of one eval-mode forward pass on a single `H x W` image.
    pub fn count_flops(&self, h: usize, w: usize) -> Result<u64> {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &self.store, false);
        let x = tape.constant(Tensor::zeros(&[1, self.cfg.in_channels, h, w]));
        self.forward(&ctx, x)?;
        Ok(tape.flops())
    }

    pub fn cost(&self, h: usize, w: usize) -> Result<CostReport> {
        Ok(CostReport {
            params: self.count_params(),
            flops: self.count_flops(h, w)?,
            size_bytes: self.to_tensor_file().encoded_len(),
            height: h,
            width: w,
        })
    }
}

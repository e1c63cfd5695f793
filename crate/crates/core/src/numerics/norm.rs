//! Layer and batch normalization, built from differentiable primitives.

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Training or inference behaviour for stateful layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics carried by a batch-norm layer between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

fn affine_shape(x_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    x_shape
        .iter()
        .enumerate()
        .map(|(i, &n)| if axes.contains(&i) { n } else { 1 })
        .collect()
}

/// Normalize over `axes` then apply `gamma`/`beta`, whose shape is the
/// extents of the normalized axes (e.g. `[C]` for `axes = [1]`).
pub fn layer_norm<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    axes: &[usize],
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    let shape = tape.shape(x);
    let extent: Vec<usize> = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(0)).collect();
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if tape.shape(v) != extent {
            return Err(Error::shape(
                "layer_norm",
                format!("{name} {:?} vs normalized extent {extent:?}", tape.shape(v)),
            ));
        }
    }
    let affine = affine_shape(&shape, axes);
    let mu = tape.mean_axes(x, axes)?;
    let xc = tape.sub(x, mu)?;
    let sq = tape.square(xc);
    let var = tape.mean_axes(sq, axes)?;
    let inv = tape.powf(tape.add_scalar(var, eps), -0.5);
    let xhat = tape.mul(xc, inv)?;
    let g = tape.reshape(gamma, &affine)?;
    let b = tape.reshape(beta, &affine)?;
    tape.add(tape.mul(xhat, g)?, b)
}

/// Batch normalization over `[B,C,H,W]` per channel.
///
/// In `Train` mode the batch statistics normalize the input and the updated
/// running statistics `r <- (1-m) r + m * batch_stat` are returned (the
/// variance update uses the unbiased batch variance). `Eval` uses `running`
/// only and returns `None`.
pub fn batch_norm<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &RunningStats<T>,
    mode: NormMode,
    momentum: f64,
    eps: f64,
) -> Result<(Var, Option<RunningStats<T>>)> {
    let (b, c, h, w) = super::tensor::dims4(&tape.shape(x), "batch_norm")?;
    let affine = [1, c, 1, 1];
    let g = tape.reshape(gamma, &affine)?;
    let bt = tape.reshape(beta, &affine)?;
    match mode {
        NormMode::Train => {
            if b < 2 {
                return Err(Error::Config(format!(
                    "batch norm in training mode needs a batch of at least 2 (got {b})"
                )));
            }
            let mu = tape.mean_axes(x, &[0, 2, 3])?;
            let xc = tape.sub(x, mu)?;
            let var = tape.mean_axes(tape.square(xc), &[0, 2, 3])?;
            let inv = tape.powf(tape.add_scalar(var, eps), -0.5);
            let y = tape.add(tape.mul(tape.mul(xc, inv)?, g)?, bt)?;

            let n = (b * h * w) as f64;
            let m: T = super::tensor::s(momentum);
            let keep = T::one() - m;
            let bessel: T = super::tensor::s(n / (n - 1.0).max(1.0));
            let (mu_v, var_v) = (tape.value(mu), tape.value(var));
            let mean = running
                .mean
                .zip_map(&Tensor::new(&[c], mu_v.data().to_vec())?, |r, s| keep * r + m * s)?;
            let var = running
                .var
                .zip_map(&Tensor::new(&[c], var_v.data().to_vec())?, |r, s| keep * r + m * s * bessel)?;
            Ok((y, Some(RunningStats { mean, var })))
        }
        NormMode::Eval => {
            let rm = tape.constant(running.mean.clone().reshape(&affine)?);
            let inv = running.var.map(|v| (v + super::tensor::s(eps)).sqrt().recip());
            let inv = tape.constant(inv.reshape(&affine)?);
            let xhat = tape.mul(tape.sub(x, rm)?, inv)?;
            Ok((tape.add(tape.mul(xhat, g)?, bt)?, None))
        }
    }
}

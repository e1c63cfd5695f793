//! Inference on arbitrary-size images and dataset evaluation.

use super::{Model, INPUT_MULTIPLE};
use crate::data::{add_gaussian_noise, Sample};
use crate::error::{Error, Result};
use crate::metrics::{robustness_sweep, EvalReport, RobustnessReport};
use crate::numerics::{sigmoid_scalar, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Images per forward pass.
    pub batch: usize,
    /// Noise for image `i` is drawn with seed `noise_seed + i`.
    pub noise_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch: 8, noise_seed: 42 }
    }
}

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Pad `[C, H, W]` at the bottom and right by reflection (edge not repeated)
/// up to multiples of `multiple`. Returns the padded tensor and the amounts.
pub fn reflect_pad(t: &Tensor<f64>, multiple: usize) -> Result<(Tensor<f64>, (usize, usize))> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::shape("reflect_pad", format!("expected [C,H,W], got {:?}", t.shape())));
    };
    if h == 0 || w == 0 || multiple == 0 {
        return Err(Error::Data("cannot pad an empty image".into()));
    }
    let (oh, ow) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    let d = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for k in 0..c {
        for i in 0..oh {
            let si = mirror(i, h);
            for j in 0..ow {
                out.push(d[k * h * w + si * w + mirror(j, w)]);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, (oh - h, ow - w)))
}

fn crop(t: &Tensor<f64>, h: usize, w: usize) -> Result<Tensor<f64>> {
    let &[c, _, ow] = t.shape() else { unreachable!("rank checked by caller") };
    let d = t.data();
    let oh = t.shape()[1];
    let mut out = Vec::with_capacity(c * h * w);
    for k in 0..c {
        for i in 0..h {
            out.extend_from_slice(&d[k * oh * ow + i * ow..k * oh * ow + i * ow + w]);
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Foreground probabilities `[1, H, W]` for each `[C, H, W]` image. Sizes that
/// are not multiples of 32 are reflect-padded and cropped back.
pub fn predict_probabilities<T: Scalar>(model: &Model<T>, images: &[&Tensor<f64>], batch: usize) -> Result<Vec<Tensor<f64>>> {
    let batch = batch.max(1);
    let mut out = Vec::with_capacity(images.len());
    let mut start = 0;
    while start < images.len() {
        let shape = images[start].shape().to_vec();
        let mut end = start + 1;
        while end < images.len() && end - start < batch && images[end].shape() == shape.as_slice() {
            end += 1;
        }
        let &[c, h, w] = shape.as_slice() else {
            return Err(Error::shape("predict", format!("expected [C,H,W], got {shape:?}")));
        };
        let padded = images[start..end].iter().map(|im| reflect_pad(im, INPUT_MULTIPLE)).collect::<Result<Vec<_>>>()?;
        let (ph, pw) = (padded[0].0.shape()[1], padded[0].0.shape()[2]);
        let data: Vec<T> = padded.iter().flat_map(|(p, _)| p.data().iter().map(|&v| T::from_f64_lossy(v))).collect();
        let x = Tensor::new(&[end - start, c, ph, pw], data)?;
        let logits = model.infer_logits(&x)?;
        let plane = ph * pw;
        for b in 0..end - start {
            let probs: Vec<f64> = logits.data()[b * plane..(b + 1) * plane].iter().map(|v| sigmoid_scalar(v.as_f64())).collect();
            out.push(crop(&Tensor::new(&[1, ph, pw], probs)?, h, w)?);
        }
        start = end;
    }
    Ok(out)
}

/// Metrics over `samples`, with Gaussian noise of `sigma` added to inputs.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], sigma: f64, opts: &EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let noisy = samples
        .iter()
        .enumerate()
        .map(|(i, s)| add_gaussian_noise(&s.image, sigma, opts.noise_seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let probs = predict_probabilities(model, &noisy.iter().collect::<Vec<_>>(), opts.batch)?;
    EvalReport::compute(probs.iter().zip(samples).map(|(p, s)| (p.data(), s.mask.data())))
}

/// [`evaluate`] at each noise level, with drop rates against the first.
pub fn robustness<T: Scalar>(model: &Model<T>, samples: &[Sample], sigmas: &[f64], opts: &EvalOptions) -> Result<RobustnessReport> {
    robustness_sweep(sigmas, |s| evaluate(model, samples, s, opts))
}

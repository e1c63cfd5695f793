//! Central finite differences and the comparison harness used to validate
//! every backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which the comparison becomes absolute instead of relative.
pub const REL_ERR_FLOOR: f64 = 1e-2;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central-difference gradient of a scalar function, one element at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Decades spanned by [`plateau_diff`].
pub const LADDER_STEPS: usize = 7;

/// Roundoff allowance of [`plateau_diff`], in units of machine epsilon
/// times the function value.
pub const ROUNDOFF_FACTOR: f64 = 16.0;

/// Central difference with the step picked from a tenfold ladder starting at `h`.
///
/// Large steps straddle ReLU or bilinear-cell kinks and pick up curvature;
/// small steps drown in roundoff. Each adjacent pair of estimates is scored
/// by its disagreement plus the roundoff expected at the smaller step, and
/// the best pair is averaged. The analytic gradient plays no part in the
/// choice.
pub fn plateau_diff(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let noise = ROUNDOFF_FACTOR * f64::EPSILON * f(0.0)?.abs().max(1.0);
    let mut estimates = Vec::with_capacity(LADDER_STEPS);
    let mut step = h;
    for _ in 0..LADDER_STEPS {
        estimates.push((step, (f(step)? - f(-step)?) / (2.0 * step)));
        step /= 10.0;
    }
    let score = |p: &[(f64, f64)]| (p[0].1 - p[1].1).abs() + noise / p[1].0;
    let best = estimates
        .windows(2)
        .min_by(|a, b| score(a).total_cmp(&score(b)))
        .expect("ladder has at least two steps");
    Ok(0.5 * (best[0].1 + best[1].1))
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
    /// Where the largest disagreement occurred, with analytic and numeric values.
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max_rel_err={:.3e} (tol {:.0e}, {} entries)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.checked
        )?;
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            write!(f, " worst at {w}")?;
        }
        Ok(())
    }
}

/// Compare the tape gradient of `build(inputs)` against finite differences
/// for every element of every input.
///
/// Non-scalar outputs are contracted with a fixed random weighting so that
/// every output element contributes to the checked scalar.
pub fn check_op<F>(name: &str, inputs: &[Tensor<f64>], tol: f64, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor<f64>> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval = |xs: &[Tensor<f64>], tape: &Tape<f64>| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(tape, &vars)?;
        let shape = tape.shape(out);
        let w = weights
            .get_or_insert_with(|| Tensor::uniform(&shape, -1.0, 1.0, &mut rng))
            .clone();
        let loss = tape.sum(tape.mul(out, tape.constant(w))?);
        Ok((loss, vars))
    };

    let tape = Tape::new();
    let (loss, vars) = eval(inputs, &tape)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut checked = 0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], x.shape());
        let mut failure = None;
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[k] = probe.clone();
                let t = Tape::no_grad();
                match eval(&xs, &t) {
                    Ok((l, _)) => t.value(l).item(),
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            x,
            DEFAULT_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let e = rel_err(*a, *n);
            if e > worst {
                worst = e;
                worst_at = Some(format!("input {k}[{i}] analytic={a:.6e} numeric={n:.6e}"));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        checked,
        tolerance: tol,
        worst: worst_at,
    })
}

/// Random coordinates for sampled checks on large parameter sets.
pub fn sample_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let i = rng.gen_range(0..n);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

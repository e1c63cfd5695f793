//! Diagonal selective state-space recurrence.
//!
//! For each batch item, time step `t` and channel `c`:
//!
//! ```text
//! delta_t = softplus(W_delta x_t + b_delta)          [C]
//! B_t     = W_B x_t,   C_t = W_C x_t                 [N]
//! h_t     = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
//! y_t     = sum_n C_t[n] h_t[c, n] + D x_t
//! ```
//!
//! with `A = -exp(A_log)` of shape `[C, N]` and `h_0 = 0`. The recurrence is
//! evaluated sequentially; the tape op stores every state for the backward
//! sweep.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamId};
use crate::numerics::{conv2d, softplus_scalar, ConvParams, Scalar, Tape, Tensor, Var};

pub const DEFAULT_STATE_SIZE: usize = 8;

/// `A_log` rows `linspace(ln(1/16), 0, N)`, giving `A` log-spaced in `[-1, -1/16]`.
pub fn a_log_init<T: Scalar>(c: usize, n: usize) -> Tensor<T> {
    let lo = (1.0f64 / 16.0).ln();
    let row: Vec<f64> = (0..n)
        .map(|k| if n == 1 { lo } else { lo + (0.0 - lo) * k as f64 / (n - 1) as f64 })
        .collect();
    let data: Vec<f64> = (0..c).flat_map(|_| row.iter().copied()).collect();
    Tensor::from_f64(&[c, n], &data).expect("a_log shape")
}

/// Plain-tensor parameters of one scan direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    /// `[C, C]`
    pub w_delta: Tensor<T>,
    /// `[C]`
    pub b_delta: Tensor<T>,
    /// `[N, C]`
    pub w_b: Tensor<T>,
    /// `[N, C]`
    pub w_c: Tensor<T>,
    /// `[C, N]`
    pub a_log: Tensor<T>,
    /// `[C]`
    pub d: Tensor<T>,
}

impl<T: Scalar> SsmParams<T> {
    /// Kaiming-uniform projections, zero `b_delta`, log-spaced `A`, `D = 1`.
    pub fn init(c: usize, n: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / c as f64).sqrt();
        Self {
            w_delta: Tensor::uniform(&[c, c], -bound, bound, rng),
            b_delta: Tensor::zeros(&[c]),
            w_b: Tensor::uniform(&[n, c], -bound, bound, rng),
            w_c: Tensor::uniform(&[n, c], -bound, bound, rng),
            a_log: a_log_init(c, n),
            d: Tensor::ones(&[c]),
        }
    }

    pub fn channels(&self) -> usize {
        self.d.numel()
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = -exp(A_log)`.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let n = self.state_size();
        let ok = self.w_delta.shape() == [c, c]
            && self.b_delta.shape() == [c]
            && self.w_b.shape() == [n, c]
            && self.w_c.shape() == [n, c]
            && self.a_log.shape() == [c, n];
        if ok {
            Ok(())
        } else {
            Err(Error::shape("ssm_params", format!("inconsistent shapes for C={c}, N={n}")))
        }
    }
}

/// Parameter handles of one scan direction inside a [`crate::nn::ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct SsmLayer {
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub a_log: ParamId,
    pub d: ParamId,
}

impl SsmLayer {
    pub fn build<T: Scalar>(init: &mut Init<T>, name: &str, c: usize, n: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(Self {
                w_delta: init.kaiming("w_delta", &[c, c, 1, 1])?,
                b_delta: init.zeros("b_delta", &[c])?,
                w_b: init.kaiming("w_b", &[n, c, 1, 1])?,
                w_c: init.kaiming("w_c", &[n, c, 1, 1])?,
                a_log: init.tensor("a_log", a_log_init(c, n))?,
                d: init.ones("d", &[c])?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, seq: Var) -> Result<Var> {
        let vars = SsmVars {
            w_delta: ctx.p(self.w_delta),
            b_delta: ctx.p(self.b_delta),
            w_b: ctx.p(self.w_b),
            w_c: ctx.p(self.w_c),
            a_log: ctx.p(self.a_log),
            d: ctx.p(self.d),
        };
        selective_scan_tape(ctx.tape, seq, &vars)
    }

    /// Copy out the plain-tensor parameters (projection weights as matrices).
    pub fn to_params<T: Scalar>(&self, store: &crate::nn::ParamStore<T>) -> SsmParams<T> {
        let mat = |id: ParamId| {
            let t = store.get(id).clone();
            let s = t.shape().to_vec();
            t.reshape(&s[..2]).expect("1x1 kernel")
        };
        SsmParams {
            w_delta: mat(self.w_delta),
            b_delta: store.get(self.b_delta).clone(),
            w_b: mat(self.w_b),
            w_c: mat(self.w_c),
            a_log: store.get(self.a_log).clone(),
            d: store.get(self.d).clone(),
        }
    }
}

/// Tape handles: projection weights as `[out, in, 1, 1]` kernels.
#[derive(Debug, Clone, Copy)]
pub struct SsmVars {
    pub w_delta: Var,
    pub b_delta: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub a_log: Var,
    pub d: Var,
}

/// Dimensions shared by the kernels below.
#[derive(Debug, Clone, Copy)]
struct Dims {
    b: usize,
    c: usize,
    n: usize,
    l: usize,
}

/// The recurrence on precomputed `delta [B,C,L]`, `bm, cm [B,N,L]`.
/// Returns `y [B,C,L]` and, when `keep_states`, every state `h [B,L,C,N]`.
fn scan_kernel<T: Scalar>(
    dims: Dims,
    x: &[T],
    delta: &[T],
    bm: &[T],
    cm: &[T],
    a: &[T],
    d: &[T],
    keep_states: bool,
) -> (Vec<T>, Vec<T>) {
    let Dims { b, c, n, l } = dims;
    let mut y = vec![T::zero(); b * c * l];
    let mut states = if keep_states { vec![T::zero(); b * l * c * n] } else { Vec::new() };
    let mut h = vec![T::zero(); c * n];
    for bi in 0..b {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..l {
            let bt = |k: usize| bm[(bi * n + k) * l + t];
            let ct = |k: usize| cm[(bi * n + k) * l + t];
            for ch in 0..c {
                let xi = (bi * c + ch) * l + t;
                let (xv, dt) = (x[xi], delta[xi]);
                let dx = dt * xv;
                let hrow = &mut h[ch * n..(ch + 1) * n];
                let arow = &a[ch * n..(ch + 1) * n];
                let mut acc = d[ch] * xv;
                for k in 0..n {
                    let hv = (dt * arow[k]).exp() * hrow[k] + dx * bt(k);
                    hrow[k] = hv;
                    acc = acc + ct(k) * hv;
                }
                y[xi] = acc;
            }
            if keep_states {
                let off = (bi * l + t) * c * n;
                states[off..off + c * n].copy_from_slice(&h);
            }
        }
    }
    (y, states)
}

/// Raw recurrence on an already projected sequence, without any tape.
/// Used for timing the scan in isolation.
pub fn scan_recurrence<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    bm: &Tensor<T>,
    cm: &Tensor<T>,
    a: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = check_dims(x.shape(), delta.shape(), bm.shape(), cm.shape(), a.shape(), d.shape())?;
    let (y, _) = scan_kernel(dims, x.data(), delta.data(), bm.data(), cm.data(), a.data(), d.data(), false);
    Tensor::new(x.shape(), y)
}

fn check_dims(x: &[usize], delta: &[usize], bm: &[usize], cm: &[usize], a: &[usize], d: &[usize]) -> Result<Dims> {
    let [b, c, l] = *x else {
        return Err(Error::shape("selective_scan", format!("sequence must be [B,C,L], got {x:?}")));
    };
    let n = a.get(1).copied().unwrap_or(0);
    let ok = delta == x && bm == [b, n, l] && cm == [b, n, l] && a == [c, n] && d == [c];
    if !ok {
        return Err(Error::shape(
            "selective_scan",
            format!("x {x:?}, delta {delta:?}, B {bm:?}, C {cm:?}, A {a:?}, D {d:?}"),
        ));
    }
    Ok(Dims { b, c, n, l })
}

/// Projections as plain tensors: `delta`, `B`, `C` for a `[B,C,L]` sequence.
fn project<T: Scalar>(seq: &Tensor<T>, p: &SsmParams<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, c, l] = *seq.shape() else {
        return Err(Error::shape("selective_scan", format!("sequence must be [B,C,L], got {:?}", seq.shape())));
    };
    p.validate()?;
    if p.channels() != c {
        return Err(Error::shape("selective_scan", format!("{} channel params for {c}-channel input", p.channels())));
    }
    let n = p.state_size();
    let x4 = seq.clone().reshape(&[b, c, l, 1])?;
    let k = |t: &Tensor<T>| t.clone().reshape(&[t.shape()[0], c, 1, 1]);
    let pre = conv2d(&x4, &k(&p.w_delta)?, Some(&p.b_delta), ConvParams::default())?;
    let delta = pre.map(softplus_scalar).reshape(&[b, c, l])?;
    let bm = conv2d(&x4, &k(&p.w_b)?, None, ConvParams::default())?.reshape(&[b, n, l])?;
    let cm = conv2d(&x4, &k(&p.w_c)?, None, ConvParams::default())?.reshape(&[b, n, l])?;
    Ok((delta, bm, cm))
}

/// Full selective scan on plain tensors.
pub fn selective_scan<T: Scalar>(seq: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    seq.check_finite("selective_scan input")?;
    let (delta, bm, cm) = project(seq, p)?;
    let y = scan_recurrence(seq, &delta, &bm, &cm, &p.a(), &p.d)?;
    y.check_finite("selective_scan output")?;
    Ok(y)
}

/// Everything but the projections, kept for [`selective_scan_components`].
pub struct ScanInputs<T> {
    pub delta: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub a: Tensor<T>,
}

/// The projected quantities for a sequence, for the timing harness.
pub fn selective_scan_components<T: Scalar>(seq: &Tensor<T>, p: &SsmParams<T>) -> Result<ScanInputs<T>> {
    let (delta, b, c) = project(seq, p)?;
    Ok(ScanInputs { delta, b, c, a: p.a() })
}

/// Selective scan recorded on `tape`. Projections are 1x1 convolutions so
/// their gradients come from the convolution op; the recurrence itself is a
/// single op with a hand-written backward sweep.
pub fn selective_scan_tape<T: Scalar>(tape: &Tape<T>, seq: Var, p: &SsmVars) -> Result<Var> {
    let shape = tape.shape(seq);
    let [b, c, l] = *shape.as_slice() else {
        return Err(Error::shape("selective_scan", format!("sequence must be [B,C,L], got {shape:?}")));
    };
    let n = tape.shape(p.a_log).get(1).copied().unwrap_or(0);
    tape.value(seq).check_finite("selective_scan input")?;
    let x4 = tape.reshape(seq, &[b, c, l, 1])?;
    let cp = ConvParams::default();
    let delta = tape.softplus(tape.conv2d(x4, p.w_delta, Some(p.b_delta), cp)?);
    let delta = tape.reshape(delta, &[b, c, l])?;
    let bm = tape.reshape(tape.conv2d(x4, p.w_b, None, cp)?, &[b, n, l])?;
    let cm = tape.reshape(tape.conv2d(x4, p.w_c, None, cp)?, &[b, n, l])?;
    let a = tape.neg(tape.exp(p.a_log));
    scan_op(tape, seq, delta, bm, cm, a, p.d)
}

fn scan_op<T: Scalar>(tape: &Tape<T>, x: Var, delta: Var, bm: Var, cm: Var, a: Var, d: Var) -> Result<Var> {
    let (xv, dv, bv, cv, av, ddv) = (
        tape.value(x),
        tape.value(delta),
        tape.value(bm),
        tape.value(cm),
        tape.value(a),
        tape.value(d),
    );
    let dims = check_dims(xv.shape(), dv.shape(), bv.shape(), cv.shape(), av.shape(), ddv.shape())?;
    let keep = tape.grad_enabled();
    let (y, states) = scan_kernel(dims, xv.data(), dv.data(), bv.data(), cv.data(), av.data(), ddv.data(), keep);
    let y = Tensor::new(xv.shape(), y)?;
    y.check_finite("selective_scan output")?;
    tape.add_flops(6 * (dims.b * dims.c * dims.l * dims.n) as u64);
    Ok(tape.push("selective_scan", y, &[x, delta, bm, cm, a, d], move || {
        Box::new(move |g: &Tensor<T>| {
            let Dims { b, c, n, l } = dims;
            let (x, delta, bm, cm, a, dd) = (xv.data(), dv.data(), bv.data(), cv.data(), av.data(), ddv.data());
            let g = g.data();
            let mut gx = vec![T::zero(); x.len()];
            let mut gdelta = vec![T::zero(); x.len()];
            let mut gb = vec![T::zero(); bm.len()];
            let mut gc = vec![T::zero(); cm.len()];
            let mut ga = vec![T::zero(); a.len()];
            let mut gd = vec![T::zero(); dd.len()];
            // carry[c, n] = dL/dh_t flowing back from step t+1, already multiplied by a_{t+1}
            let mut carry = vec![T::zero(); c * n];
            for bi in 0..b {
                carry.iter_mut().for_each(|v| *v = T::zero());
                for t in (0..l).rev() {
                    let h_t = &states[(bi * l + t) * c * n..(bi * l + t + 1) * c * n];
                    let h_prev = (t > 0).then(|| &states[(bi * l + t - 1) * c * n..(bi * l + t) * c * n]);
                    for ch in 0..c {
                        let xi = (bi * c + ch) * l + t;
                        let (xv, dt, gy) = (x[xi], delta[xi], g[xi]);
                        gd[ch] = gd[ch] + gy * xv;
                        let mut gxi = gy * dd[ch];
                        let mut gdt = T::zero();
                        for k in 0..n {
                            let bk = (bi * n + k) * l + t;
                            let ci = ch * n + k;
                            gc[bk] = gc[bk] + gy * h_t[ci];
                            let dh = gy * cm[bk] + carry[ci];
                            let at = (dt * a[ci]).exp();
                            // input injection: delta * B * x
                            gdt = gdt + dh * bm[bk] * xv;
                            gxi = gxi + dh * dt * bm[bk];
                            gb[bk] = gb[bk] + dh * dt * xv;
                            // decay: a_t * h_{t-1}
                            if let Some(hp) = h_prev {
                                let gat = dh * hp[ci] * at;
                                gdt = gdt + gat * a[ci];
                                ga[ci] = ga[ci] + gat * dt;
                            }
                            carry[ci] = dh * at;
                        }
                        gx[xi] = gxi;
                        gdelta[xi] = gdt;
                    }
                }
            }
            let mk = |shape: &[usize], v: Vec<T>| Some(Tensor::new(shape, v).expect("scan grad"));
            vec![
                mk(xv.shape(), gx),
                mk(dv.shape(), gdelta),
                mk(bv.shape(), gb),
                mk(cv.shape(), gc),
                mk(av.shape(), ga),
                mk(ddv.shape(), gd),
            ]
        })
    }))
}

/// Wrap plain parameters as tape constants or leaves.
pub fn ssm_vars<T: Scalar>(tape: &Tape<T>, p: &SsmParams<T>, requires_grad: bool) -> Result<SsmVars> {
    let c = p.channels();
    let n = p.state_size();
    let leaf = |t: &Tensor<T>| tape.leaf(t.clone(), requires_grad);
    Ok(SsmVars {
        w_delta: leaf(&p.w_delta.clone().reshape(&[c, c, 1, 1])?),
        b_delta: leaf(&p.b_delta),
        w_b: leaf(&p.w_b.clone().reshape(&[n, c, 1, 1])?),
        w_c: leaf(&p.w_c.clone().reshape(&[n, c, 1, 1])?),
        a_log: leaf(&p.a_log),
        d: leaf(&p.d),
    })
}

//! Elementwise, broadcasting, shape and reduction ops recorded on a [`Tape`].
//!
//! Broadcasting follows the numpy rule restricted to equal ranks: each axis
//! must match or be 1 on one side.

use std::rc::Rc;

use super::tape::{BackwardFn, Tape, Var};
use super::tensor::{s, strides, Scalar, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Plain-tensor helpers
// ---------------------------------------------------------------------------

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(
                op,
                format!("axis {axis}: {x} vs {y} (shapes {a:?} and {b:?})"),
            )),
        })
        .collect()
}

/// Strides of `src` viewed inside `out`, with 0 on broadcast axes.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    strides(src)
        .into_iter()
        .zip(src.iter().zip(out))
        .map(|(st, (&n, &m))| if n == 1 && m != 1 { 0 } else { st })
        .collect()
}

/// Calls `f(offset_a, offset_b, flat_out)` for every element of `out`, where the
/// offsets index two operands laid out with strides `sa` and `sb`.
fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut flat = 0;
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..outer {
        for j in 0..last {
            f(oa + j * la, ob + j * lb, flat);
            flat += 1;
        }
        // odometer increment over the leading axes
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape(), op)?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![T::zero(); n];
    let (ad, bd) = (a.data(), b.data());
    walk2(&out, &sa, &sb, |ia, ib, o| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(&out, data)
}

/// Broadcast `x` up to `shape`.
pub fn expand_tensor<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let out = broadcast_shape(x.shape(), shape, "expand")?;
    if out != shape {
        return Err(Error::shape(
            "expand",
            format!("{:?} cannot expand to {shape:?}", x.shape()),
        ));
    }
    if x.shape() == shape {
        return Ok(x.clone());
    }
    let sx = broadcast_strides(x.shape(), shape);
    let zero = vec![0; shape.len()];
    let n: usize = shape.iter().product();
    let mut data = vec![T::zero(); n];
    let xd = x.data();
    walk2(shape, &sx, &zero, |ix, _, o| data[o] = xd[ix]);
    Tensor::new(shape, data)
}

/// Sum `g` down to `target` (the inverse of broadcasting).
pub fn sum_to_shape<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let st = broadcast_strides(target, g.shape());
    let zero = vec![0; target.len()];
    let mut out = Tensor::zeros(target);
    let gd = g.data();
    let od = out.data_mut();
    walk2(g.shape(), &zero, &st, |_, it, flat| od[it] = od[it] + gd[flat]);
    out
}

/// Axis-wise decomposition `(outer, extent, inner)` for ops along one axis.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(
            "permute",
            format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    let in_st = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
    let zero = vec![0; rank];
    let n = x.numel();
    let mut data = vec![T::zero(); n];
    let xd = x.data();
    walk2(&out_shape, &src_st, &zero, |ix, _, o| data[o] = xd[ix]);
    Tensor::new(&out_shape, data)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Batched matrix product `[N,M,K] x [N,K,P] -> [N,M,P]`.
pub fn bmm_tensor<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m, k) = match *a.shape() {
        [n, m, k] => (n, m, k),
        _ => return Err(Error::shape("bmm", format!("lhs must be rank 3, got {:?}", a.shape()))),
    };
    let (n2, k2, p) = match *b.shape() {
        [n2, k2, p] => (n2, k2, p),
        _ => return Err(Error::shape("bmm", format!("rhs must be rank 3, got {:?}", b.shape()))),
    };
    if n != n2 || k != k2 {
        return Err(Error::shape(
            "bmm",
            format!("batch/inner axes disagree: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); n * m * p];
    let (ad, bd) = (a.data(), b.data());
    for batch in 0..n {
        let a0 = batch * m * k;
        let b0 = batch * k * p;
        let o0 = batch * m * p;
        for i in 0..m {
            let orow = &mut out[o0 + i * p..o0 + (i + 1) * p];
            for kk in 0..k {
                let av = ad[a0 + i * k + kk];
                let brow = &bd[b0 + kk * p..b0 + (kk + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    Tensor::new(&[n, m, p], out)
}

fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    permute_tensor(x, &[0, 2, 1]).expect("rank-3 transpose")
}

pub fn softmax_tensor<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..n {
                mx = mx.max(d[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (d[base + j * inner] - mx).exp();
                d[base + j * inner] = e;
                total = total + e;
            }
            for j in 0..n {
                d[base + j * inner] = d[base + j * inner] / total;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let u = s::<T>(GELU_K) * (x + s::<T>(GELU_C) * x * x * x);
    s::<T>(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = s::<T>(GELU_K) * (x + s::<T>(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = s::<T>(GELU_K) * (T::one() + s::<T>(3.0 * GELU_C) * x * x);
    s::<T>(0.5) * (T::one() + t) + s::<T>(0.5) * x * (T::one() - t * t) * du
}

// ---------------------------------------------------------------------------
// Tape ops
// ---------------------------------------------------------------------------

impl<T: Scalar> Tape<T> {
    fn unary(
        &self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        // derivative from (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let xv = self.value(x);
        let y = xv.map(f);
        let yv = Rc::new(y.clone());
        self.push(op, y, &[x], move || {
            Box::new(move |g: &Tensor<T>| {
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect();
                vec![Some(Tensor::new(g.shape(), data).expect("same shape"))]
            })
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary("sigmoid", x, sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary("softplus", x, softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            "relu",
            x,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary("gelu", x, gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary("tanh", x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary("ln", x, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn powf(&self, x: Var, e: f64) -> Var {
        let et: T = s(e);
        self.unary("powf", x, move |v| v.powf(et), move |x, _| et * x.powf(et - T::one()))
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary("square", x, |v| v * v, |x, _| s::<T>(2.0) * x)
    }

    /// Clamp into `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h): (T, T) = (s(lo), s(hi));
        self.unary(
            "clamp",
            x,
            move |v| v.max(l).min(h),
            move |x, _| if x >= l && x <= h { T::one() } else { T::zero() },
        )
    }

    pub fn mul_scalar(&self, x: Var, c: f64) -> Var {
        let ct: T = s(c);
        self.unary("mul_scalar", x, move |v| v * ct, move |_, _| ct)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let ct: T = s(c);
        self.unary("add_scalar", x, move |v| v + ct, |_, _| T::one())
    }

    pub fn neg(&self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    /// `1 - x`
    pub fn one_minus(&self, x: Var) -> Var {
        self.unary("one_minus", x, |v| T::one() - v, |_, _| -T::one())
    }

    fn binary_grads(
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
        ga: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
        gb: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> BackwardFn<T> {
        Box::new(move |g: &Tensor<T>| {
            vec![
                Some(sum_to_shape(&ga(g), &a_shape)),
                Some(sum_to_shape(&gb(g), &b_shape)),
            ]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let y = broadcast_binary(&av, &bv, "add", |x, y| x + y)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.push("add", y, &[a, b], move || {
            Self::binary_grads(sa, sb, |g| g.clone(), |g| g.clone())
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let y = broadcast_binary(&av, &bv, "sub", |x, y| x - y)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.push("sub", y, &[a, b], move || {
            Self::binary_grads(sa, sb, |g| g.clone(), |g| g.map(|v| -v))
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let y = broadcast_binary(&av, &bv, "mul", |x, y| x * y)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.push("mul", y, &[a, b], move || {
            let (a2, b2) = (Rc::clone(&av), Rc::clone(&bv));
            Self::binary_grads(
                sa,
                sb,
                move |g| broadcast_binary(g, &b2, "mul", |x, y| x * y).expect("broadcast"),
                move |g| broadcast_binary(g, &a2, "mul", |x, y| x * y).expect("broadcast"),
            )
        }))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let y = broadcast_binary(&av, &bv, "div", |x, y| x / y)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        let yv = Rc::new(y.clone());
        Ok(self.push("div", y, &[a, b], move || {
            let b2 = Rc::clone(&bv);
            let b3 = Rc::clone(&bv);
            Self::binary_grads(
                sa,
                sb,
                move |g| broadcast_binary(g, &b2, "div", |x, y| x / y).expect("broadcast"),
                move |g| {
                    // d(a/b)/db = -y / b
                    let t = broadcast_binary(g, &yv, "div", |x, y| -x * y).expect("broadcast");
                    broadcast_binary(&t, &b3, "div", |x, y| x / y).expect("broadcast")
                },
            )
        }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        self.push("sum", Tensor::scalar(xv.sum()), &[x], move || {
            Box::new(move |g: &Tensor<T>| vec![Some(Tensor::full(&shape, g.item()))])
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let total = self.sum(x);
        self.mul_scalar(total, 1.0 / n)
    }

    /// Sum down to `target` (axes of extent 1 in `target` are reduced, kept as 1).
    pub fn sum_to(&self, x: Var, target: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let full = broadcast_shape(xv.shape(), target, "sum_to")?;
        if full != xv.shape() {
            return Err(Error::shape(
                "sum_to",
                format!("{:?} does not reduce to {target:?}", xv.shape()),
            ));
        }
        let y = sum_to_shape(&xv, target);
        let shape = xv.shape().to_vec();
        Ok(self.push("sum_to", y, &[x], move || {
            Box::new(move |g: &Tensor<T>| vec![Some(expand_tensor(g, &shape).expect("expand"))])
        }))
    }

    /// Mean over `axes`, keeping them as extent-1 axes.
    pub fn mean_axes(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let mut target = self.shape(x);
        let mut count = 1usize;
        for &a in axes {
            if a >= target.len() {
                return Err(Error::shape("mean_axes", format!("axis {a} out of range for {target:?}")));
            }
            count *= target[a];
            target[a] = 1;
        }
        let summed = self.sum_to(x, &target)?;
        Ok(self.mul_scalar(summed, 1.0 / count as f64))
    }

    pub fn expand(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let y = expand_tensor(&xv, shape)?;
        let src = xv.shape().to_vec();
        Ok(self.push("expand", y, &[x], move || {
            Box::new(move |g: &Tensor<T>| vec![Some(sum_to_shape(g, &src))])
        }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let y = (*xv).clone().reshape(shape)?;
        let src = xv.shape().to_vec();
        Ok(self.push("reshape", y, &[x], move || {
            Box::new(move |g: &Tensor<T>| vec![Some(g.clone().reshape(&src).expect("reshape"))])
        }))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = permute_tensor(&self.value(x), perm)?;
        let inv = inverse_perm(perm);
        Ok(self.push("permute", y, &[x], move || {
            Box::new(move |g: &Tensor<T>| vec![Some(permute_tensor(g, &inv).expect("permute"))])
        }))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Rc<Tensor<T>>> = xs.iter().map(|&v| self.value(v)).collect();
        let first = vals
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        for v in &vals {
            let sh = v.shape();
            let ok = sh.len() == first.len()
                && sh.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{sh:?} incompatible with {first:?} off axis {axis}"),
                ));
            }
        }
        let extents: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let mut out_shape = first.clone();
        out_shape[axis] = extents.iter().sum();
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (v, &e) in vals.iter().zip(&extents) {
                let chunk = e * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let y = Tensor::new(&out_shape, data)?;
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.push("concat", y, xs, move || {
            Box::new(move |g: &Tensor<T>| {
                let total: usize = extents.iter().sum();
                let mut grads: Vec<Vec<T>> =
                    shapes.iter().map(|sh| Vec::with_capacity(sh.iter().product())).collect();
                let gd = g.data();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gi, &e) in grads.iter_mut().zip(&extents) {
                        gi.extend_from_slice(&gd[off..off + e * inner]);
                        off += e * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .map(|(d, sh)| Some(Tensor::new(sh, d).expect("concat grad")))
                    .collect()
            })
        }))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let y = Tensor::new(&out_shape, data)?;
        Ok(self.push("slice", y, &[x], move || {
            Box::new(move |g: &Tensor<T>| {
                let mut full = Tensor::zeros(&shape);
                let fd = full.data_mut();
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    fd[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(full)]
            })
        }))
    }

    /// `out[..., i] = x[..., index[i]]` along the last axis.
    pub fn gather_last(&self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let l = *shape.last().ok_or_else(|| Error::shape("gather_last", "rank 0"))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= l) {
            return Err(Error::shape("gather_last", format!("index {bad} >= extent {l}")));
        }
        let rows = xv.numel() / l.max(1);
        let m = index.len();
        let mut data = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let row = &xv.data()[r * l..(r + 1) * l];
            data.extend(index.iter().map(|&i| row[i]));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().expect("rank >= 1") = m;
        let y = Tensor::new(&out_shape, data)?;
        let index = index.to_vec();
        Ok(self.push("gather_last", y, &[x], move || {
            Box::new(move |g: &Tensor<T>| {
                let mut full = Tensor::zeros(&shape);
                let fd = full.data_mut();
                for r in 0..rows {
                    for (j, &i) in index.iter().enumerate() {
                        fd[r * l + i] = fd[r * l + i] + g.data()[r * m + j];
                    }
                }
                vec![Some(full)]
            })
        }))
    }

    /// Batched matrix product `[N,M,K] x [N,K,P] -> [N,M,P]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let y = bmm_tensor(&av, &bv)?;
        let sh = av.shape();
        let p = bv.shape()[2];
        self.add_flops(2 * (sh[0] * sh[1] * sh[2] * p) as u64);
        Ok(self.push("bmm", y, &[a, b], move || {
            Box::new(move |g: &Tensor<T>| {
                let ga = bmm_tensor(g, &transpose_last2(&bv)).expect("bmm grad");
                let gb = bmm_tensor(&transpose_last2(&av), g).expect("bmm grad");
                vec![Some(ga), Some(gb)]
            })
        }))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let y = softmax_tensor(&self.value(x), axis)?;
        let yv = Rc::new(y.clone());
        Ok(self.push("softmax", y, &[x], move || {
            Box::new(move |g: &Tensor<T>| {
                let (outer, n, inner) = split_at_axis(yv.shape(), axis);
                let mut dx = Tensor::zeros(yv.shape());
                let (yd, gd) = (yv.data(), g.data());
                let dd = dx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: T = (0..n).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
                        for j in 0..n {
                            let k = base + j * inner;
                            dd[k] = yd[k] * (gd[k] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            })
        }))
    }
}

//! Bilinear resampling with the align-corners=false convention.
//!
//! Output pixel `o` of an `s`-times upsampled axis reads source coordinate
//! `(o + 0.5) / s - 0.5 + offset`, clamped into `[0, n - 1]`. Plain
//! interpolation is the zero-offset case and runs through the same code, so a
//! zero offset field reproduces it bit for bit.

use super::tape::{Tape, Var};
use super::tensor::{dims4, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// False when the raw coordinate was clamped (no gradient w.r.t. offset).
    inside: bool,
}

fn tap<T: Scalar>(coord: T, n: usize) -> Tap<T> {
    let hi = T::from_usize(n - 1).expect("extent");
    let inside = coord >= T::zero() && coord <= hi;
    let c = coord.max(T::zero()).min(hi);
    let i0 = c.floor().to_usize().expect("coordinate").min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    Tap {
        i0,
        i1,
        frac: c - T::from_usize(i0).expect("index"),
        inside,
    }
}

#[inline]
fn base_coord<T: Scalar>(o: usize, scale: usize) -> T {
    (T::from_usize(o).expect("index") + super::tensor::s(0.5)) / T::from_usize(scale).expect("scale")
        - super::tensor::s(0.5)
}

struct Plan<T> {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    // per (b, oy, ox): (y tap, x tap)
    taps: Vec<(Tap<T>, Tap<T>)>,
}

fn plan<T: Scalar>(shape: &[usize], scale: usize, offsets: Option<&Tensor<T>>) -> Result<Plan<T>> {
    let (b, c, h, w) = dims4(shape, "bilinear")?;
    if scale == 0 {
        return Err(Error::Config("bilinear: scale must be >= 1".into()));
    }
    let (oh, ow) = (h * scale, w * scale);
    if let Some(off) = offsets {
        if off.shape() != [b, 2, oh, ow] {
            return Err(Error::shape(
                "bilinear",
                format!("offsets {:?}, expected {:?}", off.shape(), [b, 2, oh, ow]),
            ));
        }
    }
    let mut taps = Vec::with_capacity(b * oh * ow);
    let plane = oh * ow;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut sy, mut sx) = (base_coord::<T>(oy, scale), base_coord::<T>(ox, scale));
                if let Some(off) = offsets {
                    let d = off.data();
                    sx = sx + d[(bi * 2) * plane + oy * ow + ox];
                    sy = sy + d[(bi * 2 + 1) * plane + oy * ow + ox];
                }
                taps.push((tap(sy, h), tap(sx, w)));
            }
        }
    }
    Ok(Plan {
        b,
        c,
        h,
        w,
        oh,
        ow,
        taps,
    })
}

fn run<T: Scalar>(x: &Tensor<T>, p: &Plan<T>) -> Tensor<T> {
    let xd = x.data();
    let plane_o = p.oh * p.ow;
    let plane_i = p.h * p.w;
    let mut out = vec![T::zero(); p.b * p.c * plane_o];
    for bi in 0..p.b {
        let taps = &p.taps[bi * plane_o..(bi + 1) * plane_o];
        for ch in 0..p.c {
            let src = &xd[(bi * p.c + ch) * plane_i..(bi * p.c + ch + 1) * plane_i];
            let dst = &mut out[(bi * p.c + ch) * plane_o..(bi * p.c + ch + 1) * plane_o];
            for (o, (ty, tx)) in dst.iter_mut().zip(taps) {
                let a = src[ty.i0 * p.w + tx.i0];
                let bb = src[ty.i0 * p.w + tx.i1];
                let cc = src[ty.i1 * p.w + tx.i0];
                let d = src[ty.i1 * p.w + tx.i1];
                let top = a + (bb - a) * tx.frac;
                let bot = cc + (d - cc) * tx.frac;
                *o = top + (bot - top) * ty.frac;
            }
        }
    }
    Tensor::new(&[p.b, p.c, p.oh, p.ow], out).expect("bilinear shape")
}

/// Plain-tensor bilinear upsampling by an integer factor.
pub fn interpolate_bilinear<T: Scalar>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let p = plan::<T>(x.shape(), scale, None)?;
    Ok(run(x, &p))
}

/// Bilinear sampling at the upsampled grid displaced by `offsets`
/// (`[B, 2, sH, sW]`, channel 0 horizontal, channel 1 vertical, in input pixels).
pub fn sample_bilinear<T: Scalar>(x: &Tensor<T>, scale: usize, offsets: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let p = plan(x.shape(), scale, offsets)?;
    Ok(run(x, &p))
}

impl<T: Scalar> Tape<T> {
    pub fn interpolate_bilinear(&self, x: Var, scale: usize) -> Result<Var> {
        self.sample_bilinear(x, scale, None)
    }

    pub fn sample_bilinear(&self, x: Var, scale: usize, offsets: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let ov = offsets.map(|o| self.value(o));
        let p = plan(xv.shape(), scale, ov.as_deref())?;
        let y = run(&xv, &p);
        let mut inputs = vec![x];
        inputs.extend(offsets);
        let has_off = offsets.is_some();
        Ok(self.push("sample_bilinear", y, &inputs, move || {
            Box::new(move |g: &Tensor<T>| {
                let gd = g.data();
                let xd = xv.data();
                let plane_o = p.oh * p.ow;
                let plane_i = p.h * p.w;
                let mut dx = vec![T::zero(); xd.len()];
                let mut doff = if has_off { vec![T::zero(); p.b * 2 * plane_o] } else { Vec::new() };
                let one = T::one();
                for bi in 0..p.b {
                    let taps = &p.taps[bi * plane_o..(bi + 1) * plane_o];
                    for ch in 0..p.c {
                        let gbase = (bi * p.c + ch) * plane_o;
                        let ibase = (bi * p.c + ch) * plane_i;
                        for (o, (ty, tx)) in taps.iter().enumerate() {
                            let go = gd[gbase + o];
                            let (fy, fx) = (ty.frac, tx.frac);
                            let ia = ibase + ty.i0 * p.w + tx.i0;
                            let ib = ibase + ty.i0 * p.w + tx.i1;
                            let ic = ibase + ty.i1 * p.w + tx.i0;
                            let id = ibase + ty.i1 * p.w + tx.i1;
                            dx[ia] = dx[ia] + go * (one - fy) * (one - fx);
                            dx[ib] = dx[ib] + go * (one - fy) * fx;
                            dx[ic] = dx[ic] + go * fy * (one - fx);
                            dx[id] = dx[id] + go * fy * fx;
                            if has_off {
                                let (a, b2, c2, d) = (xd[ia], xd[ib], xd[ic], xd[id]);
                                if tx.inside {
                                    let dsx = (one - fy) * (b2 - a) + fy * (d - c2);
                                    let k = (bi * 2) * plane_o + o;
                                    doff[k] = doff[k] + go * dsx;
                                }
                                if ty.inside {
                                    let dsy = (one - fx) * (c2 - a) + fx * (d - b2);
                                    let k = (bi * 2 + 1) * plane_o + o;
                                    doff[k] = doff[k] + go * dsy;
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![Some(Tensor::new(xv.shape(), dx).expect("dx"))];
                if has_off {
                    grads.push(Some(Tensor::new(&[p.b, 2, p.oh, p.ow], doff).expect("doff")));
                }
                grads
            })
        }))
    }
}

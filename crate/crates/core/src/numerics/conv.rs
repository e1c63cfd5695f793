//! 2-D cross-correlation with stride, zero padding, dilation and groups.

use super::tape::{Tape, Var};
use super::tensor::{dims4, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    /// (height, width)
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvParams {
    /// Square-kernel convenience: same stride/padding/dilation on both axes.
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (dilation, dilation),
            groups,
        }
    }

    /// Stride 1 with "same" padding for an odd kernel `k` at `dilation`.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (k - 1) / 2, dilation, 1)
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    (n + 2 * pad).checked_sub(span).map(|r| r / stride + 1)
}

/// `2 * K_h * K_w * (C_in/groups) * C_out * H' * W'` per batch item.
pub fn conv2d_flops(
    cin: usize,
    cout: usize,
    kernel: (usize, usize),
    groups: usize,
    out_hw: (usize, usize),
) -> u64 {
    2 * (kernel.0 * kernel.1 * (cin / groups) * cout * out_hw.0 * out_hw.1) as u64
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    p: ConvParams,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, p: ConvParams) -> Result<Self> {
        let (b, cin, h, wd) = dims4(x, "conv2d")?;
        let (cout, cin_g, kh, kw) = match *w {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape("conv2d", format!("weight must be rank 4, got {w:?}"))),
        };
        let g = p.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("groups {g} must divide C_in {cin} and C_out {cout}"),
            ));
        }
        if cin_g != cin / g {
            return Err(Error::shape(
                "conv2d",
                format!("weight axis 1 is {cin_g} but C_in/groups = {}", cin / g),
            ));
        }
        if p.stride.0 == 0 || p.stride.1 == 0 || p.dilation.0 == 0 || p.dilation.1 == 0 {
            return Err(Error::Config("conv2d: stride and dilation must be >= 1".into()));
        }
        if let Some(bs) = bias {
            if bs != [cout] {
                return Err(Error::shape("conv2d", format!("bias {bs:?} vs C_out {cout}")));
            }
        }
        let oh = conv_out_len(h, kh, p.stride.0, p.padding.0, p.dilation.0);
        let ow = conv_out_len(wd, kw, p.stride.1, p.padding.1, p.dilation.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit input {h}x{wd} with {p:?}"),
            ));
        };
        Ok(Self {
            b,
            cin,
            h,
            w: wd,
            cout,
            cin_g,
            kh,
            kw,
            oh,
            ow,
            p,
        })
    }

    /// Valid output rows for kernel row `ky`: pairs `(oy, iy)`.
    fn rows(&self, ky: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (s, pd, d) = (self.p.stride.0, self.p.padding.0, self.p.dilation.0);
        (0..self.oh).filter_map(move |oy| {
            let iy = (oy * s + ky * d) as isize - pd as isize;
            (iy >= 0 && (iy as usize) < self.h).then_some((oy, iy as usize))
        })
    }

    /// Valid output column range for kernel column `kx` and the input column
    /// of its first element: `(ox0, ox1, ix0)`.
    fn cols(&self, kx: usize) -> (usize, usize, usize) {
        let (s, pd, d) = (self.p.stride.1, self.p.padding.1, self.p.dilation.1);
        let shift = (kx * d) as isize - pd as isize;
        // ix = ox*s + shift must lie in [0, w)
        let ox0 = if shift >= 0 {
            0
        } else {
            ((-shift) as usize).div_ceil(s)
        };
        let hi = self.w as isize - 1 - shift;
        let ox1 = if hi < 0 {
            0
        } else {
            ((hi as usize) / s + 1).min(self.ow)
        };
        if ox0 >= ox1 {
            return (0, 0, 0);
        }
        let ix0 = (ox0 as isize * s as isize + shift).max(0) as usize;
        (ox0, ox1, ix0)
    }
}

fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, g: &Geometry) -> Tensor<T> {
    let (xd, wd) = (x.data(), w.data());
    let cout_g = g.cout / g.p.groups;
    let sx = g.p.stride.1;
    let mut out = vec![T::zero(); g.b * g.cout * g.oh * g.ow];
    let plane_o = g.oh * g.ow;
    let plane_i = g.h * g.w;
    let cols: Vec<(usize, usize, usize)> = (0..g.kw).map(|kx| g.cols(kx)).collect();
    for b in 0..g.b {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let o = &mut out[(b * g.cout + oc) * plane_o..(b * g.cout + oc + 1) * plane_o];
            if let Some(bias) = bias {
                o.fill(bias.data()[oc]);
            }
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let xp = &xd[(b * g.cin + ic) * plane_i..(b * g.cin + ic + 1) * plane_i];
                for ky in 0..g.kh {
                    for (kx, &(ox0, ox1, ix0)) in cols.iter().enumerate() {
                        let wv = wd[((oc * g.cin_g + icl) * g.kh + ky) * g.kw + kx];
                        for (oy, iy) in g.rows(ky) {
                            let orow = &mut o[oy * g.ow + ox0..oy * g.ow + ox1];
                            let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                            if sx == 1 {
                                for (ov, &xv) in orow.iter_mut().zip(&xrow[ix0..]) {
                                    *ov = *ov + wv * xv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov = *ov + wv * xrow[ix0 + j * sx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.b, g.cout, g.oh, g.ow], out).expect("conv output shape")
}

fn backward_input<T: Scalar>(gout: &Tensor<T>, w: &Tensor<T>, g: &Geometry) -> Tensor<T> {
    let (gd, wd) = (gout.data(), w.data());
    let cout_g = g.cout / g.p.groups;
    let sx = g.p.stride.1;
    let mut dx = vec![T::zero(); g.b * g.cin * g.h * g.w];
    let plane_o = g.oh * g.ow;
    let plane_i = g.h * g.w;
    let cols: Vec<(usize, usize, usize)> = (0..g.kw).map(|kx| g.cols(kx)).collect();
    for b in 0..g.b {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let go = &gd[(b * g.cout + oc) * plane_o..(b * g.cout + oc + 1) * plane_o];
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let xp = &mut dx[(b * g.cin + ic) * plane_i..(b * g.cin + ic + 1) * plane_i];
                for ky in 0..g.kh {
                    for (kx, &(ox0, ox1, ix0)) in cols.iter().enumerate() {
                        let wv = wd[((oc * g.cin_g + icl) * g.kh + ky) * g.kw + kx];
                        for (oy, iy) in g.rows(ky) {
                            let grow = &go[oy * g.ow + ox0..oy * g.ow + ox1];
                            let xrow = &mut xp[iy * g.w..(iy + 1) * g.w];
                            if sx == 1 {
                                for (xv, &gv) in xrow[ix0..].iter_mut().zip(grow) {
                                    *xv = *xv + wv * gv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let xv = &mut xrow[ix0 + j * sx];
                                    *xv = *xv + wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.b, g.cin, g.h, g.w], dx).expect("conv dx shape")
}

fn backward_weight<T: Scalar>(gout: &Tensor<T>, x: &Tensor<T>, g: &Geometry) -> Tensor<T> {
    let (gd, xd) = (gout.data(), x.data());
    let cout_g = g.cout / g.p.groups;
    let sx = g.p.stride.1;
    let mut dw = vec![T::zero(); g.cout * g.cin_g * g.kh * g.kw];
    let plane_o = g.oh * g.ow;
    let plane_i = g.h * g.w;
    let cols: Vec<(usize, usize, usize)> = (0..g.kw).map(|kx| g.cols(kx)).collect();
    for b in 0..g.b {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let go = &gd[(b * g.cout + oc) * plane_o..(b * g.cout + oc + 1) * plane_o];
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let xp = &xd[(b * g.cin + ic) * plane_i..(b * g.cin + ic + 1) * plane_i];
                for ky in 0..g.kh {
                    for (kx, &(ox0, ox1, ix0)) in cols.iter().enumerate() {
                        let mut acc = T::zero();
                        for (oy, iy) in g.rows(ky) {
                            let grow = &go[oy * g.ow + ox0..oy * g.ow + ox1];
                            let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                            if sx == 1 {
                                for (&gv, &xv) in grow.iter().zip(&xrow[ix0..]) {
                                    acc = acc + gv * xv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    acc = acc + gv * xrow[ix0 + j * sx];
                                }
                            }
                        }
                        let k = ((oc * g.cin_g + icl) * g.kh + ky) * g.kw + kx;
                        dw[k] = dw[k] + acc;
                    }
                }
            }
        }
    }
    Tensor::new(&[g.cout, g.cin_g, g.kh, g.kw], dw).expect("conv dw shape")
}

fn backward_bias<T: Scalar>(gout: &Tensor<T>, g: &Geometry) -> Tensor<T> {
    let plane = g.oh * g.ow;
    let mut db = vec![T::zero(); g.cout];
    for b in 0..g.b {
        for (oc, acc) in db.iter_mut().enumerate() {
            let start = (b * g.cout + oc) * plane;
            *acc = *acc + gout.data()[start..start + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[g.cout], db).expect("conv db shape")
}

/// Plain-tensor convolution, `x: [B,C_in,H,W]`, `w: [C_out, C_in/groups, K_h, K_w]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: ConvParams,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x.shape(), w.shape(), bias.map(|b| b.shape()), params)?;
    Ok(forward(x, w, bias, &g))
}

impl<T: Scalar> Tape<T> {
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, params: ConvParams) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = bias.map(|b| self.value(b));
        let g = Geometry::new(xv.shape(), wv.shape(), bv.as_ref().map(|b| b.shape()), params)?;
        let y = forward(&xv, &wv, bv.as_deref(), &g);
        self.add_flops(g.b as u64 * conv2d_flops(g.cin, g.cout, (g.kh, g.kw), params.groups, (g.oh, g.ow)));
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        Ok(self.push("conv2d", y, &inputs, move || {
            let has_bias = bv.is_some();
            Box::new(move |gout: &Tensor<T>| {
                let dx = need_x.then(|| backward_input(gout, &wv, &g));
                let dw = need_w.then(|| backward_weight(gout, &xv, &g));
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(Some(backward_bias(gout, &g)));
                }
                grads
            })
        }))
    }
}

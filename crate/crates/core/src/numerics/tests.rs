use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Sliding-window reference for a single-group convolution.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize, dil: usize) -> Tensor<f64> {
    let (bn, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(&[bn, cout, oh, ow]);
    for n in 0..bn {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[n, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out.set(&[n, co, oy, ox], acc);
                }
            }
        }
    }
    out
}

#[test]
fn pointwise_conv_of_ones() {
    let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
    let w = Tensor::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap();
    let y = conv2d(&x, &w, None, ConvParams::default()).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 2.0));
}

#[test]
fn dilated_depthwise_keeps_spatial_size() {
    let c = 3;
    let x = Tensor::<f32>::uniform(&[1, c, 8, 8], -1.0, 1.0, &mut rng(1));
    let w = Tensor::<f32>::uniform(&[c, 1, 3, 3], -1.0, 1.0, &mut rng(2));
    let y = conv2d(&x, &w, None, ConvParams::same(3, 2).with_groups(c)).unwrap();
    assert_eq!(y.shape(), &[1, c, 8, 8]);
}

#[test]
fn conv_matches_sliding_window_loop() {
    let x = rand_t(&[1, 2, 5, 5], 3);
    let w = rand_t(&[3, 2, 3, 3], 4);
    let b = rand_t(&[3], 5);
    for (stride, pad, dil) in [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)] {
        let oracle = naive_conv(&x, &w, Some(&b), stride, pad, dil);
        let got = conv2d(&x.cast::<f32>(), &w.cast(), Some(&b.cast()), ConvParams::new(stride, pad, dil, 1)).unwrap();
        assert!(got.cast::<f64>().max_abs_diff(&oracle) < 1e-6, "stride {stride} pad {pad} dil {dil}");
    }
}

#[test]
fn conv_shape_errors_name_the_axis() {
    let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
    let w = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
    let err = conv2d(&x, &w, None, ConvParams::default()).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
    let w = Tensor::<f32>::zeros(&[2, 3, 3, 3]);
    assert!(conv2d(&x, &w, None, ConvParams::default().with_groups(2)).is_err());
}

#[test]
fn conv_flop_formula() {
    assert_eq!(conv2d_flops(2, 3, (1, 1), 1, (4, 4)), 192);
    let tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[3, 2, 1, 1]));
    tape.conv2d(x, w, None, ConvParams::default()).unwrap();
    assert_eq!(tape.flops(), 192);
}

#[test]
fn pooling_cases() {
    let tape = Tape::<f64>::no_grad();
    let c = tape.constant(Tensor::full(&[1, 2, 3, 4], 0.7));
    for axis in [PoolAxis::Height, PoolAxis::Width, PoolAxis::Both] {
        let y = tape.value(pool_axis_avg(&tape, c, axis).unwrap());
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
    let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.value(pool_axis_avg(&tape, x, PoolAxis::Width).unwrap());
    assert_eq!(y.shape(), &[1, 1, 2, 1]);
    assert_eq!(y.data(), &[1.5, 3.5]);
    let y = tape.value(pool_axis_avg(&tape, x, PoolAxis::Height).unwrap());
    assert_eq!(y.shape(), &[1, 1, 1, 2]);

    let r = rand_t(&[2, 3, 4, 5], 9);
    let y = tape.value(pool_axis_avg(&tape, tape.constant(r.clone()), PoolAxis::Both).unwrap());
    for bc in 0..6 {
        let oracle: f64 = r.data()[bc * 20..(bc + 1) * 20].iter().sum::<f64>() / 20.0;
        assert!((y.data()[bc] - oracle).abs() < 1e-7);
    }
}

fn identity_strip_kernel(c: usize, orient: StripOrientation) -> Tensor<f64> {
    let (kh, kw) = orient.kernel();
    let mut w = Tensor::zeros(&[c, c, kh, kw]);
    for i in 0..c {
        w.set(&[i, i, kh / 2, kw / 2], 1.0);
    }
    w
}

#[test]
fn strip_pool_identity_and_degenerate() {
    let tape = Tape::<f64>::no_grad();
    for orient in [StripOrientation::Horizontal, StripOrientation::Vertical] {
        let w = tape.constant(identity_strip_kernel(2, orient));
        let x = tape.constant(Tensor::full(&[1, 2, 4, 5], 0.3));
        let y = tape.value(strip_pool(&tape, x, orient, w, None).unwrap());
        assert_eq!(y.shape(), &[1, 2, 4, 5]);
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }
    // A single row: the horizontal strip is the whole image, so the result is GAP broadcast.
    let r = rand_t(&[1, 2, 1, 6], 11);
    let x = tape.constant(r.clone());
    let w = tape.constant(identity_strip_kernel(2, StripOrientation::Horizontal));
    let y = tape.value(strip_pool(&tape, x, StripOrientation::Horizontal, w, None).unwrap());
    for ch in 0..2 {
        let gap: f64 = r.data()[ch * 6..(ch + 1) * 6].iter().sum::<f64>() / 6.0;
        assert!(y.data()[ch * 6..(ch + 1) * 6].iter().all(|&v| (v - gap).abs() < 1e-12));
    }
}

#[test]
fn strip_pool_matches_mean_conv_broadcast() {
    let (c, h, wd) = (2, 4, 5);
    let r = rand_t(&[1, c, h, wd], 12);
    let k = rand_t(&[c, c, 3, 1], 13);
    let bias = rand_t(&[c], 14);
    let tape = Tape::<f64>::no_grad();
    let y = tape.value(
        strip_pool(&tape, tape.constant(r.clone()), StripOrientation::Horizontal, tape.constant(k.clone()), Some(tape.constant(bias.clone())))
            .unwrap(),
    );
    // Oracle: row means, then a kernel-3 filter down the rows, then repeat across columns.
    let mean = |ci: usize, row: isize| -> f64 {
        if row < 0 || row >= h as isize {
            return 0.0;
        }
        (0..wd).map(|j| r.at(&[0, ci, row as usize, j])).sum::<f64>() / wd as f64
    };
    for co in 0..c {
        for i in 0..h {
            let mut v = bias.data()[co];
            for ci in 0..c {
                for t in 0..3 {
                    v += k.at(&[co, ci, t, 0]) * mean(ci, i as isize + t as isize - 1);
                }
            }
            for j in 0..wd {
                assert!((y.at(&[0, co, i, j]) - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn activation_values() {
    assert_eq!(sigmoid_scalar(0.0f64), 0.5);
    assert!((softplus_scalar(0.0f64) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((softplus_scalar(0.0f64) - 2f64.ln()).abs() < 1e-6);
    let tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap());
    assert_eq!(tape.value(tape.relu(x)).data(), &[0.0, 2.0]);
    // Large magnitudes stay finite and strictly inside (0, 1) where representable.
    let s = sigmoid_scalar(-30.0f64);
    assert!(s > 0.0 && s < 1.0);
    assert!(softplus_scalar(800.0f64).is_finite());
}

#[test]
fn softmax_values() {
    let x = Tensor::<f64>::from_f64(&[1, 4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
    let y = softmax_tensor(&x, 1).unwrap();
    let e = std::f64::consts::E;
    let oracle = [e / (e + 3.0), 1.0 / (e + 3.0)];
    assert!((y.data()[0] - oracle[0]).abs() < 1e-12);
    assert!((y.data()[0] - 0.47536).abs() < 1e-5);
    assert!((y.data()[1] - 0.17488).abs() < 1e-5);
    let flat = softmax_tensor(&Tensor::<f64>::full(&[4], 3.0), 0).unwrap();
    assert!(flat.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let shifted = softmax_tensor(&x.map(|v| v + 100.0), 1).unwrap();
    assert!(shifted.max_abs_diff(&y) < 1e-6);
}

#[test]
fn layer_norm_values() {
    let tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.value(layer_norm(&tape, x, &[1], g, b, 1e-12).unwrap());
    let r = 1.5f64.sqrt();
    for (v, o) in y.data().iter().zip([-r, 0.0, r]) {
        assert!((v - o).abs() < 1e-9);
    }
    assert!((y.data()[0] + 1.2247).abs() < 1e-4);

    let c = tape.constant(Tensor::full(&[2, 3], 5.0));
    let y = tape.value(layer_norm(&tape, c, &[1], g, b, 1e-5).unwrap());
    assert!(y.data().iter().all(|&v| v == 0.0));

    let r = rand_t(&[2, 4, 3, 3], 21);
    let x = tape.constant(r.clone());
    let (g, b) = (tape.constant(Tensor::ones(&[4])), tape.constant(Tensor::zeros(&[4])));
    let y = tape.value(layer_norm(&tape, x, &[1], g, b, 1e-5).unwrap());
    let moments = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64)
    };
    for n in 0..2 {
        for p in 0..9 {
            let col: Vec<f64> = (0..4).map(|ch| y.data()[(n * 4 + ch) * 9 + p]).collect();
            let src: Vec<f64> = (0..4).map(|ch| r.data()[(n * 4 + ch) * 9 + p]).collect();
            let (m, v) = moments(&col);
            let (_, raw) = moments(&src);
            assert!(m.abs() < 1e-5);
            assert!((v - raw / (raw + 1e-5)).abs() < 1e-12, "{v}");
        }
    }
    let bad = tape.constant(Tensor::ones(&[3]));
    assert!(layer_norm(&tape, x, &[1], bad, b, 1e-5).is_err());
}

#[test]
fn batch_norm_modes() {
    let tape = Tape::<f64>::no_grad();
    let c = 3;
    let g = tape.constant(Tensor::ones(&[c]));
    let b = tape.constant(Tensor::zeros(&[c]));
    let r = rand_t(&[2, c, 4, 4], 31);
    let x = tape.constant(r.clone());
    let stats = RunningStats::new(c);
    let (y, none) = batch_norm(&tape, x, g, b, &stats, NormMode::Eval, 0.1, 0.0).unwrap();
    assert!(none.is_none());
    assert!(tape.value(y).max_abs_diff(&r) < 1e-15);

    let (y, upd) = batch_norm(&tape, x, g, b, &stats, NormMode::Train, 0.1, 1e-5).unwrap();
    let y = tape.value(y);
    let upd = upd.unwrap();
    for ch in 0..c {
        let vals: Vec<f64> = (0..2).flat_map(|n| r.data()[(n * c + ch) * 16..(n * c + ch + 1) * 16].to_vec()).collect();
        let outs: Vec<f64> = (0..2).flat_map(|n| y.data()[(n * c + ch) * 16..(n * c + ch + 1) * 16].to_vec()).collect();
        assert!((outs.iter().sum::<f64>() / 32.0).abs() < 1e-5);
        let mean = vals.iter().sum::<f64>() / 32.0;
        let unbiased = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 31.0;
        assert!((upd.mean.data()[ch] - 0.1 * mean).abs() < 1e-12);
        assert!((upd.var.data()[ch] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }

    let one = tape.constant(rand_t(&[1, c, 4, 4], 32));
    let err = batch_norm(&tape, one, g, b, &stats, NormMode::Train, 0.1, 1e-5).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.exit_code(), 1);
}

fn attn_weights(tape: &Tape<f64>, c: usize, seed: u64) -> (AttnWeights, [Tensor<f64>; 4]) {
    let ws = [0, 1, 2, 3].map(|i| rand_t(&[c, c, 1, 1], seed + i));
    let w = AttnWeights {
        wq: tape.constant(ws[0].clone()),
        wk: tape.constant(ws[1].clone()),
        wv: tape.constant(ws[2].clone()),
        wo: tape.constant(ws[3].clone()),
    };
    (w, ws)
}

fn matvec(w: &Tensor<f64>, v: &[f64]) -> Vec<f64> {
    let c = v.len();
    (0..c).map(|o| (0..c).map(|i| w.data()[o * c + i] * v[i]).sum()).collect()
}

/// Per-column (or per-row) attention computed with explicit loops.
fn naive_axial(x: &Tensor<f64>, ws: &[Tensor<f64>; 4], heads: usize, along_h: bool) -> Tensor<f64> {
    let (b, c, h, w) = x.dims4().unwrap();
    let dh = c / heads;
    let mut out = Tensor::zeros(x.shape());
    let feat = |n: usize, i: usize, j: usize| -> Vec<f64> { (0..c).map(|ch| x.at(&[n, ch, i, j])).collect() };
    let (lines, len) = if along_h { (w, h) } else { (h, w) };
    for n in 0..b {
        for line in 0..lines {
            let pos = |t: usize| if along_h { (t, line) } else { (line, t) };
            let q: Vec<_> = (0..len).map(|t| matvec(&ws[0], &feat(n, pos(t).0, pos(t).1))).collect();
            let k: Vec<_> = (0..len).map(|t| matvec(&ws[1], &feat(n, pos(t).0, pos(t).1))).collect();
            let v: Vec<_> = (0..len).map(|t| matvec(&ws[2], &feat(n, pos(t).0, pos(t).1))).collect();
            for t in 0..len {
                let mut ctx = vec![0.0; c];
                for hd in 0..heads {
                    let r = hd * dh..(hd + 1) * dh;
                    let scores: Vec<f64> = (0..len)
                        .map(|u| r.clone().map(|d| q[t][d] * k[u][d]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for u in 0..len {
                        let a = (scores[u] - m).exp() / z;
                        for d in r.clone() {
                            ctx[d] += a * v[u][d];
                        }
                    }
                }
                let o = matvec(&ws[3], &ctx);
                let (i, j) = pos(t);
                for ch in 0..c {
                    out.set(&[n, ch, i, j], o[ch]);
                }
            }
        }
    }
    out
}

#[test]
fn axial_attention_matches_loop_oracle() {
    let tape = Tape::<f64>::no_grad();
    let r = rand_t(&[1, 4, 3, 3], 41);
    let (w, ws) = attn_weights(&tape, 4, 50);
    for (axis, along_h) in [(AttnAxis::Height, true), (AttnAxis::Width, false)] {
        let y = tape.value(multi_head_axial_attention(&tape, tape.constant(r.clone()), axis, 2, w).unwrap());
        assert!(y.max_abs_diff(&naive_axial(&r, &ws, 2, along_h)) < 1e-5);
    }
    // Non-square shapes exercise the permutation bookkeeping.
    let r = rand_t(&[2, 4, 2, 5], 42);
    for (axis, along_h) in [(AttnAxis::Height, true), (AttnAxis::Width, false)] {
        let y = tape.value(multi_head_axial_attention(&tape, tape.constant(r.clone()), axis, 4, w).unwrap());
        assert!(y.max_abs_diff(&naive_axial(&r, &ws, 4, along_h)) < 1e-10);
    }
}

#[test]
fn axial_attention_singleton_and_equivariance() {
    let tape = Tape::<f64>::no_grad();
    let (w, ws) = attn_weights(&tape, 4, 60);
    let r = rand_t(&[1, 4, 1, 3], 61);
    let y = tape.value(multi_head_axial_attention(&tape, tape.constant(r.clone()), AttnAxis::Height, 2, w).unwrap());
    for j in 0..3 {
        let f: Vec<f64> = (0..4).map(|ch| r.at(&[0, ch, 0, j])).collect();
        let o = matvec(&ws[3], &matvec(&ws[2], &f));
        for ch in 0..4 {
            assert!((y.at(&[0, ch, 0, j]) - o[ch]).abs() < 1e-12);
        }
    }
    // Height attention mixes rows only within a column, so permuting columns commutes with it.
    let r = rand_t(&[1, 4, 3, 4], 62);
    let swap = |t: &Tensor<f64>| {
        let mut s = t.clone();
        for ch in 0..4 {
            for i in 0..3 {
                for j in 0..4 {
                    s.set(&[0, ch, i, j], t.at(&[0, ch, i, 3 - j]));
                }
            }
        }
        s
    };
    let a = tape.value(multi_head_axial_attention(&tape, tape.constant(swap(&r)), AttnAxis::Height, 2, w).unwrap());
    let b = swap(&tape.value(multi_head_axial_attention(&tape, tape.constant(r), AttnAxis::Height, 2, w).unwrap()));
    assert!(a.max_abs_diff(&b) < 1e-12);
    let x = tape.constant(rand_t(&[1, 4, 2, 2], 63));
    assert!(matches!(
        multi_head_axial_attention(&tape, x, AttnAxis::Width, 3, w),
        Err(Error::Config(_))
    ));
}

#[test]
fn bilinear_cases() {
    let r = rand_t(&[1, 2, 3, 4], 71);
    assert_eq!(interpolate_bilinear(&r, 1).unwrap(), r);
    let c = Tensor::<f64>::full(&[1, 1, 3, 3], 0.42);
    assert!(interpolate_bilinear(&c, 4).unwrap().data().iter().all(|&v| v == 0.42));

    // Output pixel o samples (o + 0.5)/2 - 0.5, clamped to the valid range.
    let cb = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = interpolate_bilinear(&cb, 2).unwrap();
    let coord = |o: usize| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
    for oy in 0..4 {
        for ox in 0..4 {
            let (sy, sx) = (coord(oy), coord(ox));
            let v = (1.0 - sy) * (1.0 - sx) * 1.0 + sy * sx * 1.0;
            assert!((y.at(&[0, 0, oy, ox]) - v).abs() < 1e-15, "({oy},{ox})");
        }
    }
    assert_eq!(y.at(&[0, 0, 0, 1]), 0.75);
    assert_eq!(y.at(&[0, 0, 1, 1]), 0.625);
}

#[test]
fn bilinear_offsets() {
    let x = rand_t(&[1, 3, 4, 4], 72);
    let zero = Tensor::zeros(&[1, 2, 8, 8]);
    assert_eq!(sample_bilinear(&x, 2, Some(&zero)).unwrap(), interpolate_bilinear(&x, 2).unwrap());
    let zero1 = Tensor::zeros(&[1, 2, 4, 4]);
    assert_eq!(sample_bilinear(&x, 1, Some(&zero1)).unwrap(), x);

    // Horizontal ramp: a +0.5 horizontal shift adds 0.5 wherever no clamping occurs.
    let mut ramp = Tensor::<f64>::zeros(&[1, 1, 4, 6]);
    for i in 0..4 {
        for j in 0..6 {
            ramp.set(&[0, 0, i, j], j as f64);
        }
    }
    let mut off = Tensor::zeros(&[1, 2, 4, 6]);
    for i in 0..4 {
        for j in 0..6 {
            off.set(&[0, 0, i, j], 0.5);
        }
    }
    let y = sample_bilinear(&ramp, 1, Some(&off)).unwrap();
    for i in 0..4 {
        for j in 0..6 {
            let want = (j as f64 + 0.5).min(5.0);
            assert!((y.at(&[0, 0, i, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_basics() {
    let tape = Tape::<f64>::new();
    let r = rand_t(&[3, 2], 81);
    let x = tape.leaf(r.clone(), true);
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(matches!(tape.backward(loss), Err(Error::Autodiff(_))));
    tape.reset_backward();
    assert!(tape.backward(loss).is_ok());

    let tape = Tape::<f64>::new();
    let x = tape.leaf(r.clone(), true);
    let g = tape.backward(tape.sum(tape.mul(x, x).unwrap())).unwrap();
    assert!(g.get(x).unwrap().max_abs_diff(&r.map(|v| 2.0 * v)) < 1e-15);

    let tape = Tape::<f64>::new();
    let x = tape.leaf(r.clone(), true);
    assert!(matches!(tape.backward(x), Err(Error::Autodiff(_))));
    let c = tape.constant(r);
    assert!(matches!(tape.backward(tape.sum(c)), Err(Error::Autodiff(_))));
}

#[test]
fn finite_difference_oracle() {
    let x = rand_t(&[5], 91);
    let g = finite_diff_grad(|t| t.sum(), &x, 1e-5);
    assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-8));
    let g = finite_diff_grad(|t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(), &x, 1e-5);
    assert!(g.max_abs_diff(&x) < 1e-7);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let g = finite_diff_grad(|t| t.data().iter().map(|&v| sig(2.0 * v)).sum(), &x, 1e-5);
    for (gv, xv) in g.data().iter().zip(x.data()) {
        let s = sig(2.0 * xv);
        assert!((gv - 2.0 * s * (1.0 - s)).abs() < 1e-6);
    }
}

#[test]
fn adamw_cases() {
    let cfg0 = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let mut p = Tensor::<f64>::from_f64(&[2], &[0.3, -0.4]).unwrap();
    let orig = p.clone();
    let g = Tensor::zeros(&[2]);
    let mut st = AdamWState::new();
    adamw_step(&mut [&mut p], &[&g], &mut st, 0.1, &cfg0).unwrap();
    assert_eq!(p, orig);

    let mut p = Tensor::<f64>::scalar(1.0);
    let g = Tensor::scalar(1.0);
    let mut st = AdamWState::new();
    adamw_step(&mut [&mut p], &[&g], &mut st, 0.1, &cfg0).unwrap();
    // m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps).
    assert!((p.item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    assert!((p.item() - 0.9).abs() < 1e-6);

    let mut p = Tensor::<f64>::scalar(2.0);
    let g = Tensor::scalar(0.0);
    let mut st = AdamWState::new();
    adamw_step(&mut [&mut p], &[&g], &mut st, 0.1, &AdamWConfig::default()).unwrap();
    assert!((p.item() - 2.0 * 0.999).abs() < 1e-15);

    let mut p = Tensor::<f64>::zeros(&[2]);
    let g = Tensor::zeros(&[3]);
    assert!(adamw_step(&mut [&mut p], &[&g], &mut AdamWState::new(), 0.1, &cfg0).is_err());
}

#[test]
fn poly_lr_cases() {
    assert_eq!(poly_lr(1e-3, 0, 10, 0.9).unwrap(), 1e-3);
    assert_eq!(poly_lr(1e-3, 10, 10, 0.9).unwrap(), 0.0);
    let lr = poly_lr(1e-5, 100, 200, 0.9).unwrap();
    assert!((lr - 1e-5 * 0.5f64.powf(0.9)).abs() < 1e-18);
    assert!((lr - 5.3589e-6).abs() < 1e-9);
    assert!(matches!(poly_lr(1e-5, 11, 10, 0.9), Err(Error::Config(_))));
}

#[test]
fn tensor_invariants() {
    assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    let t = Tensor::<f32>::from_f64(&[1], &[f64::NAN]).unwrap();
    assert!(matches!(t.check_finite("x"), Err(Error::Numeric(_))));
    assert_eq!(DType::from_tag(DType::F64.tag()), Some(DType::F64));
}

#[test]
fn determinism_across_runs() {
    let run = || {
        let tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::uniform(&[2, 4, 6, 6], -1.0, 1.0, &mut rng(5)));
        let w = tape.constant(Tensor::uniform(&[4, 4, 3, 3], -1.0, 1.0, &mut rng(6)));
        let y = tape.conv2d(x, w, None, ConvParams::same(3, 1)).unwrap();
        tape.tensor(tape.softmax(tape.gelu(y), 1).unwrap())
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let x = Tensor::new(&[3, 4], data).unwrap();
        let y = softmax_tensor(&x, 1).unwrap();
        for row in y.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_strictly_inside_unit_interval(v in -30.0f64..30.0) {
        let s = sigmoid_scalar(v);
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn conv_f32_matches_loop(seed in 0u64..1000, k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3) {
        let x = rand_t(&[1, 2, 6, 5], seed);
        let w = rand_t(&[3, 2, k, k], seed + 1);
        let pad = k / 2;
        let oracle = naive_conv(&x, &w, None, stride, pad, 1);
        let got = conv2d(&x.cast::<f32>(), &w.cast(), None, ConvParams::new(stride, pad, 1, 1)).unwrap();
        prop_assert!(got.cast::<f64>().max_abs_diff(&oracle) < 1e-6);
    }
}

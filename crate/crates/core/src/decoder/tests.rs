use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{check_param_grads, ParamCheck, ParamStore, NORM_EPS};
use crate::numerics::{conv2d, expand_tensor, interpolate_bilinear, sample_bilinear, sigmoid_scalar, Tape, Tensor};

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn conv(store: &ParamStore<f64>, l: &Conv2d, x: &Tensor<f64>) -> Tensor<f64> {
    let b = l.bias.map(|b| store.get(b).clone());
    conv2d(x, store.get(l.weight), b.as_ref(), l.params).unwrap()
}

fn binop(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    let s = if a.numel() >= b.numel() { a.shape().to_vec() } else { b.shape().to_vec() };
    expand_tensor(a, &s).unwrap().zip_map(&expand_tensor(b, &s).unwrap(), f).unwrap()
}

fn gap(x: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = x.dims4().unwrap();
    let mut out = Tensor::zeros(&[b, c, 1, 1]);
    for n in 0..b {
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += x.at(&[n, ch, i, j]);
                }
            }
            out.set(&[n, ch, 0, 0], acc / (h * w) as f64);
        }
    }
    out
}

fn bn_eval(store: &ParamStore<f64>, bn: &BatchNorm2d, x: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = x.dims4().unwrap();
    let (g, be, m, v) = (store.get(bn.gamma), store.get(bn.beta), store.get(bn.running_mean), store.get(bn.running_var));
    let mut out = x.clone();
    for n in 0..b {
        for ch in 0..c {
            let k = g.data()[ch] / (v.data()[ch] + NORM_EPS).sqrt();
            for i in 0..h {
                for j in 0..w {
                    out.set(&[n, ch, i, j], (x.at(&[n, ch, i, j]) - m.data()[ch]) * k + be.data()[ch]);
                }
            }
        }
    }
    out
}

fn gate_oracle(store: &ParamStore<f64>, w: &ScaleGateWeights, f: &Tensor<f64>) -> Tensor<f64> {
    let hidden = conv(store, &w.squeeze, &gap(f)).map(|v| v.max(0.0));
    conv(store, &w.excite, &hidden).map(sigmoid_scalar)
}

fn zero_conv(store: &mut ParamStore<f64>, l: &Conv2d, bias: f64) {
    let ws = store.get(l.weight).shape().to_vec();
    store.set(l.weight, Tensor::zeros(&ws)).unwrap();
    if let Some(b) = l.bias {
        let bs = store.get(b).shape().to_vec();
        store.set(b, Tensor::full(&bs, bias)).unwrap();
    }
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let e = store.entry(id);
        let shape = e.value.shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + k as u64);
        let v = if e.name.ends_with("running_var") || e.name.ends_with("gamma") {
            Tensor::uniform(&shape, 0.5, 1.5, &mut rng)
        } else if e.name.ends_with("bias") || e.name.ends_with("beta") || e.name.ends_with("running_mean") {
            Tensor::uniform(&shape, -0.3, 0.3, &mut rng)
        } else {
            continue;
        };
        store.set(id, v).unwrap();
    }
}

#[test]
fn scale_gate_range_oracle_and_neutral_point() {
    let mut store = ParamStore::new();
    let w = ScaleGateWeights::build(&mut Init::new(&mut store, 1), 8).unwrap();
    randomize(&mut store, 2);
    let f = rand_t(&[2, 8, 5, 4], 3);
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, false);
    let a = scale_gate(&ctx, tape.constant(f.clone()), &w).unwrap();
    let av = tape.value(a);
    assert_eq!(av.shape(), &[2, 8, 1, 1]);
    assert!(av.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(av.max_abs_diff(&gate_oracle(&store, &w, &f)) < 1e-12);

    zero_conv(&mut store, &w.excite, 0.0);
    let ctx = Ctx::new(&tape, &store, false);
    let a = scale_gate(&ctx, tape.constant(f), &w).unwrap();
    assert!(tape.value(a).data().iter().all(|&v| v == 0.5));
}

#[test]
fn zero_offsets_reproduce_bilinear_exactly() {
    for scale in [1, 2, 4, 8] {
        let mut store = ParamStore::new();
        let w = DynUpsampleWeights::build(&mut Init::new(&mut store, scale as u64), 3, scale).unwrap();
        zero_conv(&mut store, &w.offset, 0.0);
        let x = rand_t(&[2, 3, 3, 4], 10 + scale as u64);
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store, false);
        let y = dyn_upsample(&ctx, tape.constant(x.clone()), scale, Some(&w), UpsampleMode::Dynamic).unwrap();
        assert_eq!(*tape.value(y), interpolate_bilinear(&x, scale).unwrap(), "scale {scale}");
        let yb = dyn_upsample(&ctx, tape.constant(x.clone()), scale, None, UpsampleMode::Bilinear).unwrap();
        assert_eq!(*tape.value(yb), interpolate_bilinear(&x, scale).unwrap());
        if scale == 1 {
            assert_eq!(*tape.value(y), x);
        }
    }
}

#[test]
fn scale_outside_supported_set_is_rejected() {
    let tape = Tape::<f64>::no_grad();
    let store = ParamStore::new();
    let ctx = Ctx::new(&tape, &store, false);
    let x = tape.constant(rand_t(&[1, 1, 2, 2], 0));
    for s in [0, 3, 16] {
        assert!(matches!(dyn_upsample(&ctx, x, s, None, UpsampleMode::Bilinear), Err(Error::Config(_))));
    }
    assert!(dyn_upsample(&ctx, x, 2, None, UpsampleMode::Dynamic).is_err());
}

#[test]
fn pixel_shuffle_places_subpixel_channels() {
    let (b, s, h, w) = (2, 2, 3, 2);
    let c = 2 * s * s;
    let mut raw = Tensor::zeros(&[b, c, h, w]);
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    raw.set(&[n, ch, y, x], (n * 10000 + ch * 100 + y * 10 + x) as f64);
                }
            }
        }
    }
    let tape = Tape::no_grad();
    let store = ParamStore::new();
    let ctx = Ctx::new(&tape, &store, false);
    let out = tape.value(pixel_shuffle_offsets(&ctx, tape.constant(raw.clone()), s).unwrap()).as_ref().clone();
    assert_eq!(out.shape(), &[b, 2, h * s, w * s]);
    for n in 0..b {
        for k in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    for dy in 0..s {
                        for dx in 0..s {
                            let ch = k * s * s + dy * s + dx;
                            assert_eq!(out.at(&[n, k, y * s + dy, x * s + dx]), raw.at(&[n, ch, y, x]));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn constant_learned_offset_matches_displaced_sampling() {
    let scale = 2;
    let mut store = ParamStore::new();
    let w = DynUpsampleWeights::build(&mut Init::new(&mut store, 4), 1, scale).unwrap();
    // Channels 0..s^2 steer x, the rest y: +0.2 px horizontally, 0 vertically.
    let ws = store.get(w.offset.weight).shape().to_vec();
    store.set(w.offset.weight, Tensor::zeros(&ws)).unwrap();
    let bias: Vec<f64> = (0..2 * scale * scale).map(|k| if k < scale * scale { 0.8f64.atanh() } else { 0.0 }).collect();
    store.set(w.offset.bias.unwrap(), Tensor::new(&[8], bias).unwrap()).unwrap();

    // Horizontal ramp: sampling shifted by 0.2 px raises interior values by 0.2.
    let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(|i| (i % 4) as f64).collect()).unwrap();
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, false);
    let y = tape.value(dyn_upsample(&ctx, tape.constant(x.clone()), scale, Some(&w), UpsampleMode::Dynamic).unwrap()).as_ref().clone();
    let plain = interpolate_bilinear(&x, scale).unwrap();
    let mut off = Tensor::zeros(&[1, 2, 8, 8]);
    for i in 0..8 {
        for j in 0..8 {
            off.set(&[0, 0, i, j], 0.2);
        }
    }
    let reference = sample_bilinear(&x, scale, Some(&off)).unwrap();
    assert!(y.max_abs_diff(&reference) < 1e-12);
    for i in 0..8 {
        for j in 1..6 {
            assert!((y.at(&[0, 0, i, j]) - plain.at(&[0, 0, i, j]) - 0.2).abs() < 1e-12);
        }
    }
}

fn decoder_setup(mode: UpsampleMode, seed: u64) -> (ParamStore<f64>, DecoderWeights, StageFeaturesData) {
    let cfg = DecoderConfig { in_channels: [2, 3, 4, 5], embed: 4, lambda: 0.5, upsample: mode };
    let mut store = ParamStore::new();
    let w = DecoderWeights::build(&mut Init::new(&mut store, seed), &cfg).unwrap();
    randomize(&mut store, seed + 100);
    let feats = (0..4).map(|s| rand_t(&[2, cfg.in_channels[s], 8 >> s, 8 >> s], seed + s as u64)).collect();
    (store, w, StageFeaturesData(feats))
}

struct StageFeaturesData(Vec<Tensor<f64>>);

impl StageFeaturesData {
    fn on(&self, tape: &Tape<f64>) -> StageFeatures {
        let f: Vec<FeatureMap> = self.0.iter().enumerate().map(|(s, t)| FeatureMap::new(tape.constant(t.clone()), s + 1)).collect();
        StageFeatures { f: f.try_into().unwrap() }
    }
}

#[test]
fn lambda_zero_and_linearity() {
    let (store, w, feats) = decoder_setup(UpsampleMode::Dynamic, 20);
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, false);
    let st = feats.on(&tape);
    let o0 = bmf_forward_with(&ctx, &st, &w, 0.0).unwrap();
    assert_eq!(*tape.value(o0.fused), *tape.value(o0.f_sum));
    let m = tape.value(o0.m_bound);
    assert_eq!(m.shape(), &[2, 1, 8, 8]);
    assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(tape.shape(o0.logits), vec![2, 1, 32, 32]);

    let o1 = bmf_forward_with(&ctx, &st, &w, 1.0).unwrap();
    let delta = binop(&tape.value(o1.fused), &tape.value(o0.fused), |a, b| a - b);
    for lambda in [0.25, 0.5, 2.0, -1.0] {
        let o = bmf_forward_with(&ctx, &st, &w, lambda).unwrap();
        let predicted = binop(&tape.value(o0.fused), &delta.map(|d| lambda * d), |a, b| a + b);
        assert!(tape.value(o.fused).max_abs_diff(&predicted) < 1e-12, "lambda {lambda}");
    }
}

#[test]
fn fusion_oracle_with_unit_gates_and_still_offsets() {
    let (mut store, w, feats) = decoder_setup(UpsampleMode::Dynamic, 30);
    for head in &w.stages {
        zero_conv(&mut store, &head.gate.excite, 1e4);
        if let Some(up) = &head.up {
            zero_conv(&mut store, &up.offset, 0.0);
        }
    }
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, false);
    let out = bmf_forward(&ctx, &feats.on(&tape), &w).unwrap();

    let mut f_prime = Vec::new();
    for (s, f) in feats.0.iter().enumerate() {
        let z = conv(&store, &w.stages[s].mlp, f);
        f_prime.push(interpolate_bilinear(&z, 1 << s).unwrap());
    }
    let f_sum = f_prime[1..].iter().fold(f_prime[0].clone(), |acc, t| binop(&acc, t, |a, b| a + b));
    let hidden = bn_eval(&store, &w.boundary_bn, &conv(&store, &w.boundary_conv, &f_prime[0])).map(|v| v.max(0.0));
    let m = conv(&store, &w.boundary_out, &hidden).map(sigmoid_scalar);
    let inj = binop(&conv(&store, &w.proj, &f_prime[0]), &m, |a, b| a * b);
    let fused = binop(&f_sum, &inj, |a, b| a + 0.5 * b);
    let seg = bn_eval(&store, &w.seg_bn, &conv(&store, &w.seg_conv, &fused)).map(|v| v.max(0.0));
    let logits = interpolate_bilinear(&conv(&store, &w.seg_out, &seg), 4).unwrap();

    for (s, fp) in f_prime.iter().enumerate() {
        assert!(tape.value(out.f_prime[s]).max_abs_diff(fp) < 1e-12);
    }
    assert!(tape.value(out.m_bound).max_abs_diff(&m) < 1e-12);
    assert!(tape.value(out.fused).max_abs_diff(&fused) < 1e-12);
    assert!(tape.value(out.logits).max_abs_diff(&logits) < 1e-12);
}

#[test]
fn bilinear_mode_allocates_no_offset_weights() {
    let (store_b, w, _) = decoder_setup(UpsampleMode::Bilinear, 40);
    let (store_d, _, _) = decoder_setup(UpsampleMode::Dynamic, 40);
    assert!(w.stages.iter().all(|s| s.up.is_none()));
    assert!(store_b.entries().iter().all(|e| !e.name.contains("offset")));
    assert!(store_d.len() > store_b.len());
    assert!(store_d.entries().iter().any(|e| e.name == "decoder.stage4.upsample.offset.weight"));
}

#[test]
fn misaligned_stage_is_a_shape_error() {
    let (store, w, mut feats) = decoder_setup(UpsampleMode::Dynamic, 50);
    feats.0[2] = rand_t(&[2, 4, 3, 2], 1);
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, false);
    assert!(matches!(bmf_forward(&ctx, &feats.on(&tape), &w), Err(Error::Shape { .. })));
}

#[test]
fn decoder_gradient_check() {
    for (mode, train) in [(UpsampleMode::Dynamic, true), (UpsampleMode::Dynamic, false), (UpsampleMode::Bilinear, true)] {
        let (store, w, feats) = decoder_setup(mode, 60);
        let opts = ParamCheck { per_tensor: 3, seed: 7, train, ..ParamCheck::default() };
        let r = check_param_grads("decoder", &store, opts, |ctx| Ok(bmf_forward(ctx, &feats.on(ctx.tape), &w)?.logits)).unwrap();
        assert!(r.passed(), "{mode} train={train}: {r}");
    }
}

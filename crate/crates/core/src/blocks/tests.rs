use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::hsr::{GtrWeights, LmrWeights};
use super::sfb::SfbWeights;
use super::*;
use crate::nn::{check_param_grads, Conv2d, Ctx, Init, ParamCheck, ParamStore};
use crate::numerics::{conv2d, expand_tensor, gelu_scalar, sigmoid_scalar, Tape, Tensor};
use crate::scan::{fs2d, make_route, selective_scan, serialize_tensor, deserialize_tensor, ScanStrategy, SsmLayer};

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn conv(store: &ParamStore<f64>, l: &Conv2d, x: &Tensor<f64>) -> Tensor<f64> {
    let b = l.bias.map(|b| store.get(b).clone());
    conv2d(x, store.get(l.weight), b.as_ref(), l.params).unwrap()
}

fn sigmoid(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(sigmoid_scalar)
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let s = if a.numel() >= b.numel() { a.shape().to_vec() } else { b.shape().to_vec() };
    expand_tensor(a, &s).unwrap().zip_map(&expand_tensor(b, &s).unwrap(), |x, y| x + y).unwrap()
}

fn mul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let s = if a.numel() >= b.numel() { a.shape().to_vec() } else { b.shape().to_vec() };
    expand_tensor(a, &s).unwrap().zip_map(&expand_tensor(b, &s).unwrap(), |x, y| x * y).unwrap()
}

/// Mean over the listed spatial axes (2 and/or 3), keeping them as size 1.
fn spatial_mean(x: &Tensor<f64>, over_h: bool, over_w: bool) -> Tensor<f64> {
    let (b, c, h, w) = x.dims4().unwrap();
    let (oh, ow) = (if over_h { 1 } else { h }, if over_w { 1 } else { w });
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let count = (if over_h { h } else { 1 } * if over_w { w } else { 1 }) as f64;
    for n in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let idx = [n, ch, if over_h { 0 } else { i }, if over_w { 0 } else { j }];
                    out.set(&idx, out.at(&idx) + x.at(&[n, ch, i, j]) / count);
                }
            }
        }
    }
    out
}

fn concat_channels(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let (b, _, h, w) = parts[0].dims4().unwrap();
    let ctot: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Tensor::zeros(&[b, ctot, h, w]);
    let mut off = 0;
    for p in parts {
        let c = p.shape()[1];
        for n in 0..b {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out.set(&[n, off + ch, i, j], p.at(&[n, ch, i, j]));
                    }
                }
            }
        }
        off += c;
    }
    out
}

struct Fixture {
    store: ParamStore<f64>,
}

impl Fixture {
    fn new() -> Self {
        Self { store: ParamStore::new() }
    }

    fn init(&mut self, seed: u64) -> Init<'_, f64> {
        Init::new(&mut self.store, seed)
    }

    /// Randomize every bias so that zero-initialized terms are exercised.
    fn randomize_biases(&mut self, seed: u64) {
        let ids: Vec<_> = self.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let e = self.store.entry(id);
            if e.name.ends_with("bias") || e.name.ends_with("beta") || e.name.ends_with("b_delta") {
                let t = Tensor::uniform(e.value.shape(), -0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(seed + k as u64));
                self.store.set(id, t).unwrap();
            }
        }
    }

    fn force_conv(&mut self, l: &Conv2d, bias: f64) {
        let ws = self.store.get(l.weight).shape().to_vec();
        self.store.set(l.weight, Tensor::zeros(&ws)).unwrap();
        let b = l.bias.unwrap();
        let bs = self.store.get(b).shape().to_vec();
        self.store.set(b, Tensor::full(&bs, bias)).unwrap();
    }
}

fn asg_oracle(s: &ParamStore<f64>, w: &AsgWeights, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let shape = x.shape().to_vec();
    let rows = conv(s, &w.coord_h, &spatial_mean(x, false, true));
    let cols = conv(s, &w.coord_w, &spatial_mean(x, true, false));
    let f_coord = add(&expand_tensor(&rows, &shape).unwrap(), &expand_tensor(&cols, &shape).unwrap());
    let mut sh = w.strip_h;
    sh.params.padding = (1, 0);
    let mut sv = w.strip_v;
    sv.params.padding = (0, 1);
    let strip_h = expand_tensor(&conv(s, &sh, &spatial_mean(x, false, true)), &shape).unwrap();
    let strip_v = expand_tensor(&conv(s, &sv, &spatial_mean(x, true, false)), &shape).unwrap();
    let f_strip = add(&strip_h, &strip_v);
    let gate = sigmoid(&conv(s, &w.gate, &concat_channels(&[f_coord, f_strip])));
    (add(x, &mul(x, &gate)), gate)
}

#[test]
fn asg_gate_extremes_and_oracle() {
    let mut f = Fixture::new();
    let w = AsgWeights::build(&mut f.init(1), 4).unwrap();
    f.randomize_biases(2);
    let x = rand_t(&[2, 4, 5, 6], 3);
    let tape = Tape::no_grad();

    {
        let ctx = Ctx::new(&tape, &f.store, false);
        let (y, g) = asg_forward(&ctx, &FeatureMap::new(tape.constant(x.clone()), 1), &w).unwrap();
        let (oy, og) = asg_oracle(&f.store, &w, &x);
        assert!(tape.value(y.values).max_abs_diff(&oy) < 1e-12);
        assert!(tape.value(g.values).max_abs_diff(&og) < 1e-12);
        assert!(g.is_valid(&tape, 0.0));
    }

    f.force_conv(&w.gate, -1e4);
    {
        let ctx = Ctx::new(&tape, &f.store, false);
        let (y, _) = asg_forward(&ctx, &FeatureMap::new(tape.constant(x.clone()), 1), &w).unwrap();
        assert_eq!(*tape.value(y.values), x);
    }
    f.force_conv(&w.gate, 1e4);
    let ctx = Ctx::new(&tape, &f.store, false);
    let (y, _) = asg_forward(&ctx, &FeatureMap::new(tape.constant(x.clone()), 1), &w).unwrap();
    assert_eq!(*tape.value(y.values), x.map(|v| 2.0 * v));
}

fn pmf_setup(seed: u64) -> (Fixture, PmfWeights) {
    let mut f = Fixture::new();
    let w = PmfWeights::build(&mut f.init(seed), 3).unwrap();
    f.randomize_biases(seed + 1);
    (f, w)
}

#[test]
fn pmf_convexity_uniform_and_oracle() {
    let (mut f, w) = pmf_setup(10);
    let x_asg = rand_t(&[2, 3, 4, 5], 11);
    let ys: Vec<Tensor<f64>> = (0..4).map(|k| rand_t(&[2, 3, 4, 5], 20 + k)).collect();
    let tape = Tape::no_grad();
    let run = |store: &ParamStore<f64>, ys: &[Tensor<f64>]| {
        let ctx = Ctx::new(&tape, store, false);
        let maps: [_; 4] = std::array::from_fn(|k| tape.constant(ys[k].clone()));
        let g = pmf::directional_gates(&ctx, &FeatureMap::new(tape.constant(x_asg.clone()), 1), &w).unwrap();
        assert!(g.is_valid(&tape, 1e-12));
        (tape.tensor(pmf::aggregate(&ctx, &g, &maps).unwrap()), tape.tensor(g.values))
    };

    // Explicit softmax over the four channels and weighted sum.
    let (out, gates) = run(&f.store, &ys);
    let local = conv(&f.store, &w.local, &x_asg);
    let global = conv(&f.store, &w.global, &spatial_mean(&x_asg, true, true));
    let m = add(&local, &global);
    for n in 0..2 {
        for i in 0..4 {
            for j in 0..5 {
                let logits: Vec<f64> = (0..4).map(|k| m.at(&[n, k, i, j])).collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                let wk: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
                for k in 0..4 {
                    assert!((gates.at(&[n, k, i, j]) - wk[k]).abs() < 1e-12);
                }
                for ch in 0..3 {
                    let want: f64 = (0..4).map(|k| wk[k] * ys[k].at(&[n, ch, i, j])).sum();
                    let got = out.at(&[n, ch, i, j]);
                    assert!((got - want).abs() < 1e-12);
                    let lo = (0..4).map(|k| ys[k].at(&[n, ch, i, j])).fold(f64::MAX, f64::min);
                    let hi = (0..4).map(|k| ys[k].at(&[n, ch, i, j])).fold(f64::MIN, f64::max);
                    assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
                }
            }
        }
    }

    let same = vec![ys[0].clone(); 4];
    assert!(run(&f.store, &same).0.max_abs_diff(&ys[0]) < 1e-12);

    f.force_conv(&w.local, 0.0);
    f.force_conv(&w.global, 0.0);
    let mean = ys.iter().skip(1).fold(ys[0].clone(), |a, y| add(&a, y)).map(|v| v / 4.0);
    assert!(run(&f.store, &ys).0.max_abs_diff(&mean) < 1e-12);
}

fn lmr_oracle(s: &ParamStore<f64>, w: &LmrWeights, x_pmf: &Tensor<f64>, x_base: &Tensor<f64>) -> Tensor<f64> {
    let parts: Vec<_> = w.branches.iter().map(|b| conv(s, b, x_pmf)).collect();
    let f_tilde = conv(s, &w.proj, &concat_channels(&parts));
    let g = sigmoid(&conv(s, &w.gate, &f_tilde));
    add(&mul(&g.map(|v| 1.0 - v), x_base), &mul(&g, &f_tilde))
}

#[test]
fn lmr_gate_extremes_and_oracle() {
    let mut f = Fixture::new();
    let w = LmrWeights::build(&mut f.init(30), 4, &[1, 2, 3]).unwrap();
    f.randomize_biases(31);
    let x_pmf = rand_t(&[1, 4, 7, 7], 32);
    let x_base = rand_t(&[1, 4, 7, 7], 33);
    let tape = Tape::no_grad();
    let run = |store: &ParamStore<f64>, stage: usize| {
        let ctx = Ctx::new(&tape, store, false);
        lmr_forward(
            &ctx,
            &FeatureMap::new(tape.constant(x_pmf.clone()), stage),
            &FeatureMap::new(tape.constant(x_base.clone()), stage),
            &w,
        )
        .map(|(y, _)| tape.tensor(y.values))
    };
    assert!(run(&f.store, 1).unwrap().max_abs_diff(&lmr_oracle(&f.store, &w, &x_pmf, &x_base)) < 1e-12);
    assert!(run(&f.store, 3).is_err());

    f.force_conv(&w.gate, -1e4);
    assert_eq!(run(&f.store, 2).unwrap(), x_base);
    f.force_conv(&w.gate, 1e4);
    let parts: Vec<_> = w.branches.iter().map(|b| conv(&f.store, b, &x_pmf)).collect();
    let f_tilde = conv(&f.store, &w.proj, &concat_channels(&parts));
    assert!(run(&f.store, 2).unwrap().max_abs_diff(&f_tilde) < 1e-15);
}

fn gtr_setup(seed: u64) -> (Fixture, GtrWeights) {
    let mut f = Fixture::new();
    let w = GtrWeights::build(&mut f.init(seed), 4, 4, 2).unwrap();
    f.randomize_biases(seed + 1);
    (f, w)
}

#[test]
fn gtr_residual_skeleton() {
    let (mut f, w) = gtr_setup(40);
    for l in [w.attn_h.wo, w.attn_w.wo] {
        let s = f.store.get(l.weight).shape().to_vec();
        f.store.set(l.weight, Tensor::zeros(&s)).unwrap();
    }
    f.force_conv(&w.ffn_out, 0.0);
    let x_pmf = rand_t(&[2, 4, 3, 5], 41);
    let x_base = rand_t(&[2, 4, 3, 5], 42);
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &f.store, false);
    let y = gtr_forward(
        &ctx,
        &FeatureMap::new(tape.constant(x_pmf.clone()), 3),
        &FeatureMap::new(tape.constant(x_base.clone()), 3),
        &w,
    )
    .unwrap();
    assert_eq!(*tape.value(y.values), add(&x_pmf, &x_base));
    let early = gtr_forward(&ctx, &FeatureMap::new(y.values, 2), &FeatureMap::new(y.values, 2), &w);
    assert!(early.is_err());
}

#[test]
fn gtr_single_pixel_hand_composition() {
    let (f, w) = gtr_setup(50);
    let s = &f.store;
    let x_pmf = rand_t(&[1, 4, 1, 1], 51);
    let x_base = rand_t(&[1, 4, 1, 1], 52);
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, s, false);
    let y = gtr_forward(
        &ctx,
        &FeatureMap::new(tape.constant(x_pmf.clone()), 4),
        &FeatureMap::new(tape.constant(x_base.clone()), 4),
        &w,
    )
    .unwrap();

    let mat = |l: &Conv2d, v: &[f64]| -> Vec<f64> {
        let wt = s.get(l.weight);
        let (o, i) = (wt.shape()[0], wt.shape()[1]);
        (0..o)
            .map(|r| l.bias.map_or(0.0, |b| s.get(b).data()[r]) + (0..i).map(|k| wt.data()[r * i + k] * v[k]).sum::<f64>())
            .collect()
    };
    let ln = |n: &crate::nn::ChannelLayerNorm, v: &[f64]| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
        let (g, b) = (s.get(n.gamma).data(), s.get(n.beta).data());
        v.iter().enumerate().map(|(k, a)| (a - m) / (var + 1e-5).sqrt() * g[k] + b[k]).collect()
    };
    let vadd = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
    // A single position attends only to itself, leaving the value path.
    let x_in = vadd(x_pmf.data(), x_base.data());
    let x_h = vadd(&mat(&w.attn_h.wo, &mat(&w.attn_h.wv, &ln(&w.ln_h, &x_in))), &x_in);
    let x_w = vadd(&mat(&w.attn_w.wo, &mat(&w.attn_w.wv, &ln(&w.ln_w, &x_h))), &x_h);
    let hidden: Vec<f64> = mat(&w.ffn_in, &ln(&w.ln_ffn, &x_w)).into_iter().map(gelu_scalar).collect();
    let out = vadd(&mat(&w.ffn_out, &hidden), &x_w);
    for (a, b) in tape.value(y.values).data().iter().zip(&out) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gtr_preserves_shape() {
    let (f, w) = gtr_setup(55);
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &f.store, false);
    for (h, wd) in [(1, 7), (5, 2), (4, 4)] {
        let x = FeatureMap::new(tape.constant(rand_t(&[1, 4, h, wd], 56)), 3);
        let y = gtr_forward(&ctx, &x, &x, &w).unwrap();
        assert_eq!(tape.shape(y.values), vec![1, 4, h, wd]);
    }
}

#[test]
fn hsr_dispatch() {
    let cfg = BlockConfig::new(4);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(&mut store, 60);
    let shallow = HsrWeights::build(&mut init, 1, &cfg).unwrap();
    let deep = init.scope("deep", |i| HsrWeights::build(i, 4, &cfg)).unwrap();
    assert!(HsrWeights::build(&mut init, 0, &cfg).is_err());
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, false);
    let a = FeatureMap::new(tape.constant(rand_t(&[1, 4, 4, 4], 61)), 1);
    let b = FeatureMap::new(tape.constant(rand_t(&[1, 4, 4, 4], 62)), 1);

    let HsrWeights::Lmr(lw) = &shallow else { panic!("stage 1 builds LMR") };
    let via = hsr_forward(&ctx, &a, &b, 1, &shallow).unwrap();
    let direct = lmr_forward(&ctx, &a, &b, lw).unwrap().0;
    assert_eq!(*tape.value(via.values), *tape.value(direct.values));

    let HsrWeights::Gtr(gw) = &deep else { panic!("stage 4 builds GTR") };
    let via = hsr_forward(&ctx, &a, &b, 4, &deep).unwrap();
    let direct = gtr_forward(&ctx, &FeatureMap { stage: 4, ..a }, &b, gw).unwrap();
    assert_eq!(*tape.value(via.values), *tape.value(direct.values));

    assert!(hsr_forward(&ctx, &a, &b, 0, &shallow).is_err());
    assert!(hsr_forward(&ctx, &a, &b, 5, &deep).is_err());
    assert!(hsr_forward(&ctx, &a, &b, 3, &shallow).is_err());
}

#[test]
fn hffu_purity_extremes_and_oracle() {
    let mut f = Fixture::new();
    let w = HffuWeights::build(&mut f.init(70), 4).unwrap();
    f.randomize_biases(71);
    let x = rand_t(&[2, 4, 3, 5], 72);
    let tape = Tape::no_grad();
    let run = |store: &ParamStore<f64>, x: &Tensor<f64>| {
        let ctx = Ctx::new(&tape, store, false);
        let (y, gc, gs) = hffu_forward(&ctx, &FeatureMap::new(tape.constant(x.clone()), 1), &w).unwrap();
        assert!(gc.is_valid(&tape, 0.0) && gs.is_valid(&tape, 0.0));
        tape.tensor(y.values)
    };
    let zero = Tensor::zeros(&[2, 4, 3, 5]);
    assert_eq!(run(&f.store, &zero), zero);

    let g_ch = sigmoid(&conv(&f.store, &w.excite, &spatial_mean(&x, true, true)));
    let g_sp = sigmoid(&conv(&f.store, &w.spatial, &x));
    let want = add(&mul(&g_ch, &x), &mul(&g_sp, &x));
    let got = run(&f.store, &x);
    assert!(got.max_abs_diff(&want) < 1e-12);
    assert!(got.data().iter().zip(x.data()).all(|(y, x)| y.abs() <= 2.0 * x.abs()));

    f.force_conv(&w.excite, 1e4);
    f.force_conv(&w.spatial, 1e4);
    assert_eq!(run(&f.store, &x), x.map(|v| 2.0 * v));
    f.force_conv(&w.excite, -1e4);
    f.force_conv(&w.spatial, -1e4);
    assert!(run(&f.store, &x).data().iter().all(|&v| v == 0.0));
}

/// Unit-affine layer norm over the channel axis.
fn channel_ln(x: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = x.dims4().unwrap();
    let mut out = x.clone();
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let v: Vec<f64> = (0..c).map(|k| x.at(&[n, k, i, j])).collect();
                let mu = v.iter().sum::<f64>() / c as f64;
                let var = v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / c as f64;
                for k in 0..c {
                    out.set(&[n, k, i, j], (v[k] - mu) / (var + crate::nn::NORM_EPS).sqrt());
                }
            }
        }
    }
    out
}

fn sfb_setup(cfg: &BlockConfig, stage: usize, seed: u64) -> (ParamStore<f64>, SfbWeights) {
    let mut store = ParamStore::new();
    let w = SfbWeights::build(&mut Init::new(&mut store, seed), "sfb", stage, cfg).unwrap();
    (store, w)
}

#[test]
fn sfb_all_off_is_normalized_scan_plus_input() {
    let cfg = BlockConfig::new(4).with_toggles([false; 4]);
    let (store, w) = sfb_setup(&cfg, 2, 80);
    assert_eq!(w.ssm.len(), 1);
    let x = rand_t(&[1, 4, 4, 6], 81);
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, false);
    let out = sfb_forward(&ctx, &FeatureMap::new(tape.constant(x.clone()), 2), &w).unwrap();
    let route = make_route(ScanStrategy::HRaster, 4, 6).unwrap();
    let scanned = deserialize_tensor(&selective_scan(&serialize_tensor(&channel_ln(&x), &route).unwrap(), &w.ssm[0].to_params(&store)).unwrap(), &route).unwrap();
    assert!(tape.value(out.out.values).max_abs_diff(&add(&channel_ln(&scanned), &x)) < 1e-12);
}

#[test]
fn sfb_full_equals_manual_chain() {
    for stage in [1, 3] {
        let cfg = BlockConfig::new(4);
        let (store, w) = sfb_setup(&cfg, stage, 90 + stage as u64);
        let x = rand_t(&[2, 4, 4, 4], 91);
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store, false);
        let xb = FeatureMap::new(tape.constant(x.clone()), stage);
        let out = sfb_forward(&ctx, &xb, &w).unwrap();
        assert_eq!(tape.shape(out.out.values), vec![2, 4, 4, 4]);
        assert!(out.directional_gates.unwrap().is_valid(&tape, 1e-6));

        let (x_asg, _) = asg_forward(&ctx, &xb, w.asg.as_ref().unwrap()).unwrap();
        let ssm: &[SsmLayer; 4] = w.ssm.as_slice().try_into().unwrap();
        let dirs = fs2d(&ctx, w.scan_norm.forward(&ctx, xb.values).unwrap(), ssm).unwrap();
        let (x_pmf, _) = pmf_forward(&ctx, &xb, &x_asg, &dirs, w.pmf.as_ref().unwrap()).unwrap();
        let x_pmf = x_pmf.with(w.out_norm.forward(&ctx, x_pmf.values).unwrap());
        let x_hsr = hsr_forward(&ctx, &x_pmf, &xb, stage, w.hsr.as_ref().unwrap()).unwrap();
        let (manual, _, _) = hffu_forward(&ctx, &x_hsr, w.hffu.as_ref().unwrap()).unwrap();
        assert_eq!(*tape.value(out.out.values), *tape.value(manual.values));
    }
}

#[test]
fn sfb_scan_modes_build_and_run() {
    let x = rand_t(&[1, 4, 4, 4], 95);
    for mode in [ScanMode::Sass, ScanMode::Single(ScanStrategy::DiagSnake), ScanMode::Single(ScanStrategy::VRaster)] {
        let cfg = BlockConfig { scan: mode, ..BlockConfig::new(4) };
        let (store, w) = sfb_setup(&cfg, 1, 96);
        assert!(w.pmf.is_none());
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store, false);
        let out = sfb_forward(&ctx, &FeatureMap::new(tape.constant(x.clone()), 1), &w).unwrap();
        assert!(tape.value(out.out.values).is_finite());
        assert_eq!(mode.to_string().parse::<ScanMode>().unwrap(), mode);
    }
}

#[test]
fn block_config_validation() {
    assert!(BlockConfig { heads: 3, ..BlockConfig::new(4) }.validate().is_err());
    assert!(BlockConfig { dilations: vec![], ..BlockConfig::new(4) }.validate().is_err());
    assert!(BlockConfig::new(8).validate().is_ok());
}

#[test]
fn sfb_gradient_check() {
    for stage in [1, 3] {
        let cfg = BlockConfig::new(4);
        let (mut store, w) = sfb_setup(&cfg, stage, 100 + stage as u64);
        // Nonzero biases so every bias gradient is nontrivial.
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if store.entry(id).name.ends_with("bias") {
                let s = store.get(id).shape().to_vec();
                store.set(id, rand_t(&s, 500 + k as u64).map(|v| 0.3 * v)).unwrap();
            }
        }
        let x = rand_t(&[1, 4, 6, 6], 102);
        let opts = ParamCheck { per_tensor: 4, seed: stage as u64, ..ParamCheck::default() };
        let r = check_param_grads("sfb", &store, opts, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            Ok(sfb_forward(ctx, &FeatureMap::new(xv, stage), &w)?.out.values)
        })
        .unwrap();
        assert!(r.passed(), "stage {stage}: {r}");
    }
}

#[test]
fn sfb_input_gradient_check() {
    let cfg = BlockConfig::new(4);
    let (store, w) = sfb_setup(&cfg, 2, 110);
    let x = rand_t(&[1, 4, 6, 6], 111);
    let r = crate::numerics::check_op("sfb input", &[x], 1e-6, 3, |t, v| {
        let ctx = Ctx::new(t, &store, false);
        Ok(sfb_forward(&ctx, &FeatureMap::new(v[0], 2), &w)?.out.values)
    })
    .unwrap();
    assert!(r.passed(), "{r}");
}


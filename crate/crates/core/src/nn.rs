//! Named parameter storage, deterministic initialization and the small set of
//! stateful layers (convolution, batch norm, layer norm, dropout) shared by the
//! blocks, decoder and model.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{batch_norm, layer_norm, ConvParams, NormMode, RunningStats, Scalar, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is stable and is the
/// order used by checkpoints and the optimizer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{}: {:?} vs {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    /// Ids and mutable values of every trainable tensor, in insertion order.
    pub fn trainable_mut(&mut self) -> Vec<(ParamId, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, e)| (ParamId(i), &mut e.value))
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Deterministic initializer writing into a [`ParamStore`] under a name prefix.
///
/// All random draws are made in f64 from a ChaCha8 stream and then rounded to
/// `T`, so an f32 and an f64 model built from the same seed agree up to
/// rounding.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(&full, value, true)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(&full, value, false)
    }

    /// Uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`, where fan-in is the
    /// product of every axis but the first.
    pub fn kaiming(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::ones(shape))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Per-forward-pass state: the tape, lazily created parameter leaves, the
/// train/eval switch, the dropout stream, pending batch-norm updates and
/// optional feature taps.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    vars: RefCell<Vec<Option<Var>>>,
    train: bool,
    track_grads: bool,
    dropout_rng: RefCell<ChaCha8Rng>,
    bn_updates: RefCell<Vec<(ParamId, ParamId, RunningStats<T>)>>,
    taps: RefCell<Option<Vec<(String, Tensor<T>)>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            train,
            track_grads: tape.grad_enabled(),
            dropout_rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
            bn_updates: RefCell::new(Vec::new()),
            taps: RefCell::new(None),
        }
    }

    pub fn with_dropout_seed(self, seed: u64) -> Self {
        *self.dropout_rng.borrow_mut() = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// Record named intermediate tensors passed to [`Ctx::tap`].
    pub fn with_taps(self) -> Self {
        *self.taps.borrow_mut() = Some(Vec::new());
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape leaf for a stored tensor, created on first use.
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = self.tape.leaf(e.value.clone(), e.trainable && self.track_grads);
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Parameters that took part in this pass, with their leaves.
    pub fn used_params(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .filter(|(id, _)| self.store.entry(*id).trainable)
            .collect()
    }

    pub fn take_bn_updates(&self) -> Vec<(ParamId, ParamId, RunningStats<T>)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    pub fn tap(&self, name: impl Into<String>, v: Var) {
        if let Some(taps) = self.taps.borrow_mut().as_mut() {
            taps.push((name.into(), self.tape.tensor(v)));
        }
    }

    pub fn take_taps(&self) -> Vec<(String, Tensor<T>)> {
        self.taps.borrow_mut().take().unwrap_or_default()
    }

    /// Inverted dropout: active only in training mode.
    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x);
        let keep = 1.0 - rate;
        let mut rng = self.dropout_rng.borrow_mut();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { T::from_f64_lossy(1.0 / keep) } else { T::zero() })
            .collect();
        let m = self.tape.constant(Tensor::new(&shape, mask)?);
        self.tape.mul(x, m)
    }
}

/// Push any batch-norm running-stat updates recorded by `ctx` into `store`.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, ParamId, RunningStats<T>)>) -> Result<()> {
    for (mean, var, stats) in updates {
        store.set(mean, stats.mean)?;
        store.set(var, stats.var)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: ConvParams,
}

impl Conv2d {
    /// Square kernel `k`, "same" padding at stride 1.
    pub fn build<T: Scalar>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<Self> {
        Self::build_with(init, name, cin, cout, (k, k), ConvParams::same(k, 1), bias)
    }

    pub fn build_with<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        params: ConvParams,
        bias: bool,
    ) -> Result<Self> {
        if params.groups == 0 || !cin.is_multiple_of(params.groups) {
            return Err(Error::Config(format!("{name}: groups {} do not divide {cin}", params.groups)));
        }
        init.scope(name, |init| {
            let weight = init.kaiming("weight", &[cout, cin / params.groups, kernel.0, kernel.1])?;
            let bias = if bias { Some(init.zeros("bias", &[cout])?) } else { None };
            Ok(Self { weight, bias, params })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.conv2d(x, ctx.p(self.weight), b, self.params)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn build<T: Scalar>(init: &mut Init<T>, name: &str, c: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(Self {
                gamma: init.ones("gamma", &[c])?,
                beta: init.zeros("beta", &[c])?,
                running_mean: init.buffer("running_mean", Tensor::zeros(&[c]))?,
                running_var: init.buffer("running_var", Tensor::ones(&[c]))?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let stats = RunningStats {
            mean: ctx.store().get(self.running_mean).clone(),
            var: ctx.store().get(self.running_var).clone(),
        };
        let mode = if ctx.is_train() { NormMode::Train } else { NormMode::Eval };
        let (y, upd) = batch_norm(ctx.tape, x, ctx.p(self.gamma), ctx.p(self.beta), &stats, mode, BN_MOMENTUM, NORM_EPS)?;
        if let Some(u) = upd {
            ctx.bn_updates.borrow_mut().push((self.running_mean, self.running_var, u));
        }
        Ok(y)
    }
}

/// Layer norm over the channel axis of a `[B,C,H,W]` map.
#[derive(Debug, Clone, Copy)]
pub struct ChannelLayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelLayerNorm {
    pub fn build<T: Scalar>(init: &mut Init<T>, name: &str, c: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(Self {
                gamma: init.ones("gamma", &[c])?,
                beta: init.zeros("beta", &[c])?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        layer_norm(ctx.tape, x, &[1], ctx.p(self.gamma), ctx.p(self.beta), NORM_EPS)
    }
}

/// Largest finite-difference step of a parameter check.
pub const PARAM_CHECK_STEP: f64 = 1e-3;

/// Options for [`check_param_grads`].
#[derive(Debug, Clone, Copy)]
pub struct ParamCheck {
    /// Coordinates sampled per parameter tensor.
    pub per_tensor: usize,
    pub tol: f64,
    pub seed: u64,
    pub train: bool,
    pub step: f64,
}

impl Default for ParamCheck {
    fn default() -> Self {
        Self {
            per_tensor: 3,
            tol: 1e-6,
            seed: 0,
            train: false,
            step: PARAM_CHECK_STEP,
        }
    }
}

/// Compare tape gradients of `forward` with respect to the stored parameters
/// against central differences.
///
/// The output is contracted with a fixed random weighting. A few coordinates
/// of every trainable tensor are checked, plus one random direction through
/// all parameters at once. Training-mode dropout masks are reseeded
/// identically for every evaluation.
/// Each finite difference takes its step from a ladder starting at
/// `opts.step`, see [`crate::numerics::gradcheck::plateau_diff`].
pub fn check_param_grads<F>(
    name: &str,
    store: &ParamStore<f64>,
    opts: ParamCheck,
    forward: F,
) -> Result<crate::numerics::GradCheckReport>
where
    F: Fn(&Ctx<f64>) -> Result<Var>,
{
    use crate::numerics::gradcheck::{plateau_diff, rel_err};

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eval = |st: &ParamStore<f64>, weights: Option<&Tensor<f64>>, grad: bool| -> Result<(f64, Option<Vec<(ParamId, Tensor<f64>)>>, Vec<usize>)> {
        let tape = if grad { Tape::new() } else { Tape::no_grad() };
        let ctx = Ctx::new(&tape, st, opts.train).with_dropout_seed(opts.seed ^ 0x5eed);
        let out = forward(&ctx)?;
        let shape = tape.shape(out);
        let w = match weights {
            Some(w) => tape.constant(w.clone()),
            None => tape.constant(Tensor::ones(&shape)),
        };
        let loss = tape.sum(tape.mul(out, w)?);
        let value = tape.value(loss).item();
        if !grad {
            return Ok((value, None, shape));
        }
        let grads = tape.backward(loss)?;
        let g = ctx
            .used_params()
            .into_iter()
            .map(|(id, v)| (id, grads.get_or_zeros(v, st.get(id).shape())))
            .collect();
        Ok((value, Some(g), shape))
    };

    let (_, _, out_shape) = eval(store, None, false)?;
    let weights = Tensor::uniform(&out_shape, -1.0, 1.0, &mut rng);
    let (_, grads, _) = eval(store, Some(&weights), true)?;
    let grads = grads.expect("gradients requested");
    let analytic = |id: ParamId| grads.iter().find(|(g, _)| *g == id).map(|(_, t)| t);

    let h = opts.step;
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut checked = 0;
    for id in store.ids().filter(|&id| store.entry(id).trainable) {
        let n = store.get(id).numel();
        for i in crate::numerics::gradcheck::sample_indices(&mut rng, n, opts.per_tensor) {
            let orig = store.get(id).data()[i];
            let numeric = plateau_diff(
                |d| {
                    probe.get_mut(id).data_mut()[i] = orig + d;
                    let v = eval(&probe, Some(&weights), false)?.0;
                    probe.get_mut(id).data_mut()[i] = orig;
                    Ok(v)
                },
                h,
            )?;
            let a = analytic(id).map_or(0.0, |t| t.data()[i]);
            let e = rel_err(a, numeric);
            if e > worst {
                worst = e;
                worst_at = Some(format!("{}[{i}] analytic={a:.6e} numeric={numeric:.6e}", store.entry(id).name));
            }
            checked += 1;
        }
    }

    // Directional derivative through every trainable parameter at once.
    let trainable: Vec<ParamId> = store.ids().filter(|&id| store.entry(id).trainable).collect();
    let dirs: Vec<Tensor<f64>> = trainable
        .iter()
        .map(|&id| Tensor::uniform(store.get(id).shape(), -1.0, 1.0, &mut rng))
        .collect();
    let shifted = |step: f64| {
        let mut st = store.clone();
        for (&id, d) in trainable.iter().zip(&dirs) {
            let moved = st.get(id).zip_map(d, |p, v| p + step * v).expect("same shape");
            st.set(id, moved).expect("same shape");
        }
        st
    };
    let numeric = plateau_diff(|d| Ok(eval(&shifted(d), Some(&weights), false)?.0), h)?;
    let analytic_dir: f64 = trainable
        .iter()
        .zip(&dirs)
        .map(|(&id, d)| analytic(id).map_or(0.0, |g| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum()))
        .sum();
    let e = rel_err(analytic_dir, numeric);
    if e > worst {
        worst = e;
        worst_at = Some(format!("random direction analytic={analytic_dir:.6e} numeric={numeric:.6e}"));
    }
    checked += 1;

    Ok(crate::numerics::GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        checked,
        tolerance: opts.tol,
        worst: worst_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kaiming_bounds_and_determinism() {
        let build = || {
            let mut store = ParamStore::<f32>::new();
            let mut init = Init::new(&mut store, 7);
            init.kaiming("w", &[4, 2, 3, 3]).unwrap();
            store
        };
        let a = build();
        assert_eq!(a, build());
        let bound = (6.0f32 / 18.0).sqrt();
        assert!(a.entries()[0].value.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn conv_param_count_by_hand() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(&mut store, 0);
        Conv2d::build(&mut init, "c", 2, 4, 3, true).unwrap();
        assert_eq!(store.trainable_count(), 2 * 4 * 9 + 4);
        assert_eq!(store.entries()[0].name, "c.weight");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::zeros(&[1]), true).unwrap();
        assert!(store.insert("a", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn dropout_only_in_training() {
        let store = ParamStore::<f64>::new();
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1000]));
        let eval = Ctx::new(&tape, &store, false);
        assert_eq!(eval.dropout(x, 0.1).unwrap(), x);
        let train = Ctx::new(&tape, &store, true).with_dropout_seed(3);
        let y = tape.value(train.dropout(x, 0.1).unwrap());
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        assert!((50..150).contains(&zeros), "{zeros}");
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_layer_records_updates() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::build(&mut Init::new(&mut store, 0), "bn", 2).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true);
        let x = tape.constant(Tensor::uniform(&[2, 2, 3, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        bn.forward(&ctx, x).unwrap();
        let upd = ctx.take_bn_updates();
        assert_eq!(upd.len(), 1);
        drop(ctx);
        apply_bn_updates(&mut store, upd).unwrap();
        assert!(store.get(bn.running_mean).data().iter().all(|&m| m > 0.0));
    }
}

//! Parameter storage, binding parameters onto a tape, and the basic layers.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    /// Buffers (spectral vectors) are stored and checkpointed but never
    /// receive gradients.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug)]
struct SpectralIds {
    weight: ParamId,
    u: ParamId,
    v: ParamId,
}

/// Named parameters and buffers of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
    spectral: Vec<SpectralIds>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new(), spectral: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value: Arc::new(value), trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Register `(u, v)` power-iteration buffers for a weight whose leading
    /// axis indexes output rows.
    fn register_spectral(&mut self, weight: ParamId, rng: &mut impl Rng) -> (ParamId, ParamId) {
        let w = self.get(weight);
        let rows = w.shape()[0];
        let cols = w.numel() / rows;
        let name = self.name(weight).to_string();
        let u = normalized(Tensor::from_fn(&[rows], |_| T::of(StandardNormal.sample(rng))));
        let v = Tensor::zeros(&[cols]);
        let u = self.add(format!("{name}.sn_u"), u, false);
        let v = self.add(format!("{name}.sn_v"), v, false);
        let ids = SpectralIds { weight, u, v };
        self.spectral.push(ids);
        self.power_iterate_one(ids);
        (u, v)
    }

    fn power_iterate_one(&mut self, ids: SpectralIds) {
        let w = self.get(ids.weight).clone();
        let rows = w.shape()[0];
        let cols = w.numel() / rows;
        let u = self.get(ids.u).clone();
        let mut v = vec![T::zero(); cols];
        gemm(MatRef::t(w.data(), rows, cols), MatRef::new(u.data(), rows, 1), &mut v, false);
        let v = normalized(Tensor::new(&[cols], v));
        let mut u2 = vec![T::zero(); rows];
        gemm(MatRef::new(w.data(), rows, cols), MatRef::new(v.data(), cols, 1), &mut u2, false);
        let u2 = normalized(Tensor::new(&[rows], u2));
        *self.get_mut(ids.v) = v;
        *self.get_mut(ids.u) = u2;
    }

    /// One power-iteration step for every spectrally normalized weight.
    /// Called once per training step, before the forward pass.
    pub fn update_spectral(&mut self) {
        for ids in self.spectral.clone() {
            self.power_iterate_one(ids);
        }
    }

    /// Digest of every name, shape and value bit pattern.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Same layout with every value converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: Arc::new(e.value.cast()), trainable: e.trainable })
                .collect(),
            by_name: self.by_name.clone(),
            spectral: self.spectral.clone(),
        }
    }
}

fn normalized<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    let norm = t.data().iter().map(|&x| x * x).sum::<T>().sqrt();
    let denom = norm.max(T::of(1e-12));
    t.map(|x| x / denom)
}

/// Parameters of one store made available as tape leaves for one forward
/// pass. Leaves are created lazily the first time a parameter is used.
pub struct Bound<'t, 's, T: Scalar> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
    trainable: bool,
}

impl<'t, 's, T: Scalar> Bound<'t, 's, T> {
    /// With `trainable == false` every parameter is a constant: gradients can
    /// still flow through the network to its inputs.
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Bound { tape, store, vars: RefCell::new(vec![None; store.len()]), trainable }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = self.tape.leaf(e.value.clone(), self.trainable && e.trainable);
        vars[id.0] = Some(v);
        v
    }

    pub fn tensor(&self, id: ParamId) -> &'s Tensor<T> {
        self.store.get(id)
    }

    /// Gradients of every bound trainable parameter, indexed like the store.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.borrow().iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±gain * sqrt(3 / fan_in)` (variance `gain^2 / fan_in`).
    Uniform { gain: f64 },
    Zeros,
}

impl Init {
    /// He-style gain for leaky-ReLU with slope 0.2.
    pub const LEAKY: Init = Init::Uniform { gain: 1.386_750_490_563_073 };
    pub const LINEAR: Init = Init::Uniform { gain: 1.0 };

    fn sample<T: Scalar>(self, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Uniform { gain } => {
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)))
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvOpts {
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub spectral: bool,
    pub init: Init,
}

impl ConvOpts {
    /// Shape-preserving 3x3 convolution with bias.
    pub fn same3() -> Self {
        ConvOpts { stride: 1, pad: 1, bias: true, spectral: false, init: Init::LEAKY }
    }

    pub fn spectral(mut self) -> Self {
        self.spectral = true;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn stride(mut self, stride: usize, pad: usize) -> Self {
        self.stride = stride;
        self.pad = pad;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    spectral: Option<(ParamId, ParamId)>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        opts: ConvOpts,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = opts.init.sample(&[c_out, c_in, kernel, kernel], fan_in, rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = opts.bias.then(|| {
            let b = match opts.init {
                Init::Zeros => Tensor::zeros(&[c_out]),
                Init::Uniform { .. } => Init::LINEAR.sample(&[c_out], fan_in * 3, rng),
            };
            store.add(format!("{name}.bias"), b, true)
        });
        let spectral = opts.spectral.then(|| store.register_spectral(weight, rng));
        Conv2d { weight, bias, spectral, c_in, c_out, kernel, stride: opts.stride, pad: opts.pad }
    }

    pub fn is_spectral(&self) -> bool {
        self.spectral.is_some()
    }

    /// The weight actually applied (spectrally normalized when configured).
    pub fn effective_weight<'t, T: Scalar>(&self, b: &Bound<'t, '_, T>) -> Var<'t, T> {
        let w = b.var(self.weight);
        match self.spectral {
            Some((u, v)) => w.spectral_normalize(b.tensor(u), b.tensor(v)),
            None => w,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let w = self.effective_weight(b);
        x.conv2d(w, self.bias.map(|id| b.var(id)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.sample(&[d_out, d_in], d_in, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true);
        Linear { weight, bias, d_in, d_out }
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(b.var(self.weight), Some(b.var(self.bias)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn power_iteration_converges_to_top_singular_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 3, 5, 3, ConvOpts::same3().spectral());
        for _ in 0..200 {
            store.update_spectral();
        }
        // sigma from the buffers vs. sigma from the dense Gram matrix's top
        // eigenvalue by a long independent power iteration.
        let w = store.get(conv.weight).clone();
        let (rows, cols) = (5, 27);
        let mut x = vec![1.0; cols];
        for _ in 0..2000 {
            let wx: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum()).collect();
            let y: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| w.data()[r * cols + c] * wx[r]).sum()).collect();
            let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            x = y.iter().map(|v| v / n).collect();
        }
        let sigma_ref = (0..rows)
            .map(|r| (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum::<f64>().powi(2))
            .sum::<f64>()
            .sqrt();
        let tape = Tape::new();
        let b = Bound::new(&tape, &store, false);
        let wn = conv.effective_weight(&b).value();
        let ratio = w.data()[0] / wn.data()[0];
        assert!((ratio - sigma_ref).abs() / sigma_ref < 1e-6, "{ratio} vs {sigma_ref}");
    }

    #[test]
    fn bound_params_are_constant_when_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2, Init::LINEAR);
        let tape = Tape::new();
        let frozen = Bound::new(&tape, &store, false);
        let x = tape.leaf(Arc::new(Tensor::ones(&[1, 3])), true);
        let y = lin.forward(&frozen, x).sum();
        let mut g = tape.backward(y);
        assert!(g.get(x).is_some());
        assert!(frozen.gradients(&mut g).iter().all(|g| g.is_none()));
    }
}

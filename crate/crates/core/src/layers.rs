//! Parameterized building blocks over a shared [`ParamStore`].
//!
//! Layers only hold [`ParamId`]s; values live in the store so a whole model can
//! be saved, loaded and optimized as one flat list of named tensors.

use dpte_autograd::{Binding, Float, ParamId, ParamKind, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-3;
/// Running-statistics momentum (weight of the old estimate).
pub const BN_MOMENTUM: f64 = 0.99;

/// Creates named parameters with He-uniform initialization from a seeded RNG.
pub struct ParamBuilder<'s, T: Float> {
    store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
    path: Vec<String>,
}

impl<'s, T: Float> ParamBuilder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            path: Vec::new(),
        }
    }

    /// Run `f` with `name` appended to the parameter path.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.path.push(name.to_string());
        let out = f(self);
        self.path.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.path.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn uniform(&mut self, leaf: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.random_range(-bound..=bound)))
            .collect();
        let name = self.full_name(leaf);
        self.store.add(name, ParamKind::Learnable, Tensor::new(shape, data))
    }

    pub fn tensor(&mut self, leaf: &str, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = self.full_name(leaf);
        self.store.add(name, kind, value)
    }
}

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Unit-gain bound for layers not followed by a rectifier.
fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Swish,
}

impl Activation {
    pub fn apply<T: Float>(self, x: &Var<T>) -> Var<T> {
        match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.relu(),
            Activation::LeakyRelu => x.leaky_relu(T::from_f64_lossy(0.2)),
            Activation::Swish => x.swish(),
        }
    }
}

/// Stride-1 "same" convolution with an odd square kernel and bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::with_bound(b, name, cin, cout, kernel, he_bound(cin * kernel * kernel))
    }

    /// Unit-gain init, for convolutions whose output is not rectified.
    pub fn linear<T: Float>(b: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::with_bound(b, name, cin, cout, kernel, lecun_bound(cin * kernel * kernel))
    }

    /// All-zero weights: the layer starts as a constant (its bias).
    pub fn zeroed<T: Float>(b: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::with_bound(b, name, cin, cout, kernel, 0.0)
    }

    fn with_bound<T: Float>(b: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, kernel: usize, bound: f64) -> Self {
        b.scoped(name, |b| {
            let weight = b.uniform("weight", vec![cout, cin, kernel, kernel], bound);
            let bias = b.tensor("bias", ParamKind::Learnable, Tensor::zeros(vec![cout]));
            Self {
                weight,
                bias,
                in_channels: cin,
                out_channels: cout,
                kernel,
            }
        })
    }

    pub fn forward<T: Float>(&self, b: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("conv", x, self.in_channels)?;
        Ok(x.conv2d(&b.var(self.weight), Some(&b.var(self.bias))))
    }

    pub fn params(&self) -> usize {
        conv_params(self.in_channels, self.out_channels, self.kernel)
    }
}

pub fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

/// Kernel-2, stride-2 transposed convolution (doubles height and width).
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose2x2 {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize) -> Self {
        b.scoped(name, |b| {
            let weight = b.uniform("weight", vec![cin, cout, 2, 2], he_bound(cin));
            let bias = b.tensor("bias", ParamKind::Learnable, Tensor::zeros(vec![cout]));
            Self {
                weight,
                bias,
                in_channels: cin,
                out_channels: cout,
            }
        })
    }

    pub fn forward<T: Float>(&self, b: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("transposed conv", x, self.in_channels)?;
        Ok(x.conv_transpose2x2(&b.var(self.weight), Some(&b.var(self.bias))))
    }
}

/// Dense layer on `N×F` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, name: &str, fin: usize, fout: usize) -> Self {
        b.scoped(name, |b| {
            let weight = b.uniform("weight", vec![fout, fin], he_bound(fin));
            let bias = b.tensor("bias", ParamKind::Learnable, Tensor::zeros(vec![fout]));
            Self {
                weight,
                bias,
                in_features: fin,
                out_features: fout,
            }
        })
    }

    pub fn forward<T: Float>(&self, b: &Binding<T>, x: &Var<T>) -> Var<T> {
        x.linear(&b.var(self.weight), Some(&b.var(self.bias)))
    }
}

/// Batch normalization whose running statistics are bias-corrected
/// exponential averages: after `n` updates they equal the momentum-weighted
/// mean of the `n` batch statistics seen so far, so short runs are not
/// dragged towards the initial values.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub updates: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, name: &str, channels: usize) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.tensor("gamma", ParamKind::Learnable, Tensor::ones(vec![channels])),
            beta: b.tensor("beta", ParamKind::Learnable, Tensor::zeros(vec![channels])),
            running_mean: b.tensor("running_mean", ParamKind::Buffer, Tensor::zeros(vec![channels])),
            running_var: b.tensor("running_var", ParamKind::Buffer, Tensor::ones(vec![channels])),
            updates: b.tensor("updates", ParamKind::Buffer, Tensor::zeros(vec![1])),
            channels,
        })
    }

    pub fn forward<T: Float>(&self, b: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("batch norm", x, self.channels)?;
        let (gamma, beta) = (b.var(self.gamma), b.var(self.beta));
        let eps = T::from_f64_lossy(BN_EPS);
        if !b.training() {
            let mean = b.value(self.running_mean).data();
            let var = b.value(self.running_var).data();
            return Ok(x.batch_norm_eval(&gamma, &beta, mean, var, eps));
        }
        let (y, stats) = x.batch_norm_train(&gamma, &beta, eps);
        let (n, _, h, w) = x.value().dims4();
        let count = n * h * w;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let k = b.value(self.updates).data()[0].as_f64();
        let m = BN_MOMENTUM;
        let old_mass = m * (1.0 - m.powf(k));
        let new_mass = 1.0 - m.powf(k + 1.0);
        let blend = |old: &[T], fresh: &[T], scale: f64| -> Tensor<T> {
            let data = old
                .iter()
                .zip(fresh)
                .map(|(&o, &f)| {
                    T::from_f64_lossy((old_mass * o.as_f64() + (1.0 - m) * f.as_f64() * scale) / new_mass)
                })
                .collect();
            Tensor::new(vec![old.len()], data)
        };
        b.push_update(self.running_mean, blend(b.value(self.running_mean).data(), &stats.mean, 1.0));
        b.push_update(self.running_var, blend(b.value(self.running_var).data(), &stats.var, unbias));
        b.push_update(self.updates, Tensor::new(vec![1], vec![T::from_f64_lossy(k + 1.0)]));
        Ok(y)
    }

    /// Learnable scalars (scale and shift).
    pub fn params(&self) -> usize {
        2 * self.channels
    }
}

pub(crate) fn check_channels<T: Float>(what: &str, x: &Var<T>, expected: usize) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != expected {
        return shape_err(format!("{what} expects {expected} channels, got shape {shape:?}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dpte_autograd::Mode;

    #[test]
    fn conv_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut ParamBuilder::new(&mut store, 0), "c", 4, 16, 3);
        assert_eq!(conv.params(), 592);
        assert_eq!(store.count_learnable(), 592);
    }

    #[test]
    fn builder_is_deterministic_and_scoped() {
        let build = || {
            let mut store = ParamStore::<f32>::new();
            let mut b = ParamBuilder::new(&mut store, 9);
            b.scoped("enc", |b| Conv2d::new(b, "embed", 3, 8, 3));
            store
        };
        let (a, b) = (build(), build());
        assert_eq!(a, b);
        assert!(a.id_of("enc.embed.weight").is_some());
        assert!(a.id_of("enc.embed.bias").is_some());
    }

    #[test]
    fn running_stats_average_batches_without_lag() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut ParamBuilder::new(&mut store, 0), "bn", 1);
        // two batches with means 1 and 3; each has 4 values with spread ±1
        let batches = [[0.0, 2.0, 0.0, 2.0], [2.0, 4.0, 2.0, 4.0]];
        for data in batches {
            let x = Var::constant(Tensor::new(vec![1, 1, 2, 2], data.to_vec()));
            let bind = Binding::new(&store, Mode::TRAIN);
            bn.forward(&bind, &x).unwrap();
            let updates = bind.into_updates();
            store.apply_updates(updates);
        }
        let m = BN_MOMENTUM;
        let expected_mean = (m * 1.0 + 3.0) / (m + 1.0);
        assert!((store.get(bn.running_mean).data()[0] - expected_mean).abs() < 1e-12);
        // unbiased variance of each batch is 4/3
        assert!((store.get(bn.running_var).data()[0] - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(store.get(bn.updates).data()[0], 2.0);
    }

    #[test]
    fn fresh_batch_norm_is_identity_in_eval() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut ParamBuilder::new(&mut store, 0), "bn", 2);
        let x = Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f64 * 0.1);
        let bind = Binding::new(&store, Mode::EVAL);
        let y = bn.forward(&bind, &Var::constant(x.clone())).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }
}

//! Wasserstein critic shaped like the generator's encoder, and the gradient
//! penalty that keeps it approximately 1-Lipschitz.

use dpte_autograd::{Adam, Binding, Float, Mode, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::layers::{check_channels, Activation, Conv2d, Linear, ParamBuilder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub base_channels: usize,
    pub levels: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            levels: 5,
        }
    }
}

/// Two 3×3 LeakyReLU convs per level with 2×2 max pooling between levels,
/// global average pooling and a linear scalar head. No normalization, so
/// samples are scored independently.
#[derive(Clone, Debug)]
pub struct Critic {
    pub config: CriticConfig,
    convs: Vec<(Conv2d, Conv2d)>,
    head: Linear,
}

impl Critic {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, cfg: &CriticConfig) -> Result<Self> {
        if cfg.levels == 0 || cfg.base_channels == 0 {
            return param_err("critic needs at least one level and positive width");
        }
        b.scoped("critic", |b| {
            let mut convs = Vec::new();
            let mut cin = 3;
            for level in 0..cfg.levels {
                let c = cfg.base_channels << level;
                let name = format!("level{level}");
                convs.push(b.scoped(&name, |b| (Conv2d::new(b, "conv0", cin, c, 3), Conv2d::new(b, "conv1", c, c, 3))));
                cin = c;
            }
            let head = Linear::new(b, "head", cin, 1);
            Ok(Self {
                config: cfg.clone(),
                convs,
                head,
            })
        })
    }

    /// Scores of an `N×3×H×W` batch as an `N×1` node.
    pub fn forward<T: Float>(&self, b: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("critic", x, 3)?;
        let (_, _, h, w) = x.value().dims4();
        let m = 1 << (self.config.levels - 1);
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return shape_err(format!("critic input {h}×{w} is not a multiple of {m}"));
        }
        let act = Activation::LeakyRelu;
        let mut f = x.clone();
        for (i, (c0, c1)) in self.convs.iter().enumerate() {
            if i > 0 {
                f = f.max_pool2();
            }
            f = act.apply(&c0.forward(b, &f)?);
            f = act.apply(&c1.forward(b, &f)?);
        }
        Ok(self.head.forward(b, &f.global_avg_pool()))
    }
}

pub fn build_critic<T: Float>(cfg: &CriticConfig, seed: u64) -> Result<(Critic, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let c = Critic::new(&mut ParamBuilder::new(&mut store, seed), cfg)?;
    Ok((c, store))
}

/// Eval-mode score of one image.
pub fn critic_score(img: &ImageTensor, critic: &Critic, store: &ParamStore<f32>) -> Result<f32> {
    img.ensure_rgb()?;
    let b = Binding::new(store, Mode::EVAL);
    Ok(critic.forward(&b, &Var::constant(img.to_tensor()))?.item())
}

/// Per-sample mixing weights `u ~ U(0, 1)`.
pub fn sample_mix<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// `u·real + (1−u)·fake`, one `u` per sample.
pub fn interpolate<T: Float>(real: &Tensor<T>, fake: &Tensor<T>, mix: &[f64]) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return shape_err(format!("real {:?} vs fake {:?}", real.shape(), fake.shape()));
    }
    let n = real.shape()[0];
    if mix.len() != n {
        return shape_err(format!("{} mixing weights for a batch of {n}", mix.len()));
    }
    let per = real.numel() / n.max(1);
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let u = T::from_f64_lossy(mix[i / per]);
            u * r + (T::one() - u) * f
        })
        .collect();
    Ok(Tensor::new(real.shape().to_vec(), data))
}

/// Gradient of the summed scores with respect to the input. With samples
/// scored independently this is the per-sample input gradient.
pub fn input_gradient<T: Float>(score: impl Fn(&Var<T>) -> Result<Var<T>>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let leaf = Var::leaf(x.clone());
    let grads = score(&leaf)?.sum_all().backward();
    Ok(grads.get(&leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

fn per_sample_norms<T: Float>(g: &Tensor<T>) -> Vec<f64> {
    let n = g.shape()[0];
    g.data()
        .chunks(g.numel() / n.max(1))
        .map(|c| c.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// `mean((‖∇C(x̂)‖ − 1)²)` at the interpolates for the given mixing weights.
pub fn gradient_penalty_at<T: Float>(
    score: impl Fn(&Var<T>) -> Result<Var<T>>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    mix: &[f64],
) -> Result<f64> {
    let x_hat = interpolate(real, fake, mix)?;
    let norms = per_sample_norms(&input_gradient(score, &x_hat)?);
    Ok(norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / norms.len() as f64)
}

/// Penalty with fresh uniform mixing weights.
pub fn gradient_penalty<T: Float, R: Rng>(
    critic: &Critic,
    store: &ParamStore<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    rng: &mut R,
) -> Result<f64> {
    if real.shape() != fake.shape() {
        return shape_err(format!("real {:?} vs fake {:?}", real.shape(), fake.shape()));
    }
    let mix = sample_mix(real.shape()[0], rng);
    let b = Binding::new(store, Mode::EVAL);
    gradient_penalty_at(|x| critic.forward(&b, x), real, fake, &mix)
}

/// Step used by the differentiable penalty surrogate.
pub const SURROGATE_STEP: f64 = 1e-2;

/// Differentiable stand-in for the penalty at interpolates `x_hat`.
///
/// The autograd has no second-order derivatives, so the gradient norm is
/// replaced by the central difference of the critic along the (constant)
/// unit gradient direction `d`: `D = (C(x̂+εd) − C(x̂−εd)) / 2ε`, which equals
/// `‖∇C(x̂)‖` to first order. Returns the surrogate node, whose parameter
/// gradients drive the critic, and the exact penalty value for logging.
pub fn penalty_surrogate<T: Float>(
    critic: &Critic,
    b: &Binding<T>,
    x_hat: &Tensor<T>,
    step: f64,
) -> Result<(Var<T>, f64)> {
    let frozen = Binding::new(b.store(), Mode { track: false, ..b.mode() });
    let g = input_gradient(|x| critic.forward(&frozen, x), x_hat)?;
    let norms = per_sample_norms(&g);
    let exact = norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / norms.len() as f64;
    let per = g.numel() / norms.len();
    let dir: Vec<T> = g
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let n = norms[i / per];
            if n > 0.0 {
                T::from_f64_lossy(v.as_f64() * step / n)
            } else {
                T::zero()
            }
        })
        .collect();
    let dir = Tensor::new(g.shape().to_vec(), dir);
    let plus = Var::constant(x_hat.zip_map(&dir, |a, d| a + d));
    let minus = Var::constant(x_hat.zip_map(&dir, |a, d| a - d));
    let diff = critic.forward(b, &plus)?.sub(&critic.forward(b, &minus)?);
    let slope = diff.scale(T::from_f64_lossy(0.5 / step));
    Ok((slope.add_scalar(-T::one()).square().mean_all(), exact))
}

/// Which sign the critic objective uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticObjective {
    /// Minimize `C(fake) − C(real)`: real images score higher.
    Conventional,
    /// Minimize `C(real) − C(fake)`.
    RealMinusFake,
}

/// Settings of one critic update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticUpdate {
    pub objective: CriticObjective,
    pub weight: f64,
    pub gp_coeff: f64,
    pub penalty_step: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticLog {
    /// Objective plus weighted penalty, before the update.
    pub loss: f64,
    pub gradient_penalty: f64,
    pub score_real: f64,
    pub score_fake: f64,
}

/// One Adam step on the critic against detached real and fake batches.
pub fn critic_step<R: Rng>(
    critic: &Critic,
    store: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    settings: &CriticUpdate,
    rng: &mut R,
) -> Result<CriticLog> {
    let b = Binding::new(&*store, Mode::TRAIN);
    let real_s = critic.forward(&b, &Var::constant(real.clone()))?.mean_all();
    let fake_s = critic.forward(&b, &Var::constant(fake.clone()))?.mean_all();
    let mix = sample_mix(real.shape()[0], rng);
    let x_hat = interpolate(real, fake, &mix)?;
    let (surrogate, gp) = penalty_surrogate(critic, &b, &x_hat, settings.penalty_step)?;
    let objective = match settings.objective {
        CriticObjective::Conventional => fake_s.sub(&real_s),
        CriticObjective::RealMinusFake => real_s.sub(&fake_s),
    };
    let loss = objective
        .scale(settings.weight as f32)
        .add(&surrogate.scale(settings.gp_coeff as f32));
    let log = CriticLog {
        loss: settings.weight * objective.item() as f64 + settings.gp_coeff * gp,
        gradient_penalty: gp,
        score_real: real_s.item() as f64,
        score_fake: fake_s.item() as f64,
    };
    if !log.loss.is_finite() {
        return Err(Error::Numeric { component: "critic".into() });
    }
    let pg = b.param_grads(&loss.backward());
    drop(b);
    opt.step(store, &pg, settings.lr);
    Ok(log)
}

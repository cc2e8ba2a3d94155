#![allow(dead_code)]

//! Oracles and fixtures shared by the test targets of this crate and the
//! workspace acceptance suite.

use std::path::{Path, PathBuf};

use dpte_autograd::{Adam, Binding, Mode, ParamId, ParamStore, Tensor, Var};
use dptenet::critic::{build_critic, critic_step, Critic, CriticConfig, CriticObjective, CriticUpdate, SURROGATE_STEP};
use dptenet::distill::{Adaptation, AdaptationConfig, AdaptationKind};
use dptenet::io::load_rgb;
use dptenet::layers::ParamBuilder;
use dptenet::losses::{adversarial_term, hint_term, perceptual_term, transmission_term, Extractor, LossTerms, Norm};
use dptenet::ptb::Ptb;
use dptenet::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

/// Worst relative error between analytic and central-difference gradients of
/// `f(binding, x)` with respect to `x` and every learnable parameter.
pub fn gradcheck(
    store: &ParamStore<f64>,
    mode: Mode,
    x: &Tensor<f64>,
    f: impl Fn(&Binding<f64>, &Var<f64>) -> Var<f64>,
) -> f64 {
    let h = 1e-6;
    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>| {
        let b = Binding::new(store, Mode { track: false, ..mode });
        f(&b, &Var::constant(x.clone())).item()
    };
    let b = Binding::new(store, mode);
    let xv = Var::leaf(x.clone());
    let grads = f(&b, &xv).backward();
    let mut worst: f64 = 0.0;

    let gx = grads.get(&xv).expect("no input gradient").clone();
    let num: Vec<f64> = (0..x.numel())
        .map(|i| {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            (eval(store, &p) - eval(store, &m)) / (2.0 * h)
        })
        .collect();
    worst = worst.max(rel_err(gx.data(), &num));

    let analytic: Vec<(ParamId, Tensor<f64>)> = b.param_grads(&grads);
    for id in store.learnable_ids() {
        let g = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        let num: Vec<f64> = (0..g.numel())
            .map(|i| {
                let mut sp = store.clone();
                sp.get_mut(id).data_mut()[i] += h;
                let mut sm = store.clone();
                sm.get_mut(id).data_mut()[i] -= h;
                (eval(&sp, x) - eval(&sm, x)) / (2.0 * h)
            })
            .collect();
        let e = rel_err(g.data(), &num);
        assert!(e.is_finite(), "{}", store.entry(id).name);
        worst = worst.max(e);
    }
    worst
}

/// Projection onto fixed random weights so a scalar depends on every element.
pub fn project(y: &Var<f64>, seed: u64) -> Var<f64> {
    y.mul(&Var::constant(random_tensor(y.shape(), seed))).sum_all()
}

/// Nested loops over every pixel, window cell and channel.
pub fn dark_channel_oracle(img: &ImageTensor, patch: usize) -> Vec<f32> {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let r = (patch / 2) as isize;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut m = f32::INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h - 1) as usize;
                    let xx = (x + dx).clamp(0, w - 1) as usize;
                    for c in 0..3 {
                        m = m.min(img.get(c, yy, xx));
                    }
                }
            }
            out.push(m);
        }
    }
    out
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Hazy scene whose transmission falls from left to right.
pub fn gradient_haze(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = ImageTensor::from_fn(3, h, w, |_, _, _| rng.random_range(0.0..0.6));
    ImageTensor::from_fn(3, h, w, |c, y, x| {
        let t = (-2.5 * x as f32 / (w - 1) as f32).exp();
        scene.get(c, y, x) * t + (1.0 - t)
    })
}

pub fn zero_mlp(p: &Ptb, store: &mut ParamStore<f64>) {
    for id in [p.fc1.weight, p.fc1.bias, p.fc2.weight, p.fc2.bias] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(shape);
    }
}

/// Replicate-padded 3×3 mean, written out pixel by pixel.
pub fn mean3_oracle(x: &Tensor<f64>) -> Vec<f64> {
    let (n, c, h, w) = x.dims4();
    let mut out = Vec::with_capacity(x.numel());
    for s in 0..n * c {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let xc = (xx + dx).clamp(0, w as isize - 1) as usize;
                        acc += x.data()[(s * h + yy) * w + xc];
                    }
                }
                out.push(acc / 9.0);
            }
        }
    }
    out
}

/// Critic, adaptation layer and all loss terms on a small `f64` problem.
pub struct Composite {
    pub critic: Critic,
    pub adaptation: Adaptation,
    pub store: ParamStore<f64>,
    pub clean: Tensor<f64>,
    pub tau: Tensor<f64>,
    pub hint: Tensor<f64>,
}

impl Composite {
    pub fn new() -> Self {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 9);
        let critic = Critic::new(&mut b, &CriticConfig { base_channels: 2, levels: 2 }).unwrap();
        let cfg = AdaptationConfig { kind: AdaptationKind::PtbConv, mlp_ratio: 1, hint_channels: 4 };
        let adaptation = Adaptation::new(&mut b, 3, &cfg).unwrap();
        Self {
            critic,
            adaptation,
            store,
            clean: random_tensor(&[2, 3, 4, 4], 6),
            tau: random_tensor(&[2, 1, 4, 4], 7).map(|v| 0.1 + 0.45 * (v + 1.0)),
            hint: random_tensor(&[2, 4, 2, 2], 8),
        }
    }

    pub fn terms(&self, b: &Binding<f64>, fake: &Var<f64>) -> LossTerms<f64> {
        let features = fake.max_pool2();
        let adapted = self.adaptation.forward(b, &features).unwrap();
        LossTerms {
            adversarial: adversarial_term(&self.critic.forward(b, fake).unwrap()),
            perceptual: perceptual_term(fake, &self.clean, &Extractor::Identity, Norm::MeanSquare).unwrap(),
            transmission: transmission_term(fake, &self.clean, &self.tau, Norm::MeanAbsolute).unwrap(),
            hint: Some(hint_term(&adapted, &self.hint, Norm::MeanSquare).unwrap()),
        }
    }
}

/// `tests/fixtures` of the core crate, wherever this file is compiled from.
pub fn fixtures(manifest_dir: &str, core_relative: &str) -> PathBuf {
    Path::new(manifest_dir).join(core_relative).join("tests/fixtures")
}

pub fn natural_crops(dir: &Path, n: usize, side: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let mut paths: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    let images: Vec<ImageTensor> = paths.iter().map(|p| load_rgb(p).unwrap()).collect();
    let crops: Vec<Tensor<f32>> = (0..n)
        .map(|_| {
            let img = &images[rng.random_range(0..images.len())];
            let top = rng.random_range(0..=img.height() - side);
            let left = rng.random_range(0..=img.width() - side);
            img.crop(top, left, side, side).unwrap().to_tensor()
        })
        .collect();
    Tensor::stack(&crops)
}

/// Runs the separability toy and returns per-step losses and score gaps.
pub fn separability_run(clean_dir: &Path, objective: CriticObjective, steps: usize) -> (Vec<f64>, Vec<f64>) {
    let (critic, mut store) = build_critic::<f32>(&CriticConfig::default(), 21).unwrap();
    let mut opt = Adam::new(0.5, 0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let settings = CriticUpdate { objective, weight: 1.0, gp_coeff: 10.0, penalty_step: SURROGATE_STEP, lr: 1e-4 };
    let (mut losses, mut gaps) = (Vec::new(), Vec::new());
    for _ in 0..steps {
        let real = natural_crops(clean_dir, 8, 32, &mut rng);
        let fake = Tensor::from_fn(real.shape().to_vec(), |_| rng.random::<f32>());
        let log = critic_step(&critic, &mut store, &mut opt, &real, &fake, &settings, &mut rng).unwrap();
        losses.push(log.loss);
        gaps.push(log.score_real - log.score_fake);
    }
    (losses, gaps)
}

pub fn window_means(v: &[f64], w: usize) -> Vec<f64> {
    v.chunks(w).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

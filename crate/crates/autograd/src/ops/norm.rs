use crate::{Float, Tensor, Var};

/// Per-channel batch statistics observed during a training-mode forward.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn channel_iter<T: Copy>(data: &[T], n: usize, c: usize, hw: usize, ch: usize) -> impl Iterator<Item = (usize, T)> + '_ {
    (0..n).flat_map(move |b| {
        let s = (b * c + ch) * hw;
        (s..s + hw).map(move |i| (i, data[i]))
    })
}

impl<T: Float> Var<T> {
    /// Batch normalization with statistics of the current batch (biased variance).
    pub fn batch_norm_train(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> (Var<T>, BatchStats<T>) {
        let (n, c, h, w) = self.value().dims4();
        assert_eq!(gamma.shape(), &[c], "batch norm gamma shape");
        assert_eq!(beta.shape(), &[c], "batch norm beta shape");
        let hw = h * w;
        let m = T::from_usize(n * hw).unwrap();
        let x = self.value().data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mu = channel_iter(x, n, c, hw, ch).map(|(_, v)| v).sum::<T>() / m;
            let s2 = channel_iter(x, n, c, hw, ch).map(|(_, v)| (v - mu) * (v - mu)).sum::<T>() / m;
            mean[ch] = mu;
            var[ch] = s2;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let g = gamma.value().data();
        let bt = beta.value().data();
        for ch in 0..c {
            for (i, v) in channel_iter(x, n, c, hw, ch) {
                let xh = (v - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g[ch] * xh + bt[ch];
            }
        }
        let stats = BatchStats { mean, var };
        let y = Var::from_op(
            Tensor::new(vec![n, c, h, w], out),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |gout, p| {
                let gd = gout.data();
                let gam = p[1].value().data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    for (i, gv) in channel_iter(gd, n, c, hw, ch) {
                        dbeta[ch] += gv;
                        dgamma[ch] += gv * xhat[i];
                    }
                }
                let dx = p[0].requires_grad().then(|| {
                    let mut dx = vec![T::zero(); gd.len()];
                    for ch in 0..c {
                        let mg = dbeta[ch] / m;
                        let mgx = dgamma[ch] / m;
                        let k = gam[ch] * inv_std[ch];
                        for (i, gv) in channel_iter(gd, n, c, hw, ch) {
                            dx[i] = k * (gv - mg - xhat[i] * mgx);
                        }
                    }
                    Tensor::new(vec![n, c, h, w], dx)
                });
                vec![
                    dx,
                    Some(Tensor::new(vec![c], dgamma)),
                    Some(Tensor::new(vec![c], dbeta)),
                ]
            }),
        );
        (y, stats)
    }

    /// Batch normalization with fixed (running) statistics: a per-channel affine map.
    pub fn batch_norm_eval(&self, gamma: &Var<T>, beta: &Var<T>, mean: &[T], var: &[T], eps: T) -> Var<T> {
        let (n, c, h, w) = self.value().dims4();
        assert_eq!(gamma.shape(), &[c], "batch norm gamma shape");
        assert_eq!(beta.shape(), &[c], "batch norm beta shape");
        assert!(mean.len() == c && var.len() == c, "running stats length");
        let hw = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let x = self.value().data();
        let g = gamma.value().data();
        let bt = beta.value().data();
        let value = Tensor::from_fn(vec![n, c, h, w], |i| {
            let ch = (i / hw) % c;
            g[ch] * (x[i] - mean[ch]) * inv_std[ch] + bt[ch]
        });
        Var::from_op(
            value,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |gout, p| {
                let gd = gout.data();
                let x = p[0].value().data();
                let gam = p[1].value().data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, &gv) in gd.iter().enumerate() {
                    let ch = (i / hw) % c;
                    dbeta[ch] += gv;
                    dgamma[ch] += gv * (x[i] - mean[ch]) * inv_std[ch];
                }
                let dx = p[0].requires_grad().then(|| {
                    Tensor::from_fn(vec![n, c, h, w], |i| {
                        let ch = (i / hw) % c;
                        gd[i] * gam[ch] * inv_std[ch]
                    })
                });
                vec![
                    dx,
                    Some(Tensor::new(vec![c], dgamma)),
                    Some(Tensor::new(vec![c], dbeta)),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_output_is_standardized() {
        let x = Var::constant(Tensor::<f64>::from_fn(vec![3, 2, 2, 2], |i| (i * i % 7) as f64));
        let g = Var::constant(Tensor::ones(vec![2]));
        let b = Var::constant(Tensor::zeros(vec![2]));
        let (y, stats) = x.batch_norm_train(&g, &b, 0.0);
        for ch in 0..2 {
            let vals: Vec<f64> = channel_iter(y.value().data(), 3, 2, 4, ch).map(|(_, v)| v).collect();
            let mu: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
        assert_eq!(stats.mean.len(), 2);
    }
}

//! Image quality metrics and model complexity accounting.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::distill::{Adaptation, AdaptationConfig};
use crate::generator::{Generator, GeneratorConfig};
use crate::image::ImageTensor;
use crate::layers::ParamBuilder;

pub const PSNR_CAP: f64 = 100.0;

fn check_same(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        return shape_err(format!(
            "{}×{}×{} vs {}×{}×{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor, data_range: f64) -> Result<f64> {
    check_same(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; SSIM_WIN] {
    let r = (SSIM_WIN / 2) as f64;
    let mut k = [0.0; SSIM_WIN];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter keeping only windows fully inside the image.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WIN]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h + 1 - SSIM_WIN, w + 1 - SSIM_WIN);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM with an 11-tap Gaussian window (σ 1.5), data range 1,
/// averaged over valid window positions and channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WIN || w < SSIM_WIN {
        return param_err(format!("SSIM needs at least {SSIM_WIN}×{SSIM_WIN}, got {h}×{w}"));
    }
    let k = gaussian_kernel();
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut total = 0.0;
    for c in 0..a.channels() {
        let x: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(&x, h, w, &k);
        let (my, _, _) = filter_valid(&y, h, w, &k);
        let (sxx, _, _) = filter_valid(&xx, h, w, &k);
        let (syy, _, _) = filter_valid(&yy, h, w, &k);
        let (sxy, oh, ow) = filter_valid(&xy, h, w, &k);
        let mut sum = 0.0;
        for i in 0..oh * ow {
            let (vx, vy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i]);
            let cov = sxy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            sum += num / den;
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / a.channels() as f64)
}

/// One layer's contribution to model size and compute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

impl LayerRow {
    pub fn new(name: impl Into<String>, params: u64, macs: u64) -> Self {
        Self {
            name: name.into(),
            params,
            macs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub per_layer: Vec<LayerRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub input_resolution: (usize, usize),
}

impl ComplexityReport {
    pub fn from_rows(per_layer: Vec<LayerRow>, input_resolution: (usize, usize)) -> Self {
        let total_params = per_layer.iter().map(|r| r.params).sum();
        let total_macs = per_layer.iter().map(|r| r.macs).sum();
        Self {
            per_layer,
            total_params,
            total_macs,
            input_resolution,
        }
    }

    /// Aligned plain-text table with a totals line.
    pub fn to_text(&self) -> String {
        let width = self.per_layer.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", "layer", "params", "MACs");
        for r in &self.per_layer {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", r.name, r.params, r.macs);
        }
        let (h, w) = self.input_resolution;
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>16}",
            "total", self.total_params, self.total_macs
        );
        let _ = writeln!(
            s,
            "{:.3}M params, {:.2}G MACs at {h}x{w}",
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9
        );
        s
    }

    /// `name,params,macs` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,params,macs\n");
        for r in &self.per_layer {
            let _ = writeln!(s, "{},{},{}", r.name, r.params, r.macs);
        }
        s
    }
}

/// Exact count of learnable scalars in a store (running statistics excluded).
pub fn count_params<T: dpte_autograd::Float>(store: &dpte_autograd::ParamStore<T>) -> u64 {
    store.count_learnable() as u64
}

/// Analytic per-layer parameters and MACs of a generator, plus the adaptation
/// layer when given, at input size `h×w`. Convolutions cost
/// `k²·Cin·Cout` per output pixel, a 2×2 stride-2 transposed convolution
/// `Cin·Cout` per output pixel; pooling, norms and activations are free.
pub fn estimate_macs(
    generator: &GeneratorConfig,
    adaptation: Option<&AdaptationConfig>,
    h: usize,
    w: usize,
) -> Result<ComplexityReport> {
    let mut store = dpte_autograd::ParamStore::<f32>::new();
    let mut b = ParamBuilder::new(&mut store, 0);
    let g = Generator::new(&mut b, generator)?;
    g.check_size(h, w)?;
    let mut rows = g.layer_rows(h, w);
    if let Some(cfg) = adaptation {
        let a = Adaptation::new(&mut b, generator.bottleneck_channels(), cfg)?;
        let m = generator.size_multiple();
        rows.extend(a.layer_rows(h / m, w / m));
    }
    Ok(ComplexityReport::from_rows(rows, (h, w)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuntimeStats {
    pub mean: f64,
    pub stddev: f64,
    pub iters: usize,
}

impl RuntimeStats {
    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.stddev / (self.iters as f64).sqrt()
    }
}

/// Wall-clock seconds per call of `f`, after `warmup` discarded calls.
pub fn profile_runtime(mut f: impl FnMut(), warmup: usize, iters: usize) -> Result<RuntimeStats> {
    if iters == 0 {
        return param_err("profiling needs at least one iteration");
    }
    for _ in 0..warmup {
        f();
    }
    let times: Vec<f64> = (0..iters)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    let mean = times.iter().sum::<f64>() / iters as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / iters as f64;
    Ok(RuntimeStats {
        mean,
        stddev: var.sqrt(),
        iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = ImageTensor::filled(3, 4, 4, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = ImageTensor::filled(3, 4, 4, 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &ImageTensor::filled(3, 4, 5, 0.5), 1.0).is_err());
    }

    #[test]
    fn ssim_self_and_size_guard() {
        let a = ImageTensor::from_fn(3, 12, 13, |c, y, x| ((c * 7 + y * 3 + x) % 10) as f32 / 9.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let small = ImageTensor::filled(3, 10, 20, 0.1);
        assert!(matches!(ssim(&small, &small), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn report_totals_are_row_sums() {
        let r = ComplexityReport::from_rows(vec![LayerRow::new("a", 3, 10), LayerRow::new("b", 4, 20)], (8, 8));
        assert_eq!((r.total_params, r.total_macs), (7, 30));
        assert_eq!(r.to_csv(), "name,params,macs\na,3,10\nb,4,20\n");
        assert!(r.to_text().contains("total"));
    }

    #[test]
    fn profiling_rejects_zero_iterations() {
        assert!(profile_runtime(|| {}, 0, 0).is_err());
    }
}

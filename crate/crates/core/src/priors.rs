//! Dark-channel haze map: patch-level minimum followed by guided-filter smoothing.
//!
//! The map is high where haze is dense. It is fed to the generator as a fourth
//! input channel and, floored at `w_min`, weights the transmission-aware loss.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::image::{ImageTensor, Map2};

/// Parameters of haze-map extraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorParams {
    /// Dark-channel window side, odd.
    pub patch_size: usize,
    /// Guided-filter radius.
    pub smooth_radius: usize,
    /// Guided-filter regularizer.
    pub smooth_eps: f32,
    /// Floor applied when the map is used as a loss weight.
    pub w_min: f32,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            patch_size: 15,
            smooth_radius: 20,
            smooth_eps: 1e-3,
            w_min: 0.1,
        }
    }
}

/// Smoothed dark channel of an image, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HazeMap {
    pub map: Map2,
    pub patch_size: usize,
    pub smooth_radius: usize,
    pub smooth_eps: f32,
}

impl HazeMap {
    pub fn height(&self) -> usize {
        self.map.height()
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }
}

/// Minimum over channels, then over the `patch_size` window around each pixel
/// (window clipped at the borders, equivalent to edge replication).
pub fn dark_channel(image: &ImageTensor, patch_size: usize) -> Result<Map2> {
    image.ensure_rgb()?;
    let (h, w) = (image.height(), image.width());
    if patch_size % 2 == 0 || patch_size == 0 || patch_size > h.min(w) {
        return param_err(format!(
            "patch size {patch_size} must be odd and in 1..={}",
            h.min(w)
        ));
    }
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    let pixel_min: Vec<f32> = (0..h * w).map(|i| r[i].min(g[i]).min(b[i])).collect();
    let rad = patch_size / 2;
    // separable erosion: rows then columns
    let mut rows = vec![0f32; h * w];
    for y in 0..h {
        let line = &pixel_min[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(rad);
            let hi = (x + rad).min(w - 1);
            rows[y * w + x] = line[lo..=hi].iter().copied().fold(f32::INFINITY, f32::min);
        }
    }
    let mut out = vec![f32::INFINITY; h * w];
    for y in 0..h {
        let dst = &mut out[y * w..(y + 1) * w];
        for yy in y.saturating_sub(rad)..=(y + rad).min(h - 1) {
            for (d, &s) in dst.iter_mut().zip(&rows[yy * w..(yy + 1) * w]) {
                *d = d.min(s);
            }
        }
    }
    Map2::new(h, w, out)
}

/// Mean over the `(2r+1)²` window with edge replication, computed in f64.
pub(crate) fn box_mean(data: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let win = (2 * radius + 1) as f64;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let r = radius as isize;
    // running window sums, rows first
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        let mut acc: f64 = (-r..=r).map(|i| row[clamp(i, w)]).sum();
        for x in 0..w {
            tmp[y * w + x] = acc;
            let xi = x as isize;
            acc += row[clamp(xi + r + 1, w)] - row[clamp(xi - r, w)];
        }
    }
    let mut acc = vec![0f64; w];
    for i in -r..=r {
        let src = &tmp[clamp(i, h) * w..][..w];
        acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
    }
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        out[y * w..(y + 1) * w]
            .iter_mut()
            .zip(&acc)
            .for_each(|(o, a)| *o = a / (win * win));
        let yi = y as isize;
        let (add, sub) = (clamp(yi + r + 1, h) * w, clamp(yi - r, h) * w);
        for x in 0..w {
            acc[x] += tmp[add + x] - tmp[sub + x];
        }
    }
    out
}

/// Guided filter of `raw` with the luma of `guide`, clamped to `[0, 1]`.
///
/// Before clamping the output is linear in `raw` for a fixed guide.
pub fn smooth_map(raw: &Map2, guide: &ImageTensor, radius: usize, eps: f32) -> Result<Map2> {
    if raw.height() != guide.height() || raw.width() != guide.width() {
        return shape_err(format!(
            "raw map {}×{} vs guide {}×{}",
            raw.height(),
            raw.width(),
            guide.height(),
            guide.width()
        ));
    }
    if radius == 0 {
        return param_err("smoothing radius must be ≥ 1");
    }
    if !(eps > 0.0) {
        return param_err(format!("smoothing eps must be positive, got {eps}"));
    }
    let (h, w) = (raw.height(), raw.width());
    let gray = guide.luma()?;
    let i: Vec<f64> = gray.data().iter().map(|&v| v as f64).collect();
    let p: Vec<f64> = raw.data().iter().map(|&v| v as f64).collect();
    let ip: Vec<f64> = i.iter().zip(&p).map(|(a, b)| a * b).collect();
    let ii: Vec<f64> = i.iter().map(|a| a * a).collect();
    let mean_i = box_mean(&i, h, w, radius);
    let mean_p = box_mean(&p, h, w, radius);
    let corr_ip = box_mean(&ip, h, w, radius);
    let corr_ii = box_mean(&ii, h, w, radius);
    let eps = eps as f64;
    let mut a = vec![0f64; h * w];
    let mut b = vec![0f64; h * w];
    for k in 0..h * w {
        let cov = corr_ip[k] - mean_i[k] * mean_p[k];
        let var = corr_ii[k] - mean_i[k] * mean_i[k];
        a[k] = cov / (var + eps);
        b[k] = mean_p[k] - a[k] * mean_i[k];
    }
    let mean_a = box_mean(&a, h, w, radius);
    let mean_b = box_mean(&b, h, w, radius);
    let out = (0..h * w)
        .map(|k| (mean_a[k] * i[k] + mean_b[k]).clamp(0.0, 1.0) as f32)
        .collect();
    Map2::new(h, w, out)
}

/// Dark channel of `image`, smoothed with its own luma as guide.
pub fn extract_haze_map(
    image: &ImageTensor,
    patch_size: usize,
    radius: usize,
    eps: f32,
) -> Result<HazeMap> {
    let raw = dark_channel(image, patch_size)?;
    let map = smooth_map(&raw, image, radius, eps)?;
    Ok(HazeMap {
        map,
        patch_size,
        smooth_radius: radius,
        smooth_eps: eps,
    })
}

/// [`extract_haze_map`] with the parameters of a [`PriorParams`].
pub fn extract_with(image: &ImageTensor, params: &PriorParams) -> Result<HazeMap> {
    let patch = params.patch_size.min(image.height().min(image.width()));
    // keep the window odd when clipped to a small image
    let patch = if patch % 2 == 0 { patch - 1 } else { patch };
    extract_haze_map(image, patch, params.smooth_radius, params.smooth_eps)
}

/// Transmission-aware loss weight `τ = max(map, w_min)`.
pub fn make_loss_weight(hm: &HazeMap, w_min: f32) -> Result<Map2> {
    if !(w_min > 0.0 && w_min < 1.0) {
        return param_err(format!("w_min must lie in (0, 1), got {w_min}"));
    }
    Ok(hm.map.map(|v| v.max(w_min)))
}

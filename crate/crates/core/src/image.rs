//! Raster types shared across the pipeline.

use std::path::{Path, PathBuf};

use dpte_autograd::{Float, Tensor};

use crate::error::{param_err, shape_err, Result};

/// Planar (channel-first) float image, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return shape_err(format!(
                "{} values cannot form a {channels}×{height}×{width} image",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::from_fn(channels, height, width, |_, _, _| value)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Shape check for 3-channel inputs.
    pub fn ensure_rgb(&self) -> Result<()> {
        if self.channels != 3 {
            return shape_err(format!("expected an RGB image, got {} channels", self.channels));
        }
        Ok(())
    }

    /// BT.601 luma.
    pub fn luma(&self) -> Result<Map2> {
        self.ensure_rgb()?;
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let data = (0..self.height * self.width)
            .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
            .collect();
        Map2::new(self.height, self.width, data)
    }

    /// `1×C×H×W` tensor.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }

    /// Sample `index` of an NCHW tensor.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, index: usize) -> Self {
        let s = t.sample(index);
        let (_, c, h, w) = s.dims4();
        Self {
            channels: c,
            height: h,
            width: w,
            data: s.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return param_err(format!(
                "crop {height}×{width} at ({top},{left}) exceeds {}×{}",
                self.height, self.width
            ));
        }
        Ok(Self::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    /// Append a single-channel map as an extra channel.
    pub fn with_extra_channel(&self, map: &Map2) -> Result<Self> {
        if map.height() != self.height || map.width() != self.width {
            return shape_err(format!(
                "map {}×{} does not match image {}×{}",
                map.height(),
                map.width(),
                self.height,
                self.width
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(map.data());
        Self::new(self.channels + 1, self.height, self.width, data)
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Single-channel `H×W` map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map2 {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Map2 {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!("{} values cannot form a {height}×{width} map", data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return param_err("map crop out of bounds");
        }
        Ok(Self::from_fn(height, width, |y, x| self.get(top + y, left + x)))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// `1×1×H×W` tensor.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }
}

/// `<dir>/<stem>.hazemap.png` beside an input image.
pub fn hazemap_cache_path(image_path: &Path) -> PathBuf {
    let stem = image_path.file_stem().unwrap_or_default().to_string_lossy();
    image_path.with_file_name(format!("{stem}.hazemap.png"))
}

/// Smallest multiple of `m` that is ≥ `n`.
pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Reflect-pad an NCHW tensor on the bottom/right up to multiples of `m`.
pub fn pad_to_multiple<T: Float>(t: &Tensor<T>, m: usize) -> Tensor<T> {
    let (_, _, h, w) = t.dims4();
    let (ph, pw) = (round_up(h, m) - h, round_up(w, m) - w);
    if ph == 0 && pw == 0 {
        return t.clone();
    }
    // reflection cannot exceed the image size; fall back to repeated reflection
    let mut out = t.clone();
    let (mut rem_h, mut rem_w) = (ph, pw);
    while rem_h > 0 || rem_w > 0 {
        let (_, _, ch, cw) = out.dims4();
        let sh = rem_h.min(ch.saturating_sub(1));
        let sw = rem_w.min(cw.saturating_sub(1));
        if sh == 0 && sw == 0 {
            break;
        }
        out = out.pad_reflect(sh, sw);
        rem_h -= sh;
        rem_w -= sw;
    }
    out
}

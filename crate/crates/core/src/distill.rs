//! Hint distillation: the decaying hint weight, the adaptation layer that maps
//! student bottlenecks to the teacher's width, and hint providers.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use dpte_autograd::{Binding, Float, Mode, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::generator::{build_generator, Generator, GeneratorConfig};
use crate::layers::{Conv2d, ParamBuilder};
use crate::metrics::LayerRow;
use crate::ptb::Ptb;

/// Hint weight for epoch `e` of `total` when the first stage spans a fraction
/// `delta` of training: linear from 1 at epoch 0 to 0 at `delta·total`, then 0.
pub fn lambda_decay(epoch: usize, total: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return param_err(format!("delta must lie in (0, 1], got {delta}"));
    }
    if total == 0 {
        return param_err("total epochs must be at least 1");
    }
    let stage_end = delta * total as f64;
    let e = epoch as f64;
    if e >= stage_end {
        return Ok(0.0);
    }
    Ok((1.0 - e / stage_end).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptationKind {
    /// One pooling block followed by the 1×1 projection.
    PtbConv,
    /// The 1×1 projection alone.
    ConvOnly,
}

impl std::str::FromStr for AdaptationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ptb-conv" | "ptb" => Ok(Self::PtbConv),
            "conv-only" => Ok(Self::ConvOnly),
            _ => Err(format!("unknown adaptation `{s}` (ptb-conv, conv-only)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub kind: AdaptationKind,
    pub mlp_ratio: usize,
    pub hint_channels: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            kind: AdaptationKind::PtbConv,
            mlp_ratio: 1,
            hint_channels: 512,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adaptation {
    pub block: Option<Ptb>,
    pub proj: Conv2d,
    pub in_channels: usize,
}

impl Adaptation {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, in_channels: usize, cfg: &AdaptationConfig) -> Result<Self> {
        if cfg.hint_channels == 0 {
            return param_err("hint channels must be positive");
        }
        b.scoped("adapt", |b| {
            let block = match cfg.kind {
                AdaptationKind::PtbConv => Some(Ptb::new(b, "block", in_channels, cfg.mlp_ratio)?),
                AdaptationKind::ConvOnly => None,
            };
            Ok(Self {
                block,
                proj: Conv2d::new(b, "proj", in_channels, cfg.hint_channels, 1),
                in_channels,
            })
        })
    }

    pub fn forward<T: Float>(&self, b: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = match &self.block {
            Some(block) => block.forward(b, x)?,
            None => x.clone(),
        };
        self.proj.forward(b, &h)
    }

    /// Rows at bottleneck size `h×w`.
    pub fn layer_rows(&self, h: usize, w: usize) -> Vec<LayerRow> {
        let mut rows = Vec::new();
        if let Some(p) = &self.block {
            rows.push(LayerRow::new("adapt.block", p.params() as u64, p.macs(h, w)));
        }
        rows.push(LayerRow::new(
            "adapt.proj",
            self.proj.params() as u64,
            (self.proj.in_channels * self.proj.out_channels * h * w) as u64,
        ));
        rows
    }
}

const HINT_MAGIC: &[u8; 4] = b"DPTH";
pub const HINT_VERSION: u32 = 1;

/// Write a `C×H×W` (or `1×C×H×W`) feature map as a checksummed hint file.
pub fn write_hint_file(path: &Path, hint: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = match *hint.shape() {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return shape_err(format!("hint must be C×H×W, got {:?}", hint.shape())),
    };
    let mut buf = Vec::with_capacity(24 + 4 * hint.numel());
    buf.extend_from_slice(HINT_MAGIC);
    for v in [HINT_VERSION, c as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in hint.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

/// Read a hint file as a `1×C×H×W` tensor.
pub fn read_hint_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let incompatible = |reason: &str| Error::Incompatible {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != HINT_MAGIC {
        return Err(incompatible("not a hint file"));
    }
    if bytes.len() < 24 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let version = word(0) as u32;
    if version != HINT_VERSION {
        return Err(incompatible(&format!("hint format version {version}, expected {HINT_VERSION}")));
    }
    let (c, h, w) = (word(1), word(2), word(3));
    let n = c * h * w;
    if bytes.len() != 20 + 4 * n + 4 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let body = &bytes[..20 + 4 * n];
    let stored = u32::from_le_bytes(bytes[20 + 4 * n..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let data = body[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(vec![1, c, h, w], data))
}

/// Where a training crop came from, for providers that store full-image hints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flipped: bool,
    /// Width of the uncropped image, needed to mirror the window.
    pub full_width: usize,
}

/// One sample's request for a hint.
pub struct HintRequest<'a> {
    pub id: &'a str,
    /// The student's `1×4×H×W` input for this sample.
    pub input: &'a Tensor<f32>,
    pub window: Option<CropWindow>,
}

/// Source of teacher bottleneck features. Implementations are read-only and
/// shareable between threads.
pub trait HintProvider: Send + Sync {
    fn hint_channels(&self) -> usize;

    /// `1×C×H/16×W/16` features for the request.
    fn hint(&self, req: &HintRequest) -> Result<Tensor<f32>>;

    /// Whether crop origins must sit on the bottleneck grid.
    fn needs_aligned_crops(&self) -> bool {
        false
    }
}

/// Checks every hint against the first one's channel count and the student's
/// bottleneck size.
fn check_hint(seen: &OnceLock<usize>, id: &str, hint: &Tensor<f32>, expect_hw: (usize, usize)) -> Result<()> {
    let (_, c, h, w) = hint.dims4();
    let first = *seen.get_or_init(|| c);
    if c != first || (h, w) != expect_hw {
        return Err(Error::HintConsistency(format!(
            "sample `{id}` gives {c}×{h}×{w}, expected {first}×{}×{}",
            expect_hw.0, expect_hw.1
        )));
    }
    Ok(())
}

/// Hints stored as `<dir>/<id>.hint`, computed on full images at stride 16.
pub struct PrecomputedHints {
    dir: PathBuf,
    stride: usize,
    channels: usize,
    seen: OnceLock<usize>,
}

impl PrecomputedHints {
    pub fn new(dir: impl Into<PathBuf>, channels: usize, stride: usize) -> Self {
        Self {
            dir: dir.into(),
            stride,
            channels,
            seen: OnceLock::new(),
        }
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        hint_path(&self.dir, id)
    }
}

pub fn hint_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.hint"))
}

impl HintProvider for PrecomputedHints {
    fn hint_channels(&self) -> usize {
        self.channels
    }

    fn needs_aligned_crops(&self) -> bool {
        true
    }

    fn hint(&self, req: &HintRequest) -> Result<Tensor<f32>> {
        let path = self.path_for(req.id);
        if !path.exists() {
            return Err(Error::MissingHint(req.id.to_string()));
        }
        let full = read_hint_file(&path)?;
        let (_, _, ih, iw) = req.input.dims4();
        let s = self.stride;
        let hint = match req.window {
            None => full,
            Some(win) => {
                if win.top % s != 0 || win.left % s != 0 {
                    return param_err(format!("crop origin ({}, {}) is not on the {s}-pixel grid", win.top, win.left));
                }
                let (_, _, fh, fw) = full.dims4();
                // crop in unflipped coordinates, then mirror like the pixels
                let left = if win.flipped { win.full_width - win.left - win.width } else { win.left };
                let (t, l, h, w) = (win.top / s, left / s, win.height / s, win.width / s);
                if t + h > fh || l + w > fw {
                    return Err(Error::HintConsistency(format!(
                        "hint for `{}` is {fh}×{fw}, too small for the crop",
                        req.id
                    )));
                }
                let c = full.crop(t, l, h, w);
                if win.flipped {
                    c.flip_horizontal()
                } else {
                    c
                }
            }
        };
        if hint.dims4().1 != self.channels {
            return Err(Error::HintConsistency(format!(
                "hint for `{}` has {} channels, expected {}",
                req.id,
                hint.dims4().1,
                self.channels
            )));
        }
        check_hint(&self.seen, req.id, &hint, (ih / s, iw / s))?;
        Ok(hint)
    }
}

/// Side of the noise batch that calibrates a random teacher.
const CALIBRATION_SIDE: usize = 128;

/// A frozen generator evaluated on the fly; its post-pyramid bottleneck is the hint.
pub struct FrozenTeacher {
    pub generator: Generator,
    pub store: ParamStore<f32>,
    seen: OnceLock<usize>,
}

impl FrozenTeacher {
    pub fn new(generator: Generator, store: ParamStore<f32>) -> Self {
        Self {
            generator,
            store,
            seen: OnceLock::new(),
        }
    }

    /// Randomly initialized teacher of twice the default width.
    pub fn random_wide(base: &GeneratorConfig, seed: u64) -> Result<Self> {
        let cfg = GeneratorConfig {
            base_channels: base.base_channels * 2,
            ..base.clone()
        };
        let (g, store) = build_generator(&cfg, seed)?;
        let mut teacher = Self::new(g, store);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let side = CALIBRATION_SIDE.max(cfg.size_multiple() * 8);
        let noise = Tensor::from_fn(vec![2, crate::generator::INPUT_CHANNELS, side, side], |_| rng.random::<f32>());
        teacher.calibrate(&noise)?;
        Ok(teacher)
    }

    /// Replaces the normalization statistics with those of one batch and
    /// rescales the bottleneck convolution, so an untrained teacher gives
    /// features of unit RMS in eval mode.
    pub fn calibrate(&mut self, input: &Tensor<f32>) -> Result<()> {
        let b = Binding::new(&self.store, Mode::TRAIN);
        let (f, _) = self.generator.encode(&b, &Var::constant(input.clone()))?;
        self.generator.spp(&b, &f)?;
        let mut updates = b.into_updates();
        // keep only the last write of each buffer, then make it a single sample
        updates.reverse();
        let mut seen = std::collections::BTreeSet::new();
        updates.retain(|(id, _)| seen.insert(*id));
        for (id, t) in &mut updates {
            if self.store.entry(*id).name.ends_with(".updates") {
                *t = Tensor::new(vec![1], vec![1.0]);
            }
        }
        self.store.apply_updates(updates);
        let f = self.features(input)?;
        let rms = (f.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / f.numel() as f64).sqrt();
        if rms > 0.0 && rms.is_finite() {
            let conv = self.generator.bottleneck_conv();
            for id in [conv.weight, conv.bias] {
                let t = self.store.get_mut(id);
                *t = t.scale((1.0 / rms) as f32);
            }
        }
        Ok(())
    }

    /// Bottleneck features for a batch of inputs, in eval mode.
    pub fn features(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let b = Binding::new(&self.store, Mode::EVAL);
        let (f, _) = self.generator.encode(&b, &Var::constant(input.clone()))?;
        Ok(self.generator.spp(&b, &f)?.value().clone())
    }
}

/// Writes `<dir>/<id>.hint` for every `(id, 1×4×H×W input)`; sides must be
/// multiples of the teacher's stride so crops can be mapped onto the grid.
pub fn write_teacher_hints<'a>(
    teacher: &FrozenTeacher,
    inputs: impl IntoIterator<Item = (&'a str, Tensor<f32>)>,
    dir: &Path,
) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let m = teacher.generator.config.size_multiple();
    let mut count = 0;
    for (id, input) in inputs {
        let (_, _, h, w) = input.dims4();
        if h % m != 0 || w % m != 0 {
            return shape_err(format!("image `{id}` is {h}×{w}; hints need sides that are multiples of {m}"));
        }
        write_hint_file(&hint_path(dir, id), &teacher.features(&input)?)?;
        count += 1;
    }
    Ok(count)
}

impl HintProvider for FrozenTeacher {
    fn hint_channels(&self) -> usize {
        self.generator.config.bottleneck_channels()
    }

    fn hint(&self, req: &HintRequest) -> Result<Tensor<f32>> {
        let hint = self.features(req.input)?;
        let (_, _, h, w) = req.input.dims4();
        let m = self.generator.config.size_multiple();
        check_hint(&self.seen, req.id, &hint, (h / m, w / m))?;
        Ok(hint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_values() {
        assert_eq!(lambda_decay(0, 400, 0.5).unwrap(), 1.0);
        assert_eq!(lambda_decay(100, 400, 0.5).unwrap(), 0.5);
        assert_eq!(lambda_decay(200, 400, 0.5).unwrap(), 0.0);
        assert_eq!(lambda_decay(300, 400, 0.5).unwrap(), 0.0);
        assert!(lambda_decay(0, 400, 0.0).is_err());
        assert!(lambda_decay(0, 400, 1.5).is_err());
        assert!(lambda_decay(0, 0, 0.5).is_err());
    }

    #[test]
    fn hint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hint");
        let t = Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f32 * 0.25 - 1.0);
        write_hint_file(&path, &t).unwrap();
        assert_eq!(read_hint_file(&path).unwrap(), t);
    }
}

//! U-shaped dehazing generator: a pooling-transformer encoder over RGB plus
//! haze map, a spatial-pyramid-pooling bottleneck and a convolutional decoder
//! with concatenated skips.

use dpte_autograd::{Binding, Float, Mode, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::image::ImageTensor;
use crate::layers::{check_channels, conv_params, Activation, Conv2d, ConvTranspose2x2, ParamBuilder};
use crate::metrics::LayerRow;
use crate::priors::HazeMap;
use crate::ptb::{Ptb, DEFAULT_MLP_RATIO};

/// Decoder block structure per upsampling level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderVariant {
    /// Transposed conv, skip concat, `M` Swish convs.
    Swish,
    /// As `Swish` with ReLU.
    Relu,
    /// Transposed conv, skip concat, one embedding conv and `M-1` blocks.
    Ptb,
    /// As `Swish` with an identity shortcut from the first conv's output.
    Residual,
    /// Depth-to-space upsampling instead of the transposed conv.
    Subpixel,
}

impl std::str::FromStr for DecoderVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "swish" => Ok(Self::Swish),
            "relu" => Ok(Self::Relu),
            "ptb" => Ok(Self::Ptb),
            "residual" => Ok(Self::Residual),
            "subpixel" => Ok(Self::Subpixel),
            _ => Err(format!("unknown decoder `{s}` (swish, relu, ptb, residual, subpixel)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    Sigmoid,
    /// Hard clamp to `[0, 1]`.
    Clamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub decoder_convs: usize,
    pub mlp_ratio: usize,
    pub spp_pool_sizes: Vec<usize>,
    pub decoder: DecoderVariant,
    pub output_activation: OutputActivation,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            levels: 5,
            blocks_per_level: 2,
            decoder_convs: 3,
            mlp_ratio: DEFAULT_MLP_RATIO,
            spp_pool_sizes: vec![3, 5, 7],
            decoder: DecoderVariant::Swish,
            output_activation: OutputActivation::Sigmoid,
        }
    }
}

pub const INPUT_CHANNELS: usize = 4;
pub const OUTPUT_CHANNELS: usize = 3;

impl GeneratorConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels - 1)
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return param_err(format!("generator needs at least 2 levels, got {}", self.levels));
        }
        if self.base_channels == 0 || self.mlp_ratio == 0 || self.decoder_convs == 0 {
            return param_err("channel width, MLP ratio and decoder depth must be positive");
        }
        if self.decoder == DecoderVariant::Subpixel && self.base_channels % 2 != 0 {
            return param_err("subpixel decoder needs an even base width");
        }
        if self.decoder == DecoderVariant::Ptb && self.decoder_convs < 2 {
            return param_err("block decoder needs at least 2 decoder layers");
        }
        if let Some(k) = self.spp_pool_sizes.iter().find(|k| *k % 2 == 0) {
            return param_err(format!("pyramid pool size {k} must be odd"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Upsample {
    Transposed(ConvTranspose2x2),
    Shuffle,
}

#[derive(Clone, Debug)]
enum DecoderBody {
    Convs { convs: Vec<Conv2d>, act: Activation, residual: bool },
    Blocks { embed: Conv2d, blocks: Vec<Ptb> },
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Upsample,
    body: DecoderBody,
    channels: usize,
}

/// Encoder features and the pre-head decoder output of one forward pass.
pub struct GeneratorOutput<T: Float> {
    /// Restored image, `N×3×H×W` in `[0, 1]`.
    pub image: Var<T>,
    /// Post-pyramid bottleneck, the student side of the hint loss.
    pub bottleneck: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    embeds: Vec<Conv2d>,
    blocks: Vec<Vec<Ptb>>,
    spp_fuse: Conv2d,
    decoder: Vec<DecoderLevel>,
    head: Conv2d,
}

impl Generator {
    pub fn new<T: Float>(b: &mut ParamBuilder<T>, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut embeds = Vec::new();
        let mut blocks = Vec::new();
        for level in 0..cfg.levels {
            let cin = if level == 0 { INPUT_CHANNELS } else { cfg.channels(level - 1) };
            let c = cfg.channels(level);
            let name = format!("enc{level}");
            b.scoped(&name, |b| -> Result<()> {
                embeds.push(Conv2d::linear(b, "embed", cin, c, 3));
                let mut level_blocks = Vec::new();
                for i in 0..cfg.blocks_per_level {
                    level_blocks.push(Ptb::new(b, &format!("block{i}"), c, cfg.mlp_ratio)?);
                }
                blocks.push(level_blocks);
                Ok(())
            })?;
        }
        let cb = cfg.bottleneck_channels();
        let spp_fuse = b.scoped("spp", |b| Conv2d::linear(b, "fuse", cb * (1 + cfg.spp_pool_sizes.len()), cb, 1));
        let mut decoder = Vec::new();
        for level in (0..cfg.levels - 1).rev() {
            let (c, below) = (cfg.channels(level), cfg.channels(level + 1));
            let name = format!("dec{level}");
            let dl = b.scoped(&name, |b| -> Result<DecoderLevel> {
                let (up, up_channels) = match cfg.decoder {
                    DecoderVariant::Subpixel => (Upsample::Shuffle, below / 4),
                    _ => (Upsample::Transposed(ConvTranspose2x2::new(b, "up", below, c)), c),
                };
                let merged = up_channels + c;
                let body = match cfg.decoder {
                    DecoderVariant::Ptb => DecoderBody::Blocks {
                        embed: Conv2d::linear(b, "embed", merged, c, 3),
                        blocks: (0..cfg.decoder_convs - 1)
                            .map(|i| Ptb::new(b, &format!("block{i}"), c, cfg.mlp_ratio))
                            .collect::<Result<_>>()?,
                    },
                    variant => DecoderBody::Convs {
                        convs: (0..cfg.decoder_convs)
                            .map(|i| Conv2d::new(b, &format!("conv{i}"), if i == 0 { merged } else { c }, c, 3))
                            .collect(),
                        act: if variant == DecoderVariant::Relu { Activation::Relu } else { Activation::Swish },
                        residual: variant == DecoderVariant::Residual,
                    },
                };
                Ok(DecoderLevel { up, body, channels: c })
            })?;
            decoder.push(dl);
        }
        let head = Conv2d::zeroed(b, "head", cfg.channels(0), OUTPUT_CHANNELS, 3);
        Ok(Self {
            config: cfg.clone(),
            embeds,
            blocks,
            spp_fuse,
            decoder,
            head,
        })
    }

    /// Checks that `h×w` survives the downsampling path.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            let (ph, pw) = (h.div_ceil(m).max(1) * m, w.div_ceil(m).max(1) * m);
            return shape_err(format!(
                "input {h}×{w} is not a multiple of {m}; pad to {ph}×{pw}"
            ));
        }
        Ok(())
    }

    /// Returns the bottleneck (before the pyramid) and one skip per pooling step.
    pub fn encode<T: Float>(&self, b: &Binding<T>, x: &Var<T>) -> Result<(Var<T>, Vec<Var<T>>)> {
        check_channels("generator", x, INPUT_CHANNELS)?;
        let (_, _, h, w) = x.value().dims4();
        self.check_size(h, w)?;
        let mut f = x.clone();
        let mut skips = Vec::new();
        for (level, (embed, blocks)) in self.embeds.iter().zip(&self.blocks).enumerate() {
            f = embed.forward(b, &f)?;
            for block in blocks {
                f = block.forward(b, &f)?;
            }
            if level + 1 < self.config.levels {
                skips.push(f.clone());
                f = f.max_pool2();
            }
        }
        Ok((f, skips))
    }

    /// Concatenates the features with stride-1 max pools and fuses back.
    /// Windows wider than the map are clipped, so small inputs still work.
    pub fn spp<T: Float>(&self, b: &Binding<T>, f: &Var<T>) -> Result<Var<T>> {
        let pooled: Vec<Var<T>> = self.config.spp_pool_sizes.iter().map(|&k| f.max_pool_same(k)).collect();
        let mut parts = vec![f];
        parts.extend(pooled.iter());
        self.spp_fuse.forward(b, &Var::concat_channels(&parts))
    }

    /// Weight and bias of the convolution that produces the bottleneck.
    pub(crate) fn bottleneck_conv(&self) -> &Conv2d {
        &self.spp_fuse
    }

    /// Upsampling path; returns base-width features at full resolution.
    pub fn decode<T: Float>(&self, b: &Binding<T>, bottleneck: &Var<T>, skips: &[Var<T>]) -> Result<Var<T>> {
        if skips.len() != self.decoder.len() {
            return shape_err(format!("expected {} skips, got {}", self.decoder.len(), skips.len()));
        }
        let mut f = bottleneck.clone();
        for (dl, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = match &dl.up {
                Upsample::Transposed(t) => t.forward(b, &f)?,
                Upsample::Shuffle => f.pixel_shuffle2(),
            };
            if up.shape()[2..] != skip.shape()[2..] || skip.shape()[1] != dl.channels {
                return shape_err(format!("skip {:?} does not fit upsampled {:?}", skip.shape(), up.shape()));
            }
            let merged = Var::concat_channels(&[&up, skip]);
            f = match &dl.body {
                DecoderBody::Convs { convs, act, residual } => {
                    let first = act.apply(&convs[0].forward(b, &merged)?);
                    let mut h = first.clone();
                    for conv in &convs[1..] {
                        h = act.apply(&conv.forward(b, &h)?);
                    }
                    if *residual {
                        h.add(&first)
                    } else {
                        h
                    }
                }
                DecoderBody::Blocks { embed, blocks } => {
                    let mut h = embed.forward(b, &merged)?;
                    for block in blocks {
                        h = block.forward(b, &h)?;
                    }
                    h
                }
            };
        }
        Ok(f)
    }

    /// Full pass on an `N×4×H×W` input.
    pub fn forward<T: Float>(&self, b: &Binding<T>, x: &Var<T>) -> Result<GeneratorOutput<T>> {
        let (f, skips) = self.encode(b, x)?;
        let bottleneck = self.spp(b, &f)?;
        let feat = self.decode(b, &bottleneck, &skips)?;
        let logits = self.head.forward(b, &feat)?;
        let image = match self.config.output_activation {
            OutputActivation::Sigmoid => logits.sigmoid(),
            OutputActivation::Clamp => clamp01(&logits),
        };
        Ok(GeneratorOutput { image, bottleneck })
    }

    /// Per-layer parameter and MAC rows at input size `h×w`.
    pub fn layer_rows(&self, h: usize, w: usize) -> Vec<LayerRow> {
        let cfg = &self.config;
        let mut rows = Vec::new();
        let conv_row = |name: String, c: &Conv2d, hh: usize, ww: usize| {
            LayerRow::new(
                name,
                c.params() as u64,
                (c.kernel * c.kernel * c.in_channels * c.out_channels * hh * ww) as u64,
            )
        };
        let ptb_row = |name: String, p: &Ptb, hh: usize, ww: usize| LayerRow::new(name, p.params() as u64, p.macs(hh, ww));
        for level in 0..cfg.levels {
            let (hh, ww) = (h >> level, w >> level);
            rows.push(conv_row(format!("enc{level}.embed"), &self.embeds[level], hh, ww));
            for (i, p) in self.blocks[level].iter().enumerate() {
                rows.push(ptb_row(format!("enc{level}.block{i}"), p, hh, ww));
            }
        }
        let s = cfg.levels - 1;
        rows.push(conv_row("spp.fuse".into(), &self.spp_fuse, h >> s, w >> s));
        for (dl, level) in self.decoder.iter().zip((0..cfg.levels - 1).rev()) {
            let (hh, ww) = (h >> level, w >> level);
            if let Upsample::Transposed(t) = &dl.up {
                rows.push(LayerRow::new(
                    format!("dec{level}.up"),
                    conv_params(t.in_channels, t.out_channels, 2) as u64,
                    (t.in_channels * t.out_channels * hh * ww) as u64,
                ));
            }
            match &dl.body {
                DecoderBody::Convs { convs, .. } => {
                    for (i, c) in convs.iter().enumerate() {
                        rows.push(conv_row(format!("dec{level}.conv{i}"), c, hh, ww));
                    }
                }
                DecoderBody::Blocks { embed, blocks } => {
                    rows.push(conv_row(format!("dec{level}.embed"), embed, hh, ww));
                    for (i, p) in blocks.iter().enumerate() {
                        rows.push(ptb_row(format!("dec{level}.block{i}"), p, hh, ww));
                    }
                }
            }
        }
        rows.push(conv_row("head".into(), &self.head, h, w));
        rows
    }
}

fn clamp01<T: Float>(x: &Var<T>) -> Var<T> {
    // relu(x) - relu(x - 1)
    x.relu().sub(&x.add_scalar(-T::one()).relu())
}

/// A generator with weights in a fresh store under the `generator` prefix.
pub fn build_generator<T: Float>(cfg: &GeneratorConfig, seed: u64) -> Result<(Generator, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let mut b = ParamBuilder::new(&mut store, seed);
    let g = b.scoped("generator", |b| Generator::new(b, cfg))?;
    Ok((g, store))
}

/// RGB plus haze map as one `1×4×H×W` tensor.
pub fn input_tensor<T: Float>(hazy: &ImageTensor, hm: &HazeMap) -> Result<Tensor<T>> {
    Ok(hazy.with_extra_channel(&hm.map)?.to_tensor())
}

/// Eval-mode restoration of one image whose sides are multiples of 16.
pub fn generate(hazy: &ImageTensor, hm: &HazeMap, g: &Generator, store: &ParamStore<f32>) -> Result<ImageTensor> {
    hazy.ensure_rgb()?;
    let x = input_tensor::<f32>(hazy, hm)?;
    let b = Binding::new(store, Mode::EVAL);
    let out = g.forward(&b, &Var::constant(x))?;
    Ok(ImageTensor::from_tensor(out.image.value(), 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_schedule() {
        let cfg = GeneratorConfig::default();
        let c: Vec<usize> = (0..cfg.levels).map(|l| cfg.channels(l)).collect();
        assert_eq!(c, [16, 32, 64, 128, 256]);
        assert_eq!(cfg.size_multiple(), 16);
    }

    #[test]
    fn rejects_single_level() {
        let cfg = GeneratorConfig { levels: 1, ..Default::default() };
        assert!(matches!(build_generator::<f32>(&cfg, 0), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn decoder_names_parse() {
        assert_eq!("subpixel".parse::<DecoderVariant>().unwrap(), DecoderVariant::Subpixel);
        assert!("gelu".parse::<DecoderVariant>().is_err());
    }
}

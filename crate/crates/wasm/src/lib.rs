//! Browser bindings for three small operations that need no model weights:
//! the haze map of an uploaded image, the hint-weight schedule and the
//! complexity table of a generator configuration.
//!
//! Errors come back as strings so the page can show them as they are.

use wasm_bindgen::prelude::*;

use dptenet::distill::{lambda_decay, AdaptationConfig, AdaptationKind};
use dptenet::generator::{DecoderVariant, GeneratorConfig};
use dptenet::metrics::estimate_macs;
use dptenet::priors::{extract_with, PriorParams};
use dptenet::ImageTensor;

fn rgba_image(rgba: &[u8], width: usize, height: usize) -> Result<ImageTensor, String> {
    if width == 0 || height == 0 || rgba.len() != width * height * 4 {
        return Err(format!("expected {width}x{height} RGBA ({} bytes), got {}", width * height * 4, rgba.len()));
    }
    Ok(ImageTensor::from_fn(3, height, width, |c, y, x| rgba[(y * width + x) * 4 + c] as f32 / 255.0))
}

/// Haze map of an RGBA canvas as opaque gray RGBA, brighter where hazier.
#[wasm_bindgen]
pub fn haze_map_rgba(
    rgba: &[u8],
    width: usize,
    height: usize,
    patch_size: usize,
    smooth_radius: usize,
) -> Result<Vec<u8>, String> {
    let img = rgba_image(rgba, width, height)?;
    let params = PriorParams { patch_size, smooth_radius, ..PriorParams::default() };
    let hm = extract_with(&img, &params).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(width * height * 4);
    for v in hm.map.data() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    Ok(out)
}

/// Hint weight per epoch for a run of `epochs` epochs.
#[wasm_bindgen]
pub fn lambda_schedule(epochs: usize, delta: f64) -> Result<Vec<f64>, String> {
    (0..epochs).map(|e| lambda_decay(e, epochs, delta).map_err(|err| err.to_string())).collect()
}

/// Per-layer parameter and MAC table at a square input of side `resolution`.
#[wasm_bindgen]
pub fn complexity_table(
    base_channels: usize,
    levels: usize,
    decoder: &str,
    adaptation: &str,
    resolution: usize,
) -> Result<String, String> {
    // the counter builds real weights, so keep the model page-sized
    if !(2..=6).contains(&levels) || !(1..=32).contains(&base_channels) {
        return Err("levels must be 2..=6 and base channels 1..=32".into());
    }
    if resolution == 0 || resolution > 4096 {
        return Err("resolution must be 1..=4096".into());
    }
    let decoder: DecoderVariant = decoder.parse()?;
    let generator = GeneratorConfig { base_channels, levels, decoder, ..GeneratorConfig::default() };
    let adaptation = match adaptation {
        "none" => None,
        other => {
            let kind: AdaptationKind = other.parse()?;
            let hint_channels = 2 * generator.bottleneck_channels();
            Some(AdaptationConfig { kind, hint_channels, ..AdaptationConfig::default() })
        }
    };
    let report = estimate_macs(&generator, adaptation.as_ref(), resolution, resolution).map_err(|e| e.to_string())?;
    Ok(report.to_text())
}

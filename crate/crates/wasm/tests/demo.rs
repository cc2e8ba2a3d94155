use dptenet::distill::AdaptationConfig;
use dptenet::generator::GeneratorConfig;
use dptenet::metrics::estimate_macs;
use dptenet::priors::{extract_with, PriorParams};
use dptenet::ImageTensor;
use dptenet_wasm::*;

fn gradient_rgba(w: usize, h: usize) -> Vec<u8> {
    let mut v = Vec::with_capacity(w * h * 4);
    for y in 0..h {
        for x in 0..w {
            let haze = (x * 255 / (w - 1)) as u8;
            v.extend_from_slice(&[haze.max((y * 3 % 256) as u8), haze, haze.saturating_add(10), 255]);
        }
    }
    v
}

#[test]
fn haze_map_is_opaque_gray_matching_the_library() {
    let (w, h) = (24, 18);
    let rgba = gradient_rgba(w, h);
    let out = haze_map_rgba(&rgba, w, h, 5, 4).unwrap();
    assert_eq!(out.len(), w * h * 4);
    let img = ImageTensor::from_fn(3, h, w, |c, y, x| rgba[(y * w + x) * 4 + c] as f32 / 255.0);
    let params = PriorParams { patch_size: 5, smooth_radius: 4, ..PriorParams::default() };
    let want = extract_with(&img, &params).unwrap();
    for (px, v) in out.chunks(4).zip(want.map.data()) {
        assert_eq!(px[0], px[1]);
        assert_eq!(px[1], px[2]);
        assert_eq!(px[3], 255);
        assert_eq!(px[0], (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
}

#[test]
fn haze_map_rejects_wrong_buffer_sizes() {
    assert!(haze_map_rgba(&[0; 15], 2, 2, 3, 1).is_err());
    assert!(haze_map_rgba(&[], 0, 0, 3, 1).is_err());
}

#[test]
fn schedule_matches_the_decay() {
    assert_eq!(lambda_schedule(4, 0.5).unwrap(), vec![1.0, 0.5, 0.0, 0.0]);
    assert_eq!(lambda_schedule(4, 1.0).unwrap(), vec![1.0, 0.75, 0.5, 0.25]);
    assert!(lambda_schedule(4, 0.0).is_err());
}

#[test]
fn default_table_reports_the_library_totals() {
    let text = complexity_table(16, 5, "swish", "ptb-conv", 512).unwrap();
    let report = estimate_macs(&GeneratorConfig::default(), Some(&AdaptationConfig::default()), 512, 512).unwrap();
    let totals = text.lines().find(|l| l.starts_with("total")).unwrap();
    assert!(totals.contains(&report.total_params.to_string()));
    assert!(totals.contains(&report.total_macs.to_string()));
    let no_adapt = complexity_table(16, 5, "swish", "none", 512).unwrap();
    assert_ne!(no_adapt, text);
}

#[test]
fn table_rejects_bad_settings() {
    assert!(complexity_table(16, 5, "fancy", "ptb-conv", 512).is_err());
    assert!(complexity_table(16, 5, "swish", "mlp", 512).is_err());
    assert!(complexity_table(16, 9, "swish", "ptb-conv", 512).is_err());
    assert!(complexity_table(16, 5, "swish", "ptb-conv", 100).is_err());
}

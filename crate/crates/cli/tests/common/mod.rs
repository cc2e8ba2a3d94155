#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dptenet::io::save_png;
use dptenet::ImageTensor;

/// A small generator whose random double-width teacher has 32 bottleneck channels.
pub const TINY_CONFIG: &str = r#"
[generator]
base_channels = 4
levels = 3
blocks_per_level = 1
decoder_convs = 2
mlp_ratio = 2
spp_pool_sizes = [3]

[adaptation]
hint_channels = 32

[critic]
base_channels = 4
levels = 2

[prior]
patch_size = 3
smooth_radius = 2

[train]
batch_size = 2
crop = 16
n_critic = 1
lr = 1e-3

[data.perceptual]
kind = "identity"
"#;

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{TINY_CONFIG}\n{extra}")).unwrap();
    path
}

/// Deterministic textured clean image and a hazier copy of it.
pub fn scene(seed: usize, h: usize, w: usize) -> (ImageTensor, ImageTensor) {
    let clean = ImageTensor::from_fn(3, h, w, |c, y, x| (((c * 7 + y * 3 + x * 5 + seed * 11) % 23) as f32) / 22.0);
    let hazy = ImageTensor::from_fn(3, h, w, |c, y, x| 0.6 * clean.get(c, y, x) + 0.35);
    (clean, hazy)
}

/// `n` pairs under `<root>/<sub>/{hazy,GT}` with NH-HAZE style names.
pub fn write_split(root: &Path, sub: &str, first: usize, n: usize, side: usize) {
    for i in first..first + n {
        let (clean, hazy) = scene(i, side, side);
        let base = if sub.is_empty() { root.to_path_buf() } else { root.join(sub) };
        std::fs::create_dir_all(base.join("hazy")).unwrap();
        std::fs::create_dir_all(base.join("GT")).unwrap();
        save_png(&base.join(format!("hazy/{i:02}_hazy.png")), &hazy).unwrap();
        save_png(&base.join(format!("GT/{i:02}_GT.png")), &clean).unwrap();
    }
}

pub fn dptenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dptenet")).args(args).output().unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

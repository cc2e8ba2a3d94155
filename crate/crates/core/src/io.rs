//! PNG/JPEG decoding and encoding, plus the 16-bit haze-map cache.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
pub use crate::image::hazemap_cache_path;
use crate::image::{ImageTensor, Map2};
use crate::priors::{self, HazeMap, PriorParams};

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Decode any supported 8-bit file into an RGB image in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ImageTensor::from_fn(3, h, w, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an RGB image as PNG, clamping to `[0, 1]`.
pub fn save_png(path: &Path, img: &ImageTensor) -> Result<()> {
    img.ensure_rgb()?;
    let out = RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([quantize(img.get(0, y, x)), quantize(img.get(1, y, x)), quantize(img.get(2, y, x))])
    });
    out.save(path).map_err(|e| image_err(path, e))
}

fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// A `[0, 1]` map as a 16-bit grayscale PNG.
pub fn save_map_png(path: &Path, map: &Map2) -> Result<()> {
    let out: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Luma([quantize16(map.get(y as usize, x as usize))])
    });
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn load_map_png(path: &Path) -> Result<Map2> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    Ok(Map2::from_fn(img.height() as usize, img.width() as usize, |y, x| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0
    }))
}

/// Haze map for `image`, read from or written to the cache file beside
/// `image_path` when `use_cache` is set. With the cache on, the map is
/// quantized to 16 bits on first use too, so every run sees the same values.
pub fn haze_map_cached(
    image_path: &Path,
    image: &ImageTensor,
    params: &PriorParams,
    use_cache: bool,
) -> Result<HazeMap> {
    let cache = hazemap_cache_path(image_path);
    if use_cache && cache.exists() {
        let map = load_map_png(&cache)?;
        if map.height() == image.height() && map.width() == image.width() {
            return Ok(HazeMap {
                map,
                patch_size: params.patch_size,
                smooth_radius: params.smooth_radius,
                smooth_eps: params.smooth_eps,
            });
        }
        log::warn!("ignoring stale haze-map cache {}", cache.display());
    }
    let mut hm = priors::extract_with(image, params)?;
    if use_cache {
        save_map_png(&cache, &hm.map)?;
        hm.map = hm.map.map(|v| quantize16(v) as f32 / 65535.0);
    }
    Ok(hm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(3, 5, 7, |c, y, x| ((c * 40 + y * 17 + x * 3) % 256) as f32 / 255.0);
        let path = dir.path().join("a.png");
        save_png(&path, &img).unwrap();
        assert_eq!(load_rgb(&path).unwrap(), img);
    }

    #[test]
    fn cache_is_written_and_reused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene_hazy.jpg");
        let img = ImageTensor::from_fn(3, 20, 24, |c, y, x| (c + y + x) as f32 / 50.0);
        let params = PriorParams { patch_size: 5, smooth_radius: 3, ..PriorParams::default() };
        let fresh = haze_map_cached(&path, &img, &params, true).unwrap();
        assert!(dir.path().join("scene_hazy.hazemap.png").exists());
        let cached = haze_map_cached(&path, &img, &params, true).unwrap();
        assert_eq!(fresh.map, cached.map);
    }

    #[test]
    fn unreadable_file_is_an_image_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(matches!(load_rgb(&path), Err(Error::Image { .. })));
    }
}

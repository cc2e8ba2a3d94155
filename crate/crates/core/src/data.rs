//! Paired hazy/clean datasets: directory scanning, synchronized augmentation
//! and shuffled batching.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::CropWindow;
use crate::error::{param_err, Error, Result};
use crate::image::{ImageTensor, Map2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Directory convention of a dataset root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `<root>/{train,val}/{hazy,clean|GT}/<stem>.<ext>`.
    Split,
    /// `<root>/{hazy,clean|GT}/<stem>.<ext>`, all pairs in one split.
    Flat,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePair {
    pub id: String,
    pub hazy_path: PathBuf,
    pub clean_path: PathBuf,
    pub cached_hazemap_path: Option<PathBuf>,
    pub split: Split,
}

/// Pairs found under a root plus the files that had no partner.
#[derive(Clone, Debug, Default)]
pub struct Scan {
    pub pairs: Vec<SamplePair>,
    pub orphans: Vec<PathBuf>,
}

impl Scan {
    pub fn split(&self, split: Split) -> Vec<SamplePair> {
        self.pairs.iter().filter(|p| p.split == split).cloned().collect()
    }
}

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const SUFFIXES: [&str; 6] = ["_hazy", "_GT", "_gt", "_clean", "_Clean", "_Hazy"];

/// Stem with a trailing role suffix removed, so `01_hazy.png` and `01_GT.png` pair up.
pub fn pairing_key(path: &Path) -> String {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
    for s in SUFFIXES {
        if let Some(k) = stem.strip_suffix(s) {
            if !k.is_empty() {
                return k.to_string();
            }
        }
    }
    stem
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        if name.ends_with(".hazemap.png") {
            continue;
        }
        let ext = path.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
        if path.is_file() && EXTENSIONS.contains(&ext.as_str()) {
            out.insert(pairing_key(&path), path);
        }
    }
    Ok(out)
}

fn clean_dir(base: &Path) -> Option<PathBuf> {
    ["clean", "GT", "gt"].iter().map(|d| base.join(d)).find(|p| p.is_dir())
}

fn scan_split(base: &Path, split: Split, scan: &mut Scan) -> Result<()> {
    let hazy_dir = base.join("hazy");
    let Some(clean_dir) = clean_dir(base) else {
        if hazy_dir.is_dir() {
            log::warn!("{} has hazy/ but no clean/ or GT/", base.display());
        }
        return Ok(());
    };
    if !hazy_dir.is_dir() {
        return Ok(());
    }
    let hazy = image_files(&hazy_dir)?;
    let mut clean = image_files(&clean_dir)?;
    for (key, hazy_path) in hazy {
        match clean.remove(&key) {
            Some(clean_path) => {
                let cache = crate::image::hazemap_cache_path(&hazy_path);
                scan.pairs.push(SamplePair {
                    id: key,
                    cached_hazemap_path: cache.exists().then_some(cache),
                    hazy_path,
                    clean_path,
                    split,
                });
            }
            None => {
                log::warn!("no clean partner for {}; skipped", hazy_path.display());
                scan.orphans.push(hazy_path);
            }
        }
    }
    for (_, path) in clean {
        log::warn!("no hazy partner for {}; skipped", path.display());
        scan.orphans.push(path);
    }
    Ok(())
}

/// All pairs under `root`, in lexicographic id order within each split.
pub fn scan_dataset(root: &Path, layout: Layout) -> Result<Scan> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut scan = Scan::default();
    match layout {
        Layout::Split => {
            for split in [Split::Train, Split::Val] {
                scan_split(&root.join(split.dir_name()), split, &mut scan)?;
            }
        }
        Layout::Flat => scan_split(root, Split::Train, &mut scan)?,
    }
    if scan.pairs.is_empty() {
        return Err(Error::Dataset(format!("no hazy/clean pairs under {}", root.display())));
    }
    Ok(scan)
}

/// Picks a crop window and flip; origins are multiples of `align`.
pub fn random_window<R: Rng>(height: usize, width: usize, crop: usize, align: usize, rng: &mut R) -> Result<CropWindow> {
    if crop == 0 || crop % 16 != 0 {
        return param_err(format!("crop size {crop} must be a positive multiple of 16"));
    }
    if crop > height.min(width) {
        return param_err(format!("crop size {crop} exceeds image {height}×{width}"));
    }
    let align = align.max(1);
    let top = rng.random_range(0..=(height - crop) / align) * align;
    let left = rng.random_range(0..=(width - crop) / align) * align;
    Ok(CropWindow {
        top,
        left,
        height: crop,
        width: crop,
        flipped: rng.random_bool(0.5),
        full_width: width,
    })
}

/// Applies one crop window and flip decision to all three arrays.
pub fn apply_window(
    hazy: &ImageTensor,
    clean: &ImageTensor,
    map: &Map2,
    win: &CropWindow,
) -> Result<(ImageTensor, ImageTensor, Map2)> {
    let same = |a: (usize, usize)| a == (hazy.height(), hazy.width());
    if !same((clean.height(), clean.width())) || !same((map.height(), map.width())) {
        return crate::error::shape_err("hazy, clean and haze map differ in size");
    }
    let h = hazy.crop(win.top, win.left, win.height, win.width)?;
    let c = clean.crop(win.top, win.left, win.height, win.width)?;
    let m = map.crop(win.top, win.left, win.height, win.width)?;
    Ok(if win.flipped {
        (h.flip_horizontal(), c.flip_horizontal(), m.flip_horizontal())
    } else {
        (h, c, m)
    })
}

/// Random crop and horizontal flip, identical for hazy, clean and map.
pub fn augment<R: Rng>(
    hazy: &ImageTensor,
    clean: &ImageTensor,
    map: &Map2,
    crop: usize,
    align: usize,
    rng: &mut R,
) -> Result<(ImageTensor, ImageTensor, Map2, CropWindow)> {
    let win = random_window(hazy.height(), hazy.width(), crop, align, rng)?;
    let (h, c, m) = apply_window(hazy, clean, map, &win)?;
    Ok((h, c, m, win))
}

/// Shuffled index batches covering `0..n` once; the last batch may be short.
pub fn make_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return param_err("batch size must be at least 1");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// A decoded pair with its full-image haze map.
#[cfg(feature = "io")]
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub id: String,
    pub hazy: ImageTensor,
    pub clean: ImageTensor,
    pub haze: crate::priors::HazeMap,
}

#[cfg(feature = "io")]
pub fn load_pair(pair: &SamplePair, prior: &crate::priors::PriorParams, use_cache: bool) -> Result<LoadedPair> {
    let hazy = crate::io::load_rgb(&pair.hazy_path)?;
    let clean = crate::io::load_rgb(&pair.clean_path)?;
    if (hazy.height(), hazy.width()) != (clean.height(), clean.width()) {
        return Err(Error::Dataset(format!(
            "pair `{}`: hazy {}×{} vs clean {}×{}",
            pair.id,
            hazy.height(),
            hazy.width(),
            clean.height(),
            clean.width()
        )));
    }
    let haze = crate::io::haze_map_cached(&pair.hazy_path, &hazy, prior, use_cache)?;
    Ok(LoadedPair {
        id: pair.id.clone(),
        hazy,
        clean,
        haze,
    })
}

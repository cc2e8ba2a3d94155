use std::fs;
use std::path::Path;

use dptenet::data::*;
use dptenet::io::save_png;
use dptenet::priors::PriorParams;
use dptenet::{Error, ImageTensor, Map2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_image(path: &Path, seed: usize, h: usize, w: usize) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let img = ImageTensor::from_fn(3, h, w, |c, y, x| ((c * 5 + y * 3 + x + seed) % 11) as f32 / 10.0);
    save_png(path, &img).unwrap();
}

/// `train/{hazy,GT}` with 50 pairs and `val/{hazy,GT}` with 5, NH-HAZE style names.
fn nh_layout(root: &Path) {
    for i in 1..=50 {
        write_image(&root.join(format!("train/hazy/{i:02}_hazy.png")), i, 16, 16);
        write_image(&root.join(format!("train/GT/{i:02}_GT.png")), i + 100, 16, 16);
    }
    for i in 51..=55 {
        write_image(&root.join(format!("val/hazy/{i:02}_hazy.png")), i, 16, 16);
        write_image(&root.join(format!("val/GT/{i:02}_GT.png")), i + 100, 16, 16);
    }
}

#[test]
fn split_layout_pairs_every_image() {
    let dir = tempfile::tempdir().unwrap();
    nh_layout(dir.path());
    let scan = scan_dataset(dir.path(), Layout::Split).unwrap();
    assert_eq!(scan.split(Split::Train).len(), 50);
    assert_eq!(scan.split(Split::Val).len(), 5);
    assert!(scan.orphans.is_empty());
    let first = &scan.split(Split::Train)[0];
    assert_eq!(first.id, "01");
    assert!(first.hazy_path.ends_with("train/hazy/01_hazy.png"));
    assert!(first.clean_path.ends_with("train/GT/01_GT.png"));
    assert_eq!(first.cached_hazemap_path, None);
}

#[test]
fn orphans_are_skipped_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    nh_layout(dir.path());
    write_image(&dir.path().join("train/hazy/77_hazy.png"), 1, 16, 16);
    write_image(&dir.path().join("val/GT/88_GT.png"), 1, 16, 16);
    let scan = scan_dataset(dir.path(), Layout::Split).unwrap();
    assert_eq!(scan.split(Split::Train).len(), 50);
    assert_eq!(scan.split(Split::Val).len(), 5);
    assert_eq!(scan.orphans.len(), 2);
}

#[test]
fn empty_or_missing_roots_are_dataset_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(scan_dataset(dir.path(), Layout::Split), Err(Error::Dataset(_))));
    assert!(matches!(scan_dataset(&dir.path().join("nope"), Layout::Flat), Err(Error::Dataset(_))));
}

#[test]
fn flat_layout_and_cached_maps() {
    let dir = tempfile::tempdir().unwrap();
    write_image(&dir.path().join("hazy/a.png"), 1, 16, 16);
    write_image(&dir.path().join("clean/a.png"), 2, 16, 16);
    let scan = scan_dataset(dir.path(), Layout::Flat).unwrap();
    assert_eq!(scan.pairs.len(), 1);
    let prior = PriorParams { patch_size: 3, smooth_radius: 2, ..PriorParams::default() };
    let loaded = load_pair(&scan.pairs[0], &prior, true).unwrap();
    assert_eq!((loaded.haze.map.height(), loaded.haze.map.width()), (16, 16));
    // the cache file now exists, is picked up by a rescan and is not mistaken for an image
    let rescan = scan_dataset(dir.path(), Layout::Flat).unwrap();
    assert_eq!(rescan.pairs.len(), 1);
    assert!(rescan.pairs[0].cached_hazemap_path.is_some());
    let again = load_pair(&rescan.pairs[0], &prior, true).unwrap();
    assert_eq!(again.haze.map, loaded.haze.map);
}

#[test]
fn mismatched_pair_sizes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_image(&dir.path().join("hazy/a.png"), 1, 16, 16);
    write_image(&dir.path().join("clean/a.png"), 2, 16, 32);
    let scan = scan_dataset(dir.path(), Layout::Flat).unwrap();
    assert!(matches!(load_pair(&scan.pairs[0], &PriorParams::default(), false), Err(Error::Dataset(_))));
}

/// Pixel values encode their own coordinates so crops can be traced back.
fn coordinate_images(h: usize, w: usize) -> (ImageTensor, ImageTensor, Map2) {
    let hazy = ImageTensor::from_fn(3, h, w, |c, y, x| (c * 100_000 + y * 1000 + x) as f32);
    let clean = ImageTensor::from_fn(3, h, w, |c, y, x| -((c * 100_000 + y * 1000 + x) as f32));
    let map = Map2::from_fn(h, w, |y, x| (y * 1000 + x) as f32);
    (hazy, clean, map)
}

#[test]
fn crops_come_from_the_same_window_in_all_three_arrays() {
    let (hazy, clean, map) = coordinate_images(48, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (h, c, m, win) = augment(&hazy, &clean, &map, 32, 1, &mut rng).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let sx = if win.flipped { win.left + 31 - x } else { win.left + x };
                let sy = win.top + y;
                assert_eq!(h.get(1, y, x), (100_000 + sy * 1000 + sx) as f32);
                assert_eq!(c.get(2, y, x), -((200_000 + sy * 1000 + sx) as f32));
                assert_eq!(m.get(y, x), (sy * 1000 + sx) as f32);
            }
        }
    }
}

#[test]
fn aligned_windows_sit_on_the_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let w = random_window(100, 130, 32, 16, &mut rng).unwrap();
        assert_eq!((w.top % 16, w.left % 16), (0, 0));
        assert!(w.top + 32 <= 100 && w.left + 32 <= 130);
    }
    assert!(random_window(20, 40, 32, 1, &mut rng).is_err());
    assert!(random_window(64, 64, 24, 1, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flipping_twice_is_the_identity(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
        let img = ImageTensor::from_fn(3, h, w, |c, y, x| ((c * 31 + y * 7 + x) as u64 ^ seed) as f32);
        prop_assert_eq!(img.flip_horizontal().flip_horizontal(), img.clone());
        let map = Map2::from_fn(h, w, |y, x| ((y * 7 + x) as u64 ^ seed) as f32);
        prop_assert_eq!(map.flip_horizontal().flip_horizontal(), map);
    }

    #[test]
    fn batches_cover_each_index_once(n in 0usize..40, bs in 1usize..9, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = make_batches(n, bs, &mut rng).unwrap();
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| b.len() <= bs && !b.is_empty()));
    }
}

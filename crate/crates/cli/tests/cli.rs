mod common;

use std::path::Path;

use clap::Parser;
use dptenet::distill::{read_hint_file, HintProvider, HintRequest, PrecomputedHints};
use dptenet::io::{load_rgb, save_png};
use dptenet::priors::extract_haze_map;
use dptenet::trainer::{load_checkpoint, save_checkpoint, EvalPair, TrainState, HISTORY_HEADER};
use dptenet::config::RunConfig;
use dptenet_cli::*;

use common::*;

fn lambda_column(csv: &str) -> Vec<f64> {
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "lambda").unwrap();
    csv.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn train_writes_checkpoints_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny");
    write_split(&data, "train", 1, 3, 24);
    write_split(&data, "val", 10, 2, 24);
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("run");
    let res = dptenet(&["train", "--config", s(&cfg), "--epochs", "2", "--dataset", s(&data), "--output", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), HISTORY_HEADER);
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("last.ckpt").exists() && out.join("best.ckpt").exists());
}

#[test]
fn missing_dataset_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let missing = dir.path().join("no-such-set");
    let res = dptenet(&["train", "--config", s(&cfg), "--dataset", s(&missing)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("no-such-set"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[output]\nwhatever = 1\n");
    assert_eq!(dptenet(&["train", "--config", s(&cfg)]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "");
    assert_eq!(dptenet(&["train", "--config", s(&cfg), "--delta", "1.5"]).status.code(), Some(2));
}

#[test]
fn delta_flag_shows_up_in_the_lambda_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny");
    write_split(&data, "", 1, 2, 16);
    let cfg = write_config(dir.path(), "[data]\nlayout = \"flat\"\n");
    for (delta, want) in [("0.5", vec![1.0, 0.5, 0.0, 0.0]), ("0.01", vec![1.0, 0.0, 0.0, 0.0])] {
        let out = dir.path().join(format!("run{delta}"));
        let cli = Cli::parse_from([
            "dptenet", "train", "--config", s(&cfg), "--dataset", s(&data), "--epochs", "4", "--delta", delta,
            "--output", s(&out),
        ]);
        run(cli).unwrap();
        let csv = std::fs::read_to_string(out.join("history.csv")).unwrap();
        assert_eq!(lambda_column(&csv), want, "delta {delta}");
    }
}

#[test]
fn flags_beat_the_file_which_beats_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let text = format!("{TINY_CONFIG}\n[train.weights]\nhint = 3.0\n").replace("lr = 1e-3", "lr = 5e-4\nepochs = 9");
    std::fs::write(&cfg, text).unwrap();
    let o = Overrides { config: Some(cfg), epochs: Some(2), ..Overrides::default() };
    let resolved = o.resolve().unwrap();
    assert_eq!(resolved.train.epochs, 2);
    assert_eq!(resolved.train.lr, 5e-4);
    assert_eq!(resolved.train.weights.hint, 3.0);
    assert_eq!(resolved.train.gp_coeff, RunConfig::default().train.gp_coeff);
    assert_eq!(resolved.train.delta, RunConfig::default().train.delta);
}

fn tiny_checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = RunConfig::from_toml(TINY_CONFIG).unwrap();
    let state = TrainState::new(cfg).unwrap();
    let path = dir.join("tiny.ckpt");
    save_checkpoint(&state, &path).unwrap();
    path
}

#[test]
fn infer_keeps_the_resolution_of_an_odd_jpeg() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let (_, hazy) = scene(3, 400, 600);
    let jpg = dir.path().join("street.jpg");
    image::RgbImage::from_fn(600, 400, |x, y| {
        let q = |c| (hazy.get(c, y as usize, x as usize) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
    .save(&jpg)
    .unwrap();
    let out = dir.path().join("out");
    let res = dptenet(&["infer", "--checkpoint", s(&ckpt), "--input", s(&jpg), "--output", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let restored = load_rgb(&out.join("street.png")).unwrap();
    assert_eq!((restored.width(), restored.height()), (600, 400));
}

#[test]
fn infer_over_a_directory_skips_unreadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let input = dir.path().join("in");
    std::fs::create_dir_all(&input).unwrap();
    for i in 0..5 {
        save_png(&input.join(format!("img{i}.png")), &scene(i, 20 + i, 30).1).unwrap();
    }
    let out = dir.path().join("out");
    let res = dptenet(&["infer", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&out)]);
    assert!(res.status.success());
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 5);

    std::fs::write(input.join("img2.png"), b"definitely not a png").unwrap();
    let out2 = dir.path().join("out2");
    let res = dptenet(&["infer", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&out2)]);
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(std::fs::read_dir(&out2).unwrap().count(), 4);
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert_eq!(stderr.matches("skipping").count(), 1, "{stderr}");
}

#[test]
fn infer_fails_only_when_nothing_works() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let bad = dir.path().join("bad.png");
    std::fs::write(&bad, b"nope").unwrap();
    let res = dptenet(&["infer", "--checkpoint", s(&ckpt), "--input", s(&bad), "--output", s(dir.path())]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn identity_restorer_on_clean_inputs_hits_the_caps() {
    let pairs: Vec<EvalPair> = (0..3)
        .map(|i| {
            let (clean, _) = scene(i, 24, 24);
            let haze = extract_haze_map(&clean, 3, 2, 1e-3).unwrap();
            EvalPair { id: format!("{i}"), hazy: clean.clone(), clean, haze }
        })
        .collect();
    let rows = eval_rows(&pairs, |img, _| Ok(img.clone())).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.psnr, 100.0);
        assert!((r.ssim - 1.0).abs() < 1e-12);
    }
    assert_eq!(rows[3].id, "mean");
}

#[test]
fn eval_writes_one_row_per_validation_pair_plus_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("nh");
    write_split(&data, "train", 1, 2, 16);
    write_split(&data, "val", 51, 5, 16);
    let ckpt = tiny_checkpoint(dir.path());
    let csv_path = dir.path().join("metrics.csv");
    let res = dptenet(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--csv", s(&csv_path)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,psnr,ssim");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("51,"));
    assert!(lines[6].starts_with("mean,"));
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 3);
        assert!(cols[1].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn eval_without_pairs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let data = dir.path().join("empty");
    write_split(&data, "train", 1, 1, 16);
    std::fs::create_dir_all(data.join("val/hazy")).unwrap();
    std::fs::create_dir_all(data.join("val/GT")).unwrap();
    let res = dptenet(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--layout", "split"]);
    assert_eq!(res.status.code(), Some(2));
}

fn csv_totals(path: &Path) -> (u64, u64) {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).fold((0, 0), |(p, m), l| {
        let c: Vec<&str> = l.split(',').collect();
        (p + c[1].parse::<u64>().unwrap(), m + c[2].parse::<u64>().unwrap())
    })
}

#[test]
fn profile_checks_targets_and_scales_with_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.csv");
    let res = dptenet(&["profile", "--csv", s(&full)]);
    assert!(res.status.success());
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert_eq!(stdout.matches(": PASS").count(), 2, "{stdout}");

    let quarter = dir.path().join("quarter.csv");
    assert!(dptenet(&["profile", "--resolution", "256", "--csv", s(&quarter)]).status.success());
    let (p512, m512) = csv_totals(&full);
    let (p256, m256) = csv_totals(&quarter);
    assert_eq!(p256, p512);
    assert_eq!(m256 * 4, m512);

    let sub = dir.path().join("sub.csv");
    assert!(dptenet(&["profile", "--decoder", "subpixel", "--csv", s(&sub)]).status.success());
    let (ps, ms) = csv_totals(&sub);
    assert!(ps < p512 && ms < m512);
}

#[test]
fn make_hints_writes_once_per_training_pair_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("set");
    write_split(&data, "train", 1, 50, 16);
    write_split(&data, "val", 51, 5, 16);
    let cfg = write_config(dir.path(), "");
    let hints = dir.path().join("hints");
    let args = ["make-hints", "--config", s(&cfg), "--dataset", s(&data), "--output", s(&hints)];
    let res = dptenet(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(std::fs::read_dir(&hints).unwrap().count(), 50);
    let stamp = std::fs::metadata(hints.join("01.hint")).unwrap().modified().unwrap();
    let again = dptenet(&args);
    assert!(String::from_utf8_lossy(&again.stdout).contains("wrote 0 hint files"));
    assert_eq!(std::fs::metadata(hints.join("01.hint")).unwrap().modified().unwrap(), stamp);

    // every file reads back with a valid checksum and serves full-image requests
    let provider = PrecomputedHints::new(&hints, 32, 4);
    let input = dpte_autograd::Tensor::<f32>::zeros(vec![1, 4, 16, 16]);
    for i in 1..=50 {
        let id = format!("{i:02}");
        assert_eq!(read_hint_file(&hints.join(format!("{id}.hint"))).unwrap().shape(), &[1, 32, 4, 4]);
        provider.hint(&HintRequest { id: &id, input: &input, window: None }).unwrap();
    }
    let forced = dptenet(&[&args[..], &["--force"]].concat());
    assert!(String::from_utf8_lossy(&forced.stdout).contains("wrote 50 hint files"));
}

#[test]
fn make_hints_rejects_images_off_the_teacher_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("set");
    write_split(&data, "", 1, 2, 18);
    let cfg = write_config(dir.path(), "[data]\nlayout = \"flat\"\n");
    let hints = dir.path().join("hints");
    let res = dptenet(&["make-hints", "--config", s(&cfg), "--dataset", s(&data), "--output", s(&hints)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!hints.exists() || std::fs::read_dir(&hints).unwrap().count() == 0);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny");
    write_split(&data, "", 1, 2, 16);
    let cfg = write_config(dir.path(), "[data]\nlayout = \"flat\"\n");
    let run_once = |name: &str| {
        let out = dir.path().join(name);
        let res = dptenet(&["train", "--config", s(&cfg), "--dataset", s(&data), "--epochs", "2", "--seed", "7", "--output", s(&out)]);
        assert!(res.status.success());
        let state = load_checkpoint(&out.join("last.ckpt")).unwrap();
        let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
        (history, state.models.gen_store, state.models.critic_store, state.gen_opt)
    };
    assert_eq!(run_once("a"), run_once("b"));
}

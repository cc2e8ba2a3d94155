//! The `dptenet` command: train, infer, eval, profile and make-hints.
//!
//! Exit codes are 0 on success, 1 when a run fails and 2 for usage, config
//! or dataset problems.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use dptenet::config::{HintSource, PerceptualSource, RunConfig};
use dptenet::data::{load_pair, scan_dataset, Layout, SamplePair, Split};
use dptenet::distill::{hint_path, write_teacher_hints, AdaptationKind, HintProvider, PrecomputedHints};
use dptenet::generator::DecoderVariant;
use dptenet::io::{load_rgb, save_png};
use dptenet::metrics::{estimate_macs, profile_runtime, psnr, ssim, ComplexityReport};
use dptenet::priors::{extract_with, HazeMap};
use dptenet::trainer::{build_teacher, load_checkpoint, train, EvalPair, InMemory, TrainState};
use dptenet::{Error, ImageTensor};

/// Published size of the default model with its adaptation layer.
pub const TARGET_PARAMS: f64 = 3.10e6;
pub const PARAMS_TOLERANCE: f64 = 0.10;
/// Published MACs of the same model at 512×512.
pub const TARGET_MACS: f64 = 19.2e9;
pub const MACS_TOLERANCE: f64 = 0.15;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or dataset: exit 2.
    Usage(String),
    /// The command ran and failed: exit 1.
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Dataset(_) => Failure::Usage(e.to_string()),
            Error::Numeric { component } => Failure::Runtime(format!("training aborted: non-finite {component} loss")),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "dptenet", version, about = "Single-image dehazing: train, infer, evaluate, profile")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints plus a history CSV.
    Train(TrainArgs),
    /// Dehaze one image or every image in a directory.
    Infer(InferArgs),
    /// PSNR/SSIM of a checkpoint on a paired dataset.
    Eval(EvalArgs),
    /// Parameter and MAC counts per layer.
    Profile(ProfileArgs),
    /// Precompute teacher hints for the training split.
    MakeHints(MakeHintsArgs),
}

/// Flags that override config-file values.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// TOML run config; missing keys take built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `split` (train/ and val/ subfolders) or `flat`.
    #[arg(long, value_parser = parse_layout)]
    pub layout: Option<Layout>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Fraction of the epochs that carry the hint term.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub decoder: Option<DecoderVariant>,
    #[arg(long)]
    pub adaptation: Option<AdaptationKind>,
}

impl Overrides {
    /// Built-in defaults, then the config file, then these flags.
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.data.root = Some(v.clone());
        }
        if let Some(v) = self.layout {
            cfg.data.layout = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.delta {
            cfg.train.delta = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.crop {
            cfg.train.crop = v;
        }
        if let Some(v) = self.decoder {
            cfg.generator.decoder = v;
        }
        if let Some(v) = self.adaptation {
            cfg.adaptation.kind = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    match s {
        "split" => Ok(Layout::Split),
        "flat" => Ok(Layout::Flat),
        _ => Err(format!("unknown layout `{s}` (split, flat)")),
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Directory for checkpoints and history.csv.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Read hints from `<dir>/<id>.hint` files.
    #[arg(long, conflicts_with_all = ["teacher", "no_hints"])]
    pub hint_dir: Option<PathBuf>,
    /// Compute hints with the generator of this checkpoint.
    #[arg(long, conflicts_with = "no_hints")]
    pub teacher: Option<PathBuf>,
    /// Train without the hint term.
    #[arg(long)]
    pub no_hints: bool,
    /// Use the plain pixel difference as the perceptual term.
    #[arg(long)]
    pub pixel_perceptual: bool,
    /// Continue from a checkpoint; only `--epochs` and `--output` apply.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Defaults to `split` when the root has a `val/` folder.
    #[arg(long, value_parser = parse_layout)]
    pub layout: Option<Layout>,
    #[arg(long, default_value = "eval.csv")]
    pub csv: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub decoder: Option<DecoderVariant>,
    #[arg(long)]
    pub adaptation: Option<AdaptationKind>,
    /// Square input side in pixels.
    #[arg(long, default_value_t = 512)]
    pub resolution: usize,
    /// Also write the per-layer rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Time this many eval forward passes after one warmup.
    #[arg(long, default_value_t = 0)]
    pub time: usize,
}

#[derive(Args, Debug)]
pub struct MakeHintsArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Teacher checkpoint; a random double-width teacher when absent.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Output folder, `<dataset>/hints` by default.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Rewrite hint files that already exist.
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Profile(a) => cmd_profile(&a),
        Command::MakeHints(a) => cmd_make_hints(&a),
    }
}

fn dataset_root(cfg: &RunConfig) -> Result<&Path, Failure> {
    let root = cfg
        .data
        .root
        .as_deref()
        .ok_or_else(|| Failure::Usage("no dataset given (--dataset or data.root)".into()))?;
    if !root.is_dir() {
        return Err(Failure::Usage(format!("dataset directory {} does not exist", root.display())));
    }
    Ok(root)
}

fn load_pairs(pairs: &[SamplePair], cfg: &RunConfig) -> Result<Vec<EvalPair>, Failure> {
    pairs
        .iter()
        .map(|p| {
            let l = load_pair(p, &cfg.prior, cfg.data.cache_hazemaps)?;
            Ok(EvalPair { id: l.id, hazy: l.hazy, clean: l.clean, haze: l.haze })
        })
        .collect()
}

/// Training and validation pairs; a flat dataset validates on its training pairs.
fn load_splits(cfg: &RunConfig) -> Result<(Vec<EvalPair>, Vec<EvalPair>), Failure> {
    let root = dataset_root(cfg)?;
    let scan = scan_dataset(root, cfg.data.layout)?;
    let train_pairs = scan.split(Split::Train);
    if train_pairs.is_empty() {
        return Err(Failure::Usage(format!("no training pairs under {}", root.display())));
    }
    let train_set = load_pairs(&train_pairs, cfg)?;
    let val_set = match cfg.data.layout {
        Layout::Flat => train_set.clone(),
        Layout::Split => load_pairs(&scan.split(Split::Val), cfg)?,
    };
    let crop = cfg.train.crop;
    if let Some(p) = train_set.iter().find(|p| p.hazy.height() < crop || p.hazy.width() < crop) {
        return Err(Failure::Usage(format!(
            "pair `{}` is {}×{}, smaller than the {crop} crop",
            p.id,
            p.hazy.height(),
            p.hazy.width()
        )));
    }
    Ok((train_set, val_set))
}

fn hint_provider(cfg: &mut RunConfig) -> Result<Option<Box<dyn HintProvider>>, Failure> {
    let provider: Box<dyn HintProvider> = match &cfg.data.hints {
        HintSource::None => {
            if cfg.train.weights.hint != 0.0 {
                log::warn!("no hint source; the hint weight is set to 0");
                cfg.train.weights.hint = 0.0;
            }
            return Ok(None);
        }
        HintSource::Teacher { checkpoint } => Box::new(build_teacher(cfg, checkpoint.as_deref())?),
        HintSource::Files { dir } => Box::new(PrecomputedHints::new(
            dir,
            cfg.adaptation.hint_channels,
            cfg.generator.size_multiple(),
        )),
    };
    Ok(Some(provider))
}

pub fn cmd_train(a: &TrainArgs) -> CmdResult {
    let mut state = match &a.resume {
        Some(path) => {
            let mut s = load_checkpoint(path)?;
            if let Some(e) = a.overrides.epochs {
                s.config.train.epochs = e;
            }
            s
        }
        None => {
            let mut cfg = a.overrides.resolve()?;
            if let Some(dir) = &a.hint_dir {
                cfg.data.hints = HintSource::Files { dir: dir.clone() };
            } else if let Some(t) = &a.teacher {
                cfg.data.hints = HintSource::Teacher { checkpoint: Some(t.clone()) };
            } else if a.no_hints {
                cfg.data.hints = HintSource::None;
            }
            if a.pixel_perceptual {
                cfg.data.perceptual = PerceptualSource::Identity;
            }
            TrainState::new(cfg)?
        }
    };
    if let Some(out) = &a.output {
        state.config.output_dir = Some(out.clone());
    }
    if state.config.output_dir.is_none() {
        state.config.output_dir = Some(PathBuf::from("run"));
    }
    // the stored config records the hint weight that actually applies
    let mut cfg = state.config.clone();
    let hints = hint_provider(&mut cfg)?;
    state.config = cfg;
    let (train_set, val_set) = load_splits(&state.config)?;
    let align = match &hints {
        Some(h) if h.needs_aligned_crops() => state.config.generator.size_multiple(),
        _ => 1,
    };
    let source = InMemory { pairs: train_set, align };
    let outcome = train(&mut state, &source, &val_set, hints.as_deref(), None)?;
    let dir = state.config.output_dir.as_deref().unwrap_or(Path::new("."));
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} epochs; last val psnr {:.2} dB, ssim {:.4}; outputs in {}",
            outcome.history.len(),
            last.val_psnr,
            last.val_ssim,
            dir.display()
        );
    }
    if outcome.stopped_early {
        println!("stopped early after {} stale epochs", state.stale_epochs);
    }
    Ok(())
}

fn is_image(path: &Path) -> bool {
    let name = path.file_name().unwrap_or_default().to_string_lossy().to_lowercase();
    !name.ends_with(".hazemap.png") && [".png", ".jpg", ".jpeg"].iter().any(|e| name.ends_with(e))
}

fn input_files(input: &Path) -> Result<Vec<PathBuf>, Failure> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Failure::Usage(format!("input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Usage(format!("no images in {}", input.display())));
    }
    Ok(files)
}

pub fn cmd_infer(a: &InferArgs) -> CmdResult {
    let state = load_checkpoint(&a.checkpoint)?;
    let files = input_files(&a.input)?;
    std::fs::create_dir_all(&a.output).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut written = 0;
    for path in &files {
        let result = load_rgb(path).and_then(|img| {
            let hm = extract_with(&img, &state.config.prior)?;
            let out = state.models.restore(&img, &hm)?;
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            save_png(&a.output.join(format!("{stem}.png")), &out)
        });
        match result {
            Ok(()) => written += 1,
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    println!("wrote {written} of {} images to {}", files.len(), a.output.display());
    if written == 0 {
        return Err(Failure::Runtime("no image could be processed".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-pair scores of `restore` followed by a `mean` row.
pub fn eval_rows(
    pairs: &[EvalPair],
    restore: impl Fn(&ImageTensor, &HazeMap) -> dptenet::Result<ImageTensor>,
) -> dptenet::Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(pairs.len() + 1);
    for p in pairs {
        let out = restore(&p.hazy, &p.haze)?;
        rows.push(MetricRow { id: p.id.clone(), psnr: psnr(&out, &p.clean, 1.0)?, ssim: ssim(&out, &p.clean)? });
    }
    let n = rows.len().max(1) as f64;
    let mean = MetricRow {
        id: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    rows.push(mean);
    Ok(rows)
}

pub fn write_rows_csv(rows: &[MetricRow], path: &Path) -> std::result::Result<(), Failure> {
    let fail = |e: csv::Error| Failure::Runtime(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    w.write_record(["id", "psnr", "ssim"]).map_err(fail)?;
    for r in rows {
        w.write_record([r.id.clone(), format!("{:.4}", r.psnr), format!("{:.4}", r.ssim)]).map_err(fail)?;
    }
    w.flush().map_err(|e| Failure::Runtime(e.to_string()))
}

pub fn cmd_eval(a: &EvalArgs) -> CmdResult {
    if !a.dataset.is_dir() {
        return Err(Failure::Usage(format!("dataset directory {} does not exist", a.dataset.display())));
    }
    let state = load_checkpoint(&a.checkpoint)?;
    let layout = a.layout.unwrap_or(if a.dataset.join("val").is_dir() { Layout::Split } else { Layout::Flat });
    let scan = scan_dataset(&a.dataset, layout)?;
    let split = if layout == Layout::Split { Split::Val } else { Split::Train };
    let pairs = scan.split(split);
    if pairs.is_empty() {
        return Err(Failure::Usage(format!("no {} pairs under {}", split.dir_name(), a.dataset.display())));
    }
    let pairs = load_pairs(&pairs, &state.config)?;
    let rows = eval_rows(&pairs, |img, hm| state.models.restore(img, hm))?;
    println!("{:<16} {:>8} {:>8}", "id", "psnr", "ssim");
    for r in &rows {
        println!("{:<16} {:>8.2} {:>8.4}", r.id, r.psnr, r.ssim);
    }
    write_rows_csv(&rows, &a.csv)
}

/// `PASS`/`FAIL` lines against the published totals; only meaningful at 512².
pub fn target_check(report: &ComplexityReport) -> Vec<(String, bool)> {
    let p = report.total_params as f64;
    let m = report.total_macs as f64;
    let p_ok = (p / TARGET_PARAMS - 1.0).abs() <= PARAMS_TOLERANCE;
    let m_ok = (m / TARGET_MACS - 1.0).abs() <= MACS_TOLERANCE;
    vec![
        (format!("params {:.3}M vs 3.10M ±10%", p / 1e6), p_ok),
        (format!("MACs {:.2}G vs 19.2G ±15%", m / 1e9), m_ok),
    ]
}

pub fn cmd_profile(a: &ProfileArgs) -> CmdResult {
    let overrides = Overrides { config: a.config.clone(), decoder: a.decoder, adaptation: a.adaptation, ..Overrides::default() };
    let cfg = overrides.resolve()?;
    let side = a.resolution;
    let report = estimate_macs(&cfg.generator, Some(&cfg.adaptation), side, side)?;
    print!("{}", report.to_text());
    if side == 512 {
        for (line, ok) in target_check(&report) {
            println!("{line}: {}", if ok { "PASS" } else { "FAIL" });
        }
    } else {
        println!("targets are stated at 512x512; no check at {side}x{side}");
    }
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_csv()).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    if a.time > 0 {
        let models = dptenet::trainer::Models::new(&cfg)?;
        let img = ImageTensor::filled(3, side, side, 0.5);
        let hm = extract_with(&img, &cfg.prior)?;
        let stats = profile_runtime(
            || {
                let _ = models.restore(&img, &hm);
            },
            1,
            a.time,
        )?;
        println!("eval forward: {:.3} s ± {:.3} s over {} runs", stats.mean, stats.stddev, stats.iters);
    }
    Ok(())
}

pub fn cmd_make_hints(a: &MakeHintsArgs) -> CmdResult {
    let cfg = a.overrides.resolve()?;
    let root = dataset_root(&cfg)?;
    let out_dir = a.output.clone().unwrap_or_else(|| root.join("hints"));
    let scan = scan_dataset(root, cfg.data.layout)?;
    let pairs = scan.split(Split::Train);
    let teacher = build_teacher(&cfg, a.teacher.as_deref())?;
    let m = teacher.generator.config.size_multiple();
    let todo: Vec<&SamplePair> = pairs.iter().filter(|p| a.force || !hint_path(&out_dir, &p.id).exists()).collect();
    // check every image before writing anything
    let mut inputs = Vec::with_capacity(todo.len());
    for p in &todo {
        let hazy = load_rgb(&p.hazy_path)?;
        if hazy.height() % m != 0 || hazy.width() % m != 0 {
            return Err(Failure::Usage(format!(
                "{} is {}×{}; hints are computed on full images whose sides are multiples of {m}",
                p.hazy_path.display(),
                hazy.height(),
                hazy.width()
            )));
        }
        let hm = dptenet::io::haze_map_cached(&p.hazy_path, &hazy, &cfg.prior, cfg.data.cache_hazemaps)?;
        inputs.push((p.id.as_str(), hazy.with_extra_channel(&hm.map)?.to_tensor::<f32>()));
    }
    let written = write_teacher_hints(&teacher, inputs, &out_dir)?;
    println!(
        "wrote {written} hint files to {} ({} already present)",
        out_dir.display(),
        pairs.len() - todo.len()
    );
    Ok(())
}

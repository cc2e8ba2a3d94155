//! Alternating critic/generator training with the decaying hint term,
//! validation, early stopping and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use dpte_autograd::{Adam, AdamMoments, Binding, Mode, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PerceptualSource, RunConfig};
use crate::container::{Container, Kind};
use crate::critic::{critic_step, Critic, CriticUpdate};
use crate::distill::{lambda_decay, Adaptation, CropWindow, FrozenTeacher, HintProvider, HintRequest};
use crate::error::{Error, Result};
use crate::generator::{Generator, INPUT_CHANNELS};
use crate::image::{pad_to_multiple, ImageTensor, Map2};
use crate::layers::ParamBuilder;
use crate::losses::{adversarial_term, hint_term, integral_term, perceptual_term, transmission_term, Extractor, LossTerms};
use crate::metrics::{psnr, ssim};
use crate::priors::{make_loss_weight, HazeMap};
use crate::vgg::Vgg16;

/// Seed of the default perceptual extractor weights.
pub const VGG_SEED: u64 = 0x5647_4731;

/// Generator plus adaptation layer (one store) and critic (another store).
#[derive(Clone, Debug)]
pub struct Models {
    pub generator: Generator,
    pub adaptation: Adaptation,
    pub critic: Critic,
    pub gen_store: ParamStore<f32>,
    pub critic_store: ParamStore<f32>,
}

impl Models {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut gen_store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut gen_store, cfg.train.seed);
        let generator = b.scoped("generator", |b| Generator::new(b, &cfg.generator))?;
        let adaptation = Adaptation::new(&mut b, cfg.generator.bottleneck_channels(), &cfg.adaptation)?;
        let mut critic_store = ParamStore::new();
        let critic = Critic::new(&mut ParamBuilder::new(&mut critic_store, cfg.train.seed.wrapping_add(1)), &cfg.critic)?;
        Ok(Self {
            generator,
            adaptation,
            critic,
            gen_store,
            critic_store,
        })
    }

    /// Ids of the adaptation layer's learnable tensors.
    pub fn adaptation_ids(&self) -> Vec<ParamId> {
        self.gen_store
            .learnable_ids()
            .into_iter()
            .filter(|id| self.gen_store.entry(*id).name.starts_with("adapt."))
            .collect()
    }

    /// Eval-mode restoration of an image of any size: reflect-padded to the
    /// generator's multiple, then cropped back.
    pub fn restore(&self, hazy: &ImageTensor, hm: &HazeMap) -> Result<ImageTensor> {
        let x = hazy.with_extra_channel(&hm.map)?.to_tensor::<f32>();
        let padded = pad_to_multiple(&x, self.generator.config.size_multiple());
        let b = Binding::new(&self.gen_store, Mode::EVAL);
        let out = self.generator.forward(&b, &Var::constant(padded))?;
        let img = out.image.value().crop(0, 0, hazy.height(), hazy.width());
        Ok(ImageTensor::from_tensor(&img, 0))
    }
}

pub fn build_extractor(source: &PerceptualSource) -> Result<Extractor> {
    Ok(match source {
        PerceptualSource::Identity => Extractor::Identity,
        PerceptualSource::Vgg { weights: None } => Extractor::Vgg(Box::new(Vgg16::random(VGG_SEED))),
        PerceptualSource::Vgg { weights: Some(p) } => Extractor::Vgg(Box::new(Vgg16::load(p)?)),
    })
}

/// One training example after augmentation.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub hazy: ImageTensor,
    pub clean: ImageTensor,
    /// Haze map before flooring (the generator's fourth channel).
    pub map: Map2,
    pub window: Option<CropWindow>,
}

/// Scalars logged for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub critic_loss: f64,
    pub gradient_penalty: f64,
    pub score_real: f64,
    pub score_fake: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub transmission: f64,
    pub hint: f64,
    /// `λ·ω_H` as applied.
    pub hint_weight: f64,
    pub total: f64,
}

/// Everything that evolves during training.
pub struct TrainState {
    pub config: RunConfig,
    pub models: Models,
    pub extractor: Extractor,
    pub gen_opt: Adam<f32>,
    pub critic_opt: Adam<f32>,
    /// Next epoch to run.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub best_psnr: f64,
    pub stale_epochs: usize,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let models = Models::new(&config)?;
        let extractor = build_extractor(&config.data.perceptual)?;
        let t = &config.train;
        Ok(Self {
            gen_opt: Adam::new(t.generator_betas.0, t.generator_betas.1),
            critic_opt: Adam::new(t.critic_betas.0, t.critic_betas.1),
            rng: ChaCha8Rng::seed_from_u64(t.seed),
            models,
            extractor,
            epoch: 0,
            best_psnr: f64::NEG_INFINITY,
            stale_epochs: 0,
            config,
        })
    }

    pub fn lambda(&self, epoch: usize) -> Result<f64> {
        lambda_decay(epoch.min(self.config.train.epochs), self.config.train.epochs, self.config.train.delta)
    }

    /// Linear decay from the initial rate to 0 at the last epoch.
    pub fn lr(&self, epoch: usize) -> f64 {
        let t = &self.config.train;
        t.lr * (1.0 - epoch as f64 / t.epochs as f64).max(0.0)
    }

    fn critic_lr(&self, epoch: usize) -> f64 {
        let t = &self.config.train;
        t.critic_lr * (1.0 - epoch as f64 / t.epochs as f64).max(0.0)
    }

    /// `n_critic` critic updates followed by one generator update.
    pub fn train_step(&mut self, batch: &[Example], hints: Option<&dyn HintProvider>, lambda: f64) -> Result<StepLog> {
        let cfg = self.config.train.clone();
        let w = cfg.weights;
        let epoch = self.epoch;
        let (lr, critic_lr) = (self.lr(epoch), self.critic_lr(epoch));
        let n = batch.len();
        let inputs: Vec<Tensor<f32>> = batch
            .iter()
            .map(|e| e.hazy.with_extra_channel(&e.map).map(|i| i.to_tensor()))
            .collect::<Result<_>>()?;
        let input = Tensor::stack(&inputs);
        let clean = Tensor::stack(&batch.iter().map(|e| e.clean.to_tensor()).collect::<Vec<_>>());
        let tau_maps: Vec<Tensor<f32>> = batch
            .iter()
            .map(|e| {
                let hm = HazeMap { map: e.map.clone(), patch_size: 0, smooth_radius: 0, smooth_eps: 0.0 };
                make_loss_weight(&hm, self.config.prior.w_min).map(|m| m.to_tensor())
            })
            .collect::<Result<_>>()?;
        let tau = Tensor::stack(&tau_maps);

        // generator pass kept alive across the critic updates; its parameters
        // do not change until the generator update below
        let Models { generator, adaptation, critic, gen_store, critic_store } = &mut self.models;
        let gen_bind = Binding::new(&*gen_store, Mode::TRAIN);
        let out = generator.forward(&gen_bind, &Var::constant(input.clone()))?;
        let fake = out.image.value().clone();

        let mut log = StepLog::default();
        let settings = CriticUpdate {
            objective: cfg.critic_objective,
            weight: w.critic,
            gp_coeff: cfg.gp_coeff,
            penalty_step: cfg.penalty_step,
            lr: critic_lr,
        };
        for _ in 0..cfg.n_critic {
            let c = critic_step(critic, critic_store, &mut self.critic_opt, &clean, &fake, &settings, &mut self.rng)?;
            log.critic_loss = c.loss;
            log.gradient_penalty = c.gradient_penalty;
            log.score_real = c.score_real;
            log.score_fake = c.score_fake;
        }

        // generator update against the refreshed critic (its weights frozen)
        let critic_bind = Binding::new(&*critic_store, Mode::EVAL);
        let zero = || Var::constant(Tensor::scalar(0.0f32));
        let adversarial = if w.adversarial != 0.0 {
            adversarial_term(&critic.forward(&critic_bind, &out.image)?)
        } else {
            zero()
        };
        let perceptual = if w.perceptual != 0.0 {
            perceptual_term(&out.image, &clean, &self.extractor, cfg.norms.perceptual)?
        } else {
            zero()
        };
        let transmission = if w.transmission != 0.0 {
            transmission_term(&out.image, &clean, &tau, cfg.norms.transmission)?
        } else {
            zero()
        };
        let hint_weight = lambda * w.hint;
        let hint = if hint_weight != 0.0 {
            let provider = hints.ok_or_else(|| Error::MissingHint(batch[0].id.clone()))?;
            let mut parts = Vec::with_capacity(n);
            for (e, x) in batch.iter().zip(&inputs) {
                parts.push(provider.hint(&HintRequest { id: &e.id, input: x, window: e.window })?);
            }
            let target = Tensor::stack(&parts);
            let adapted = adaptation.forward(&gen_bind, &out.bottleneck)?;
            Some(hint_term(&adapted, &target, cfg.norms.hint)?)
        } else {
            None
        };
        let terms = LossTerms { adversarial, perceptual, transmission, hint };
        let total = integral_term(&terms, &w, lambda)?;
        log.adversarial = terms.adversarial.item() as f64;
        log.perceptual = terms.perceptual.item() as f64;
        log.transmission = terms.transmission.item() as f64;
        log.hint = terms.hint.as_ref().map_or(0.0, |h| h.item() as f64);
        log.hint_weight = hint_weight;
        log.total = total.item() as f64;
        if !log.total.is_finite() {
            return Err(Error::Numeric { component: "generator total".into() });
        }
        let grads = if total.requires_grad() { Some(total.backward()) } else { None };
        let pg = grads.as_ref().map(|g| gen_bind.param_grads(g)).unwrap_or_default();
        drop(critic_bind);
        drop(out);
        let updates = gen_bind.into_updates();
        self.gen_opt.step(&mut self.models.gen_store, &pg, lr);
        self.models.gen_store.apply_updates(updates);
        Ok(log)
    }
}

/// Per-epoch means of the step logs plus validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    pub losses: StepLog,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

pub const HISTORY_HEADER: &str =
    "epoch,lambda,lr,critic,gradient_penalty,score_real,score_fake,adversarial,perceptual,transmission,hint,hint_weight,total,val_psnr,val_ssim";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let l = &r.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.lambda,
            r.lr,
            l.critic_loss,
            l.gradient_penalty,
            l.score_real,
            l.score_fake,
            l.adversarial,
            l.perceptual,
            l.transmission,
            l.hint,
            l.hint_weight,
            l.total,
            r.val_psnr,
            r.val_ssim
        );
    }
    s
}

/// A full-size pair used for validation.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub id: String,
    pub hazy: ImageTensor,
    pub clean: ImageTensor,
    pub haze: HazeMap,
}

/// Mean PSNR and SSIM of eval-mode restorations.
pub fn evaluate(models: &Models, pairs: &[EvalPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for pair in pairs {
        let out = models.restore(&pair.hazy, &pair.haze)?;
        p += psnr(&out, &pair.clean, 1.0)?;
        s += ssim(&out, &pair.clean)?;
    }
    Ok((p / pairs.len() as f64, s / pairs.len() as f64))
}

/// Source of augmented batches for one epoch.
pub trait BatchSource {
    fn epoch_batches(&self, state: &mut TrainState) -> Result<Vec<Vec<Example>>>;
}

/// In-memory full images, cropped and flipped per visit.
pub struct InMemory {
    pub pairs: Vec<EvalPair>,
    /// Crop origins are snapped to this grid (16 for precomputed hints).
    pub align: usize,
}

impl BatchSource for InMemory {
    fn epoch_batches(&self, state: &mut TrainState) -> Result<Vec<Vec<Example>>> {
        let t = state.config.train.clone();
        let mut out = Vec::new();
        for _ in 0..t.repeats {
            for idx in crate::data::make_batches(self.pairs.len(), t.batch_size, &mut state.rng)? {
                let mut batch = Vec::with_capacity(idx.len());
                for i in idx {
                    let p = &self.pairs[i];
                    let (hazy, clean, map, win) =
                        crate::data::augment(&p.hazy, &p.clean, &p.haze.map, t.crop, self.align, &mut state.rng)?;
                    batch.push(Example { id: p.id.clone(), hazy, clean, map, window: Some(win) });
                }
                out.push(batch);
            }
        }
        Ok(out)
    }
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Checkpoint bytes of the epoch with the best validation PSNR.
    pub best: Option<Vec<u8>>,
    pub stopped_early: bool,
}

/// Hooks observed once per finished epoch.
pub type EpochHook<'a> = dyn FnMut(&TrainState, &EpochRecord) + 'a;

/// Runs epochs from `state.epoch` to the configured total, validating after
/// each and stopping early when validation PSNR stalls for `patience` epochs.
/// With an output directory, writes `last.ckpt`, `best.ckpt` and `history.csv`.
pub fn train(
    state: &mut TrainState,
    data: &dyn BatchSource,
    val: &[EvalPair],
    hints: Option<&dyn HintProvider>,
    mut hook: Option<&mut EpochHook>,
) -> Result<TrainOutcome> {
    if let Some(h) = hints {
        if h.hint_channels() != state.config.adaptation.hint_channels {
            return Err(Error::Config(format!(
                "hint provider gives {} channels, adaptation layer produces {}",
                h.hint_channels(),
                state.config.adaptation.hint_channels
            )));
        }
    }
    let out_dir = state.config.output_dir.clone();
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut history = Vec::new();
    let mut best = None;
    let mut stopped_early = false;
    while state.epoch < state.config.train.epochs {
        let epoch = state.epoch;
        let lambda = state.lambda(epoch)?;
        let lr = state.lr(epoch);
        let batches = data.epoch_batches(state)?;
        let mut sum = StepLog::default();
        for batch in &batches {
            let l = state.train_step(batch, hints, lambda)?;
            add_log(&mut sum, &l);
        }
        let losses = scale_log(&sum, 1.0 / batches.len().max(1) as f64);
        let (val_psnr, val_ssim) = evaluate(&state.models, val)?;
        state.epoch += 1;
        let record = EpochRecord { epoch, lambda, lr, losses, val_psnr, val_ssim };
        log::info!(
            "epoch {epoch}: λ={lambda:.3} total={:.4} val psnr={val_psnr:.2} ssim={val_ssim:.4}",
            losses.total
        );
        history.push(record.clone());
        let improved = val_psnr > state.best_psnr;
        if improved {
            state.best_psnr = val_psnr;
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        if improved {
            best = Some(checkpoint_bytes(state));
        }
        if let Some(dir) = &out_dir {
            save_checkpoint(state, &dir.join("last.ckpt"))?;
            if improved {
                std::fs::write(dir.join("best.ckpt"), best.as_ref().unwrap())?;
            }
            std::fs::write(dir.join("history.csv"), history_csv(&history))?;
        }
        if let Some(h) = hook.as_mut() {
            h(state, &record);
        }
        if !val.is_empty() && state.stale_epochs >= state.config.train.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { history, best, stopped_early })
}

fn add_log(a: &mut StepLog, b: &StepLog) {
    a.critic_loss += b.critic_loss;
    a.gradient_penalty += b.gradient_penalty;
    a.score_real += b.score_real;
    a.score_fake += b.score_fake;
    a.adversarial += b.adversarial;
    a.perceptual += b.perceptual;
    a.transmission += b.transmission;
    a.hint += b.hint;
    a.hint_weight += b.hint_weight;
    a.total += b.total;
}

fn scale_log(a: &StepLog, s: f64) -> StepLog {
    StepLog {
        critic_loss: a.critic_loss * s,
        gradient_penalty: a.gradient_penalty * s,
        score_real: a.score_real * s,
        score_fake: a.score_fake * s,
        adversarial: a.adversarial * s,
        perceptual: a.perceptual * s,
        transmission: a.transmission * s,
        hint: a.hint * s,
        hint_weight: a.hint_weight * s,
        total: a.total * s,
    }
}

/// Scalar state stored in the checkpoint header next to the config.
#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    rng_seed: Vec<u8>,
    rng_word_pos: String,
    gen_opt_step: u64,
    critic_opt_step: u64,
    best_psnr: Option<f64>,
    stale_epochs: usize,
    config: RunConfig,
}

fn push_store(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<f32>) {
    for (_, e) in store.entries() {
        out.push((format!("{prefix}/{}", e.name), e.value.clone()));
    }
}

fn push_adam(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, opt: &Adam<f32>, store: &ParamStore<f32>) {
    for (id, st) in &opt.moments {
        let name = &store.entry(*id).name;
        out.push((format!("{prefix}/m/{name}"), st.m.clone()));
        out.push((format!("{prefix}/v/{name}"), st.v.clone()));
    }
}

fn checkpoint_container(state: &TrainState) -> Container {
    let meta = CheckpointMeta {
        epoch: state.epoch,
        rng_seed: state.rng.get_seed().to_vec(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        gen_opt_step: state.gen_opt.step,
        critic_opt_step: state.critic_opt.step,
        best_psnr: state.best_psnr.is_finite().then_some(state.best_psnr),
        stale_epochs: state.stale_epochs,
        config: state.config.clone(),
    };
    let m = &state.models;
    let mut tensors = Vec::new();
    push_store(&mut tensors, "gen", &m.gen_store);
    push_store(&mut tensors, "critic", &m.critic_store);
    push_adam(&mut tensors, "gen_opt", &state.gen_opt, &m.gen_store);
    push_adam(&mut tensors, "critic_opt", &state.critic_opt, &m.critic_store);
    Container {
        kind: Kind::Checkpoint,
        header: toml::to_string(&meta).expect("checkpoint header serializes"),
        tensors,
    }
}

pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    checkpoint_container(state).to_bytes()
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    checkpoint_container(state).save(path)
}

fn fill_store(store: &mut ParamStore<f32>, c: &Container, prefix: &str, path: &Path) -> Result<()> {
    let ids: Vec<ParamId> = store.entries().map(|(id, _)| id).collect();
    for id in ids {
        let key = format!("{prefix}/{}", store.entry(id).name);
        let t = c.tensor(&key).ok_or_else(|| Error::Incompatible {
            path: path.to_path_buf(),
            reason: format!("missing tensor {key}"),
        })?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: format!("{key} has shape {:?}, expected {:?}", t.shape(), store.get(id).shape()),
            });
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

fn fill_adam(opt: &mut Adam<f32>, store: &ParamStore<f32>, c: &Container, prefix: &str) {
    for (id, e) in store.entries() {
        let m = c.tensor(&format!("{prefix}/m/{}", e.name));
        let v = c.tensor(&format!("{prefix}/v/{}", e.name));
        if let (Some(m), Some(v)) = (m, v) {
            opt.moments.insert(id, AdamMoments { m: m.clone(), v: v.clone() });
        }
    }
}

pub fn load_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let c = Container::from_bytes(bytes, path)?;
    if c.kind != Kind::Checkpoint {
        return Err(Error::Incompatible { path: path.to_path_buf(), reason: "not a checkpoint".into() });
    }
    let meta: CheckpointMeta = toml::from_str(&c.header).map_err(|e| Error::Incompatible {
        path: path.to_path_buf(),
        reason: format!("bad header: {e}"),
    })?;
    let mut state = TrainState::new(meta.config)?;
    fill_store(&mut state.models.gen_store, &c, "gen", path)?;
    fill_store(&mut state.models.critic_store, &c, "critic", path)?;
    fill_adam(&mut state.gen_opt, &state.models.gen_store, &c, "gen_opt");
    fill_adam(&mut state.critic_opt, &state.models.critic_store, &c, "critic_opt");
    state.gen_opt.step = meta.gen_opt_step;
    state.critic_opt.step = meta.critic_opt_step;
    state.epoch = meta.epoch;
    state.best_psnr = meta.best_psnr.unwrap_or(f64::NEG_INFINITY);
    state.stale_epochs = meta.stale_epochs;
    let seed: [u8; 32] = meta.rng_seed.as_slice().try_into().map_err(|_| Error::Incompatible {
        path: path.to_path_buf(),
        reason: "bad RNG seed".into(),
    })?;
    let pos: u128 = meta.rng_word_pos.parse().map_err(|_| Error::Incompatible {
        path: path.to_path_buf(),
        reason: "bad RNG position".into(),
    })?;
    state.rng = ChaCha8Rng::from_seed(seed);
    state.rng.set_word_pos(pos);
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    load_checkpoint_bytes(&std::fs::read(path)?, path)
}

/// Checks that an input tensor has the generator's channel count.
pub fn expect_input_channels(t: &Tensor<f32>) -> Result<()> {
    if t.dims4().1 != INPUT_CHANNELS {
        return crate::error::shape_err(format!("expected {INPUT_CHANNELS} input channels, got {:?}", t.shape()));
    }
    Ok(())
}

/// Teacher for a run: the generator of a saved checkpoint, or a random
/// double-width generator seeded from the run seed.
pub fn build_teacher(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<FrozenTeacher> {
    match checkpoint {
        Some(path) => {
            let state = load_checkpoint(path)?;
            Ok(FrozenTeacher::new(state.models.generator, state.models.gen_store))
        }
        None => FrozenTeacher::random_wide(&cfg.generator, cfg.train.seed.wrapping_add(2)),
    }
}

//! Least-squares GAN training of the generator against the discriminator.
//!
//! Every batch runs one discriminator update, then one generator update. After
//! each epoch the generator's masked L1 on the validation set drives the
//! learning-rate schedule and model selection.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{Tape, Var};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::dsp::MagnitudeSpectrogram;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::{Adam, AdamConfig};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub lambda_g: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub epochs: usize,
    pub batch: usize,
    pub halve_patience: usize,
    pub stop_patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            lambda_g: 1.0,
            lr_g: 5e-4,
            lr_d: 1e-4,
            epochs: 100,
            batch: 4,
            halve_patience: 3,
            stop_patience: 10,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lambda_g) {
            return Err(Error::Config(format!("training.lambda_g must be > 0, got {}", self.lambda_g)));
        }
        if !positive(self.lr_g) || !positive(self.lr_d) {
            return Err(Error::Config("training.lr_g and training.lr_d must be > 0".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("training.epochs and training.batch must be >= 1".into()));
        }
        if self.halve_patience == 0 || self.halve_patience >= self.stop_patience {
            return Err(Error::Config(format!(
                "training.halve_patience ({}) must be >= 1 and below training.stop_patience ({})",
                self.halve_patience, self.stop_patience
            )));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !positive(eps) {
            return Err(Error::Config("training.adam betas must lie in [0, 1) and eps be > 0".into()));
        }
        Ok(())
    }
}

/// `mean((d_real - 1)^2) + mean(d_fake^2)`.
pub fn d_loss<T: Scalar>(d_real: &[T], d_fake: &[T]) -> Result<T> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::invalid("empty score batch"));
    }
    if d_real.len() != d_fake.len() {
        return Err(Error::invalid(format!(
            "{} real scores vs {} fake scores",
            d_real.len(),
            d_fake.len()
        )));
    }
    let n = T::lit(d_real.len() as f64);
    let real: T = d_real.iter().map(|&d| (d - T::one()) * (d - T::one())).sum();
    let fake: T = d_fake.iter().map(|&d| d * d).sum();
    Ok(real / n + fake / n)
}

/// Generator loss split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GLoss<T> {
    pub total: T,
    pub adv: T,
    pub l1: T,
}

/// `mean((d_fake - 1)^2) + lambda_g * L1` where L1 is the mean absolute error
/// over real frames. `est`, `target` are `[B, T, F]`, `mask` is `[B, T]`.
pub fn g_loss<T: Scalar>(
    d_fake: &[T],
    est: &Array3<T>,
    target: &Array3<T>,
    mask: &Array2<T>,
    lambda_g: f64,
) -> Result<GLoss<T>> {
    if d_fake.is_empty() {
        return Err(Error::invalid("empty score batch"));
    }
    let n = T::lit(d_fake.len() as f64);
    let adv = d_fake.iter().map(|&d| (d - T::one()) * (d - T::one())).sum::<T>() / n;
    let l1 = masked_l1(est, target, mask)?;
    Ok(GLoss {
        total: adv + T::lit(lambda_g) * l1,
        adv,
        l1,
    })
}

/// Mean absolute error over frames with `mask == 1`.
pub fn masked_l1<T: Scalar>(est: &Array3<T>, target: &Array3<T>, mask: &Array2<T>) -> Result<T> {
    let (b, t, f) = est.dim();
    if target.dim() != (b, t, f) || mask.dim() != (b, t) {
        return Err(Error::invalid(format!(
            "estimate {:?}, target {:?} and mask {:?} disagree",
            est.dim(),
            target.dim(),
            mask.dim()
        )));
    }
    let frames: T = mask.sum();
    if frames <= T::zero() {
        return Err(Error::invalid("mask selects no frames"));
    }
    let mut acc = T::zero();
    for ((bi, ti), &m) in mask.indexed_iter() {
        if m != T::zero() {
            let e = est.slice(s![bi, ti, ..]);
            let g = target.slice(s![bi, ti, ..]);
            acc += m * e.iter().zip(g.iter()).map(|(&x, &y)| (x - y).abs()).sum::<T>();
        }
    }
    Ok(acc / (frames * T::lit(f as f64)))
}

fn d_loss_var<'t, T: Scalar>(real: Var<'t, T>, fake: Var<'t, T>) -> Var<'t, T> {
    real.add_scalar(-T::one()).square().mean().add(fake.square().mean())
}

/// Masked L1 on the tape; `est`, `target` `[B, 1, T, F]`, `mask` `[B, 1, T, 1]`.
fn masked_l1_var<'t, T: Scalar>(est: Var<'t, T>, target: Var<'t, T>, mask: Var<'t, T>, count: T) -> Var<'t, T> {
    est.sub(target).abs().mul(mask).sum().scale(T::one() / count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleAction {
    Continue,
    Halve,
    Stop,
}

/// Validation-driven learning-rate schedule. An "increment" is a strict
/// increase over the previous epoch's validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrScheduleState {
    pub best_val: Option<f64>,
    pub prev_val: Option<f64>,
    pub consec_increments: usize,
    pub lr_g: f64,
    pub lr_d: f64,
}

impl LrScheduleState {
    pub fn new(lr_g: f64, lr_d: f64) -> Self {
        LrScheduleState {
            best_val: None,
            prev_val: None,
            consec_increments: 0,
            lr_g,
            lr_d,
        }
    }
}

pub fn lr_schedule_update(
    state: &LrScheduleState,
    new_val_loss: f64,
    halve_patience: usize,
    stop_patience: usize,
) -> (LrScheduleState, ScheduleAction) {
    let mut next = state.clone();
    match state.prev_val {
        Some(prev) if new_val_loss > prev => next.consec_increments += 1,
        _ => next.consec_increments = 0,
    }
    next.prev_val = Some(new_val_loss);
    next.best_val = Some(match state.best_val {
        Some(b) if b <= new_val_loss => b,
        _ => new_val_loss,
    });
    let k = next.consec_increments;
    let action = if k >= stop_patience {
        ScheduleAction::Stop
    } else if k > 0 && k % halve_patience == 0 {
        next.lr_g *= 0.5;
        next.lr_d *= 0.5;
        ScheduleAction::Halve
    } else {
        ScheduleAction::Continue
    };
    (next, action)
}

/// Noisy and clean magnitudes of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecPair<T> {
    pub noisy: MagnitudeSpectrogram<T>,
    pub clean: MagnitudeSpectrogram<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch<T> {
    /// `[B, T_max, F]`
    pub mags: Array3<T>,
    pub targets: Array3<T>,
    /// `[B, T_max]`, one on real frames.
    pub mask: Array2<T>,
    pub lengths: Vec<usize>,
}

impl<T: Scalar> PaddedBatch<T> {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    fn as_vars<'t>(&self, tape: &'t Tape<T>) -> (Var<'t, T>, Var<'t, T>, Var<'t, T>) {
        let (b, t, f) = self.mags.dim();
        let four = |a: &Array3<T>| a.clone().into_shape_with_order(IxDyn(&[b, 1, t, f])).unwrap();
        (
            tape.constant(four(&self.mags)),
            tape.constant(four(&self.targets)),
            tape.constant(self.mask.clone().into_shape_with_order(IxDyn(&[b, 1, t, 1])).unwrap()),
        )
    }

    fn frame_count(&self) -> T {
        T::lit((self.lengths.iter().sum::<usize>() * self.mags.dim().2) as f64)
    }
}

pub fn pad_and_mask<T: Scalar>(utterances: &[SpecPair<T>]) -> Result<PaddedBatch<T>> {
    let first = utterances.first().ok_or_else(|| Error::invalid("empty utterance list"))?;
    let bins = first.noisy.bins();
    for (i, u) in utterances.iter().enumerate() {
        if u.noisy.data.dim() != u.clean.data.dim() {
            return Err(Error::invalid(format!(
                "utterance {i}: noisy {:?} vs clean {:?}",
                u.noisy.data.dim(),
                u.clean.data.dim()
            )));
        }
        if u.noisy.bins() != bins || u.noisy.frames() == 0 {
            return Err(Error::invalid(format!(
                "utterance {i} has shape {:?}, expected non-empty x {bins}",
                u.noisy.data.dim()
            )));
        }
    }
    let tmax = utterances.iter().map(|u| u.noisy.frames()).max().unwrap();
    let b = utterances.len();
    let mut mags = Array3::zeros((b, tmax, bins));
    let mut targets = Array3::zeros((b, tmax, bins));
    let mut mask = Array2::zeros((b, tmax));
    let mut lengths = Vec::with_capacity(b);
    for (i, u) in utterances.iter().enumerate() {
        let t = u.noisy.frames();
        mags.slice_mut(s![i, ..t, ..]).assign(&u.noisy.data);
        targets.slice_mut(s![i, ..t, ..]).assign(&u.clean.data);
        mask.slice_mut(s![i, ..t]).fill(T::one());
        lengths.push(t);
    }
    Ok(PaddedBatch {
        mags,
        targets,
        mask,
        lengths,
    })
}

/// Losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
}

/// Generator, discriminator and their optimizers.
#[derive(Debug, Clone)]
pub struct GanTrainer<T: Scalar> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub lambda_g: f64,
    pub steps: usize,
}

impl<T: Scalar> GanTrainer<T> {
    pub fn new(
        gan: &GanTrainConfig,
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscriminatorConfig,
        bins: usize,
    ) -> Result<Self> {
        gan.validate()?;
        Ok(GanTrainer {
            generator: Generator::new(gen_cfg)?,
            discriminator: Discriminator::new(disc_cfg, bins)?,
            opt_g: Adam::new(gan.lr_g, gan.adam),
            opt_d: Adam::new(gan.lr_d, gan.adam),
            lambda_g: gan.lambda_g,
            steps: 0,
        })
    }

    fn diverged(&self, stage: &'static str, detail: String) -> Error {
        Error::Diverged {
            stage,
            step: self.steps,
            detail,
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, batch: &PaddedBatch<T>) -> Result<StepRecord> {
        self.steps += 1;
        let count = batch.frame_count();
        let (b, t, f) = batch.mags.dim();

        // discriminator: real clean vs detached generator output
        let fake = self.generator.enhance_batch(&batch.mags);
        let fake = (fake * &batch.mask.clone().insert_axis(Axis(2)))
            .into_shape_with_order(IxDyn(&[b, 1, t, f]))
            .unwrap();
        let iters = self.discriminator.config().sn_power_iters;
        self.discriminator.power_iterate(iters);
        let d_value = {
            let tape = Tape::new();
            let p = self.discriminator.params.bind(&tape, true);
            let (_, target, _) = batch.as_vars(&tape);
            let real = self.discriminator.forward_var(&p, target, &batch.lengths);
            let fake = self.discriminator.forward_var(&p, tape.constant(fake), &batch.lengths);
            let loss = d_loss_var(real, fake);
            let value = loss.item();
            if !value.is_finite() {
                return Err(self.diverged("discriminator", format!("d_loss = {value}")));
            }
            let grads = p.gradients(&tape.backward(loss));
            self.opt_d.step(&mut self.discriminator.params, &grads);
            value
        };

        // generator: adversarial term through the frozen discriminator plus masked L1
        let (adv, l1) = {
            let tape = Tape::new();
            let p = self.generator.params.bind(&tape, true);
            let dp = self.discriminator.params.bind(&tape, false);
            let (noisy, target, mask) = batch.as_vars(&tape);
            let est = self.generator.forward_var(&p, noisy).pop().unwrap();
            let score = self.discriminator.forward_var(&dp, est.mul(mask), &batch.lengths);
            let adv = score.add_scalar(-T::one()).square().mean();
            let l1 = masked_l1_var(est, target, mask, count);
            let loss = adv.add(l1.scale(T::lit(self.lambda_g)));
            let (a, l) = (adv.item(), l1.item());
            if !loss.item().is_finite() {
                return Err(self.diverged("generator", format!("g_adv = {a}, g_l1 = {l}")));
            }
            let grads = p.gradients(&tape.backward(loss));
            self.opt_g.step(&mut self.generator.params, &grads);
            (a, l)
        };
        if !self.generator.params.all_finite() || !self.discriminator.params.all_finite() {
            return Err(self.diverged(
                "update",
                format!("non-finite parameters after d_loss = {d_value}, g_adv = {adv}, g_l1 = {l1}"),
            ));
        }
        Ok(StepRecord {
            d_loss: d_value.as_f64(),
            g_adv: adv.as_f64(),
            g_l1: l1.as_f64(),
        })
    }

    /// Final-stage masked L1 of the current generator on `batch`.
    pub fn l1_on(&self, batch: &PaddedBatch<T>) -> Result<T> {
        let est = self.generator.enhance_batch(&batch.mags);
        masked_l1(&est, &batch.targets, &batch.mask)
    }
}

/// Masked L1 of `generator` over a whole set, weighted by frame count.
pub fn validation_loss<T: Scalar>(generator: &Generator<T>, set: &[SpecPair<T>], batch: usize) -> Result<f64> {
    let mut acc = 0.0;
    let mut frames = 0usize;
    for chunk in set.chunks(batch.max(1)) {
        let b = pad_and_mask(chunk)?;
        let n: usize = b.lengths.iter().sum();
        let est = generator.enhance_batch(&b.mags);
        acc += masked_l1(&est, &b.targets, &b.mask)?.as_f64() * n as f64;
        frames += n;
    }
    if frames == 0 {
        return Err(Error::invalid("empty validation set"));
    }
    Ok(acc / frames as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        d_loss: f64,
        g_adv: f64,
        g_l1: f64,
        lr_g: f64,
        lr_d: f64,
    },
    Epoch {
        epoch: usize,
        step: usize,
        val_loss: f64,
        action: ScheduleAction,
        lr_g: f64,
        lr_d: f64,
    },
}

impl LogRecord {
    pub fn epoch(&self) -> usize {
        match self {
            LogRecord::Step { epoch, .. } | LogRecord::Epoch { epoch, .. } => *epoch,
        }
    }
}

/// Where checkpoints and the log go, and whether to pick up an earlier run.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
    /// Echo each log line to standard output.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub best: Generator<T>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub log: Vec<LogRecord>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_POINTER: &str = "BEST";
pub const BEST_GENERATOR: &str = "generator_best.ckpt";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    epoch: usize,
    steps: usize,
    bins: usize,
    gan: GanTrainConfig,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    schedule: LrScheduleState,
    best_epoch: usize,
    stopped: bool,
}

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_checkpoint<T: Scalar>(
    dir: &Path,
    trainer: &GanTrainer<T>,
    header: &CheckpointHeader,
) -> Result<()> {
    let mut ar = Archive::new(header)?;
    trainer.generator.params.save_into("gen.", &mut ar);
    trainer.discriminator.params.save_into("disc.", &mut ar);
    trainer.discriminator.sn_state.save_into("disc.", &mut ar);
    trainer.opt_g.save_into("opt_g.", &mut ar);
    trainer.opt_d.save_into("opt_d.", &mut ar);
    write_atomic(&dir.join(checkpoint_name(header.epoch)), &ar.to_bytes()?)
}

/// Reads the best generator of a finished or interrupted run.
pub fn load_best_generator<T: Scalar>(run_dir: &Path) -> Result<Generator<T>> {
    let path = run_dir.join(BEST_GENERATOR);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no trained generator at {} (run `train` first)",
            path.display()
        )));
    }
    Generator::load(path)
}

/// Full GAN training run. Returns the generator from the epoch with the lowest
/// validation loss.
pub fn train_gan<T: Scalar>(
    train_set: &[SpecPair<T>],
    val_set: &[SpecPair<T>],
    gan: &GanTrainConfig,
    gen_cfg: &GeneratorConfig,
    disc_cfg: &DiscriminatorConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    gan.validate()?;
    gen_cfg.validate()?;
    disc_cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let bins = train_set[0].noisy.bins();
    let mut trainer = GanTrainer::new(gan, gen_cfg.clone(), disc_cfg.clone(), bins)?;
    let mut schedule = LrScheduleState::new(gan.lr_g, gan.lr_d);
    let mut best = trainer.generator.clone();
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut start = 1;
    let mut stopped = false;

    let ckpt_dir = opts.run_dir.as_ref().map(|d| d.join(CHECKPOINT_DIR));
    if let Some(dir) = &ckpt_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if opts.resume {
        let run_dir = opts
            .run_dir
            .as_ref()
            .ok_or_else(|| Error::Config("resume needs a run directory".into()))?;
        if let Some((epoch, ar)) = latest_checkpoint(&run_dir.join(CHECKPOINT_DIR))? {
            let h: CheckpointHeader = ar.header_as()?;
            if h.generator != *gen_cfg || h.discriminator != *disc_cfg || h.bins != bins {
                return Err(Error::Checkpoint(
                    "checkpoint was written for a different model configuration".into(),
                ));
            }
            trainer.generator.params.load_from("gen.", &ar)?;
            trainer.discriminator.params.load_from("disc.", &ar)?;
            trainer.discriminator.sn_state.load_from("disc.", &ar)?;
            trainer.opt_g.load_from("opt_g.", &ar, &trainer.generator.params)?;
            trainer.opt_d.load_from("opt_d.", &ar, &trainer.discriminator.params)?;
            trainer.steps = h.steps;
            schedule = h.schedule;
            trainer.opt_g.lr = schedule.lr_g;
            trainer.opt_d.lr = schedule.lr_d;
            best_epoch = h.best_epoch;
            best = load_best_generator(run_dir)?;
            log = read_log(&run_dir.join(LOG_FILE))?
                .into_iter()
                .filter(|r| r.epoch() <= epoch)
                .collect();
            start = epoch + 1;
            stopped = h.stopped;
        }
    }

    let mut log_file = match &opts.run_dir {
        Some(dir) => {
            let path = dir.join(LOG_FILE);
            let mut text = String::new();
            for r in &log {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Some((
                fs::OpenOptions::new()
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };
    let mut emit = |r: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        let line = serde_json::to_string(&r)?;
        if opts.verbose {
            println!("{line}");
        }
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(r);
        Ok(())
    };

    let mut epochs_run = start - 1;
    let mut epoch = start;
    while !stopped && epoch <= gan.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng(gan.seed, epoch));
        for idx in order.chunks(gan.batch) {
            let utts: Vec<SpecPair<T>> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let batch = pad_and_mask(&utts)?;
            let rec = trainer.step(&batch)?;
            emit(
                LogRecord::Step {
                    epoch,
                    step: trainer.steps,
                    d_loss: rec.d_loss,
                    g_adv: rec.g_adv,
                    g_l1: rec.g_l1,
                    lr_g: trainer.opt_g.lr,
                    lr_d: trainer.opt_d.lr,
                },
                &mut log,
            )?;
        }
        let val = validation_loss(&trainer.generator, val_set, gan.batch)?;
        if !val.is_finite() {
            return Err(trainer.diverged("validation", format!("val_loss = {val} after epoch {epoch}")));
        }
        let improved = schedule.best_val.is_none_or(|b| val < b);
        let (next, action) = lr_schedule_update(&schedule, val, gan.halve_patience, gan.stop_patience);
        schedule = next;
        trainer.opt_g.lr = schedule.lr_g;
        trainer.opt_d.lr = schedule.lr_d;
        if improved {
            best = trainer.generator.clone();
            best_epoch = epoch;
        }
        emit(
            LogRecord::Epoch {
                epoch,
                step: trainer.steps,
                val_loss: val,
                action,
                lr_g: schedule.lr_g,
                lr_d: schedule.lr_d,
            },
            &mut log,
        )?;
        stopped = action == ScheduleAction::Stop;
        if let (Some(dir), Some(run_dir)) = (&ckpt_dir, &opts.run_dir) {
            if improved {
                write_atomic(&run_dir.join(BEST_GENERATOR), &best.to_archive()?.to_bytes()?)?;
                write_atomic(&dir.join(BEST_POINTER), format!("{}\n", checkpoint_name(epoch)).as_bytes())?;
            }
            save_checkpoint(
                dir,
                &trainer,
                &CheckpointHeader {
                    kind: "gan-training".into(),
                    epoch,
                    steps: trainer.steps,
                    bins,
                    gan: gan.clone(),
                    generator: gen_cfg.clone(),
                    discriminator: disc_cfg.clone(),
                    schedule: schedule.clone(),
                    best_epoch,
                    stopped,
                },
            )?;
        }
        epochs_run = epoch;
        epoch += 1;
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val: schedule.best_val.unwrap_or(f64::NAN),
        log,
        epochs_run,
        stopped_early: stopped,
    })
}

fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, Archive)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<usize> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name
            .strip_prefix("epoch-")
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok())
        {
            best = Some(best.map_or(n, |b: usize| b.max(n)));
        }
    }
    match best {
        Some(n) => Ok(Some((n, Archive::load(dir.join(checkpoint_name(n)))?))),
        None => Ok(None),
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}

/// Per-frame mask as `[B, T]` ones/zeros from lengths.
pub fn mask_from_lengths<T: Scalar>(lengths: &[usize], frames: usize) -> Array2<T> {
    Array2::from_shape_fn((lengths.len(), frames), |(b, t)| {
        if t < lengths[b] {
            T::one()
        } else {
            T::zero()
        }
    })
}

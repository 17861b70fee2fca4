//! Training loop behind [`run_schedule`](super::run_schedule).

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at_epoch, Schedule};
use crate::autograd::Tape;
use crate::checkpoint;
use crate::data::io::{read_json, write_json};
use crate::data::preprocess::class_weights_from_counts;
use crate::data::{augment, AugConfig, Image};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::unet::{Mode, UNet};

/// One standardized image and its target map in network label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u32,
    pub image: Image<f32>,
    pub target: Image<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub examples: Vec<Example>,
    pub num_classes: usize,
}

impl TrainSet {
    /// Checks that all examples share one shape and targets are below `num_classes`.
    pub fn new(examples: Vec<Example>, num_classes: usize) -> Result<Self> {
        if let Some(first) = examples.first() {
            for e in &examples {
                if !e.image.same_shape(&first.image) || !e.image.same_shape(&e.target) {
                    return Err(Error::Shape(format!("example {} differs in shape", e.id)));
                }
                if let Some(&l) = e.target.data.iter().find(|&&l| l as usize >= num_classes) {
                    return Err(Error::Shape(format!("example {}: target {l} >= {num_classes} classes", e.id)));
                }
            }
        }
        Ok(Self { examples, num_classes })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Inverse-frequency weights over the targets of `set`.
pub fn class_weights_for(set: &TrainSet) -> Vec<f64> {
    let mut counts = vec![0u64; set.num_classes];
    for e in &set.examples {
        for &l in &e.target.data {
            counts[l as usize] += 1;
        }
    }
    class_weights_from_counts(&counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub augmentation: Option<AugConfig>,
    /// Drives batch order and is mixed into the augmentation seed.
    pub seed: u64,
    /// Overrides the inverse-frequency weights of the training targets.
    pub class_weights: Option<Vec<f64>>,
    /// Progress is saved here after every epoch and resumed from on start.
    pub state_dir: Option<PathBuf>,
    /// Return early after this many epochs in this call.
    pub stop_after_epochs: Option<u32>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 4,
            augmentation: Some(AugConfig::default()),
            seed: 0,
            class_weights: None,
            state_dir: None,
            stop_after_epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub phase: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,phase,lr,train_loss,val_loss,val_dice";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{},{},{}",
            self.epoch, self.phase, self.lr, self.train_loss, self.val_loss, self.val_dice
        )
    }

    pub fn to_csv(rows: &[EpochLog]) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch restored at the end of each finished phase.
    pub best_epochs: Vec<u32>,
    /// False when `stop_after_epochs` interrupted the run.
    pub completed: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Progress {
    phase: usize,
    next_epoch: u32,
    best_val: Option<f64>,
    best_epoch: u32,
    bad_epochs: u32,
    best_epochs: Vec<u32>,
    log: Vec<EpochLog>,
}

const SAVED: &str = "saved";
const STAGING: &str = "staging";
const PROGRESS: &str = "progress.json";

fn save_progress(dir: &Path, progress: &Progress, model: &UNet<f32>, adam: &Adam<f32>, best: Option<&UNet<f32>>) -> Result<()> {
    let staging = dir.join(STAGING);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    checkpoint::save(&staging.join("current"), model, Some(&adam.state))?;
    if let Some(b) = best {
        checkpoint::save(&staging.join("best"), b, None)?;
    }
    write_json(&staging.join(PROGRESS), progress)?;
    let saved = dir.join(SAVED);
    if saved.exists() {
        fs::remove_dir_all(&saved).map_err(|e| Error::io(&saved, e))?;
    }
    fs::rename(&staging, &saved).map_err(|e| Error::io(&saved, e))
}

type Restored = (Progress, UNet<f32>, Adam<f32>, Option<UNet<f32>>);

fn load_progress(dir: &Path) -> Result<Option<Restored>> {
    // a staging dir with its progress file written is complete
    let src = [SAVED, STAGING]
        .iter()
        .map(|d| dir.join(d))
        .find(|d| d.join(PROGRESS).exists());
    let Some(src) = src else { return Ok(None) };
    let progress: Progress = read_json(&src.join(PROGRESS))?;
    let (model, state) = checkpoint::load::<f32>(&src.join("current"))?;
    let state = state.ok_or_else(|| Error::format(src.join("current"), "optimizer state missing"))?;
    let best = if src.join("best").exists() {
        Some(checkpoint::load::<f32>(&src.join("best"))?.0)
    } else {
        None
    };
    Ok(Some((progress, model, Adam::with_state(AdamConfig::default(), state), best)))
}

fn mix(a: u64, b: u64) -> u64 {
    (a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15)).rotate_left(29).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// `[B, 1, H, W]` batch from same-shaped images.
pub fn batch_tensor(images: &[&Image<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or(Error::EmptyDataset("empty batch"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::Shape("batch images differ in shape".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(&[images.len(), 1, first.height, first.width], data)
}

/// Per-pixel argmax of `[B, K, H, W]` logits.
fn argmax_maps(logits: &Tensor<f32>) -> Vec<Image<u8>> {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    (0..b)
        .map(|n| {
            let base = n * k * hw;
            let data = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[base + c * hw + p] > d[base + best * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            Image { height: s[2], width: s[3], data }
        })
        .collect()
}

/// Eval-mode argmax label maps, `batch_size` images per forward pass.
pub fn predict_labels(model: &UNet<f32>, images: &[&Image<f32>], batch_size: usize) -> Result<Vec<Image<u8>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        out.extend(argmax_maps(&model.predict(&batch_tensor(chunk)?)?));
    }
    Ok(out)
}

/// Pooled Dice of the foreground: liver for two-class targets, any lesion
/// label (`>= 2`) otherwise. Both empty gives 1.
pub fn foreground_dice(preds: &[Image<u8>], targets: &[&Image<u8>], num_classes: usize) -> f64 {
    let fg = |l: u8| if num_classes == 2 { l == 1 } else { l >= 2 };
    let (mut inter, mut total) = (0u64, 0u64);
    for (p, t) in preds.iter().zip(targets) {
        for (&a, &b) in p.data.iter().zip(&t.data) {
            let (a, b) = (fg(a), fg(b));
            inter += u64::from(a && b);
            total += u64::from(a) + u64::from(b);
        }
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Mean weighted cross-entropy and foreground Dice of `model` on `set`.
pub fn evaluate_loss(model: &UNet<f32>, set: &TrainSet, weights: &[f32], batch_size: usize) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(set.len());
    for chunk in set.examples.chunks(batch_size.max(1)) {
        let images: Vec<&Image<f32>> = chunk.iter().map(|e| &e.image).collect();
        let targets: Vec<u32> = chunk.iter().flat_map(|e| e.target.data.iter().map(|&l| u32::from(l))).collect();
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(&images)?);
        let fwd = model.forward_eval(&mut tape, x)?;
        preds.extend(argmax_maps(tape.value(fwd.logits)));
        let probs = tape.softmax_pixelwise(fwd.logits)?;
        let loss = tape.weighted_cross_entropy_indices(probs, targets, weights)?;
        loss_sum += f64::from(tape.value(loss).data()[0]) * chunk.len() as f64;
    }
    let targets: Vec<&Image<u8>> = set.examples.iter().map(|e| &e.target).collect();
    Ok((loss_sum / set.len() as f64, foreground_dice(&preds, &targets, set.num_classes)))
}

struct EpochCtx<'a> {
    weights: &'a [f32],
    batch_size: usize,
    aug: Option<&'a AugConfig>,
    seed: u64,
    phase: usize,
    epoch: u32,
    lr: f64,
}

fn train_epoch(model: &mut UNet<f32>, set: &TrainSet, adam: &mut Adam<f32>, ctx: &EpochCtx) -> Result<f64> {
    let key = mix(mix(ctx.seed, ctx.phase as u64 + 1), u64::from(ctx.epoch) + 1);
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
    let aug_epoch = ctx.phase as u32 * 10_000 + ctx.epoch;
    let mut loss_sum = 0.0;
    for chunk in order.chunks(ctx.batch_size) {
        let mut images = Vec::with_capacity(chunk.len());
        let mut targets = Vec::new();
        for &i in chunk {
            let e = &set.examples[i];
            match ctx.aug {
                Some(cfg) => {
                    let fill = e.image.data.iter().copied().fold(f32::INFINITY, f32::min);
                    let (img, masks) = augment(&e.image, &[&e.target], cfg, e.id, aug_epoch, fill);
                    targets.extend(masks[0].data.iter().map(|&l| u32::from(l)));
                    images.push(img);
                }
                None => {
                    targets.extend(e.target.data.iter().map(|&l| u32::from(l)));
                    images.push(e.image.clone());
                }
            }
        }
        let refs: Vec<&Image<f32>> = images.iter().collect();
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(&refs)?);
        let fwd = model.forward(&mut tape, x, Mode::Train)?;
        let probs = tape.softmax_pixelwise(fwd.logits)?;
        let loss = tape.weighted_cross_entropy_indices(probs, targets, ctx.weights)?;
        let value = f64::from(tape.value(loss).data()[0]);
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        tape.backward(loss)?;
        model.accumulate_grads(&tape, &fwd);
        adam.step(model.params_mut(), ctx.lr)?;
        loss_sum += value * chunk.len() as f64;
    }
    Ok(loss_sum / set.len() as f64)
}

fn apply_frozen(model: &mut UNet<f32>, schedule: &Schedule, phase: usize) -> Result<()> {
    model.set_all_trainable(true);
    for &b in &schedule.phases[phase].frozen_blocks {
        model.set_block_trainable(b, false)?;
    }
    Ok(())
}

/// Runs the phases of `schedule` in order on `model`, carrying weights across
/// phases. Each phase starts a fresh Adam, decays its learning rate with
/// [`lr_at_epoch`], stops after `patience` epochs without a lower validation
/// loss, and ends by restoring its best-validation weights. On return every
/// block is trainable again.
pub fn run_schedule(
    model: &mut UNet<f32>,
    train: &TrainSet,
    val: &TrainSet,
    schedule: &Schedule,
    opts: &TrainOptions,
) -> Result<ScheduleOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set"));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if train.num_classes != model.num_classes() || val.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, data has {} / {}",
            model.num_classes(),
            train.num_classes,
            val.num_classes
        )));
    }
    schedule.validate(model.config().encoder_blocks)?;
    let weights: Vec<f32> = match &opts.class_weights {
        Some(w) if w.len() != train.num_classes => {
            return Err(Error::Config(format!("{} class weights for {} classes", w.len(), train.num_classes)))
        }
        Some(w) => w.iter().map(|&v| v as f32).collect(),
        None => class_weights_for(train).into_iter().map(|v| v as f32).collect(),
    };
    let aug = match &opts.augmentation {
        Some(cfg) => {
            cfg.validate()?;
            Some(AugConfig {
                seed: mix(cfg.seed, opts.seed),
                ..cfg.clone()
            })
        }
        None => None,
    };

    let mut progress = Progress::default();
    let mut adam = Adam::new(model.params(), AdamConfig::default());
    let mut best: Option<UNet<f32>> = None;
    if let Some(dir) = &opts.state_dir {
        if let Some((p, m, a, b)) = load_progress(dir)? {
            info!("resuming at phase {} epoch {} from {}", p.phase, p.next_epoch, dir.display());
            progress = p;
            *model = m;
            adam = a;
            best = b;
        }
    }

    let mut epochs_this_call = 0;
    while progress.phase < schedule.phases.len() {
        let phase = &schedule.phases[progress.phase];
        apply_frozen(model, schedule, progress.phase)?;
        let mut epoch = progress.next_epoch;
        while epoch < phase.max_epochs && progress.bad_epochs < phase.patience {
            if opts.stop_after_epochs.is_some_and(|n| epochs_this_call >= n) {
                return Ok(ScheduleOutcome {
                    log: progress.log,
                    best_epochs: progress.best_epochs,
                    completed: false,
                });
            }
            let lr = lr_at_epoch(phase.lr0, epoch);
            let ctx = EpochCtx {
                weights: &weights,
                batch_size: opts.batch_size,
                aug: aug.as_ref(),
                seed: opts.seed,
                phase: progress.phase,
                epoch,
                lr,
            };
            let train_loss = train_epoch(model, train, &mut adam, &ctx)?;
            let (val_loss, val_dice) = evaluate_loss(model, val, &weights, opts.batch_size)?;
            if !val_loss.is_finite() {
                return Err(Error::NonFinite("validation loss"));
            }
            if progress.best_val.map_or(true, |b| val_loss < b) {
                progress.best_val = Some(val_loss);
                progress.best_epoch = epoch;
                progress.bad_epochs = 0;
                best = Some(model.clone());
            } else {
                progress.bad_epochs += 1;
            }
            debug!(
                "phase {} epoch {epoch}: lr {lr:.3e} train {train_loss:.5} val {val_loss:.5} dice {val_dice:.4}",
                progress.phase
            );
            progress.log.push(EpochLog {
                epoch,
                phase: progress.phase,
                lr,
                train_loss,
                val_loss,
                val_dice,
            });
            epoch += 1;
            epochs_this_call += 1;
            progress.next_epoch = epoch;
            if let Some(dir) = &opts.state_dir {
                save_progress(dir, &progress, model, &adam, best.as_ref())?;
            }
        }
        if let Some(b) = best.take() {
            *model = b;
        }
        info!(
            "phase {} done after {} epochs; restored epoch {}",
            progress.phase, epoch, progress.best_epoch
        );
        progress.best_epochs.push(progress.best_epoch);
        progress.phase += 1;
        progress.next_epoch = 0;
        progress.best_val = None;
        progress.best_epoch = 0;
        progress.bad_epochs = 0;
        adam = Adam::new(model.params(), AdamConfig::default());
        if let Some(dir) = &opts.state_dir {
            save_progress(dir, &progress, model, &adam, None)?;
        }
    }
    model.set_all_trainable(true);
    Ok(ScheduleOutcome {
        log: progress.log,
        best_epochs: progress.best_epochs,
        completed: true,
    })
}

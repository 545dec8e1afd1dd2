//! Pre-training on adequate-contact images.

pub mod checkpoint;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, RngState};

use crate::data::{Manifest, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::{ContactKind, TactileImage};
use crate::masking::sample_mask;
use crate::model::{bind, classify_latent, forward_full, masked_objective, ClassTarget, LossWeights, ModelConfig, ModelParams};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::patching::{patchify, PatchGrid};
use crate::seed;

/// Which losses a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Reconstruction plus classification.
    Tacmae,
    /// Reconstruction only (classification head detached).
    MaeOnly,
    /// Classification only, no masking.
    VitOnly,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Tacmae => "tacmae",
            Variant::MaeOnly => "mae_only",
            Variant::VitOnly => "vit_only",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "tacmae" => Ok(Variant::Tacmae),
            "mae_only" | "mae" => Ok(Variant::MaeOnly),
            "vit_only" | "vit" => Ok(Variant::VitOnly),
            _ => Err(Error::config(format!("unknown variant `{s}` (tacmae, mae-only, vit-only)"))),
        }
    }
}

/// Learning-rate schedule over optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero over the whole run.
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if total > 1 => {
                let t = step as f64 / total as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::Cosine => base,
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::config(format!("unknown lr schedule `{s}` (constant, cosine)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub mask_ratio: f64,
    pub weights: LossWeights,
    pub adam: AdamHyper,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub manifest: PathBuf,
    /// Also write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            variant: Variant::Tacmae,
            mask_ratio: 0.7,
            weights: LossWeights::default(),
            adam: AdamHyper::default(),
            schedule: LrSchedule::Constant,
            batch_size: 32,
            epochs: 30,
            seed: 7,
            model: ModelConfig::default(),
            manifest: manifest.into(),
            checkpoint_every: 0,
        }
    }

    /// Applies the variant's constraints: `mae_only` zeroes `λ_ce`,
    /// `vit_only` disables masking and the reconstruction term.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        match c.variant {
            Variant::Tacmae => {}
            Variant::MaeOnly => c.weights.lambda_ce = 0.0,
            Variant::VitOnly => {
                c.mask_ratio = 0.0;
                c.weights.lambda_rec = 0.0;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub loss_rec: f64,
    pub loss_ce: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss,loss_rec,loss_ce,train_acc,val_acc,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10},{:.10},{:.10},{:.6},{:.6},{:.3}",
            self.epoch, self.loss, self.loss_rec, self.loss_ce, self.train_acc, self.val_acc, self.seconds
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// A labelled image already cut into tokens.
#[derive(Clone, Debug)]
pub struct Sample {
    pub grid: PatchGrid<f64>,
    pub label: usize,
}

pub fn to_samples(images: &[TactileImage], cfg: &ModelConfig, classes: &[usize]) -> Result<Vec<Sample>> {
    images
        .iter()
        .map(|img| {
            if (img.height, img.width, img.channels) != (cfg.image_height, cfg.image_width, cfg.channels) {
                return Err(Error::config(format!(
                    "image {}x{}x{} does not match model input {}x{}x{}",
                    img.height, img.width, img.channels, cfg.image_height, cfg.image_width, cfg.channels
                )));
            }
            let label = classes
                .iter()
                .position(|&c| c == img.label)
                .ok_or_else(|| Error::contract(format!("class {} not in class list", img.label)))?;
            Ok(Sample { grid: patchify(img, cfg.patch_size)?, label })
        })
        .collect()
}

pub fn load_samples(
    manifest: &Manifest,
    split: Split,
    kind: ContactKind,
    cfg: &ModelConfig,
    classes: &[usize],
) -> Result<Vec<Sample>> {
    let images = manifest.load_images(&manifest.select(split, kind))?;
    to_samples(&images, cfg, classes)
}

/// Predicted class index from the full (unmasked) image.
pub fn predict_full(params: &ModelParams<f64>, sample: &Sample) -> Result<usize> {
    let latent = forward_full(params, &sample.grid.tokens)?;
    Ok(classify_latent(params, &latent)?.argmax_row(0))
}

pub fn accuracy_full(params: &ModelParams<f64>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for s in samples {
        if predict_full(params, s)? == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Per-batch statistics.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub loss: f64,
    pub loss_rec: f64,
    pub loss_ce: f64,
    pub correct: usize,
}

/// Mutable training state between steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams<f64>,
    pub adam: AdamState<f64>,
}

/// One optimizer step on a batch. Losses are averaged over the batch before
/// weighting; masks are drawn per image from `(seed, epoch, sample index)`.
pub fn train_step(
    state: &TrainState,
    cfg: &RunConfig,
    samples: &[Sample],
    batch: &[usize],
    epoch: usize,
) -> Result<(TrainState, StepStats)> {
    let p = &state.params;
    let mut g = Graph::new();
    let bound = bind(&mut g, p, |_| true);
    let n = p.config.n_patches();
    let k = p.config.n_classes;
    let mut losses = Vec::with_capacity(batch.len());
    let mut stats = StepStats::default();
    for &i in batch {
        let s = &samples[i];
        let plan = sample_mask(n, cfg.mask_ratio, seed::derive(cfg.seed, &[seed::stream::MASK, epoch as u64, i as u64]))?;
        let nodes = masked_objective(&mut g, p, &bound, &s.grid, &plan, ClassTarget::new(s.label, k)?, cfg.weights)?;
        stats.loss += g.value(nodes.loss).item();
        stats.loss_rec += g.value(nodes.rec).item();
        stats.loss_ce += g.value(nodes.ce).item();
        if g.value(nodes.logits).argmax_row(0) == s.label {
            stats.correct += 1;
        }
        losses.push(nodes.loss);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let total = g.scale(total, 1.0 / batch.len() as f64);
    if !g.value(total).item().is_finite() {
        return Err(Error::NonFiniteLoss { epoch, step: 0 });
    }
    let grads = g.backward(total)?;
    let grad_tensors: Vec<_> = bound.ids.iter().map(|&id| grads.get(id)).collect();
    let decay: Vec<bool> = p.specs.iter().map(|s| s.decays()).collect();
    let names: Vec<String> = p.specs.iter().map(|s| s.name.clone()).collect();
    let (tensors, adam) = adam_step(&p.tensors, &grad_tensors, &state.adam, &cfg.adam, &decay, &names)?;
    Ok((TrainState { params: p.with_tensors(tensors)?, adam }, stats))
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.tmae";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains from a fresh initialization. With `out_dir`, writes
/// `checkpoint.tmae` (final and every `checkpoint_every` epochs) and
/// `metrics.csv`. A non-finite loss aborts the run, leaving the state from
/// the start of the failing epoch as the checkpoint.
pub fn train(
    config: &RunConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let cfg = config.resolved();
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let classes = manifest.classes();
    if classes.len() != cfg.model.n_classes {
        return Err(Error::config(format!(
            "manifest has {} classes, model is configured for {}",
            classes.len(),
            cfg.model.n_classes
        )));
    }
    let train_set = load_samples(&manifest, Split::Train, ContactKind::Adequate, &cfg.model, &classes)?;
    if train_set.is_empty() {
        return Err(Error::config("adequate-contact training split is empty"));
    }
    let val_set = load_samples(&manifest, Split::Val, ContactKind::Adequate, &cfg.model, &classes)?;
    train_on(&cfg, classes, &train_set, &val_set, out_dir, &mut progress)
}

/// [`train`] on samples already in memory.
pub fn train_on(
    config: &RunConfig,
    classes: Vec<usize>,
    train_set: &[Sample],
    val_set: &[Sample],
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let cfg = config.resolved();
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let params = ModelParams::<f64>::init(&cfg.model, cfg.seed)?;
    let adam = AdamState::zeros_like(&params.tensors);
    let mut state = TrainState { params, adam };
    let snapshot = |state: &TrainState, epoch: usize| Checkpoint {
        params: state.params.clone(),
        adam: state.adam.clone(),
        adam_hyper: cfg.adam,
        epoch,
        rng: RngState { seed: cfg.seed, next_epoch: epoch },
        classes: classes.clone(),
    };
    let write = |ck: &Checkpoint, metrics: &[EpochMetrics]| -> Result<()> {
        if let Some(dir) = out_dir {
            ck.save(&dir.join(CHECKPOINT_FILE))?;
            std::fs::write(dir.join(METRICS_FILE), metrics_csv(metrics))?;
        }
        Ok(())
    };

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step_cfg = cfg.clone();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let epoch_start = state.clone();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::stream::SHUFFLE, epoch as u64]));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut totals = StepStats::default();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            step_cfg.adam.lr = cfg.schedule.lr(cfg.adam.lr, epoch * steps_per_epoch + step, total_steps);
            match train_step(&state, &step_cfg, train_set, batch, epoch) {
                Ok((next, s)) => {
                    state = next;
                    totals.loss += s.loss;
                    totals.loss_rec += s.loss_rec;
                    totals.loss_ce += s.loss_ce;
                    totals.correct += s.correct;
                }
                Err(e) => {
                    write(&snapshot(&epoch_start, epoch), &metrics)?;
                    return Err(match e {
                        Error::NonFiniteLoss { epoch, .. } => Error::NonFiniteLoss { epoch, step },
                        other => other,
                    });
                }
            }
        }
        let n = train_set.len() as f64;
        let row = EpochMetrics {
            epoch: epoch + 1,
            loss: totals.loss / n,
            loss_rec: totals.loss_rec / n,
            loss_ce: totals.loss_ce / n,
            train_acc: totals.correct as f64 / n,
            val_acc: accuracy_full(&state.params, val_set)?,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&row);
        metrics.push(row);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            write(&snapshot(&state, epoch + 1), &metrics)?;
        }
    }
    // Hand back exactly what a reload from disk would give.
    let checkpoint = snapshot(&state, cfg.epochs).quantized()?;
    write(&checkpoint, &metrics)?;
    Ok(TrainOutcome { checkpoint, metrics })
}

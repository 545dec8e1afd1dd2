//! Downstream evaluation of pre-trained checkpoints.

pub mod recon;
pub mod sweep;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use recon::{export_reconstructions, ReconGrid, ReconStats};
pub use sweep::{
    ablation, lambda_sweep, mask_ratio_sweep, parse_ratios, Aggregate, PointResult, SweepConfig, SweepData, SweepResult,
    SweepRow,
};

use crate::data::{Manifest, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::{ContactKind, TactileImage};
use crate::model::{bind, encode, forward_full, ModelParams, Part};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::patching::patchify;
use crate::seed;
use crate::tensor::Tensor;
use crate::training::{load_samples, predict_full, Checkpoint, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ZeroShot,
    FineTune,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::ZeroShot => "zero_shot",
            Protocol::FineTune => "fine_tune",
        }
    }
}

/// Accuracy and confusion matrix of one protocol on one data split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub protocol: Protocol,
    pub split: Split,
    pub kind: ContactKind,
    pub n: usize,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub classes: Vec<usize>,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_predictions(
        labels: &[usize],
        predictions: &[usize],
        classes: &[usize],
        protocol: Protocol,
        split: Split,
        kind: ContactKind,
        checkpoint_id: String,
        seed: u64,
    ) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::contract("label and prediction counts differ"));
        }
        let k = classes.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= k || p >= k {
                return Err(Error::contract(format!("class index out of range for {k} classes")));
            }
            confusion[y][p] += 1;
        }
        let n = labels.len();
        let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
        let accuracy = if n == 0 { 0.0 } else { trace as f64 / n as f64 };
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: usize = row.iter().sum();
                if total == 0 { 0.0 } else { row[i] as f64 / total as f64 }
            })
            .collect();
        Ok(Self { checkpoint_id, protocol, split, kind, n, accuracy, per_class, confusion, classes: classes.to_vec(), seed })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Anything that maps a tactile image to a class index. Lets external
/// recognizers run through the same reporting as the pre-trained model.
pub trait Recognizer {
    fn predict(&self, img: &TactileImage) -> Result<usize>;
}

impl Recognizer for ModelParams<f64> {
    fn predict(&self, img: &TactileImage) -> Result<usize> {
        let grid = patchify(img, self.config.patch_size)?;
        predict_full(self, &Sample { grid, label: 0 })
    }
}

/// Runs any recognizer over `images`, whose labels are raw class ids.
pub fn evaluate_recognizer(
    rec: &dyn Recognizer,
    images: &[TactileImage],
    classes: &[usize],
    split: Split,
    kind: ContactKind,
    name: &str,
) -> Result<EvalReport> {
    let mut labels = Vec::with_capacity(images.len());
    let mut preds = Vec::with_capacity(images.len());
    for img in images {
        let y = classes
            .iter()
            .position(|&c| c == img.label)
            .ok_or_else(|| Error::contract(format!("class {} not in class list", img.label)))?;
        labels.push(y);
        preds.push(rec.predict(img)?);
    }
    EvalReport::from_predictions(&labels, &preds, classes, Protocol::ZeroShot, split, kind, name.to_string(), 0)
}

fn check_classes(ck: &Checkpoint, manifest: &Manifest) -> Result<()> {
    let found = manifest.classes();
    if found != ck.classes {
        return Err(Error::contract(format!(
            "checkpoint classes {:?} do not match manifest classes {:?}",
            ck.classes, found
        )));
    }
    Ok(())
}

/// Zero-shot protocol on in-memory samples: full-frame forward pass through
/// the encoder and the trained head, no parameter touched.
pub fn zero_shot_on(ck: &Checkpoint, samples: &[Sample], split: Split, kind: ContactKind) -> Result<EvalReport> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let preds = samples.iter().map(|s| predict_full(&ck.params, s)).collect::<Result<Vec<_>>>()?;
    EvalReport::from_predictions(&labels, &preds, &ck.classes, Protocol::ZeroShot, split, kind, ck.id()?, ck.rng.seed)
}

pub fn zero_shot_eval(ck: &Checkpoint, manifest: &Manifest, split: Split, kind: ContactKind) -> Result<EvalReport> {
    check_classes(ck, manifest)?;
    let samples = load_samples(manifest, split, kind, ck.config(), &ck.classes)?;
    zero_shot_on(ck, &samples, split, kind)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Also update the encoder (full fine-tuning) instead of a linear probe.
    pub full: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { lr: 1e-2, epochs: 100, batch_size: 32, weight_decay: 0.0, seed: 7, full: false }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("invalid probe settings {self:?}")));
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper { lr: self.lr, weight_decay: self.weight_decay, ..AdamHyper::default() }
    }
}

/// Linear classifier `enc_dim → K` over mean-pooled latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
}

impl LinearProbe {
    pub fn zeros(dim: usize, k: usize) -> Self {
        Self { w: Tensor::zeros(vec![dim, k]), b: Tensor::zeros(vec![1, k]) }
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        let k = self.w.cols();
        let mut out = self.b.to_vec();
        for (i, &x) in feature.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&self.w.data()[i * k..(i + 1) * k]) {
                *o += x * w;
            }
        }
        out
    }

    pub fn predict(&self, feature: &[f64]) -> usize {
        let l = self.logits(feature);
        let n = l.len();
        Tensor::new(vec![1, n], l).expect("row").argmax_row(0)
    }
}

/// Mean over tokens of the full-frame latent.
pub fn pooled_feature(params: &ModelParams<f64>, sample: &Sample) -> Result<Vec<f64>> {
    let latent = forward_full(params, &sample.grid.tokens)?;
    let (n, d) = (latent.rows(), latent.cols());
    let mut out = vec![0.0; d];
    for r in 0..n {
        for (o, &v) in out.iter_mut().zip(latent.row(r)) {
            *o += v;
        }
    }
    Ok(out.into_iter().map(|v| v / n as f64).collect())
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

/// Trains a zero-initialized linear probe with Adam on fixed features.
pub fn train_probe(features: &[Vec<f64>], labels: &[usize], k: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(Error::contract("feature and label counts differ"));
    }
    let dim = features.first().map_or(0, Vec::len);
    let mut probe = LinearProbe::zeros(dim, k);
    let mut state = AdamState::zeros_like(&[probe.w.clone(), probe.b.clone()]);
    let names = vec!["probe.w".to_string(), "probe.b".to_string()];
    let hyper = cfg.hyper();
    for epoch in 0..cfg.epochs {
        let order = shuffled(features.len(), seed::derive(cfg.seed, &[seed::stream::PROBE, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let w = g.param(probe.w.clone());
            let b = g.param(probe.b.clone());
            let mut data = Vec::with_capacity(batch.len() * dim);
            for &i in batch {
                data.extend_from_slice(&features[i]);
            }
            let x = g.constant(Tensor::new(vec![batch.len(), dim], data)?);
            let xw = g.matmul(x, w)?;
            let logits = g.add_bias(xw, b)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = g.cross_entropy(logits, &y)?;
            let grads = g.backward(loss)?;
            let (next, s) = adam_step(
                &[probe.w.clone(), probe.b.clone()],
                &[grads.get(w), grads.get(b)],
                &state,
                &hyper,
                &[true, false],
                &names,
            )?;
            state = s;
            let mut it = next.into_iter();
            probe = LinearProbe { w: it.next().expect("w"), b: it.next().expect("b") };
        }
    }
    Ok(probe)
}

/// Encoder tensors after fine-tuning plus the probe on top.
#[derive(Clone, Debug)]
pub struct FineTuned {
    pub probe: LinearProbe,
    /// Updated parameters when `full` fine-tuning was requested.
    pub params: Option<ModelParams<f64>>,
    pub train_features: Vec<Vec<f64>>,
    pub train_labels: Vec<usize>,
}

/// Jointly updates the encoder and the probe (`full` mode).
fn finetune_full(
    params: &ModelParams<f64>,
    train: &[Sample],
    k: usize,
    cfg: &ProbeConfig,
) -> Result<(ModelParams<f64>, LinearProbe)> {
    let dim = params.config.enc_dim;
    let mut params = params.clone();
    let mut probe = LinearProbe::zeros(dim, k);
    let trainable: Vec<bool> = params.specs.iter().map(|s| s.part == Part::Encoder).collect();
    let n_params = params.tensors.len();
    let mut state = {
        let mut all = params.tensors.clone();
        all.push(probe.w.clone());
        all.push(probe.b.clone());
        AdamState::zeros_like(&all)
    };
    let mut decay: Vec<bool> = params.specs.iter().map(|s| s.decays()).collect();
    decay.extend([true, false]);
    let mut names: Vec<String> = params.specs.iter().map(|s| s.name.clone()).collect();
    names.extend(["probe.w".to_string(), "probe.b".to_string()]);
    let all_idx: Vec<usize> = (0..params.config.n_patches()).collect();
    let hyper = cfg.hyper();

    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), seed::derive(cfg.seed, &[seed::stream::PROBE, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = bind(&mut g, &params, |s| s.part == Part::Encoder);
            let w = g.param(probe.w.clone());
            let b = g.param(probe.b.clone());
            let mut pooled = Vec::with_capacity(batch.len());
            for &i in batch {
                let x = g.constant(train[i].grid.tokens.clone());
                let latent = encode(&mut g, &params, &bound, x, &all_idx)?;
                pooled.push(g.mean_rows(latent)?);
            }
            // Stack pooled rows by scattering each into its batch slot.
            let mut stacked = None;
            for (r, &p) in pooled.iter().enumerate() {
                let placed = g.scatter_rows(p, &[r], batch.len())?;
                stacked = Some(match stacked {
                    None => placed,
                    Some(acc) => g.add(acc, placed)?,
                });
            }
            let xw = g.matmul(stacked.expect("non-empty batch"), w)?;
            let logits = g.add_bias(xw, b)?;
            let y: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let loss = g.cross_entropy(logits, &y)?;
            let grads = g.backward(loss)?;

            let mut tensors = params.tensors.clone();
            tensors.push(probe.w.clone());
            tensors.push(probe.b.clone());
            let mut gs: Vec<Tensor<f64>> = bound.ids.iter().map(|&id| grads.get(id)).collect();
            gs.push(grads.get(w));
            gs.push(grads.get(b));
            let (next, s) = adam_step(&tensors, &gs, &state, &hyper, &decay, &names)?;
            state = s;
            // Frozen tensors keep their exact values.
            let mut next = next;
            for (i, t) in params.tensors.iter().enumerate() {
                if !trainable[i] {
                    next[i] = t.clone();
                }
            }
            let bb = next.pop().expect("probe b");
            let ww = next.pop().expect("probe w");
            debug_assert_eq!(next.len(), n_params);
            probe = LinearProbe { w: ww, b: bb };
            params = params.with_tensors(next)?;
        }
    }
    Ok((params, probe))
}

/// Fine-tuning protocol on in-memory samples: train on `train`, report on
/// `test`. The checkpoint itself is never modified.
pub fn finetune_on(
    ck: &Checkpoint,
    train: &[Sample],
    test: &[Sample],
    cfg: &ProbeConfig,
    test_split: Split,
    kind: ContactKind,
) -> Result<(EvalReport, FineTuned)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config(format!("{kind}-contact training split is empty")));
    }
    let k = ck.classes.len();
    let train_labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let (params, probe, train_features) = if cfg.full {
        let (params, probe) = finetune_full(&ck.params, train, k, cfg)?;
        let feats = train.iter().map(|s| pooled_feature(&params, s)).collect::<Result<Vec<_>>>()?;
        (Some(params), probe, feats)
    } else {
        let feats = train.iter().map(|s| pooled_feature(&ck.params, s)).collect::<Result<Vec<_>>>()?;
        let probe = train_probe(&feats, &train_labels, k, cfg)?;
        (None, probe, feats)
    };
    let encoder = params.as_ref().unwrap_or(&ck.params);
    let mut labels = Vec::with_capacity(test.len());
    let mut preds = Vec::with_capacity(test.len());
    for s in test {
        labels.push(s.label);
        preds.push(probe.predict(&pooled_feature(encoder, s)?));
    }
    let report = EvalReport::from_predictions(
        &labels,
        &preds,
        &ck.classes,
        Protocol::FineTune,
        test_split,
        kind,
        ck.id()?,
        cfg.seed,
    )?;
    Ok((report, FineTuned { probe, params, train_features, train_labels }))
}

/// Trains on the partial-contact train split and reports on its test split.
pub fn finetune_eval(ck: &Checkpoint, manifest: &Manifest, cfg: &ProbeConfig) -> Result<(EvalReport, FineTuned)> {
    check_classes(ck, manifest)?;
    let kind = ContactKind::Partial;
    let train = load_samples(manifest, Split::Train, kind, ck.config(), &ck.classes)?;
    let test = load_samples(manifest, Split::Test, kind, ck.config(), &ck.classes)?;
    finetune_on(ck, &train, &test, cfg, Split::Test, kind)
}

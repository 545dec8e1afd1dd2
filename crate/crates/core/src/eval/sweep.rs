//! Grids of independent training runs: masking ratio, loss weights, ablation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{finetune_on, zero_shot_on, EvalReport, ProbeConfig};
use crate::data::{Manifest, Split};
use crate::error::{Error, Result};
use crate::image::ContactKind;
use crate::training::{load_samples, train_on, RunConfig, Sample, Variant};

/// Every split a sweep point touches, loaded once and shared read-only.
#[derive(Clone, Debug)]
pub struct SweepData {
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub partial_train: Vec<Sample>,
    pub partial_test: Vec<Sample>,
}

impl SweepData {
    pub fn load(manifest: &Manifest, base: &RunConfig) -> Result<Self> {
        let classes = manifest.classes();
        let cfg = &base.model;
        let load = |split, kind| load_samples(manifest, split, kind, cfg, &classes);
        Ok(Self {
            train: load(Split::Train, ContactKind::Adequate)?,
            val: load(Split::Val, ContactKind::Adequate)?,
            partial_train: load(Split::Train, ContactKind::Partial)?,
            partial_test: load(Split::Test, ContactKind::Partial)?,
            classes,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub probe: ProbeConfig,
    pub seeds: Vec<u64>,
    /// Worker threads; points run in parallel, each deterministic.
    pub threads: usize,
}

/// One trained run and its two evaluations. A failed run keeps its error
/// and leaves both reports empty.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointResult {
    pub tag: String,
    pub config: RunConfig,
    pub zero_shot: Option<EvalReport>,
    pub fine_tune: Option<EvalReport>,
    pub error: Option<String>,
}

/// Mean and sample standard deviation over the runs that succeeded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    /// Column values identifying the row, e.g. the masking ratio.
    pub key: Vec<String>,
    pub zero_shot: Option<Aggregate>,
    pub fine_tune: Option<Aggregate>,
    /// Indices into [`SweepResult::points`].
    pub points: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub key_columns: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub points: Vec<PointResult>,
}

fn cell(a: Option<Aggregate>) -> [String; 2] {
    match a {
        Some(a) => [format!("{:.6}", a.mean), format!("{:.6}", a.std)],
        None => [String::new(), String::new()],
    }
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = self.key_columns.join(",");
        out.push_str(",zero_shot_acc,zero_shot_std,finetune_acc,finetune_std\n");
        for row in &self.rows {
            let [zm, zs] = cell(row.zero_shot);
            let [fm, fs] = cell(row.fine_tune);
            out.push_str(&format!("{},{zm},{zs},{fm},{fs}\n", row.key.join(",")));
        }
        out
    }

    pub fn row(&self, key: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.key.first().is_some_and(|k| k == key))
    }
}

fn run_point(config: RunConfig, tag: String, data: &SweepData, probe: &ProbeConfig, dir: Option<PathBuf>) -> PointResult {
    let attempt = || -> Result<(EvalReport, EvalReport)> {
        let outcome = train_on(&config, data.classes.clone(), &data.train, &data.val, dir.as_deref(), &mut |_| {})?;
        let ck = &outcome.checkpoint;
        let zs = zero_shot_on(ck, &data.partial_test, Split::Test, ContactKind::Partial)?;
        let (ft, _) = finetune_on(ck, &data.partial_train, &data.partial_test, probe, Split::Test, ContactKind::Partial)?;
        if let Some(d) = &dir {
            zs.save(&d.join("zero_shot.json"))?;
            ft.save(&d.join("fine_tune.json"))?;
        }
        Ok((zs, ft))
    };
    match attempt() {
        Ok((zs, ft)) => PointResult { tag, config, zero_shot: Some(zs), fine_tune: Some(ft), error: None },
        Err(e) => PointResult { tag, config, zero_shot: None, fine_tune: None, error: Some(e.to_string()) },
    }
}

/// Runs every `(key, config)` job and groups the results by key, in the
/// order keys first appear.
fn run_grid(
    key_columns: &[&str],
    jobs: Vec<(Vec<String>, RunConfig)>,
    data: &SweepData,
    cfg: &SweepConfig,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    let tagged: Vec<(String, Vec<String>, RunConfig)> = jobs
        .into_iter()
        .map(|(key, c)| (format!("{}_s{}", key.join("_"), c.seed), key, c))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let points: Vec<PointResult> = pool.install(|| {
        tagged
            .par_iter()
            .map(|(tag, _, c)| {
                let dir = out_dir.map(|d| d.join("points").join(tag));
                run_point(c.clone(), tag.clone(), data, &cfg.probe, dir)
            })
            .collect()
    });

    let mut rows: Vec<SweepRow> = Vec::new();
    for (i, (_, key, _)) in tagged.iter().enumerate() {
        match rows.iter_mut().find(|r| &r.key == key) {
            Some(r) => r.points.push(i),
            None => rows.push(SweepRow { key: key.clone(), zero_shot: None, fine_tune: None, points: vec![i] }),
        }
    }
    for row in &mut rows {
        let pick = |f: fn(&PointResult) -> Option<&EvalReport>| -> Vec<f64> {
            row.points.iter().filter_map(|&i| f(&points[i]).map(|r| r.accuracy)).collect()
        };
        row.zero_shot = Aggregate::of(&pick(|p| p.zero_shot.as_ref()));
        row.fine_tune = Aggregate::of(&pick(|p| p.fine_tune.as_ref()));
    }
    let result = SweepResult { key_columns: key_columns.iter().map(|s| s.to_string()).collect(), rows, points };
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("sweep.csv"), result.to_csv())?;
        std::fs::write(d.join("sweep.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    }
    Ok(result)
}

fn fmt_ratio(r: f64) -> String {
    format!("{r:.2}")
}

/// One TacMAE run per `(ratio, seed)`; all other settings from `cfg.base`.
pub fn mask_ratio_sweep(cfg: &SweepConfig, ratios: &[f64], data: &SweepData, out_dir: Option<&Path>) -> Result<SweepResult> {
    if ratios.is_empty() {
        return Err(Error::config("no masking ratios given"));
    }
    for w in ratios.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::config("masking ratios must be strictly increasing"));
        }
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::config(format!("masking ratio {r} outside (0, 1)")));
    }
    let mut jobs = Vec::new();
    for &r in ratios {
        for &s in &cfg.seeds {
            jobs.push((vec![fmt_ratio(r)], RunConfig { mask_ratio: r, seed: s, ..cfg.base.clone() }));
        }
    }
    run_grid(&["ratio"], jobs, data, cfg, out_dir)
}

/// Grid over the two loss weights.
pub fn lambda_sweep(
    cfg: &SweepConfig,
    lambda_rec: &[f64],
    lambda_ce: &[f64],
    data: &SweepData,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    let mut jobs = Vec::new();
    for &lr in lambda_rec {
        for &lc in lambda_ce {
            for &s in &cfg.seeds {
                let mut c = RunConfig { seed: s, ..cfg.base.clone() };
                c.weights.lambda_rec = lr;
                c.weights.lambda_ce = lc;
                jobs.push((vec![format!("{lr}"), format!("{lc}")], c));
            }
        }
    }
    run_grid(&["lambda_rec", "lambda_ce"], jobs, data, cfg, out_dir)
}

/// The three variants under identical settings and seeds.
pub fn ablation(cfg: &SweepConfig, data: &SweepData, out_dir: Option<&Path>) -> Result<SweepResult> {
    let mut jobs = Vec::new();
    for v in [Variant::Tacmae, Variant::MaeOnly, Variant::VitOnly] {
        for &s in &cfg.seeds {
            jobs.push((vec![v.as_str().to_string()], RunConfig { variant: v, seed: s, ..cfg.base.clone() }));
        }
    }
    run_grid(&["variant"], jobs, data, cfg, out_dir)
}

/// Parses `start:stop:step` (inclusive of `stop` up to rounding) or a
/// comma-separated list.
pub fn parse_ratios(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::config(format!("cannot parse ratios `{spec}`"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = spec.split(':').collect();
    let ratios = match parts.as_slice() {
        [start, stop, step] => {
            let (a, b, h) = (num(start)?, num(stop)?, num(step)?);
            if !(h > 0.0) || b < a {
                return Err(bad());
            }
            let n = ((b - a) / h + 1e-9).floor() as usize;
            // Round to the step's precision so 0.1 + 2·0.1 prints as 0.3.
            (0..=n).map(|i| ((a + i as f64 * h) * 1e9).round() / 1e9).collect()
        }
        [_] => spec.split(',').map(num).collect::<Result<Vec<_>>>()?,
        _ => return Err(bad()),
    };
    if ratios.is_empty() {
        return Err(bad());
    }
    Ok(ratios)
}

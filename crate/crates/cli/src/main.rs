//! `tacmae`: dataset generation, pre-training, evaluation, sweeps and
//! reconstruction grids from one binary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tacmae_core::data::{build_dataset, DatasetConfig, Manifest, Split};
use tacmae_core::eval::{
    ablation, export_reconstructions, finetune_eval, lambda_sweep, mask_ratio_sweep, parse_ratios, zero_shot_eval,
    ProbeConfig, SweepConfig, SweepData,
};
use tacmae_core::image::ContactKind;
use tacmae_core::model::{LossWeights, ModelConfig};
use tacmae_core::optim::AdamHyper;
use tacmae_core::training::{self, Checkpoint, LrSchedule, RunConfig, Variant};

const RUN_FILE: &str = "run.json";

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[command(name = "tacmae", version, about = "Masked autoencoder pre-training for tactile texture images")]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Directory receiving all artifacts of the command.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Re-run the command recorded in a run.json.
    #[arg(long)]
    #[serde(skip)]
    replay: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate the synthetic tactile texture dataset.
    GenData(GenDataArgs),
    /// Pre-train a model on adequate-contact images.
    Train(TrainArgs),
    /// Evaluate a checkpoint (zero-shot and/or linear probe).
    Eval(EvalArgs),
    /// Train and evaluate over masking ratios, loss weights or variants.
    Sweep(SweepArgs),
    /// Export original | masked | reconstruction grids.
    Reconstruct(ReconstructArgs),
    /// Print a checkpoint's header and parameter norms.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Images per class and contact kind.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct TrainingFlags {
    #[arg(long, default_value = "tacmae")]
    variant: Variant,
    #[arg(long, default_value_t = 0.7)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// `constant` or `cosine`.
    #[arg(long, default_value = "constant")]
    lr_schedule: LrSchedule,
    #[arg(long, default_value_t = 1.0)]
    lambda_rec: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda_ce: f64,
    /// JSON file with a model configuration (defaults to the desk model).
    #[arg(long)]
    model_config: Option<PathBuf>,
}

impl TrainingFlags {
    fn run_config(&self, manifest: &Path, seed: u64) -> Result<RunConfig, String> {
        let model = match &self.model_config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                serde_json::from_str::<ModelConfig>(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => ModelConfig::default(),
        };
        Ok(RunConfig {
            variant: self.variant,
            mask_ratio: self.mask_ratio,
            weights: LossWeights { lambda_rec: self.lambda_rec, lambda_ce: self.lambda_ce },
            adam: AdamHyper { lr: self.lr, weight_decay: self.weight_decay, ..AdamHyper::default() },
            schedule: self.lr_schedule,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            model,
            manifest: manifest.to_path_buf(),
            checkpoint_every: 0,
        })
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ProbeFlags {
    #[arg(long, default_value_t = 1e-2)]
    probe_lr: f64,
    #[arg(long, default_value_t = 100)]
    probe_epochs: usize,
    #[arg(long, default_value_t = 32)]
    probe_batch_size: usize,
    /// Fine-tune the encoder together with the probe.
    #[arg(long)]
    full: bool,
}

impl ProbeFlags {
    fn config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            lr: self.probe_lr,
            epochs: self.probe_epochs,
            batch_size: self.probe_batch_size,
            weight_decay: 0.0,
            seed,
            full: self.full,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct TrainArgs {
    #[arg(long, required = true)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingFlags,
    /// Extra checkpoint every this many epochs.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ProtocolArg {
    ZeroShot,
    FineTune,
    Both,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long, required = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, required = true)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    protocol: ProtocolArg,
    /// Split for zero-shot evaluation.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Contact kind for zero-shot evaluation.
    #[arg(long, default_value = "partial")]
    kind: ContactKind,
    #[command(flatten)]
    probe: ProbeFlags,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SweepArgs {
    #[arg(long, required = true)]
    manifest: Option<PathBuf>,
    /// Masking ratios as `start:stop:step` or a comma-separated list.
    #[arg(long, default_value = "0.1:0.9:0.1")]
    ratios: String,
    /// Number of seeds per point, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Sweep the loss weights instead, e.g. `--lambda-grid 1:0,0.001,0.01,0.1`.
    #[arg(long, conflicts_with = "ablation")]
    lambda_grid: Option<String>,
    /// Compare the three variants instead of sweeping ratios.
    #[arg(long)]
    ablation: bool,
    #[command(flatten)]
    training: TrainingFlags,
    #[command(flatten)]
    probe: ProbeFlags,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ReconstructArgs {
    #[arg(long, required = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, required = true)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "0.1,0.7,0.9")]
    ratios: String,
    /// Number of images, taken in manifest order from the chosen split.
    #[arg(long, default_value_t = 4)]
    images: usize,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value = "adequate")]
    kind: ContactKind,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct InspectArgs {
    #[arg(long, required = true)]
    checkpoint: Option<PathBuf>,
}

type Outcome = Result<(), String>;

fn required(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("clap enforces required flags")
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(err)?;
    std::fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Outcome {
    let cfg = DatasetConfig { classes: a.classes, per_class: a.per_class, size: a.size, seed: cli.seed };
    let m = build_dataset(&cfg, &cli.out_dir).map_err(err)?;
    eprintln!("wrote {} images to {}", m.rows.len(), cli.out_dir.display());
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Outcome {
    let mut cfg = a.training.run_config(required(&a.manifest), cli.seed)?;
    cfg.checkpoint_every = a.checkpoint_every;
    training::train(&cfg, Some(&cli.out_dir), |m| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  rec {:.5}  ce {:.4}  train {:.3}  val {:.3}  ({:.1}s)",
            m.epoch, m.loss, m.loss_rec, m.loss_ce, m.train_acc, m.val_acc, m.seconds
        )
    })
    .map_err(err)?;
    eprintln!("checkpoint {}", cli.out_dir.join(training::CHECKPOINT_FILE).display());
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvalArgs) -> Outcome {
    let ck = Checkpoint::load(required(&a.checkpoint)).map_err(err)?;
    let manifest = Manifest::load(required(&a.manifest)).map_err(err)?;
    if matches!(a.protocol, ProtocolArg::ZeroShot | ProtocolArg::Both) {
        let r = zero_shot_eval(&ck, &manifest, a.split, a.kind).map_err(err)?;
        r.save(&cli.out_dir.join("zero_shot.json")).map_err(err)?;
        println!("zero_shot {} {}: {:.4} ({} images)", a.kind, a.split.as_str(), r.accuracy, r.n);
    }
    if matches!(a.protocol, ProtocolArg::FineTune | ProtocolArg::Both) {
        let (r, _) = finetune_eval(&ck, &manifest, &a.probe.config(cli.seed)).map_err(err)?;
        r.save(&cli.out_dir.join("fine_tune.json")).map_err(err)?;
        println!("fine_tune partial test: {:.4} ({} images)", r.accuracy, r.n);
    }
    Ok(())
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| format!("cannot parse `{v}` in `{s}`"))).collect()
}

fn threads() -> usize {
    std::env::var("TACMAE_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Outcome {
    let base = a.training.run_config(required(&a.manifest), cli.seed)?;
    let manifest = Manifest::load(&base.manifest).map_err(err)?;
    let data = SweepData::load(&manifest, &base).map_err(err)?;
    let cfg = SweepConfig {
        base,
        probe: a.probe.config(cli.seed),
        seeds: (0..a.seeds).map(|i| cli.seed + i).collect(),
        threads: threads(),
    };
    let out = Some(cli.out_dir.as_path());
    let result = if a.ablation {
        ablation(&cfg, &data, out)
    } else if let Some(grid) = &a.lambda_grid {
        let (rec, ce) = grid.split_once(':').ok_or_else(|| format!("--lambda-grid expects `rec,..:ce,..`, got `{grid}`"))?;
        lambda_sweep(&cfg, &parse_list(rec)?, &parse_list(ce)?, &data, out)
    } else {
        let ratios = parse_ratios(&a.ratios).map_err(err)?;
        mask_ratio_sweep(&cfg, &ratios, &data, out)
    }
    .map_err(err)?;
    print!("{}", result.to_csv());
    for p in &result.points {
        if let Some(e) = &p.error {
            eprintln!("point {} failed: {e}", p.tag);
        }
    }
    Ok(())
}

fn reconstruct(cli: &Cli, a: &ReconstructArgs) -> Outcome {
    let ck = Checkpoint::load(required(&a.checkpoint)).map_err(err)?;
    let manifest = Manifest::load(required(&a.manifest)).map_err(err)?;
    let rows = manifest.select(a.split, a.kind);
    let rows: Vec<_> = rows.into_iter().take(a.images).collect();
    let images = manifest.load_images(&rows).map_err(err)?;
    let ratios = parse_ratios(&a.ratios).map_err(err)?;
    let grid = export_reconstructions(&ck.params, &images, &ratios, cli.seed).map_err(err)?;
    grid.write_pgm(&cli.out_dir.join("reconstructions.pgm")).map_err(err)?;
    write_json(&cli.out_dir.join("reconstructions.json"), &grid.stats)?;
    for s in &grid.stats {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
        println!("image {} r={:.2}: masked mse {} vs mean baseline {}", s.image, s.ratio, f(s.masked_mse), f(s.baseline_mse));
    }
    Ok(())
}

fn inspect(cli: &Cli, a: &InspectArgs) -> Outcome {
    let path = required(&a.checkpoint);
    let ck = Checkpoint::load(path).map_err(err)?;
    let mut summary = ck.summary();
    summary["id"] = serde_json::Value::String(ck.id().map_err(err)?);
    write_json(&cli.out_dir.join("inspect.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(err)?);
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    let command = cli.command.as_ref().ok_or("no subcommand given")?;
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| format!("{}: {e}", cli.out_dir.display()))?;
    write_json(&cli.out_dir.join(RUN_FILE), cli)?;
    match command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => evaluate(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Reconstruct(a) => reconstruct(cli, a),
        Command::Inspect(a) => inspect(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match &cli.replay {
        Some(_) if cli.command.is_some() => {
            eprintln!("error: --replay cannot be combined with a subcommand");
            return ExitCode::from(1);
        }
        Some(path) => {
            let loaded = std::fs::read_to_string(path)
                .map_err(err)
                .and_then(|t| serde_json::from_str::<Cli>(&t).map_err(err));
            match loaded {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: cannot replay {}: {e}", path.display());
                    return ExitCode::from(1);
                }
            }
        }
        None if cli.command.is_none() => {
            eprintln!("error: a subcommand is required (try --help)");
            return ExitCode::from(1);
        }
        None => cli,
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

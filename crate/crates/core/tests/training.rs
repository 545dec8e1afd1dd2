use tacmae_core::data::dataset::generate_sample;
use tacmae_core::data::default_classes;
use tacmae_core::image::ContactKind;
use tacmae_core::model::{ModelConfig, ModelParams, Part};
use tacmae_core::training::{
    metrics_csv, to_samples, train_on, Checkpoint, LrSchedule, RunConfig, Sample, Variant, CHECKPOINT_FILE,
};
use tacmae_core::Error;

const CLASSES: usize = 3;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::new("unused");
    cfg.model = ModelConfig { enc_depth: 1, dec_depth: 1, n_classes: CLASSES, ..ModelConfig::default() };
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 11;
    cfg
}

fn samples(per_class: usize, offset: usize) -> Vec<Sample> {
    let classes = default_classes(CLASSES).unwrap();
    let images: Vec<_> = classes
        .iter()
        .flat_map(|c| (0..per_class).map(move |i| generate_sample(c, ContactKind::Adequate, offset + i, 32, 3).unwrap()))
        .collect();
    to_samples(&images, &tiny_config().model, &[0, 1, 2]).unwrap()
}

fn run(cfg: &RunConfig, train: &[Sample], val: &[Sample]) -> tacmae_core::training::TrainOutcome {
    train_on(cfg, (0..CLASSES).collect(), train, val, None, &mut |_| {}).unwrap()
}

fn without_seconds(csv: &str) -> String {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0).collect::<Vec<_>>().join("\n")
}

#[test]
fn zero_epochs_returns_initialization() {
    let mut cfg = tiny_config();
    cfg.epochs = 0;
    let out = run(&cfg, &samples(2, 0), &[]);
    assert!(out.metrics.is_empty());
    let init = ModelParams::<f64>::init(&cfg.model, cfg.seed).unwrap();
    let expected = Checkpoint { params: init, ..out.checkpoint.clone() }.quantized().unwrap();
    assert_eq!(out.checkpoint.params, expected.params);
    assert_eq!(out.checkpoint.adam.step, 0);
}

#[test]
fn same_seed_gives_identical_metrics_and_checkpoint() {
    let cfg = tiny_config();
    let (train, val) = (samples(4, 0), samples(2, 100));
    let a = run(&cfg, &train, &val);
    let b = run(&cfg, &train, &val);
    assert_eq!(a.metrics.len(), 2);
    assert_eq!(without_seconds(&metrics_csv(&a.metrics)), without_seconds(&metrics_csv(&b.metrics)));
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());

    let mut other = cfg.clone();
    other.seed = 12;
    assert_ne!(run(&other, &train, &val).checkpoint.params, a.checkpoint.params);
}

#[test]
fn mae_only_matches_tacmae_without_classification_term() {
    let (train, val) = (samples(4, 0), samples(1, 100));
    let mut mae = tiny_config();
    mae.variant = Variant::MaeOnly;
    let mut zero_ce = tiny_config();
    zero_ce.weights.lambda_ce = 0.0;
    let a = run(&mae, &train, &val).checkpoint.params;
    let b = run(&zero_ce, &train, &val).checkpoint.params;
    for ((spec, x), y) in a.specs.iter().zip(&a.tensors).zip(&b.tensors) {
        if spec.part != Part::Head {
            let same = x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            assert!(same, "{} diverged", spec.name);
        }
    }
}

#[test]
fn vit_only_logs_no_reconstruction() {
    let mut cfg = tiny_config();
    cfg.variant = Variant::VitOnly;
    let out = run(&cfg, &samples(3, 0), &samples(1, 100));
    assert!(out.metrics.iter().all(|m| m.loss_rec == 0.0 && m.loss_ce > 0.0));
    assert!(out.metrics.iter().all(|m| (m.loss - cfg.weights.lambda_ce * m.loss_ce).abs() < 1e-12));
}

#[test]
fn cosine_schedule_changes_trajectory_and_ends_near_zero() {
    assert_eq!(LrSchedule::Constant.lr(1e-3, 5, 10), 1e-3);
    assert_eq!(LrSchedule::Cosine.lr(1e-3, 0, 10), 1e-3);
    assert!((LrSchedule::Cosine.lr(1e-3, 5, 10) - 5e-4).abs() < 1e-15);
    assert!(LrSchedule::Cosine.lr(1e-3, 9, 10) < 1e-4);

    let (train, val) = (samples(3, 0), samples(1, 100));
    let mut cosine = tiny_config();
    cosine.schedule = LrSchedule::Cosine;
    assert_ne!(run(&cosine, &train, &val).checkpoint.params, run(&tiny_config(), &train, &val).checkpoint.params);
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.epochs = 3;
    cfg.batch_size = 64;
    let mut train = samples(2, 0);
    let val = samples(1, 100);

    // One poisoned image makes the very first batch non-finite.
    let mut one = cfg.clone();
    one.epochs = 1;
    let after_one = run(&one, &train, &val);

    let poisoned = train[1].grid.tokens.map(|_| f64::NAN);
    train[1].grid.tokens = poisoned;
    let err = train_on(&cfg, (0..CLASSES).collect(), &train, &val, Some(dir.path()), &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, step: 0 }), "{err}");
    let saved = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved.epoch, 0);
    let init = ModelParams::<f64>::init(&cfg.model, cfg.seed).unwrap();
    assert_eq!(saved.params, Checkpoint { params: init, ..saved.clone() }.quantized().unwrap().params);
    assert_ne!(saved.params, after_one.checkpoint.params);
}

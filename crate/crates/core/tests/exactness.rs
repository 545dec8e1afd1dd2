use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tacmae_core::masking::{mask_count, sample_mask, MaskPlan};
use tacmae_core::model::{
    classification_loss, objective_value, reconstruction_loss, total_loss, ClassTarget, LossWeights, ModelConfig,
    ModelParams,
};
use tacmae_core::optim::AdamState;
use tacmae_core::patching::{patchify, unpatchify, PatchGrid};
use tacmae_core::training::{Checkpoint, RngState};
use tacmae_core::image::TactileImage;
use tacmae_core::tensor::Tensor;

fn random_grid(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PatchGrid<f64> {
    let side = (n as f64).sqrt() as usize;
    PatchGrid {
        patch_size: (d as f64).sqrt() as usize,
        channels: 1,
        grid_rows: side,
        grid_cols: n / side,
        tokens: Tensor::from_fn(vec![n, d], |_| rng.random_range(0.0..1.0)),
    }
}

/// Masked reconstruction error written as two explicit loops over masked patches and pixels.
fn rec_oracle(x: &PatchGrid<f64>, xhat: &Tensor<f64>, masked: &[usize]) -> f64 {
    if masked.is_empty() {
        return 0.0;
    }
    let d = x.patch_dim();
    let mut total = 0.0;
    for &p in masked {
        let mut patch = 0.0;
        for k in 0..d {
            let e = x.tokens.data()[p * d + k] - xhat.data()[p * d + k];
            patch += e * e;
        }
        total += patch;
    }
    total / masked.len() as f64
}

/// Cross-entropy as a naive softmax followed by the log of the true-class probability.
fn ce_oracle(logits: &[f64], class: usize) -> f64 {
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
    let mut loss = 0.0;
    for (i, p) in probs.iter().enumerate() {
        let y = if i == class { 1.0 } else { 0.0 };
        loss -= y * p.ln();
    }
    loss
}

#[test]
fn reconstruction_loss_matches_two_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..200 {
        let grid = random_grid(&mut rng, 16, 64);
        let xhat = Tensor::from_fn(vec![16, 64], |_| rng.random_range(-0.5..1.5));
        let r = rng.random_range(0.0..0.95);
        let plan = sample_mask(16, r, case).unwrap();
        let got = reconstruction_loss(&grid, &xhat, &plan).unwrap();
        let want = rec_oracle(&grid, &xhat, &plan.masked_idx);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "case {case}: {got} vs {want}");
    }
}

#[test]
fn reconstruction_loss_ignores_visible_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = random_grid(&mut rng, 16, 64);
    let xhat = Tensor::from_fn(vec![16, 64], |_| rng.random_range(0.0..1.0));
    let plan = sample_mask(16, 0.5, 9).unwrap();
    let base = reconstruction_loss(&grid, &xhat, &plan).unwrap();
    let mut moved = xhat.to_vec();
    for &v in &plan.visible_idx {
        for k in 0..64 {
            moved[v * 64 + k] += 10.0;
        }
    }
    let moved = Tensor::new(vec![16, 64], moved).unwrap();
    assert_eq!(reconstruction_loss(&grid, &moved, &plan).unwrap(), base);
}

#[test]
fn cross_entropy_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-8.0..8.0)).collect();
        let class = rng.random_range(0..10);
        let got = classification_loss(&Tensor::new(vec![1, 10], logits.clone()).unwrap(), ClassTarget::new(class, 10).unwrap())
            .unwrap();
        assert!((got - ce_oracle(&logits, class)).abs() < 1e-10);
    }
}

#[test]
fn joint_objective_decomposes_exactly() {
    let cfg = ModelConfig { enc_depth: 1, dec_depth: 1, ..ModelConfig::default() };
    let params = ModelParams::<f64>::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = random_grid(&mut rng, 16, 64);
    for (i, w) in [
        LossWeights::default(),
        LossWeights { lambda_rec: 0.3, lambda_ce: 2.0 },
        LossWeights { lambda_rec: 1.0, lambda_ce: 0.0 },
    ]
    .into_iter()
    .enumerate()
    {
        let plan = sample_mask(16, 0.7, i as u64).unwrap();
        let (l, rec, ce) = objective_value(&params, &grid, &plan, ClassTarget::new(3, 10).unwrap(), w).unwrap();
        // Zero up to rounding of the two products.
        assert!((l - w.lambda_rec * rec - w.lambda_ce * ce).abs() <= 4.0 * f64::EPSILON * l.abs());
        assert!((total_loss(rec, ce, w) - l).abs() <= 4.0 * f64::EPSILON * l.abs());
    }
}

#[test]
fn mask_cardinality_over_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let n = rng.random_range(1..=64);
        let r: f64 = rng.random_range(0.0..1.0);
        let plan = match sample_mask(n, r, rng.random()) {
            Ok(p) => p,
            // Only ratios that would leave nothing visible are refused.
            Err(_) => {
                assert_eq!(mask_count(n, r), n);
                continue;
            }
        };
        assert_eq!(plan.n_masked(), (r * n as f64).floor() as usize);
        assert_eq!(plan.n_masked() + plan.n_visible(), n);
    }
}

#[test]
fn patchify_roundtrip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (h, w, c, p) in [(32, 32, 1, 8), (16, 24, 3, 4), (8, 8, 1, 8), (12, 6, 2, 2)] {
        let px: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = TactileImage::new(h, w, c, px.clone(), 0).unwrap();
        let grid = patchify(&img, p).unwrap();
        let back = unpatchify(&grid, h, w, c).unwrap();
        assert!(back.iter().zip(&px).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let cfg = ModelConfig::default();
    let params = ModelParams::<f64>::init(&cfg, 8).unwrap();
    let mut adam = AdamState::zeros_like(&params.tensors);
    adam.step = 17;
    adam.m = params.tensors.iter().map(|t| t.map(|v| v * 0.5)).collect();
    let ck = Checkpoint {
        params,
        adam,
        adam_hyper: Default::default(),
        epoch: 3,
        rng: RngState { seed: 8, next_epoch: 3 },
        classes: (0..10).collect(),
    };
    let bytes = ck.to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    assert_eq!(loaded, ck.quantized().unwrap());
    assert_eq!(loaded.quantized().unwrap(), loaded);
}

#[test]
fn identity_plan_has_no_masked_patches() {
    let plan = MaskPlan::identity(16);
    assert_eq!(plan.n_masked(), 0);
    assert_eq!(sample_mask(16, 0.0, 3).unwrap().visible_idx, plan.visible_idx);
}

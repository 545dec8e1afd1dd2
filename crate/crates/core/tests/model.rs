use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tacmae_core::graph::Graph;
use tacmae_core::masking::sample_mask;
use tacmae_core::model::{
    bind, classify, classify_latent, encode, encode_tokens, forward_full, masked_objective, ClassTarget, LossWeights,
    ModelConfig, ModelParams, ParamKind,
};
use tacmae_core::patching::PatchGrid;
use tacmae_core::tensor::Tensor;

fn small() -> ModelConfig {
    ModelConfig { enc_depth: 2, dec_depth: 1, ..ModelConfig::default() }
}

fn random_tokens(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![cfg.n_patches(), cfg.patch_dim()], |_| rng.random_range(0.0..1.0))
}

fn grid_of(cfg: &ModelConfig, tokens: Tensor<f64>) -> PatchGrid<f64> {
    PatchGrid {
        patch_size: cfg.patch_size,
        channels: cfg.channels,
        grid_rows: cfg.grid_rows(),
        grid_cols: cfg.grid_cols(),
        tokens,
    }
}

fn rows_of(t: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn mask_frequency_is_uniform_over_seeds() {
    let mut counts = [0usize; 16];
    let trials = 10_000;
    for seed in 0..trials {
        for i in sample_mask(16, 0.7, seed).unwrap().masked_idx {
            counts[i] += 1;
        }
    }
    for (i, c) in counts.iter().enumerate() {
        let freq = *c as f64 / trials as f64;
        assert!((freq - 11.0 / 16.0).abs() < 0.02, "patch {i} masked with frequency {freq}");
    }
}

#[test]
fn encoder_output_shape_follows_visible_count() {
    let cfg = small();
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let tokens = random_tokens(&cfg, 1);
    for v in [1, 5, 16] {
        let idx: Vec<usize> = (0..v).collect();
        let latent = encode_tokens(&params, &rows_of(&tokens, &idx), &idx).unwrap();
        assert_eq!(latent.shape(), &[v, cfg.enc_dim]);
    }
    assert!(encode_tokens(&params, &rows_of(&tokens, &[0]), &[16]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_ties_rows_to_grid_positions(seed in any::<u64>(), r in 0.0f64..0.9) {
        let cfg = small();
        let params = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let tokens = random_tokens(&cfg, seed);
        let plan = sample_mask(16, r, seed).unwrap();
        let idx = plan.visible_idx.clone();
        let base = encode_tokens(&params, &rows_of(&tokens, &idx), &idx).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut perm: Vec<usize> = (0..idx.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<usize> = perm.iter().map(|&k| idx[k]).collect();
        let out = encode_tokens(&params, &rows_of(&tokens, &shuffled), &shuffled).unwrap();
        for (slot, &k) in perm.iter().enumerate() {
            for (a, b) in out.row(slot).iter().zip(base.row(k)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logits_ignore_latent_row_order(seed in any::<u64>(), rows in 1usize..16) {
        let cfg = small();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = Tensor::from_fn(vec![rows, cfg.enc_dim], |_| rng.random_range(-2.0..2.0));
        let reversed: Vec<usize> = (0..rows).rev().collect();
        let a = classify_latent(&params, &latent).unwrap();
        let b = classify_latent(&params, &rows_of(&latent, &reversed)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

// Position embeddings still reach the latent, so with every weight zeroed the
// rows depend on grid position alone and not on the pixels.
#[test]
fn zero_weights_make_latent_independent_of_pixels() {
    let cfg = small();
    let params = ModelParams::<f64>::init(&cfg, 4).unwrap();
    let zeroed: Vec<Tensor<f64>> = params
        .specs
        .iter()
        .zip(&params.tensors)
        .map(|(s, t)| if s.kind == ParamKind::Weight { t.map(|_| 0.0) } else { t.clone() })
        .collect();
    let params = params.with_tensors(zeroed).unwrap();
    let a = forward_full(&params, &random_tokens(&cfg, 4)).unwrap();
    let b = forward_full(&params, &random_tokens(&cfg, 40)).unwrap();
    assert_eq!(a, b);

    // Dropping the position tables as well leaves identical rows.
    let mut flat = params.clone();
    flat.enc_pos = flat.enc_pos.map(|_| 0.0);
    let latent = forward_full(&flat, &random_tokens(&cfg, 4)).unwrap();
    for i in 1..latent.rows() {
        assert_eq!(latent.row(i), latent.row(0));
    }
}

#[test]
fn zero_head_gives_uniform_softmax() {
    let cfg = small();
    let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
    let head = [params.layout.cls_fc1.w, params.layout.cls_fc1.b, params.layout.cls_fc2.w, params.layout.cls_fc2.b];
    let mut tensors = params.tensors.clone();
    for i in head {
        tensors[i] = tensors[i].map(|_| 0.0);
    }
    let params = params.with_tensors(tensors).unwrap();
    let latent = forward_full(&params, &random_tokens(&cfg, 5)).unwrap();
    let logits = classify_latent(&params, &latent).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_visible_token_pools_to_itself() {
    let cfg = small();
    let params = ModelParams::<f64>::init(&cfg, 6).unwrap();
    let row = Tensor::from_fn(vec![1, cfg.enc_dim], |i| (i as f64 * 0.37).sin());
    let twice = Tensor::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec()]).unwrap();
    assert_eq!(classify_latent(&params, &row).unwrap(), classify_latent(&params, &twice).unwrap());
}

#[test]
fn full_forward_is_encoding_of_every_token() {
    let cfg = small();
    let params = ModelParams::<f64>::init(&cfg, 7).unwrap();
    let tokens = random_tokens(&cfg, 7);
    let all: Vec<usize> = (0..16).collect();
    let full = forward_full(&params, &tokens).unwrap();
    assert_eq!(full, encode_tokens(&params, &tokens, &all).unwrap());
    assert_eq!(full, forward_full(&params, &tokens).unwrap());
}

#[test]
fn masked_path_logits_differ_from_full_forward() {
    let cfg = small();
    let params = ModelParams::<f64>::init(&cfg, 8).unwrap();
    let tokens = random_tokens(&cfg, 8);
    let grid = grid_of(&cfg, tokens.clone());
    let plan = sample_mask(16, 0.7, 8).unwrap();
    let target = ClassTarget::new(0, cfg.n_classes).unwrap();

    let mut g = Graph::new();
    let b = bind(&mut g, &params, |_| false);
    let nodes = masked_objective(&mut g, &params, &b, &grid, &plan, target, LossWeights::default()).unwrap();
    let masked = g.value(nodes.logits).clone();

    // Same graph pieces on every token reproduce the downstream logits.
    let mut g = Graph::new();
    let b = bind(&mut g, &params, |_| false);
    let x = g.constant(tokens.clone());
    let all: Vec<usize> = (0..16).collect();
    let latent = encode(&mut g, &params, &b, x, &all).unwrap();
    let logits = classify(&mut g, &params, &b, latent).unwrap();
    let full = classify_latent(&params, &forward_full(&params, &tokens).unwrap()).unwrap();
    assert_eq!(g.value(logits), &full);
    assert_ne!(masked, full);
}

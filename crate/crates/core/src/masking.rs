//! Random patch masking and the gather/scatter bookkeeping around it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::patching::PatchGrid;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

/// Which patches of an `N`-token grid are hidden from the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_patches: usize,
    /// Sorted ascending.
    pub masked_idx: Vec<usize>,
    /// Sorted ascending.
    pub visible_idx: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    /// Everything visible.
    pub fn identity(n_patches: usize) -> Self {
        Self {
            n_patches,
            masked_idx: Vec::new(),
            visible_idx: (0..n_patches).collect(),
            ratio: 0.0,
            seed: 0,
        }
    }

    pub fn n_masked(&self) -> usize {
        self.masked_idx.len()
    }

    pub fn n_visible(&self) -> usize {
        self.visible_idx.len()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked_idx.binary_search(&i).is_ok()
    }
}

/// `floor(r·N)`.
pub fn mask_count(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64).floor() as usize
}

/// Masks `floor(r·N)` patches chosen uniformly without replacement: a seeded
/// Fisher–Yates shuffle of `0..N`, keeping the first `floor(r·N)` entries.
pub fn sample_mask(n_patches: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n_masked = mask_count(n_patches, ratio);
    if n_masked >= n_patches {
        return Err(Error::config(format!(
            "mask ratio {ratio} leaves no visible token among {n_patches}"
        )));
    }
    let mut perm: Vec<usize> = (0..n_patches).collect();
    let mut rng = seed::rng(seed);
    for i in (1..n_patches).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut masked_idx = perm[..n_masked].to_vec();
    let mut visible_idx = perm[n_masked..].to_vec();
    masked_idx.sort_unstable();
    visible_idx.sort_unstable();
    Ok(MaskPlan { n_patches, masked_idx, visible_idx, ratio, seed })
}

fn check_plan<S: Scalar>(grid: &PatchGrid<S>, plan: &MaskPlan) -> Result<()> {
    if grid.n_patches() != plan.n_patches {
        return Err(Error::contract(format!(
            "mask plan covers {} patches, grid has {}",
            plan.n_patches,
            grid.n_patches()
        )));
    }
    Ok(())
}

/// Tokens at the visible indices, ascending.
pub fn gather_visible<S: Scalar>(grid: &PatchGrid<S>, plan: &MaskPlan) -> Result<Tensor<S>> {
    check_plan(grid, plan)?;
    let d = grid.patch_dim();
    let mut data = Vec::with_capacity(plan.n_visible() * d);
    for &i in &plan.visible_idx {
        data.extend_from_slice(grid.token(i));
    }
    Tensor::new(vec![plan.n_visible(), d], data)
}

/// Graph form of [`scatter_with_mask_tokens`]: visible positions take their
/// latent rows, masked positions all take the one shared `mask_token`.
pub fn scatter_with_mask_tokens_node<S: Scalar>(
    g: &mut Graph<S>,
    latent: NodeId,
    plan: &MaskPlan,
    mask_token: NodeId,
) -> Result<NodeId> {
    let rows = g.value(latent).rows();
    if rows != plan.n_visible() {
        return Err(Error::contract(format!(
            "latent has {rows} rows, plan has {} visible tokens",
            plan.n_visible()
        )));
    }
    let d = g.value(latent).cols();
    if g.value(mask_token).len() != d {
        return Err(Error::Dimension {
            op: "scatter_with_mask_tokens",
            lhs: g.shape(latent).to_vec(),
            rhs: g.shape(mask_token).to_vec(),
        });
    }
    let placed = g.scatter_rows(latent, &plan.visible_idx, plan.n_patches)?;
    if plan.masked_idx.is_empty() {
        return Ok(placed);
    }
    let token_row = g.reshape(mask_token, vec![1, d])?;
    let copies = g.gather_rows(token_row, &vec![0; plan.n_masked()])?;
    let filler = g.scatter_rows(copies, &plan.masked_idx, plan.n_patches)?;
    g.add(placed, filler)
}

/// Full `N×d` decoder input sequence built from the encoder latent.
pub fn scatter_with_mask_tokens<S: Scalar>(
    latent: &Tensor<S>,
    plan: &MaskPlan,
    mask_token: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let l = g.constant(latent.clone());
    let m = g.constant(mask_token.clone());
    let out = scatter_with_mask_tokens_node(&mut g, l, plan, m)?;
    Ok(g.value(out).clone())
}

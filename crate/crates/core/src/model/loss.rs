//! Reconstruction, classification and joint objectives.

use serde::{Deserialize, Serialize};

use super::forward::{bind, classify, decode, encode, Bound};
use super::params::{ModelParams, ParamSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::masking::{gather_visible, MaskPlan};
use crate::patching::PatchGrid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of the joint objective `λ_rec·L_rec + λ_ce·L_ce`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_rec: 1.0, lambda_ce: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rec >= 0.0 && self.lambda_ce >= 0.0) {
            return Err(Error::config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// One-hot class target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassTarget {
    pub class: usize,
    pub n_classes: usize,
}

impl ClassTarget {
    pub fn new(class: usize, n_classes: usize) -> Result<Self> {
        if class >= n_classes {
            return Err(Error::contract(format!("class {class} out of range for {n_classes} classes")));
        }
        Ok(Self { class, n_classes })
    }

    pub fn one_hot<S: Scalar>(&self) -> Vec<S> {
        (0..self.n_classes).map(|i| if i == self.class { S::one() } else { S::zero() }).collect()
    }
}

/// `L_rec` node: mean over masked patches of the per-patch squared error
/// (summed over the patch's pixels). Zero when nothing is masked.
pub fn reconstruction_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    target: &PatchGrid<S>,
    recon: NodeId,
    plan: &MaskPlan,
) -> Result<NodeId> {
    if g.shape(recon) != target.tokens.shape() {
        return Err(Error::Dimension {
            op: "reconstruction_loss",
            lhs: g.shape(recon).to_vec(),
            rhs: target.tokens.shape().to_vec(),
        });
    }
    if plan.masked_idx.is_empty() {
        return Ok(g.constant(Tensor::scalar(S::zero())));
    }
    let pred = g.gather_rows(recon, &plan.masked_idx)?;
    let d = target.patch_dim();
    let mut data = Vec::with_capacity(plan.n_masked() * d);
    for &i in &plan.masked_idx {
        data.extend_from_slice(target.token(i));
    }
    let truth = g.constant(Tensor::new(vec![plan.n_masked(), d], data)?);
    g.mse_rows(pred, truth)
}

pub fn reconstruction_loss<S: Scalar>(target: &PatchGrid<S>, recon: &Tensor<S>, plan: &MaskPlan) -> Result<S> {
    let mut g = Graph::new();
    let r = g.constant(recon.clone());
    let l = reconstruction_loss_node(&mut g, target, r, plan)?;
    Ok(g.value(l).item())
}

/// `L_ce` for a single `[1, K]` logit row, in log-sum-exp form.
pub fn classification_loss<S: Scalar>(logits: &Tensor<S>, target: ClassTarget) -> Result<S> {
    if logits.len() != target.n_classes {
        return Err(Error::Dimension {
            op: "classification_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![target.n_classes],
        });
    }
    let mut g = Graph::new();
    let row = g.constant(logits.reshape(vec![1, target.n_classes])?);
    let l = g.cross_entropy(row, &[target.class])?;
    Ok(g.value(l).item())
}

pub fn total_loss<S: Scalar>(rec: S, ce: S, w: LossWeights) -> S {
    S::lit(w.lambda_rec) * rec + S::lit(w.lambda_ce) * ce
}

/// Graph form of [`total_loss`]. A term with zero weight is left out of the
/// graph entirely, which detaches the matching branch.
pub fn total_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    rec: Option<NodeId>,
    ce: Option<NodeId>,
    w: LossWeights,
) -> Result<NodeId> {
    let rec = rec.filter(|_| w.lambda_rec != 0.0).map(|n| g.scale(n, S::lit(w.lambda_rec)));
    let ce = ce.filter(|_| w.lambda_ce != 0.0).map(|n| g.scale(n, S::lit(w.lambda_ce)));
    match (rec, ce) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Ok(g.constant(Tensor::scalar(S::zero()))),
    }
}

/// Nodes produced by [`masked_objective`].
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    pub loss: NodeId,
    pub rec: NodeId,
    pub ce: NodeId,
    pub logits: NodeId,
}

/// Pre-training objective for one image: encode the visible tokens, decode
/// the full grid (only when `λ_rec > 0`), classify from the visible latent.
pub fn masked_objective<S: Scalar>(
    g: &mut Graph<S>,
    p: &ModelParams<S>,
    b: &Bound,
    grid: &PatchGrid<S>,
    plan: &MaskPlan,
    target: ClassTarget,
    w: LossWeights,
) -> Result<ObjectiveNodes> {
    let visible = g.constant(gather_visible(grid, plan)?);
    let latent = encode(g, p, b, visible, &plan.visible_idx)?;
    let rec = if w.lambda_rec > 0.0 {
        let recon = decode(g, p, b, latent, plan)?;
        reconstruction_loss_node(g, grid, recon, plan)?
    } else {
        g.constant(Tensor::scalar(S::zero()))
    };
    let logits = classify(g, p, b, latent)?;
    let ce = g.cross_entropy(logits, &[target.class])?;
    let loss = total_loss_node(g, Some(rec), Some(ce), w)?;
    Ok(ObjectiveNodes { loss, rec, ce, logits })
}

/// Scalar value of the objective for one image; no gradients kept.
pub fn objective_value<S: Scalar>(
    p: &ModelParams<S>,
    grid: &PatchGrid<S>,
    plan: &MaskPlan,
    target: ClassTarget,
    w: LossWeights,
) -> Result<(S, S, S)> {
    let mut g = Graph::new();
    let b = bind(&mut g, p, |_: &ParamSpec| false);
    let n = masked_objective(&mut g, p, &b, grid, plan, target, w)?;
    Ok((g.value(n.loss).item(), g.value(n.rec).item(), g.value(n.ce).item()))
}

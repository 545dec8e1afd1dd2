//! Graph construction for the encoder, decoder and classification head.

use super::params::{BlockIdx, LinearIdx, ModelParams, NormIdx, ParamSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::masking::{scatter_with_mask_tokens_node, MaskPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

/// Graph nodes for every parameter tensor, in layout order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

impl Bound {
    pub fn get(&self, i: usize) -> NodeId {
        self.ids[i]
    }
}

/// Adds every parameter to `g`, as a trainable leaf when `trainable` says so
/// and as a constant otherwise.
pub fn bind<S: Scalar>(g: &mut Graph<S>, params: &ModelParams<S>, trainable: impl Fn(&ParamSpec) -> bool) -> Bound {
    let ids = params
        .specs
        .iter()
        .zip(&params.tensors)
        .map(|(s, t)| if trainable(s) { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    Bound { ids }
}

fn linear<S: Scalar>(g: &mut Graph<S>, b: &Bound, l: LinearIdx, x: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, b.get(l.w))?;
    g.add_bias(y, b.get(l.b))
}

fn norm<S: Scalar>(g: &mut Graph<S>, b: &Bound, n: NormIdx, x: NodeId) -> Result<NodeId> {
    g.layer_norm(x, b.get(n.gain), b.get(n.shift), S::lit(LN_EPS))
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
fn block<S: Scalar>(g: &mut Graph<S>, b: &Bound, blk: &BlockIdx, x: NodeId, heads: usize) -> Result<NodeId> {
    let d = g.value(x).cols();
    let dh = d / heads;
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();

    let h = norm(g, b, blk.ln1, x)?;
    let qkv = linear(g, b, blk.qkv, h)?;
    // Rows of the transposed projection are feature channels, so per-head
    // slices become row gathers.
    let qkv_t = g.transpose(qkv)?;
    let w_proj = b.get(blk.proj.w);
    let mut attn: Option<NodeId> = None;
    for head in 0..heads {
        let rows = |offset: usize| (offset + head * dh..offset + (head + 1) * dh).collect::<Vec<_>>();
        let q_t = g.gather_rows(qkv_t, &rows(0))?;
        let q = g.transpose(q_t)?;
        let k_t = g.gather_rows(qkv_t, &rows(d))?;
        let v_t = g.gather_rows(qkv_t, &rows(2 * d))?;
        let v = g.transpose(v_t)?;
        let scores = g.matmul(q, k_t)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores);
        let out = g.matmul(weights, v)?;
        // Concatenate-then-project equals the sum of per-head projections
        // through the matching row block of the projection matrix.
        let w_head = g.gather_rows(w_proj, &rows(0))?;
        let projected = g.matmul(out, w_head)?;
        attn = Some(match attn {
            None => projected,
            Some(acc) => g.add(acc, projected)?,
        });
    }
    let attn = g.add_bias(attn.expect("at least one head"), b.get(blk.proj.b))?;
    let x = g.add(x, attn)?;

    let h = norm(g, b, blk.ln2, x)?;
    let h = linear(g, b, blk.fc1, h)?;
    let h = g.gelu(h);
    let h = linear(g, b, blk.fc2, h)?;
    g.add(x, h)
}

fn positions<S: Scalar>(table: &Tensor<S>, idx: &[usize]) -> Result<Tensor<S>> {
    let d = table.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

/// Encodes visible tokens `[V, P²·C]` sitting at grid positions
/// `visible_idx` into a `[V, enc_dim]` latent.
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    p: &ModelParams<S>,
    b: &Bound,
    tokens: NodeId,
    visible_idx: &[usize],
) -> Result<NodeId> {
    let n = p.config.n_patches();
    if visible_idx.is_empty() {
        return Err(Error::contract("encoder needs at least one visible token"));
    }
    if let Some(&bad) = visible_idx.iter().find(|&&i| i >= n) {
        return Err(Error::contract(format!("patch index {bad} out of range for {n} patches")));
    }
    if g.value(tokens).rows() != visible_idx.len() {
        return Err(Error::contract(format!(
            "{} tokens but {} positions",
            g.value(tokens).rows(),
            visible_idx.len()
        )));
    }
    let tokens = normalize_in(g, tokens)?;
    let x = linear(g, b, p.layout.patch_embed, tokens)?;
    let pos = g.constant(positions(&p.enc_pos, visible_idx)?);
    let mut x = g.add(x, pos)?;
    for blk in &p.layout.enc_blocks {
        x = block(g, b, blk, x, p.config.enc_heads)?;
    }
    norm(g, b, p.layout.enc_norm, x)
}

/// Reconstructs all `N` patches `[N, P²·C]` from the visible latent.
pub fn decode<S: Scalar>(
    g: &mut Graph<S>,
    p: &ModelParams<S>,
    b: &Bound,
    latent: NodeId,
    plan: &MaskPlan,
) -> Result<NodeId> {
    if plan.n_patches != p.config.n_patches() {
        return Err(Error::contract(format!(
            "plan covers {} patches, model expects {}",
            plan.n_patches,
            p.config.n_patches()
        )));
    }
    let x = linear(g, b, p.layout.enc_to_dec, latent)?;
    let x = scatter_with_mask_tokens_node(g, x, plan, b.get(p.layout.mask_token))?;
    let pos = g.constant(p.dec_pos.clone());
    let mut x = g.add(x, pos)?;
    for blk in &p.layout.dec_blocks {
        x = block(g, b, blk, x, p.config.dec_heads)?;
    }
    let out = linear(g, b, p.layout.dec_head, x)?;
    denormalize_out(g, out)
}

/// Pixel value mapped to zero on the way into the encoder; the mean
/// intensity of a contact region.
pub const PIXEL_CENTER: f64 = 0.77;
/// Input pixels are divided by this after centering.
pub const PIXEL_SCALE: f64 = 0.05;
/// Decoder outputs are multiplied by this before the center is added back.
pub const OUTPUT_SCALE: f64 = 0.05;

fn normalize_in<S: Scalar>(g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
    let d = g.value(x).cols();
    let y = g.scale(x, S::lit(1.0 / PIXEL_SCALE));
    let shift = g.constant(Tensor::full(vec![1, d], S::lit(-PIXEL_CENTER / PIXEL_SCALE)));
    g.add_bias(y, shift)
}

fn denormalize_out<S: Scalar>(g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
    let d = g.value(x).cols();
    let y = g.scale(x, S::lit(OUTPUT_SCALE));
    let shift = g.constant(Tensor::full(vec![1, d], S::lit(PIXEL_CENTER)));
    g.add_bias(y, shift)
}

/// Mean-pool over latent rows, then FC → ReLU → FC. Returns `[1, K]` logits.
pub fn classify<S: Scalar>(g: &mut Graph<S>, p: &ModelParams<S>, b: &Bound, latent: NodeId) -> Result<NodeId> {
    let pooled = g.mean_rows(latent)?;
    let h = linear(g, b, p.layout.cls_fc1, pooled)?;
    let h = g.relu(h);
    linear(g, b, p.layout.cls_fc2, h)
}

/// Latent of the unmasked image `[N, enc_dim]`, computed without gradients.
pub fn forward_full<S: Scalar>(p: &ModelParams<S>, tokens: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let b = bind(&mut g, p, |_| false);
    let x = g.constant(tokens.clone());
    let all: Vec<usize> = (0..p.config.n_patches()).collect();
    let latent = encode(&mut g, p, &b, x, &all)?;
    Ok(g.value(latent).clone())
}

/// Encoder output for explicit visible tokens, without gradients.
pub fn encode_tokens<S: Scalar>(p: &ModelParams<S>, tokens: &Tensor<S>, visible_idx: &[usize]) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let b = bind(&mut g, p, |_| false);
    let x = g.constant(tokens.clone());
    let latent = encode(&mut g, p, &b, x, visible_idx)?;
    Ok(g.value(latent).clone())
}

/// Decoder output for a given latent and plan, without gradients.
pub fn decode_latent<S: Scalar>(p: &ModelParams<S>, latent: &Tensor<S>, plan: &MaskPlan) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let b = bind(&mut g, p, |_| false);
    let l = g.constant(latent.clone());
    let out = decode(&mut g, p, &b, l, plan)?;
    Ok(g.value(out).clone())
}

/// Classification logits `[1, K]` for a latent, without gradients.
pub fn classify_latent<S: Scalar>(p: &ModelParams<S>, latent: &Tensor<S>) -> Result<Tensor<S>> {
    if latent.is_empty() {
        return Err(Error::contract("empty latent"));
    }
    let mut g = Graph::new();
    let b = bind(&mut g, p, |_| false);
    let l = g.constant(latent.clone());
    let out = classify(&mut g, p, &b, l)?;
    Ok(g.value(out).clone())
}

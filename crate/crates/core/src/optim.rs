//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn zeros_like(params: &[Tensor<S>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

/// One optimizer step for parameter tensor `i`:
///
/// ```text
/// m ← β1·m + (1−β1)·g          v ← β2·v + (1−β2)·g²
/// p ← p − lr·( m̂ / (√v̂ + ε) + wd·p·[decay_i] )
/// ```
///
/// where `m̂`, `v̂` are the bias-corrected moments. Fails without touching
/// anything if a gradient is non-finite, naming the offending parameter.
pub fn adam_step<S: Scalar>(
    params: &[Tensor<S>],
    grads: &[Tensor<S>],
    state: &AdamState<S>,
    hyper: &AdamHyper,
    decay: &[bool],
    names: &[String],
) -> Result<(Vec<Tensor<S>>, AdamState<S>)> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || decay.len() != n || names.len() != n {
        return Err(Error::contract("adam_step: parameter, gradient and moment lists differ in length"));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension { op: "adam_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }

    let t = state.step + 1;
    let (b1, b2) = (S::lit(hyper.beta1), S::lit(hyper.beta2));
    let bc1 = S::one() - b1.powi(t.min(i32::MAX as u64) as i32);
    let bc2 = S::one() - b2.powi(t.min(i32::MAX as u64) as i32);
    let lr = S::lit(hyper.lr);
    let eps = S::lit(hyper.eps);
    let wd = S::lit(hyper.weight_decay);

    let mut new_p = Vec::with_capacity(n);
    let mut new_m = Vec::with_capacity(n);
    let mut new_v = Vec::with_capacity(n);
    for i in 0..n {
        let (p, g) = (params[i].data(), grads[i].data());
        let (m0, v0) = (state.m[i].data(), state.v[i].data());
        let mut pd = Vec::with_capacity(p.len());
        let mut md = Vec::with_capacity(p.len());
        let mut vd = Vec::with_capacity(p.len());
        for j in 0..p.len() {
            let m = b1 * m0[j] + (S::one() - b1) * g[j];
            let v = b2 * v0[j] + (S::one() - b2) * g[j] * g[j];
            let mut step = (m / bc1) / ((v / bc2).sqrt() + eps);
            if decay[i] {
                step += wd * p[j];
            }
            pd.push(p[j] - lr * step);
            md.push(m);
            vd.push(v);
        }
        let shape = params[i].shape().to_vec();
        new_p.push(Tensor::new(shape.clone(), pd)?);
        new_m.push(Tensor::new(shape.clone(), md)?);
        new_v.push(Tensor::new(shape, vd)?);
    }
    Ok((new_p, AdamState { step: t, m: new_m, v: new_v }))
}

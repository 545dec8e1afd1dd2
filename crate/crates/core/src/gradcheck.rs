//! Finite-difference checks of the reverse sweep.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::masking::{gather_visible, sample_mask, MaskPlan};
use crate::model::{
    bind, encode_tokens, masked_objective, objective_value, ClassTarget, LossWeights, ModelConfig, ModelParams,
};
use crate::patching::PatchGrid;
use crate::seed;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Step for the whole-model check. The loss there accumulates thousands of
/// rounding errors, so it uses the five-point stencil at a longer step,
/// shortened only where the stencil would cross a ReLU kink.
pub const MODEL_STEP: f64 = 1e-3;

/// Denominator floor of [`rel_err`]. Central differences at `STEP` carry
/// roughly `1e-16·|f| / STEP` of cancellation noise, so relative error is
/// only meaningful above this magnitude.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Description of the element with the largest error.
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
    }
}

/// Graph builder under test: maps input leaves to an output node of any shape.
pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'a;

/// Reduces `out` to a scalar through a fixed random projection, so every
/// output element contributes with a distinct weight.
fn project(g: &mut Graph<f64>, out: NodeId, weights: &[f64]) -> Result<NodeId> {
    let n = g.value(out).len();
    let row = g.reshape(out, vec![1, n])?;
    let w = g.constant(Tensor::new(vec![n, 1], weights.to_vec())?);
    g.matmul(row, w)
}

fn evaluate(inputs: &[Tensor<f64>], build: &Build<'_>, weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let l = project(&mut g, out, weights)?;
    Ok(g.value(l).item())
}

/// Compares the reverse sweep with central differences for every element
/// of every input.
pub fn check_inputs(inputs: &[Tensor<f64>], build: &Build<'_>, seed: u64) -> Result<GradReport> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let mut rng = seed::rng(seed);
    let weights: Vec<f64> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = project(&mut g, out, &weights)?;
    let grads = g.backward(loss)?;

    let mut report = GradReport::default();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]);
        for j in 0..t.len() {
            let v = t.data()[j];
            let mut shifted = inputs.to_vec();
            shifted[k] = t.with_element(j, v + STEP);
            let up = evaluate(&shifted, build, &weights)?;
            shifted[k] = t.with_element(j, v - STEP);
            let down = evaluate(&shifted, build, &weights)?;
            report.record(analytic.data()[j], (up - down) / (2.0 * STEP), || format!("input {k}[{j}]"));
        }
    }
    Ok(report)
}

/// Whole-model check: one image, one mask, the joint objective. A seeded
/// `fraction` of all scalar parameters is perturbed.
pub fn check_model(cfg: &ModelConfig, weights: LossWeights, fraction: f64, seed: u64) -> Result<GradReport> {
    let params = ModelParams::<f64>::init(cfg, seed)?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::stream::PROBE]));
    let tokens = Tensor::from_fn(vec![cfg.n_patches(), cfg.patch_dim()], |_| rng.random_range(0.0..1.0));
    let grid = PatchGrid {
        patch_size: cfg.patch_size,
        channels: cfg.channels,
        grid_rows: cfg.grid_rows(),
        grid_cols: cfg.grid_cols(),
        tokens,
    };
    let plan = sample_mask(cfg.n_patches(), 0.7, seed::derive(seed, &[seed::stream::MASK]))?;
    let target = ClassTarget::new(rng.random_range(0..cfg.n_classes), cfg.n_classes)?;

    let mut g = Graph::new();
    let bound = bind(&mut g, &params, |_| true);
    let nodes = masked_objective(&mut g, &params, &bound, &grid, &plan, target, weights)?;
    let grads = g.backward(nodes.loss)?;

    // Flat index over all parameters, subsampled without replacement.
    let offsets: Vec<usize> = params
        .tensors
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let total = params.param_count();
    let amount = ((total as f64 * fraction).ceil() as usize).clamp(1, total);
    let mut picks = sample(&mut rng, total, amount).into_vec();
    picks.sort_unstable();

    let mut report = GradReport::default();
    for flat in picks {
        let ti = offsets.partition_point(|&o| o <= flat) - 1;
        let j = flat - offsets[ti];
        let analytic = grads.get(bound.ids[ti]).data()[j];
        let f = |delta: f64| -> Result<(f64, Vec<bool>)> {
            let mut tensors = params.tensors.clone();
            let v = tensors[ti].data()[j];
            tensors[ti] = tensors[ti].with_element(j, v + delta);
            let shifted = params.with_tensors(tensors)?;
            Ok((objective_value(&shifted, &grid, &plan, target, weights)?.0, relu_signs(&shifted, &grid, &plan)?))
        };
        let numeric = model_derivative(f)?;
        report.record(analytic, numeric, || format!("{}[{j}]", params.specs[ti].name));
    }
    Ok(report)
}

/// Signs of the classifier's hidden pre-activations, the only kinks in the
/// objective.
fn relu_signs(p: &ModelParams<f64>, grid: &PatchGrid<f64>, plan: &MaskPlan) -> Result<Vec<bool>> {
    let latent = encode_tokens(p, &gather_visible(grid, plan)?, &plan.visible_idx)?;
    let (n, d) = (latent.rows(), latent.cols());
    let pooled: Vec<f64> = (0..d).map(|j| (0..n).map(|i| latent.row(i)[j]).sum::<f64>() / n as f64).collect();
    let (w, b) = (&p.tensors[p.layout.cls_fc1.w], &p.tensors[p.layout.cls_fc1.b]);
    let k = w.cols();
    Ok((0..k)
        .map(|c| b.data()[c] + pooled.iter().enumerate().map(|(i, x)| x * w.data()[i * k + c]).sum::<f64>() > 0.0)
        .collect())
}

/// Five-point derivative at the longest step, from [`MODEL_STEP`] down by
/// factors of ten, whose stencil keeps every ReLU on the side it starts on.
/// `f(delta)` returns the loss and the ReLU signs at the shifted parameter.
fn model_derivative(f: impl Fn(f64) -> Result<(f64, Vec<bool>)>) -> Result<f64> {
    let (_, base) = f(0.0)?;
    let mut h = MODEL_STEP;
    for _ in 0..3 {
        let mut vals = [0.0; 4];
        let mut smooth = true;
        for (v, delta) in vals.iter_mut().zip([h, -h, 2.0 * h, -2.0 * h]) {
            let (loss, signs) = f(delta)?;
            *v = loss;
            smooth &= signs == base;
        }
        if smooth {
            return Ok((8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * h));
        }
        h /= 10.0;
    }
    Ok((f(h)?.0 - f(-h)?.0) / (2.0 * h))
}

/// A primitive under test with its inputs.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build<'static>>,
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// One case per graph primitive, inputs uniform in `[-1, 1]`.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = seed::rng(seed);
    let mut u = |shape: &[usize]| uniform(&mut rng, shape);
    // ReLU's kink has no derivative; keep samples away from it.
    let relu_in = u(&[3, 4]).map(|v| if v.abs() < 0.05 { v + 0.1_f64.copysign(v) } else { v });
    let case = |name, inputs, build: Box<Build<'static>>| Case { name, inputs, build };
    vec![
        case("matmul", vec![u(&[3, 4]), u(&[4, 5])], Box::new(|g, x| g.matmul(x[0], x[1]))),
        case("add", vec![u(&[3, 4]), u(&[3, 4])], Box::new(|g, x| g.add(x[0], x[1]))),
        case("add_bias", vec![u(&[3, 4]), u(&[1, 4])], Box::new(|g, x| g.add_bias(x[0], x[1]))),
        case("scale", vec![u(&[3, 4])], Box::new(|g, x| Ok(g.scale(x[0], -0.7)))),
        case("transpose", vec![u(&[3, 5])], Box::new(|g, x| g.transpose(x[0]))),
        case("reshape", vec![u(&[3, 4])], Box::new(|g, x| g.reshape(x[0], vec![2, 6]))),
        case("gather_rows", vec![u(&[4, 3])], Box::new(|g, x| g.gather_rows(x[0], &[2, 0, 2, 3]))),
        case("scatter_rows", vec![u(&[2, 3])], Box::new(|g, x| g.scatter_rows(x[0], &[3, 1], 5))),
        case(
            "layer_norm",
            vec![u(&[3, 6]), u(&[6]), u(&[6])],
            Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-6)),
        ),
        case("softmax", vec![u(&[3, 5])], Box::new(|g, x| Ok(g.softmax(x[0])))),
        case("gelu", vec![u(&[3, 4])], Box::new(|g, x| Ok(g.gelu(x[0])))),
        case("relu", vec![relu_in], Box::new(|g, x| Ok(g.relu(x[0])))),
        case("mean_rows", vec![u(&[4, 3])], Box::new(|g, x| g.mean_rows(x[0]))),
        case("mse_rows", vec![u(&[3, 4]), u(&[3, 4])], Box::new(|g, x| g.mse_rows(x[0], x[1]))),
        case("cross_entropy", vec![u(&[3, 5])], Box::new(|g, x| g.cross_entropy(x[0], &[1, 4, 0]))),
        case("sum_all", vec![u(&[3, 4])], Box::new(|g, x| g.sum_all(x[0]))),
    ]
}

/// Runs [`check_inputs`] on every primitive case.
pub fn check_primitives(seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    primitive_cases(seed)
        .into_iter()
        .enumerate()
        .map(|(i, c)| Ok((c.name, check_inputs(&c.inputs, &*c.build, seed::derive(seed, &[i as u64]))?)))
        .collect()
}

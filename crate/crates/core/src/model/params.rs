//! Parameter layout, initialization and storage.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormShift,
    MaskToken,
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub part: Part,
}

impl ParamSpec {
    /// Decoupled weight decay applies to weight matrices only.
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIdx {
    pub gain: usize,
    pub shift: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIdx {
    pub ln1: NormIdx,
    pub qkv: LinearIdx,
    pub proj: LinearIdx,
    pub ln2: NormIdx,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

/// Positions of every parameter in [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub patch_embed: LinearIdx,
    pub enc_blocks: Vec<BlockIdx>,
    pub enc_norm: NormIdx,
    pub enc_to_dec: LinearIdx,
    pub mask_token: usize,
    pub dec_blocks: Vec<BlockIdx>,
    pub dec_head: LinearIdx,
    pub cls_fc1: LinearIdx,
    pub cls_fc2: LinearIdx,
}

struct Builder {
    specs: Vec<ParamSpec>,
    part: Part,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        self.specs.push(ParamSpec { name, shape, kind, part: self.part });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIdx {
        LinearIdx {
            w: self.push(format!("{name}.w"), vec![fan_in, fan_out], ParamKind::Weight),
            b: self.push(format!("{name}.b"), vec![fan_out], ParamKind::Bias),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.push(format!("{name}.gain"), vec![d], ParamKind::NormGain),
            shift: self.push(format!("{name}.shift"), vec![d], ParamKind::NormShift),
        }
    }

    fn block(&mut self, name: &str, d: usize, mlp_ratio: usize) -> BlockIdx {
        BlockIdx {
            ln1: self.norm(&format!("{name}.ln1"), d),
            qkv: self.linear(&format!("{name}.attn.qkv"), d, 3 * d),
            proj: self.linear(&format!("{name}.attn.proj"), d, d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            fc1: self.linear(&format!("{name}.mlp.fc1"), d, d * mlp_ratio),
            fc2: self.linear(&format!("{name}.mlp.fc2"), d * mlp_ratio, d),
        }
    }
}

/// Deterministic parameter layout for a configuration.
pub fn layout(cfg: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let mut b = Builder { specs: Vec::new(), part: Part::Encoder };
    let (e, d, pd) = (cfg.enc_dim, cfg.dec_dim, cfg.patch_dim());
    let patch_embed = b.linear("patch_embed", pd, e);
    let enc_blocks = (0..cfg.enc_depth).map(|i| b.block(&format!("enc.{i}"), e, cfg.mlp_ratio)).collect();
    let enc_norm = b.norm("enc_norm", e);
    b.part = Part::Decoder;
    let enc_to_dec = b.linear("enc_to_dec", e, d);
    let mask_token = b.push("mask_token".into(), vec![d], ParamKind::MaskToken);
    let dec_blocks = (0..cfg.dec_depth).map(|i| b.block(&format!("dec.{i}"), d, cfg.mlp_ratio)).collect();
    let dec_head = b.linear("dec_head", d, pd);
    b.part = Part::Head;
    let cls_fc1 = b.linear("cls_fc1", e, e);
    let cls_fc2 = b.linear("cls_fc2", e, cfg.n_classes);
    let layout = Layout {
        patch_embed,
        enc_blocks,
        enc_norm,
        enc_to_dec,
        mask_token,
        dec_blocks,
        dec_head,
        cls_fc1,
        cls_fc2,
    };
    (layout, b.specs)
}

/// Fixed 2D sine-cosine position table, `[rows·cols, dim]`. The first half
/// of each row encodes the grid row, the second half the grid column.
pub fn sincos_position_table<S: Scalar>(rows: usize, cols: usize, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let quarter = half / 2;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                let freqs: Vec<f64> =
                    (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
                data.extend(freqs.iter().map(|w| S::lit((pos * w).sin())));
                data.extend(freqs.iter().map(|w| S::lit((pos * w).cos())));
            }
        }
    }
    Tensor::new(vec![rows * cols, dim], data).expect("table shape")
}

/// All learnable arrays plus the fixed position tables.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub specs: Vec<ParamSpec>,
    pub tensors: Vec<Tensor<S>>,
    pub enc_pos: Tensor<S>,
    pub dec_pos: Tensor<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Xavier-uniform linear weights, zero biases, unit norm gains and a
    /// `N(0, 0.02²)` mask token, all drawn from one seeded stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (_, specs) = layout(config);
        let mut rng = seed::rng(seed::derive(seed, &[seed::stream::INIT]));
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let tensors = specs
            .iter()
            .map(|s| match s.kind {
                ParamKind::Weight => {
                    let limit = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                    Tensor::from_fn(s.shape.clone(), |_| S::lit(rng.random_range(-limit..limit)))
                }
                ParamKind::Bias | ParamKind::NormShift => Tensor::zeros(s.shape.clone()),
                ParamKind::NormGain => Tensor::full(s.shape.clone(), S::one()),
                ParamKind::MaskToken => Tensor::from_fn(s.shape.clone(), |_| S::lit(normal.sample(&mut rng))),
            })
            .collect();
        Self::from_tensors(config.clone(), tensors)
    }

    /// Assembles parameters from tensors in layout order, checking shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        if tensors.len() != specs.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::Dimension { op: "param", lhs: s.shape.clone(), rhs: t.shape().to_vec() });
            }
        }
        let enc_pos = sincos_position_table(config.grid_rows(), config.grid_cols(), config.enc_dim);
        let dec_pos = sincos_position_table(config.grid_rows(), config.grid_cols(), config.dec_dim);
        Ok(Self { config, layout, specs, tensors, enc_pos, dec_pos })
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor<S>>) -> Result<Self> {
        Self::from_tensors(self.config.clone(), tensors)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams::from_tensors(self.config.clone(), self.tensors.iter().map(Tensor::cast).collect())
            .expect("same layout")
    }
}

//! Tiny decoder-only causal transformer: configuration, parameters, forward
//! and backward passes, greedy decoding and the Adam optimizer.

mod decode;
mod optim;
mod transformer;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::numerics::Matrix;

pub use decode::{generate_greedy, greedy_continuations};
pub use optim::{step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use transformer::{forward, grads, Batch, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_seq: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return param_err("model dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return param_err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq < 2 {
            return param_err("max_seq must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every tensor name with its shape, in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut out = vec![
            ("emb.tok".to_string(), (v, d)),
            ("emb.pos".to_string(), (self.max_seq, d)),
        ];
        for i in 0..self.n_layers {
            for ln in ["ln1", "ln2"] {
                out.push((format!("blk{i}.{ln}.gain"), (1, d)));
                out.push((format!("blk{i}.{ln}.bias"), (1, d)));
            }
            for p in ["q", "k", "v", "o"] {
                out.push((format!("blk{i}.{p}"), (d, d)));
            }
            out.push((format!("blk{i}.ffn.in"), (f, d)));
            out.push((format!("blk{i}.ffn.out"), (d, f)));
        }
        out.push(("final_ln.gain".to_string(), (1, d)));
        out.push(("final_ln.bias".to_string(), (1, d)));
        out.push(("head".to_string(), (v, d)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, (r, c))| r * c).sum()
    }
}

/// Storage precision declared for a run. Arithmetic is always 64-bit; 32-bit
/// runs round trainable tensors after initialization and every update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn round(self, m: &mut Matrix) {
        if self == Precision::F32 {
            for v in m.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn dtype(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = crate::UlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => param_err(format!("unknown precision `{other}`")),
        }
    }
}

/// Named tensors of a model plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Matrix>,
}

impl ModelParams {
    /// Assembles parameters from named tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Matrix>) -> Result<Self> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        if tensors.len() != shapes.len() {
            return shape_err(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            ));
        }
        for (name, shape) in &shapes {
            match tensors.get_mut(name) {
                Some(m) if m.shape() == *shape => {}
                Some(m) => {
                    return shape_err(format!(
                        "tensor `{name}` is {:?}, expected {shape:?}",
                        m.shape()
                    ))
                }
                None => return shape_err(format!("missing tensor `{name}`")),
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    /// Panicking accessor for names the configuration guarantees.
    pub(crate) fn t(&self, name: &str) -> &Matrix {
        &self.tensors[name]
    }

    /// Replaces a tensor with one of identical shape.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(m) if m.shape() == value.shape() => {
                *m = value;
                Ok(())
            }
            Some(m) => shape_err(format!(
                "cannot replace `{name}` {:?} with {:?}",
                m.shape(),
                value.shape()
            )),
            None => shape_err(format!("unknown tensor `{name}`")),
        }
    }

    pub fn tensors(&self) -> &BTreeMap<String, Matrix> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn round_to(&mut self, precision: Precision) {
        for m in self.tensors.values_mut() {
            precision.round(m);
        }
    }
}

/// Deterministic initialization: linear weights and the output head are
/// uniform on `±1/sqrt(fan_in)`, embeddings uniform on `±0.1`, layer-norm
/// gains 1 and biases 0.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = BTreeMap::new();
    for (name, (rows, cols)) in config.tensor_shapes() {
        let m = if name.ends_with(".gain") {
            Matrix::filled(rows, cols, 1.0)
        } else if name.ends_with(".bias") {
            Matrix::zeros(rows, cols)
        } else {
            let bound = if name.starts_with("emb.") {
                0.1
            } else {
                1.0 / (cols as f64).sqrt()
            };
            Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
        };
        tensors.insert(name, m);
    }
    ModelParams::from_tensors(*config, tensors)
}

/// Token ids `x_1..x_T`, validated against a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if tokens.len() < 2 {
            return param_err(format!("token sequence needs length >= 2, got {}", tokens.len()));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return param_err(format!("token {t} outside vocabulary of {vocab_size}"));
        }
        Ok(Self(tokens))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.0
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

//! Low-rank adapter lifecycle.
//!
//! An adapter on a linear weight `W` (`d x k`, output by input) adds `B A`
//! with `A: r x k` and `B: d x r`, so the layer computes `W x + B A x`.
//! Adapters start either from the default initialization (Kaiming-uniform
//! `A`, zero `B`) or from a Fisher-weighted low-rank approximation of `W`
//! whose product is subtracted from the base weight so outputs are unchanged.

mod fisher;
mod flora;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result, UlabError};
use crate::model::ModelParams;
use crate::numerics::{matmul, Matrix};

pub use fisher::{estimate_fisher, relative_fisher, FisherEstimate, DEFAULT_FISHER_EPS};
pub use flora::{attach_flora, flora_init, FloraFactors, DEFAULT_ROW_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    Q,
    K,
    V,
    O,
    FfnIn,
    FfnOut,
}

impl AdapterTarget {
    /// Tensor name of this target in layer `layer`.
    pub fn tensor_name(self, layer: usize) -> String {
        let suffix = match self {
            AdapterTarget::Q => "q",
            AdapterTarget::K => "k",
            AdapterTarget::V => "v",
            AdapterTarget::O => "o",
            AdapterTarget::FfnIn => "ffn.in",
            AdapterTarget::FfnOut => "ffn.out",
        };
        format!("blk{layer}.{suffix}")
    }

    /// Parses a comma list such as `q,v,ffn`; `ffn` expands to both
    /// feed-forward projections.
    pub fn parse_list(s: &str) -> Result<Vec<AdapterTarget>> {
        let mut out = BTreeSet::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "q" => {
                    out.insert(AdapterTarget::Q);
                }
                "k" => {
                    out.insert(AdapterTarget::K);
                }
                "v" => {
                    out.insert(AdapterTarget::V);
                }
                "o" => {
                    out.insert(AdapterTarget::O);
                }
                "ffn" => {
                    out.insert(AdapterTarget::FfnIn);
                    out.insert(AdapterTarget::FfnOut);
                }
                "ffn_in" | "ffn.in" => {
                    out.insert(AdapterTarget::FfnIn);
                }
                "ffn_out" | "ffn.out" => {
                    out.insert(AdapterTarget::FfnOut);
                }
                other => return param_err(format!("unknown adapter target `{other}`")),
            }
        }
        if out.is_empty() {
            return param_err("adapter target list is empty");
        }
        Ok(out.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    #[default]
    Default,
    Flora,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub targets: Vec<AdapterTarget>,
    pub rank: usize,
    pub init: AdapterInit,
}

impl AdapterSpec {
    /// Rank 16 on Q, V and both feed-forward projections.
    pub fn qv_ffn(rank: usize, init: AdapterInit) -> Self {
        Self {
            targets: vec![AdapterTarget::Q, AdapterTarget::V, AdapterTarget::FfnIn, AdapterTarget::FfnOut],
            rank,
            init,
        }
    }

    /// Targeted tensor names across all layers, in layer order.
    pub fn tensor_names(&self, n_layers: usize) -> Vec<String> {
        (0..n_layers)
            .flat_map(|l| self.targets.iter().map(move |t| t.tensor_name(l)))
            .collect()
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.targets.is_empty() {
            return param_err("adapter spec needs at least one target");
        }
        if self.rank == 0 {
            return param_err("adapter rank must be positive");
        }
        for name in self.tensor_names(params.config.n_layers) {
            let w = params
                .get(&name)
                .ok_or_else(|| UlabError::Shape(format!("no tensor `{name}`")))?;
            if self.rank > w.rows().min(w.cols()) {
                return shape_err(format!(
                    "rank {} exceeds min dimension of `{name}` {:?}",
                    self.rank,
                    w.shape()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target_name: String,
    /// `r x k`
    pub a: Matrix,
    /// `d x r`
    pub b: Matrix,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `B A`
    pub fn delta(&self) -> Matrix {
        matmul(&self.b, &self.a).expect("adapter factors conform")
    }

    fn check_conforms(&self, w: &Matrix) -> Result<()> {
        let (d, k) = w.shape();
        if self.a.cols() != k || self.b.rows() != d || self.a.rows() != self.b.cols() {
            return shape_err(format!(
                "adapter on `{}` has A {:?} and B {:?}, weight is {d}x{k}",
                self.target_name,
                self.a.shape(),
                self.b.shape()
            ));
        }
        Ok(())
    }
}

/// Adapters keyed by target tensor name, plus the names whose base weight was
/// replaced by its compensated form at initialization.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdapterSet {
    adapters: BTreeMap<String, LoraAdapter>,
    compensated: BTreeSet<String>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, adapter: LoraAdapter) -> Result<()> {
        if self.adapters.contains_key(&adapter.target_name) {
            return param_err(format!("duplicate adapter for `{}`", adapter.target_name));
        }
        self.adapters.insert(adapter.target_name.clone(), adapter);
        Ok(())
    }

    pub fn mark_compensated(&mut self, name: &str) {
        self.compensated.insert(name.to_string());
    }

    pub fn compensated(&self) -> &BTreeSet<String> {
        &self.compensated
    }

    pub fn get(&self, name: &str) -> Option<&LoraAdapter> {
        self.adapters.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LoraAdapter)> {
        self.adapters.iter()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.adapters.values().map(|a| a.a.len() + a.b.len()).sum()
    }

    /// Mutable access to a factor by its gradient name (`<target>.lora_a` or
    /// `<target>.lora_b`).
    pub fn factor_mut(&mut self, grad_name: &str) -> Option<&mut Matrix> {
        if let Some(t) = grad_name.strip_suffix(".lora_a") {
            self.adapters.get_mut(t).map(|a| &mut a.a)
        } else if let Some(t) = grad_name.strip_suffix(".lora_b") {
            self.adapters.get_mut(t).map(|a| &mut a.b)
        } else {
            None
        }
    }

    pub fn check_against(&self, params: &ModelParams) -> Result<()> {
        for (name, ad) in &self.adapters {
            let w = params
                .get(name)
                .ok_or_else(|| UlabError::Shape(format!("adapter targets unknown tensor `{name}`")))?;
            ad.check_conforms(w)?;
        }
        Ok(())
    }
}

/// Default attachment: `A` uniform on `±sqrt(6 / k)` with `k` the input
/// dimension, `B = 0`.
pub fn attach_default(params: &ModelParams, spec: &AdapterSpec, seed: u64) -> Result<AdapterSet> {
    spec.validate(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = AdapterSet::new();
    for name in spec.tensor_names(params.config.n_layers) {
        let w = params.get(&name).expect("validated");
        let (d, k) = w.shape();
        let bound = (6.0 / k as f64).sqrt();
        let a = Matrix::from_fn(spec.rank, k, |_, _| rng.gen_range(-bound..bound));
        let b = Matrix::zeros(d, spec.rank);
        set.insert(LoraAdapter { target_name: name, a, b })?;
    }
    Ok(set)
}

/// Base parameters with each adapted weight replaced by `W + B A`.
pub fn merge(params: &ModelParams, adapters: &AdapterSet) -> Result<ModelParams> {
    adapters.check_against(params)?;
    let mut out = params.clone();
    for (name, ad) in adapters.iter() {
        let merged = params.get(name).expect("checked").add(&ad.delta())?;
        out.set(name, merged)?;
    }
    Ok(out)
}

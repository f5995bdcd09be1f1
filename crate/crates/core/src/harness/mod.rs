//! Experiment driver: corpus synthesis, pretraining to memorization, forget
//! selection, the unlearning loop with per-epoch stopping checks, and reports.

pub mod checkpoint;
mod corpus;
mod report;
mod run;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSpec;
use crate::error::{param_err, Result};
use crate::model::{ModelConfig, Precision, TokenSequence};
use crate::objectives::ObjectiveKind;

pub use corpus::{
    gen_corpus, identifier_len_for, select_forget, text_vocab_for, Corpora, MarkovSource, SUCCESSOR_PROBS,
};
pub use report::{base_hash, EpochRecord, RunReport, CSV_HEADER};
pub use run::{
    evaluate, init_thread_pool, pretrain, trainable_param_fraction, unlearn, validation_thresholds, PretrainEpoch,
    PretrainOutcome, UnlearnOutcome,
};

/// Which sequences a corpus holds within an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Train,
    Forget,
    Retain,
    Validation,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub role: CorpusRole,
    pub sequences: Vec<TokenSequence>,
}

/// The four corpora an unlearning run reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub forget: Vec<TokenSequence>,
    pub retain: Vec<TokenSequence>,
    pub validation: Vec<TokenSequence>,
    pub heldout: Vec<TokenSequence>,
}

impl Split {
    /// Draws `forget_count` training sequences as the forget set; the rest of
    /// the training corpus becomes the retain set.
    pub fn from_corpora(corpora: &Corpora, forget_count: usize, seed: u64) -> Result<Self> {
        let (forget, retain) = select_forget(&corpora.train, forget_count, seed)?;
        if retain.is_empty() {
            return param_err("forget set covers the whole training corpus; nothing left to retain");
        }
        Ok(Self {
            forget,
            retain,
            validation: corpora.validation.clone(),
            heldout: corpora.heldout.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Mean memorization accuracy over the watched sequences that ends training.
    pub target_ma: f64,
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 16,
            max_epochs: 400,
            target_ma: 0.95,
            eval_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub adapter: Option<AdapterSpec>,
    pub method: ObjectiveKind,
    pub forget_count: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_unlearn_epochs: usize,
    pub metric_n: usize,
    pub seed: u64,
    pub precision: Precision,
    pub pretrain: PretrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adapter: None,
            method: ObjectiveKind::Ihl,
            forget_count: 32,
            seq_len: 64,
            n_train: 2048,
            n_val: 64,
            lr: 5e-5,
            batch_size: 8,
            max_unlearn_epochs: 20,
            metric_n: 4,
            seed: 0,
            precision: Precision::F64,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) {
            return param_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.forget_count == 0 || self.forget_count > self.n_train {
            return param_err(format!(
                "forget_count {} must be in 1..={}",
                self.forget_count, self.n_train
            ));
        }
        if self.seq_len > self.model.max_seq {
            return param_err(format!("seq_len {} exceeds max_seq {}", self.seq_len, self.model.max_seq));
        }
        if self.metric_n == 0 || self.metric_n >= self.seq_len {
            return param_err(format!("metric_n {} must be in 1..{}", self.metric_n, self.seq_len));
        }
        if self.batch_size == 0 || self.pretrain.batch_size == 0 {
            return param_err("batch sizes must be positive");
        }
        if !(self.pretrain.lr > 0.0) {
            return param_err("pretraining learning rate must be positive");
        }
        if let Some(spec) = &self.adapter {
            if spec.rank == 0 || spec.targets.is_empty() {
                return param_err("adapter spec needs a positive rank and at least one target");
            }
        }
        Ok(())
    }

    pub fn adapter_label(&self) -> &'static str {
        match &self.adapter {
            None => "none",
            Some(s) => match s.init {
                crate::adapters::AdapterInit::Default => "lora",
                crate::adapters::AdapterInit::Flora => "flora",
            },
        }
    }
}

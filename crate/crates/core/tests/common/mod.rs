#![allow(dead_code)]

pub mod oracles;

use std::sync::OnceLock;

use ulab::harness::{gen_corpus, pretrain, validation_thresholds, Corpora, ExperimentConfig, PretrainConfig, Split};
use ulab::metrics::CorpusStats;
use ulab::model::{ModelConfig, ModelParams, Precision};

/// A small model memorized on a small corpus, shared by every test of a binary.
pub struct Fixture {
    pub corpora: Corpora,
    pub split: Split,
    pub params: ModelParams,
    pub thresholds: CorpusStats,
    pub cfg: ExperimentConfig,
}

pub fn model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq: 16,
        seed: 1,
    }
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let model = model_config();
        let corpora = gen_corpus(1, 24, 8, 16, model.vocab_size).unwrap();
        let cfg = ExperimentConfig {
            model,
            forget_count: 6,
            seq_len: 16,
            n_train: 24,
            n_val: 8,
            lr: 1e-3,
            batch_size: 2,
            max_unlearn_epochs: 4,
            metric_n: 2,
            seed: 0,
            pretrain: PretrainConfig {
                lr: 3e-3,
                batch_size: 8,
                eval_every: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let split = Split::from_corpora(&corpora, cfg.forget_count, cfg.seed).unwrap();
        let out = pretrain(&model, &cfg.pretrain, Precision::F64, &corpora.train, &split.forget, 0, |_| {}).unwrap();
        let thresholds = validation_thresholds(&out.params, &split.validation, cfg.metric_n).unwrap();
        Fixture {
            corpora,
            split,
            params: out.params,
            thresholds,
            cfg,
        }
    })
}

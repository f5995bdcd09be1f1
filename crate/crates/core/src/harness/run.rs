use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::report::{base_hash, EpochRecord, RunReport};
use super::{ExperimentConfig, PretrainConfig, Split};
use crate::adapters::{
    attach_default, attach_flora, estimate_fisher, relative_fisher, AdapterInit, AdapterSet, DEFAULT_FISHER_EPS,
    DEFAULT_ROW_FLOOR,
};
use crate::error::{param_err, Result, UlabError};
use crate::metrics::{corpus_stats, ma, perplexity, CorpusStats, LanguageModel, MetricReport, Predictor};
use crate::model::{forward, grads, init_params, step, AdamState, Batch, ModelConfig, ModelParams, Precision, TokenSequence};
use crate::numerics::Matrix;
use crate::objectives::{combined_loss, ObjectiveKind, ObjectiveSpec};

/// Sizes the global worker pool from `ULAB_THREADS` (unset: all cores).
/// Reductions are ordered, so results do not depend on the worker count.
pub fn init_thread_pool() -> Result<usize> {
    let threads = match std::env::var("ULAB_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| UlabError::Param(format!("ULAB_THREADS must be a positive integer, got `{v}`")))?,
        Err(_) => 0,
    };
    // a pool that already exists keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(rayon::current_num_threads())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Mean memorization accuracy over the watched set, on evaluation epochs.
    pub watch_ma: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    pub epochs: usize,
    pub watch_ma: f64,
    pub history: Vec<PretrainEpoch>,
}

fn mean_ma(model: &dyn Predictor, corpus: &[TokenSequence]) -> Result<f64> {
    let mut s = 0.0;
    for x in corpus {
        s += ma(model, x)?;
    }
    Ok(s / corpus.len() as f64)
}

/// Trains every parameter with the language-modeling loss until the mean
/// memorization accuracy over `watch` reaches the target.
pub fn pretrain(
    model: &ModelConfig,
    cfg: &PretrainConfig,
    precision: Precision,
    train: &[TokenSequence],
    watch: &[TokenSequence],
    seed: u64,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<PretrainOutcome> {
    if train.is_empty() || watch.is_empty() {
        return param_err("pretraining needs non-empty training and watch sets");
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 || !(cfg.lr > 0.0) {
        return param_err("pretraining needs a positive batch size, eval interval and learning rate");
    }
    let mut params = init_params(model)?;
    params.round_to(precision);
    let mut state = AdamState::new(precision);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6574);
    let lm = ObjectiveSpec::new(ObjectiveKind::Lm);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut last_ma = 0.0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (l, g) = grads(&params, None, lm, Batch::new(&batch))?;
            step(&mut params, None, &g, &mut state, cfg.lr)?;
            loss += l.total;
            batches += 1;
        }
        let watch_ma = if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            last_ma = mean_ma(&LanguageModel::new(&params, None), watch)?;
            Some(last_ma)
        } else {
            None
        };
        let rec = PretrainEpoch {
            epoch,
            loss: loss / batches as f64,
            watch_ma,
        };
        on_epoch(&rec);
        history.push(rec);
        if watch_ma.is_some_and(|m| m >= cfg.target_ma) {
            return Ok(PretrainOutcome {
                params,
                epochs: epoch,
                watch_ma: last_ma,
                history,
            });
        }
    }
    Err(UlabError::MemorizationFailed {
        epochs: cfg.max_epochs,
        ma: last_ma,
        target: cfg.target_ma,
    })
}

/// EL_n and MA means over the validation set; these become the frozen
/// stopping thresholds of a run.
pub fn validation_thresholds(params: &ModelParams, validation: &[TokenSequence], n: usize) -> Result<CorpusStats> {
    corpus_stats(&LanguageModel::new(params, None), validation, n)
}

/// Metrics of the forget set against frozen thresholds, plus retain and
/// held-out perplexity.
pub fn evaluate(
    params: &ModelParams,
    adapters: Option<&AdapterSet>,
    split: &Split,
    thresholds: &CorpusStats,
    epoch: usize,
) -> Result<MetricReport> {
    let model = LanguageModel::new(params, adapters);
    let forget = corpus_stats(&model, &split.forget, thresholds.n)?;
    let ppl_retain = perplexity(&model, &split.retain)?;
    let ppl_heldout = perplexity(&model, &split.heldout)?;
    MetricReport::new(epoch, forget, thresholds, ppl_retain, ppl_heldout)
}

/// Trainable share of all parameters the model holds: adapter parameters
/// over base plus adapter parameters, or 1 for full finetuning.
pub fn trainable_param_fraction(params: &ModelParams, adapters: Option<&AdapterSet>) -> f64 {
    match adapters {
        None => 1.0,
        Some(ad) => {
            let a = ad.param_count() as f64;
            a / (params.param_count() as f64 + a)
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub report: RunReport,
    /// Base parameters after the run; compensated in flora mode.
    pub params: ModelParams,
    pub adapters: Option<AdapterSet>,
}

fn objective_losses(params: &ModelParams, adapters: Option<&AdapterSet>, spec: ObjectiveSpec, split: &Split) -> Result<(f64, f64)> {
    let logits = |set: &[TokenSequence]| -> Result<Vec<Matrix>> { set.iter().map(|x| forward(params, adapters, x)).collect() };
    let fl = logits(&split.forget)?;
    let fs: Vec<_> = fl.iter().zip(&split.forget).map(|(l, x)| (l, x.as_slice())).collect();
    let (rl, rs);
    let retain = if spec.uses_retain {
        rl = logits(&split.retain)?;
        rs = rl.iter().zip(&split.retain).map(|(l, x)| (l, x.as_slice())).collect::<Vec<_>>();
        Some(rs.as_slice())
    } else {
        None
    };
    let b = combined_loss(spec, &fs, retain)?;
    Ok((b.forget_term, b.retain_term))
}

/// Runs the configured unlearning method from `pretrained` until the forget
/// set's EL_n and MA fall to the validation thresholds or the epoch cap.
pub fn unlearn(cfg: &ExperimentConfig, pretrained: &ModelParams, split: &Split, thresholds: &CorpusStats) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    if cfg.method == ObjectiveKind::Lm {
        return param_err("the language-modeling objective does not unlearn");
    }
    if thresholds.n != cfg.metric_n {
        return param_err(format!("thresholds use n = {}, config uses {}", thresholds.n, cfg.metric_n));
    }
    let start = Instant::now();
    let spec = ObjectiveSpec::new(cfg.method);
    let mut params = pretrained.clone();
    params.round_to(cfg.precision);

    let mut adapters = match &cfg.adapter {
        None => None,
        Some(a) if a.init == AdapterInit::Default => {
            let mut set = attach_default(&params, a, cfg.seed)?;
            for n in set.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>() {
                cfg.precision.round(set.factor_mut(&format!("{n}.lora_a")).expect("attached"));
            }
            Some(set)
        }
        Some(a) => {
            let f_forget = estimate_fisher(&params, &split.forget)?;
            let f_retain = estimate_fisher(&params, &split.retain)?;
            let f_rel = relative_fisher(&f_forget, &f_retain, DEFAULT_FISHER_EPS)?;
            let mut set = attach_flora(&mut params, a, &f_rel, DEFAULT_ROW_FLOOR)?;
            params.round_to(cfg.precision);
            for n in set.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>() {
                for f in ["lora_a", "lora_b"] {
                    cfg.precision.round(set.factor_mut(&format!("{n}.{f}")).expect("attached"));
                }
            }
            Some(set)
        }
    };
    let hash_before = base_hash(&params);
    let fraction = trainable_param_fraction(&params, adapters.as_ref());

    let (lf, lr0) = objective_losses(&params, adapters.as_ref(), spec, split)?;
    let first = evaluate(&params, adapters.as_ref(), split, thresholds, 0)?;
    let mut epochs_to_unlearn = first.unlearned.then_some(0);
    let mut epochs = vec![EpochRecord {
        metrics: first,
        loss_forget: lf,
        loss_retain: lr0,
    }];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x756e_6c65);
    let mut state = AdamState::new(cfg.precision);
    let mut forget_order: Vec<usize> = (0..split.forget.len()).collect();
    let mut retain_order: Vec<usize> = (0..split.retain.len()).collect();
    retain_order.shuffle(&mut rng);
    let mut retain_pos = 0;
    let mut steps = 0u64;

    let mut epoch = 0;
    while epochs_to_unlearn.is_none() && epoch < cfg.max_unlearn_epochs {
        epoch += 1;
        forget_order.shuffle(&mut rng);
        let (mut sum_f, mut sum_r, mut n_steps) = (0.0, 0.0, 0usize);
        for chunk in forget_order.chunks(cfg.batch_size) {
            let fb: Vec<TokenSequence> = chunk.iter().map(|&i| split.forget[i].clone()).collect();
            let rb: Vec<TokenSequence> = if spec.uses_retain {
                (0..chunk.len())
                    .map(|_| {
                        if retain_pos == retain_order.len() {
                            retain_order.shuffle(&mut rng);
                            retain_pos = 0;
                        }
                        retain_pos += 1;
                        split.retain[retain_order[retain_pos - 1]].clone()
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let batch = if spec.uses_retain { Batch::with_retain(&fb, &rb) } else { Batch::new(&fb) };
            let (loss, g) = grads(&params, adapters.as_ref(), spec, batch).map_err(|e| {
                UlabError::Numerical(format!("step {} of {} (epoch {epoch}): {e}", steps + 1, cfg.method.name()))
            })?;
            step(&mut params, adapters.as_mut(), &g, &mut state, cfg.lr)?;
            steps += 1;
            sum_f += loss.forget_term;
            sum_r += loss.retain_term;
            n_steps += 1;
        }
        let metrics = evaluate(&params, adapters.as_ref(), split, thresholds, epoch)?;
        if metrics.unlearned {
            epochs_to_unlearn = Some(epoch);
        }
        epochs.push(EpochRecord {
            metrics,
            loss_forget: sum_f / n_steps as f64,
            loss_retain: sum_r / n_steps as f64,
        });
    }

    let report = RunReport {
        method: cfg.method.name().to_string(),
        adapter: cfg.adapter_label().to_string(),
        seed: cfg.seed,
        epochs,
        epochs_to_unlearn,
        trainable_param_fraction: fraction,
        steps,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        base_hash_before: hash_before,
        base_hash_after: base_hash(&params),
    };
    Ok(UnlearnOutcome {
        report,
        params,
        adapters,
    })
}

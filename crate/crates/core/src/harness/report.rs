use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::MetricReport;
use crate::model::ModelParams;

pub const CSV_HEADER: &str = "epoch,el_n,ma,ppl_retain,ppl_heldout,loss_forget,loss_retain,unlearned";

#[derive(Serialize)]
struct CsvRow {
    epoch: usize,
    el_n: f64,
    ma: f64,
    ppl_retain: f64,
    ppl_heldout: f64,
    loss_forget: f64,
    loss_retain: f64,
    unlearned: bool,
}

/// Metrics after an epoch plus the mean training losses of that epoch.
/// Epoch 0 is measured before any step, with losses over the full sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub metrics: MetricReport,
    pub loss_forget: f64,
    pub loss_retain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub adapter: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// First epoch whose metrics met the stopping criterion; `None` if the
    /// epoch cap was reached first.
    pub epochs_to_unlearn: Option<usize>,
    pub trainable_param_fraction: f64,
    pub steps: u64,
    pub wall_clock_secs: f64,
    pub base_hash_before: String,
    pub base_hash_after: String,
}

impl RunReport {
    pub fn succeeded(&self) -> bool {
        self.epochs_to_unlearn.is_some()
    }

    pub fn before(&self) -> &MetricReport {
        &self.epochs.first().expect("reports hold the epoch-0 row").metrics
    }

    pub fn last(&self) -> &MetricReport {
        &self.epochs.last().expect("reports hold the epoch-0 row").metrics
    }

    /// Final retain perplexity relative to the pre-unlearning value.
    pub fn retain_ppl_increase(&self) -> f64 {
        self.last().ppl_retain - self.before().ppl_retain
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            let m = &e.metrics;
            w.serialize(CsvRow {
                epoch: m.epoch,
                el_n: m.el_n,
                ma: m.ma,
                ppl_retain: m.ppl_retain,
                ppl_heldout: m.ppl_heldout,
                loss_forget: e.loss_forget,
                loss_retain: e.loss_retain,
                unlearned: m.unlearned,
            })
            .expect("in-memory CSV write");
        }
        if self.epochs.is_empty() {
            return format!("{CSV_HEADER}\n");
        }
        String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV output is UTF-8")
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let last = self.last();
        serde_json::json!({
            "method": self.method,
            "adapter": self.adapter,
            "seed": self.seed,
            "epochs_to_unlearn": match self.epochs_to_unlearn {
                Some(e) => serde_json::json!(e),
                None => serde_json::json!("failed"),
            },
            "trainable_param_fraction": self.trainable_param_fraction,
            "final": {
                "el_n": last.el_n,
                "ma": last.ma,
                "ppl_retain": last.ppl_retain,
                "ppl_heldout": last.ppl_heldout,
            },
            "before": {
                "el_n": self.before().el_n,
                "ma": self.before().ma,
                "ppl_retain": self.before().ppl_retain,
                "ppl_heldout": self.before().ppl_heldout,
            },
            "thresholds": { "el_n": last.el_threshold, "ma": last.ma_threshold, "n": last.n },
            "steps": self.steps,
            "wall_clock_secs": self.wall_clock_secs,
            "base_hash_before": self.base_hash_before,
            "base_hash_after": self.base_hash_after,
            "epochs": self.epochs,
        })
    }
}

/// SHA-256 over every tensor's name, shape and little-endian values.
pub fn base_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for (name, m) in params.tensors() {
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

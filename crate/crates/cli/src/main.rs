use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ulab::adapters::{estimate_fisher, AdapterInit, AdapterSpec, AdapterTarget};
use ulab::harness::checkpoint::{load_adapters, load_model, save_adapters, save_fisher, save_model};
use ulab::harness::{
    evaluate, gen_corpus, init_thread_pool, pretrain, unlearn, validation_thresholds, Corpora, ExperimentConfig, Split,
};
use ulab::metrics::{CorpusStats, MetricReport};
use ulab::model::Precision;
use ulab::objectives::ObjectiveKind;

#[derive(Parser)]
#[command(name = "ulab", version, about = "Machine-unlearning lab for small causal language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train/validation/held-out corpora.
    Gen(Shared),
    /// Train a model until the forget set is memorized.
    Pretrain(Shared),
    /// Run an unlearning method against a pretrained model.
    Unlearn(Shared),
    /// Evaluate a model (and optional adapters) on the forget split.
    Eval {
        #[command(flatten)]
        shared: Shared,
        /// Adapter checkpoint to attach.
        #[arg(long)]
        adapters: Option<PathBuf>,
    },
    /// Dump empirical Fisher estimates of the forget and retain sets.
    Fisher(Shared),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ga,
    Gd,
    Ihl,
    IhlRetain,
}

impl From<Method> for ObjectiveKind {
    fn from(m: Method) -> Self {
        match m {
            Method::Ga => ObjectiveKind::Ga,
            Method::Gd => ObjectiveKind::Gd,
            Method::Ihl => ObjectiveKind::Ihl,
            Method::IhlRetain => ObjectiveKind::IhlRetain,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AdapterMode {
    None,
    Lora,
    Flora,
}

#[derive(Args, Clone)]
struct Shared {
    /// Experiment config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Working directory for corpora, checkpoints and reports.
    #[arg(long, default_value = "ulab-out")]
    out: PathBuf,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long, value_enum)]
    adapter: Option<AdapterMode>,
    #[arg(long)]
    rank: Option<usize>,
    /// Comma list of q,k,v,o,ffn.
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    metric_n: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Model checkpoint (defaults to <out>/model.ulab).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Corpus file (defaults to <out>/corpus.json).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

impl Shared {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        if let Some(m) = self.method {
            cfg.method = m.into();
        }
        if let Some(n) = self.metric_n {
            cfg.metric_n = n;
        }
        if let Some(e) = self.max_epochs {
            cfg.max_unlearn_epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        let mut spec = cfg.adapter.clone();
        match self.adapter {
            Some(AdapterMode::None) => spec = None,
            Some(mode) => {
                let init = match mode {
                    AdapterMode::Flora => AdapterInit::Flora,
                    _ => AdapterInit::Default,
                };
                let base = spec.unwrap_or_else(|| AdapterSpec::qv_ffn(16, init));
                spec = Some(AdapterSpec { init, ..base });
            }
            None => {}
        }
        if let Some(s) = spec.as_mut() {
            if let Some(r) = self.rank {
                s.rank = r;
            }
            if let Some(t) = &self.targets {
                s.targets = AdapterTarget::parse_list(t)?;
            }
        } else if self.rank.is_some() || self.targets.is_some() {
            bail!("--rank and --targets need an adapter mode (--adapter lora|flora)");
        }
        cfg.adapter = spec;
        cfg.validate()?;
        Ok(cfg)
    }

    fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out.join("model.ulab"))
    }

    fn corpus_path(&self) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| self.out.join("corpus.json"))
    }

    fn corpora(&self) -> Result<Corpora> {
        let p = self.corpus_path();
        let text = fs::read_to_string(&p).with_context(|| format!("reading corpus {}", p.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Validation thresholds recorded by `pretrain`, if they use order `n`.
fn frozen_thresholds(out: &Path, n: usize) -> Result<Option<CorpusStats>> {
    let p = out.join("before.json");
    if !p.exists() {
        return Ok(None);
    }
    let before: MetricReport = serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?;
    Ok((before.n == n).then_some(CorpusStats {
        n,
        el_n: before.el_threshold,
        ma: before.ma_threshold,
    }))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let threads = init_thread_pool()?;
    match cli.command {
        Command::Gen(sh) => {
            let cfg = sh.experiment()?;
            let corpora = gen_corpus(cfg.seed, cfg.n_train, cfg.n_val, cfg.seq_len, cfg.model.vocab_size)?;
            write_json(&sh.corpus_path(), &corpora)?;
            println!(
                "wrote {} train, {} validation, {} held-out sequences to {}",
                corpora.train.len(),
                corpora.validation.len(),
                corpora.heldout.len(),
                sh.corpus_path().display()
            );
        }
        Command::Pretrain(sh) => {
            let cfg = sh.experiment()?;
            let corpora = sh.corpora()?;
            let split = Split::from_corpora(&corpora, cfg.forget_count, cfg.seed)?;
            println!("pretraining on {} sequences with {threads} worker(s)", corpora.train.len());
            let out = pretrain(&cfg.model, &cfg.pretrain, cfg.precision, &corpora.train, &split.forget, cfg.seed, |e| {
                match e.watch_ma {
                    Some(m) => println!("epoch {:>4}  loss {:.4}  forget MA {:.4}", e.epoch, e.loss, m),
                    None => println!("epoch {:>4}  loss {:.4}", e.epoch, e.loss),
                }
            })?;
            save_model(&sh.model_path(), &out.params, cfg.precision)?;
            let thresholds = validation_thresholds(&out.params, &split.validation, cfg.metric_n)?;
            let before = evaluate(&out.params, None, &split, &thresholds, 0)?;
            write_json(&sh.out.join("before.json"), &before)?;
            println!(
                "memorized after {} epochs (forget MA {:.4}); saved {}",
                out.epochs,
                out.watch_ma,
                sh.model_path().display()
            );
        }
        Command::Unlearn(sh) => {
            let cfg = sh.experiment()?;
            let corpora = sh.corpora()?;
            let (params, _) = load_model(&sh.model_path())?;
            let split = Split::from_corpora(&corpora, cfg.forget_count, cfg.seed)?;
            let thresholds = validation_thresholds(&params, &split.validation, cfg.metric_n)?;
            let outcome = unlearn(&cfg, &params, &split, &thresholds)?;
            let r = &outcome.report;
            let dir = sh.out.join(format!("{}-{}-s{}", r.method, r.adapter, r.seed));
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("report.csv"), r.to_csv())?;
            write_json(&dir.join("summary.json"), &r.summary_json())?;
            save_model(&dir.join("model.ulab"), &outcome.params, cfg.precision)?;
            if let Some(ad) = &outcome.adapters {
                save_adapters(&dir.join("adapters.ulab"), ad, cfg.precision)?;
            }
            for e in &r.epochs {
                let m = &e.metrics;
                println!(
                    "epoch {:>2}  EL{} {:.4}  MA {:.4}  ppl retain {:.3}  ppl held-out {:.2}{}",
                    m.epoch,
                    m.n,
                    m.el_n,
                    m.ma,
                    m.ppl_retain,
                    m.ppl_heldout,
                    if m.unlearned { "  unlearned" } else { "" }
                );
            }
            println!("reports in {}", dir.display());
            if !r.succeeded() {
                eprintln!("unlearning did not meet the stopping criterion within {} epochs", cfg.max_unlearn_epochs);
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval { shared: sh, adapters } => {
            let cfg = sh.experiment()?;
            let corpora = sh.corpora()?;
            let (params, _) = load_model(&sh.model_path())?;
            let ad = adapters.as_deref().map(load_adapters).transpose()?;
            let split = Split::from_corpora(&corpora, cfg.forget_count, cfg.seed)?;
            let thresholds = match frozen_thresholds(&sh.out, cfg.metric_n)? {
                Some(t) => t,
                None => {
                    eprintln!("no before.json for n = {}; thresholds from the evaluated model", cfg.metric_n);
                    let merged = match &ad {
                        Some(a) => ulab::adapters::merge(&params, a)?,
                        None => params.clone(),
                    };
                    validation_thresholds(&merged, &split.validation, cfg.metric_n)?
                }
            };
            let report = evaluate(&params, ad.as_ref(), &split, &thresholds, 0)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Fisher(sh) => {
            let cfg = sh.experiment()?;
            let corpora = sh.corpora()?;
            let (params, _) = load_model(&sh.model_path())?;
            let split = Split::from_corpora(&corpora, cfg.forget_count, cfg.seed)?;
            save_fisher(&sh.out.join("fisher_forget.ulab"), &estimate_fisher(&params, &split.forget)?)?;
            save_fisher(&sh.out.join("fisher_retain.ulab"), &estimate_fisher(&params, &split.retain)?)?;
            println!("wrote fisher_forget.ulab and fisher_retain.ulab to {}", sh.out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

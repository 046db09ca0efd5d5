use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use clsp_core::checkpoint::{load_checkpoint, save_checkpoint};
use clsp_core::config::RunConfig;
use clsp_core::connector::write_probe_csv;
use clsp_core::dataset::{read_dataset, write_dataset};
use clsp_core::encoders::EncoderVariant;
use clsp_core::evaluation::export_embeddings;
use clsp_core::pipeline::{self, states_of, Model};
use clsp_core::schema::TargetSet;
use clsp_core::state::StateTextPair;
use clsp_core::training::write_metrics_csv;

#[derive(Parser)]
#[command(name = "clsp", version, about = "Contrastive state-text pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.epochs (and pretrain.epochs for pretrain).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides train.target.
    #[arg(long)]
    target: Option<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
            cfg.pretrain.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(t) = &self.target {
            cfg.train.target = TargetSet::parse(t)?;
        }
        cfg.validate()?;
        eprintln!("effective config:\n{}", cfg.to_toml());
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic state-text pairs as JSON Lines.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Classification pre-training of the state encoder.
    Pretrain {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-item accuracy log (CSV).
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive alignment of the state and text encoders.
    Align {
        #[arg(long)]
        variant: String,
        /// Pre-training checkpoint; required unless the variant is clip-baseline.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "align.ckpt")]
        out: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        metrics: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Retrieval report (JSON) on the test split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        /// Evaluate on every record instead of the test split.
        #[arg(long)]
        all: bool,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the connector and probe on an encoder checkpoint and reports per-item errors.
    Probe {
        /// Encoder checkpoint; omit to probe a random-init encoder of --variant.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "rffm")]
        variant: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "probe.csv")]
        out: PathBuf,
        /// Also save the trained probe checkpoint.
        #[arg(long)]
        save: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Exports state embeddings with ground-truth columns (CSV).
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs several variants / batch sizes / data fractions and tabulates R@K.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "clip-baseline,baseline,msn,npe,rff,rffm")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Vec<usize>,
        /// Fractions of the training split to use.
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        /// Classifier target sets for pre-training.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn csv_with_config(path: &Path, cfg: &RunConfig) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "# seed = {}", cfg.train.seed)?;
    for line in cfg.to_toml().lines() {
        writeln!(w, "# {line}")?;
    }
    Ok(w)
}

fn split_data(cfg: &RunConfig, data: &Path) -> Result<(Vec<StateTextPair>, Vec<StateTextPair>)> {
    let pairs = read_dataset(data)?;
    Ok(pipeline::split(cfg, &pairs)?)
}

fn config_of(meta: &serde_json::Value) -> Result<RunConfig> {
    Ok(serde_json::from_value(meta.clone()).context("checkpoint config")?)
}

fn gen_data(n: Option<usize>, seed: Option<u64>, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = n {
        cfg.data.n = n;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    eprintln!("effective config:\n{}", cfg.to_toml());
    if cfg.data.n == 0 {
        bail!("--n must be at least 1");
    }
    write_dataset(out, &pipeline::generate(&cfg))?;
    eprintln!("wrote {} pairs to {}", cfg.data.n, out.display());
    Ok(())
}

fn log_params(ckpt: &clsp_core::checkpoint::Checkpoint) {
    for prefix in ["state.", "text.", "head.", "connector.", "probe."] {
        let n = ckpt.tensors.filter_prefix(prefix).num_scalars();
        if n > 0 {
            eprintln!("parameters {prefix}*: {n}");
        }
    }
}

fn pretrain(variant: &str, data: &Path, out: &Path, metrics: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let variant = EncoderVariant::parse(variant)?;
    let (train, test) = split_data(&cfg, data)?;
    let (outcome, ckpt) = pipeline::pretrain(variant, &cfg, &states_of(&train), &states_of(&test))?;
    log_params(&ckpt);
    save_checkpoint(out, &ckpt)?;
    if let Some(path) = metrics {
        let mut w = csv_with_config(path, &cfg)?;
        let items: Vec<String> = outcome.log.first().map(|r| r.accuracy.keys().cloned().collect()).unwrap_or_default();
        write!(w, "step,loss,mean_accuracy")?;
        for item in &items {
            write!(w, ",acc_{item}")?;
        }
        writeln!(w)?;
        for r in &outcome.log {
            write!(w, "{},{},{}", r.step, r.loss, r.mean_accuracy)?;
            for item in &items {
                write!(w, ",{}", r.accuracy[item])?;
            }
            writeln!(w)?;
        }
        w.flush()?;
    }
    eprintln!("pretrained {variant} for {} steps, final loss {:.4}", outcome.steps, outcome.final_loss);
    Ok(())
}

fn align(variant: &str, init: Option<&Path>, data: &Path, out: &Path, metrics: &Path, common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let variant = EncoderVariant::parse(variant)?;
    let init = init.map(load_checkpoint).transpose()?;
    let (train, test) = split_data(&cfg, data)?;
    let (outcome, ckpt) = pipeline::align(variant, &cfg, init.as_ref(), &train, &test)?;
    log_params(&ckpt);
    save_checkpoint(out, &ckpt)?;
    let w = csv_with_config(metrics, &cfg)?;
    write_metrics_csv(w, &outcome.log)?;
    eprintln!("aligned {variant} for {} steps", outcome.steps);
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, k: &[usize], all: bool, out: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(ckpt)?;
    let cfg = config_of(&ckpt.meta.config)?;
    let pairs = if all {
        read_dataset(data)?
    } else {
        split_data(&cfg, data)?.1
    };
    let model = Model::from_checkpoint(&ckpt)?;
    let report = model.evaluate(&pairs, k)?;
    let mut json = serde_json::json!({
        "variant": ckpt.meta.variant,
        "seed": ckpt.meta.seed,
        "config": ckpt.meta.config,
        "queries": report.queries,
        "references": report.references,
        "top1_mae": report.top1_mae,
    });
    for (k, v) in &report.r_at_k {
        json[format!("r_at_{k}")] = serde_json::json!(v);
    }
    let text = serde_json::to_string_pretty(&json)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => writeln!(std::io::stdout(), "{text}")?,
    }
    Ok(())
}

fn probe(ckpt: Option<&Path>, variant: &str, data: &Path, out: &Path, save: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let (train, test) = split_data(&cfg, data)?;
    let (variant, schema, params, label) = match ckpt {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let schema = ckpt.schema()?;
            (ckpt.meta.variant, schema, ckpt.tensors, ckpt.meta.variant.to_string())
        }
        None => {
            let variant = EncoderVariant::parse(variant)?;
            let (schema, params) = pipeline::random_state_params(variant, &cfg)?;
            (variant, schema, params, format!("{variant}-random"))
        }
    };
    let (outcome, table) = pipeline::probe(variant, &cfg, &schema, &params, &states_of(&train), &states_of(&test))?;
    let mut tables = Vec::new();
    if let Some(s1) = &outcome.stage1 {
        tables.push((format!("{label}-frozen"), s1.clone()));
    }
    tables.push((label, table));
    write_probe_csv(csv_with_config(out, &cfg)?, &tables)?;
    if let Some(path) = save {
        save_checkpoint(path, &pipeline::probe_checkpoint(&cfg, variant, &schema, &outcome))?;
    }
    Ok(())
}

fn embed(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let states = states_of(&read_dataset(data)?);
    let emb = model.encode_states(&states)?;
    export_embeddings(out, &emb, model.state.dims.embed, &states)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    data: &Path,
    out_dir: &Path,
    variants: &[String],
    batch_sizes: &[usize],
    fractions: &[f64],
    targets: &[String],
    common: &Common,
) -> Result<()> {
    let base = common.load()?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let (train, test) = split_data(&base, data)?;
    let batch_sizes = if batch_sizes.is_empty() { vec![base.train.batch_size] } else { batch_sizes.to_vec() };
    let fractions = if fractions.is_empty() { vec![1.0] } else { fractions.to_vec() };
    let targets = if targets.is_empty() { vec![base.train.target.name().to_string()] } else { targets.to_vec() };
    let mut summary = csv_with_config(&out_dir.join("summary.csv"), &base)?;
    writeln!(summary, "variant,batch_size,fraction,target,r_at_1,r_at_5,r_at_10")?;
    for name in variants {
        let variant = EncoderVariant::parse(name)?;
        for &b in &batch_sizes {
            for &f in &fractions {
                if !(f > 0.0 && f <= 1.0) {
                    bail!("fraction {f} not in (0, 1]");
                }
                for t in &targets {
                    let mut cfg = base.clone();
                    cfg.train.batch_size = b;
                    cfg.train.target = TargetSet::parse(t)?;
                    let n = ((train.len() as f64 * f).round() as usize).max(1);
                    let (_, outcome, ckpt) = pipeline::train_variant(variant, &cfg, &train[..n], &test)?;
                    let report = pipeline::evaluate_checkpoint(&ckpt, &test)?;
                    let run = out_dir.join(format!("{variant}_b{b}_f{f}_{t}"));
                    std::fs::create_dir_all(&run)?;
                    save_checkpoint(&run.join("align.ckpt"), &ckpt)?;
                    write_metrics_csv(csv_with_config(&run.join("metrics.csv"), &cfg)?, &outcome.log)?;
                    writeln!(
                        summary,
                        "{variant},{b},{f},{t},{},{},{}",
                        report.recall(1),
                        report.recall(5),
                        report.recall(10)
                    )?;
                    eprintln!("{variant} b={b} f={f} target={t}: R@1 {:.3} R@10 {:.3}", report.recall(1), report.recall(10));
                }
            }
        }
    }
    summary.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { n, seed, out, config } => gen_data(*n, *seed, out, config.as_deref()),
        Command::Pretrain { variant, data, out, metrics, common } => pretrain(variant, data, out, metrics.as_deref(), common),
        Command::Align { variant, init, data, out, metrics, common } => align(variant, init.as_deref(), data, out, metrics, common),
        Command::Eval { ckpt, data, k, all, out } => eval(ckpt, data, k, *all, out.as_deref()),
        Command::Probe { ckpt, variant, data, out, save, common } => probe(ckpt.as_deref(), variant, data, out, save.as_deref(), common),
        Command::Embed { ckpt, data, out } => embed(ckpt, data, out),
        Command::Ablate { data, out_dir, variants, batch_sizes, fractions, targets, common } => {
            ablate(data, out_dir, variants, batch_sizes, fractions, targets, common)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

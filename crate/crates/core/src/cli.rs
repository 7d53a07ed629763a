//! Command-line front end. The binary only sets up logging and calls [`run`].
//!
//! A `--config FILE` JSON object supplies flag values by name (`learning-rate`
//! or `learning_rate`); flags given on the command line take precedence, and
//! `TSVLAB_SEED` is the seed of last resort.

use std::collections::HashSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};
use serde_json::Value;

use crate::backend::{open_backend, BackendDescriptor, EmbeddingBackend, InProcessBackend};
use crate::data::{load_dataset, save_dataset, synth_generate, Class, Dataset, SynthConfig};
use crate::detect::{detect, evaluate, norm_stats, score_dataset, transfer_evaluate, NormStats};
use crate::error::{Result, TsvError};
use crate::experiment::{ablate_jobs, format_table, split_dataset, ExperimentSetup, Sweep};
use crate::io::write_atomic_str;
use crate::model::{Location, ModelConfig, ModelWeights};
use crate::protocol::serve;
use crate::train::{save_train_log, train, Checkpoint, TrainConfig, WMode};

fn probability(s: &str) -> std::result::Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is not a probability in [0, 1]"))
    }
}

fn location(s: &str) -> std::result::Result<Location, String> {
    s.parse().map_err(|e: TsvError| e.to_string())
}

fn w_mode(s: &str) -> std::result::Result<WMode, String> {
    s.parse().map_err(|e: TsvError| e.to_string())
}

fn sweep(s: &str) -> std::result::Result<Sweep, String> {
    s.parse().map_err(|e: TsvError| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "tsvlab", version, about = "Truthfulness separator vectors on a toy transformer")]
pub struct Cli {
    /// JSON file with default flag values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-template dataset
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Train a steering vector and prototypes
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Print `id<TAB>score` for every record
    #[command(args_override_self = true)]
    Score(ScoreArgs),
    /// Evaluate a checkpoint on a labeled dataset
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Retrain once per value of one knob and tabulate AUROC
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
    /// Last-token embedding norm statistics
    #[command(args_override_self = true)]
    InspectNorms(NormArgs),
    /// Serve the toy model over the external-backend protocol on stdin/stdout
    #[command(args_override_self = true)]
    ServeToy(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    #[arg(long, default_value_t = 0.25, value_parser = probability)]
    pub pi: f64,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: u32,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = SynthConfig::default().template_noise, value_parser = probability)]
    pub template_noise: f64,
    #[arg(long, env = "TSVLAB_SEED", default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = ModelConfig::default().n_layers)]
    pub n_layers: usize,
    #[arg(long, default_value_t = ModelConfig::default().d_model)]
    pub d_model: usize,
    #[arg(long, default_value_t = ModelConfig::default().n_heads)]
    pub n_heads: usize,
    #[arg(long, default_value_t = ModelConfig::default().max_seq_len)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = ModelConfig::default().rmsnorm_eps)]
    pub rmsnorm_eps: f64,
    #[arg(long, default_value_t = ModelConfig::default().embedding_std)]
    pub embedding_std: f64,
    #[arg(long, default_value_t = ModelConfig::default().seed)]
    pub model_seed: u64,
}

impl ModelArgs {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            vocab_size,
            max_seq_len: self.max_seq_len,
            rmsnorm_eps: self.rmsnorm_eps,
            embedding_std: self.embedding_std,
            seed: self.model_seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = TrainConfig::default().lambda)]
    pub lambda: f64,
    #[arg(long, default_value_t = TrainConfig::default().kappa)]
    pub kappa: f64,
    #[arg(long, default_value_t = TrainConfig::default().ema_decay)]
    pub ema_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().epsilon)]
    pub epsilon: f64,
    #[arg(long, default_value_t = TrainConfig::default().sinkhorn_iters)]
    pub sinkhorn_iters: usize,
    #[arg(long, default_value_t = TrainConfig::default().n_initial_epochs)]
    pub n_initial_epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().n_augmented_epochs)]
    pub n_augmented_epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().adam_beta1)]
    pub adam_beta1: f64,
    #[arg(long, default_value_t = TrainConfig::default().adam_beta2)]
    pub adam_beta2: f64,
    #[arg(long, default_value_t = TrainConfig::default().adam_eps)]
    pub adam_eps: f64,
    /// Number of confident pseudo-labeled examples to keep (K)
    #[arg(long, default_value_t = TrainConfig::default().k_select)]
    pub k_select: usize,
    #[arg(long, default_value_t = TrainConfig::default().n_exemplars)]
    pub n_exemplars: usize,
    #[arg(long, default_value_t = TrainConfig::default().layer)]
    pub layer: usize,
    /// residual, attn_output or mlp_output
    #[arg(long, default_value = "residual", value_parser = location)]
    pub location: Location,
    #[arg(long, env = "TSVLAB_SEED", default_value_t = 7)]
    pub seed: u64,
    /// exemplar, uniform or oracle
    #[arg(long, default_value = "exemplar", value_parser = w_mode)]
    pub w_mode: WMode,
    #[arg(long, default_value_t = TrainConfig::default().v_init_scale)]
    pub v_init_scale: f64,
    /// Keep v at zero (unsteered baseline)
    #[arg(long)]
    pub freeze_v: bool,
    #[arg(long)]
    pub hard_pseudo_labels: bool,
    #[arg(long)]
    pub ema_recompute: bool,
}

impl TrainFlags {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            kappa: self.kappa,
            ema_decay: self.ema_decay,
            epsilon: self.epsilon,
            sinkhorn_iters: self.sinkhorn_iters,
            n_initial_epochs: self.n_initial_epochs,
            n_augmented_epochs: self.n_augmented_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            k_select: self.k_select,
            n_exemplars: self.n_exemplars,
            layer: self.layer,
            location: self.location,
            seed: self.seed,
            w_mode: self.w_mode,
            v_init_scale: self.v_init_scale,
            freeze_v: self.freeze_v,
            hard_pseudo_labels: self.hard_pseudo_labels,
            ema_recompute: self.ema_recompute,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled dataset; split into exemplars, unlabeled pool and test
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (JSON lines)
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write the held-out test split here
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    /// Share of the non-exemplar records held out for testing
    #[arg(long, default_value_t = 0.5, value_parser = probability)]
    pub test_fraction: f64,
    /// External adapter command line, e.g. "python -m adapter --model m"
    #[arg(long)]
    pub adapter: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Append a 0/1 decision column thresholded at this score
    #[arg(long, value_parser = probability)]
    pub zeta: Option<f64>,
    /// Override the checkpoint's steering strength
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub adapter: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labeled test dataset
    #[arg(long)]
    pub data: PathBuf,
    /// Write the JSON report here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset the checkpoint was trained on; its ids must not appear in the test set
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Name of the training dataset, marking this as a transfer evaluation
    #[arg(long)]
    pub source: Option<String>,
    /// Name of the test dataset (defaults to the --data path)
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub adapter: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// layer, strength, exemplars or k
    #[arg(long, value_parser = sweep)]
    pub sweep: Sweep,
    /// Comma-separated values
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub values: Vec<f64>,
    /// Labeled dataset; synthesized with the generator defaults when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Records to synthesize when --data is absent
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    #[arg(long, default_value_t = 0.5, value_parser = probability)]
    pub test_fraction: f64,
    /// Write the table here as well as to stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Independent runs to execute in parallel
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct NormArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Report steered and unsteered norms for this checkpoint's backend
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

/// Flags from the config file, placed before the command line's own so the
/// latter override them.
fn config_flags(path: &Path, sub: &clap::Command) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path)?;
    let obj: serde_json::Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| TsvError::Config(format!("config file {}: {e}", path.display())))?;
    let all_longs: HashSet<String> = Cli::command()
        .get_subcommands()
        .flat_map(|s| s.get_arguments().filter_map(|a| a.get_long().map(str::to_string)).collect::<Vec<_>>())
        .collect();
    let mut out = Vec::new();
    for (key, value) in obj {
        let flag = key.replace('_', "-");
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(flag.as_str())) else {
            if all_longs.contains(&flag) {
                continue;
            }
            return Err(TsvError::Config(format!("unknown config key {key:?}")));
        };
        let text = match &value {
            Value::Bool(b) if matches!(arg.get_action(), ArgAction::SetTrue) => {
                if *b {
                    out.push(OsString::from(format!("--{flag}")));
                }
                continue;
            }
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            Value::Null | Value::Object(_) => {
                return Err(TsvError::Config(format!("config key {key:?} must be a scalar or a list")))
            }
        };
        out.push(OsString::from(format!("--{flag}={text}")));
    }
    Ok(out)
}

/// Rewrites argv so config-file values precede the user's flags.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config = None;
    let mut sub_pos = None;
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if a == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if sub_pos.is_none() && !a.starts_with('-') {
            sub_pos = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(pos)) = (config, sub_pos) else {
        return Ok(argv);
    };
    let cmd = Cli::command();
    let name = argv[pos].to_string_lossy().to_string();
    let Some(sub) = cmd.find_subcommand(&name) else {
        return Ok(argv);
    };
    let extra = config_flags(&path, sub)?;
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 2 for usage errors, 1 for everything else.
pub fn run(argv: Vec<OsString>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn adapter_descriptor(cmd: &str) -> Result<BackendDescriptor> {
    let parts: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
    if parts.is_empty() {
        return Err(TsvError::Config("empty --adapter command".into()));
    }
    Ok(BackendDescriptor::External { command: parts })
}

fn checkpoint_backend(ckpt: &Checkpoint, adapter: Option<&str>) -> Result<Box<dyn EmbeddingBackend>> {
    let desc = match adapter {
        Some(cmd) => adapter_descriptor(cmd)?,
        None => ckpt.backend.clone(),
    };
    let backend = open_backend(&desc)?;
    ckpt.check_backend(backend.as_ref())?;
    Ok(backend)
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Score(a) => cmd_score(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::InspectNorms(a) => cmd_inspect_norms(a, out),
        Command::ServeToy(a) => cmd_serve_toy(a),
    }
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = SynthConfig {
        vocab_size: a.vocab_size,
        seq_len: a.seq_len,
        prompt_len: a.prompt_len,
        pi: a.pi,
        template_noise: a.template_noise,
        seed: a.seed,
    };
    let d = synth_generate(&cfg, a.count)?;
    save_dataset(&d, &a.out)?;
    writeln!(
        out,
        "wrote {} records ({} hallucinated) to {}",
        d.len(),
        d.count(Class::Hallucinated),
        a.out.display()
    )?;
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let cfg = a.train.to_config();
    let splits = split_dataset(&data, cfg.n_exemplars, a.test_fraction, cfg.seed)?;
    let mut backend: Box<dyn EmbeddingBackend> = match &a.adapter {
        Some(cmd) => open_backend(&adapter_descriptor(cmd)?)?,
        None => Box::new(InProcessBackend::new(&a.model.to_config(data.vocab_size() as usize))?),
    };
    let (pool, hidden) = splits.pool.unlabeled_view();
    let hidden = (hidden.len() == pool.len()).then_some(&hidden);
    let outcome = train(&cfg, backend.as_mut(), &splits.exemplars, &pool, hidden)?;
    outcome.checkpoint.save(&a.out)?;
    if let Some(p) = &a.log {
        save_train_log(&outcome.log, p)?;
    }
    if let Some(p) = &a.test_out {
        save_dataset(&splits.test, p)?;
    }
    info!("checkpoint written to {}", a.out.display());
    if let Some(acc) = outcome.pl_acc {
        info!("pseudo-label accuracy {acc:.6}");
    }
    if splits.test.is_empty() {
        warn!("no held-out records; skipping evaluation");
        return Ok(());
    }
    let mut train_ids = splits.exemplars.ids();
    train_ids.extend(outcome.selection.ids().map(str::to_string));
    match evaluate(&outcome.checkpoint, backend.as_mut(), &splits.test, Some(&train_ids)) {
        Ok(report) => writeln!(out, "AUROC={:.6}", report.auroc)?,
        Err(e @ (TsvError::SingleClass | TsvError::MissingLabels(_))) => {
            warn!("held-out split cannot be evaluated: {e}")
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

fn cmd_score(a: ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let mut backend = checkpoint_backend(&ckpt, a.adapter.as_deref())?;
    let scores = score_dataset(&ckpt, backend.as_mut(), &data, a.lambda)?;
    for s in scores {
        match a.zeta {
            Some(z) => writeln!(out, "{}\t{}\t{}", s.id, s.score, detect(s.score, z))?,
            None => writeln!(out, "{}\t{}", s.id, s.score)?,
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let mut backend = checkpoint_backend(&ckpt, a.adapter.as_deref())?;
    let report = match &a.source {
        Some(src) => {
            if let Some(p) = &a.train_data {
                check_disjoint(&load_dataset(p)?, &data)?;
            }
            let target = a.target.clone().unwrap_or_else(|| a.data.display().to_string());
            transfer_evaluate(&ckpt, backend.as_mut(), &data, src, &target)?
        }
        None => {
            let ids = match &a.train_data {
                Some(p) => Some(load_dataset(p)?.ids()),
                None => None,
            };
            evaluate(&ckpt, backend.as_mut(), &data, ids.as_ref())?
        }
    };
    if let Some(p) = &a.out {
        let mut json = serde_json::to_string_pretty(&report).map_err(|e| TsvError::Corrupt(e.to_string()))?;
        json.push('\n');
        write_atomic_str(p, &json)?;
    }
    writeln!(out, "AUROC={:.6}", report.auroc)?;
    Ok(())
}

fn check_disjoint(train: &Dataset, test: &Dataset) -> Result<()> {
    let ids = train.ids();
    match test.records().iter().find(|r| ids.contains(&r.id)) {
        Some(r) => Err(TsvError::Leakage(r.id.clone())),
        None => Ok(()),
    }
}

fn cmd_ablate(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    let data = match &a.data {
        Some(p) => load_dataset(p)?,
        None => synth_generate(
            &SynthConfig {
                seed: a.train.seed,
                ..Default::default()
            },
            a.count,
        )?,
    };
    let setup = ExperimentSetup {
        synth: SynthConfig::default(),
        model: a.model.to_config(data.vocab_size() as usize),
        train: a.train.to_config(),
        n_records: data.len(),
        test_fraction: a.test_fraction,
    };
    let rows = ablate_jobs(&setup, &data, a.sweep, &a.values, a.jobs)?;
    let table = format_table(&rows);
    if let Some(p) = &a.out {
        write_atomic_str(p, &table)?;
    }
    out.write_all(table.as_bytes())?;
    Ok(())
}

fn cmd_inspect_norms(a: NormArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let report = match &a.ckpt {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let mut backend = checkpoint_backend(&ckpt, None)?;
            let r = crate::detect::norm_report(backend.as_mut(), &ckpt, &data)?;
            serde_json::to_value(r)
        }
        None => {
            let mut backend = InProcessBackend::new(&a.model.to_config(data.vocab_size() as usize))?;
            let st: NormStats = norm_stats(&mut backend, None, &data, a.batch_size)?;
            serde_json::to_value(serde_json::json!({ "unsteered": st }))
        }
    }
    .map_err(|e| TsvError::Corrupt(e.to_string()))?;
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| TsvError::Corrupt(e.to_string()))?;
    json.push('\n');
    if let Some(p) = &a.out {
        write_atomic_str(p, &json)?;
    }
    out.write_all(json.as_bytes())?;
    Ok(())
}

fn cmd_serve_toy(a: ServeArgs) -> Result<()> {
    let weights = Arc::new(ModelWeights::init(&a.model.to_config(a.vocab_size))?);
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve(weights, stdin.lock(), stdout.lock())
}

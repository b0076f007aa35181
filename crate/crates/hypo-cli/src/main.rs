//! Command-line experiment pipelines: dataset generation, training,
//! evaluation, distribution-shift metrics, inequality verification, and
//! gradient checking.
//!
//! Every subcommand writes `resolved_config.json` next to its outputs;
//! re-running with `--config <that file>` (plus a fresh `--out`) reproduces
//! the outputs byte for byte. All randomness flows from `--seed`.
//!
//! Exit codes: 0 success, 1 I/O or data error, 2 invalid configuration,
//! 3 verification failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hypo_core::checkpoint::{Checkpoint, Method};
use hypo_core::data::{
    self, default_preset, generate, load_csv, save_csv, standard_split, EnvRole, GenerateConfig,
    ShiftKind, ShiftSpec,
};
use hypo_core::error::HypoError;
use hypo_core::gradcheck::{self, CheckSpec, REL_TOL};
use hypo_core::metrics::{
    dump_embeddings, epsilon_hat, evaluate, save_dump, separation_estimate, variation_estimate,
    Classifier, EmbeddingDump, EvalOutcome, RhoMetric, SinkhornConfig, VariationCell,
};
use hypo_core::model::PrototypeMode;
use hypo_core::theory::{self, LemmaReport};
use hypo_core::train::{self, init_state, train_epoch, LrSchedule, TrainConfig, TrainState};
use hypo_core::Result;

#[derive(Parser)]
#[command(
    name = "hypo",
    about = "Hyperspherical prototypical learning: training, metrics, and verification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-environment dataset (CSV + manifest).
    GenData(GenDataArgs),
    /// Train the prototype objective or the cross-entropy baseline.
    Train(TrainArgs),
    /// Per-environment accuracy and worst-environment error of a checkpoint.
    Eval(EvalArgs),
    /// Variation/separation/sup-variation/alignment metrics of a checkpoint.
    Metrics(MetricsArgs),
    /// Inequality verifiers and the separation-optimality check.
    Verify(VerifyArgs),
    /// Analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Verify(args) => cmd_verify(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    };
    let code = match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    };
    std::process::exit(code);
}

fn exit_code(err: &HypoError) -> i32 {
    match err {
        HypoError::InvalidSpec(_) | HypoError::InvalidConfig(_) => 2,
        _ => 1,
    }
}

#[derive(Serialize, Deserialize)]
struct ResolvedConfig<T> {
    command: String,
    args: T,
}

fn write_resolved<T: Serialize>(command: &str, args: &T, out_dir: &Path) -> Result<()> {
    let envelope = ResolvedConfig {
        command: command.to_string(),
        args,
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("resolved_config.json"),
        serde_json::to_string_pretty(&envelope)?,
    )?;
    Ok(())
}

/// Replaces the CLI arguments wholesale with a previously written resolved
/// config; only `--out` survives from the command line.
fn maybe_load<T: DeserializeOwned>(command: &str, config: &Option<PathBuf>, args: T) -> Result<T> {
    match config {
        None => Ok(args),
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let envelope: ResolvedConfig<T> = serde_json::from_str(&text)?;
            if envelope.command != command {
                return Err(HypoError::InvalidConfig(format!(
                    "config file is for '{}', not '{command}'",
                    envelope.command
                )));
            }
            Ok(envelope.args)
        }
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::from_str(s)
}

fn parse_mode(s: &str) -> std::result::Result<PrototypeMode, String> {
    PrototypeMode::from_str(s)
}

fn parse_schedule(s: &str) -> std::result::Result<LrSchedule, String> {
    LrSchedule::from_str(s)
}

fn parse_rho(s: &str) -> std::result::Result<RhoMetric, String> {
    RhoMetric::from_str(s)
}

/// `rotation:15:train,rotation:60:ood` -> shift specs.
fn parse_env_list(s: &str) -> std::result::Result<Vec<ShiftSpec>, String> {
    s.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(format!("env spec '{item}' is not kind:magnitude:role"));
            }
            let kind = match parts[0].to_ascii_lowercase().as_str() {
                "rotation" => ShiftKind::Rotation,
                "mean_shift" | "meanshift" => ShiftKind::MeanShift,
                "noise_scale" | "noisescale" => ShiftKind::NoiseScale,
                other => return Err(format!("unknown shift kind '{other}'")),
            };
            let magnitude: f64 = parts[1]
                .parse()
                .map_err(|e| format!("bad magnitude in '{item}': {e}"))?;
            let role = match parts[2].to_ascii_lowercase().as_str() {
                "train" => EnvRole::Train,
                "ood" => EnvRole::Ood,
                other => return Err(format!("unknown env role '{other}'")),
            };
            Ok(ShiftSpec {
                kind,
                magnitude,
                role,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone)]
struct GenDataArgs {
    /// Named preset; 'default' is the three-class rotation task.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    n_per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    /// Comma list of kind:magnitude:role, e.g. rotation:0:train,rotation:60:ood.
    #[arg(long)]
    envs: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    out: PathBuf,
    /// Re-run from a previously written resolved_config.json.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn gen_config(args: &GenDataArgs) -> Result<GenerateConfig> {
    match args.preset.as_deref() {
        Some("default") => Ok(default_preset(args.seed)),
        Some(other) => Err(HypoError::InvalidConfig(format!("unknown preset '{other}'"))),
        None => {
            let envs = args
                .envs
                .as_deref()
                .ok_or_else(|| HypoError::InvalidConfig("need --envs or --preset".into()))
                .and_then(|s| parse_env_list(s).map_err(HypoError::InvalidConfig))?;
            Ok(GenerateConfig {
                num_classes: args.classes,
                input_dim: args.dim,
                n_per_class_per_env: args.n_per_class,
                envs,
                label_noise: args.label_noise,
                noise_sigma: args.sigma,
                seed: args.seed,
            })
        }
    }
}

fn cmd_gen_data(cli_args: GenDataArgs) -> Result<i32> {
    let out = cli_args.out.clone();
    let config = cli_args.config.clone();
    let args = maybe_load("gen-data", &config, cli_args)?;
    let cfg = gen_config(&args)?;
    let ds = generate(&cfg)?;
    std::fs::create_dir_all(&out)?;
    save_csv(&ds, &out.join("dataset.csv"))?;
    write_resolved("gen-data", &args, &out)?;
    println!(
        "dataset: {} samples, {} classes, {} envs ({} train, {} ood), dim {}",
        ds.samples.len(),
        ds.num_classes,
        ds.num_envs(),
        ds.train_envs().len(),
        ds.ood_envs().len(),
        ds.input_dim
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone)]
struct TrainArgs {
    /// Dataset CSV (with sidecar manifest); exclusive with --preset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate the named preset in-memory (written next to the outputs).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "hypo", value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value = "cosine", value_parser = parse_schedule)]
    schedule: LrSchedule,
    #[arg(long, default_value_t = 0.95)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    augment_sigma: f64,
    #[arg(long, default_value = "ema", value_parser = parse_mode)]
    prototype_mode: PrototypeMode,
    #[arg(long, default_value_t = false)]
    hard_negatives: bool,
    /// Drop the separation term from the objective.
    #[arg(long, default_value_t = false)]
    no_separation: bool,
    /// Comma list of hidden layer widths.
    #[arg(long, default_value = "64")]
    hidden: String,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    /// Also write checkpoint_epoch_<k>.json every k epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let hidden_dims: Vec<usize> = args
        .hidden
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| HypoError::InvalidConfig(format!("bad hidden width '{s}': {e}")))
        })
        .collect::<Result<_>>()?;
    let cfg = TrainConfig {
        method: args.method,
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        lr_schedule: args.schedule,
        alpha: args.alpha,
        tau: args.tau,
        lambda: args.lambda,
        seed: args.seed,
        augment_sigma: args.augment_sigma,
        prototype_mode: args.prototype_mode,
        hard_negatives: args.hard_negatives,
        separation_enabled: !args.no_separation,
        hidden_dims,
        embed_dim: args.embed_dim,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_train_dataset(args: &TrainArgs, out: &Path) -> Result<data::EnvDataset> {
    match (&args.data, args.preset.as_deref()) {
        (Some(path), None) => load_csv(path),
        (None, Some("default")) => {
            let ds = generate(&default_preset(args.seed))?;
            std::fs::create_dir_all(out)?;
            save_csv(&ds, &out.join("dataset.csv"))?;
            Ok(ds)
        }
        (None, Some(other)) => Err(HypoError::InvalidConfig(format!(
            "unknown preset '{other}'"
        ))),
        (Some(_), Some(_)) => Err(HypoError::InvalidConfig(
            "--data and --preset are exclusive".into(),
        )),
        (None, None) => Err(HypoError::InvalidConfig("need --data or --preset".into())),
    }
}

fn cmd_train(cli_args: TrainArgs) -> Result<i32> {
    let out = cli_args.out.clone();
    let config = cli_args.config.clone();
    let args = maybe_load("train", &config, cli_args)?;
    let cfg = train_config(&args)?;
    let ds = load_train_dataset(&args, &out)?;
    std::fs::create_dir_all(&out)?;
    write_resolved("train", &args, &out)?;

    let split = standard_split(&ds);
    let mut state = match &args.resume {
        Some(path) => TrainState::from_checkpoint(&Checkpoint::load(path)?)?,
        None => init_state(&cfg, ds.input_dim, ds.num_classes)?,
    };
    let mut rows = Vec::new();
    if cfg.epochs == 0 {
        // Nothing to run: emit the initial checkpoint only.
        state.to_checkpoint().save(&out.join("checkpoint.json"))?;
    }
    while state.epoch < cfg.epochs {
        let summary = train_epoch(&mut state, &ds, &split, &cfg)?;
        if let Some(every) = args.checkpoint_every {
            if every > 0 && state.epoch % every == 0 && state.epoch < cfg.epochs {
                state
                    .to_checkpoint()
                    .save(&out.join(format!("checkpoint_epoch_{}.json", state.epoch)))?;
            }
        }
        rows.push(summary);
    }
    if let Some(last) = rows.last() {
        println!(
            "epoch {}: lr {:.6} total {:.6} train_acc {:.4}",
            last.epoch, last.lr, last.total_loss, last.train_acc
        );
        state.to_checkpoint().save(&out.join("checkpoint.json"))?;
    }
    train::write_epoch_csv(&rows, &out.join("epochs.csv"))?;
    println!("checkpoint written to {}", out.join("checkpoint.json").display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

struct LoadedModel {
    encoder: hypo_core::model::MlpEncoder,
    bank: Option<hypo_core::model::PrototypeBank>,
    head: Option<hypo_core::model::LinearHead>,
}

impl LoadedModel {
    fn classifier(&self) -> Classifier<'_> {
        match (&self.bank, &self.head) {
            (Some(bank), _) => Classifier::Prototype {
                encoder: &self.encoder,
                bank,
            },
            (None, Some(head)) => Classifier::Head {
                encoder: &self.encoder,
                head,
            },
            (None, None) => unreachable!("checkpoint validated on load"),
        }
    }
}

fn load_model(ckpt: &Checkpoint, ds: &data::EnvDataset) -> Result<LoadedModel> {
    if ckpt.input_dim() != ds.input_dim {
        return Err(HypoError::CheckpointMismatch(format!(
            "checkpoint expects input dim {}, dataset has {}",
            ckpt.input_dim(),
            ds.input_dim
        )));
    }
    if ckpt.num_classes() != ds.num_classes {
        return Err(HypoError::CheckpointMismatch(format!(
            "checkpoint has {} classes, dataset has {}",
            ckpt.num_classes(),
            ds.num_classes
        )));
    }
    let model = LoadedModel {
        encoder: ckpt.encoder()?,
        bank: ckpt.bank()?,
        head: ckpt.head()?,
    };
    if model.bank.is_none() && model.head.is_none() {
        return Err(HypoError::SchemaError(
            "checkpoint carries neither prototypes nor a head".into(),
        ));
    }
    Ok(model)
}

fn cmd_eval(cli_args: EvalArgs) -> Result<i32> {
    let out = cli_args.out.clone();
    let config = cli_args.config.clone();
    let args = maybe_load("eval", &config, cli_args)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let ds = load_csv(&args.data)?;
    let model = load_model(&ckpt, &ds)?;
    let split = standard_split(&ds);
    let outcome = evaluate(&model.classifier(), &ds, &split)?;
    std::fs::create_dir_all(&out)?;
    write_resolved("eval", &args, &out)?;
    std::fs::write(
        out.join("eval.json"),
        serde_json::to_string_pretty(&outcome)?,
    )?;
    println!("train accuracy: {:.6}", outcome.train_accuracy);
    for (env, acc) in &outcome.validation_accuracy {
        println!("validation env {env}: {acc:.6}");
    }
    for (env, acc) in &outcome.ood_accuracy {
        println!("ood env {env}: {acc:.6}");
    }
    println!("worst-env error: {:.6}", outcome.worst_env_error);
    Ok(0)
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone)]
struct MetricsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "sinkhorn", value_parser = parse_rho)]
    rho: RhoMetric,
    /// Random projection directions for the sup-variation estimate.
    #[arg(long, default_value_t = 256)]
    directions: usize,
    #[arg(long, default_value_t = 0.05)]
    reg: f64,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

/// Variation, separation, sup-variation, and alignment metrics emitted by
/// `metrics`, alongside the accuracy evaluation.
#[derive(Serialize)]
struct MetricsOutput {
    rho: RhoMetric,
    variation_aggregate: f64,
    /// Per-(class, env pair) Sinkhorn distances; absent under w1proj.
    #[serde(skip_serializing_if = "Option::is_none")]
    sinkhorn_cells: Option<Vec<VariationCell>>,
    /// Monte-Carlo sup-variation lower bound; present under w1proj.
    #[serde(skip_serializing_if = "Option::is_none")]
    vsup: Option<f64>,
    separation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon_hat: Option<f64>,
    evaluation: EvalOutcome,
}

fn train_env_indices(ds: &data::EnvDataset) -> Vec<usize> {
    (0..ds.samples.len())
        .filter(|&i| ds.role(ds.samples[i].env) == EnvRole::Train)
        .collect()
}

fn write_heatmap(cells: &[VariationCell], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(hypo_core::HypoError::from)?;
    writer
        .write_record(["label", "env_a", "env_b", "value"])
        .map_err(hypo_core::HypoError::from)?;
    for c in cells {
        writer
            .write_record([
                c.label.to_string(),
                c.env_a.to_string(),
                c.env_b.to_string(),
                format!("{}", c.value),
            ])
            .map_err(hypo_core::HypoError::from)?;
    }
    writer.flush()?;
    Ok(())
}

fn cmd_metrics(cli_args: MetricsArgs) -> Result<i32> {
    let out = cli_args.out.clone();
    let config = cli_args.config.clone();
    let args = maybe_load("metrics", &config, cli_args)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let ds = load_csv(&args.data)?;
    let model = load_model(&ckpt, &ds)?;
    let scfg = SinkhornConfig {
        reg: args.reg,
        max_iters: args.max_iters,
        tol: args.tol,
    };

    // Fig-5 style: embeddings of the full training environments.
    let idxs = train_env_indices(&ds);
    let dump = dump_embeddings(&model.encoder, &ds, &idxs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let (variation_aggregate, sinkhorn_cells, vsup, heatmap_cells) = match args.rho {
        RhoMetric::Sinkhorn => {
            let report = variation_estimate(&dump, RhoMetric::Sinkhorn, &scfg, &[])?;
            let cells = report.cells.clone();
            (report.aggregate, Some(report.cells), None, cells)
        }
        RhoMetric::W1Proj => {
            let dim = dump.dim();
            let mut dirs: Vec<hypo_core::geometry::UnitVector> = (0..args.directions)
                .map(|_| hypo_core::geometry::random_unit_direction(dim, &mut rng))
                .collect();
            if let Some(bank) = &model.bank {
                dirs.extend(bank.rows().iter().cloned());
            }
            let report = variation_estimate(&dump, RhoMetric::W1Proj, &scfg, &dirs)?;
            let cells = report.cells.clone();
            (report.aggregate, None, Some(report.aggregate), cells)
        }
    };
    let sep_dirs: Vec<hypo_core::geometry::UnitVector> = match args.rho {
        RhoMetric::Sinkhorn => Vec::new(),
        RhoMetric::W1Proj => {
            let dim = dump.dim();
            (0..args.directions)
                .map(|_| hypo_core::geometry::random_unit_direction(dim, &mut rng))
                .collect()
        }
    };
    let separation = separation_estimate(&dump, args.rho, &scfg, &sep_dirs)?;
    let eps = model.bank.as_ref().map(|bank| epsilon_hat(&dump, bank));
    let split = standard_split(&ds);
    let evaluation = evaluate(&model.classifier(), &ds, &split)?;

    std::fs::create_dir_all(&out)?;
    write_resolved("metrics", &args, &out)?;
    save_dump(&dump, &out.join("embeddings.csv"))?;
    write_heatmap(&heatmap_cells, &out.join("heatmap.csv"))?;
    let output = MetricsOutput {
        rho: args.rho,
        variation_aggregate,
        sinkhorn_cells,
        vsup,
        separation,
        epsilon_hat: eps,
        evaluation,
    };
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&output)?,
    )?;
    println!("variation aggregate: {variation_aggregate:.6}");
    println!("separation: {separation:.6}");
    if let Some(v) = vsup {
        println!("vsup lower bound: {v:.6}");
    }
    if let Some(e) = eps {
        println!("epsilon_hat: {e:.6}");
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone)]
struct VerifyArgs {
    /// Run the separation-optimality check instead of the dump verifiers.
    #[arg(long, default_value_t = false)]
    etf: bool,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Pass threshold on the max pairwise deviation from -1/(C-1).
    #[arg(long, default_value_t = 1e-3)]
    etf_tol: f64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma list of tail-bound thresholds.
    #[arg(long, default_value = "0.1,0.5,1.0")]
    eta: String,
    /// Projection directions for the Wasserstein bound.
    #[arg(long, default_value_t = 64)]
    directions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Serialize)]
struct EtfReportOut {
    classes: usize,
    dim: usize,
    max_deviation: f64,
    target: f64,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    subclass_bound: Option<LemmaReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tail_bound: Option<BTreeMap<String, LemmaReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    projection_bound: Option<LemmaReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    etf: Option<EtfReportOut>,
    pass: bool,
}

fn cmd_verify(cli_args: VerifyArgs) -> Result<i32> {
    let out = cli_args.out.clone();
    let config = cli_args.config.clone();
    let args = maybe_load("verify", &config, cli_args)?;
    std::fs::create_dir_all(&out)?;
    write_resolved("verify", &args, &out)?;

    let mut output = VerifyOutput {
        subclass_bound: None,
        tail_bound: None,
        projection_bound: None,
        etf: None,
        pass: true,
    };

    if args.etf {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let outcome = theory::etf_optimize(
            args.classes,
            args.dim,
            args.tau,
            args.steps,
            args.lr,
            &mut rng,
        );
        let pass = outcome.max_deviation < args.etf_tol;
        println!(
            "etf C={} d={}: max deviation {:.3e} from {:.6} -> {}",
            args.classes,
            args.dim,
            outcome.max_deviation,
            -1.0 / (args.classes as f64 - 1.0),
            if pass { "pass" } else { "FAIL" }
        );
        output.etf = Some(EtfReportOut {
            classes: args.classes,
            dim: args.dim,
            max_deviation: outcome.max_deviation,
            target: -1.0 / (args.classes as f64 - 1.0),
            pass,
        });
        output.pass &= pass;
    } else {
        let (ckpt_path, data_path) = match (&args.checkpoint, &args.data) {
            (Some(c), Some(d)) => (c, d),
            _ => {
                return Err(HypoError::InvalidConfig(
                    "verify needs --checkpoint and --data (or --etf)".into(),
                ))
            }
        };
        let ckpt = Checkpoint::load(ckpt_path)?;
        let ds = load_csv(data_path)?;
        let model = load_model(&ckpt, &ds)?;
        let bank = model.bank.as_ref().ok_or_else(|| {
            HypoError::InvalidConfig("lemma verification needs a prototype checkpoint".into())
        })?;
        let idxs = train_env_indices(&ds);
        let dump: EmbeddingDump = dump_embeddings(&model.encoder, &ds, &idxs)?;

        let sub = theory::verify_lemma_subclasses(&dump, bank)?;
        println!(
            "subclass alignment bound: gamma {:.6} -> {}",
            sub.gamma,
            if sub.pass { "pass" } else { "FAIL" }
        );
        output.pass &= sub.pass;

        let mut tails = BTreeMap::new();
        for eta_str in args.eta.split(',') {
            let eta: f64 = eta_str.trim().parse().map_err(|e| {
                HypoError::InvalidConfig(format!("bad eta '{eta_str}': {e}"))
            })?;
            let report = theory::verify_lemma_markov(&dump, bank, eta)?;
            println!(
                "tail bound at eta {eta}: {}",
                if report.pass { "pass" } else { "FAIL" }
            );
            output.pass &= report.pass;
            tails.insert(format!("{eta}"), report);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let wass = theory::verify_lemma_wasserstein(&dump, bank, args.directions, &mut rng)?;
        println!(
            "projected Wasserstein bound ({} directions): {}",
            args.directions,
            if wass.pass { "pass" } else { "FAIL" }
        );
        output.pass &= wass.pass;

        output.subclass_bound = Some(sub);
        output.tail_bound = Some(tails);
        output.projection_bound = Some(wass);
    }

    std::fs::write(
        out.join("verify.json"),
        serde_json::to_string_pretty(&output)?,
    )?;
    Ok(if output.pass { 0 } else { 3 })
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone)]
struct GradCheckArgs {
    /// Randomized instances per grid point.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Restrict the grid to one temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Restrict the grid to one class count.
    #[arg(long)]
    classes: Option<usize>,
    /// Restrict the grid to one embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Serialize)]
struct GradCheckOutput {
    instances: usize,
    params_checked: usize,
    max_rel_err: f64,
    worst_param: String,
    tolerance: f64,
    pass: bool,
}

fn cmd_grad_check(cli_args: GradCheckArgs) -> Result<i32> {
    let out = cli_args.out.clone();
    let config = cli_args.config.clone();
    let args = maybe_load("grad-check", &config, cli_args)?;
    let specs: Vec<CheckSpec> = gradcheck::acceptance_grid(args.seeds)
        .into_iter()
        .filter(|s| args.tau.is_none_or(|t| (s.tau - t).abs() < 1e-12))
        .filter(|s| args.classes.is_none_or(|c| s.num_classes == c))
        .filter(|s| args.dim.is_none_or(|d| s.embed_dim == d))
        .collect();
    if specs.is_empty() {
        return Err(HypoError::InvalidConfig(
            "grid filters matched no instances".into(),
        ));
    }
    let mut worst = GradCheckOutput {
        instances: specs.len(),
        params_checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        tolerance: REL_TOL,
        pass: true,
    };
    for spec in &specs {
        let report = gradcheck::run_check(spec);
        worst.params_checked += report.params_checked;
        if report.max_rel_err > worst.max_rel_err {
            worst.max_rel_err = report.max_rel_err;
            worst.worst_param = format!(
                "{} (C={}, d={}, tau={}, seed {})",
                report.worst_param, spec.num_classes, spec.embed_dim, spec.tau, spec.seed
            );
        }
    }
    worst.pass = worst.max_rel_err < REL_TOL;
    std::fs::create_dir_all(&out)?;
    write_resolved("grad-check", &args, &out)?;
    std::fs::write(
        out.join("gradcheck.json"),
        serde_json::to_string_pretty(&worst)?,
    )?;
    println!(
        "{} instances, {} parameters: max rel err {:.3e} at {} -> {}",
        worst.instances,
        worst.params_checked,
        worst.max_rel_err,
        worst.worst_param,
        if worst.pass { "pass" } else { "FAIL" }
    );
    Ok(if worst.pass { 0 } else { 3 })
}

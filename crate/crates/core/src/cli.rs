//! The `mami` command line.
//!
//! Every subcommand resolves its settings (built-in defaults, then an
//! optional TOML file, then flags), writes `<command>.config.toml` into the
//! output directory and maps failures onto [`ExitCode`]s.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataset::{self, Dataset, Label, LoadOptions, Split, SynthSpec, T_MAX};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckConfig, Precision};
use crate::metrics::TaskBLabels;
use crate::model::{self, ModelParams, ParamGroup, Thresholds};
use crate::training::{self, TrainConfig};

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum ExitCode {
    Ok = 0,
    Usage = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    CheckFailed = 6,
}

impl ExitCode {
    pub fn of(err: &Error) -> Self {
        match err {
            Error::Config(_) | Error::Usage(_) => ExitCode::Usage,
            Error::Data { .. }
            | Error::Format { .. }
            | Error::Dims(_)
            | Error::Shape { .. }
            | Error::UndefinedMetric(_) => ExitCode::Data,
            Error::Numeric(_) | Error::Divergence { .. } => ExitCode::Numeric,
            Error::Io { .. } => ExitCode::Io,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mami", version, about = "Train and evaluate a multimodal misogyny classification head")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on an embedding file and write the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled embedding file.
    Eval(EvalArgs),
    /// Write per-sample probabilities and thresholded labels.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic embedding file.
    GenSynth(GenSynthArgs),
    /// List every invariant violation in an embedding file.
    Validate(ValidateArgs),
    /// Print label counts in the challenge table layout.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "MAMI_OUT_DIR", default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Embedding file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split the file holds.
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Accept sub-class labels on non-misogynous samples with a warning.
    #[arg(long)]
    pub permissive: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Best-epoch checkpoint path (default `<out>/checkpoint.tva`). The
    /// final-epoch parameters always go to `<out>/last.tva`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// TOML file with training settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr_halving_period: Option<usize>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub task_b_loss_weight: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub fused: Option<usize>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    /// One value or five comma-separated values in label order.
    #[arg(long)]
    pub thresholds: Option<Thresholds>,
    /// Labels averaged by the sub-class score: 4 or 5.
    #[arg(long)]
    pub task_b_labels: Option<TaskBLabels>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "0.5")]
    pub thresholds: Thresholds,
    #[arg(long, default_value = "4")]
    pub task_b_labels: TaskBLabels,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "0.5")]
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run in 32-bit arithmetic.
    #[arg(long)]
    pub f32: bool,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Perturb one group's analytic gradient (fault injection).
    #[arg(long, value_name = "GROUP")]
    pub corrupt: Option<ParamGroup>,
}

#[derive(Debug, Clone, Args)]
pub struct GenSynthArgs {
    /// File to write.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub token_dim: Option<usize>,
    #[arg(long)]
    pub image_dim: Option<usize>,
    #[arg(long)]
    pub min_tokens: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Fraction of misogynous samples.
    #[arg(long)]
    pub misogynous: Option<f64>,
    /// Four comma-separated sub-class fractions: shaming, stereotype,
    /// objectification, violence.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub subclass: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = T_MAX)]
    pub t_max: usize,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    /// One or more embedding files, one table row each.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Split of each file, in the same order (default train).
    #[arg(long)]
    pub split: Vec<Split>,
    #[arg(long)]
    pub permissive: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::Usage as i32 } else { 0 };
        }
    };
    let echo = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" ");
    match run(cli.command, &echo) {
        Ok(code) => code as i32,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::of(&e) as i32
        }
    }
}

pub fn run(cmd: Command, invocation: &str) -> Result<ExitCode> {
    match cmd {
        Command::Train(a) => cmd_train(&a, invocation),
        Command::Eval(a) => cmd_eval(&a, invocation),
        Command::Predict(a) => cmd_predict(&a, invocation),
        Command::Gradcheck(a) => cmd_gradcheck(&a, invocation),
        Command::GenSynth(a) => cmd_gen_synth(&a, invocation),
        Command::Validate(a) => cmd_validate(&a, invocation),
        Command::Stats(a) => cmd_stats(&a, invocation),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn existing<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let p = required(p, flag)?;
    if !p.is_file() {
        return Err(Error::Usage(format!("--{flag} {} does not exist", p.display())));
    }
    Ok(p)
}

fn prepare_out(out: &OutArgs) -> Result<&Path> {
    std::fs::create_dir_all(&out.out).map_err(|e| Error::io(&out.out, e))?;
    Ok(&out.out)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_toml<S: Serialize>(value: &S) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
}

/// Writes `<out>/<name>.config.toml`: the invocation as a comment, then the
/// resolved settings.
fn write_echo<S: Serialize>(out: &Path, name: &str, invocation: &str, settings: &S) -> Result<PathBuf> {
    let path = out.join(format!("{name}.config.toml"));
    let body = format!("# {invocation}\n{}", to_toml(settings)?);
    write_file(&path, body)?;
    Ok(path)
}

fn load_data(a: &DataArgs) -> Result<Dataset> {
    let path = existing(&a.data, "data")?;
    let opts = LoadOptions {
        permissive_labels: a.permissive,
        split: a.split,
        ..LoadOptions::default()
    };
    let loaded = dataset::load_with(path, &opts)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(loaded.dataset)
}

fn load_checkpoint_for(path: &Path, ds: &Dataset) -> Result<ModelParams<f32>> {
    let params = model::load_params(path)?;
    let d = params.dims();
    if d.token_dim != ds.token_dim || d.image_dim != ds.image_dim {
        return Err(Error::Dims(format!(
            "checkpoint expects token/image dims {}/{}, data has {}/{}",
            d.token_dim, d.image_dim, ds.token_dim, ds.image_dim
        )));
    }
    Ok(params)
}

/// Defaults, then the optional TOML file, then explicit flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    set!(
        seed => seed,
        lr0 => lr0,
        batch_size => batch_size,
        max_epochs => max_epochs,
        lr_halving_period => lr_halving_period,
        dropout_rate => dropout_rate,
        val_fraction => val_fraction,
        task_b_loss_weight => task_b_loss_weight,
        hidden => hidden,
        fused => fused,
        adam_beta1 => adam.beta1,
        adam_beta2 => adam.beta2,
        adam_eps => adam.eps,
        thresholds => thresholds,
        task_b_labels => task_b_labels,
    );
    cfg.check()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, invocation: &str) -> Result<ExitCode> {
    existing(&a.data.data, "data")?;
    let cfg = resolve_train_config(a)?;
    let out = prepare_out(&a.out)?;
    write_echo(out, "train", invocation, &cfg)?;
    let ds = load_data(&a.data)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.tva"));

    let started = Instant::now();
    let outcome = training::train(&ds, &cfg, |e| {
        let b = e.val_task_b_weighted_f1.map_or("NA".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "epoch {:>3}  lr {:.3e}  loss {:.5}  val A {:.4}  val B {b}",
            e.epoch, e.lr, e.train_loss, e.val_task_a_macro_f1
        );
    })?;
    model::save_params(&outcome.best, &ckpt)?;
    model::save_params(&outcome.last, out.join("last.tva"))?;
    let mut report = outcome.report;
    report.checkpoint = Some(ckpt.clone());
    write_file(&out.join("train_log.jsonl"), report.to_jsonl())?;
    write_file(&out.join("train_summary.tsv"), report.to_table())?;
    eprintln!(
        "best epoch {} of {}, checkpoint {} ({:.1}s)",
        report.best_epoch,
        report.epochs.len(),
        ckpt.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(ExitCode::Ok)
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    data: &'a Path,
    split: Split,
    permissive: bool,
    checkpoint: &'a Path,
    thresholds: Thresholds,
    task_b_labels: TaskBLabels,
}

fn cmd_eval(a: &EvalArgs, invocation: &str) -> Result<ExitCode> {
    let data = existing(&a.data.data, "data")?;
    let ckpt = existing(&a.checkpoint, "checkpoint")?;
    let out = prepare_out(&a.out)?;
    let echo = EvalEcho {
        data,
        split: a.data.split,
        permissive: a.data.permissive,
        checkpoint: ckpt,
        thresholds: a.thresholds,
        task_b_labels: a.task_b_labels,
    };
    write_echo(out, "eval", invocation, &echo)?;
    let ds = load_data(&a.data)?;
    let params = load_checkpoint_for(ckpt, &ds)?;
    let report = training::score(&params, &ds, &a.thresholds, a.task_b_labels)?;
    let text = report.to_text();
    write_file(&out.join("metrics.tsv"), &text)?;
    print!("{text}");
    Ok(ExitCode::Ok)
}

#[derive(Serialize)]
struct PredictEcho<'a> {
    data: &'a Path,
    split: Split,
    permissive: bool,
    checkpoint: &'a Path,
    thresholds: Thresholds,
}

/// Header of the prediction file: id, then one probability and one label
/// column per output in canonical order.
pub fn predictions_header() -> String {
    let mut h = String::from("id");
    for l in Label::ALL {
        let _ = write!(h, "\tp_{}", l.name());
    }
    for l in Label::ALL {
        let _ = write!(h, "\t{}", l.name());
    }
    h
}

fn cmd_predict(a: &PredictArgs, invocation: &str) -> Result<ExitCode> {
    let data = existing(&a.data.data, "data")?;
    let ckpt = existing(&a.checkpoint, "checkpoint")?;
    let out = prepare_out(&a.out)?;
    let echo = PredictEcho {
        data,
        split: a.data.split,
        permissive: a.data.permissive,
        checkpoint: ckpt,
        thresholds: a.thresholds,
    };
    write_echo(out, "predict", invocation, &echo)?;
    let ds = load_data(&a.data)?;
    let params = load_checkpoint_for(ckpt, &ds)?;

    let mut text = predictions_header();
    text.push('\n');
    for s in &ds.samples {
        let o = model::infer(&params, s.input())?;
        let labels = a.thresholds.apply(&o.probs);
        text.push_str(&s.id);
        for p in o.probs {
            let _ = write!(text, "\t{p}");
        }
        for b in labels.bools() {
            text.push_str(if b { "\t1" } else { "\t0" });
        }
        text.push('\n');
    }
    let path = out.join("predictions.tsv");
    write_file(&path, text)?;
    eprintln!("{} rows written to {}", ds.len(), path.display());
    Ok(ExitCode::Ok)
}

fn cmd_gradcheck(a: &GradcheckArgs, invocation: &str) -> Result<ExitCode> {
    if !(a.tol > 0.0) {
        return Err(Error::Config(format!("--tol must be positive, got {}", a.tol)));
    }
    let cfg = GradCheckConfig {
        seed: a.seed,
        step: a.step,
        tol: a.tol,
        precision: if a.f32 { Precision::F32 } else { Precision::F64 },
        corrupt: a.corrupt,
        ..GradCheckConfig::default()
    };
    let out = prepare_out(&a.out)?;
    write_echo(out, "gradcheck", invocation, &cfg)?;
    let report = gradcheck::run(&cfg)?;
    let text = report.to_string();
    write_file(&out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    let offenders = report.offenders();
    if offenders.is_empty() {
        Ok(ExitCode::Ok)
    } else {
        let names: Vec<&str> = offenders.iter().map(|g| g.name()).collect();
        eprintln!("gradient check failed for: {}", names.join(", "));
        Ok(ExitCode::CheckFailed)
    }
}

#[derive(Serialize)]
struct GenEcho<'a> {
    data: &'a Path,
    n: usize,
    seed: u64,
    spec: &'a SynthSpec,
}

fn cmd_gen_synth(a: &GenSynthArgs, invocation: &str) -> Result<ExitCode> {
    let data = required(&a.data, "data")?;
    let mut spec = SynthSpec {
        split: a.split,
        ..SynthSpec::challenge_train()
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(margin, noise, token_dim, image_dim, min_tokens, max_tokens, misogynous);
    if let Some(v) = &a.subclass {
        spec.subclass = v
            .as_slice()
            .try_into()
            .map_err(|_| Error::Usage(format!("--subclass takes 4 values, got {}", v.len())))?;
    }
    let out = prepare_out(&a.out)?;
    write_echo(
        out,
        "gen-synth",
        invocation,
        &GenEcho {
            data,
            n: a.n,
            seed: a.seed,
            spec: &spec,
        },
    )?;
    let synth = dataset::gen_synthetic(a.n, a.seed, &spec)?;
    synth.dataset.write(data)?;
    print!("{}", dataset::render_stats_table(&[synth.draws]));
    Ok(ExitCode::Ok)
}

#[derive(Serialize)]
struct ValidateEcho<'a> {
    data: &'a Path,
    t_max: usize,
}

fn cmd_validate(a: &ValidateArgs, invocation: &str) -> Result<ExitCode> {
    let data = existing(&a.data, "data")?;
    let out = prepare_out(&a.out)?;
    write_echo(out, "validate", invocation, &ValidateEcho { data, t_max: a.t_max })?;
    let report = dataset::validate(data, a.t_max)?;
    for f in &report.findings {
        println!("{f}");
    }
    println!("{} records checked, {} findings", report.records_checked, report.findings.len());
    Ok(if report.is_clean() { ExitCode::Ok } else { ExitCode::Data })
}

#[derive(Serialize)]
struct StatsEcho<'a> {
    data: &'a [PathBuf],
    split: &'a [Split],
    permissive: bool,
}

fn cmd_stats(a: &StatsArgs, invocation: &str) -> Result<ExitCode> {
    let splits: Vec<Split> = match a.split.len() {
        0 => vec![Split::Train; a.data.len()],
        n if n == a.data.len() => a.split.clone(),
        n => {
            return Err(Error::Usage(format!(
                "{n} --split values for {} --data files",
                a.data.len()
            )))
        }
    };
    let out = prepare_out(&a.out)?;
    write_echo(
        out,
        "stats",
        invocation,
        &StatsEcho {
            data: &a.data,
            split: &splits,
            permissive: a.permissive,
        },
    )?;
    let mut rows = Vec::with_capacity(a.data.len());
    for (path, split) in a.data.iter().zip(splits) {
        let ds = load_data(&DataArgs {
            data: Some(path.clone()),
            split,
            permissive: a.permissive,
        })?;
        rows.push(dataset::stats(&ds));
    }
    print!("{}", dataset::render_stats_table(&rows));
    Ok(ExitCode::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("mami").chain(args.iter().copied())).unwrap().command
    }

    #[test]
    fn train_defaults_match_reference_recipe() {
        let Command::Train(a) = parse(&["train", "--data", "x"]) else { panic!() };
        assert_eq!(resolve_train_config(&a).unwrap(), TrainConfig::default());
        let d = TrainConfig::default();
        assert_eq!((d.lr0, d.batch_size, d.max_epochs, d.lr_halving_period), (1e-4, 64, 20, 5));
        assert_eq!((d.dropout_rate, d.val_fraction), (0.2, 0.10));
    }

    #[test]
    fn flags_override_config_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "lr0 = 0.01\nbatch_size = 8\n[adam]\nbeta1 = 0.5\n").unwrap();
        let Command::Train(a) = parse(&["train", "--data", "x", "--config", p.to_str().unwrap(), "--batch-size", "16"])
        else {
            panic!()
        };
        let cfg = resolve_train_config(&a).unwrap();
        assert_eq!(cfg.lr0, 0.01);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.adam.beta1, 0.5);
        assert_eq!(cfg.adam.beta2, 0.999);
        assert_eq!(cfg.max_epochs, 20);
    }

    #[test]
    fn unknown_config_key_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "learning_rate = 0.01\n").unwrap();
        let Command::Train(a) = parse(&["train", "--data", "x", "--config", p.to_str().unwrap()]) else { panic!() };
        assert!(matches!(resolve_train_config(&a), Err(Error::Config(_))));
    }

    #[test]
    fn echoed_train_config_reloads_identically() {
        let cfg = TrainConfig {
            seed: 7,
            thresholds: Thresholds([0.3, 0.4, 0.5, 0.6, 0.7]),
            task_b_labels: TaskBLabels::Five,
            ..TrainConfig::default()
        };
        let back: TrainConfig = toml::from_str(&to_toml(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            ExitCode::of(&Error::Usage("x".into())),
            ExitCode::of(&Error::Dims("x".into())),
            ExitCode::of(&Error::Divergence {
                epoch: 1,
                batch: 1,
                loss: f64::NAN,
            }),
            ExitCode::of(&Error::io("p", std::io::Error::other("x"))),
            ExitCode::CheckFailed,
        ];
        for (i, a) in codes.iter().enumerate() {
            assert_ne!(*a, ExitCode::Ok);
            for b in &codes[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn predictions_header_lists_labels_in_order() {
        assert_eq!(
            predictions_header(),
            "id\tp_misogynous\tp_shaming\tp_stereotype\tp_objectification\tp_violence\t\
             misogynous\tshaming\tstereotype\tobjectification\tviolence"
        );
    }
}

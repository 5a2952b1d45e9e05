//! Command-line front end.
//!
//! Every command except `plot` reads a TOML config, applies `--set`
//! overrides, validates, then writes its artefacts into a fresh run
//! directory `<out>/<command>-<config hash, 8 hex>-<unix seconds>`. The
//! resolved config is saved there as `config.toml`, so a run can be
//! repeated from its own directory.
//!
//! Exit codes: 0 success, 2 usage, 3 unreadable or unparsable input file
//! (config, checkpoint, calibration set or report), 4 input that fails
//! validation, 5 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::channel::ChannelFile;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::deploy::{apply_calibration, partition, CalibrationSet, PhaseMap, Quantization};
use crate::error::{Error, Result};
use crate::evaluator::{monte_carlo_ber, parse_report_csv, recipe, sweep, untrained_model, BerReport};
use crate::plot::render_svg;
use crate::trainer::{parameter_groups, train, TrainMetrics, TrainPhase};
use crate::wavemath::RngStreams;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "simlink", version, about = "Metasurface-assisted OFDM link simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set training.pretrain.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed; replaces `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory for the run directory; replaces `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a fresh model on the statistical channel.
    Train(Common),
    /// Finetune a checkpoint on one instantaneous channel realization.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of the instantaneous realization.
        #[arg(long, default_value_t = 0)]
        replica: u64,
    },
    /// Monte-Carlo BER at the configured test powers.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model to evaluate; a fresh untrained model when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the configured one-variable sweep.
    Sweep(Common),
    /// Write deployment bundles and quantised phase maps.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Measured transmission matrices to apply before export.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Render a report CSV as an SVG figure.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

fn at(code: i32) -> impl Fn(Error) -> CliError {
    move |error| CliError { code, error }
}

fn runtime(e: Error) -> CliError {
    CliError {
        code: EXIT_RUNTIME,
        error: e,
    }
}

/// Loads, overrides and validates the configuration.
fn resolve(common: &Common) -> std::result::Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config, &common.set).map_err(at(EXIT_CONFIG))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.display().to_string();
    }
    cfg.validate().map_err(at(EXIT_VALIDATION))?;
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Creates `<parent>/<cmd>-<tag>-<unix seconds>`, adding a suffix on collision.
fn run_dir(parent: &Path, cmd: &str, tag: &str) -> Result<PathBuf> {
    create_dir(parent)?;
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = format!("{cmd}-{tag}-{ts}");
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let p = parent.join(name);
        match std::fs::create_dir(&p) {
            Ok(()) => return Ok(p),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&p, e)),
        }
    }
    unreachable!("unbounded loop returns")
}

fn start_run(cfg: &RunConfig, cmd: &str) -> Result<PathBuf> {
    let hash = cfg.hash()?;
    let dir = run_dir(Path::new(&cfg.out_dir), cmd, &hash[..8])?;
    write(&dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(dir)
}

fn write_metrics(path: &Path, groups: &[String], traces: &[&TrainMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let err = |e: csv::Error| Error::parse(path.display().to_string(), e.to_string());
    w.write_record(TrainMetrics::csv_header(groups)).map_err(err)?;
    for t in traces {
        for r in t.csv_records() {
            w.write_record(r).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> std::result::Result<Checkpoint, CliError> {
    let ck = Checkpoint::load(path).map_err(at(EXIT_CONFIG))?;
    if ck.model.spec != cfg.model_spec(cfg.network.mode) {
        return Err(CliError {
            code: EXIT_VALIDATION,
            error: Error::config(format!("checkpoint {} was built for a different model configuration", path.display())),
        });
    }
    Ok(ck)
}

fn copy_input(src: &Path, dir: &Path, name: &str) -> Result<()> {
    std::fs::copy(src, dir.join(name)).map(|_| ()).map_err(|e| Error::io(src, e))
}

fn cmd_train(common: &Common) -> std::result::Result<PathBuf, CliError> {
    let cfg = resolve(common)?;
    let dir = start_run(&cfg, "train").map_err(runtime)?;
    let mode = cfg.network.mode;
    let hash = cfg.hash().map_err(runtime)?;
    let tcfg = cfg.pretrain_config(2);
    let mut model = untrained_model(&cfg, mode).map_err(runtime)?;
    let streams = RngStreams::new(cfg.seed).split("pretrain-channel", 0);
    let mut provider = crate::channel::ChannelProvider::statistical(cfg.channel_spec(mode), streams).map_err(runtime)?;
    let ckdir = dir.join("checkpoints");
    let metrics = train(&mut model, &mut provider, &tcfg, TrainPhase::Pretrain, |epoch, m, opt| {
        create_dir(&ckdir)?;
        Checkpoint::new(&hash, TrainPhase::Pretrain, epoch + 1, tcfg.seed, m.clone(), Some(opt.clone()))
            .save(&ckdir.join(format!("epoch-{:06}.json", epoch + 1)))
    })
    .map_err(runtime)?;
    write_metrics(&dir.join("metrics.csv"), &parameter_groups(&model), &[&metrics]).map_err(runtime)?;
    Checkpoint::new(&hash, TrainPhase::Pretrain, tcfg.epochs, tcfg.seed, model, None)
        .save(&dir.join("checkpoint.json"))
        .map_err(runtime)?;
    Ok(dir)
}

fn cmd_finetune(common: &Common, checkpoint: &Path, replica: u64) -> std::result::Result<PathBuf, CliError> {
    let cfg = resolve(common)?;
    let ck = load_checkpoint(checkpoint, &cfg)?;
    let dir = start_run(&cfg, "finetune").map_err(runtime)?;
    copy_input(checkpoint, &dir, "input-checkpoint.json").map_err(runtime)?;
    let mode = cfg.network.mode;
    let spec = cfg.channel_spec(mode);
    let streams = RngStreams::new(cfg.seed).split("instantaneous", 0);
    let realization = spec.realization(&streams, replica).map_err(runtime)?;
    ChannelFile::new(spec, streams.master(), replica, realization.clone())
        .save(&dir.join("channel.json"))
        .map_err(runtime)?;
    let mut model = ck.model;
    let tcfg = cfg.finetune_config(3 + replica);
    let mut provider = crate::channel::ChannelProvider::instantaneous(realization);
    let metrics = train(&mut model, &mut provider, &tcfg, TrainPhase::Finetune, |_, _, _| Ok(())).map_err(runtime)?;
    write_metrics(&dir.join("metrics.csv"), &parameter_groups(&model), &[&metrics]).map_err(runtime)?;
    let hash = cfg.hash().map_err(runtime)?;
    Checkpoint::new(&hash, TrainPhase::Finetune, tcfg.epochs, tcfg.seed, model, None)
        .save(&dir.join("checkpoint.json"))
        .map_err(runtime)?;
    Ok(dir)
}

fn write_report(dir: &Path, report: &BerReport) -> Result<()> {
    write(&dir.join("report.csv"), report.to_csv()?)?;
    write(&dir.join("report.json"), report.to_json()?)
}

fn cmd_evaluate(common: &Common, checkpoint: Option<&Path>) -> std::result::Result<PathBuf, CliError> {
    let cfg = resolve(common)?;
    let model = match checkpoint {
        Some(p) => Some(load_checkpoint(p, &cfg)?.model),
        None => None,
    };
    let dir = start_run(&cfg, "evaluate").map_err(runtime)?;
    if let Some(p) = checkpoint {
        copy_input(p, &dir, "input-checkpoint.json").map_err(runtime)?;
    }
    let mode = cfg.network.mode;
    let model = match model {
        Some(m) => m,
        None => untrained_model(&cfg, mode).map_err(runtime)?,
    };
    let powers = cfg.evaluation.powers_dbm.clone();
    let seed = RngStreams::new(cfg.seed).split("evaluate", 0).master();
    let points = monte_carlo_ber(&model, &cfg.channel_spec(mode), &recipe(&cfg), &powers, seed).map_err(runtime)?;
    let mut report = BerReport::new("power_dbm", &cfg.hash().map_err(runtime)?, cfg.seed);
    report.values = powers;
    report.points = points;
    write_report(&dir, &report).map_err(runtime)?;
    Ok(dir)
}

fn cmd_sweep(common: &Common) -> std::result::Result<PathBuf, CliError> {
    let cfg = resolve(common)?;
    for &m in &cfg.sweep.modes {
        // Report, but do not abort on, modes that are infeasible as a whole.
        if let Err(e) = cfg.validate_mode(m) {
            eprintln!("note: {m:?} mode is infeasible and will be skipped: {e}");
        }
    }
    let dir = start_run(&cfg, "sweep").map_err(runtime)?;
    let report = sweep(&cfg, |msg| eprintln!("{msg}")).map_err(runtime)?;
    write_report(&dir, &report).map_err(runtime)?;
    Ok(dir)
}

fn cmd_export(common: &Common, checkpoint: &Path, calibration: Option<&Path>) -> std::result::Result<PathBuf, CliError> {
    let cfg = resolve(common)?;
    let mut model = load_checkpoint(checkpoint, &cfg)?.model;
    if let Some(c) = calibration {
        let set = CalibrationSet::load(c).map_err(at(EXIT_CONFIG))?;
        apply_calibration(&mut model, &set).map_err(at(EXIT_VALIDATION))?;
    }
    let dir = start_run(&cfg, "export").map_err(runtime)?;
    copy_input(checkpoint, &dir, "input-checkpoint.json").map_err(runtime)?;
    let q = Quantization::new(cfg.deploy.phase_bits).map_err(at(EXIT_VALIDATION))?;
    let hash = cfg.hash().map_err(runtime)?;
    let bdir = dir.join("bundles");
    let pdir = dir.join("phase-maps");
    create_dir(&bdir).map_err(runtime)?;
    create_dir(&pdir).map_err(runtime)?;
    let quantized = crate::deploy::quantize_model(&model, q.bits).map_err(runtime)?;
    for b in partition(&quantized, &hash, Some(q)) {
        let name = match b.role {
            crate::deploy::Role::Bs => "bs.bundle".to_string(),
            crate::deploy::Role::Ue { user } => format!("ue-{user}.bundle"),
        };
        b.save(&bdir.join(name)).map_err(runtime)?;
    }
    PhaseMap::from_stack(&model.tx_stack(), q)
        .and_then(|m| m.save(&pdir.join("tx.phasemap")))
        .map_err(runtime)?;
    for j in 0..model.spec.users() {
        PhaseMap::from_stack(&model.rx_stack(j), q)
            .and_then(|m| m.save(&pdir.join(format!("rx-{j}.phasemap"))))
            .map_err(runtime)?;
    }
    Ok(dir)
}

fn cmd_plot(report: &Path, out: &Path) -> std::result::Result<PathBuf, CliError> {
    let text = std::fs::read_to_string(report).map_err(|e| CliError {
        code: EXIT_CONFIG,
        error: Error::io(report, e),
    })?;
    let rows = parse_report_csv(&text, &report.display().to_string()).map_err(at(EXIT_CONFIG))?;
    let svg = render_svg(&rows).map_err(at(EXIT_VALIDATION))?;
    let tag = hex::encode(Sha256::digest(text.as_bytes()));
    let dir = run_dir(out, "plot", &tag[..8]).map_err(runtime)?;
    write(&dir.join("figure.svg"), svg).map_err(runtime)?;
    Ok(dir)
}

/// Dispatches a parsed command; returns the run directory.
pub fn execute(cli: &Cli) -> std::result::Result<PathBuf, CliError> {
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Finetune {
            common,
            checkpoint,
            replica,
        } => cmd_finetune(common, checkpoint, *replica),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(common, checkpoint.as_deref()),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Export {
            common,
            checkpoint,
            calibration,
        } => cmd_export(common, checkpoint, calibration.as_deref()),
        Command::Plot { report, out } => cmd_plot(report, out),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
/// The run directory is printed on stdout, errors on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            EXIT_OK
        }
        Err(CliError { code, error }) => {
            eprintln!("error: {error}");
            code
        }
    }
}

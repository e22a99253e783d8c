use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hestia::check::{emit_curves, run_checks, write_summary, CheckOptions};
use hestia::config::RunConfig;
use hestia::experiment::{
    calibrate_model, compare_reports, config_hash, prepare, run_sweep, write_sweep_csv, SweepGrid,
};
use hestia::quantizer::{jacobian_value, Quantizer};
use hestia::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use hestia::trainer::{export_quantized, Mode, MetricsWriter, TrainReport, Trainer};

const PRECEDENCE: &str = "Configuration precedence (lowest to highest): built-in defaults, \
the --config file (flat JSON with dotted keys such as \"schedule.rho\"), the HESTIA_SEED \
environment variable, then command-line flags (--set key=value, then dedicated flags).";

#[derive(Parser)]
#[command(name = "hestia", version, about = "Ternary quantization-aware training toolkit", after_help = PRECEDENCE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate per-tensor Hessian traces and write the calibration file.
    Sens(SensArgs),
    /// Train in hestia, ste or full_precision mode.
    Train(TrainArgs),
    /// Run the numerical invariant suite.
    Check(CheckArgs),
    /// Run a grid of trainings and write one CSV row per run.
    Sweep(SweepArgs),
    /// Export a checkpoint as ternary codes plus scales.
    Export(ExportArgs),
    /// Summarize final-loss and flip-rate deltas between two reports.
    Compare(CompareArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat dotted-key JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set schedule.alpha=0 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SensArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Calibration file path (default: <output_dir>/sensitivity.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from the weights of a checkpoint instead of the fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Use score 0.5 for every tensor instead of a calibration file.
    #[arg(long)]
    uniform_scores: bool,
    /// Start from the weights of a checkpoint (fresh optimizer).
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue an interrupted run from its checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many steps and checkpoint (for later --resume).
    #[arg(long)]
    stop_at: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write temperature and Jacobian curves as CSV into this directory.
    #[arg(long)]
    emit_curves: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    hutch_seeds: u64,
    /// Fault injection: scale the closed-form Jacobian by 1.1.
    #[arg(long, hide = true)]
    corrupt_jacobian: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// JSON grid file with keys modes, alphas, rhos, group_sizes, seeds.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    modes: Vec<Mode>,
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    rhos: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    group_sizes: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// CSV path (default: <output_dir>/sweep.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var("HESTIA_SEED") {
        let seed: u64 = s.parse().context("HESTIA_SEED must be an unsigned integer")?;
        cfg = cfg.with_seed(seed);
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg = cfg.set(k, v)?;
    }
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn load_init(model: &mut hestia::models::Model, path: &Path) -> Result<()> {
    let (state, _) = load_checkpoint(path, model)?;
    model.set_values(state.weights)?;
    Ok(())
}

fn cmd_sens(args: SensArgs) -> Result<()> {
    let cfg = resolve_config(&args.cfg)?;
    let (mut model, data) = prepare(&cfg)?;
    if let Some(p) = &args.init {
        load_init(&mut model, p)?;
    }
    let report = calibrate_model(&cfg, &model, &data)?;
    let out = args.out.unwrap_or_else(|| cfg.output_dir.join("sensitivity.json"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    report.save(&out)?;
    println!("{:<20} {:>14} {:>10}", "tensor", "h", "s");
    for (name, t) in &report.tensors {
        println!(
            "{:<20} {:>14.6e} {:>10.6}{}",
            name,
            t.h,
            t.s,
            if t.clamped { "  (clamped)" } else { "" }
        );
    }
    if let Some(tau) = report.init_temperature {
        println!("searched initial temperature {tau:.6} (default {})", cfg.train.schedule.tau_init);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.cfg)?;
    if let Some(m) = args.mode {
        cfg.train.mode = m;
    }
    if let Some(n) = args.steps {
        cfg.train.total_steps = n;
    }
    if let Some(p) = args.calibration {
        cfg.train.calibration = Some(p);
    }
    if args.uniform_scores {
        cfg.train.uniform_scores = true;
    }
    cfg.train.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;

    let (mut model, data) = prepare(&cfg)?;
    if let Some(p) = &args.init {
        load_init(&mut model, p)?;
    }
    let scores = cfg.train.resolve_scores(&model)?;
    cfg.save(&dir.join("config.json"))?;

    let trainer = Trainer::new(&model, &data, cfg.train.clone(), scores)?;
    let metrics_path = dir.join("metrics.jsonl");
    let (mut state, mut writer) = match &args.resume {
        Some(p) => {
            let (state, seed) = load_checkpoint(p, &model)?;
            if seed != cfg.train.seed {
                bail!("checkpoint was written with seed {seed}, config has {}", cfg.train.seed);
            }
            (state, MetricsWriter::append(&metrics_path)?)
        }
        None => (trainer.initial_state(), MetricsWriter::create(&metrics_path)?),
    };
    let until = args.stop_at.unwrap_or(cfg.train.total_steps);
    let run = trainer.run_until(&mut state, until, &mut |r| writer.write(r));
    let ckpt = dir.join("checkpoint.bin");
    save_checkpoint(&ckpt, &model, &state, cfg.train.seed)?;
    run.with_context(|| format!("training stopped at step {}", state.step))?;

    if state.step < cfg.train.total_steps {
        println!("stopped at step {}; resume with --resume {}", state.step, ckpt.display());
        return Ok(());
    }
    let report = trainer.report(&state)?;
    write_json(&dir.join("report.json"), &serde_json::to_value(&report)?)?;
    if cfg.train.mode != Mode::FullPrecision {
        trainer.export(&state)?.save(&dir.join("artifact.json"))?;
    }
    print_report(&report);
    println!("outputs in {}", dir.display());
    Ok(())
}

fn print_report(r: &TrainReport) {
    println!("mode {}  steps {}/{}  seed {}", r.mode, r.steps_completed, r.total_steps, r.seed);
    println!("initial held-out loss   {:.6}", r.initial.loss);
    println!("final effective loss    {:.6}", r.final_effective.loss);
    if let Some(e) = &r.final_exported {
        println!("final exported loss     {:.6}", e.loss);
    }
    if let Some(q) = &r.quantization {
        println!("flip fraction           {:.6e}", q.flip_fraction);
        println!("mean dead-zone fraction {:.6}", q.mean_dead_zone);
    }
}

fn broken_jacobian(z: f64, tau: f64) -> f64 {
    1.1 * jacobian_value(z, tau)
}

fn cmd_check(args: CheckArgs) -> Result<bool> {
    let opts = CheckOptions {
        jacobian: if args.corrupt_jacobian { broken_jacobian } else { jacobian_value },
        hutch_seeds: args.hutch_seeds,
    };
    let report = run_checks(&opts)?;
    write_summary(&report, std::io::stderr())?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = &args.out {
        std::fs::write(p, format!("{json}\n"))?;
    }
    if let Some(dir) = &args.emit_curves {
        let cfg = resolve_config(&args.cfg)?;
        emit_curves(dir, &cfg.train.schedule())?;
    }
    Ok(report.passed)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = resolve_config(&args.cfg)?;
    let mut grid = match &args.grid {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing grid {}", p.display()))?,
        None => SweepGrid {
            seeds: vec![cfg.seed],
            alphas: vec![cfg.train.schedule.alpha],
            rhos: vec![cfg.train.schedule.rho],
            group_sizes: vec![cfg.train.quantizer.group_size],
            modes: vec![cfg.train.mode],
        },
    };
    if !args.modes.is_empty() {
        grid.modes = args.modes;
    }
    if !args.alphas.is_empty() {
        grid.alphas = args.alphas;
    }
    if !args.rhos.is_empty() {
        grid.rhos = args.rhos;
    }
    if !args.group_sizes.is_empty() {
        grid.group_sizes = args
            .group_sizes
            .iter()
            .map(|g| {
                let v = serde_json::from_str(g).unwrap_or(serde_json::Value::String(g.clone()));
                serde_json::from_value(v).with_context(|| format!("bad group size {g:?}"))
            })
            .collect::<Result<_>>()?;
    }
    if !args.seeds.is_empty() {
        grid.seeds = args.seeds;
    }
    let rows = run_sweep(&cfg, &grid);
    let out = args.out.unwrap_or_else(|| cfg.output_dir.join("sweep.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_sweep_csv(&rows, &out)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!("{} runs ({failed} failed), wrote {}", rows.len(), out.display());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let cfg = resolve_config(&args.cfg)?;
    let (model, _) = prepare(&cfg)?;
    let (state, _) = load_checkpoint(&args.checkpoint, &model)?;
    if state.step < cfg.train.total_steps {
        eprintln!(
            "note: checkpoint is at step {} of {}; exporting early",
            state.step, cfg.train.total_steps
        );
    }
    let artifact = export_quantized(&model, &state.weights, &Quantizer::new(cfg.train.quantizer.clone())?)?;
    artifact.save(&args.out)?;
    let h = artifact.code_histogram();
    println!(
        "codes -1/0/+1: {:.4} {:.4} {:.4}  (config {})",
        h.minus,
        h.zero,
        h.plus,
        config_hash(&cfg)?
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let load = |p: &Path| -> Result<TrainReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?)
    };
    let c = compare_reports(&load(&args.a)?, &load(&args.b)?)?;
    println!("{}", serde_json::to_string_pretty(&c)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sens(a) => cmd_sens(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Check(a) => cmd_check(a),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::Export(a) => cmd_export(a).map(|_| true),
        Command::Compare(a) => cmd_compare(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line front end for the streaming attention scenarios.
//!
//! Exit codes: 0 on success (and when every verification report passes),
//! 1 on runtime or verification failure, 2 on usage or configuration
//! errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use streamattn::stream::{
    compare_kernels, finish_kernels, finish_probe, probe_snapshots, run_scenario, run_suite,
    Precision, ScenarioConfig, ShapeChoice, TimingMode,
};

#[derive(Parser)]
#[command(
    name = "streamattn",
    version,
    about = "Bounded-state streaming attention scenarios, kernel comparisons, and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a planted-stream scenario and export per-step records.
    Run(CommonArgs),
    /// Run the verification suite and export one report per bound.
    Verify(CommonArgs),
    /// Compare influence-kernel shapes on one planted key-value stream.
    Kernels(CommonArgs),
    /// Ridge-probe exported state snapshots against a targets table.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat `key = value` config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stream seed; fixed seeds reproduce runs exactly.
    #[arg(long)]
    seed: Option<u64>,
    /// Stream length in steps.
    #[arg(long)]
    length: Option<usize>,
    /// Steps processed per chunk (must be at least the window).
    #[arg(long)]
    chunk: Option<usize>,
    /// Local window, box width, and refresh period.
    #[arg(long)]
    window: Option<usize>,
    /// Output directory for records, summaries, and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Arithmetic for the carried state: f64 or f32.
    #[arg(long)]
    precision: Option<String>,
    /// Kernel shape under test; omitting it compares every shape.
    #[arg(long)]
    shape: Option<String>,
    /// Per-step timing: real or off. Off zeroes step_ns so records are
    /// byte-reproducible.
    #[arg(long)]
    timing: Option<String>,
    /// Record relevant attention mass per step (costs quadratic time).
    #[arg(long)]
    dilution: bool,
    /// Write a state snapshot at every chunk boundary.
    #[arg(long)]
    export_snapshots: bool,
    /// Debug hook: drive verification gates at this constant retention so
    /// the state-bound check must fail (values above 1 break the premise).
    #[arg(long)]
    gamma_override: Option<f64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory holding exported state snapshots.
    #[arg(long)]
    snapshots: PathBuf,
    /// CSV table with header `file,target` naming snapshots and values.
    #[arg(long)]
    targets: PathBuf,
    /// Ridge penalty for the probe.
    #[arg(long, default_value_t = 1e-6)]
    lambda: f64,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn build_config(args: &CommonArgs) -> streamattn::error::Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_config_file(path)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(length) = args.length {
        cfg.length = length;
    }
    if let Some(chunk) = args.chunk {
        cfg.chunk = chunk;
    }
    if let Some(window) = args.window {
        cfg.window = window;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(precision) = &args.precision {
        cfg.precision = Precision::from_name(precision)?;
    }
    if let Some(shape) = &args.shape {
        cfg.shape = Some(ShapeChoice::from_name(shape)?);
    }
    if let Some(timing) = &args.timing {
        cfg.timing = TimingMode::from_name(timing)?;
    }
    if args.dilution {
        cfg.dilution = true;
    }
    if args.export_snapshots {
        cfg.export_snapshots = true;
    }
    if let Some(g) = args.gamma_override {
        cfg.gamma_override = Some(g);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, probe) = match &cli.command {
        Command::Run(args) | Command::Verify(args) | Command::Kernels(args) => (args, None),
        Command::Probe(args) => (&args.common, Some(args)),
    };
    let cfg = match build_config(common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match &cli.command {
        Command::Run(_) => cmd_run(&cfg),
        Command::Verify(_) => return cmd_verify(&cfg),
        Command::Kernels(_) => cmd_kernels(&cfg),
        Command::Probe(_) => {
            let args = probe.expect("probe arguments");
            cmd_probe(&cfg, args)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn cmd_run(cfg: &ScenarioConfig) -> streamattn::error::Result<()> {
    let outcome = run_scenario(cfg)?;
    println!(
        "wrote {} ({} records)",
        cfg.out_dir.join("records.csv").display(),
        outcome.records.len()
    );
    let bytes = &outcome.summary["state_bytes"];
    println!(
        "state bytes: min {} max {} constant {}",
        bytes["min"], bytes["max"], bytes["constant"]
    );
    let fit = &outcome.summary["time_fit"];
    if fit["slope_ns_per_step"].is_null() {
        println!("time fit: unavailable (timing off or too few steps)");
    } else {
        println!(
            "time fit: slope {} ns/step, r_squared {}",
            fit["slope_ns_per_step"], fit["r_squared"]
        );
    }
    if cfg.dilution {
        println!("min dilution margin: {}", outcome.summary["min_dilution_margin"]);
    }
    Ok(())
}

fn cmd_verify(cfg: &ScenarioConfig) -> ExitCode {
    match run_suite(cfg) {
        Ok(outcome) => {
            for report in &outcome.reports {
                let status = if report.pass { "PASS" } else { "FAIL" };
                println!(
                    "{status} {} (samples {}, max violation {:.3e})",
                    report.name, report.samples, report.max_violation
                );
            }
            if outcome.all_pass {
                println!("all checks passed");
                ExitCode::SUCCESS
            } else {
                println!("verification failed");
                ExitCode::from(EXIT_FAILURE)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn cmd_kernels(cfg: &ScenarioConfig) -> streamattn::error::Result<()> {
    let shapes: Vec<ShapeChoice> = match cfg.shape {
        Some(shape) => vec![shape],
        None => ShapeChoice::all().to_vec(),
    };
    let cmp = compare_kernels(cfg, &shapes)?;
    for run in &cmp.runs {
        let envelope = run
            .drift_envelope
            .map(|e| format!("{e:.3e}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<14} norm_slope {:+.3e}  max_jump_ratio {:>9.2}  max_drift {:.3e}  envelope {}",
            run.shape.name(),
            run.norm_slope,
            run.max_jump_ratio,
            run.max_drift,
            envelope
        );
    }
    finish_kernels(&cmp, cfg)?;
    println!("wrote {}", cfg.out_dir.join("kernels.csv").display());
    Ok(())
}

fn cmd_probe(cfg: &ScenarioConfig, args: &ProbeArgs) -> streamattn::error::Result<()> {
    let report = probe_snapshots(&args.snapshots, &args.targets, args.lambda)?;
    println!(
        "probe: r_squared {:.6} over {} train / {} test rows",
        report.r_squared, report.n_train, report.n_test
    );
    finish_probe(&report, cfg)?;
    println!("wrote {}", cfg.out_dir.join("probe.json").display());
    Ok(())
}

//! Command-line front end for the gradient-annealing lab.
//!
//! `main.rs` only parses arguments and maps errors to exit codes; everything
//! else lives here so it can be driven from tests.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gga_core::experiment::ExperimentFile;
use gga_core::harness::{
    parse_window, run_protocol, sensitivity_sweep, write_summary_csv, write_sweep_csv,
};
use gga_core::telemetry::{read_jsonl, summarize, write_jsonl, write_report_csv};
use gga_core::{LabError, Result};

pub const OUT_ENV: &str = "GGA_LAB_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "gga-lab",
    version,
    about = "Gradient-guided annealing experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every (split, seed) pair of an experiment and summarize target accuracy.
    Run(RunArgs),
    /// Repeat the protocol over a grid of perturbation radii and annealing windows.
    Sweep(SweepArgs),
    /// Turn a telemetry file into a plotting CSV and print its headline numbers.
    Report(ReportArgs),
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment file (TOML).
    pub config: PathBuf,
    /// Override a configuration key, e.g. `--set method=erm` or `--set anneal.rho=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Number of seeds per split.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Output directory; takes precedence over the environment and the config.
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 uses every core).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated perturbation radii, e.g. `1e-6,1e-5,1e-4`.
    #[arg(long)]
    pub rho_grid: Option<String>,
    /// Comma-separated windows: `early`, `mid`, `late` or `start-end`.
    #[arg(long)]
    pub window_grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Telemetry JSON-lines file.
    pub telemetry: PathBuf,
    /// CSV destination; defaults to the telemetry path with a `.report.csv` suffix.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Annealing window `start-end`; inferred from accepted counts when omitted.
    #[arg(long)]
    pub window: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Write the experiment's dataset as CSV.
    Export {
        config: PathBuf,
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

/// 2 for configuration problems, 1 for everything else.
pub fn exit_code(err: &LabError) -> u8 {
    if err.is_config() {
        2
    } else {
        1
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Report(args) => cmd_report(&args),
        Command::Data {
            command: DataCommand::Export { config, out, set },
        } => cmd_data_export(&config, &out, &set),
    }
}

/// Loads the experiment and folds the command-line flags into it, so the
/// resolved echo records exactly what ran.
fn resolve(args: &RunArgs) -> Result<ExperimentFile> {
    let mut exp = ExperimentFile::load(&args.config, &args.set)?;
    if let Some(n) = args.seeds {
        exp.protocol.seeds = n;
    }
    if let Some(j) = args.jobs {
        exp.protocol.jobs = j;
    }
    if let Some(out) = &args.out {
        exp.output.dir = out.to_string_lossy().into_owned();
    }
    exp.validate()?;
    Ok(exp)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_resolved(exp: &ExperimentFile, dir: &Path) -> Result<()> {
    let mut f = create(&dir.join("resolved_config.toml"))?;
    f.write_all(exp.to_toml()?.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let exp = resolve(args)?;
    let dir = PathBuf::from(&exp.output.dir);
    let ds = exp.build_dataset()?;
    let summary = run_protocol(
        &ds,
        &exp.train,
        exp.protocol.seeds,
        exp.protocol.splits,
        exp.protocol.jobs,
    )?;

    fs::create_dir_all(&dir)?;
    write_resolved(&exp, &dir)?;
    let mut f = create(&dir.join("summary.csv"))?;
    write_summary_csv(&summary.rows, &mut f)?;
    f.flush()?;
    if exp.output.telemetry {
        for run in &summary.runs {
            let path = dir
                .join("telemetry")
                .join(format!("split{}_seed{}.jsonl", run.split, run.seed));
            let mut f = create(&path)?;
            write_jsonl(&run.result.telemetry, &mut f)?;
            f.flush()?;
        }
    }

    for r in &summary.rows {
        println!(
            "split {} target {:<12} {:<6} seeds {:>3}  acc {:.4} ± {:.4}",
            r.split,
            r.target_domain,
            r.method.name(),
            r.seed_count,
            r.mean_acc,
            r.stderr
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn parse_rho_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|s| {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|e| LabError::Parse(format!("rho grid entry '{s}': {e}")))?;
            if !(v.is_finite() && v > 0.0) {
                return Err(LabError::Config(format!(
                    "rho grid entry '{s}' must be positive"
                )));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(grid)
}

pub fn parse_window_grid(text: &str, iterations: usize) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|s| parse_window(s, iterations))
        .collect()
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    if args.rho_grid.is_none() && args.window_grid.is_none() {
        return Err(LabError::Config(
            "sweep needs --rho-grid, --window-grid or both".into(),
        ));
    }
    let exp = resolve(&args.run)?;
    let anneal = &exp.train.anneal;
    let rhos = match &args.rho_grid {
        Some(g) => parse_rho_grid(g)?,
        None => vec![anneal.rho],
    };
    let windows = match &args.window_grid {
        Some(g) => parse_window_grid(g, exp.train.iterations)?,
        None => vec![(anneal.start, anneal.end)],
    };
    let ds = exp.build_dataset()?;
    let rows = sensitivity_sweep(
        &ds,
        &exp.train,
        &rhos,
        &windows,
        exp.protocol.seeds,
        exp.protocol.splits,
        exp.protocol.jobs,
    )?;

    let dir = PathBuf::from(&exp.output.dir);
    fs::create_dir_all(&dir)?;
    write_resolved(&exp, &dir)?;
    let mut f = create(&dir.join("sweep.csv"))?;
    write_sweep_csv(&rows, &mut f)?;
    f.flush()?;
    for r in &rows {
        println!(
            "rho {:<8e} window {:>4}-{:<4} target {:<12} acc {:.4} ± {:.4}",
            r.rho,
            r.window_start,
            r.window_end,
            r.summary.target_domain,
            r.summary.mean_acc,
            r.summary.stderr
        );
    }
    println!("wrote {}", dir.join("sweep.csv").display());
    Ok(())
}

fn report_path(telemetry: &Path) -> PathBuf {
    let stem = telemetry
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "telemetry".into());
    telemetry.with_file_name(format!("{stem}.report.csv"))
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let file = File::open(&args.telemetry)
        .map_err(|e| LabError::Config(format!("cannot read {}: {e}", args.telemetry.display())))?;
    let records = read_jsonl(BufReader::new(file))?;
    let window = match &args.window {
        Some(w) => {
            let last = records.last().map_or(0, |r| r.t);
            Some(parse_window(w, last)?)
        }
        None => None,
    };
    let summary = summarize(&records, window)?;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| report_path(&args.telemetry));
    let mut f = create(&out)?;
    write_report_csv(&records, &mut f)?;
    f.flush()?;

    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
    println!("iterations      {}", summary.iterations);
    match summary.window {
        Some((s, e)) => println!("window          {s}-{e}"),
        None => println!("window          none"),
    }
    println!("sim at start    {}", fmt(summary.sim_at_start));
    println!("sim at end      {}", fmt(summary.sim_at_end));
    println!("final loss      {:.6}", summary.final_loss);
    println!("accepted total  {}", summary.total_accepted);
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_data_export(config: &Path, out: &Path, set: &[String]) -> Result<()> {
    let exp = ExperimentFile::load(config, set)?;
    let ds = exp.build_dataset()?;
    let mut f = create(out)?;
    ds.write_csv(&mut f)?;
    f.flush()?;
    println!("wrote {} rows to {}", ds.total_samples(), out.display());
    Ok(())
}

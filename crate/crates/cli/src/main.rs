//! `invfilt` — benchmark CLI for invariant filtering on matrix Lie groups.
//!
//! Subcommands: `simulate` (write truth/observation tables), `filter` (run
//! one filter as a Monte-Carlo experiment), `compare` (several filters on
//! identical trajectories), `optimize-horizon` (grid-search the saturated
//! gravity-direction gain), `stationary` (sample the stationary error law
//! of a fixed-gain filter), and `presets` (list the named experiments).
//!
//! `--config` accepts either a preset name (see `invfilt presets`) or a
//! path to a TOML scenario file. Exit codes: 0 on success, 2 on
//! configuration errors, 3 on numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use invariant_filters::fixed_gain::{estimate_stationary, log_grid};
use invariant_filters::filter::GainFunction;
use invariant_filters::harness::{
    compare_filters, optimize_horizon_cmd, run_experiment, simulate_cmd, ExperimentConfig,
    FilterSelector, Preset, ScenarioConfig,
};
use invariant_filters::ienkf::DEFAULT_PARTICLES;
use invariant_filters::model::{OutputMap, Scenario};
use invariant_filters::{Error, Result};

#[derive(Parser)]
#[command(
    name = "invfilt",
    about = "Benchmarks for intrinsic stochastic filters on matrix Lie groups",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and write truth.csv / observations.csv.
    Simulate(CommonArgs),
    /// Run one filter over Monte-Carlo trajectories and write error CSVs.
    Filter(FilterArgs),
    /// Run several filters over the same trajectories and merge their RMSE.
    Compare(CompareArgs),
    /// Grid-search the saturated gravity-direction gain.
    OptimizeHorizon(OptimizeArgs),
    /// Sample the stationary error distribution of a fixed-gain filter.
    Stationary(StationaryArgs),
    /// List the named benchmark experiments.
    Presets,
}

#[derive(Args)]
struct CommonArgs {
    /// Preset name (exp-table3, exp-horizon, exp-linear-equiv) or path to
    /// a TOML scenario file.
    #[arg(long)]
    config: String,
    /// Master seed; defaults to the scenario's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "invfilt-out")]
    out: PathBuf,
    /// Number of Monte-Carlo trajectories; defaults to the scenario's.
    #[arg(long)]
    trajectories: Option<usize>,
}

#[derive(Args)]
struct FilterArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Filter: iekf | ienkf | fixed-gain | mekf | asymptotic-iekf.
    /// Defaults to the preset's filter, or iekf.
    #[arg(long)]
    filter: Option<String>,
    #[command(flatten)]
    params: FilterParams,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Filter to include; repeat the flag to compare several
    /// (default: iekf and mekf).
    #[arg(long = "filter")]
    filters: Vec<String>,
    #[command(flatten)]
    params: FilterParams,
}

/// Filter parameters shared by all selectors.
#[derive(Args)]
struct FilterParams {
    /// Ensemble size for ienkf.
    #[arg(long, default_value_t = DEFAULT_PARTICLES)]
    particles: usize,
    /// Observation-covariance inflation for mekf.
    #[arg(long, default_value_t = 1.0)]
    inflation: f64,
    /// First fixed gain (two-direction outputs).
    #[arg(long, default_value_t = 0.3)]
    k1: f64,
    /// Second fixed gain (two-direction outputs).
    #[arg(long, default_value_t = 0.3)]
    k2: f64,
    /// Fixed gain (single-direction outputs).
    #[arg(long, default_value_t = 0.1202)]
    k: f64,
    /// Innovation-angle saturation in radians (single-direction outputs).
    #[arg(long, default_value_t = 0.0029)]
    lambda: f64,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Grid points per axis (logarithmic).
    #[arg(long, default_value_t = 10)]
    grid: usize,
    #[arg(long, default_value_t = 0.01)]
    k_lo: f64,
    #[arg(long, default_value_t = 1.0)]
    k_hi: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda_lo: f64,
    #[arg(long, default_value_t = std::f64::consts::PI)]
    lambda_hi: f64,
    /// Independent error chains per grid point.
    #[arg(long, default_value_t = 500)]
    chains: usize,
    /// Steps discarded before sampling each chain.
    #[arg(long, default_value_t = 500)]
    burn_in: usize,
    /// Steps retained per chain.
    #[arg(long, default_value_t = 500)]
    retain: usize,
}

#[derive(Args)]
struct StationaryArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    params: FilterParams,
    #[arg(long, default_value_t = 500)]
    chains: usize,
    #[arg(long, default_value_t = 500)]
    burn_in: usize,
    #[arg(long, default_value_t = 500)]
    retain: usize,
    /// Histogram bins per axis in stationary.csv.
    #[arg(long, default_value_t = 50)]
    bins: usize,
}

/// A scenario plus the run defaults that came with it.
struct ResolvedScenario {
    scenario: Scenario,
    seed: u64,
    trajectories: usize,
    preset: Option<Preset>,
}

fn resolve_scenario(config: &str) -> Result<ResolvedScenario> {
    if let Some(preset) = Preset::from_name(config) {
        return Ok(ResolvedScenario {
            scenario: preset.scenario()?,
            seed: preset.default_seed(),
            trajectories: preset.default_trajectories(),
            preset: Some(preset),
        });
    }
    let path = PathBuf::from(config);
    let file = ScenarioConfig::load(&path)?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scenario")
        .to_string();
    let scenario = file.to_scenario(&name)?;
    Ok(ResolvedScenario {
        scenario,
        seed: file.seed.unwrap_or(42),
        trajectories: file.num_trajectories.unwrap_or(100),
        preset: None,
    })
}

fn fixed_gain_for(scenario: &Scenario, params: &FilterParams) -> Result<GainFunction> {
    match &scenario.model.output {
        OutputMap::TwoVector { b1, b2 } => {
            GainFunction::two_vector(params.k1, params.k2, b1.clone(), b2.clone())
        }
        OutputMap::SingleVector { g_ref } => {
            GainFunction::horizon(params.k, params.lambda, g_ref.clone())
        }
        _ => Err(Error::Config(
            "fixed-gain filters need a direction observation (two_vector or single_vector)"
                .into(),
        )),
    }
}

fn selector_from_name(
    name: &str,
    scenario: &Scenario,
    params: &FilterParams,
) -> Result<FilterSelector> {
    match name {
        "iekf" => Ok(FilterSelector::Iekf),
        "ienkf" => Ok(FilterSelector::Ienkf {
            particles: params.particles,
        }),
        "fixed-gain" => Ok(FilterSelector::FixedGain {
            gain: fixed_gain_for(scenario, params)?,
        }),
        "mekf" => Ok(FilterSelector::Mekf {
            inflation: params.inflation,
        }),
        "asymptotic-iekf" => Ok(FilterSelector::AsymptoticIekf),
        other => Err(Error::Config(format!(
            "unknown filter {other:?}; expected iekf, ienkf, fixed-gain, mekf, \
             or asymptotic-iekf"
        ))),
    }
}

fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let resolved = resolve_scenario(&args.config)?;
    let seed = args.seed.unwrap_or(resolved.seed);
    let n = args.trajectories.unwrap_or(resolved.trajectories);
    simulate_cmd(&resolved.scenario, n, seed, &args.out)?;
    println!(
        "simulated {n} trajectories of {} ({} steps) into {}",
        resolved.scenario.name,
        resolved.scenario.steps,
        args.out.display()
    );
    Ok(())
}

fn cmd_filter(args: &FilterArgs) -> Result<()> {
    let resolved = resolve_scenario(&args.common.config)?;
    let filter = match &args.filter {
        Some(name) => selector_from_name(name, &resolved.scenario, &args.params)?,
        None => resolved
            .preset
            .map(|p| p.default_filter())
            .unwrap_or(FilterSelector::Iekf),
    };
    let config = ExperimentConfig {
        scenario: resolved.scenario,
        filter,
        n_trajectories: args.common.trajectories.unwrap_or(resolved.trajectories),
        master_seed: args.common.seed.unwrap_or(resolved.seed),
        out_dir: Some(args.common.out.clone()),
    };
    let report = run_experiment(&config)?;
    println!(
        "{} on {}: {} trajectories, final RMSE {:.6e}, wall time {:.2}s, wrote {}",
        config.filter.name(),
        config.scenario.name,
        config.n_trajectories,
        report.final_rmse,
        report.wall_time_s,
        args.common.out.display()
    );
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let resolved = resolve_scenario(&args.common.config)?;
    let names: Vec<String> = if args.filters.is_empty() {
        vec!["iekf".into(), "mekf".into()]
    } else {
        args.filters.clone()
    };
    let selectors = names
        .iter()
        .map(|n| selector_from_name(n, &resolved.scenario, &args.params))
        .collect::<Result<Vec<_>>>()?;
    let out = args.common.out.join("comparison.csv");
    let seed = args.common.seed.unwrap_or(resolved.seed);
    let n = args.common.trajectories.unwrap_or(resolved.trajectories);
    let reports = compare_filters(&resolved.scenario, &selectors, n, seed, Some(&out))?;
    for (selector, report) in selectors.iter().zip(&reports) {
        println!(
            "{:>16}: final RMSE {:.6e} ({:.2}s)",
            selector.name(),
            report.final_rmse,
            report.wall_time_s
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_optimize(args: &OptimizeArgs) -> Result<()> {
    let resolved = resolve_scenario(&args.common.config)?;
    if args.grid < 2 || args.k_lo <= 0.0 || args.k_hi <= args.k_lo || args.lambda_lo <= 0.0
        || args.lambda_hi <= args.lambda_lo
    {
        return Err(Error::Config(
            "grid needs at least 2 points per axis and increasing positive bounds".into(),
        ));
    }
    let k_values = log_grid(args.k_lo, args.k_hi, args.grid);
    let lambda_values = log_grid(args.lambda_lo, args.lambda_hi, args.grid);
    let seed = args.common.seed.unwrap_or(resolved.seed);
    let surface = optimize_horizon_cmd(
        &resolved.scenario,
        &k_values,
        &lambda_values,
        args.burn_in,
        args.retain,
        args.chains,
        seed,
        Some(args.common.out.as_path()),
    )?;
    let best = surface.best_point();
    println!(
        "optimum: k = {:.4}, lambda = {:.4e}, rmse = {:.4e} ({} samples); wrote {}",
        best.k,
        best.lambda,
        best.rmse,
        best.n_samples,
        args.common.out.display()
    );
    Ok(())
}

fn cmd_stationary(args: &StationaryArgs) -> Result<()> {
    let resolved = resolve_scenario(&args.common.config)?;
    let gain = fixed_gain_for(&resolved.scenario, &args.params)?;
    let seed = args.common.seed.unwrap_or(resolved.seed);
    let report = estimate_stationary(
        &resolved.scenario,
        &gain,
        args.burn_in,
        args.retain,
        args.chains,
        seed,
    )?;
    std::fs::create_dir_all(&args.common.out)?;
    let mut text = String::from("axis,bin_center,count\n");
    for axis in 0..report.axis_samples.len() {
        for (center, count) in report.histogram(axis, args.bins) {
            text.push_str(&format!("{},{},{}\n", axis + 1, center, count));
        }
    }
    let path = args.common.out.join("stationary.csv");
    std::fs::write(&path, text)?;
    println!(
        "stationary RMSE {:.6e} over {} samples ({} chains, burn-in {}); wrote {}",
        report.rmse,
        report.sample_count(),
        report.chains,
        report.burn_in,
        path.display()
    );
    Ok(())
}

fn cmd_presets() {
    for preset in Preset::ALL {
        println!("{:<18} {}", preset.name(), preset.describe());
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Filter(args) => cmd_filter(args),
        Command::Compare(args) => cmd_compare(args),
        Command::OptimizeHorizon(args) => cmd_optimize(args),
        Command::Stationary(args) => cmd_stationary(args),
        Command::Presets => {
            cmd_presets();
            Ok(())
        }
    }
}

/// Exit 2 for anything the user can fix in a config or flag; 3 for
/// numerical failures inside a run.
fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_)
        | Error::Format(_)
        | Error::Io(_)
        | Error::EmptyGrid
        | Error::InvalidGain(_)
        | Error::DimensionMismatch { .. } => 2,
        Error::NotInGroup { .. }
        | Error::NotInAlgebra { .. }
        | Error::LogBranchCut { .. }
        | Error::NotPositiveSemiDefinite { .. }
        | Error::SingularInnovation
        | Error::GainNotNeutralAtReference { .. }
        | Error::FingerprintMismatch { .. }
        | Error::NotConverged(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

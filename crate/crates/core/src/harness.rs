//! Monte-Carlo experiment harness: scenario config files, the experiment
//! runner, per-step statistics, CSV emission, and the named benchmark
//! presets.
//!
//! Errors are always reported in the algebra coordinates of the
//! left-invariant error `η = χ·χ̂^{-1}` (its logarithm), which is the
//! coordinate system in which every filter in this crate reasons. A report
//! carries, per step and per axis: the mean error, its empirical standard
//! deviation, the fraction of runs whose error lay inside the filter's own
//! reported 3σ bound, and that reported bound averaged over runs. The
//! whole pipeline is bit-reproducible: one master seed fans out to one
//! counter-derived RNG stream per trajectory, aggregation is performed in
//! trajectory order, and CSV floats are printed in shortest round-trip
//! form, so a rerun produces byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fixed_gain::{grid_optimize_horizon, HorizonSurface};
use crate::filter::{run_invariant_filter, error_of, GainFunction};
use crate::iekf::{asymptotic_gain, riccati_gains, run_iekf};
use crate::ienkf::{apply_schedule, offline_gains, GainSchedule, MomentForm};
use crate::lie::{AlgebraVector, GroupDescriptor, GroupElement};
use crate::mekf::run_mekf;
use crate::model::{
    simulate_trajectory, DiscreteModel, InputSignal, NoiseSpec, OutputMap, Scenario,
    SimulatedTrajectory,
};
use crate::rng::{domain_rng, DOMAIN_TRAJECTORY};

/// Tolerance used when freezing the converged gain of a Riccati pass.
pub const ASYMPTOTIC_GAIN_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Scenario configuration files
// ---------------------------------------------------------------------------

/// On-disk scenario description (TOML). Key names are part of the CLI
/// contract; unknown keys are rejected. `Qw`, `Qv`, and `P0` are isotropic
/// per-step variances in squared radians (squared units for translation
/// axes).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub group: String,
    pub output_kind: String,
    pub b1: Option<[f64; 3]>,
    pub b2: Option<[f64; 3]>,
    pub g_ref: Option<[f64; 3]>,
    #[serde(rename = "Qw")]
    pub qw: f64,
    #[serde(rename = "Qv")]
    pub qv: f64,
    #[serde(rename = "P0")]
    pub p0: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub dt: f64,
    pub outlier_prob: Option<f64>,
    pub outlier_std: Option<f64>,
    pub seed: Option<u64>,
    pub num_trajectories: Option<usize>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("scenario config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read scenario file {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    /// Builds the runnable scenario. The known motion input is a fixed
    /// moderate tumble; invariant-filter error statistics are independent
    /// of it, and it is part of the benchmark definition for the others.
    pub fn to_scenario(&self, name: &str) -> Result<Scenario> {
        let descriptor = match self.group.as_str() {
            "SO3" => GroupDescriptor::SO3,
            "SE3" => GroupDescriptor::SE3,
            other => {
                return Err(Error::Config(format!(
                    "unknown group {other:?}; expected \"SO3\" or \"SE3\""
                )))
            }
        };
        let vector = |field: &Option<[f64; 3]>, key: &str| -> Result<DVector<f64>> {
            field
                .map(|v| DVector::from_column_slice(&v))
                .ok_or_else(|| Error::Config(format!("output_kind {:?} needs {key}", self.output_kind)))
        };
        let output = match self.output_kind.as_str() {
            "two_vector" => OutputMap::TwoVector {
                b1: vector(&self.b1, "b1")?,
                b2: vector(&self.b2, "b2")?,
            },
            "single_vector" => OutputMap::SingleVector {
                g_ref: vector(&self.g_ref, "g_ref")?,
            },
            "velocity_se3" => OutputMap::VelocitySe3,
            other => {
                return Err(Error::Config(format!(
                    "unknown output_kind {other:?}; expected \"two_vector\", \
                     \"single_vector\", or \"velocity_se3\""
                )))
            }
        };
        if self.dt <= 0.0 {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        let dim = descriptor.algebra_dim();
        let mut noise = NoiseSpec::isotropic(dim, self.qw / self.dt, output.obs_dim(), self.qv)?;
        let prob = self.outlier_prob.unwrap_or(0.0);
        if prob > 0.0 {
            noise = noise.with_outlier(prob, self.outlier_std.unwrap_or(0.0))?;
        }
        let omega = match descriptor.id() {
            crate::lie::GroupId::So3 => {
                AlgebraVector::from_slice(descriptor, &[0.3, -0.2, 0.15])?
            }
            _ => AlgebraVector::from_slice(descriptor, &[0.3, -0.2, 0.15, 0.5, 0.0, 0.0])?,
        };
        let scenario = Scenario {
            name: name.to_string(),
            model: DiscreteModel {
                descriptor,
                dt: self.dt,
                upsilon: InputSignal::Zero,
                omega: InputSignal::Constant(omega),
                noise,
                output,
            },
            steps: self.n,
            truth_init: GroupElement::identity(descriptor),
            prior_cov: DMatrix::identity(dim, dim) * self.p0,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

// ---------------------------------------------------------------------------
// Experiment configuration and report
// ---------------------------------------------------------------------------

/// Which filter an experiment runs.
#[derive(Debug, Clone)]
pub enum FilterSelector {
    Iekf,
    Ienkf { particles: usize },
    FixedGain { gain: GainFunction },
    Mekf { inflation: f64 },
    AsymptoticIekf,
}

impl FilterSelector {
    pub fn name(&self) -> &'static str {
        match self {
            FilterSelector::Iekf => "iekf",
            FilterSelector::Ienkf { .. } => "ienkf",
            FilterSelector::FixedGain { .. } => "fixed-gain",
            FilterSelector::Mekf { .. } => "mekf",
            FilterSelector::AsymptoticIekf => "asymptotic-iekf",
        }
    }
}

/// A fully specified Monte-Carlo experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub filter: FilterSelector,
    pub n_trajectories: usize,
    pub master_seed: u64,
    /// Where to write `errors.csv`, `envelope.csv`, and (when the filter
    /// has a gain trace) `gains.csv`; `None` skips file output.
    pub out_dir: Option<PathBuf>,
}

/// Per-step Monte-Carlo statistics of the invariant error, in algebra
/// coordinates. All per-step arrays have `steps + 1` entries (the prior is
/// step 0).
#[derive(Debug, Clone)]
pub struct MonteCarloReport {
    /// Mean error per axis.
    pub mean: Vec<Vec<f64>>,
    /// Empirical standard deviation per axis.
    pub std: Vec<Vec<f64>>,
    /// Root mean squared error norm.
    pub rmse: Vec<f64>,
    /// Fraction of runs whose error magnitude stayed inside the filter's
    /// own reported 3σ bound, per axis.
    pub coverage: Vec<Vec<f64>>,
    /// The reported 3σ bound, averaged over runs, per axis. Zero for
    /// filters that do not report a dispersion (fixed gains).
    pub reported_3sigma: Vec<Vec<f64>>,
    pub final_rmse: f64,
    pub wall_time_s: f64,
    pub seed: u64,
}

impl MonteCarloReport {
    fn validate(&self, steps: usize) -> Result<()> {
        let n = steps + 1;
        if self.mean.len() != n
            || self.std.len() != n
            || self.rmse.len() != n
            || self.coverage.len() != n
            || self.reported_3sigma.len() != n
        {
            return Err(Error::Config("report arrays must cover every step".into()));
        }
        for row in &self.coverage {
            for &c in row {
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::Config(format!("coverage {c} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Filter dispatch
// ---------------------------------------------------------------------------

/// Data a filter needs once per experiment (gain schedules, Riccati
/// passes), shared across trajectories.
enum Prepared {
    Iekf {
        gains: Vec<DMatrix<f64>>,
    },
    AsymptoticIekf {
        gain: GainFunction,
        gain_matrix: DMatrix<f64>,
        variances: Vec<DVector<f64>>,
    },
    Ienkf {
        schedule: GainSchedule,
        variances: Vec<DVector<f64>>,
    },
    Mekf {
        inflation: f64,
    },
    FixedGain {
        gain: GainFunction,
    },
}

fn diag_variances(covariances: &[DMatrix<f64>]) -> Vec<DVector<f64>> {
    covariances.iter().map(|p| p.diagonal()).collect()
}

fn prepare(selector: &FilterSelector, scenario: &Scenario, master_seed: u64) -> Result<Prepared> {
    match selector {
        FilterSelector::Iekf => {
            let (gains, _) = riccati_gains(scenario, scenario.steps)?;
            Ok(Prepared::Iekf { gains })
        }
        FilterSelector::AsymptoticIekf => {
            let (gains, covariances) = riccati_gains(scenario, scenario.steps)?;
            let gain_matrix = asymptotic_gain(&gains, ASYMPTOTIC_GAIN_TOL)?;
            let gain = GainFunction::linear_exp(
                scenario.model.descriptor,
                gain_matrix.clone(),
                scenario.model.output.reference_output(),
            )?;
            Ok(Prepared::AsymptoticIekf {
                gain,
                gain_matrix,
                variances: diag_variances(&covariances),
            })
        }
        FilterSelector::Ienkf { particles } => {
            let schedule = offline_gains(scenario, *particles, master_seed, MomentForm::Printed)?;
            let variances = diag_variances(&schedule.post_covariances);
            Ok(Prepared::Ienkf { schedule, variances })
        }
        FilterSelector::Mekf { inflation } => Ok(Prepared::Mekf {
            inflation: *inflation,
        }),
        FilterSelector::FixedGain { gain } => Ok(Prepared::FixedGain { gain: gain.clone() }),
    }
}

struct RunOutput {
    states: Vec<GroupElement>,
    /// Per-step error variance the filter itself reports (diagonal), when
    /// it reports one.
    variances: Option<Vec<DVector<f64>>>,
}

fn run_one(
    prepared: &Prepared,
    scenario: &Scenario,
    trajectory: &SimulatedTrajectory,
) -> Result<RunOutput> {
    match prepared {
        Prepared::Iekf { .. } => {
            let run = run_iekf(scenario, trajectory)?;
            Ok(RunOutput {
                states: run.states,
                variances: Some(diag_variances(&run.covariances)),
            })
        }
        Prepared::AsymptoticIekf { gain, variances, .. } => Ok(RunOutput {
            states: run_invariant_filter(scenario, trajectory, gain)?,
            variances: Some(variances.clone()),
        }),
        Prepared::Ienkf { schedule, variances } => {
            let chi0 = trajectory.filter_init();
            Ok(RunOutput {
                states: apply_schedule(scenario, trajectory, &chi0, schedule)?,
                variances: Some(variances.clone()),
            })
        }
        Prepared::Mekf { inflation } => {
            let run = run_mekf(scenario, trajectory, *inflation)?;
            Ok(RunOutput {
                states: run.states,
                variances: Some(diag_variances(&run.covariances)),
            })
        }
        Prepared::FixedGain { gain } => Ok(RunOutput {
            states: run_invariant_filter(scenario, trajectory, gain)?,
            variances: None,
        }),
    }
}

fn gain_trace(prepared: &Prepared, steps: usize) -> Option<Vec<DMatrix<f64>>> {
    match prepared {
        Prepared::Iekf { gains } => Some(gains.clone()),
        Prepared::AsymptoticIekf { gain_matrix, .. } => Some(vec![gain_matrix.clone(); steps]),
        Prepared::Ienkf { schedule, .. } => Some(schedule.gains.clone()),
        Prepared::Mekf { .. } | Prepared::FixedGain { .. } => None,
    }
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

struct TrajectoryStats {
    /// Error coordinates per step.
    errors: Vec<DVector<f64>>,
    /// Reported variance diagonal per step (zeros when none).
    reported: Vec<DVector<f64>>,
    truth_hash: u64,
}

fn hash_truth(trajectory: &SimulatedTrajectory) -> u64 {
    let mut h = crate::model::Fnv1a::new();
    for state in &trajectory.truth {
        for value in state.matrix().iter() {
            h.write_f64(*value);
        }
    }
    h.finish()
}

fn run_trajectories(
    scenario: &Scenario,
    prepared: &Prepared,
    n_trajectories: usize,
    master_seed: u64,
) -> Result<Vec<TrajectoryStats>> {
    let dim = scenario.model.descriptor.algebra_dim();
    let results: Vec<Result<TrajectoryStats>> = (0..n_trajectories)
        .into_par_iter()
        .map(|t| {
            let mut rng = domain_rng(master_seed, DOMAIN_TRAJECTORY, t as u64);
            let trajectory = simulate_trajectory(scenario, &mut rng)?;
            let run = run_one(prepared, scenario, &trajectory)?;
            let mut errors = Vec::with_capacity(scenario.steps + 1);
            for (truth, estimate) in trajectory.truth.iter().zip(&run.states) {
                errors.push(error_of(truth, estimate).log()?.coords().clone());
            }
            let reported = run
                .variances
                .unwrap_or_else(|| vec![DVector::zeros(dim); scenario.steps + 1]);
            Ok(TrajectoryStats {
                errors,
                reported,
                truth_hash: hash_truth(&trajectory),
            })
        })
        .collect();
    results.into_iter().collect()
}

fn aggregate(
    scenario: &Scenario,
    stats: &[TrajectoryStats],
    master_seed: u64,
    wall_time_s: f64,
) -> Result<MonteCarloReport> {
    let dim = scenario.model.descriptor.algebra_dim();
    let steps = scenario.steps;
    let m = stats.len() as f64;
    let mut mean = vec![vec![0.0; dim]; steps + 1];
    let mut std = vec![vec![0.0; dim]; steps + 1];
    let mut rmse = vec![0.0; steps + 1];
    let mut coverage = vec![vec![0.0; dim]; steps + 1];
    let mut reported = vec![vec![0.0; dim]; steps + 1];

    for n in 0..=steps {
        for s in stats {
            let e = &s.errors[n];
            rmse[n] += e.norm_squared();
            for a in 0..dim {
                mean[n][a] += e[a];
                let bound = 3.0 * s.reported[n][a].max(0.0).sqrt();
                reported[n][a] += bound;
                if e[a].abs() <= bound {
                    coverage[n][a] += 1.0;
                }
            }
        }
        rmse[n] = (rmse[n] / m).sqrt();
        for a in 0..dim {
            mean[n][a] /= m;
            reported[n][a] /= m;
            coverage[n][a] /= m;
        }
        for s in stats {
            for a in 0..dim {
                std[n][a] += (s.errors[n][a] - mean[n][a]).powi(2);
            }
        }
        for a in 0..dim {
            std[n][a] = (std[n][a] / m).sqrt();
        }
    }

    let report = MonteCarloReport {
        final_rmse: *rmse.last().expect("at least the prior step"),
        mean,
        std,
        rmse,
        coverage,
        reported_3sigma: reported,
        wall_time_s,
        seed: master_seed,
    };
    report.validate(steps)?;
    Ok(report)
}

/// Runs one Monte-Carlo experiment: simulates `n_trajectories` independent
/// trajectories, runs the selected filter on each, aggregates the error
/// statistics, and (when an output directory is set) writes `errors.csv`,
/// `envelope.csv`, and `gains.csv`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MonteCarloReport> {
    if config.n_trajectories == 0 {
        return Err(Error::Config("need at least one trajectory".into()));
    }
    config.scenario.validate()?;
    let started = Instant::now();
    let prepared = prepare(&config.filter, &config.scenario, config.master_seed)?;
    let stats = run_trajectories(
        &config.scenario,
        &prepared,
        config.n_trajectories,
        config.master_seed,
    )?;
    let report = aggregate(
        &config.scenario,
        &stats,
        config.master_seed,
        started.elapsed().as_secs_f64(),
    )?;
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        write_errors_csv(&dir.join("errors.csv"), &stats)?;
        write_envelope_csv(&dir.join("envelope.csv"), &report)?;
        if let Some(gains) = gain_trace(&prepared, config.scenario.steps) {
            write_gains_csv(&dir.join("gains.csv"), &gains)?;
        }
    }
    Ok(report)
}

/// Runs several filters over the *same* simulated trajectories (same
/// master seed, verified by hashing each filter pass's truths) and writes
/// a merged per-step RMSE table. Returns one report per filter, in order.
pub fn compare_filters(
    scenario: &Scenario,
    selectors: &[FilterSelector],
    n_trajectories: usize,
    master_seed: u64,
    out: Option<&Path>,
) -> Result<Vec<MonteCarloReport>> {
    if selectors.is_empty() {
        return Err(Error::Config("no filters to compare".into()));
    }
    if n_trajectories == 0 {
        return Err(Error::Config("need at least one trajectory".into()));
    }
    scenario.validate()?;
    let mut reports = Vec::with_capacity(selectors.len());
    let mut truth_hash: Option<u64> = None;
    for selector in selectors {
        let started = Instant::now();
        let prepared = prepare(selector, scenario, master_seed)?;
        let stats = run_trajectories(scenario, &prepared, n_trajectories, master_seed)?;
        let mut hash = crate::model::Fnv1a::new();
        for s in &stats {
            hash.write_u64(s.truth_hash);
        }
        let hash = hash.finish();
        match truth_hash {
            None => truth_hash = Some(hash),
            Some(expected) if expected != hash => {
                return Err(Error::Config(
                    "shared-seed invariant violated: truth trajectories differ between filters"
                        .into(),
                ))
            }
            Some(_) => {}
        }
        reports.push(aggregate(
            scenario,
            &stats,
            master_seed,
            started.elapsed().as_secs_f64(),
        )?);
    }
    if let Some(path) = out {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut text = String::new();
        let mut header = "step".to_string();
        for (i, selector) in selectors.iter().enumerate() {
            let _ = write!(header, ",rmse_{}_{}", i + 1, selector.name());
        }
        let _ = writeln!(text, "{header}");
        for n in 0..=scenario.steps {
            let mut row = format!("{n}");
            for report in &reports {
                let _ = write!(row, ",{}", report.rmse[n]);
            }
            let _ = writeln!(text, "{row}");
        }
        std::fs::write(path, text)?;
    }
    Ok(reports)
}

/// Grid-optimizes the saturated single-direction gain for a scenario and
/// writes `surface.csv` (`k,lambda,rmse,n_samples`) plus a human-readable
/// `optimum.txt` into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_horizon_cmd(
    scenario: &Scenario,
    k_values: &[f64],
    lambda_values: &[f64],
    burn_in: usize,
    retain: usize,
    chains: usize,
    master_seed: u64,
    out_dir: Option<&Path>,
) -> Result<HorizonSurface> {
    let surface = grid_optimize_horizon(
        scenario,
        k_values,
        lambda_values,
        burn_in,
        retain,
        chains,
        master_seed,
    )?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut text = String::from("k,lambda,rmse,n_samples\n");
        for p in &surface.points {
            let _ = writeln!(text, "{},{},{},{}", p.k, p.lambda, p.rmse, p.n_samples);
        }
        std::fs::write(dir.join("surface.csv"), text)?;
        let best = surface.best_point();
        std::fs::write(
            dir.join("optimum.txt"),
            format!(
                "k = {}\nlambda = {}\nrmse = {}\nn_samples = {}\n",
                best.k, best.lambda, best.rmse, best.n_samples
            ),
        )?;
    }
    Ok(surface)
}

/// Simulates trajectories and writes them out: `truth.csv` (group matrix
/// entries, row-major) and `observations.csv`.
pub fn simulate_cmd(
    scenario: &Scenario,
    n_trajectories: usize,
    master_seed: u64,
    out_dir: &Path,
) -> Result<()> {
    if n_trajectories == 0 {
        return Err(Error::Config("need at least one trajectory".into()));
    }
    scenario.validate()?;
    let trajectories: Vec<Result<SimulatedTrajectory>> = (0..n_trajectories)
        .into_par_iter()
        .map(|t| {
            let mut rng = domain_rng(master_seed, DOMAIN_TRAJECTORY, t as u64);
            simulate_trajectory(scenario, &mut rng)
        })
        .collect();
    let trajectories = trajectories.into_iter().collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir)?;

    let k = scenario.model.descriptor.matrix_size();
    let mut truth = String::from("step,traj_id");
    for r in 1..=k {
        for c in 1..=k {
            let _ = write!(truth, ",m{r}{c}");
        }
    }
    truth.push('\n');
    for (t, traj) in trajectories.iter().enumerate() {
        for (n, state) in traj.truth.iter().enumerate() {
            let _ = write!(truth, "{n},{t}");
            let mat = state.matrix();
            for r in 0..k {
                for c in 0..k {
                    let _ = write!(truth, ",{}", mat[(r, c)]);
                }
            }
            truth.push('\n');
        }
    }
    std::fs::write(out_dir.join("truth.csv"), truth)?;

    let p = scenario.model.output.obs_dim();
    let mut obs = String::from("step,traj_id");
    for i in 1..=p {
        let _ = write!(obs, ",y{i}");
    }
    obs.push('\n');
    for (t, traj) in trajectories.iter().enumerate() {
        for (n, y) in traj.observations.iter().enumerate() {
            let _ = write!(obs, "{},{t}", n + 1);
            for i in 0..p {
                let _ = write!(obs, ",{}", y[i]);
            }
            obs.push('\n');
        }
    }
    std::fs::write(out_dir.join("observations.csv"), obs)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV writers
// ---------------------------------------------------------------------------

fn write_errors_csv(path: &Path, stats: &[TrajectoryStats]) -> Result<()> {
    let dim = stats
        .first()
        .map(|s| s.errors[0].len())
        .ok_or_else(|| Error::Config("no trajectories to write".into()))?;
    let mut text = String::from("step,traj_id");
    for a in 1..=dim {
        let _ = write!(text, ",e{a}");
    }
    text.push('\n');
    for (t, s) in stats.iter().enumerate() {
        for (n, e) in s.errors.iter().enumerate() {
            let _ = write!(text, "{n},{t}");
            for a in 0..dim {
                let _ = write!(text, ",{}", e[a]);
            }
            text.push('\n');
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_envelope_csv(path: &Path, report: &MonteCarloReport) -> Result<()> {
    let dim = report.std[0].len();
    let mut text = String::from("step");
    for a in 1..=dim {
        let _ = write!(text, ",std{a}");
    }
    for a in 1..=dim {
        let _ = write!(text, ",reported_3sigma{a}");
    }
    text.push('\n');
    for n in 0..report.std.len() {
        let _ = write!(text, "{n}");
        for a in 0..dim {
            let _ = write!(text, ",{}", report.std[n][a]);
        }
        for a in 0..dim {
            let _ = write!(text, ",{}", report.reported_3sigma[n][a]);
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_gains_csv(path: &Path, gains: &[DMatrix<f64>]) -> Result<()> {
    let (rows, cols) = gains
        .first()
        .map(|g| (g.nrows(), g.ncols()))
        .ok_or_else(|| Error::Config("no gains to write".into()))?;
    let mut text = String::from("step");
    for r in 1..=rows {
        for c in 1..=cols {
            let _ = write!(text, ",l_{r}_{c}");
        }
    }
    text.push('\n');
    for (n, gain) in gains.iter().enumerate() {
        let _ = write!(text, "{}", n + 1);
        for r in 0..rows {
            for c in 0..cols {
                let _ = write!(text, ",{}", gain[(r, c)]);
            }
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Named presets
// ---------------------------------------------------------------------------

/// The benchmark experiments shipped with the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Two-direction attitude benchmark (gyro + two reference directions).
    Table3,
    /// Gravity-direction benchmark with observation outliers.
    Horizon,
    /// Translation-group embedding of a linear system, where the invariant
    /// filters reduce to the classical Kalman filter.
    LinearEquiv,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Table3, Preset::Horizon, Preset::LinearEquiv];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Table3 => "exp-table3",
            Preset::Horizon => "exp-horizon",
            Preset::LinearEquiv => "exp-linear-equiv",
        }
    }

    pub fn describe(&self) -> &'static str {
        match self {
            Preset::Table3 => {
                "attitude estimation from two reference directions, 50 steps, 1000 runs"
            }
            Preset::Horizon => {
                "gravity-direction estimation with 1% large outliers, 1000 steps, 100 runs"
            }
            Preset::LinearEquiv => {
                "linear state estimation embedded in a translation group, 100 steps, 100 runs"
            }
        }
    }

    pub fn from_name(name: &str) -> Option<Preset> {
        Preset::ALL.iter().copied().find(|p| p.name() == name)
    }

    /// Default number of Monte-Carlo trajectories.
    pub fn default_trajectories(&self) -> usize {
        match self {
            Preset::Table3 => 1000,
            Preset::Horizon => 100,
            Preset::LinearEquiv => 100,
        }
    }

    /// Default master seed.
    pub fn default_seed(&self) -> u64 {
        42
    }

    /// Default filter for `filter`-style runs.
    pub fn default_filter(&self) -> FilterSelector {
        match self {
            Preset::Table3 => FilterSelector::Iekf,
            Preset::Horizon => FilterSelector::FixedGain {
                gain: self
                    .default_horizon_gain()
                    .expect("preset gain parameters are valid"),
            },
            Preset::LinearEquiv => FilterSelector::Iekf,
        }
    }

    fn default_horizon_gain(&self) -> Result<GainFunction> {
        let scenario = self.scenario()?;
        match &scenario.model.output {
            OutputMap::SingleVector { g_ref } => GainFunction::horizon(0.1202, 0.0029, g_ref.clone()),
            _ => Err(Error::Config("not a single-direction scenario".into())),
        }
    }

    pub fn scenario(&self) -> Result<Scenario> {
        match self {
            Preset::Table3 => {
                let config = ScenarioConfig {
                    group: "SO3".into(),
                    output_kind: "two_vector".into(),
                    b1: Some([1.0, 0.0, 0.0]),
                    b2: Some([0.0, 1.0, 0.0]),
                    g_ref: None,
                    qw: 0.01745_f64.powi(2),
                    qv: 0.0873_f64.powi(2),
                    p0: 0.5236_f64.powi(2),
                    n: 50,
                    dt: 0.02,
                    outlier_prob: None,
                    outlier_std: None,
                    seed: Some(self.default_seed()),
                    num_trajectories: Some(self.default_trajectories()),
                };
                config.to_scenario(self.name())
            }
            Preset::Horizon => {
                let config = ScenarioConfig {
                    group: "SO3".into(),
                    output_kind: "single_vector".into(),
                    b1: None,
                    b2: None,
                    g_ref: Some([0.0, 0.0, 1.0]),
                    qw: 1.75e-4_f64.powi(2),
                    qv: 1.75e-3_f64.powi(2),
                    p0: 0.09,
                    n: 1000,
                    dt: 0.02,
                    outlier_prob: Some(0.01),
                    outlier_std: Some(0.5236),
                    seed: Some(self.default_seed()),
                    num_trajectories: Some(self.default_trajectories()),
                };
                config.to_scenario(self.name())
            }
            Preset::LinearEquiv => {
                let descriptor = GroupDescriptor::tn(4);
                let h = DMatrix::from_row_slice(
                    2,
                    4,
                    &[1.0, 0.5, -0.3, 0.2, 0.0, 1.0, 0.7, -0.4],
                );
                let omega = AlgebraVector::from_slice(descriptor, &[0.1, -0.2, 0.05, 0.3])?;
                let scenario = Scenario {
                    name: self.name().to_string(),
                    model: DiscreteModel {
                        descriptor,
                        dt: 1.0,
                        upsilon: InputSignal::Zero,
                        omega: InputSignal::Constant(omega),
                        noise: NoiseSpec::isotropic(4, 0.02, 2, 0.05)?,
                        output: OutputMap::LinearH { h },
                    },
                    steps: 100,
                    truth_init: GroupElement::identity(descriptor),
                    prior_cov: DMatrix::identity(4, 4) * 0.5,
                };
                scenario.validate()?;
                Ok(scenario)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ienkf::DEFAULT_PARTICLES;

    const TABLE3_TOML: &str = r#"
group = "SO3"
output_kind = "two_vector"
b1 = [1.0, 0.0, 0.0]
b2 = [0.0, 1.0, 0.0]
Qw = 0.0003045025
Qv = 0.00762129
P0 = 0.27415695999999995
N = 50
dt = 0.02
seed = 42
num_trajectories = 1000
"#;

    #[test]
    fn scenario_config_parses_and_builds() {
        let config = ScenarioConfig::from_toml(TABLE3_TOML).unwrap();
        let scenario = config.to_scenario("attitude").unwrap();
        assert_eq!(scenario.steps, 50);
        assert_eq!(scenario.model.output.obs_dim(), 6);
        let preset = Preset::Table3.scenario().unwrap();
        assert_eq!(scenario.fingerprint(), preset.fingerprint());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let bad = format!("{TABLE3_TOML}\nmisspelled_key = 1.0\n");
        assert!(matches!(
            ScenarioConfig::from_toml(&bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_output_vectors_are_rejected() {
        let mut config = ScenarioConfig::from_toml(TABLE3_TOML).unwrap();
        config.b2 = None;
        assert!(config.to_scenario("broken").is_err());
        config.output_kind = "nonsense".into();
        assert!(config.to_scenario("broken").is_err());
    }

    #[test]
    fn noise_free_perfect_prior_run_reports_zero_error() {
        let mut scenario = Preset::Table3.scenario().unwrap();
        scenario.model.noise = NoiseSpec::isotropic(3, 0.0, 6, 0.0).unwrap();
        scenario.prior_cov = DMatrix::zeros(3, 3);
        scenario.steps = 20;
        let config = ExperimentConfig {
            scenario,
            filter: FilterSelector::FixedGain {
                gain: GainFunction::two_vector(
                    0.3,
                    0.3,
                    DVector::from_column_slice(&[1.0, 0.0, 0.0]),
                    DVector::from_column_slice(&[0.0, 1.0, 0.0]),
                )
                .unwrap(),
            },
            n_trajectories: 1,
            master_seed: 9,
            out_dir: None,
        };
        let report = run_experiment(&config).unwrap();
        for n in 0..=20 {
            assert!(report.rmse[n] < 1e-9, "step {n}: rmse {}", report.rmse[n]);
        }
    }

    #[test]
    fn experiment_csvs_are_byte_identical_across_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let mut scenario = Preset::Table3.scenario().unwrap();
        scenario.steps = 10;
        let run = |out: PathBuf| {
            let config = ExperimentConfig {
                scenario: scenario.clone(),
                filter: FilterSelector::Iekf,
                n_trajectories: 8,
                master_seed: 42,
                out_dir: Some(out),
            };
            run_experiment(&config).unwrap()
        };
        let a = run(dir.path().join("a"));
        let b = run(dir.path().join("b"));
        assert_eq!(a.seed, b.seed);
        for file in ["errors.csv", "envelope.csv", "gains.csv"] {
            let left = std::fs::read(dir.path().join("a").join(file)).unwrap();
            let right = std::fs::read(dir.path().join("b").join(file)).unwrap();
            assert_eq!(left, right, "{file} differs between identical runs");
            assert!(!left.is_empty());
            assert!(!left.windows(2).any(|w| w == b"\r\n"), "CRLF in {file}");
        }
        let errors = std::fs::read_to_string(dir.path().join("a").join("errors.csv")).unwrap();
        let mut lines = errors.lines();
        assert_eq!(lines.next().unwrap(), "step,traj_id,e1,e2,e3");
        assert_eq!(lines.count(), 8 * 11, "8 trajectories x 11 steps");
    }

    #[test]
    fn comparison_reuses_identical_truths_and_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut scenario = Preset::Table3.scenario().unwrap();
        scenario.steps = 10;
        let out = dir.path().join("comparison.csv");
        let reports = compare_filters(
            &scenario,
            &[FilterSelector::Iekf, FilterSelector::Iekf],
            6,
            42,
            Some(&out),
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        for n in 0..=10 {
            assert_eq!(reports[0].rmse[n], reports[1].rmse[n]);
        }
        let text = std::fs::read_to_string(&out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,rmse_1_iekf,rmse_2_iekf");
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 3);
            assert_eq!(cells[1], cells[2], "identical filters must match");
        }
    }

    #[test]
    fn single_point_optimization_writes_that_point() {
        let dir = tempfile::tempdir().unwrap();
        let mut scenario = Preset::Horizon.scenario().unwrap();
        scenario.steps = 50;
        let surface = optimize_horizon_cmd(
            &scenario,
            &[0.12],
            &[0.003],
            20,
            30,
            8,
            42,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(surface.points.len(), 1);
        let best = surface.best_point();
        assert_eq!(best.k, 0.12);
        assert_eq!(best.lambda, 0.003);
        let text = std::fs::read_to_string(dir.path().join("surface.csv")).unwrap();
        assert_eq!(text.lines().count(), 2, "header plus one grid point");
        assert!(dir.path().join("optimum.txt").exists());
    }

    #[test]
    fn presets_build_and_have_distinct_names() {
        for preset in Preset::ALL {
            let scenario = preset.scenario().unwrap();
            scenario.validate().unwrap();
            assert!(Preset::from_name(preset.name()) == Some(preset));
            assert!(!preset.describe().is_empty());
            let _ = preset.default_filter();
        }
        assert!(Preset::from_name("exp-unknown").is_none());
    }

    #[test]
    fn simulate_writes_truth_and_observation_tables() {
        let dir = tempfile::tempdir().unwrap();
        let mut scenario = Preset::Table3.scenario().unwrap();
        scenario.steps = 5;
        simulate_cmd(&scenario, 3, 42, dir.path()).unwrap();
        let truth = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
        let obs = std::fs::read_to_string(dir.path().join("observations.csv")).unwrap();
        assert_eq!(truth.lines().count(), 1 + 3 * 6, "header + 3 trajs x 6 states");
        assert_eq!(obs.lines().count(), 1 + 3 * 5, "header + 3 trajs x 5 observations");
        assert!(truth.starts_with("step,traj_id,m11,"));
        assert!(obs.starts_with("step,traj_id,y1,"));
    }

    #[test]
    fn ensemble_and_asymptotic_selectors_report_dispersion() {
        // 50 steps: long enough for the Riccati gain trace to converge, so
        // the frozen-gain selector is well-defined.
        let scenario = Preset::Table3.scenario().unwrap();
        for filter in [
            FilterSelector::Ienkf { particles: 500 },
            FilterSelector::AsymptoticIekf,
            FilterSelector::Mekf { inflation: 1.0 },
        ] {
            let config = ExperimentConfig {
                scenario: scenario.clone(),
                filter,
                n_trajectories: 30,
                master_seed: 7,
                out_dir: None,
            };
            let report = run_experiment(&config).unwrap();
            let late: f64 = (40..=50).map(|n| report.coverage[n][0]).sum::<f64>() / 11.0;
            assert!(
                late > 0.8,
                "{}: implausible late coverage {late}",
                config.filter.name()
            );
            assert!(report.reported_3sigma[50][0] > 1e-4);
            assert!(report.final_rmse > 0.0);
        }
    }

    #[test]
    fn default_particle_count_matches_contract() {
        assert_eq!(DEFAULT_PARTICLES, 10_000);
    }
}

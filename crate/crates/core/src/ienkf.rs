//! Invariant ensemble Kalman filter: off-line particle computation of a
//! per-step gain schedule, then on-line application as a fixed sequence of
//! exp-linear gains.
//!
//! Because the estimation error is autonomous (constant left input
//! assumed), its exact density can be sampled off-line with no measurement
//! data at all: propagate `M` particles through the error recursion,
//!
//! ```text
//! η'^i = W^i · Υ · η^i · Υ^{-1},        y^i = h(η'^i, V^i),
//! ```
//!
//! form the uncentered second moments
//!
//! ```text
//! P' = (1/M) Σ log(η'^i) log(η'^i)ᵀ,
//! S  = (1/M) Σ z^i z^{i,T} + 1e-10·I,   z^i = y^i − h(I, 0),
//! ```
//!
//! compute the gain `L = P' Hᵀ S^{-1}` with the same constant linearisation
//! `H` the IEKF uses, and update every particle by
//! `η^i = η'^i · exp(−L·z^i)`. The stored gains are then replayed on-line
//! as ordinary invariant-filter updates. A centred variant (subtracting the
//! empirical means from both moments) is available behind
//! [`MomentForm::Centered`]; the uncentered form above is the default.
//!
//! In the small-noise limit the particle moments converge to the
//! linearised covariances, so the schedule reproduces the IEKF gain trace —
//! a cross-check the tests enforce. At large noise the particles capture
//! the true (non-Gaussian) error dispersion, which is the point of the
//! method.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{predict, update, FilterState, GainFunction};
use crate::iekf::Linearization;
use crate::lie::{AlgebraVector, GroupElement, GroupId};
use crate::model::{sample_gaussian, Scenario, SimulatedTrajectory};
use crate::rng::{domain_rng, DOMAIN_PARTICLE};

/// Ridge added to the empirical innovation covariance before solving.
pub const S_REGULARIZATION: f64 = 1e-10;
/// Default ensemble size for schedule computation.
pub const DEFAULT_PARTICLES: usize = 10_000;
/// Fixed chunk width for deterministic parallel moment reduction.
const REDUCTION_CHUNK: usize = 512;
/// How many times a particle may be redrawn from the prior before the
/// branch-cut failure is considered fatal.
const MAX_RESAMPLES_PER_PARTICLE: usize = 16;

/// Which second moments the gain computation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentForm {
    /// Uncentered moments about the reference output, exactly as the
    /// off-line algorithm states them (default).
    Printed,
    /// Mean-subtracted moments; diagnostic variant.
    Centered,
}

/// A particle cloud sampled from the error density.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub particles: Vec<GroupElement>,
    pub step: usize,
}

impl EnsembleState {
    pub fn new(particles: Vec<GroupElement>, step: usize) -> Result<Self> {
        if particles.len() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs at least 2 particles, got {}",
                particles.len()
            )));
        }
        let d = particles[0].descriptor();
        if particles.iter().any(|p| p.descriptor() != d) {
            return Err(Error::Config("ensemble mixes groups".into()));
        }
        Ok(Self { particles, step })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

/// Per-step gain schedule computed off-line, tied to its scenario by
/// fingerprint.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    pub group_id: GroupId,
    pub algebra_dim: usize,
    pub obs_dim: usize,
    pub fingerprint: u64,
    /// Gains `L_1..L_N`.
    pub gains: Vec<DMatrix<f64>>,
    /// Post-update ensemble covariances `P_0..P_N` (uncentered second
    /// moments of the particle logs). Empty on schedules loaded from disk.
    pub post_covariances: Vec<DMatrix<f64>>,
    /// Particles that hit the logarithm branch cut and were redrawn from
    /// the prior during schedule computation.
    pub resamples: usize,
}

// ---------------------------------------------------------------------------
// Off-line schedule computation
// ---------------------------------------------------------------------------

/// Logs a particle, redrawing it from the prior (with its own RNG stream)
/// whenever the rotation lands on the logarithm branch cut.
fn particle_log<R: rand::Rng + ?Sized>(
    eta: &mut GroupElement,
    prior_factor: &DMatrix<f64>,
    rng: &mut R,
    resamples: &mut usize,
) -> Result<AlgebraVector> {
    for _ in 0..MAX_RESAMPLES_PER_PARTICLE {
        match eta.log() {
            Ok(coords) => return Ok(coords),
            Err(Error::LogBranchCut { .. }) => {
                *resamples += 1;
                *eta = AlgebraVector::new(eta.descriptor(), sample_gaussian(prior_factor, rng))?
                    .exp();
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::NotConverged(
        "a particle could not leave the logarithm branch cut".into(),
    ))
}

struct ParticleStep {
    eta_prime: GroupElement,
    rng: rand_chacha::ChaCha8Rng,
    xi: DVector<f64>,
    z: DVector<f64>,
    resamples: usize,
}

/// Computes the per-step gain schedule for a scenario by off-line particle
/// simulation with `m` particles, one RNG stream per particle derived from
/// `master_seed`. The left input must be constant so that the error
/// recursion is closed.
pub fn offline_gains(
    scenario: &Scenario,
    m: usize,
    master_seed: u64,
    form: MomentForm,
) -> Result<GainSchedule> {
    scenario.validate()?;
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 particles, got {m}")));
    }
    if !scenario.model.upsilon.is_constant() {
        return Err(Error::Config(
            "off-line gain computation requires a constant left input".into(),
        ));
    }
    let d = scenario.model.descriptor;
    let dim = d.algebra_dim();
    let p = scenario.model.output.obs_dim();
    let output = &scenario.model.output;
    let lin = Linearization::of_output(output, d)?;
    let upsilon = scenario.upsilon_steps().at(0).clone();
    let upsilon_inv = upsilon.inverse();
    let samplers = scenario.samplers()?;
    let prior_factor = scenario.prior_factor()?;
    let h0 = output.reference_output();

    // Initial cloud, one stream per particle.
    let mut cloud: Vec<(GroupElement, rand_chacha::ChaCha8Rng)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = domain_rng(master_seed, DOMAIN_PARTICLE, i as u64);
            let eta = AlgebraVector::new(d, sample_gaussian(&prior_factor, &mut rng))
                .expect("prior dimension fixed")
                .exp();
            (eta, rng)
        })
        .collect();

    let mut resamples = 0usize;
    let mut gains = Vec::with_capacity(scenario.steps);
    let mut post_covariances = Vec::with_capacity(scenario.steps + 1);
    post_covariances.push(cloud_covariance(
        &mut cloud,
        &prior_factor,
        &mut resamples,
        dim,
    )?);

    for step in 0..scenario.steps {
        // Propagate, observe, and log every particle in parallel; each
        // particle owns its RNG, so draws are scheduling-independent.
        let moved: Vec<Result<ParticleStep>> = std::mem::take(&mut cloud)
            .into_par_iter()
            .map(|(eta, mut rng)| {
                let mut local_resamples = 0usize;
                let w = samplers.process(&mut rng);
                let mut eta_prime = w
                    .compose(&upsilon)
                    .compose(&eta)
                    .compose(&upsilon_inv);
                let xi = particle_log(&mut eta_prime, &prior_factor, &mut rng, &mut local_resamples)?;
                let (v, _) = samplers.observation(&mut rng);
                let z = output.apply_body(&eta_prime, &v) - &h0;
                Ok(ParticleStep {
                    eta_prime,
                    rng,
                    xi: xi.coords().clone(),
                    z,
                    resamples: local_resamples,
                })
            })
            .collect();
        let moved = moved.into_iter().collect::<Result<Vec<_>>>()?;
        resamples += moved.iter().map(|s| s.resamples).sum::<usize>();

        // Moments, reduced in fixed chunk order for bit-reproducibility.
        let (mut p_mat, mut s_mat) = reduce_moments(&moved, dim, p);
        if form == MomentForm::Centered {
            let (xi_mean, z_mean) = reduce_means(&moved, dim, p);
            p_mat -= &xi_mean * xi_mean.transpose();
            s_mat -= &z_mean * z_mean.transpose();
        }
        for i in 0..p {
            s_mat[(i, i)] += S_REGULARIZATION;
        }

        // L = P' Hᵀ S^{-1}, solved through the Cholesky factor of S.
        let chol = ((&s_mat + s_mat.transpose()) * 0.5)
            .cholesky()
            .ok_or(Error::SingularInnovation)?;
        let gain = chol.solve(&(&lin.h_xi * &p_mat)).transpose();

        // Particle update η = η'·exp(−L z).
        cloud = moved
            .into_par_iter()
            .map(|s| {
                let correction = AlgebraVector::new(d, -(&gain * &s.z))
                    .expect("gain dimensions fixed")
                    .exp();
                (s.eta_prime.compose(&correction), s.rng)
            })
            .collect();

        post_covariances.push(cloud_covariance(
            &mut cloud,
            &prior_factor,
            &mut resamples,
            dim,
        )?);
        gains.push(gain);
        let _ = step;
    }

    Ok(GainSchedule {
        group_id: d.id(),
        algebra_dim: dim,
        obs_dim: p,
        fingerprint: scenario.fingerprint(),
        gains,
        post_covariances,
        resamples,
    })
}

fn reduce_moments(steps: &[ParticleStep], dim: usize, p: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let partials: Vec<(DMatrix<f64>, DMatrix<f64>)> = steps
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut p_sum = DMatrix::zeros(dim, dim);
            let mut s_sum = DMatrix::zeros(p, p);
            for s in chunk {
                p_sum += &s.xi * s.xi.transpose();
                s_sum += &s.z * s.z.transpose();
            }
            (p_sum, s_sum)
        })
        .collect();
    let m = steps.len() as f64;
    let mut p_total = DMatrix::zeros(dim, dim);
    let mut s_total = DMatrix::zeros(p, p);
    for (ps, ss) in partials {
        p_total += ps;
        s_total += ss;
    }
    (p_total / m, s_total / m)
}

fn reduce_means(steps: &[ParticleStep], dim: usize, p: usize) -> (DVector<f64>, DVector<f64>) {
    let partials: Vec<(DVector<f64>, DVector<f64>)> = steps
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut xi_sum = DVector::zeros(dim);
            let mut z_sum = DVector::zeros(p);
            for s in chunk {
                xi_sum += &s.xi;
                z_sum += &s.z;
            }
            (xi_sum, z_sum)
        })
        .collect();
    let m = steps.len() as f64;
    let mut xi_total = DVector::zeros(dim);
    let mut z_total = DVector::zeros(p);
    for (xs, zs) in partials {
        xi_total += xs;
        z_total += zs;
    }
    (xi_total / m, z_total / m)
}

fn cloud_covariance(
    cloud: &mut [(GroupElement, rand_chacha::ChaCha8Rng)],
    prior_factor: &DMatrix<f64>,
    resamples: &mut usize,
    dim: usize,
) -> Result<DMatrix<f64>> {
    let logs: Vec<Result<(DVector<f64>, usize)>> = cloud
        .par_iter_mut()
        .map(|(eta, rng)| {
            let mut local = 0usize;
            let xi = particle_log(eta, prior_factor, rng, &mut local)?;
            Ok((xi.coords().clone(), local))
        })
        .collect();
    let mut total = DMatrix::zeros(dim, dim);
    let mut count = 0usize;
    for entry in logs {
        let (xi, local) = entry?;
        *resamples += local;
        total += &xi * xi.transpose();
        count += 1;
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// On-line application
// ---------------------------------------------------------------------------

/// Replays a computed schedule as a plain invariant-filter run over a
/// simulated trajectory: predict with the scenario inputs, update with
/// `K_n(y) = exp(L_n·(y − h(I, 0)))`. Fails unless the schedule's
/// fingerprint matches the scenario.
pub fn apply_schedule(
    scenario: &Scenario,
    trajectory: &SimulatedTrajectory,
    chi0: &GroupElement,
    schedule: &GainSchedule,
) -> Result<Vec<GroupElement>> {
    let expected = scenario.fingerprint();
    if schedule.fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            expected,
            got: schedule.fingerprint,
        });
    }
    if schedule.gains.len() != scenario.steps {
        return Err(Error::Config(format!(
            "schedule has {} gains for a {}-step scenario",
            schedule.gains.len(),
            scenario.steps
        )));
    }
    let d = scenario.model.descriptor;
    let output = &scenario.model.output;
    let h0 = output.reference_output();
    let upsilon = scenario.upsilon_steps();
    let omega = scenario.omega_steps();

    let mut state = FilterState::new(chi0.clone());
    let mut trace = Vec::with_capacity(scenario.steps + 1);
    trace.push(state.chi_hat.clone());
    for n in 0..scenario.steps {
        state = predict(&state, upsilon.at(n), omega.at(n));
        let gain = GainFunction::linear_exp(d, schedule.gains[n].clone(), h0.clone())?;
        state = update(&state, &trajectory.observations[n], &gain, output);
        trace.push(state.chi_hat.clone());
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Saves a schedule: a header line
/// `group_id,steps,obs_dim,algebra_dim,fingerprint`, then each gain as
/// `algebra_dim` comma-separated rows. Floats are printed in shortest
/// round-trip form, so a reload reproduces the gains bit for bit.
pub fn save_schedule(schedule: &GainSchedule, path: &Path) -> Result<()> {
    let mut text = String::new();
    let group = match schedule.group_id {
        GroupId::So3 => "SO(3)".to_string(),
        GroupId::Se3 => "SE(3)".to_string(),
        GroupId::Tn(n) => format!("T({n})"),
    };
    let _ = writeln!(
        text,
        "{group},{},{},{},{}",
        schedule.gains.len(),
        schedule.obs_dim,
        schedule.algebra_dim,
        schedule.fingerprint
    );
    for gain in &schedule.gains {
        for i in 0..gain.nrows() {
            let row: Vec<String> = (0..gain.ncols()).map(|j| format!("{}", gain[(i, j)])).collect();
            let _ = writeln!(text, "{}", row.join(","));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads a schedule saved by [`save_schedule`]. Post-update covariances are
/// not persisted, so the loaded schedule carries none.
pub fn load_schedule(path: &Path) -> Result<GainSchedule> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty schedule file".into()))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() != 5 {
        return Err(Error::Format(format!(
            "schedule header needs 5 fields, got {}",
            fields.len()
        )));
    }
    let group_id = parse_group_id(fields[0])?;
    let steps: usize = parse_field(fields[1], "steps")?;
    let obs_dim: usize = parse_field(fields[2], "obs_dim")?;
    let algebra_dim: usize = parse_field(fields[3], "algebra_dim")?;
    let fingerprint: u64 = parse_field(fields[4], "fingerprint")?;

    let mut gains = Vec::with_capacity(steps);
    for n in 0..steps {
        let mut gain = DMatrix::zeros(algebra_dim, obs_dim);
        for i in 0..algebra_dim {
            let line = lines.next().ok_or_else(|| {
                Error::Format(format!("schedule truncated in gain {n}, row {i}"))
            })?;
            let values: Vec<&str> = line.split(',').collect();
            if values.len() != obs_dim {
                return Err(Error::Format(format!(
                    "gain {n} row {i}: expected {obs_dim} values, got {}",
                    values.len()
                )));
            }
            for (j, v) in values.iter().enumerate() {
                gain[(i, j)] = v
                    .parse()
                    .map_err(|_| Error::Format(format!("bad float {v:?} in gain {n}")))?;
            }
        }
        gains.push(gain);
    }
    Ok(GainSchedule {
        group_id,
        algebra_dim,
        obs_dim,
        fingerprint,
        gains,
        post_covariances: Vec::new(),
        resamples: 0,
    })
}

fn parse_group_id(s: &str) -> Result<GroupId> {
    match s {
        "SO(3)" => Ok(GroupId::So3),
        "SE(3)" => Ok(GroupId::Se3),
        _ => {
            if let Some(n) = s.strip_prefix("T(").and_then(|r| r.strip_suffix(')')) {
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::Format(format!("bad group id {s:?}")))?;
                Ok(GroupId::Tn(n))
            } else {
                Err(Error::Format(format!("bad group id {s:?}")))
            }
        }
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad {what} field {s:?}")))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::error_of;
    use crate::iekf::riccati_gains;
    use crate::lie::GroupDescriptor;
    use crate::model::{
        simulate_trajectory, DiscreteModel, InputSignal, NoiseSpec, OutputMap,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(x: f64, y: f64, z: f64) -> DVector<f64> {
        DVector::from_column_slice(&[x, y, z])
    }

    /// Attitude benchmark with all noise standard deviations scaled.
    fn attitude_scenario(steps: usize, sigma_scale: f64) -> Scenario {
        let var = sigma_scale * sigma_scale;
        Scenario {
            name: "attitude".into(),
            model: DiscreteModel {
                descriptor: GroupDescriptor::SO3,
                dt: 0.02,
                upsilon: InputSignal::Zero,
                omega: InputSignal::Constant(
                    AlgebraVector::from_slice(GroupDescriptor::SO3, &[0.3, -0.2, 0.15]).unwrap(),
                ),
                noise: NoiseSpec::isotropic(
                    3,
                    var * 0.01745_f64.powi(2) / 0.02,
                    6,
                    var * 0.0873_f64.powi(2),
                )
                .unwrap(),
                output: OutputMap::TwoVector {
                    b1: unit(1.0, 0.0, 0.0),
                    b2: unit(0.0, 1.0, 0.0),
                },
            },
            steps,
            truth_init: GroupElement::identity(GroupDescriptor::SO3),
            prior_cov: DMatrix::identity(3, 3) * var * 0.5236_f64.powi(2),
        }
    }

    #[test]
    fn ensemble_state_rejects_degenerate_clouds() {
        let id = GroupElement::identity(GroupDescriptor::SO3);
        assert!(EnsembleState::new(vec![id.clone()], 0).is_err());
        assert!(EnsembleState::new(vec![id.clone(), id], 0).is_ok());
    }

    #[test]
    fn schedule_is_bit_reproducible_under_a_fixed_seed() {
        let scenario = attitude_scenario(6, 1.0);
        let a = offline_gains(&scenario, 64, 5, MomentForm::Printed).unwrap();
        let b = offline_gains(&scenario, 64, 5, MomentForm::Printed).unwrap();
        assert_eq!(a.gains.len(), 6);
        for (x, y) in a.gains.iter().zip(&b.gains) {
            assert_eq!(x, y, "same seed, same bits");
        }
        let c = offline_gains(&scenario, 64, 6, MomentForm::Printed).unwrap();
        assert_ne!(a.gains[0], c.gains[0], "different seed, different gains");
    }

    #[test]
    fn noise_free_cloud_stays_at_identity_with_zero_gains() {
        let mut scenario = attitude_scenario(5, 1.0);
        scenario.model.noise = NoiseSpec::isotropic(3, 0.0, 6, 0.0).unwrap();
        scenario.prior_cov = DMatrix::zeros(3, 3);
        let schedule = offline_gains(&scenario, 16, 3, MomentForm::Printed).unwrap();
        for gain in &schedule.gains {
            assert_eq!(gain.amax(), 0.0, "zero moments give zero gains");
        }
        for cov in &schedule.post_covariances {
            assert_eq!(cov.amax(), 0.0);
        }
        assert_eq!(schedule.resamples, 0);
    }

    #[test]
    fn gains_match_the_iekf_in_the_linear_regime() {
        // Noise and prior standard deviations scaled by 0.1: the particle
        // moments then match the linearised covariances, so the schedule
        // must reproduce the IEKF gain trace.
        let scenario = attitude_scenario(50, 0.1);
        let schedule = offline_gains(&scenario, 10_000, 11, MomentForm::Printed).unwrap();
        let (iekf_gains, _) = riccati_gains(&scenario, 50).unwrap();
        for n in 9..50 {
            let diff = (&schedule.gains[n] - &iekf_gains[n]).norm();
            let scale = iekf_gains[n].norm();
            assert!(
                diff / scale < 0.10,
                "step {}: relative Frobenius gap {:.3}",
                n + 1,
                diff / scale
            );
        }
    }

    #[test]
    fn schedule_application_dead_reckons_under_zero_gains() {
        let scenario = attitude_scenario(10, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let traj = simulate_trajectory(&scenario, &mut rng).unwrap();
        let schedule = GainSchedule {
            group_id: GroupId::So3,
            algebra_dim: 3,
            obs_dim: 6,
            fingerprint: scenario.fingerprint(),
            gains: vec![DMatrix::zeros(3, 6); 10],
            post_covariances: Vec::new(),
            resamples: 0,
        };
        let chi0 = traj.filter_init();
        let trace = apply_schedule(&scenario, &traj, &chi0, &schedule).unwrap();
        // Pure prediction: the initial error is carried along unchanged up
        // to conjugation by the (identity) left input.
        let upsilon = scenario.upsilon_steps();
        let omega = scenario.omega_steps();
        let mut expected = chi0;
        for (n, got) in trace.iter().enumerate() {
            if n > 0 {
                expected = upsilon.at(n - 1).compose(&expected).compose(omega.at(n - 1));
            }
            assert!((got.matrix() - expected.matrix()).amax() < 1e-12);
        }
    }

    #[test]
    fn schedule_refuses_a_mismatched_scenario() {
        let scenario = attitude_scenario(5, 1.0);
        let other = attitude_scenario(5, 0.5);
        let schedule = offline_gains(&scenario, 16, 3, MomentForm::Printed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let traj = simulate_trajectory(&other, &mut rng).unwrap();
        let chi0 = traj.filter_init();
        assert!(matches!(
            apply_schedule(&other, &traj, &chi0, &schedule),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn schedules_round_trip_through_disk_bit_for_bit() {
        let scenario = attitude_scenario(7, 1.0);
        let schedule = offline_gains(&scenario, 32, 9, MomentForm::Printed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.gains");
        save_schedule(&schedule, &path).unwrap();
        let loaded = load_schedule(&path).unwrap();
        assert_eq!(loaded.group_id, schedule.group_id);
        assert_eq!(loaded.fingerprint, schedule.fingerprint);
        assert_eq!(loaded.obs_dim, 6);
        assert_eq!(loaded.algebra_dim, 3);
        assert_eq!(loaded.gains.len(), schedule.gains.len());
        for (a, b) in loaded.gains.iter().zip(&schedule.gains) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn branch_cut_particles_are_redrawn_from_the_prior() {
        // A particle exactly at the half-turn cannot be logged; with a
        // zero prior it must be replaced by the identity and counted.
        let mut eta = AlgebraVector::from_slice(GroupDescriptor::SO3, &[std::f64::consts::PI, 0.0, 0.0])
            .unwrap()
            .exp();
        let prior = DMatrix::zeros(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut count = 0;
        let xi = particle_log(&mut eta, &prior, &mut rng, &mut count).unwrap();
        assert_eq!(count, 1);
        assert_eq!(xi.coords().amax(), 0.0);
        assert!((eta.matrix() - DMatrix::<f64>::identity(3, 3)).amax() == 0.0);
    }

    #[test]
    fn centered_and_printed_moments_agree_at_zero_mean() {
        // With a symmetric prior and symmetric noise the error mean is
        // identity, so both moment forms should give similar gains; they
        // must at least both produce well-formed schedules.
        let scenario = attitude_scenario(5, 1.0);
        let printed = offline_gains(&scenario, 2000, 13, MomentForm::Printed).unwrap();
        let centered = offline_gains(&scenario, 2000, 13, MomentForm::Centered).unwrap();
        for (a, b) in printed.gains.iter().zip(&centered.gains) {
            let rel = (a - b).norm() / a.norm().max(1e-12);
            assert!(rel < 0.2, "moment forms disagree by {rel}");
        }
    }

    #[test]
    fn applied_schedule_tracks_truth_at_moderate_noise() {
        let scenario = attitude_scenario(50, 1.0);
        let schedule = offline_gains(&scenario, 2000, 17, MomentForm::Printed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let traj = simulate_trajectory(&scenario, &mut rng).unwrap();
        let chi0 = traj.filter_init();
        let trace = apply_schedule(&scenario, &traj, &chi0, &schedule).unwrap();
        let final_error = error_of(&traj.truth[50], &trace[50]).rotation_angle();
        let initial_error = traj.noise.init_error.rotation_angle();
        assert!(
            final_error < initial_error / 3.0,
            "filter did not contract the error: {initial_error} -> {final_error}"
        );
    }
}

//! System models: noise specifications, output maps, discretisation, and
//! trajectory simulation.
//!
//! The continuous-time system has group-valued state `chi_t` driven by a
//! left input `upsilon_t`, a right input `omega_t`, and left-multiplicative
//! white process noise. With inputs held constant over each step of length
//! `dt` (the only case supported here), the exact one-step transition is
//!
//! ```text
//! chi_{n+1} = Upsilon_n · W_n · chi_n · Omega_n,
//! Upsilon_n = exp(dt·upsilon_n),   Omega_n = exp(dt·omega_n),
//! ```
//!
//! with `W_n = exp(w)`, `w ~ N(0, Q^w·dt)` a concentrated Gaussian on the
//! group. Observations are produced by one of the built-in [`OutputMap`]
//! kinds, all of which satisfy the equivariance property
//! `h(chi·g, 0) = g^{-1} ∘ h(chi, 0)` that makes the estimation error of an
//! invariant filter autonomous.
//!
//! # Sensor-frame and body-frame noise
//!
//! For the rotation-type outputs the simulator draws the observation noise
//! in the sensor frame, `y = R^T b + V`, which for isotropic `V` has the
//! same law as the body-frame form `y = R^T (b + Ṽ)` with `Ṽ = R·V`. The
//! [`NoiseLog`] stores the body-frame realisation `Ṽ`, because that is the
//! quantity the autonomous error recursion consumes: replaying the same log
//! under different right inputs or a different true initial state must (and
//! does) reproduce the same error sequence.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lie::{AlgebraVector, GroupDescriptor, GroupElement, GroupId};

/// Tolerance for the numerically-checked equivariance identity.
pub const EQUIVARIANCE_TOL: f64 = 1e-12;

/// Smallest admissible eigenvalue when validating a covariance as PSD.
pub const PSD_EIGENVALUE_FLOOR: f64 = -1e-12;

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

/// Observation-outlier mixture: with probability `probability`, an extra
/// isotropic Gaussian of standard deviation `std` is added to the
/// observation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSpec {
    pub probability: f64,
    pub std: f64,
}

/// Process and observation noise levels for a model.
///
/// `process_cov` is the diffusion matrix per unit time (the per-step
/// covariance is `process_cov · dt`); `obs_cov` is the per-observation
/// covariance. Both must be symmetric PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    process_cov: DMatrix<f64>,
    obs_cov: DMatrix<f64>,
    outlier: Option<OutlierSpec>,
}

impl NoiseSpec {
    /// Validates and wraps the two covariances.
    pub fn new(process_cov: DMatrix<f64>, obs_cov: DMatrix<f64>) -> Result<Self> {
        validate_covariance(&process_cov, "process covariance")?;
        validate_covariance(&obs_cov, "observation covariance")?;
        Ok(Self {
            process_cov,
            obs_cov,
            outlier: None,
        })
    }

    /// Isotropic noise: `qw·I` on the algebra (per unit time) and `qv·I` on
    /// the observation space.
    pub fn isotropic(algebra_dim: usize, qw: f64, obs_dim: usize, qv: f64) -> Result<Self> {
        Self::new(
            DMatrix::identity(algebra_dim, algebra_dim) * qw,
            DMatrix::identity(obs_dim, obs_dim) * qv,
        )
    }

    /// Adds an outlier mixture to the observations.
    pub fn with_outlier(mut self, probability: f64, std: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::Config(format!(
                "outlier probability {probability} outside [0, 1]"
            )));
        }
        if std < 0.0 {
            return Err(Error::Config(format!("outlier std {std} negative")));
        }
        self.outlier = Some(OutlierSpec { probability, std });
        Ok(self)
    }

    pub fn process_cov(&self) -> &DMatrix<f64> {
        &self.process_cov
    }

    pub fn obs_cov(&self) -> &DMatrix<f64> {
        &self.obs_cov
    }

    pub fn outlier(&self) -> Option<&OutlierSpec> {
        self.outlier.as_ref()
    }
}

fn validate_covariance(cov: &DMatrix<f64>, what: &str) -> Result<()> {
    if cov.nrows() != cov.ncols() {
        return Err(Error::DimensionMismatch {
            expected: cov.nrows(),
            got: cov.ncols(),
        });
    }
    let asym = (cov - cov.transpose()).amax();
    if asym > 1e-9 {
        return Err(Error::Config(format!("{what} is not symmetric (defect {asym:.3e})")));
    }
    let eigs = cov.clone().symmetric_eigenvalues();
    let min = eigs.min();
    if min < PSD_EIGENVALUE_FLOOR {
        return Err(Error::NotPositiveSemiDefinite { min_eigenvalue: min });
    }
    Ok(())
}

/// A factor `F` with `F Fᵀ = cov`, for drawing `N(0, cov)` samples.
/// Cholesky when the matrix is positive definite, otherwise an
/// eigendecomposition with negative eigenvalues clamped at zero.
pub(crate) fn spd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    validate_covariance(cov, "covariance")?;
    let sym = (cov + cov.transpose()) * 0.5;
    if let Some(chol) = sym.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = sym.symmetric_eigen();
    let n = cov.nrows();
    let mut factor = eig.eigenvectors;
    for j in 0..n {
        let scale = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            factor[(i, j)] *= scale;
        }
    }
    Ok(factor)
}

/// Draws `factor · z` with `z ~ N(0, I)`.
pub(crate) fn sample_gaussian<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * z
}

/// Draws one group-valued process noise `W = exp(w)`, `w ~ N(0, Q^w·dt)`.
pub fn sample_process_noise<R: Rng + ?Sized>(
    spec: &NoiseSpec,
    descriptor: GroupDescriptor,
    dt: f64,
    rng: &mut R,
) -> Result<GroupElement> {
    let factor = spd_factor(&(spec.process_cov() * dt))?;
    let w = sample_gaussian(&factor, rng);
    Ok(AlgebraVector::new(descriptor, w)?.exp())
}

/// Pre-factored samplers for the per-step noise of one scenario; build once,
/// sample millions of times.
#[derive(Debug, Clone)]
pub struct NoiseSamplers {
    descriptor: GroupDescriptor,
    process_factor: DMatrix<f64>,
    obs_factor: DMatrix<f64>,
    outlier: Option<OutlierSpec>,
    obs_dim: usize,
}

impl NoiseSamplers {
    pub fn new(noise: &NoiseSpec, descriptor: GroupDescriptor, dt: f64) -> Result<Self> {
        if noise.process_cov().nrows() != descriptor.algebra_dim() {
            return Err(Error::DimensionMismatch {
                expected: descriptor.algebra_dim(),
                got: noise.process_cov().nrows(),
            });
        }
        Ok(Self {
            descriptor,
            process_factor: spd_factor(&(noise.process_cov() * dt))?,
            obs_factor: spd_factor(noise.obs_cov())?,
            outlier: noise.outlier().cloned(),
            obs_dim: noise.obs_cov().nrows(),
        })
    }

    /// One step of group-valued process noise.
    pub fn process<R: Rng + ?Sized>(&self, rng: &mut R) -> GroupElement {
        let w = sample_gaussian(&self.process_factor, rng);
        AlgebraVector::new(self.descriptor, w)
            .expect("factor dimension fixed at construction")
            .exp()
    }

    /// One observation-noise vector. Draw order is fixed for
    /// reproducibility: Gaussian component, then the Bernoulli outlier
    /// decision, then (only if the outlier fires) the outlier normals.
    /// Returns the vector and whether the outlier fired.
    pub fn observation<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, bool) {
        let mut v = sample_gaussian(&self.obs_factor, rng);
        if let Some(out) = &self.outlier {
            if rng.gen::<f64>() < out.probability {
                for i in 0..self.obs_dim {
                    v[i] += out.std * rng.sample::<f64, _>(StandardNormal);
                }
                return (v, true);
            }
        }
        (v, false)
    }
}

// ---------------------------------------------------------------------------
// Output maps
// ---------------------------------------------------------------------------

/// Built-in observation functions `y = h(chi, V)`.
///
/// Every kind is equivariant — `h(chi·g, 0) = g^{-1} ∘ h(chi, 0)` for the
/// output-space action implemented by [`OutputMap::act`] — which is the
/// property that detaches the invariant filter's error from the inputs and
/// the true trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputMap {
    /// Body-frame observation of two fixed reference directions
    /// (SO(3), `y = (Rᵀb1 + V1, Rᵀb2 + V2)`, 6 components).
    TwoVector { b1: DVector<f64>, b2: DVector<f64> },
    /// Body-frame observation of one fixed reference direction
    /// (SO(3), `y = Rᵀg + V`, 3 components).
    SingleVector { g_ref: DVector<f64> },
    /// Observation of the origin point through the inverse pose, in
    /// non-homogeneous form: `y = Rᵀ(V − t)` for `chi = [[R, t], [0, 1]]`
    /// (SE(3), 3 components).
    VelocitySe3,
    /// Linear observation of an embedded translation state
    /// (T(N), `y = H·x + V`, `p = H.nrows()` components).
    LinearH { h: DMatrix<f64> },
}

impl OutputMap {
    /// Number of observation components `p`.
    pub fn obs_dim(&self) -> usize {
        match self {
            OutputMap::TwoVector { .. } => 6,
            OutputMap::SingleVector { .. } => 3,
            OutputMap::VelocitySe3 => 3,
            OutputMap::LinearH { h } => h.nrows(),
        }
    }

    /// The group this map observes.
    pub fn check_group(&self, descriptor: GroupDescriptor) -> Result<()> {
        let ok = match self {
            OutputMap::TwoVector { .. } | OutputMap::SingleVector { .. } => {
                descriptor.id() == GroupId::So3
            }
            OutputMap::VelocitySe3 => descriptor.id() == GroupId::Se3,
            OutputMap::LinearH { h } => descriptor.id() == GroupId::Tn(h.ncols()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "output map {self:?} does not observe {descriptor}"
            )))
        }
    }

    /// Validates the map's own parameters.
    pub fn validate(&self) -> Result<()> {
        match self {
            OutputMap::TwoVector { b1, b2 } => {
                if b1.len() != 3 || b2.len() != 3 {
                    return Err(Error::DimensionMismatch {
                        expected: 3,
                        got: b1.len().max(b2.len()),
                    });
                }
                let cross_norm = cross3(b1, b2).norm();
                if cross_norm < 1e-9 {
                    return Err(Error::Config(format!(
                        "two-vector references are collinear (‖b1 × b2‖ = {cross_norm:.3e})"
                    )));
                }
                Ok(())
            }
            OutputMap::SingleVector { g_ref } => {
                if g_ref.len() != 3 {
                    return Err(Error::DimensionMismatch { expected: 3, got: g_ref.len() });
                }
                if g_ref.norm() < 1e-9 {
                    return Err(Error::Config("reference direction is zero".into()));
                }
                Ok(())
            }
            OutputMap::VelocitySe3 => Ok(()),
            OutputMap::LinearH { h } => {
                if h.nrows() == 0 || h.ncols() == 0 {
                    return Err(Error::Config("observation matrix H is empty".into()));
                }
                Ok(())
            }
        }
    }

    /// The noise-free identity output `h(I, 0)`.
    pub fn reference_output(&self) -> DVector<f64> {
        match self {
            OutputMap::TwoVector { b1, b2 } => stack3(b1, b2),
            OutputMap::SingleVector { g_ref } => g_ref.clone(),
            OutputMap::VelocitySe3 => DVector::zeros(3),
            OutputMap::LinearH { h } => DVector::zeros(h.nrows()),
        }
    }

    /// `h(chi, v)` with the noise added in the sensor frame; this is the
    /// form the simulator emits (`y = Rᵀb + V` for rotation-type maps).
    pub fn apply_sensor(&self, chi: &GroupElement, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.obs_dim(), "noise dimension mismatch");
        match self {
            OutputMap::TwoVector { .. } | OutputMap::SingleVector { .. } => {
                self.observe_noise_free(chi) + v
            }
            // For the remaining kinds the sensor and body forms coincide.
            _ => self.apply_body(chi, v),
        }
    }

    /// `h(chi, ṽ)` with the noise entering inside the group action
    /// (`y = chi^{-1}(b + ṽ)` for rotation-type maps). This is the form the
    /// autonomous error recursion consumes; for isotropic noise it has the
    /// same law as [`OutputMap::apply_sensor`].
    pub fn apply_body(&self, chi: &GroupElement, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.obs_dim(), "noise dimension mismatch");
        let inv = chi.inverse();
        match self {
            OutputMap::TwoVector { b1, b2 } => {
                let y1 = inv.matrix() * (b1 + v.rows(0, 3));
                let y2 = inv.matrix() * (b2 + v.rows(3, 3));
                stack3(&y1, &y2)
            }
            OutputMap::SingleVector { g_ref } => inv.matrix() * (g_ref + v),
            OutputMap::VelocitySe3 => {
                // chi^{-1} applied to the homogeneous point (v, 1), with the
                // constant last coordinate dropped.
                let m = inv.matrix();
                let r_t = m.view((0, 0), (3, 3));
                DVector::from_fn(3, |i, _| {
                    r_t.row(i).transpose().dot(v) + m[(i, 3)]
                })
            }
            OutputMap::LinearH { h } => h * chi.translation() + v,
        }
    }

    /// The noise-free observation `h(chi, 0)` (identical in both frames).
    pub fn observe_noise_free(&self, chi: &GroupElement) -> DVector<f64> {
        match self {
            OutputMap::TwoVector { b1, b2 } => {
                let inv = chi.inverse();
                stack3(&(inv.matrix() * b1), &(inv.matrix() * b2))
            }
            OutputMap::SingleVector { g_ref } => chi.inverse().matrix() * g_ref,
            _ => self.apply_body(chi, &DVector::zeros(self.obs_dim())),
        }
    }

    /// Re-expresses a sensor-frame noise realisation in the body frame:
    /// `h_sensor(chi, v) = h_body(chi, to_body_noise(chi, v))`.
    pub fn to_body_noise(&self, chi: &GroupElement, v: &DVector<f64>) -> DVector<f64> {
        match self {
            OutputMap::TwoVector { .. } => {
                let m = chi.matrix();
                stack3(&(m * v.rows(0, 3)), &(m * v.rows(3, 3)))
            }
            OutputMap::SingleVector { .. } => chi.matrix() * v,
            _ => v.clone(),
        }
    }

    /// The output-space action `g ∘ y` of Assumption-style equivariance:
    /// blockwise rotation for the direction observations, the affine pose
    /// action for [`OutputMap::VelocitySe3`], and the translation action
    /// `y − H·x(g)` for [`OutputMap::LinearH`]. Satisfies
    /// `h(chi·g, 0) = act(g^{-1}, h(chi, 0))`.
    pub fn act(&self, g: &GroupElement, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.obs_dim(), "output dimension mismatch");
        match self {
            OutputMap::TwoVector { .. } => {
                let m = g.matrix();
                stack3(&(m * y.rows(0, 3)), &(m * y.rows(3, 3)))
            }
            OutputMap::SingleVector { .. } => g.matrix() * y,
            OutputMap::VelocitySe3 => {
                let m = g.matrix();
                DVector::from_fn(3, |i, _| {
                    m.view((i, 0), (1, 3)).transpose().dot(y) + m[(i, 3)]
                })
            }
            OutputMap::LinearH { h } => y - h * g.translation(),
        }
    }

    /// Max equivariance defect `‖h(chi·g, 0) − act(g^{-1}, h(chi, 0))‖_∞`
    /// over `pairs` random `(chi, g)` draws; a numerical check of the
    /// property every built-in kind satisfies by construction.
    pub fn equivariance_defect<R: Rng + ?Sized>(
        &self,
        descriptor: GroupDescriptor,
        pairs: usize,
        rng: &mut R,
    ) -> f64 {
        let dim = descriptor.algebra_dim();
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let chi = random_group_element(descriptor, dim, rng);
            let g = random_group_element(descriptor, dim, rng);
            let lhs = self.observe_noise_free(&chi.compose(&g));
            let rhs = self.act(&g.inverse(), &self.observe_noise_free(&chi));
            worst = worst.max((lhs - rhs).amax());
        }
        worst
    }
}

fn random_group_element<R: Rng + ?Sized>(
    descriptor: GroupDescriptor,
    dim: usize,
    rng: &mut R,
) -> GroupElement {
    let coords = DVector::from_fn(dim, |_, _| rng.gen_range(-1.5..1.5));
    AlgebraVector::new(descriptor, coords).unwrap().exp()
}

fn cross3(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_column_slice(&[
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])
}

fn stack3(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(6, a.iter().copied().chain(b.iter().copied()))
}

/// Draws one observation of `chi`: sensor-frame noise plus the optional
/// outlier mixture.
pub fn observe<R: Rng + ?Sized>(
    chi: &GroupElement,
    map: &OutputMap,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let samplers = NoiseSamplers::new(noise, chi.descriptor(), 1.0)?;
    let (v, _) = samplers.observation(rng);
    Ok(map.apply_sensor(chi, &v))
}

// ---------------------------------------------------------------------------
// Inputs and discretisation
// ---------------------------------------------------------------------------

/// A piecewise-constant algebra-valued input signal.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSignal {
    /// Identically zero (the discretised element is the identity).
    Zero,
    /// The same algebra value on every step.
    Constant(AlgebraVector),
    /// One algebra value per step.
    PerStep(Vec<AlgebraVector>),
}

impl InputSignal {
    /// Whether the discretised input is the same element on every step.
    pub fn is_constant(&self) -> bool {
        !matches!(self, InputSignal::PerStep(_))
    }

    fn validate(&self, descriptor: GroupDescriptor, steps: usize, what: &str) -> Result<()> {
        match self {
            InputSignal::Zero => Ok(()),
            InputSignal::Constant(v) => {
                if v.descriptor() != descriptor {
                    return Err(Error::Config(format!("{what} input group mismatch")));
                }
                Ok(())
            }
            InputSignal::PerStep(vs) => {
                if vs.len() != steps {
                    return Err(Error::Config(format!(
                        "{what} input has {} entries for {steps} steps",
                        vs.len()
                    )));
                }
                for v in vs {
                    if v.descriptor() != descriptor {
                        return Err(Error::Config(format!("{what} input group mismatch")));
                    }
                }
                Ok(())
            }
        }
    }
}

/// One-step flow elements `(Upsilon_n, Omega_n)` of constant algebra inputs:
/// `exp(dt·υ)` and `exp(dt·ω)`. Both the left equation `dΥ/dt = υΥ` and the
/// right equation `dΩ/dt = Ωω` have this same closed-form solution for
/// constant coefficients.
pub fn discretize(
    upsilon: &AlgebraVector,
    omega: &AlgebraVector,
    dt: f64,
) -> (GroupElement, GroupElement) {
    (upsilon.scaled(dt).exp(), omega.scaled(dt).exp())
}

/// The discretised per-step elements of an input signal.
#[derive(Debug, Clone)]
pub enum StepInputs {
    Constant(GroupElement),
    PerStep(Vec<GroupElement>),
}

impl StepInputs {
    pub fn from_signal(signal: &InputSignal, descriptor: GroupDescriptor, dt: f64) -> Self {
        match signal {
            InputSignal::Zero => StepInputs::Constant(GroupElement::identity(descriptor)),
            InputSignal::Constant(v) => StepInputs::Constant(v.scaled(dt).exp()),
            InputSignal::PerStep(vs) => {
                StepInputs::PerStep(vs.iter().map(|v| v.scaled(dt).exp()).collect())
            }
        }
    }

    pub fn at(&self, n: usize) -> &GroupElement {
        match self {
            StepInputs::Constant(g) => g,
            StepInputs::PerStep(gs) => &gs[n],
        }
    }
}

// ---------------------------------------------------------------------------
// Model and scenario
// ---------------------------------------------------------------------------

/// A discrete-time model on a matrix Lie group: inputs, noise, and output.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    pub descriptor: GroupDescriptor,
    pub dt: f64,
    pub upsilon: InputSignal,
    pub omega: InputSignal,
    pub noise: NoiseSpec,
    pub output: OutputMap,
}

/// A complete simulation scenario: a model plus horizon, true initial state,
/// and the concentrated-Gaussian prior on the initial estimation error.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model: DiscreteModel,
    /// Number of steps `N` (observations arrive at steps `1..=N`).
    pub steps: usize,
    pub truth_init: GroupElement,
    /// Covariance `P0` of the initial error's algebra coordinates.
    pub prior_cov: DMatrix<f64>,
}

impl Scenario {
    /// Validates all cross-field invariants.
    pub fn validate(&self) -> Result<()> {
        let d = self.model.descriptor;
        if self.steps == 0 {
            return Err(Error::Config("scenario needs at least one step".into()));
        }
        if !(self.model.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.model.dt)));
        }
        self.model.upsilon.validate(d, self.steps, "left")?;
        self.model.omega.validate(d, self.steps, "right")?;
        self.model.output.validate()?;
        self.model.output.check_group(d)?;
        if self.model.noise.process_cov().nrows() != d.algebra_dim() {
            return Err(Error::DimensionMismatch {
                expected: d.algebra_dim(),
                got: self.model.noise.process_cov().nrows(),
            });
        }
        if self.model.noise.obs_cov().nrows() != self.model.output.obs_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.output.obs_dim(),
                got: self.model.noise.obs_cov().nrows(),
            });
        }
        if self.truth_init.descriptor() != d {
            return Err(Error::Config("true initial state group mismatch".into()));
        }
        if self.prior_cov.nrows() != d.algebra_dim() {
            return Err(Error::DimensionMismatch {
                expected: d.algebra_dim(),
                got: self.prior_cov.nrows(),
            });
        }
        validate_covariance(&self.prior_cov, "prior covariance")?;
        Ok(())
    }

    /// Stable 64-bit fingerprint of every parameter that defines the
    /// scenario (FNV-1a over the exact float bits). Gain schedules carry it
    /// so they cannot be applied to a different scenario.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_str(&format!("{}", self.model.descriptor));
        h.write_f64(self.model.dt);
        h.write_u64(self.steps as u64);
        hash_signal(&mut h, &self.model.upsilon);
        hash_signal(&mut h, &self.model.omega);
        hash_matrix(&mut h, self.model.noise.process_cov());
        hash_matrix(&mut h, self.model.noise.obs_cov());
        match self.model.noise.outlier() {
            Some(o) => {
                h.write_str("outlier");
                h.write_f64(o.probability);
                h.write_f64(o.std);
            }
            None => h.write_str("no-outlier"),
        }
        match &self.model.output {
            OutputMap::TwoVector { b1, b2 } => {
                h.write_str("two-vector");
                hash_vector(&mut h, b1);
                hash_vector(&mut h, b2);
            }
            OutputMap::SingleVector { g_ref } => {
                h.write_str("single-vector");
                hash_vector(&mut h, g_ref);
            }
            OutputMap::VelocitySe3 => h.write_str("velocity-se3"),
            OutputMap::LinearH { h: hm } => {
                h.write_str("linear");
                hash_matrix(&mut h, hm);
            }
        }
        hash_matrix(&mut h, self.truth_init.matrix());
        hash_matrix(&mut h, &self.prior_cov);
        h.finish()
    }

    /// Discretised left-input elements.
    pub fn upsilon_steps(&self) -> StepInputs {
        StepInputs::from_signal(&self.model.upsilon, self.model.descriptor, self.model.dt)
    }

    /// Discretised right-input elements.
    pub fn omega_steps(&self) -> StepInputs {
        StepInputs::from_signal(&self.model.omega, self.model.descriptor, self.model.dt)
    }

    /// Pre-factored noise samplers for this scenario.
    pub fn samplers(&self) -> Result<NoiseSamplers> {
        NoiseSamplers::new(&self.model.noise, self.model.descriptor, self.model.dt)
    }

    /// Factor of the prior covariance, for drawing initial errors.
    pub fn prior_factor(&self) -> Result<DMatrix<f64>> {
        spd_factor(&self.prior_cov)
    }
}

fn hash_signal(h: &mut Fnv1a, s: &InputSignal) {
    match s {
        InputSignal::Zero => h.write_str("zero"),
        InputSignal::Constant(v) => {
            h.write_str("const");
            hash_vector(h, v.coords());
        }
        InputSignal::PerStep(vs) => {
            h.write_str("steps");
            for v in vs {
                hash_vector(h, v.coords());
            }
        }
    }
}

fn hash_matrix(h: &mut Fnv1a, m: &DMatrix<f64>) {
    h.write_u64(m.nrows() as u64);
    h.write_u64(m.ncols() as u64);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            h.write_f64(m[(i, j)]);
        }
    }
}

fn hash_vector(h: &mut Fnv1a, v: &DVector<f64>) {
    h.write_u64(v.len() as u64);
    for x in v.iter() {
        h.write_f64(*x);
    }
}

/// FNV-1a, 64-bit: tiny, dependency-free, stable across platforms.
pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_str(&mut self, s: &str) {
        self.write_bytes(s.as_bytes());
        self.write_bytes(&[0xff]);
    }

    pub fn write_u64(&mut self, x: u64) {
        self.write_bytes(&x.to_le_bytes());
    }

    pub fn write_f64(&mut self, x: f64) {
        self.write_u64(x.to_bits());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Every random draw of one simulated trajectory, retained so that error
/// recursions and replays under different inputs reproduce the exact run.
#[derive(Debug, Clone)]
pub struct NoiseLog {
    /// Initial estimation error `eta_0` (truth = `eta_0 · estimate`).
    pub init_error: GroupElement,
    /// Process noise `W_n` for `n = 0..N-1`.
    pub process: Vec<GroupElement>,
    /// Body-frame observation noise for steps `1..=N` (entry `n-1` belongs
    /// to `Y_n`).
    pub obs_body: Vec<DVector<f64>>,
    /// How many observations carried an outlier.
    pub outlier_count: usize,
}

/// A simulated truth trajectory with its observations and noise log.
#[derive(Debug, Clone)]
pub struct SimulatedTrajectory {
    /// States `chi_0..chi_N`.
    pub truth: Vec<GroupElement>,
    /// Observations `Y_1..Y_N`.
    pub observations: Vec<DVector<f64>>,
    pub noise: NoiseLog,
}

impl SimulatedTrajectory {
    /// The filter initialisation consistent with the logged initial error:
    /// `chi_hat_0 = eta_0^{-1} · chi_0`.
    pub fn filter_init(&self) -> GroupElement {
        self.noise.init_error.inverse().compose(&self.truth[0])
    }
}

/// Simulates one trajectory of the scenario: draws the initial error, then
/// per step the process noise followed by the observation noise (fixed
/// order), composes `chi_{n+1} = Upsilon_n W_n chi_n Omega_n`, and records
/// sensor-frame observations together with the body-frame noise log.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    scenario: &Scenario,
    rng: &mut R,
) -> Result<SimulatedTrajectory> {
    let d = scenario.model.descriptor;
    let samplers = scenario.samplers()?;
    let prior_factor = scenario.prior_factor()?;
    let upsilon = scenario.upsilon_steps();
    let omega = scenario.omega_steps();
    let map = &scenario.model.output;

    let init_error =
        AlgebraVector::new(d, sample_gaussian(&prior_factor, rng))?.exp();

    let n = scenario.steps;
    let mut truth = Vec::with_capacity(n + 1);
    truth.push(scenario.truth_init.clone());
    let mut observations = Vec::with_capacity(n);
    let mut process = Vec::with_capacity(n);
    let mut obs_body = Vec::with_capacity(n);
    let mut outlier_count = 0;

    for step in 0..n {
        let w = samplers.process(rng);
        let next = upsilon
            .at(step)
            .compose(&w)
            .compose(&truth[step])
            .compose(omega.at(step));
        let (v, fired) = samplers.observation(rng);
        if fired {
            outlier_count += 1;
        }
        observations.push(map.apply_sensor(&next, &v));
        obs_body.push(map.to_body_noise(&next, &v));
        process.push(w);
        truth.push(next);
    }

    Ok(SimulatedTrajectory {
        truth,
        observations,
        noise: NoiseLog {
            init_error,
            process,
            obs_body,
            outlier_count,
        },
    })
}

/// Re-runs a trajectory under **different** right inputs and/or a different
/// true initial state, reusing a recorded noise log. The observations are
/// formed from the logged body-frame noise, so the coupled filter of the
/// replay sees exactly the same error-driving randomness — the construction
/// behind the input-independence property of invariant filters.
pub fn replay_trajectory(
    scenario: &Scenario,
    truth_init: &GroupElement,
    omega: &InputSignal,
    noise: &NoiseLog,
) -> Result<SimulatedTrajectory> {
    let d = scenario.model.descriptor;
    omega.validate(d, scenario.steps, "right")?;
    if noise.process.len() != scenario.steps || noise.obs_body.len() != scenario.steps {
        return Err(Error::Config(format!(
            "noise log length {} does not match the scenario horizon {}",
            noise.process.len(),
            scenario.steps
        )));
    }
    let upsilon = scenario.upsilon_steps();
    let omega = StepInputs::from_signal(omega, d, scenario.model.dt);
    let map = &scenario.model.output;

    let n = scenario.steps;
    let mut truth = Vec::with_capacity(n + 1);
    truth.push(truth_init.clone());
    let mut observations = Vec::with_capacity(n);
    for step in 0..n {
        let next = upsilon
            .at(step)
            .compose(&noise.process[step])
            .compose(&truth[step])
            .compose(omega.at(step));
        observations.push(map.apply_body(&next, &noise.obs_body[step]));
        truth.push(next);
    }
    Ok(SimulatedTrajectory {
        truth,
        observations,
        noise: noise.clone(),
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn so3_vec(x: f64, y: f64, z: f64) -> AlgebraVector {
        AlgebraVector::from_slice(GroupDescriptor::SO3, &[x, y, z]).unwrap()
    }

    fn unit(x: f64, y: f64, z: f64) -> DVector<f64> {
        DVector::from_column_slice(&[x, y, z])
    }

    /// RK4 integration of the matrix ODE `dU/dt = A·U` (left) or
    /// `dU/dt = U·A` (right) over `[0, dt]` — the independent oracle for
    /// the closed-form discretisation.
    fn rk4_flow(a: &DMatrix<f64>, dt: f64, substeps: usize, left: bool) -> DMatrix<f64> {
        let n = a.nrows();
        let mut u = DMatrix::<f64>::identity(n, n);
        let h = dt / substeps as f64;
        let f = |m: &DMatrix<f64>| if left { a * m } else { m * a };
        for _ in 0..substeps {
            let k1 = f(&u);
            let k2 = f(&(&u + &k1 * (h / 2.0)));
            let k3 = f(&(&u + &k2 * (h / 2.0)));
            let k4 = f(&(&u + &k3 * h));
            u += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        u
    }

    #[test]
    fn discretize_zero_input_is_identity() {
        let zero = AlgebraVector::zero(GroupDescriptor::SO3);
        let (ups, omg) = discretize(&zero, &zero, 0.02);
        assert_eq!(ups.matrix(), &DMatrix::identity(3, 3));
        assert_eq!(omg.matrix(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn discretize_constant_rate_hits_expected_angle() {
        // ‖omega‖·dt = pi/2 about the z axis.
        let dt = 1.0;
        let omega = so3_vec(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let (_, omg) = discretize(&AlgebraVector::zero(GroupDescriptor::SO3), &omega, dt);
        let expected = so3_vec(0.0, 0.0, std::f64::consts::FRAC_PI_2).exp();
        assert!((omg.matrix() - expected.matrix()).amax() < 1e-15);
    }

    #[test]
    fn discretize_matches_rk4_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in [GroupDescriptor::SO3, GroupDescriptor::SE3] {
            for _ in 0..20 {
                let dim = d.algebra_dim();
                let ups = AlgebraVector::new(
                    d,
                    DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0)),
                )
                .unwrap();
                let omg = AlgebraVector::new(
                    d,
                    DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0)),
                )
                .unwrap();
                let dt = 0.01;
                let (big_u, big_o) = discretize(&ups, &omg, dt);
                let left = rk4_flow(&ups.hat(), dt, 1000, true);
                let right = rk4_flow(&omg.hat(), dt, 1000, false);
                assert!((big_u.matrix() - left).amax() < 1e-8, "{d}: left flow");
                assert!((big_o.matrix() - right).amax() < 1e-8, "{d}: right flow");
            }
        }
    }

    #[test]
    fn process_noise_zero_covariance_gives_identity() {
        let spec = NoiseSpec::isotropic(3, 0.0, 3, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let w = sample_process_noise(&spec, GroupDescriptor::SO3, 0.02, &mut rng).unwrap();
            assert_eq!(w.matrix(), &DMatrix::identity(3, 3));
        }
    }

    #[test]
    fn process_noise_moments_match_spec() {
        let sigma_sq = 0.04;
        let dt = 0.5;
        let spec = NoiseSpec::isotropic(3, sigma_sq, 3, 0.0).unwrap();
        let samplers = NoiseSamplers::new(&spec, GroupDescriptor::SO3, dt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut cov = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let w = samplers.process(&mut rng).log().unwrap();
            cov += w.coords() * w.coords().transpose();
        }
        cov /= n as f64;
        let target = sigma_sq * dt;
        for i in 0..3 {
            assert!(
                (cov[(i, i)] - target).abs() / target < 0.03,
                "diagonal {i}: {} vs {target}",
                cov[(i, i)]
            );
            for j in 0..3 {
                if i != j {
                    assert!(cov[(i, j)].abs() < 0.03 * target);
                }
            }
        }
    }

    #[test]
    fn isotropic_noise_is_conjugation_invariant_in_law() {
        // Empirical second moments of log(g W g^{-1}) must match those of
        // log(W) for isotropic W.
        let spec = NoiseSpec::isotropic(3, 0.09, 3, 0.0).unwrap();
        let samplers = NoiseSamplers::new(&spec, GroupDescriptor::SO3, 1.0).unwrap();
        let g = so3_vec(0.7, -0.3, 1.1).exp();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut cov = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let w = samplers.process(&mut rng);
            let conj = g.compose(&w).compose(&g.inverse());
            let lw = conj.log().unwrap();
            cov += lw.coords() * lw.coords().transpose();
        }
        cov /= n as f64;
        for i in 0..3 {
            assert!((cov[(i, i)] - 0.09).abs() / 0.09 < 0.03);
        }
    }

    #[test]
    fn observe_noise_free_returns_references() {
        let map = OutputMap::TwoVector {
            b1: unit(1.0, 0.0, 0.0),
            b2: unit(0.0, 1.0, 0.0),
        };
        let id = GroupElement::identity(GroupDescriptor::SO3);
        let y = map.observe_noise_free(&id);
        assert_eq!(y.as_slice(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

        let horizon = OutputMap::SingleVector { g_ref: unit(0.0, 0.0, 1.0) };
        assert_eq!(horizon.observe_noise_free(&id).as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn outlier_rate_matches_binomial_expectation() {
        let spec = NoiseSpec::isotropic(3, 0.0, 3, 1e-6)
            .unwrap()
            .with_outlier(0.01, 0.5236)
            .unwrap();
        let samplers = NoiseSamplers::new(&spec, GroupDescriptor::SO3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut fired = 0usize;
        for _ in 0..n {
            let (_, outlier) = samplers.observation(&mut rng);
            if outlier {
                fired += 1;
            }
        }
        let rate = fired as f64 / n as f64;
        assert!((0.008..=0.012).contains(&rate), "outlier rate {rate}");
    }

    #[test]
    fn equivariance_of_all_builtin_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cases: Vec<(OutputMap, GroupDescriptor)> = vec![
            (
                OutputMap::TwoVector {
                    b1: unit(1.0, 0.0, 0.0),
                    b2: unit(0.0, 1.0, 0.0),
                },
                GroupDescriptor::SO3,
            ),
            (
                OutputMap::SingleVector { g_ref: unit(0.0, 0.0, 1.0) },
                GroupDescriptor::SO3,
            ),
            (OutputMap::VelocitySe3, GroupDescriptor::SE3),
            (
                OutputMap::LinearH {
                    h: DMatrix::from_row_slice(2, 4, &[1.0, 0.5, 0.0, -0.3, 0.2, 0.0, 1.0, 0.8]),
                },
                GroupDescriptor::tn(4),
            ),
        ];
        for (map, d) in cases {
            let defect = map.equivariance_defect(d, 1000, &mut rng);
            assert!(defect < EQUIVARIANCE_TOL, "{map:?}: defect {defect:e}");
        }
    }

    #[test]
    fn sensor_and_body_noise_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = OutputMap::TwoVector {
            b1: unit(1.0, 0.0, 0.0),
            b2: unit(0.0, 1.0, 0.0),
        };
        for _ in 0..100 {
            let chi = random_group_element(GroupDescriptor::SO3, 3, &mut rng);
            let v = DVector::from_fn(6, |_, _| rng.gen_range(-0.1..0.1));
            let sensor = map.apply_sensor(&chi, &v);
            let body = map.apply_body(&chi, &map.to_body_noise(&chi, &v));
            assert!((sensor - body).amax() < 1e-14);
        }
    }

    fn small_scenario(qw: f64, qv: f64) -> Scenario {
        Scenario {
            name: "test".into(),
            model: DiscreteModel {
                descriptor: GroupDescriptor::SO3,
                dt: 0.02,
                upsilon: InputSignal::Zero,
                omega: InputSignal::Constant(so3_vec(0.3, -0.2, 0.1)),
                noise: NoiseSpec::isotropic(3, qw, 6, qv).unwrap(),
                output: OutputMap::TwoVector {
                    b1: unit(1.0, 0.0, 0.0),
                    b2: unit(0.0, 1.0, 0.0),
                },
            },
            steps: 20,
            truth_init: GroupElement::identity(GroupDescriptor::SO3),
            prior_cov: DMatrix::identity(3, 3) * 0.25,
        }
    }

    #[test]
    fn noiseless_trajectory_is_the_input_product() {
        let mut scenario = small_scenario(0.0, 0.0);
        scenario.prior_cov = DMatrix::zeros(3, 3);
        scenario.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let traj = simulate_trajectory(&scenario, &mut rng).unwrap();
        // With Upsilon = W = I the recursion unrolls to chi_0 · Omega^n.
        let omega = scenario.omega_steps().at(0).clone();
        let mut expected = scenario.truth_init.clone();
        for (n, chi) in traj.truth.iter().enumerate() {
            if n > 0 {
                expected = expected.compose(&omega);
            }
            assert!((chi.matrix() - expected.matrix()).amax() < 1e-12);
        }
    }

    #[test]
    fn simulation_is_deterministic_under_a_fixed_seed() {
        let scenario = small_scenario(1e-4, 1e-4);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            simulate_trajectory(&scenario, &mut rng).unwrap()
        };
        let a = run(42);
        let b = run(42);
        for (x, y) in a.truth.iter().zip(&b.truth) {
            assert_eq!(x.matrix(), y.matrix());
        }
        for (x, y) in a.observations.iter().zip(&b.observations) {
            assert_eq!(x, y);
        }
        let c = run(43);
        assert_ne!(a.observations[0], c.observations[0]);
    }

    #[test]
    fn replay_preserves_truth_when_inputs_are_unchanged() {
        let scenario = small_scenario(1e-4, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let traj = simulate_trajectory(&scenario, &mut rng).unwrap();
        let replayed = replay_trajectory(
            &scenario,
            &scenario.truth_init,
            &scenario.model.omega,
            &traj.noise,
        )
        .unwrap();
        for (a, b) in traj.truth.iter().zip(&replayed.truth) {
            assert!((a.matrix() - b.matrix()).amax() < 1e-13);
        }
        for (a, b) in traj.observations.iter().zip(&replayed.observations) {
            assert!((a - b).amax() < 1e-13, "sensor/body observation forms agree to ulp");
        }
    }

    #[test]
    fn fingerprint_depends_on_every_scenario_parameter() {
        let base = small_scenario(1e-4, 1e-4);
        let f0 = base.fingerprint();
        assert_eq!(f0, small_scenario(1e-4, 1e-4).fingerprint());

        let mut other = small_scenario(1e-4, 1e-4);
        other.steps = 21;
        assert_ne!(f0, other.fingerprint());

        let noisier = small_scenario(2e-4, 1e-4);
        assert_ne!(f0, noisier.fingerprint());

        let mut outliers = small_scenario(1e-4, 1e-4);
        outliers.model.noise = outliers.model.noise.with_outlier(0.01, 0.5).unwrap();
        assert_ne!(f0, outliers.fingerprint());
    }

    #[test]
    fn covariance_validation_rejects_indefinite_matrices() {
        let mut bad = DMatrix::identity(3, 3);
        bad[(2, 2)] = -1e-3;
        assert!(matches!(
            NoiseSpec::new(bad, DMatrix::identity(3, 3)),
            Err(Error::NotPositiveSemiDefinite { .. })
        ));
    }

    #[test]
    fn two_vector_map_rejects_collinear_references() {
        let map = OutputMap::TwoVector {
            b1: unit(1.0, 0.0, 0.0),
            b2: unit(2.0, 0.0, 0.0),
        };
        assert!(matches!(map.validate(), Err(Error::Config(_))));
    }
}

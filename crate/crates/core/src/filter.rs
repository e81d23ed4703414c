//! Invariant observer core: gain functions, the predict/update cycle, and
//! the autonomous error recursion.
//!
//! The observer mirrors the model's noise-free propagation and corrects
//! multiplicatively through an output-dependent gain `K`:
//!
//! ```text
//! predict:  chi_hat'_{n+1} = Upsilon_n · chi_hat_n · Omega_n
//! update:   chi_hat_{n+1}  = K(chi_hat'_{n+1} ∘ Y_{n+1}) · chi_hat'_{n+1}
//! ```
//!
//! with `K(h(I, 0)) = I` so the estimate is a fixed point at zero error.
//! Because the output map is equivariant, the invariant errors
//! `eta = chi · chi_hat^{-1}` and `eta' = chi · chi_hat'^{-1}` obey a
//! recursion driven only by the noise and the left input:
//!
//! ```text
//! eta'_{n+1} = Upsilon_n · W_n · eta_n · Upsilon_n^{-1}
//! eta_{n+1}  = eta'_{n+1} · K(h(eta'_{n+1}, V_{n+1}))^{-1}
//! ```
//!
//! [`propagate_error`] implements exactly this recursion and reproduces a
//! coupled simulate-and-filter run to floating-point round-off; the right
//! input and the true trajectory cancel out of it entirely.
//!
//! Everything here stays inversion-free: the only inverses taken are group
//! inverses (transposes and sign flips), never linear solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lie::{AlgebraVector, GroupDescriptor, GroupElement};
use crate::model::{OutputMap, Scenario, SimulatedTrajectory};

/// Required closeness of `K(h(I, 0))` to the identity at construction.
pub const GAIN_NEUTRALITY_TOL: f64 = 1e-12;

/// Cross products below this norm leave the saturated-direction gain at the
/// identity (the correction axis is undefined there).
pub const GAIN_AXIS_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Gain functions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum GainKind {
    /// `K(y) = exp(L·(y − h0))` — the general linearly-parametrised gain.
    LinearExp { l: DMatrix<f64>, h0: DVector<f64> },
    /// `K(y) = exp(k1·(y1 × b1) + k2·(y2 × b2))` for the two-direction
    /// observation on SO(3).
    TwoVector {
        k1: f64,
        k2: f64,
        b1: DVector<f64>,
        b2: DVector<f64>,
    },
    /// Saturated single-direction gain on SO(3):
    /// `K(y) = exp(k·min(angle(y, g), lambda) · (y × g)/‖y × g‖)`.
    Horizon {
        k: f64,
        lambda: f64,
        g_ref: DVector<f64>,
    },
}

/// An output-to-group gain function `K` with `K(h(I, 0)) = I`.
#[derive(Debug, Clone)]
pub struct GainFunction {
    descriptor: GroupDescriptor,
    kind: GainKind,
}

impl GainFunction {
    /// General gain `K(y) = exp(L·(y − h0))` on any supported group; `L` is
    /// `algebra_dim × p`.
    pub fn linear_exp(
        descriptor: GroupDescriptor,
        l: DMatrix<f64>,
        h0: DVector<f64>,
    ) -> Result<Self> {
        if l.nrows() != descriptor.algebra_dim() {
            return Err(Error::DimensionMismatch {
                expected: descriptor.algebra_dim(),
                got: l.nrows(),
            });
        }
        if l.ncols() != h0.len() {
            return Err(Error::DimensionMismatch {
                expected: l.ncols(),
                got: h0.len(),
            });
        }
        Self::checked(descriptor, GainKind::LinearExp { l, h0 })
    }

    /// Two-direction gain on SO(3). Requires `k1, k2 > 0`, `k1 + k2 ≤ 1`,
    /// and unit non-collinear references.
    pub fn two_vector(k1: f64, k2: f64, b1: DVector<f64>, b2: DVector<f64>) -> Result<Self> {
        if !(k1 > 0.0 && k2 > 0.0) {
            return Err(Error::InvalidGain(format!(
                "two-vector gains must be positive, got k1 = {k1}, k2 = {k2}"
            )));
        }
        if k1 + k2 > 1.0 {
            return Err(Error::InvalidGain(format!(
                "two-vector gains must satisfy k1 + k2 ≤ 1, got {}",
                k1 + k2
            )));
        }
        for (name, b) in [("b1", &b1), ("b2", &b2)] {
            if b.len() != 3 || (b.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidGain(format!("{name} must be a unit 3-vector")));
            }
        }
        if cross(&b1, &b2).norm() < 1e-9 {
            return Err(Error::InvalidGain("b1 and b2 must not be collinear".into()));
        }
        Self::checked(GroupDescriptor::SO3, GainKind::TwoVector { k1, k2, b1, b2 })
    }

    /// Saturated single-direction gain on SO(3). Requires `0 < k ≤ 1` and
    /// `0 < lambda ≤ π`.
    pub fn horizon(k: f64, lambda: f64, g_ref: DVector<f64>) -> Result<Self> {
        if !(k > 0.0 && k <= 1.0) {
            return Err(Error::InvalidGain(format!("k must lie in (0, 1], got {k}")));
        }
        if !(lambda > 0.0 && lambda <= std::f64::consts::PI) {
            return Err(Error::InvalidGain(format!("lambda must lie in (0, π], got {lambda}")));
        }
        if g_ref.len() != 3 || g_ref.norm() < 1e-9 {
            return Err(Error::InvalidGain("reference direction must be a nonzero 3-vector".into()));
        }
        Self::checked(GroupDescriptor::SO3, GainKind::Horizon { k, lambda, g_ref })
    }

    fn checked(descriptor: GroupDescriptor, kind: GainKind) -> Result<Self> {
        let gain = Self { descriptor, kind };
        let at_ref = gain.evaluate(&gain.reference_output());
        let n = descriptor.matrix_size();
        let defect = (at_ref.matrix() - DMatrix::<f64>::identity(n, n)).amax();
        if !(defect < GAIN_NEUTRALITY_TOL) {
            return Err(Error::GainNotNeutralAtReference { defect });
        }
        Ok(gain)
    }

    pub fn descriptor(&self) -> GroupDescriptor {
        self.descriptor
    }

    /// The reference output this gain is neutral at.
    pub fn reference_output(&self) -> DVector<f64> {
        match &self.kind {
            GainKind::LinearExp { h0, .. } => h0.clone(),
            GainKind::TwoVector { b1, b2, .. } => {
                DVector::from_iterator(6, b1.iter().copied().chain(b2.iter().copied()))
            }
            GainKind::Horizon { g_ref, .. } => g_ref.clone(),
        }
    }

    /// Evaluates `K(y)`.
    pub fn evaluate(&self, y: &DVector<f64>) -> GroupElement {
        match &self.kind {
            GainKind::LinearExp { l, h0 } => {
                let coords = l * (y - h0);
                AlgebraVector::new(self.descriptor, coords)
                    .expect("gain dimensions fixed at construction")
                    .exp()
            }
            GainKind::TwoVector { k1, k2, b1, b2 } => {
                let y1 = y.rows(0, 3).into_owned();
                let y2 = y.rows(3, 3).into_owned();
                let coords = cross(&y1, b1) * *k1 + cross(&y2, b2) * *k2;
                AlgebraVector::new(GroupDescriptor::SO3, coords).unwrap().exp()
            }
            GainKind::Horizon { k, lambda, g_ref } => {
                let axis_raw = cross(y, g_ref);
                let axis_norm = axis_raw.norm();
                if axis_norm < GAIN_AXIS_FLOOR {
                    return GroupElement::identity(GroupDescriptor::SO3);
                }
                let angle = axis_norm.atan2(y.dot(g_ref));
                let step = k * angle.min(*lambda);
                let coords = axis_raw * (step / axis_norm);
                AlgebraVector::new(GroupDescriptor::SO3, coords).unwrap().exp()
            }
        }
    }
}

fn cross(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_column_slice(&[
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])
}

// ---------------------------------------------------------------------------
// Filter state and steps
// ---------------------------------------------------------------------------

/// Observer state: the current estimate and its step index.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub chi_hat: GroupElement,
    pub step: usize,
}

impl FilterState {
    pub fn new(chi_hat: GroupElement) -> Self {
        Self { chi_hat, step: 0 }
    }
}

/// The paired estimation errors of one step: post-update `eta` and
/// pre-update `eta'`.
#[derive(Debug, Clone)]
pub struct ErrorSample {
    pub eta: GroupElement,
    pub eta_prime: GroupElement,
}

/// Noise-free propagation `chi_hat' = Upsilon · chi_hat · Omega`.
pub fn predict(state: &FilterState, upsilon: &GroupElement, omega: &GroupElement) -> FilterState {
    FilterState {
        chi_hat: upsilon.compose(&state.chi_hat).compose(omega),
        step: state.step + 1,
    }
}

/// Multiplicative correction `chi_hat = K(chi_hat' ∘ Y) · chi_hat'`.
pub fn update(
    state: &FilterState,
    y: &DVector<f64>,
    gain: &GainFunction,
    output: &OutputMap,
) -> FilterState {
    let innovation_frame = output.act(&state.chi_hat, y);
    FilterState {
        chi_hat: gain.evaluate(&innovation_frame).compose(&state.chi_hat),
        step: state.step,
    }
}

/// The invariant estimation error `eta = chi · chi_hat^{-1}`.
pub fn error_of(truth: &GroupElement, estimate: &GroupElement) -> GroupElement {
    truth.compose(&estimate.inverse())
}

/// One step of the autonomous error recursion, using the body-frame
/// observation-noise realisation `v_body`:
///
/// ```text
/// eta' = Upsilon · W · eta · Upsilon^{-1}
/// eta  = eta' · K(h(eta', v_body))^{-1}
/// ```
pub fn propagate_error(
    eta: &GroupElement,
    w: &GroupElement,
    v_body: &DVector<f64>,
    upsilon: &GroupElement,
    gain: &GainFunction,
    output: &OutputMap,
) -> ErrorSample {
    let eta_prime = upsilon
        .compose(w)
        .compose(eta)
        .compose(&upsilon.inverse());
    let y_err = output.apply_body(&eta_prime, v_body);
    let eta = eta_prime.compose(&gain.evaluate(&y_err).inverse());
    ErrorSample { eta, eta_prime }
}

/// Runs the fixed-gain invariant filter over a simulated trajectory,
/// starting from the estimate consistent with the logged initial error.
/// Returns the estimates `chi_hat_0..chi_hat_N`.
pub fn run_invariant_filter(
    scenario: &Scenario,
    trajectory: &SimulatedTrajectory,
    gain: &GainFunction,
) -> Result<Vec<GroupElement>> {
    if gain.descriptor() != scenario.model.descriptor {
        return Err(Error::Config("gain group does not match the scenario".into()));
    }
    let upsilon = scenario.upsilon_steps();
    let omega = scenario.omega_steps();
    let output = &scenario.model.output;
    let mut state = FilterState::new(trajectory.filter_init());
    let mut estimates = Vec::with_capacity(scenario.steps + 1);
    estimates.push(state.chi_hat.clone());
    for n in 0..scenario.steps {
        state = predict(&state, upsilon.at(n), omega.at(n));
        state = update(&state, &trajectory.observations[n], gain, output);
        estimates.push(state.chi_hat.clone());
    }
    Ok(estimates)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

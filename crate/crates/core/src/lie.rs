//! Matrix Lie groups: SO(3), SE(3), and the translation group T(N).
//!
//! Every group is handled through one uniform representation: a square dense
//! matrix for group elements and a coordinate vector for elements of the Lie
//! algebra. The three supported groups are
//!
//! | group  | element                            | algebra coords            | matrix size |
//! |--------|------------------------------------|---------------------------|-------------|
//! | SO(3)  | rotation `R`                       | rotation vector `xi ∈ R^3`| 3 × 3       |
//! | SE(3)  | `[[R, t], [0, 1]]`                 | `(xi, u) ∈ R^6`           | 4 × 4       |
//! | T(N)   | `[[I_N, 0], [x^T, 1]]`             | `x ∈ R^N`                 | (N+1)×(N+1) |
//!
//! T(N) embeds an ordinary linear state space as a matrix group: composition
//! adds the translation rows, so a linear Kalman filter becomes a special
//! case of the invariant filters built on top of this module.
//!
//! # Closed forms
//!
//! The exponential uses Rodrigues' formula on SO(3),
//!
//! ```text
//! exp(xi^) = I + sin(θ)/θ · xi^ + (1 − cos θ)/θ² · xi^²,      θ = ‖xi‖,
//! ```
//!
//! and the degree-3 polynomial form on SE(3) with `A = (xi, u)^`,
//!
//! ```text
//! exp(A) = I + A + (1 − cos θ)/θ² · A² + (θ − sin θ)/θ³ · A³,
//! ```
//!
//! where `θ` is again the norm of the rotation part. On T(N) the algebra
//! matrix is nilpotent of order two, so `exp(x^) = I + x^` exactly.
//!
//! # Numerical behaviour
//!
//! - Below `θ =` [`SMALL_ANGLE`] all trigonometric coefficient ratios switch
//!   to fourth-order Taylor expansions, keeping the exponential and logarithm
//!   smooth through zero.
//! - The principal logarithm is rejected with [`Error::LogBranchCut`] once
//!   the rotation angle comes within `1e-6` of π, where the branch is
//!   ill-conditioned; callers that may meet the cut must handle the error.
//! - [`GroupElement::compose`] measures orthonormality drift after every
//!   product and re-projects the rotation block onto the group (polar
//!   factor via SVD) when the drift exceeds [`RENORMALIZE_THRESHOLD`], so
//!   arbitrarily long products remain on the manifold.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest tolerated membership defect when validating a matrix as a group
/// element (orthonormality residual, bottom-row residual, pattern residual).
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Largest tolerated deviation from the algebra pattern accepted by `vee`.
pub const ALGEBRA_PATTERN_TOL: f64 = 1e-9;

/// Orthonormality drift above which `compose` re-projects its result onto
/// the group.
pub const RENORMALIZE_THRESHOLD: f64 = 1e-12;

/// Rotation angle below which exp/log switch to Taylor-expanded coefficients.
pub const SMALL_ANGLE: f64 = 1e-4;

/// Guard band around the logarithm branch cut at π.
pub const LOG_BRANCH_GUARD: f64 = 1e-6;

/// Identifies one of the supported matrix Lie groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupId {
    /// Rotations of R^3.
    So3,
    /// Rigid-body transformations of R^3 in homogeneous 4 × 4 form.
    Se3,
    /// Translations of R^N, embedded as (N+1) × (N+1) matrices.
    Tn(usize),
}

/// Dimensions and identity of a group; cheap to copy and carried by every
/// element and algebra vector so that mixed-group operations are caught
/// immediately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupDescriptor {
    id: GroupId,
}

impl GroupDescriptor {
    /// The rotation group SO(3).
    pub const SO3: Self = Self { id: GroupId::So3 };

    /// The rigid-body group SE(3).
    pub const SE3: Self = Self { id: GroupId::Se3 };

    /// The translation group T(N) acting on R^N.
    pub fn tn(n: usize) -> Self {
        assert!(n > 0, "T(N) requires N >= 1");
        Self { id: GroupId::Tn(n) }
    }

    /// Which group this is.
    pub fn id(&self) -> GroupId {
        self.id
    }

    /// Dimension of the Lie algebra (length of coordinate vectors).
    pub fn algebra_dim(&self) -> usize {
        match self.id {
            GroupId::So3 => 3,
            GroupId::Se3 => 6,
            GroupId::Tn(n) => n,
        }
    }

    /// Side length of the square matrices representing group elements.
    pub fn matrix_size(&self) -> usize {
        match self.id {
            GroupId::So3 => 3,
            GroupId::Se3 => 4,
            GroupId::Tn(n) => n + 1,
        }
    }
}

impl std::fmt::Display for GroupDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.id {
            GroupId::So3 => write!(f, "SO(3)"),
            GroupId::Se3 => write!(f, "SE(3)"),
            GroupId::Tn(n) => write!(f, "T({n})"),
        }
    }
}

/// An element of a matrix Lie group, stored as a dense square matrix.
///
/// Values built through this module's operations stay on the manifold; raw
/// matrices enter only through [`GroupElement::from_matrix`], which validates
/// the membership invariants of the group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupElement {
    descriptor: GroupDescriptor,
    mat: DMatrix<f64>,
}

/// Coordinates of a Lie-algebra element in the canonical basis.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraVector {
    descriptor: GroupDescriptor,
    coords: DVector<f64>,
}

// ---------------------------------------------------------------------------
// Algebra vectors
// ---------------------------------------------------------------------------

impl AlgebraVector {
    /// Wraps coordinates for the given group, checking the length.
    pub fn new(descriptor: GroupDescriptor, coords: DVector<f64>) -> Result<Self> {
        if coords.len() != descriptor.algebra_dim() {
            return Err(Error::DimensionMismatch {
                expected: descriptor.algebra_dim(),
                got: coords.len(),
            });
        }
        Ok(Self { descriptor, coords })
    }

    /// Coordinates from a slice; length must equal the algebra dimension.
    pub fn from_slice(descriptor: GroupDescriptor, coords: &[f64]) -> Result<Self> {
        Self::new(descriptor, DVector::from_column_slice(coords))
    }

    /// The zero element of the algebra.
    pub fn zero(descriptor: GroupDescriptor) -> Self {
        Self {
            descriptor,
            coords: DVector::zeros(descriptor.algebra_dim()),
        }
    }

    /// Group this algebra element belongs to.
    pub fn descriptor(&self) -> GroupDescriptor {
        self.descriptor
    }

    /// Coordinate vector.
    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    /// Euclidean norm of the coordinates.
    pub fn norm(&self) -> f64 {
        self.coords.norm()
    }

    /// Scales the coordinates by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            descriptor: self.descriptor,
            coords: &self.coords * s,
        }
    }

    /// The hat map: coordinates to the matrix form of the algebra element.
    ///
    /// SO(3) produces the skew matrix `xi^`, SE(3) the 4 × 4 block
    /// `[[xi^, u], [0, 0]]`, and T(N) the nilpotent pattern with the
    /// coordinates in the bottom row.
    pub fn hat(&self) -> DMatrix<f64> {
        let m = self.descriptor.matrix_size();
        let mut out = DMatrix::zeros(m, m);
        match self.descriptor.id {
            GroupId::So3 => fill_skew(&mut out, 0, self.coords.as_slice()),
            GroupId::Se3 => {
                fill_skew(&mut out, 0, &self.coords.as_slice()[0..3]);
                out[(0, 3)] = self.coords[3];
                out[(1, 3)] = self.coords[4];
                out[(2, 3)] = self.coords[5];
            }
            GroupId::Tn(n) => {
                for j in 0..n {
                    out[(n, j)] = self.coords[j];
                }
            }
        }
        out
    }

    /// The vee map: reads algebra coordinates back out of a matrix.
    ///
    /// Exact inverse of [`AlgebraVector::hat`] (the coordinates are read off
    /// bit-for-bit). Returns [`Error::NotInAlgebra`] if the matrix deviates
    /// from the algebra pattern by more than [`ALGEBRA_PATTERN_TOL`].
    pub fn vee(descriptor: GroupDescriptor, mat: &DMatrix<f64>) -> Result<Self> {
        let m = descriptor.matrix_size();
        if mat.nrows() != m || mat.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: mat.nrows().max(mat.ncols()),
            });
        }
        let coords = match descriptor.id {
            GroupId::So3 => read_skew(mat, 0)?,
            GroupId::Se3 => {
                let rot = read_skew(mat, 0)?;
                let mut defect: f64 = 0.0;
                for j in 0..4 {
                    defect = defect.max(mat[(3, j)].abs());
                }
                if defect > ALGEBRA_PATTERN_TOL {
                    return Err(Error::NotInAlgebra { defect });
                }
                DVector::from_iterator(
                    6,
                    rot.iter().copied().chain([mat[(0, 3)], mat[(1, 3)], mat[(2, 3)]]),
                )
            }
            GroupId::Tn(n) => {
                let mut defect: f64 = 0.0;
                for i in 0..n {
                    for j in 0..=n {
                        defect = defect.max(mat[(i, j)].abs());
                    }
                }
                defect = defect.max(mat[(n, n)].abs());
                if defect > ALGEBRA_PATTERN_TOL {
                    return Err(Error::NotInAlgebra { defect });
                }
                DVector::from_fn(n, |j, _| mat[(n, j)])
            }
        };
        Ok(Self { descriptor, coords })
    }

    /// The group exponential of this algebra element.
    ///
    /// Closed forms throughout; coefficients switch to Taylor expansions
    /// below [`SMALL_ANGLE`], and `exp(0)` is exactly the identity.
    pub fn exp(&self) -> GroupElement {
        let mat = match self.descriptor.id {
            GroupId::So3 => {
                let k = self.hat();
                let theta = self.coords.norm();
                let (a, b) = rodrigues_coefficients(theta);
                let mut out = DMatrix::identity(3, 3);
                out += &k * a;
                out += &k * &k * b;
                out
            }
            GroupId::Se3 => {
                let a = self.hat();
                let theta = self.coords.rows(0, 3).norm();
                let (c2, c3) = se3_exp_coefficients(theta);
                let a2 = &a * &a;
                let a3 = &a2 * &a;
                let mut out = DMatrix::identity(4, 4);
                out += &a;
                out += a2 * c2;
                out += a3 * c3;
                out
            }
            // The T(N) algebra is nilpotent of order two: exp(x^) = I + x^.
            GroupId::Tn(n) => DMatrix::identity(n + 1, n + 1) + self.hat(),
        };
        GroupElement {
            descriptor: self.descriptor,
            mat,
        }
    }

    /// The adjoint representation of the algebra, `ad_x`, an
    /// `algebra_dim × algebra_dim` matrix satisfying `ad_x y = [x, y]`.
    pub fn adjoint_ad(&self) -> DMatrix<f64> {
        let d = self.descriptor.algebra_dim();
        match self.descriptor.id {
            GroupId::So3 => {
                let mut out = DMatrix::zeros(3, 3);
                fill_skew(&mut out, 0, self.coords.as_slice());
                out
            }
            GroupId::Se3 => {
                // [[xi^, 0], [u^, xi^]] acting on (rotation, translation).
                let mut out = DMatrix::zeros(6, 6);
                let xi = &self.coords.as_slice()[0..3];
                let u = &self.coords.as_slice()[3..6];
                let mut xi_hat = DMatrix::zeros(3, 3);
                fill_skew(&mut xi_hat, 0, xi);
                let mut u_hat = DMatrix::zeros(3, 3);
                fill_skew(&mut u_hat, 0, u);
                out.view_mut((0, 0), (3, 3)).copy_from(&xi_hat);
                out.view_mut((3, 3), (3, 3)).copy_from(&xi_hat);
                out.view_mut((3, 0), (3, 3)).copy_from(&u_hat);
                out
            }
            // T(N) is abelian.
            GroupId::Tn(_) => DMatrix::zeros(d, d),
        }
    }
}

// ---------------------------------------------------------------------------
// Group elements
// ---------------------------------------------------------------------------

impl GroupElement {
    /// The identity element.
    pub fn identity(descriptor: GroupDescriptor) -> Self {
        let m = descriptor.matrix_size();
        Self {
            descriptor,
            mat: DMatrix::identity(m, m),
        }
    }

    /// Wraps a raw matrix, validating the membership invariants of the
    /// group: orthonormal rotation block with positive determinant for SO(3)
    /// and SE(3), an exact unit bottom row for SE(3), and the translation
    /// pattern for T(N). Violations beyond [`MEMBERSHIP_TOL`] are rejected.
    pub fn from_matrix(descriptor: GroupDescriptor, mat: DMatrix<f64>) -> Result<Self> {
        let m = descriptor.matrix_size();
        if mat.nrows() != m || mat.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: mat.nrows().max(mat.ncols()),
            });
        }
        let candidate = Self { descriptor, mat };
        let defect = candidate.membership_defect();
        if !(defect <= MEMBERSHIP_TOL) {
            return Err(Error::NotInGroup { defect });
        }
        if matches!(descriptor.id, GroupId::So3 | GroupId::Se3) {
            let r = candidate.rotation_block();
            if r.determinant() <= 0.0 {
                return Err(Error::NotInGroup { defect: f64::INFINITY });
            }
        }
        Ok(candidate)
    }

    /// Group this element belongs to.
    pub fn descriptor(&self) -> GroupDescriptor {
        self.descriptor
    }

    /// The underlying matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    /// How far the matrix is from satisfying the group's membership
    /// invariants: max-norm orthonormality residual of the rotation block
    /// plus structural residuals (bottom row, translation pattern).
    pub fn membership_defect(&self) -> f64 {
        match self.descriptor.id {
            GroupId::So3 => orthonormality_defect(&self.mat),
            GroupId::Se3 => {
                let r = self.rotation_block();
                let mut defect = orthonormality_defect(&r);
                defect = defect.max((self.mat[(3, 3)] - 1.0).abs());
                for j in 0..3 {
                    defect = defect.max(self.mat[(3, j)].abs());
                }
                defect
            }
            GroupId::Tn(n) => {
                let mut defect = (self.mat[(n, n)] - 1.0).abs();
                for i in 0..n {
                    for j in 0..n {
                        let target = if i == j { 1.0 } else { 0.0 };
                        defect = defect.max((self.mat[(i, j)] - target).abs());
                    }
                    defect = defect.max(self.mat[(i, n)].abs());
                }
                defect
            }
        }
    }

    /// Group composition `self · other`.
    ///
    /// After the product, orthonormality drift of the rotation block is
    /// measured; if it exceeds [`RENORMALIZE_THRESHOLD`] the block is
    /// re-projected onto the group through its polar factor, so chains of
    /// millions of products stay on the manifold.
    pub fn compose(&self, other: &GroupElement) -> GroupElement {
        assert_eq!(
            self.descriptor, other.descriptor,
            "cannot compose elements of different groups"
        );
        let mat = &self.mat * &other.mat;
        let mut out = GroupElement {
            descriptor: self.descriptor,
            mat,
        };
        out.renormalize_if_drifted();
        out
    }

    /// Group inverse, using the closed form of each group (transpose for
    /// rotations, block inverse for SE(3), negated translation for T(N)).
    pub fn inverse(&self) -> GroupElement {
        let mat = match self.descriptor.id {
            GroupId::So3 => self.mat.transpose(),
            GroupId::Se3 => {
                let r_t = self.rotation_block().transpose();
                let t = DVector::from_column_slice(&[
                    self.mat[(0, 3)],
                    self.mat[(1, 3)],
                    self.mat[(2, 3)],
                ]);
                let mt = -(&r_t) * t;
                let mut out = DMatrix::identity(4, 4);
                out.view_mut((0, 0), (3, 3)).copy_from(&r_t);
                out[(0, 3)] = mt[0];
                out[(1, 3)] = mt[1];
                out[(2, 3)] = mt[2];
                out
            }
            GroupId::Tn(n) => {
                let mut out = DMatrix::identity(n + 1, n + 1);
                for j in 0..n {
                    out[(n, j)] = -self.mat[(n, j)];
                }
                out
            }
        };
        GroupElement {
            descriptor: self.descriptor,
            mat,
        }
    }

    /// The principal logarithm as algebra coordinates.
    ///
    /// Returns [`Error::LogBranchCut`] when the rotation angle is within
    /// [`LOG_BRANCH_GUARD`] of π, where the principal branch is
    /// ill-conditioned.
    pub fn log(&self) -> Result<AlgebraVector> {
        match self.descriptor.id {
            GroupId::So3 => {
                let xi = so3_log(&self.mat)?;
                AlgebraVector::new(self.descriptor, xi)
            }
            GroupId::Se3 => {
                let r = self.rotation_block();
                let xi = so3_log(&r)?;
                let theta = xi.norm();
                let mut xi_hat = DMatrix::zeros(3, 3);
                fill_skew(&mut xi_hat, 0, xi.as_slice());
                let c = se3_log_coefficient(theta);
                let v_inv = DMatrix::identity(3, 3) - &xi_hat * 0.5 + &xi_hat * &xi_hat * c;
                let t = DVector::from_column_slice(&[
                    self.mat[(0, 3)],
                    self.mat[(1, 3)],
                    self.mat[(2, 3)],
                ]);
                let u = v_inv * t;
                AlgebraVector::new(
                    self.descriptor,
                    DVector::from_iterator(6, xi.iter().copied().chain(u.iter().copied())),
                )
            }
            // T(N): the group is I + x^ with x^ nilpotent, so log is exact.
            GroupId::Tn(n) => AlgebraVector::new(
                self.descriptor,
                DVector::from_fn(n, |j, _| self.mat[(n, j)]),
            ),
        }
    }

    /// The adjoint representation `Ad_g`, an `algebra_dim × algebra_dim`
    /// matrix satisfying `g · exp(x) · g^{-1} = exp(Ad_g x)`.
    pub fn adjoint(&self) -> DMatrix<f64> {
        match self.descriptor.id {
            GroupId::So3 => self.mat.clone(),
            GroupId::Se3 => {
                // [[R, 0], [t^ R, R]] on (rotation, translation) coordinates.
                let r = self.rotation_block();
                let mut t_hat = DMatrix::zeros(3, 3);
                fill_skew(
                    &mut t_hat,
                    0,
                    &[self.mat[(0, 3)], self.mat[(1, 3)], self.mat[(2, 3)]],
                );
                let mut out = DMatrix::zeros(6, 6);
                out.view_mut((0, 0), (3, 3)).copy_from(&r);
                out.view_mut((3, 3), (3, 3)).copy_from(&r);
                out.view_mut((3, 0), (3, 3)).copy_from(&(&t_hat * &r));
                out
            }
            // T(N) is abelian: conjugation is trivial.
            GroupId::Tn(n) => DMatrix::identity(n, n),
        }
    }

    /// Applies the element to a point: plain matrix–vector product. The
    /// vector length must equal [`GroupDescriptor::matrix_size`] (use
    /// homogeneous coordinates for SE(3) and T(N)).
    pub fn act_on(&self, point: &DVector<f64>) -> DVector<f64> {
        assert_eq!(
            point.len(),
            self.descriptor.matrix_size(),
            "point dimension does not match the group's matrix size"
        );
        &self.mat * point
    }

    /// Rotation angle of an SO(3) element, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        assert_eq!(self.descriptor.id, GroupId::So3, "rotation_angle requires SO(3)");
        let cos = ((self.mat.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        cos.acos()
    }

    /// The translation coordinates of a T(N) element.
    pub fn translation(&self) -> DVector<f64> {
        match self.descriptor.id {
            GroupId::Tn(n) => DVector::from_fn(n, |j, _| self.mat[(n, j)]),
            _ => panic!("translation() requires a T(N) element"),
        }
    }

    fn rotation_block(&self) -> DMatrix<f64> {
        self.mat.view((0, 0), (3, 3)).into_owned()
    }

    fn renormalize_if_drifted(&mut self) {
        match self.descriptor.id {
            GroupId::So3 => {
                if orthonormality_defect(&self.mat) > RENORMALIZE_THRESHOLD {
                    let r = polar_rotation(&self.mat);
                    self.mat.copy_from(&r);
                }
            }
            GroupId::Se3 => {
                let r = self.rotation_block();
                if orthonormality_defect(&r) > RENORMALIZE_THRESHOLD {
                    let fixed = polar_rotation(&r);
                    self.mat.view_mut((0, 0), (3, 3)).copy_from(&fixed);
                }
                // The bottom row is (0, 0, 0, 1) exactly for exact inputs;
                // re-impose it so drift cannot accumulate there either.
                self.mat[(3, 0)] = 0.0;
                self.mat[(3, 1)] = 0.0;
                self.mat[(3, 2)] = 0.0;
                self.mat[(3, 3)] = 1.0;
            }
            GroupId::Tn(n) => {
                // Products of exact patterns are exact; re-impose the
                // pattern anyway so the invariant is unconditional.
                for i in 0..n {
                    for j in 0..n {
                        self.mat[(i, j)] = if i == j { 1.0 } else { 0.0 };
                    }
                    self.mat[(i, n)] = 0.0;
                }
                self.mat[(n, n)] = 1.0;
            }
        }
    }
}

/// Embeds a translation vector `x ∈ R^N` as a T(N) group element
/// `[[I_N, 0], [x^T, 1]]`. Composition of embeddings adds the vectors
/// exactly, and `exp` of the corresponding algebra element equals the
/// embedding.
pub fn embed_translation(x: &DVector<f64>) -> GroupElement {
    let n = x.len();
    let mut mat = DMatrix::identity(n + 1, n + 1);
    for j in 0..n {
        mat[(n, j)] = x[j];
    }
    GroupElement {
        descriptor: GroupDescriptor::tn(n),
        mat,
    }
}

// ---------------------------------------------------------------------------
// Shared numerics
// ---------------------------------------------------------------------------

/// Writes the skew matrix of `v` into the 3 × 3 block at `(offset, offset)`.
fn fill_skew(out: &mut DMatrix<f64>, offset: usize, v: &[f64]) {
    out[(offset, offset + 1)] = -v[2];
    out[(offset, offset + 2)] = v[1];
    out[(offset + 1, offset)] = v[2];
    out[(offset + 1, offset + 2)] = -v[0];
    out[(offset + 2, offset)] = -v[1];
    out[(offset + 2, offset + 1)] = v[0];
}

/// Reads skew coordinates from the 3 × 3 block at `(offset, offset)`,
/// validating skew-symmetry within [`ALGEBRA_PATTERN_TOL`].
fn read_skew(mat: &DMatrix<f64>, offset: usize) -> Result<DVector<f64>> {
    let mut defect: f64 = 0.0;
    for i in 0..3 {
        defect = defect.max(mat[(offset + i, offset + i)].abs());
        for j in (i + 1)..3 {
            defect = defect.max((mat[(offset + i, offset + j)] + mat[(offset + j, offset + i)]).abs());
        }
    }
    if defect > ALGEBRA_PATTERN_TOL {
        return Err(Error::NotInAlgebra { defect });
    }
    Ok(DVector::from_column_slice(&[
        mat[(offset + 2, offset + 1)],
        mat[(offset, offset + 2)],
        mat[(offset + 1, offset)],
    ]))
}

/// `(sin θ / θ, (1 − cos θ)/θ²)` with fourth-order Taylor below
/// [`SMALL_ANGLE`].
fn rodrigues_coefficients(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
        )
    } else {
        ((theta.sin()) / theta, (1.0 - theta.cos()) / (theta * theta))
    }
}

/// `((1 − cos θ)/θ², (θ − sin θ)/θ³)` with fourth-order Taylor below
/// [`SMALL_ANGLE`].
fn se3_exp_coefficients(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// Coefficient of `xi^²` in the inverse left Jacobian used by the SE(3)
/// logarithm: `(1 − a/(2b))/θ²` with `a = sin θ/θ`, `b = (1 − cos θ)/θ²`.
///
/// The numerator cancels to `θ²/12` as `θ → 0`, so the closed form loses
/// roughly `1e-16/θ²` relative accuracy; the Taylor branch extends to 1e-2,
/// where its own truncation error (`~θ⁶/1.2e6`) is still below 1e-18.
fn se3_log_coefficient(theta: f64) -> f64 {
    if theta < 1e-2 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        // a/(2b) = (θ/2)·cot(θ/2), written with half angles to avoid
        // forming 1 − cos θ.
        let half = theta / 2.0;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    }
}

/// Principal rotation-vector logarithm of a 3 × 3 rotation matrix.
fn so3_log(r: &DMatrix<f64>) -> Result<DVector<f64>> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta >= std::f64::consts::PI - LOG_BRANCH_GUARD {
        return Err(Error::LogBranchCut { angle: theta });
    }
    // vee of the antisymmetric part is sin(θ)·axis; rescale to θ·axis.
    let anti = DVector::from_column_slice(&[
        (r[(2, 1)] - r[(1, 2)]) / 2.0,
        (r[(0, 2)] - r[(2, 0)]) / 2.0,
        (r[(1, 0)] - r[(0, 1)]) / 2.0,
    ]);
    let scale = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0
    } else {
        theta / theta.sin()
    };
    Ok(anti * scale)
}

/// Max-norm of `RᵀR − I`.
fn orthonormality_defect(r: &DMatrix<f64>) -> f64 {
    let gram = r.transpose() * r;
    let mut defect: f64 = 0.0;
    for i in 0..r.nrows() {
        for j in 0..r.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            defect = defect.max((gram[(i, j)] - target).abs());
        }
    }
    defect
}

/// Nearest rotation in the Frobenius sense: the polar factor `U Vᵀ` of the
/// SVD, with the sign of the last column of `U` flipped if needed to keep
/// the determinant positive.
fn polar_rotation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("SVD of a 3x3 matrix always yields U");
    let v_t = svd.v_t.expect("SVD of a 3x3 matrix always yields V^T");
    let mut r = &u * &v_t;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        for i in 0..u_fixed.nrows() {
            let last = u_fixed.ncols() - 1;
            u_fixed[(i, last)] = -u_fixed[(i, last)];
        }
        r = u_fixed * v_t;
    }
    r
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

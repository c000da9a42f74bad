//! Unit planar dual quaternions and the differential geometry of their
//! manifold `𝕄 = S¹ × ℝ²`: composition, conjugation, point action,
//! tangent-plane projection, and logarithm/exponential maps with
//! parallel transport.

use nalgebra::{Matrix2, Matrix4, Matrix4x3, SMatrix, Vector2, Vector3, Vector4};
use thiserror::Error;

/// Errors from manifold constructors and maps.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    /// An input component was NaN or infinite.
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    /// A vector handed to `exp_at` does not lie in the tangent plane at
    /// its base point.
    #[error("vector is not in the tangent plane (residual {residual:.3e})")]
    NotInTangentPlane { residual: f64 },
    /// The real part of a candidate pose vector is too far from unit norm
    /// to be normalized meaningfully.
    #[error("real part norm {norm:.3e} is not close to 1")]
    NotUnit { norm: f64 },
}

/// sin(u)/u with the removable singularity filled in.
///
/// Below |u| = 1e-4 a 5-term series is used so the value stays smooth
/// where the direct quotient would cancel.
pub(crate) fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        let u2 = u * u;
        1.0 - u2 / 6.0 + u2 * u2 / 120.0 - u2 * u2 * u2 / 5040.0
            + u2 * u2 * u2 * u2 / 362_880.0
    } else {
        u.sin() / u
    }
}

/// Derivative of [`sinc`].
pub(crate) fn dsinc(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        let u2 = u * u;
        -u / 3.0 + u * u2 / 30.0 - u * u2 * u2 / 840.0 + u * u2 * u2 * u2 / 45_360.0
    } else {
        (u.cos() - u.sin() / u) / u
    }
}

/// Raw dual-quaternion product over the basis {1, k, i, j} with ε² = 0.
///
/// No normalization or sign handling; this is the bilinear algebra
/// product both product matrices expand to.
pub(crate) fn mul_raw(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(
        a.x * b.x - a.y * b.y,
        a.x * b.y + a.y * b.x,
        a.x * b.z - a.y * b.w + a.z * b.x + a.w * b.y,
        a.x * b.w + a.y * b.z + a.w * b.x - a.z * b.y,
    )
}

/// Classical dual-quaternion conjugate: negate everything but the scalar.
pub(crate) fn conj_raw(a: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(a.x, -a.y, -a.z, -a.w)
}

/// +1 if the vector already has canonical sign, -1 if it must be flipped.
pub(crate) fn canonical_sign(q: &Vector4<f64>) -> f64 {
    if q.x < 0.0 || (q.x == 0.0 && q.y < 0.0) {
        -1.0
    } else {
        1.0
    }
}

/// Logarithm map at identity applied to a raw 4-vector.
///
/// Works on slightly off-manifold points too: the half angle comes from
/// atan2, which is insensitive to the real-part radius.
pub(crate) fn log_raw(q: &Vector4<f64>) -> Vector3<f64> {
    let h = q.y.atan2(q.x);
    let g = sinc(h);
    Vector3::new(q.y / g, q.z / g, q.w / g)
}

/// Ambient 3x4 Jacobian of [`log_raw`] at `q`.
pub(crate) fn dlog_raw(q: &Vector4<f64>) -> SMatrix<f64, 3, 4> {
    let h = q.y.atan2(q.x);
    let rho = q.x * q.x + q.y * q.y;
    let g = sinc(h);
    let k = dsinc(h) / (g * g * rho);
    let mut m = SMatrix::<f64, 3, 4>::zeros();
    m[(0, 1)] = 1.0 / g;
    m[(1, 2)] = 1.0 / g;
    m[(2, 3)] = 1.0 / g;
    // rank-one term from the half angle entering through 1/sinc
    let col = Vector3::new(q.y, q.z, q.w);
    let row = Vector4::new(q.y, -q.x, 0.0, 0.0);
    m + k * col * row.transpose()
}

/// Left product matrix of a raw 4-vector: `mul_raw(a, b) = left_mat(a) * b`.
pub(crate) fn left_mat(a: &Vector4<f64>) -> Matrix4<f64> {
    Matrix4::new(
        a.x, -a.y, 0.0, 0.0, //
        a.y, a.x, 0.0, 0.0, //
        a.z, a.w, a.x, -a.y, //
        a.w, -a.z, a.y, a.x,
    )
}

/// Right product matrix of a raw 4-vector: `mul_raw(a, b) = right_mat(b) * a`.
pub(crate) fn right_mat(b: &Vector4<f64>) -> Matrix4<f64> {
    Matrix4::new(
        b.x, -b.y, 0.0, 0.0, //
        b.y, b.x, 0.0, 0.0, //
        b.z, -b.w, b.x, b.y, //
        b.w, b.z, -b.y, b.x,
    )
}

/// Unit planar dual quaternion `[x0, x1, x2, x3]` over the basis {1, k, i, j}.
///
/// The real part `[x0, x1] = [cos(θ/2), sin(θ/2)]` lies on the unit
/// circle; the dual part `[x2, x3] = ½ t ⊗ x_r` encodes the translation.
/// `x` and `-x` represent the same rigid motion; `canonicalized` picks
/// the representative with `x0 > 0` (or `x1 > 0` when `x0 = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarDualQuat {
    q: Vector4<f64>,
}

/// Tangent coordinates at the identity: half angle plus scaled moment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tangent(pub Vector3<f64>);

/// Ambient 4-vector lying in the tangent plane at some base pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbientTangent(pub Vector4<f64>);

impl Tangent {
    pub fn new(v1: f64, v2: f64, v3: f64) -> Self {
        Tangent(Vector3::new(v1, v2, v3))
    }

    pub fn zero() -> Self {
        Tangent(Vector3::zeros())
    }

    /// Half of the rotation angle this tangent vector encodes.
    pub fn half_angle(&self) -> f64 {
        self.0.x
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

impl AmbientTangent {
    pub fn zero() -> Self {
        AmbientTangent(Vector4::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

impl Default for PlanarDualQuat {
    fn default() -> Self {
        Self::identity()
    }
}

impl PlanarDualQuat {
    /// The identity pose `[1, 0, 0, 0]`.
    pub fn identity() -> Self {
        PlanarDualQuat {
            q: Vector4::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    /// Builds the pose rotating by `theta` and translating by `translation`.
    pub fn from_pose(theta: f64, translation: Vector2<f64>) -> Result<Self, ManifoldError> {
        if !theta.is_finite() {
            return Err(ManifoldError::NonFinite("theta"));
        }
        if !(translation.x.is_finite() && translation.y.is_finite()) {
            return Err(ManifoldError::NonFinite("translation"));
        }
        let (s, c) = (theta / 2.0).sin_cos();
        let x2 = 0.5 * (c * translation.x + s * translation.y);
        let x3 = 0.5 * (-s * translation.x + c * translation.y);
        Ok(PlanarDualQuat {
            q: Vector4::new(c, s, x2, x3),
        }
        .canonicalized())
    }

    /// Wraps a raw 4-vector, normalizing the real part.
    ///
    /// The sign is kept as given so both representatives of the double
    /// cover can be constructed.
    pub fn from_vector(v: Vector4<f64>) -> Result<Self, ManifoldError> {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(ManifoldError::NonFinite("components"));
        }
        let norm = (v.x * v.x + v.y * v.y).sqrt();
        if !(0.5..=2.0).contains(&norm) {
            return Err(ManifoldError::NotUnit { norm });
        }
        Ok(PlanarDualQuat { q: v / norm })
    }

    pub(crate) fn from_raw_unchecked(v: Vector4<f64>) -> Self {
        PlanarDualQuat { q: v }
    }

    /// The underlying 4-vector.
    pub fn coords(&self) -> Vector4<f64> {
        self.q
    }

    /// Recovers `(theta, translation)` with `theta ∈ (-π, π]`.
    ///
    /// Both representatives of the double cover map to the same output.
    pub fn to_pose(&self) -> (f64, Vector2<f64>) {
        let q = self.canonicalized().q;
        let theta = 2.0 * q.y.atan2(q.x);
        let t = 2.0
            * Vector2::new(
                q.x * q.z - q.y * q.w, //
                q.y * q.z + q.x * q.w,
            );
        (theta, t)
    }

    /// Rotation angle in `(-π, π]`.
    pub fn theta(&self) -> f64 {
        self.to_pose().0
    }

    /// Translation component.
    pub fn translation(&self) -> Vector2<f64> {
        self.to_pose().1
    }

    /// Left product matrix: `compose(x, y)` as `left_matrix(x) * y`.
    pub fn left_matrix(&self) -> Matrix4<f64> {
        left_mat(&self.q)
    }

    /// Right product matrix: `compose(x, y)` as `right_matrix(y) * x`.
    pub fn right_matrix(&self) -> Matrix4<f64> {
        right_mat(&self.q)
    }

    /// Rigid-motion composition; the result is normalized and canonical.
    pub fn compose(&self, other: &Self) -> Self {
        PlanarDualQuat {
            q: mul_raw(&self.q, &other.q),
        }
        .normalized()
        .canonicalized()
    }

    /// Classical conjugate `diag(1, -1, -1, -1) · x`.
    pub fn conjugate(&self) -> Self {
        PlanarDualQuat {
            q: conj_raw(&self.q),
        }
    }

    /// Group inverse; for unit poses this equals the conjugate.
    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    /// Applies the rigid motion to a point: `v' = R(θ) v + t`.
    ///
    /// The sandwich uses the combined quaternion-and-dual-number
    /// conjugate `[x0, -x1, x2, x3]`; conjugating only the quaternion
    /// part would cancel the translation.
    pub fn transform_point(&self, v: Vector2<f64>) -> Vector2<f64> {
        let v_emb = Vector4::new(1.0, 0.0, v.x, v.y);
        let x_tilde = Vector4::new(self.q.x, -self.q.y, self.q.z, self.q.w);
        let w = mul_raw(&self.q, &mul_raw(&v_emb, &x_tilde));
        Vector2::new(w.z, w.w)
    }

    /// Logarithm map at identity: `(1/γ) [x1, x2, x3]` with `γ = sinc(θ/2)`.
    ///
    /// The argument is canonicalized first, fixing `θ/2 ∈ (-π/2, π/2]`
    /// where `γ > 0`.
    pub fn log_identity(&self) -> Tangent {
        Tangent(log_raw(&self.canonicalized().q))
    }

    /// Exponential map at identity: `[cos(v1), γ v]` with `γ = sinc(v1)`.
    pub fn exp_identity(v: Tangent) -> Self {
        let g = sinc(v.0.x);
        PlanarDualQuat {
            q: Vector4::new(v.0.x.cos(), g * v.0.x, g * v.0.y, g * v.0.z),
        }
        .normalized()
    }

    /// Logarithm map at `self`, parallel-transported from identity:
    /// `Log_x(y) = x ⊞ [0, Log_𝟙(x⁻¹ ⊞ y)]`.
    pub fn log_at(&self, y: &Self) -> AmbientTangent {
        let rel = mul_raw(&conj_raw(&self.q), &y.q);
        let rel = canonical_sign(&rel) * rel;
        let l = log_raw(&rel);
        let padded = Vector4::new(0.0, l.x, l.y, l.z);
        AmbientTangent(left_mat(&self.q) * padded)
    }

    /// Exponential map at `self`: `Exp_x(v) = x ⊞ Exp_𝟙((x⁻¹ ⊞ v)_{1:3})`.
    ///
    /// `v` must lie in the tangent plane at `self` within 1e-9.
    pub fn exp_at(&self, v: &AmbientTangent) -> Result<Self, ManifoldError> {
        let residual = (self.tangent_projection() * v.0 - v.0).norm();
        if residual > 1e-9 * (1.0 + v.0.norm()) {
            return Err(ManifoldError::NotInTangentPlane { residual });
        }
        let w = mul_raw(&conj_raw(&self.q), &v.0);
        Ok(self.compose(&Self::exp_identity(Tangent(Vector3::new(w.y, w.z, w.w)))))
    }

    /// Orthogonal projection onto the tangent plane at `self`:
    /// `P_x = blockdiag(I - x_r x_rᵀ, I)`.
    pub fn tangent_projection(&self) -> Matrix4<f64> {
        let r = Vector2::new(self.q.x, self.q.y);
        let top = Matrix2::identity() - r * r.transpose();
        let mut p = Matrix4::identity();
        p.fixed_view_mut::<2, 2>(0, 0).copy_from(&top);
        p
    }

    /// Orthonormal basis of the tangent plane at `self`, as columns.
    ///
    /// Column 1 is `[-x1, x0, 0, 0]`; columns 2-3 are the ambient dual
    /// directions. `B Bᵀ` reproduces the projection matrix.
    pub fn tangent_basis(&self) -> Matrix4x3<f64> {
        let mut b = Matrix4x3::zeros();
        b[(0, 0)] = -self.q.y;
        b[(1, 0)] = self.q.x;
        b[(2, 1)] = 1.0;
        b[(3, 2)] = 1.0;
        b
    }

    /// Resolves the double cover: flips the sign so `x0 > 0`, or `x1 > 0`
    /// when `x0 = 0`.
    pub fn canonicalized(&self) -> Self {
        PlanarDualQuat {
            q: canonical_sign(&self.q) * self.q,
        }
    }

    /// True if this representative already has canonical sign.
    pub fn is_canonical(&self) -> bool {
        canonical_sign(&self.q) == 1.0
    }

    /// Rescales so the real part has exactly unit norm.
    pub fn normalized(&self) -> Self {
        let norm = (self.q.x * self.q.x + self.q.y * self.q.y).sqrt();
        PlanarDualQuat { q: self.q / norm }
    }

    /// The other representative of the double cover.
    pub fn negated(&self) -> Self {
        PlanarDualQuat { q: -self.q }
    }

    /// Deviation of the real part from unit norm.
    pub fn unit_deviation(&self) -> f64 {
        ((self.q.x * self.q.x + self.q.y * self.q.y) - 1.0).abs()
    }
}

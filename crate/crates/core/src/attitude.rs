//! Quaternion and rotation algebra.
//!
//! Quaternions are stored as `(q_v, q_o)`: vector part first, scalar part
//! last. The product `q1 * q2` is defined as `(q1_o I + Ω(q1_v)) q2` with
//!
//! ```text
//! Ω(v) = | -[v×]  v |
//!        | -vᵀ    0 |
//! ```
//!
//! and the attitude matrix is `A(q) = (2q_o² − 1) I + 2 q_o [q_v×] + 2 q_v q_vᵀ`.
//! With these two definitions the composition law reads
//! `A(q1 * q2) = A(q2) A(q1)`; the product is the reversed Hamilton product
//! (the convention sometimes called JPL ordering), while `A(q)` itself is the
//! Hamilton active rotation matrix. A 90° turn about `z`, `q = (0, 0, √½, √½)`,
//! has `A(q) e_x = e_y`, and the sandwich `q ⊗ v̲ ⊗ q*` computes `A(q)ᵀ v`,
//! so the same quaternion takes `e_x` to `−e_y` through [`Quaternion::rotate`].

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use crate::error::{Error, Result};

/// Tolerance on `|‖q‖ − 1|` accepted by [`Quaternion::to_rotation_matrix`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Magnitude of `q_v` beyond which the small-angle rotation is flagged.
pub const SMALL_ANGLE_LIMIT: f64 = 0.1;

/// Attitude quaternion `q = [q_vᵀ q_o]ᵀ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    /// Vector part.
    pub v: Vector3<f64>,
    /// Scalar part.
    pub w: f64,
}

impl Quaternion {
    /// Builds a quaternion from raw components without normalizing.
    pub fn new(v: Vector3<f64>, w: f64) -> Self {
        Self { v, w }
    }

    /// Builds a quaternion from `(x, y, z, w)` and divides by its norm.
    pub fn normalized(v: Vector3<f64>, w: f64) -> Result<Self> {
        let q = Self { v, w };
        let n = q.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "cannot normalize quaternion with norm {n}"
            )));
        }
        Ok(q.scaled(1.0 / n))
    }

    pub fn identity() -> Self {
        Self {
            v: Vector3::zeros(),
            w: 1.0,
        }
    }

    /// Packs `[x, y, z, w]`.
    pub fn from_vector4(c: &Vector4<f64>) -> Self {
        Self {
            v: Vector3::new(c[0], c[1], c[2]),
            w: c[3],
        }
    }

    pub fn to_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.v.x, self.v.y, self.v.z, self.w)
    }

    /// Rotation by `‖φ‖` radians about `φ/‖φ‖`, in the sense of `A(q)`.
    pub fn from_rotation_vector(phi: &Vector3<f64>) -> Self {
        let angle = phi.norm();
        if angle < 1e-300 {
            return Self::identity();
        }
        let half = 0.5 * angle;
        Self {
            v: phi * (half.sin() / angle),
            w: half.cos(),
        }
    }

    /// Small error quaternion rebuilt from its vector part, `q_o = √(1 − ‖q_v‖²)`.
    pub fn from_vector_part(v: &Vector3<f64>) -> Self {
        let s = v.norm_squared();
        if s >= 1.0 {
            // Out of the unit ball: keep the direction, drop the scalar part.
            return Self {
                v: v / s.sqrt(),
                w: 0.0,
            };
        }
        Self {
            v: *v,
            w: (1.0 - s).sqrt(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.v.norm_squared() + self.w * self.w).sqrt()
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            v: self.v * s,
            w: self.w * s,
        }
    }

    /// Divides by the norm; a zero quaternion collapses to identity.
    pub fn renormalize(&self) -> Self {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Self::identity();
        }
        self.scaled(1.0 / n)
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }

    /// Flips sign so the scalar part is non-negative.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            self.negated()
        } else {
            *self
        }
    }

    /// `q*`: vector part negated.
    pub fn conjugate(&self) -> Self {
        Self {
            v: -self.v,
            w: self.w,
        }
    }

    /// `A(q)`, rejecting inputs more than [`UNIT_TOLERANCE`] away from unit norm.
    pub fn to_rotation_matrix(&self) -> Result<Matrix3<f64>> {
        if !self.is_unit(UNIT_TOLERANCE) {
            return Err(Error::InvalidArgument(format!(
                "quaternion norm {} is not unit",
                self.norm()
            )));
        }
        Ok(self.dcm())
    }

    /// `A(q)` evaluated term by term with no norm check.
    pub(crate) fn dcm(&self) -> Matrix3<f64> {
        let qo = self.w;
        Matrix3::identity() * (2.0 * qo * qo - 1.0)
            + skew(&self.v) * (2.0 * qo)
            + self.v * self.v.transpose() * 2.0
    }

    /// `q ⊗ v̲ ⊗ q*`, returning the vector part.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotate_embedded(v).v
    }

    /// Full 4-vector result of the sandwich product (scalar part is zero).
    pub fn rotate_embedded(&self, v: &Vector3<f64>) -> Quaternion {
        *self * Quaternion::new(*v, 0.0) * self.conjugate()
    }

    /// Hemisphere-aligns `self` to `reference` (non-negative dot product).
    pub fn aligned_to(&self, reference: &Quaternion) -> Self {
        if self.to_vector4().dot(&reference.to_vector4()) < 0.0 {
            self.negated()
        } else {
            *self
        }
    }

    /// Rotation angle of the relative rotation between two quaternions.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        let e = error_quat(self, other);
        2.0 * e.v.norm().atan2(e.w)
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Quaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}; {}]", self.v.x, self.v.y, self.v.z, self.w)
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// `q1 ⊗ q2 = (q1_o I + Ω(q1_v)) q2`.
    fn mul(self, rhs: Quaternion) -> Quaternion {
        Quaternion {
            v: rhs.v * self.w + self.v * rhs.w - self.v.cross(&rhs.v),
            w: self.w * rhs.w - self.v.dot(&rhs.v),
        }
    }
}

/// Matrix form of the product operator, `q ⊗ = q_o I + Ω(q_v)`.
pub fn product_matrix(q: &Quaternion) -> nalgebra::Matrix4<f64> {
    let mut m = nalgebra::Matrix4::identity() * q.w;
    let s = skew(&q.v);
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] -= s[(i, j)];
        }
        m[(i, 3)] += q.v[i];
        m[(3, i)] -= q.v[i];
    }
    m
}

/// `Ω(ω)` acting on a 4-vector quaternion.
pub fn omega_matrix(w: &Vector3<f64>) -> nalgebra::Matrix4<f64> {
    product_matrix(&Quaternion::new(*w, 0.0))
}

/// Cross-product matrix: `skew(v) u = v × u`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Multiplicative error `q̃ = q ⊗ q_ref*`, sign-flipped to `q̃_o ≥ 0`.
pub fn error_quat(q: &Quaternion, q_ref: &Quaternion) -> Quaternion {
    (*q * q_ref.conjugate()).canonical()
}

/// First-order attitude matrix of a small error quaternion, `I + 2[q_v×]`.
pub fn small_angle_rot(qv: &Vector3<f64>) -> Matrix3<f64> {
    if qv.norm() > SMALL_ANGLE_LIMIT {
        log::warn!(
            "small-angle rotation evaluated at |q_v| = {:.3}; approximation degraded",
            qv.norm()
        );
    }
    Matrix3::identity() + skew(qv) * 2.0
}

/// `Λ(q̄) = [q̄_o I − [q̄_v×] | −q̄_v]`, so `Λ(q̄) q'` is the vector part of `q' ⊗ q̄*`.
pub fn lambda_matrix(q_ref: &Quaternion) -> Matrix3x4<f64> {
    let mut m = Matrix3x4::zeros();
    let block = Matrix3::identity() * q_ref.w - skew(&q_ref.v);
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&block);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-q_ref.v));
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit_quat() -> impl Strategy<Value = Quaternion> {
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
        )
            .prop_filter("non-degenerate", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-3)
            .prop_map(|(a, b, c, d)| Quaternion::normalized(Vector3::new(a, b, c), d).unwrap())
    }

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    #[test]
    fn identity_rotation() {
        assert_eq!(
            Quaternion::identity().to_rotation_matrix().unwrap(),
            Matrix3::identity()
        );
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = 0.5f64.sqrt();
        let a = Quaternion::new(Vector3::new(0.0, 0.0, h), h)
            .to_rotation_matrix()
            .unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(a, expected, epsilon = 1e-15);
    }

    #[test]
    fn half_turn_about_x() {
        let a = Quaternion::new(Vector3::x(), 0.0).to_rotation_matrix().unwrap();
        assert_eq!(a, Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)));
    }

    #[test]
    fn non_unit_rejected() {
        let q = Quaternion::new(Vector3::new(0.0, 0.0, 0.0), 1.01);
        assert!(matches!(q.to_rotation_matrix(), Err(Error::InvalidArgument(_))));
        let ok = Quaternion::new(Vector3::new(0.0, 0.0, 0.0), 1.0 + 5e-7);
        assert!(ok.to_rotation_matrix().is_ok());
    }

    #[test]
    fn conjugate_cases() {
        assert_eq!(Quaternion::identity().conjugate(), Quaternion::identity());
        let q = Quaternion::new(Vector3::x(), 0.0);
        assert_eq!(q.conjugate(), Quaternion::new(-Vector3::x(), 0.0));
    }

    #[test]
    fn rotate_quarter_turn_convention() {
        // Pinned by the composition law: the sandwich applies A(q)ᵀ.
        let h = 0.5f64.sqrt();
        let q = Quaternion::new(Vector3::new(0.0, 0.0, h), h);
        let r = q.rotate_embedded(&Vector3::x());
        assert_abs_diff_eq!(r.v, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(r.w, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn small_error_about_x() {
        let q_ref = Quaternion::normalized(Vector3::new(0.1, -0.3, 0.2), 0.9).unwrap();
        let dq = Quaternion::from_rotation_vector(&Vector3::new(1e-4, 0.0, 0.0));
        let q = dq * q_ref;
        let e = error_quat(&q, &q_ref);
        assert_abs_diff_eq!(e.v, Vector3::new(5e-5, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn small_angle_matches_exact() {
        assert_eq!(small_angle_rot(&Vector3::zeros()), Matrix3::identity());
        let qv = Vector3::new(1e-3, 0.0, 0.0);
        let exact = Quaternion::from_vector_part(&qv).dcm();
        let approx = small_angle_rot(&qv);
        assert!((exact - approx).amax() <= 2e-6);
        let rz = small_angle_rot(&Vector3::new(0.0, 0.0, 1e-3));
        assert_abs_diff_eq!(rz[(0, 1)], -2e-3, epsilon = 1e-18);
    }

    #[test]
    fn lambda_identity_and_self() {
        let q = Quaternion::normalized(Vector3::new(0.3, 0.1, -0.4), 0.7).unwrap();
        let l = lambda_matrix(&Quaternion::identity());
        assert_eq!(l * q.to_vector4(), q.v);
        let self_err = lambda_matrix(&q) * q.to_vector4();
        assert_abs_diff_eq!(self_err, Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn skew_cases() {
        assert_eq!(skew(&Vector3::z()) * Vector3::x(), Vector3::y());
        let v = Vector3::new(1.0, -2.0, 3.0);
        assert_eq!(skew(&v).transpose(), -skew(&v));
        assert_eq!(skew(&v) * v, Vector3::zeros());
    }

    #[test]
    fn product_matrix_matches_operator() {
        let a = Quaternion::normalized(Vector3::new(0.2, 0.5, -0.1), 0.4).unwrap();
        let b = Quaternion::normalized(Vector3::new(-0.7, 0.1, 0.3), 0.2).unwrap();
        let via_matrix = product_matrix(&a) * b.to_vector4();
        assert_abs_diff_eq!(via_matrix, (a * b).to_vector4(), epsilon = 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn composition_law(q1 in unit_quat(), q2 in unit_quat()) {
            let lhs = (q1 * q2).dcm();
            let rhs = q2.dcm() * q1.dcm();
            prop_assert!((lhs - rhs).amax() <= 1e-10);
        }

        #[test]
        fn product_with_conjugate_is_identity(q in unit_quat()) {
            let p = q * q.conjugate();
            prop_assert!((p.v.norm()) <= 1e-15 && (p.w - 1.0).abs() <= 1e-15);
            prop_assert_eq!(q * Quaternion::identity(), q);
            prop_assert_eq!(q.conjugate().conjugate(), q);
        }

        #[test]
        fn rotation_matrix_orthonormal(q in unit_quat()) {
            let a = q.to_rotation_matrix().unwrap();
            prop_assert!((a.transpose() * a - Matrix3::identity()).amax() <= 1e-10);
            prop_assert!((a.determinant() - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn error_round_trip(q in unit_quat(), q_ref in unit_quat()) {
            let e = error_quat(&q, &q_ref);
            prop_assert!(e.w >= 0.0);
            let back = (e * q_ref).aligned_to(&q);
            prop_assert!((back.to_vector4() - q.to_vector4()).amax() <= 1e-12);
        }

        #[test]
        fn sandwich_agrees_with_matrix(q in unit_quat(), v in vec3()) {
            let r = q.rotate_embedded(&v);
            prop_assert!(r.w.abs() <= 1e-12 * (1.0 + v.norm()));
            prop_assert!((r.v - q.dcm().transpose() * v).amax() <= 1e-12 * (1.0 + v.norm()));
        }

        #[test]
        fn lambda_consistency(q_ref in unit_quat(), q in unit_quat()) {
            let via_lambda = lambda_matrix(&q_ref) * q.to_vector4();
            let via_product = (q * q_ref.conjugate()).v;
            prop_assert!((via_lambda - via_product).amax() <= 1e-12);
        }
    }
}

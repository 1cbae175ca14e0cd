//! Relative translational and rotational dynamics of the chaser about the
//! target orbit, and zero-noise state propagation driven by IMU samples.
//!
//! Frames: `r` is the relative CoM position expressed in the rotating target
//! frame, whose `y` axis is radial (`r_e = ‖r_e‖ j`) and whose `z` axis carries
//! the orbit rate `n k`. The attitude quaternion `q` maps chaser-body vectors
//! into the target frame through `A(q)`.

use nalgebra::{Matrix3, SVector, Vector3, Vector4};

use crate::attitude::{omega_matrix, skew, Quaternion};
use crate::error::{Error, Result};

/// Earth gravitational parameter, m³/s².
pub const MU_EARTH: f64 = 3.98e14;
/// Default station orbit radius, m.
pub const STATION_RADIUS: f64 = 6.778e6;
/// Mean Earth radius; orbit radii must exceed it.
pub const EARTH_RADIUS: f64 = 6.371e6;
/// Upper bound on a single propagation step.
pub const MAX_STEP: f64 = 1.0;

/// Number of scalar filter states.
pub const STATE_DIM: usize = 21;

pub type StateVector = SVector<f64, STATE_DIM>;

/// Offsets of each 3-vector block inside the 21-element state.
pub mod idx {
    pub const R: usize = 0;
    pub const V: usize = 3;
    pub const Q: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
    pub const RHO1: usize = 15;
    pub const RHO2: usize = 18;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrbitParams {
    /// Orbit rate magnitude about `k`, rad/s.
    pub n: f64,
    /// Orbit rate derivative, rad/s².
    pub n_dot: f64,
    /// Earth centre to station CoM, target frame, m.
    pub r_e: Vector3<f64>,
    /// Gravitational parameter, m³/s².
    pub mu: f64,
}

impl OrbitParams {
    /// Circular orbit of the given radius with `j = [0 1 0]` and `n² r³ = μ`.
    pub fn circular(radius: f64, mu: f64) -> Self {
        Self {
            n: (mu / radius.powi(3)).sqrt(),
            n_dot: 0.0,
            r_e: Vector3::new(0.0, radius, 0.0),
            mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::InvalidArgument(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.r_e.norm() > EARTH_RADIUS) {
            return Err(Error::InvalidArgument(format!(
                "station radius {} m is inside the Earth",
                self.r_e.norm()
            )));
        }
        if !(self.n.is_finite() && self.n_dot.is_finite()) {
            return Err(Error::InvalidArgument("orbit rate must be finite".into()));
        }
        Ok(())
    }

    /// Whether `n² ‖r_e‖³ = μ` holds to 1e-9 relative with `ṅ = 0`.
    pub fn is_circular(&self) -> bool {
        self.n_dot == 0.0
            && ((self.n * self.n * self.r_e.norm().powi(3) - self.mu) / self.mu).abs() <= 1e-9
    }

    pub fn rate_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.n)
    }
}

impl Default for OrbitParams {
    fn default() -> Self {
        Self::circular(STATION_RADIUS, MU_EARTH)
    }
}

/// IMU output at time `t`, held constant until the next sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Accelerometer output, m/s².
    pub u_a: Vector3<f64>,
    /// Gyro output, rad/s.
    pub u_g: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, u_a: Vector3<f64>, u_g: Vector3<f64>) -> Self {
        Self { t, u_a, u_g }
    }
}

/// Continuous-time IMU noise densities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuNoise {
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_a: f64,
    /// Gyro white noise, rad/s/√Hz.
    pub sigma_g: f64,
    /// Gyro bias rate random walk, rad/s²/√Hz.
    pub sigma_b: f64,
    /// Accelerometer bias pseudo-walk used only inside the filter model.
    pub sigma_ba: f64,
}

impl ImuNoise {
    pub fn new(sigma_a: f64, sigma_g: f64, sigma_b: f64) -> Self {
        Self {
            sigma_a,
            sigma_g,
            sigma_b,
            sigma_ba: 0.0,
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("sigma_a", self.sigma_a),
            ("sigma_g", self.sigma_g),
            ("sigma_b", self.sigma_b),
            ("sigma_ba", self.sigma_ba),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self::new(2e-3, 2e-4, 2e-6)
    }
}

/// Complete physical state with the attitude as a full quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FullState {
    pub r: Vector3<f64>,
    pub r_dot: Vector3<f64>,
    pub q: Quaternion,
    pub b_g: Vector3<f64>,
    pub b_a: Vector3<f64>,
    pub rho1: Vector3<f64>,
    pub rho2: Vector3<f64>,
}

impl FullState {
    pub fn at_rest(q: Quaternion) -> Self {
        Self {
            r: Vector3::zeros(),
            r_dot: Vector3::zeros(),
            q,
            b_g: Vector3::zeros(),
            b_a: Vector3::zeros(),
            rho1: Vector3::zeros(),
            rho2: Vector3::zeros(),
        }
    }
}

/// Time derivative of a [`FullState`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateDerivative {
    pub r_dot: Vector3<f64>,
    pub r_ddot: Vector3<f64>,
    pub q_dot: Vector4<f64>,
    pub b_g_dot: Vector3<f64>,
    pub b_a_dot: Vector3<f64>,
    pub rho1_dot: Vector3<f64>,
    pub rho2_dot: Vector3<f64>,
}

/// Filter state: 21 scalars plus the reference quaternion `q̄`.
///
/// The true attitude is `q̃ ⊗ q̄` with `q̃` rebuilt from `q_tilde_v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavState {
    pub r: Vector3<f64>,
    pub r_dot: Vector3<f64>,
    pub q_tilde_v: Vector3<f64>,
    pub b_g: Vector3<f64>,
    pub b_a: Vector3<f64>,
    pub rho1: Vector3<f64>,
    pub rho2: Vector3<f64>,
    pub q_ref: Quaternion,
}

impl NavState {
    pub fn from_full(x: &FullState) -> Self {
        Self {
            r: x.r,
            r_dot: x.r_dot,
            q_tilde_v: Vector3::zeros(),
            b_g: x.b_g,
            b_a: x.b_a,
            rho1: x.rho1,
            rho2: x.rho2,
            q_ref: x.q,
        }
    }

    /// `q = q̃ ⊗ q̄`.
    pub fn attitude(&self) -> Quaternion {
        (Quaternion::from_vector_part(&self.q_tilde_v) * self.q_ref).renormalize()
    }

    pub fn to_full(&self) -> FullState {
        FullState {
            r: self.r,
            r_dot: self.r_dot,
            q: self.attitude(),
            b_g: self.b_g,
            b_a: self.b_a,
            rho1: self.rho1,
            rho2: self.rho2,
        }
    }

    /// Stacks `(r, ṙ, q̃_v, b_g, b_a, ϱ₁, ϱ₂)`.
    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        for (off, v) in [
            (idx::R, &self.r),
            (idx::V, &self.r_dot),
            (idx::Q, &self.q_tilde_v),
            (idx::BG, &self.b_g),
            (idx::BA, &self.b_a),
            (idx::RHO1, &self.rho1),
            (idx::RHO2, &self.rho2),
        ] {
            x.fixed_rows_mut::<3>(off).copy_from(v);
        }
        x
    }

    pub fn from_vector(x: &StateVector, q_ref: Quaternion) -> Self {
        let b = |off: usize| -> Vector3<f64> { x.fixed_rows::<3>(off).into_owned() };
        Self {
            r: b(idx::R),
            r_dot: b(idx::V),
            q_tilde_v: b(idx::Q),
            b_g: b(idx::BG),
            b_a: b(idx::BA),
            rho1: b(idx::RHO1),
            rho2: b(idx::RHO2),
            q_ref,
        }
    }

    /// Folds `q̃` into the reference: `q̄ ← q̃ ⊗ q̄`, `q̃_v ← 0`.
    pub fn reset_attitude(&self) -> Self {
        Self {
            q_ref: self.attitude(),
            q_tilde_v: Vector3::zeros(),
            ..*self
        }
    }
}

/// Gravity-gradient and rotating-frame acceleration `ψ(r)`.
pub fn psi(r: &Vector3<f64>, orbit: &OrbitParams) -> Result<Vector3<f64>> {
    let re = orbit.r_e;
    let rr = r + re;
    let rr_norm = rr.norm();
    if !(rr_norm > 0.0) {
        return Err(Error::Singularity(
            "relative position coincides with the Earth centre".into(),
        ));
    }
    let re_norm = re.norm();
    let n = orbit.rate_vector();
    let n_dot = Vector3::new(0.0, 0.0, orbit.n_dot);
    let gravity = (re / re_norm.powi(3) - rr / rr_norm.powi(3)) * orbit.mu;
    Ok(gravity - n.cross(&n.cross(r)) - n_dot.cross(r))
}

/// Jacobian of `ψ` at `r = 0`:
/// `Γ = (μ/‖r_e‖³)(2I + 3[j×]²) − n²[k×]² − ṅ[k×]`.
pub fn gamma(orbit: &OrbitParams) -> Matrix3<f64> {
    let re_norm = orbit.r_e.norm();
    let j = orbit.r_e / re_norm;
    let sj = skew(&j);
    let sk = skew(&Vector3::z());
    (Matrix3::identity() * 2.0 + sj * sj * 3.0) * (orbit.mu / re_norm.powi(3))
        - sk * sk * (orbit.n * orbit.n)
        - sk * orbit.n_dot
}

/// Noise-free state derivative.
///
/// `r̈ = −2n×ṙ + ψ(r) + A(q)(u_a + b_a)` and
/// `q̇ = ½ Ω(u_g + b_g) q − ½ q ⊗ n̲`; all parameter rates are zero.
pub fn f_nonlinear(x: &FullState, u: &ImuSample, orbit: &OrbitParams) -> Result<StateDerivative> {
    let n = orbit.rate_vector();
    let accel = x.q.dcm() * (u.u_a + x.b_a);
    let r_ddot = -2.0 * n.cross(&x.r_dot) + psi(&x.r, orbit)? + accel;
    let omega = u.u_g + x.b_g;
    let q4 = x.q.to_vector4();
    let q_dot = omega_matrix(&omega) * q4 * 0.5 - (x.q * Quaternion::new(n, 0.0)).to_vector4() * 0.5;
    Ok(StateDerivative {
        r_dot: x.r_dot,
        r_ddot,
        q_dot,
        b_g_dot: Vector3::zeros(),
        b_a_dot: Vector3::zeros(),
        rho1_dot: Vector3::zeros(),
        rho2_dot: Vector3::zeros(),
    })
}

fn stage(x: &FullState, k: &StateDerivative, h: f64) -> FullState {
    FullState {
        r: x.r + k.r_dot * h,
        r_dot: x.r_dot + k.r_ddot * h,
        q: Quaternion::from_vector4(&(x.q.to_vector4() + k.q_dot * h)),
        ..*x
    }
}

/// One classical RK4 step of the full state under zero-order-held inputs.
///
/// Parameters (`b_g`, `b_a`, `ϱ₁`, `ϱ₂`) are copied through untouched and the
/// quaternion is renormalized at the end of the step.
pub fn propagate_full(
    x: &FullState,
    u: &ImuSample,
    dt: f64,
    orbit: &OrbitParams,
) -> Result<FullState> {
    if !(dt > 0.0 && dt <= MAX_STEP) {
        return Err(Error::InvalidArgument(format!(
            "propagation step {dt} s outside (0, {MAX_STEP}]"
        )));
    }
    let k1 = f_nonlinear(x, u, orbit)?;
    let k2 = f_nonlinear(&stage(x, &k1, 0.5 * dt), u, orbit)?;
    let k3 = f_nonlinear(&stage(x, &k2, 0.5 * dt), u, orbit)?;
    let k4 = f_nonlinear(&stage(x, &k3, dt), u, orbit)?;
    let w = dt / 6.0;
    let r = x.r + (k1.r_dot + k2.r_dot * 2.0 + k3.r_dot * 2.0 + k4.r_dot) * w;
    let r_dot = x.r_dot + (k1.r_ddot + k2.r_ddot * 2.0 + k3.r_ddot * 2.0 + k4.r_ddot) * w;
    let q4 = x.q.to_vector4() + (k1.q_dot + k2.q_dot * 2.0 + k3.q_dot * 2.0 + k4.q_dot) * w;
    Ok(FullState {
        r,
        r_dot,
        q: Quaternion::from_vector4(&q4).renormalize(),
        ..*x
    })
}

/// Propagates a filter state over `dt` with zero process noise.
///
/// The result carries the propagated attitude as its new reference
/// quaternion and `q̃_v = 0`.
pub fn propagate_state(
    x_hat: &NavState,
    u: &ImuSample,
    dt: f64,
    orbit: &OrbitParams,
) -> Result<NavState> {
    let next = propagate_full(&x_hat.to_full(), u, dt, orbit)?;
    Ok(NavState {
        r: next.r,
        r_dot: next.r_dot,
        q_tilde_v: Vector3::zeros(),
        b_g: x_hat.b_g,
        b_a: x_hat.b_a,
        rho1: x_hat.rho1,
        rho2: x_hat.rho2,
        q_ref: next.q,
    })
}

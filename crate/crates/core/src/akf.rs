//! Noise-adaptive error-state Kalman filter driven by ICP pose fixes.
//!
//! The measurement is the registration pose `(ρ', q')`, expressed against
//! the filter's reference attitude as `z = (ρ', vec(q' ⊗ q̄*))`. The window
//! estimator tracks either the innovation or the residual sequence and
//! turns it into a measurement-noise estimate `R̂`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use log::debug;
use nalgebra::{Matrix3, Matrix6, SMatrix, SymmetricEigen, Vector3, Vector6};

use crate::attitude::{error_quat, skew, Quaternion};
use crate::dynamics::{
    idx, propagate_state, ImuNoise, ImuSample, NavState, OrbitParams, StateVector, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::icp::{icp_register, pose_covariance, IcpConfig, ModelSet, PointCloud, Pose};
use crate::lindisc::{discretize, DiscreteModel, Discretization, StateMatrix};

pub const MEAS_DIM: usize = 6;
/// 99.9 % quantile of χ² with 6 degrees of freedom.
pub const CHI2_6_999: f64 = 22.457_744_484_825_3;

pub type MeasMatrix = SMatrix<f64, MEAS_DIM, STATE_DIM>;
pub type GainMatrix = SMatrix<f64, STATE_DIM, MEAS_DIM>;

#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub x: NavState,
    pub p: StateMatrix,
    /// Number of scan epochs processed.
    pub k: u64,
}

impl FilterState {
    pub fn new(x: NavState, p: StateMatrix) -> Self {
        Self { x, p, k: 0 }
    }

    /// Symmetric within 1e-10 (relative) and PSD within `−1e-9·tr(P)`.
    pub fn check_covariance(&self) -> Result<()> {
        check_psd(&self.p)
    }
}

fn check_psd(p: &StateMatrix) -> Result<()> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("covariance has non-finite entries".into()));
    }
    let scale = p.amax().max(f64::MIN_POSITIVE);
    let asym = (p - p.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::Numeric(format!("covariance asymmetric by {asym:e}")));
    }
    let min_eig = SymmetricEigen::new(*p).eigenvalues.min();
    let tol = 1e-9 * p.trace().abs();
    if min_eig < -tol {
        return Err(Error::Numeric(format!(
            "covariance not positive semidefinite (min eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

/// A measured pose at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub rho: Vector3<f64>,
    pub q: Quaternion,
}

impl Observation {
    pub fn new(t: f64, rho: Vector3<f64>, q: Quaternion) -> Self {
        Self { t, rho, q }
    }

    pub fn from_pose(t: f64, pose: &Pose) -> Self {
        Self::new(t, pose.rho, pose.q)
    }

    /// `(ρ', vec(q' ⊗ q̄*))` with `q'` hemisphere-aligned to `q̄`.
    pub fn z_against(&self, q_ref: &Quaternion) -> Vector6<f64> {
        let dq = error_quat(&self.q, q_ref);
        let mut z = Vector6::zeros();
        z.fixed_rows_mut::<3>(0).copy_from(&self.rho);
        z.fixed_rows_mut::<3>(3).copy_from(&dq.v);
        z
    }
}

/// Which sequence feeds the window estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdaptiveMode {
    Innovation,
    #[default]
    Residual,
    /// Fixed measurement noise; the window is still maintained for logging.
    Off,
}

impl FromStr for AdaptiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "innovation" => Ok(Self::Innovation),
            "residual" => Ok(Self::Residual),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!(
                "unknown adaptive mode '{other}' (expected innovation, residual or off)"
            ))),
        }
    }
}

impl fmt::Display for AdaptiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Innovation => "innovation",
            Self::Residual => "residual",
            Self::Off => "off",
        })
    }
}

/// Sliding-window second moment of the innovation (or residual) sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveCov {
    pub c_hat: Matrix6<f64>,
    pub buffer: VecDeque<Vector6<f64>>,
    pub w: usize,
    /// Samples seen so far, including ones that have left the window.
    pub count: usize,
    pub mode: AdaptiveMode,
}

impl AdaptiveCov {
    pub fn new(w: usize, mode: AdaptiveMode, c0: Matrix6<f64>) -> Result<Self> {
        if w == 0 {
            return Err(Error::InvalidArgument("window length must be positive".into()));
        }
        Ok(Self {
            c_hat: c0,
            buffer: VecDeque::with_capacity(w),
            w,
            count: 0,
            mode,
        })
    }

    pub fn is_full(&self) -> bool {
        self.buffer.len() == self.w
    }

    /// `(1/n) Σ e eᵀ` over the buffered samples, for cross-checking.
    pub fn batch_mean(&self) -> Matrix6<f64> {
        let n = self.buffer.len().max(1) as f64;
        self.buffer
            .iter()
            .fold(Matrix6::zeros(), |acc, e| acc + e * e.transpose())
            / n
    }
}

/// Pose-level fault gate thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultGate {
    /// ICP fit-error threshold, m².
    pub eps_th: f64,
    /// Mahalanobis threshold on the innovation.
    pub e_th: f64,
    pub i_max: usize,
}

impl FaultGate {
    pub fn new(eps_th: f64, e_th: f64, i_max: usize) -> Self {
        Self { eps_th, e_th, i_max }
    }
}

/// Measurement-noise model used when the window estimate is not in charge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MeasurementNoise {
    /// Constant `R₀`.
    Fixed(Matrix6<f64>),
    /// Per-frame covariance from scan geometry and isotropic point noise `σ`.
    ScanGeometry { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub window: usize,
    pub mode: AdaptiveMode,
    pub gate: FaultGate,
    pub r0: Matrix6<f64>,
    pub measurement_noise: MeasurementNoise,
    pub discretization: Discretization,
    pub noise: ImuNoise,
    pub orbit: OrbitParams,
    pub max_corr_dist: Option<f64>,
}

impl FilterConfig {
    /// Defaults scaled to a model sampled at `resolution` metres.
    pub fn with_resolution(resolution: f64) -> Self {
        let r0 = Matrix6::from_diagonal(&Vector6::new(
            4e-6, 4e-6, 4e-6, 1e-6, 1e-6, 1e-6,
        ));
        Self {
            window: 30,
            mode: AdaptiveMode::Residual,
            gate: FaultGate::new(4.0 * resolution * resolution, CHI2_6_999.sqrt(), 30),
            r0,
            measurement_noise: MeasurementNoise::Fixed(r0),
            discretization: Discretization::ClosedForm,
            noise: ImuNoise::default(),
            orbit: OrbitParams::default(),
            max_corr_dist: None,
        }
    }

    pub fn icp_config(&self) -> IcpConfig {
        IcpConfig {
            eps_th: self.gate.eps_th,
            i_max: self.gate.i_max,
            max_corr_dist: self.max_corr_dist,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.gate.i_max == 0 {
            return Err(Error::Config("i_max must be at least 1".into()));
        }
        if !(self.gate.eps_th > 0.0) || !(self.gate.e_th > 0.0) {
            return Err(Error::Config("eps_th and e_th must be positive".into()));
        }
        if let MeasurementNoise::ScanGeometry { sigma } = self.measurement_noise {
            if !(sigma > 0.0) {
                return Err(Error::Config("scan-geometry noise needs sigma > 0".into()));
            }
        }
        self.noise.validate()?;
        self.orbit.validate()
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self::with_resolution(0.05)
    }
}

/// `h(x) = (A(q̃⊗q̄)ᵀ(r − ϱ₂) + ϱ₁, q̃_v)`.
pub fn h_of_x(x: &NavState) -> Vector6<f64> {
    let a = x.attitude().dcm();
    let mut h = Vector6::zeros();
    h.fixed_rows_mut::<3>(0)
        .copy_from(&(a.transpose() * (x.r - x.rho2) + x.rho1));
    h.fixed_rows_mut::<3>(3).copy_from(&x.q_tilde_v);
    h
}

/// Sensitivity of `h` about `x̄` (taken at `q̃ = identity`).
pub fn build_h(x_bar: &NavState) -> MeasMatrix {
    let at = x_bar.q_ref.dcm().transpose();
    let lever = at * (x_bar.r - x_bar.rho2);
    let mut h = MeasMatrix::zeros();
    h.fixed_view_mut::<3, 3>(0, idx::R).copy_from(&at);
    h.fixed_view_mut::<3, 3>(0, idx::Q).copy_from(&(skew(&lever) * 2.0));
    h.fixed_view_mut::<3, 3>(0, idx::RHO1).copy_from(&Matrix3::identity());
    h.fixed_view_mut::<3, 3>(0, idx::RHO2).copy_from(&(-at));
    h.fixed_view_mut::<3, 3>(3, idx::Q).copy_from(&Matrix3::identity());
    h
}

/// `z − h(x̄)`.
pub fn innovation(z: &Vector6<f64>, x_bar: &NavState) -> Vector6<f64> {
    z - h_of_x(x_bar)
}

/// `z − h(x̂)`, with `z` formed against the same reference as `x̂`.
pub fn residual(z: &Vector6<f64>, x_hat: &NavState) -> Vector6<f64> {
    z - h_of_x(x_hat)
}

/// Pushes `e` into the window and updates `Ĉ` recursively.
///
/// While the window fills (`n ≤ w` samples, counting `e`) the estimate is the
/// running mean with weights `(n−1)/n` and `1/n`; afterwards the oldest
/// sample is swapped out with weight `1/w`. Either way `Ĉ` equals the mean of
/// `e eᵀ` over the buffered samples.
pub fn update_window_cov(state: &AdaptiveCov, e: &Vector6<f64>) -> AdaptiveCov {
    let mut next = state.clone();
    let n = state.count + 1;
    let outer = e * e.transpose();
    if n <= state.w {
        let nf = n as f64;
        next.c_hat = state.c_hat * ((nf - 1.0) / nf) + outer / nf;
    } else {
        let old = next
            .buffer
            .pop_front()
            .expect("full window has an oldest sample");
        next.c_hat = state.c_hat + (outer - old * old.transpose()) / state.w as f64;
    }
    next.buffer.push_back(*e);
    next.count = n;
    next.c_hat = (next.c_hat + next.c_hat.transpose()) * 0.5;
    next
}

fn clamp_psd(m: &Matrix6<f64>) -> (Matrix6<f64>, bool) {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    if eig.eigenvalues.min() >= 0.0 {
        return ((m + m.transpose()) * 0.5, false);
    }
    let floored = eig.eigenvalues.map(|v| v.max(0.0));
    let v = eig.eigenvectors;
    let out = v * Matrix6::from_diagonal(&floored) * v.transpose();
    ((out + out.transpose()) * 0.5, true)
}

/// Measurement-noise estimate from the window.
///
/// Innovation mode: `Ĉ − H P̄ Hᵀ`, floored to PSD with a warning.
/// Residual mode: `Ĉ* + H P̂ Hᵀ`. `p` is `P̄` or `P̂` to match.
pub fn estimate_r(state: &AdaptiveCov, h: &MeasMatrix, p: &StateMatrix) -> Result<Matrix6<f64>> {
    let hph = h * p * h.transpose();
    match state.mode {
        AdaptiveMode::Innovation => {
            let (r, clamped) = clamp_psd(&(state.c_hat - hph));
            if clamped {
                debug!("innovation-based R estimate was indefinite; clamped to PSD");
            }
            Ok(r)
        }
        AdaptiveMode::Residual => {
            let r = state.c_hat + hph;
            Ok((r + r.transpose()) * 0.5)
        }
        AdaptiveMode::Off => Err(Error::InvalidArgument(
            "no window estimate in fixed-noise mode".into(),
        )),
    }
}

/// Outcome of one measurement update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOutput {
    pub state: FilterState,
    pub innovation: Vector6<f64>,
    /// `z − h(x̂)` before the attitude reset.
    pub residual: Vector6<f64>,
}

/// Measurement update with gain `K = φ P̄ Hᵀ C⁻¹`, `C` the innovation
/// covariance in use.
///
/// With `φ = false` the prior is returned unchanged. Otherwise the state is
/// corrected additively, the attitude error is folded into `q̄`
/// (`q̂ = q̃ ⊗ q̄`, `q̃_v ← 0`) and `P̂` takes the Joseph form, symmetrized.
pub fn kf_update(
    fs: &FilterState,
    obs: &Observation,
    c: &Matrix6<f64>,
    phi_k: bool,
) -> Result<UpdateOutput> {
    let z = obs.z_against(&fs.x.q_ref);
    let e = innovation(&z, &fs.x);
    if !phi_k {
        return Ok(UpdateOutput {
            state: fs.clone(),
            innovation: e,
            residual: e,
        });
    }
    let h = build_h(&fs.x);
    let c_inv = invert_checked(c)?;
    let k: GainMatrix = fs.p * h.transpose() * c_inv;
    let dx: StateVector = k * e;
    let x_hat = NavState::from_vector(&(fs.x.to_vector() + dx), fs.x.q_ref);
    let res = residual(&z, &x_hat);
    // Joseph form with R recovered from C; equal to (I − KH)P̄ for this K.
    let r = c - h * fs.p * h.transpose();
    let i_kh = StateMatrix::identity() - k * h;
    let p = i_kh * fs.p * i_kh.transpose() + k * r * k.transpose();
    let p = (p + p.transpose()) * 0.5;
    check_psd(&p)?;
    Ok(UpdateOutput {
        state: FilterState {
            x: x_hat.reset_attitude(),
            p,
            k: fs.k,
        },
        innovation: e,
        residual: res,
    })
}

fn invert_checked(c: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let eig = SymmetricEigen::new((c + c.transpose()) * 0.5);
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    debug!("innovation covariance condition number {cond:e}");
    if !(cond <= 1e12) {
        return Err(Error::Numeric(format!(
            "innovation covariance ill-conditioned (condition number {cond:e})"
        )));
    }
    c.cholesky()
        .map(|ch| ch.inverse())
        .ok_or_else(|| Error::Numeric("innovation covariance not positive definite".into()))
}

/// Propagates the state through one IMU interval and the covariance with
/// the supplied transition: `P̄ = Φ P̂ Φᵀ + Q`.
pub fn kf_propagate(
    fs: &FilterState,
    u: &ImuSample,
    dt: f64,
    disc: &DiscreteModel,
    orbit: &OrbitParams,
) -> Result<FilterState> {
    let x = propagate_state(&fs.x, u, dt, orbit)?;
    let p = disc.phi * fs.p * disc.phi.transpose() + disc.q;
    Ok(FilterState {
        x,
        p: (p + p.transpose()) * 0.5,
        k: fs.k,
    })
}

/// Discretizes about the current estimate and propagates one IMU interval.
pub fn propagate_step(
    fs: &FilterState,
    u: &ImuSample,
    dt: f64,
    config: &FilterConfig,
) -> Result<FilterState> {
    let disc = discretize(&fs.x, u, &config.noise, &config.orbit, dt, config.discretization)?;
    kf_propagate(fs, u, dt, &disc, &config.orbit)
}

/// `√(eᵀ C⁻¹ e)`.
pub fn mahalanobis(e: &Vector6<f64>, c: &Matrix6<f64>) -> Result<f64> {
    let ch = c
        .cholesky()
        .ok_or_else(|| Error::Numeric("gate covariance not positive definite".into()))?;
    Ok(e.dot(&ch.solve(e)).max(0.0).sqrt())
}

/// Health flag: `false` when the fit error reaches `eps_th` or the
/// innovation's Mahalanobis norm under `c` reaches `e_th`.
pub fn fault_detect(eps: f64, e: &Vector6<f64>, c: &Matrix6<f64>, gate: &FaultGate) -> Result<bool> {
    if !(eps < gate.eps_th) {
        return Ok(false);
    }
    Ok(mahalanobis(e, c)? < gate.e_th)
}

/// Everything known about one scan epoch after the update, before the
/// propagation to the next one.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochOutput {
    pub t: f64,
    pub phi: bool,
    /// ICP fit error, m²; infinite when registration was not attempted.
    pub epsilon: f64,
    pub iterations: usize,
    pub icp_history: Vec<f64>,
    pub innovation: Vector6<f64>,
    pub r_hat: Matrix6<f64>,
    /// Filter state entering the epoch.
    pub prior: FilterState,
    /// Posterior (or coasted prior) filter state at `t`.
    pub posterior: FilterState,
    /// Pose implied by the posterior.
    pub pose: Pose,
    /// `H P Hᵀ` of that pose in `(ρ, q̃_v)` coordinates.
    pub pose_cov: Matrix6<f64>,
}

/// Pose implied by a filter state: `(A(q)ᵀ(r − ϱ₂) + ϱ₁, q)`.
pub fn pose_of(x: &NavState) -> Pose {
    let h = h_of_x(x);
    Pose::new(x.attitude(), h.fixed_rows::<3>(0).into_owned())
}

/// Filter-side state carried across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Navigator {
    pub fs: FilterState,
    pub acov: AdaptiveCov,
    /// Posterior covariance of the last accepted update, used by the
    /// residual-mode estimate.
    pub last_p_hat: StateMatrix,
    /// Noise covariance used at the last registered epoch.
    pub last_r_hat: Matrix6<f64>,
    pub config: FilterConfig,
}

impl Navigator {
    pub fn new(x0: NavState, p0: StateMatrix, config: FilterConfig) -> Result<Self> {
        config.validate()?;
        let h = build_h(&x0);
        let c0 = h * p0 * h.transpose() + config.r0;
        let acov = AdaptiveCov::new(config.window, config.mode, c0)?;
        Ok(Self {
            fs: FilterState::new(x0, p0),
            acov,
            last_p_hat: p0,
            last_r_hat: config.r0,
            config,
        })
    }

    /// Runs ICP against `model` from the predicted pose, then [`Self::process`]
    /// the result. Fewer than three scan points is a fault.
    pub fn navigation_step(
        &mut self,
        t: f64,
        scan: &PointCloud,
        model: &ModelSet,
        imu: &[ImuSample],
        t_end: f64,
    ) -> Result<EpochOutput> {
        let coarse = pose_of(&self.fs.x);
        let registration = if scan.len() >= 3 {
            Some(icp_register(scan, model, &coarse, &self.config.icp_config())?)
        } else {
            None
        };
        let out = match &registration {
            Some(r) => {
                let obs = Observation::from_pose(t, &r.pose);
                self.process(obs, r.epsilon, r.converged, scan, r.iterations, r.history.clone())?
            }
            None => self.coast(t)?,
        };
        self.propagate_to(imu, t_end)?;
        Ok(out)
    }

    /// Gated update with an externally supplied pose fix.
    pub fn process(
        &mut self,
        obs: Observation,
        epsilon: f64,
        converged: bool,
        scan: &PointCloud,
        iterations: usize,
        icp_history: Vec<f64>,
    ) -> Result<EpochOutput> {
        let prior = self.fs.clone();
        let h = build_h(&self.fs.x);
        let r_hat = self.current_r(&h, scan, &Pose::new(obs.q, obs.rho))?;
        let c = h * self.fs.p * h.transpose() + r_hat;
        let c = (c + c.transpose()) * 0.5;
        let z = obs.z_against(&self.fs.x.q_ref);
        let e = innovation(&z, &self.fs.x);
        let phi = converged && fault_detect(epsilon, &e, &c, &self.config.gate)?;
        let update = kf_update(&self.fs, &obs, &c, phi)?;
        if phi {
            let sample = match self.acov.mode {
                AdaptiveMode::Innovation => update.innovation,
                AdaptiveMode::Residual | AdaptiveMode::Off => update.residual,
            };
            self.acov = update_window_cov(&self.acov, &sample);
            self.last_p_hat = update.state.p;
        }
        self.fs = update.state;
        self.fs.k += 1;
        self.last_r_hat = r_hat;
        Ok(self.epoch_output(prior, obs.t, phi, epsilon, iterations, icp_history, e, r_hat))
    }

    /// Noise covariance in force: the window estimate once the window is
    /// full, otherwise the configured model.
    fn current_r(&self, h: &MeasMatrix, scan: &PointCloud, pose: &Pose) -> Result<Matrix6<f64>> {
        match self.acov.mode {
            AdaptiveMode::Innovation if self.acov.is_full() => estimate_r(&self.acov, h, &self.fs.p),
            AdaptiveMode::Residual if self.acov.is_full() => {
                estimate_r(&self.acov, h, &self.last_p_hat)
            }
            _ => match self.config.measurement_noise {
                MeasurementNoise::Fixed(r) => Ok(r),
                MeasurementNoise::ScanGeometry { sigma } => pose_covariance(scan, pose, sigma),
            },
        }
    }

    /// Epoch without a usable scan: the prior is carried through unchanged.
    pub fn coast(&mut self, t: f64) -> Result<EpochOutput> {
        let r_hat = self.last_r_hat;
        let prior = self.fs.clone();
        self.fs.k += 1;
        Ok(self.epoch_output(prior, t, false, f64::INFINITY, 0, Vec::new(), Vector6::zeros(), r_hat))
    }

    #[allow(clippy::too_many_arguments)]
    fn epoch_output(
        &self,
        prior: FilterState,
        t: f64,
        phi: bool,
        epsilon: f64,
        iterations: usize,
        icp_history: Vec<f64>,
        innovation: Vector6<f64>,
        r_hat: Matrix6<f64>,
    ) -> EpochOutput {
        let h = build_h(&self.fs.x);
        let pose_cov = h * self.fs.p * h.transpose();
        EpochOutput {
            t,
            phi,
            epsilon,
            iterations,
            icp_history,
            innovation,
            r_hat,
            prior,
            posterior: self.fs.clone(),
            pose: pose_of(&self.fs.x),
            pose_cov: (pose_cov + pose_cov.transpose()) * 0.5,
        }
    }

    /// Propagates through `imu` (sorted by time), each sample held until the
    /// next one or `t_end`.
    pub fn propagate_to(&mut self, imu: &[ImuSample], t_end: f64) -> Result<()> {
        for (i, u) in imu.iter().enumerate() {
            let t_next = imu.get(i + 1).map_or(t_end, |n| n.t.min(t_end));
            let dt = t_next - u.t;
            if dt <= 0.0 {
                continue;
            }
            self.fs = propagate_step(&self.fs, u, dt, &self.config)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    fn random_state(rng: &mut ChaCha8Rng) -> NavState {
        NavState {
            r: random_vec(rng, 20.0),
            r_dot: random_vec(rng, 0.1),
            q_tilde_v: Vector3::zeros(),
            b_g: random_vec(rng, 1e-3),
            b_a: random_vec(rng, 1e-2),
            rho1: random_vec(rng, 1.0),
            rho2: random_vec(rng, 1.0),
            q_ref: Quaternion::normalized(random_vec(rng, 1.0), rng.random_range(-1.0..1.0))
                .unwrap(),
        }
    }

    #[test]
    fn h_trivial_cases() {
        let mut x = NavState::from_full(&crate::dynamics::FullState::at_rest(Quaternion::identity()));
        x.r = Vector3::new(1.0, 2.0, 3.0);
        let h = h_of_x(&x);
        assert_eq!(h, Vector6::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_state(&mut rng);
        let expected = x.q_ref.dcm().transpose() * (x.r - x.rho2) + x.rho1;
        assert!((h_of_x(&x).fixed_rows::<3>(0) - expected).norm() < 1e-12);
    }

    #[test]
    fn h_linearization_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_state(&mut rng);
        let hm = build_h(&x);
        let dir = random_vec(&mut rng, 1.0).normalize();
        let err = |s: f64| {
            let mut xp = x;
            xp.q_tilde_v = dir * s;
            (h_of_x(&xp) - h_of_x(&x) - hm * (xp.to_vector() - x.to_vector())).norm()
        };
        let ratio = err(1e-2) / err(1e-3);
        assert!((80.0..120.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn h_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = random_state(&mut rng);
        x.rho2 = x.r;
        let h = build_h(&x);
        assert_eq!(h.fixed_view::<3, 3>(0, idx::Q).into_owned(), Matrix3::zeros());
        x.q_ref = Quaternion::identity();
        let h = build_h(&x);
        assert_eq!(h.fixed_view::<3, 3>(0, idx::R).into_owned(), Matrix3::identity());
    }

    #[test]
    fn window_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut acov = AdaptiveCov::new(30, AdaptiveMode::Residual, Matrix6::identity()).unwrap();
        for _ in 0..200 {
            let e = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            acov = update_window_cov(&acov, &e);
            assert!(acov.buffer.len() <= acov.w);
            assert!((acov.c_hat - acov.batch_mean()).amax() <= 1e-10);
        }
    }

    #[test]
    fn window_first_sample_and_fixed_point() {
        let e = Vector6::new(1.0, -2.0, 0.5, 0.0, 3.0, 1.0);
        let acov = AdaptiveCov::new(5, AdaptiveMode::Residual, Matrix6::identity() * 7.0).unwrap();
        let one = update_window_cov(&acov, &e);
        assert_eq!(one.c_hat, e * e.transpose());
        let mut a = one;
        for _ in 0..20 {
            a = update_window_cov(&a, &e);
        }
        assert!((a.c_hat - e * e.transpose()).amax() < 1e-12);
    }

    #[test]
    fn residual_r_is_hph_when_window_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_state(&mut rng);
        let h = build_h(&x);
        let b = StateMatrix::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let p = b * b.transpose();
        let acov = AdaptiveCov::new(3, AdaptiveMode::Residual, Matrix6::zeros()).unwrap();
        let r = estimate_r(&acov, &h, &p).unwrap();
        let hph = h * p * h.transpose();
        assert!((r - hph).amax() <= 1e-12 * hph.amax());
        assert!(SymmetricEigen::new(r).eigenvalues.min() >= -1e-9 * r.trace());
    }

    #[test]
    fn innovation_r_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_state(&mut rng);
        let h = build_h(&x);
        let p = StateMatrix::identity();
        let hph = h * p * h.transpose();
        let mut acov = AdaptiveCov::new(3, AdaptiveMode::Innovation, Matrix6::zeros()).unwrap();
        acov.c_hat = hph * 0.5;
        let r = estimate_r(&acov, &h, &p).unwrap();
        assert!(SymmetricEigen::new(r).eigenvalues.min() >= -1e-12);
    }

    fn prior(rng: &mut ChaCha8Rng) -> FilterState {
        let x = random_state(rng);
        let b = StateMatrix::from_fn(|_, _| rng.random_range(-0.1..0.1));
        FilterState::new(x, b * b.transpose() + StateMatrix::identity() * 1e-4)
    }

    #[test]
    fn gated_update_is_exact_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fs = prior(&mut rng);
        let obs = Observation::new(0.0, random_vec(&mut rng, 1.0), fs.x.q_ref);
        let out = kf_update(&fs, &obs, &Matrix6::identity(), false).unwrap();
        assert_eq!(out.state, fs);
    }

    #[test]
    fn zero_innovation_keeps_state_and_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fs = prior(&mut rng);
        let pose = pose_of(&fs.x);
        let obs = Observation::from_pose(0.0, &pose);
        let h = build_h(&fs.x);
        let c = h * fs.p * h.transpose() + Matrix6::identity() * 1e-4;
        let out = kf_update(&fs, &obs, &c, true).unwrap();
        assert!((out.state.x.to_vector() - fs.x.to_vector()).amax() < 1e-12);
        assert!(out.state.x.q_ref.angle_to(&fs.x.q_ref) < 1e-12);
        assert!(out.state.p.trace() <= fs.p.trace());
        assert_eq!(out.state.x.q_tilde_v, Vector3::zeros());
    }

    #[test]
    fn scalar_reduction() {
        // Only the x-position is uncertain and observed with variance r.
        let mut fs = FilterState::new(
            NavState::from_full(&crate::dynamics::FullState::at_rest(Quaternion::identity())),
            StateMatrix::zeros(),
        );
        let (p0, r, z) = (4.0, 1.0, 2.5);
        fs.p[(0, 0)] = p0;
        let obs = Observation::new(0.0, Vector3::new(z, 0.0, 0.0), Quaternion::identity());
        let mut c = Matrix6::identity();
        c[(0, 0)] = p0 + r;
        let out = kf_update(&fs, &obs, &c, true).unwrap();
        let k = p0 / (p0 + r);
        assert!((out.state.x.r.x - k * z).abs() < 1e-15);
        assert!((out.state.p[(0, 0)] - (1.0 - k) * p0).abs() < 1e-15);
    }

    #[test]
    fn ill_conditioned_c_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fs = prior(&mut rng);
        let obs = Observation::from_pose(0.0, &pose_of(&fs.x));
        let mut c = Matrix6::identity();
        c[(5, 5)] = 1e-14;
        assert!(matches!(kf_update(&fs, &obs, &c, true), Err(Error::Numeric(_))));
    }

    #[test]
    fn propagate_identity_transition() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fs = prior(&mut rng);
        let disc = DiscreteModel {
            phi: StateMatrix::identity(),
            q: StateMatrix::zeros(),
            dt: 0.1,
        };
        let u = ImuSample::new(0.0, Vector3::zeros(), Vector3::zeros());
        let next = kf_propagate(&fs, &u, 0.1, &disc, &OrbitParams::default()).unwrap();
        assert_eq!(next.p, fs.p);
    }

    #[test]
    fn propagation_grows_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut fs = prior(&mut rng);
        let config = FilterConfig::default();
        let u = ImuSample::new(0.0, random_vec(&mut rng, 0.01), random_vec(&mut rng, 0.01));
        for _ in 0..50 {
            let next = propagate_step(&fs, &u, 0.02, &config).unwrap();
            next.check_covariance().unwrap();
            assert!(next.p.trace() >= fs.p.trace() * (1.0 - 1e-12));
            fs = next;
        }
    }

    #[test]
    fn fault_gate_cases() {
        let gate = FaultGate::new(1e-4, CHI2_6_999.sqrt(), 30);
        let c = Matrix6::identity();
        assert!(fault_detect(0.0, &Vector6::zeros(), &c, &gate).unwrap());
        assert!(!fault_detect(2e-4, &Vector6::zeros(), &c, &gate).unwrap());
        let mut e = Vector6::zeros();
        e[2] = 1.5 * gate.e_th;
        assert!(!fault_detect(0.0, &e, &c, &gate).unwrap());
    }

    #[test]
    fn mode_parsing() {
        for m in [AdaptiveMode::Innovation, AdaptiveMode::Residual, AdaptiveMode::Off] {
            assert_eq!(m.to_string().parse::<AdaptiveMode>().unwrap(), m);
        }
        assert!("bogus".parse::<AdaptiveMode>().is_err());
    }
}

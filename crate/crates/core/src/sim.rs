//! Scenario-driven truth, sensor synthesis, and the closed-loop harness.
//!
//! Truth is integrated at the IMU rate with the nonlinear model. Gyro bias
//! random-walks; accelerometer bias and the two lever arms are constant.
//! Scans are subsets of the model cloud expressed in the sensor frame through
//! the true pose, so registration at the true pose reproduces the injected
//! noise and nothing else.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::akf::{
    AdaptiveMode, EpochOutput, FaultGate, FilterConfig, MeasurementNoise, Navigator, CHI2_6_999,
};
use crate::attitude::{error_quat, Quaternion};
use crate::config::{self, KeyValues};
use crate::dynamics::{
    idx, propagate_full, FullState, ImuNoise, ImuSample, NavState, OrbitParams, MU_EARTH,
    STATION_RADIUS,
};
use crate::error::{Error, Result};
use crate::icp::{sample_model, Frame, ModelSet, PointCloud, Pose};
use crate::io;
use crate::lindisc::{Discretization, StateMatrix};
use crate::report::EpochRecord;

/// Standard deviations of the initial estimate error (and of `P₀`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSigmas {
    pub pos: f64,
    pub vel: f64,
    /// On `q̃_v`, i.e. roughly half the rotation angle.
    pub att: f64,
    pub bg: f64,
    pub ba: f64,
    pub rho: f64,
}

impl Default for InitSigmas {
    fn default() -> Self {
        Self {
            pos: 0.01,
            vel: 1e-3,
            att: 5e-4,
            bg: 1e-3,
            ba: 2e-3,
            rho: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    /// ASCII STL (sampled) or XYZ (used as is).
    pub model: PathBuf,
    pub model_resolution: f64,
    pub duration: f64,
    pub imu_rate: f64,
    pub scan_rate: f64,
    pub scan_points: usize,
    pub orbit: OrbitParams,
    pub r0: Vector3<f64>,
    pub v0: Vector3<f64>,
    pub q0: Quaternion,
    pub rho1: Vector3<f64>,
    pub rho2: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    /// Piecewise-constant body-frame specific force, `(t_start, f)`.
    pub thrust: Vec<(f64, Vector3<f64>)>,
    /// Piecewise-constant body angular rate, `(t_start, ω)`.
    pub body_rate: Vec<(f64, Vector3<f64>)>,
    pub imu_noise: ImuNoise,
    pub sigma_scan: f64,
    pub outlier_fraction: f64,
    /// Probability that a frame is contaminated with outliers.
    pub outlier_rate: f64,
    pub dropout: Vec<(f64, f64)>,
    /// Half-angle of the visible cone around the sensor direction, rad.
    pub view_half_angle: Option<f64>,
    pub init: InitSigmas,
    pub filter: FilterConfig,
}

fn profile_at(profile: &[(f64, Vector3<f64>)], t: f64) -> Vector3<f64> {
    profile
        .iter()
        .take_while(|(t0, _)| *t0 <= t)
        .last()
        .map_or_else(Vector3::zeros, |(_, v)| *v)
}

fn sym_diag(values: [f64; 6]) -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::from_row_slice(&values))
}

impl Scenario {
    /// Reads a scenario file, optionally overlaid with a filter file whose
    /// keys may omit the `filter.` prefix.
    pub fn load(path: &Path, filter_file: Option<&Path>) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        if let Some(f) = filter_file {
            kv.merge(KeyValues::load(f)?, "filter.");
        }
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(kv, base)
    }

    /// Builds a scenario from parsed keys; relative model paths resolve
    /// against `base`. Every key must be recognised.
    pub fn from_kv(mut kv: KeyValues, base: &Path) -> Result<Self> {
        let model: PathBuf = kv
            .take::<String>("model")?
            .ok_or_else(|| Error::Config(format!("{}: missing key 'model'", kv.source().display())))?
            .into();
        let model = if model.is_absolute() { model } else { base.join(model) };
        let mu = kv.take_or("mu", MU_EARTH)?;
        let radius = kv.take_or("station_radius", STATION_RADIUS)?;
        let orbit = OrbitParams::circular(radius, mu);
        let imu_noise = ImuNoise {
            sigma_a: kv.take_or("sigma_a", 2e-3)?,
            sigma_g: kv.take_or("sigma_g", 2e-4)?,
            sigma_b: kv.take_or("sigma_b", 2e-6)?,
            sigma_ba: 0.0,
        };
        let model_resolution = kv.take_or("model_resolution", 0.05)?;
        let init = InitSigmas {
            pos: kv.take_or("init_sigma_pos", InitSigmas::default().pos)?,
            vel: kv.take_or("init_sigma_vel", InitSigmas::default().vel)?,
            att: kv.take_or("init_sigma_att", InitSigmas::default().att)?,
            bg: kv.take_or("init_sigma_bg", InitSigmas::default().bg)?,
            ba: kv.take_or("init_sigma_ba", InitSigmas::default().ba)?,
            rho: kv.take_or("init_sigma_rho", InitSigmas::default().rho)?,
        };
        let sigma_scan = kv.take_or("sigma_scan", 1e-3)?;
        let filter = filter_from_kv(&mut kv, model_resolution, imu_noise, orbit, sigma_scan)?;
        let view = kv.take::<String>("view_half_angle")?;
        let view_half_angle = match view.as_deref() {
            None | Some("none") => None,
            Some(v) => Some(v.parse::<f64>().map_err(|_| {
                Error::Config(format!("key 'view_half_angle': not a number: {v:?}"))
            })?),
        };
        let scn = Self {
            seed: kv.take_or("seed", 1)?,
            model,
            model_resolution,
            duration: kv.take_or("duration", 300.0)?,
            imu_rate: kv.take_or("imu_rate", 50.0)?,
            scan_rate: kv.take_or("scan_rate", 2.0)?,
            scan_points: kv.take_or("scan_points", 300)?,
            orbit,
            r0: kv.take_vec3("r0")?.unwrap_or_else(|| Vector3::new(0.0, -20.0, 0.0)),
            v0: kv.take_vec3("v0")?.unwrap_or_else(Vector3::zeros),
            q0: kv.take_quat("q0")?.unwrap_or_else(Quaternion::identity),
            rho1: kv.take_vec3("rho1")?.unwrap_or_else(Vector3::zeros),
            rho2: kv.take_vec3("rho2")?.unwrap_or_else(Vector3::zeros),
            bias_accel: kv.take_vec3("bias_accel")?.unwrap_or_else(Vector3::zeros),
            bias_gyro: kv.take_vec3("bias_gyro")?.unwrap_or_else(Vector3::zeros),
            thrust: kv.take_profile("thrust")?.unwrap_or_default(),
            body_rate: kv.take_profile("body_rate")?.unwrap_or_default(),
            imu_noise,
            sigma_scan,
            outlier_fraction: kv.take_or("outlier_fraction", 0.0)?,
            outlier_rate: kv.take_or("outlier_rate", 1.0)?,
            dropout: kv.take_intervals("dropout")?.unwrap_or_default(),
            view_half_angle,
            init,
            filter,
        };
        kv.finish()?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.duration > 0.0) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.imu_rate > 0.0 && self.scan_rate > 0.0) {
            return bad("rates must be positive".into());
        }
        if self.imu_rate < self.scan_rate {
            return bad(format!(
                "imu_rate {} below scan_rate {}",
                self.imu_rate, self.scan_rate
            ));
        }
        let ratio = self.imu_rate / self.scan_rate;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad(format!(
                "imu_rate / scan_rate must be an integer, got {ratio}"
            ));
        }
        if 1.0 / self.imu_rate > crate::dynamics::MAX_STEP {
            return bad("imu_rate must be at least 1 Hz".into());
        }
        if !(self.model_resolution > 0.0) {
            return bad("model_resolution must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) || !(0.0..=1.0).contains(&self.outlier_rate) {
            return bad("outlier_fraction and outlier_rate must lie in [0, 1]".into());
        }
        if !(self.sigma_scan >= 0.0) {
            return bad("sigma_scan must be non-negative".into());
        }
        for (name, s) in [
            ("init_sigma_pos", self.init.pos),
            ("init_sigma_vel", self.init.vel),
            ("init_sigma_att", self.init.att),
            ("init_sigma_bg", self.init.bg),
            ("init_sigma_ba", self.init.ba),
            ("init_sigma_rho", self.init.rho),
        ] {
            if !(s >= 0.0) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        self.imu_noise.validate()?;
        self.orbit.validate()?;
        self.filter.validate()
    }

    pub fn imu_dt(&self) -> f64 {
        1.0 / self.imu_rate
    }

    pub fn imu_count(&self) -> usize {
        (self.duration * self.imu_rate).round() as usize
    }

    pub fn scan_count(&self) -> usize {
        (self.duration * self.scan_rate).round() as usize
    }

    /// IMU samples per scan interval.
    pub fn ratio(&self) -> usize {
        (self.imu_rate / self.scan_rate).round() as usize
    }

    pub fn scan_time(&self, k: usize) -> f64 {
        k as f64 / self.scan_rate
    }

    pub fn in_dropout(&self, t: f64) -> bool {
        self.dropout.iter().any(|&(a, b)| t >= a && t <= b)
    }

    pub fn thrust_at(&self, t: f64) -> Vector3<f64> {
        profile_at(&self.thrust, t)
    }

    pub fn body_rate_at(&self, t: f64) -> Vector3<f64> {
        profile_at(&self.body_rate, t)
    }

    /// Initial covariance matching the initial-error draw.
    pub fn p0(&self) -> StateMatrix {
        let mut p = StateMatrix::zeros();
        let blocks = [
            (idx::R, self.init.pos),
            (idx::V, self.init.vel),
            (idx::Q, self.init.att),
            (idx::BG, self.init.bg),
            (idx::BA, self.init.ba),
            (idx::RHO1, self.init.rho),
            (idx::RHO2, self.init.rho),
        ];
        for (off, s) in blocks {
            for i in 0..3 {
                p[(off + i, off + i)] = s * s;
            }
        }
        p
    }

    pub fn true_initial_state(&self) -> FullState {
        FullState {
            r: self.r0,
            r_dot: self.v0,
            q: self.q0.renormalize(),
            b_g: self.bias_gyro,
            b_a: self.bias_accel,
            rho1: self.rho1,
            rho2: self.rho2,
        }
    }

    /// Effective configuration as `key = value` text; loading it back yields
    /// an identical scenario.
    pub fn to_config_string(&self) -> String {
        let f = &self.filter;
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("model = {}", self.model.display()),
            format!("model_resolution = {}", self.model_resolution),
            format!("duration = {}", self.duration),
            format!("imu_rate = {}", self.imu_rate),
            format!("scan_rate = {}", self.scan_rate),
            format!("scan_points = {}", self.scan_points),
            format!("mu = {}", self.orbit.mu),
            format!("station_radius = {}", self.orbit.r_e.norm()),
            format!("r0 = {}", config::format_vec3(&self.r0)),
            format!("v0 = {}", config::format_vec3(&self.v0)),
            format!("q0 = {}", config::format_quat(&self.q0)),
            format!("rho1 = {}", config::format_vec3(&self.rho1)),
            format!("rho2 = {}", config::format_vec3(&self.rho2)),
            format!("bias_accel = {}", config::format_vec3(&self.bias_accel)),
            format!("bias_gyro = {}", config::format_vec3(&self.bias_gyro)),
            format!("thrust = {}", config::format_profile(&self.thrust)),
            format!("body_rate = {}", config::format_profile(&self.body_rate)),
            format!("sigma_a = {}", self.imu_noise.sigma_a),
            format!("sigma_g = {}", self.imu_noise.sigma_g),
            format!("sigma_b = {}", self.imu_noise.sigma_b),
            format!("sigma_scan = {}", self.sigma_scan),
            format!("outlier_fraction = {}", self.outlier_fraction),
            format!("outlier_rate = {}", self.outlier_rate),
            format!("dropout = {}", config::format_intervals(&self.dropout)),
            format!(
                "view_half_angle = {}",
                self.view_half_angle.map_or("none".to_string(), |v| v.to_string())
            ),
            format!("init_sigma_pos = {}", self.init.pos),
            format!("init_sigma_vel = {}", self.init.vel),
            format!("init_sigma_att = {}", self.init.att),
            format!("init_sigma_bg = {}", self.init.bg),
            format!("init_sigma_ba = {}", self.init.ba),
            format!("init_sigma_rho = {}", self.init.rho),
            format!("filter.window = {}", f.window),
            format!("filter.mode = {}", f.mode),
            format!("filter.eps_th = {}", f.gate.eps_th),
            format!("filter.e_th = {}", f.gate.e_th),
            format!("filter.i_max = {}", f.gate.i_max),
            format!("filter.discretization = {}", f.discretization),
            format!("filter.sigma_a = {}", f.noise.sigma_a),
            format!("filter.sigma_g = {}", f.noise.sigma_g),
            format!("filter.sigma_b = {}", f.noise.sigma_b),
            format!("filter.sigma_ba = {}", f.noise.sigma_ba),
            format!("filter.r0_pos = {}", f.r0[(0, 0)].sqrt()),
            format!("filter.r0_att = {}", f.r0[(3, 3)].sqrt()),
            format!(
                "filter.measurement_noise = {}",
                match f.measurement_noise {
                    MeasurementNoise::Fixed(_) => "fixed",
                    MeasurementNoise::ScanGeometry { .. } => "scan_geometry",
                }
            ),
            format!(
                "filter.max_corr_dist = {}",
                f.max_corr_dist.map_or("none".to_string(), |v| v.to_string())
            ),
        ];
        lines.push(String::new());
        lines.join("\n")
    }
}

fn filter_from_kv(
    kv: &mut KeyValues,
    resolution: f64,
    noise: ImuNoise,
    orbit: OrbitParams,
    sigma_scan: f64,
) -> Result<FilterConfig> {
    let d = FilterConfig::with_resolution(resolution);
    let r0_pos: f64 = kv.take_or("filter.r0_pos", d.r0[(0, 0)].sqrt())?;
    let r0_att: f64 = kv.take_or("filter.r0_att", d.r0[(3, 3)].sqrt())?;
    let r0 = sym_diag([
        r0_pos * r0_pos,
        r0_pos * r0_pos,
        r0_pos * r0_pos,
        r0_att * r0_att,
        r0_att * r0_att,
        r0_att * r0_att,
    ]);
    let measurement_noise = match kv
        .take::<String>("filter.measurement_noise")?
        .as_deref()
        .unwrap_or("fixed")
    {
        "fixed" => MeasurementNoise::Fixed(r0),
        "scan_geometry" => MeasurementNoise::ScanGeometry { sigma: sigma_scan },
        other => {
            return Err(Error::Config(format!(
                "key 'filter.measurement_noise': expected fixed or scan_geometry, got {other:?}"
            )))
        }
    };
    let max_corr_dist = match kv.take::<String>("filter.max_corr_dist")?.as_deref() {
        None | Some("none") => None,
        Some(v) => Some(v.parse::<f64>().map_err(|_| {
            Error::Config(format!("key 'filter.max_corr_dist': not a number: {v:?}"))
        })?),
    };
    Ok(FilterConfig {
        window: kv.take_or("filter.window", d.window)?,
        mode: kv.take_or::<AdaptiveMode>("filter.mode", d.mode)?,
        gate: FaultGate::new(
            kv.take_or("filter.eps_th", d.gate.eps_th)?,
            kv.take_or("filter.e_th", CHI2_6_999.sqrt())?,
            kv.take_or("filter.i_max", d.gate.i_max)?,
        ),
        r0,
        measurement_noise,
        discretization: kv.take_or::<Discretization>("filter.discretization", d.discretization)?,
        noise: ImuNoise {
            sigma_a: kv.take_or("filter.sigma_a", noise.sigma_a)?,
            sigma_g: kv.take_or("filter.sigma_g", noise.sigma_g)?,
            sigma_b: kv.take_or("filter.sigma_b", noise.sigma_b)?,
            sigma_ba: kv.take_or("filter.sigma_ba", 0.0)?,
        },
        orbit,
        max_corr_dist,
    })
}

/// Loads the model cloud: STL files are sampled at the scenario resolution
/// with the scenario seed, XYZ files are used point for point.
pub fn load_model(scn: &Scenario) -> Result<ModelSet> {
    let text = io::read_to_string(&scn.model)?;
    let points = if io::is_stl(&scn.model, &text) {
        let triangles = io::parse_stl(&scn.model, &text)?;
        sample_model(&triangles, scn.model_resolution, scn.seed)?.points
    } else {
        io::parse_xyz(&scn.model, &text)?
    };
    ModelSet::new(points)
}

/// True state at one IMU instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthRecord {
    pub t: f64,
    /// Includes the current gyro bias and the constant parameters.
    pub state: FullState,
    /// Body-frame specific force and angular rate applied over the next step.
    pub specific_force: Vector3<f64>,
    pub angular_rate: Vector3<f64>,
}

impl TruthRecord {
    /// `(A(q)ᵀ(r − ϱ₂) + ϱ₁, q)`.
    pub fn pose(&self) -> Pose {
        let x = &self.state;
        let a = x.q.dcm();
        Pose::new(x.q, a.transpose() * (x.r - x.rho2) + x.rho1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanFrame {
    pub t: f64,
    pub cloud: PointCloud,
}

/// Independent random streams for one replicate.
pub struct Streams {
    pub truth: ChaCha8Rng,
    pub imu: ChaCha8Rng,
    pub scan: ChaCha8Rng,
    pub init: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64, replicate: u64) -> Self {
        let make = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(1 + 4 * replicate + k);
            r
        };
        Self {
            truth: make(0),
            imu: make(1),
            scan: make(2),
            init: make(3),
        }
    }
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

/// RK4 truth at the IMU rate. The gyro bias walks with intensity `σ_b`.
pub fn propagate_truth(scn: &Scenario, rng: &mut ChaCha8Rng) -> Result<Vec<TruthRecord>> {
    let n = scn.imu_count();
    let dt = scn.imu_dt();
    let x0 = scn.true_initial_state();
    let mut kin = FullState {
        b_g: Vector3::zeros(),
        b_a: Vector3::zeros(),
        ..x0
    };
    let mut b_g = x0.b_g;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let specific_force = scn.thrust_at(t);
        let angular_rate = scn.body_rate_at(t);
        out.push(TruthRecord {
            t,
            state: FullState {
                b_g,
                b_a: x0.b_a,
                rho1: x0.rho1,
                rho2: x0.rho2,
                ..kin
            },
            specific_force,
            angular_rate,
        });
        let u = ImuSample::new(t, specific_force, angular_rate);
        kin = propagate_full(&kin, &u, dt, &scn.orbit)?;
        b_g += gauss3(rng) * (scn.imu_noise.sigma_b * dt.sqrt());
    }
    Ok(out)
}

/// Sensor outputs `u_a = f − b_a − ε_a`, `u_g = ω − b_g − ε_g`, with white
/// noise of standard deviation `σ/√dt` per sample.
pub fn synth_imu(truth: &[TruthRecord], scn: &Scenario, rng: &mut ChaCha8Rng) -> Vec<ImuSample> {
    let dt = scn.imu_dt();
    let sa = scn.imu_noise.sigma_a / dt.sqrt();
    let sg = scn.imu_noise.sigma_g / dt.sqrt();
    truth
        .iter()
        .map(|rec| {
            let ea = gauss3(rng) * sa;
            let eg = gauss3(rng) * sg;
            ImuSample::new(
                rec.t,
                rec.specific_force - rec.state.b_a - ea,
                rec.angular_rate - rec.state.b_g - eg,
            )
        })
        .collect()
}

/// One synthetic scan of `model` at the true pose of `truth`.
pub fn synth_scan(
    truth: &TruthRecord,
    model: &ModelSet,
    scn: &Scenario,
    rng: &mut ChaCha8Rng,
) -> ScanFrame {
    let t = truth.t;
    // Draws happen unconditionally so a dropout does not shift later frames.
    let outlier_roll: f64 = rng.random();
    let pose = truth.pose();
    let pts = model.points();
    let visible: Vec<usize> = match scn.view_half_angle {
        None => (0..pts.len()).collect(),
        Some(half) => {
            let centroid = model.cloud().centroid();
            let look = pose.rho - centroid;
            let cos_lim = half.cos();
            (0..pts.len())
                .filter(|&i| {
                    let d = pts[i] - centroid;
                    let denom = d.norm() * look.norm();
                    denom == 0.0 || d.dot(&look) / denom >= cos_lim
                })
                .collect()
        }
    };
    let m = scn.scan_points.min(visible.len());
    let chosen = index::sample(rng, visible.len(), m);
    let at = pose.q.dcm().transpose();
    let mut points: Vec<Vector3<f64>> = chosen
        .iter()
        .map(|j| at * (pts[visible[j]] - pose.rho) + gauss3(rng) * scn.sigma_scan)
        .collect();
    if scn.outlier_fraction > 0.0 && outlier_roll < scn.outlier_rate && !points.is_empty() {
        let lo = points.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
        let hi = points.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
        let count = (scn.outlier_fraction * points.len() as f64).round() as usize;
        let victims = index::sample(rng, points.len(), count.min(points.len()));
        for v in victims.iter() {
            points[v] = Vector3::from_fn(|k, _| lo[k] + rng.random::<f64>() * (hi[k] - lo[k]));
        }
    }
    if scn.in_dropout(t) {
        points.clear();
    }
    ScanFrame {
        t,
        cloud: PointCloud::new(points, Frame::Sensor),
    }
}

/// Initial estimate drawn around the truth with the scenario's sigmas.
pub fn initial_estimate(scn: &Scenario, truth0: &FullState, rng: &mut ChaCha8Rng) -> NavState {
    let s = &scn.init;
    let dq = gauss3(rng) * s.att;
    let q_hat = (Quaternion::from_vector_part(&dq).conjugate() * truth0.q).renormalize();
    NavState {
        r: truth0.r + gauss3(rng) * s.pos,
        r_dot: truth0.r_dot + gauss3(rng) * s.vel,
        q_tilde_v: Vector3::zeros(),
        b_g: truth0.b_g + gauss3(rng) * s.bg,
        b_a: truth0.b_a + gauss3(rng) * s.ba,
        rho1: truth0.rho1 + gauss3(rng) * s.rho,
        rho2: truth0.rho2 + gauss3(rng) * s.rho,
        q_ref: q_hat,
    }
}

/// 6-dof pose error `(ρ̂ − ρ, vec(q̂ ⊗ q*))`, both estimate minus truth.
pub fn pose_error(est: &Pose, truth: &Pose) -> Vector6<f64> {
    let mut e = Vector6::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&(est.rho - truth.rho));
    e.fixed_rows_mut::<3>(3).copy_from(&error_quat(&est.q, &truth.q).v);
    e
}

fn nees(e: &Vector6<f64>, cov: &Matrix6<f64>) -> f64 {
    cov.cholesky()
        .map_or(f64::NAN, |ch| e.dot(&ch.solve(e)))
}

fn sd(p: &StateMatrix, off: usize) -> Vector3<f64> {
    Vector3::new(
        p[(off, off)].max(0.0).sqrt(),
        p[(off + 1, off + 1)].max(0.0).sqrt(),
        p[(off + 2, off + 2)].max(0.0).sqrt(),
    )
}

pub fn epoch_record(out: &EpochOutput, truth: &TruthRecord) -> EpochRecord {
    let true_pose = truth.pose();
    let x = &out.posterior.x;
    let p = &out.posterior.p;
    EpochRecord {
        t: out.t,
        true_rho: true_pose.rho,
        true_q: true_pose.q,
        est_rho: out.pose.rho,
        est_q: out.pose.q,
        phi: out.phi,
        epsilon: out.epsilon,
        iterations: out.iterations,
        nees: nees(&pose_error(&out.pose, &true_pose), &out.pose_cov),
        trace_r: out.r_hat.trace(),
        est_bg: x.b_g,
        est_ba: x.b_a,
        est_rho1: x.rho1,
        est_rho2: x.rho2,
        true_bg: truth.state.b_g,
        true_ba: truth.state.b_a,
        true_rho1: truth.state.rho1,
        true_rho2: truth.state.rho2,
        sd_bg: sd(p, idx::BG),
        sd_ba: sd(p, idx::BA),
        sd_rho1: sd(p, idx::RHO1),
        sd_rho2: sd(p, idx::RHO2),
    }
}

/// Truth, IMU and scans for one replicate.
#[derive(Clone, Debug)]
pub struct SimData {
    pub truth: Vec<TruthRecord>,
    pub imu: Vec<ImuSample>,
    pub scans: Vec<ScanFrame>,
}

pub fn simulate(scn: &Scenario, model: &ModelSet, replicate: u64) -> Result<SimData> {
    let mut streams = Streams::new(scn.seed, replicate);
    let truth = propagate_truth(scn, &mut streams.truth)?;
    let imu = synth_imu(&truth, scn, &mut streams.imu);
    let ratio = scn.ratio();
    let scans = (0..scn.scan_count())
        .map(|k| synth_scan(&truth[k * ratio], model, scn, &mut streams.scan))
        .collect();
    Ok(SimData { truth, imu, scans })
}

/// Runs the filter over one replicate, handing each epoch to `observe`
/// together with the truth at that instant.
pub fn run_closed_loop_with<F>(
    scn: &Scenario,
    model: &ModelSet,
    replicate: u64,
    mut observe: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochOutput, &TruthRecord),
{
    let data = simulate(scn, model, replicate)?;
    let mut streams = Streams::new(scn.seed, replicate);
    let x0 = initial_estimate(scn, &data.truth[0].state, &mut streams.init);
    let mut nav = Navigator::new(x0, scn.p0(), scn.filter.clone())?;
    let ratio = scn.ratio();
    let n_imu = data.imu.len();
    let mut records = Vec::with_capacity(data.scans.len());
    for (k, scan) in data.scans.iter().enumerate() {
        let lo = k * ratio;
        let hi = ((k + 1) * ratio).min(n_imu);
        let t_end = scn.scan_time(k + 1).min(n_imu as f64 * scn.imu_dt());
        let out = nav.navigation_step(scan.t, &scan.cloud, model, &data.imu[lo..hi], t_end)?;
        let truth = &data.truth[lo];
        observe(&out, truth);
        records.push(epoch_record(&out, truth));
    }
    Ok(records)
}

pub fn run_closed_loop(scn: &Scenario, model: &ModelSet, replicate: u64) -> Result<Vec<EpochRecord>> {
    run_closed_loop_with(scn, model, replicate, |_, _| {})
}

/// Independent replicates `0..runs` in parallel, returned in order.
pub fn run_monte_carlo(scn: &Scenario, model: &ModelSet, runs: usize) -> Result<Vec<Vec<EpochRecord>>> {
    (0..runs as u64)
        .into_par_iter()
        .map(|j| run_closed_loop(scn, model, j))
        .collect()
}

/// Writes `truth.csv`, `imu.csv` and `scans/scan_NNNNN.xyz` under `out`.
pub fn write_simulation(out: &Path, data: &SimData) -> Result<()> {
    use std::fmt::Write as _;
    let mut truth = String::from(
        "t,r_x,r_y,r_z,v_x,v_y,v_z,q_x,q_y,q_z,q_w,bg_x,bg_y,bg_z,ba_x,ba_y,ba_z,rho1_x,rho1_y,rho1_z,rho2_x,rho2_y,rho2_z\n",
    );
    for rec in &data.truth {
        let s = &rec.state;
        let _ = write!(truth, "{}", rec.t);
        for v in [&s.r, &s.r_dot] {
            let _ = write!(truth, ",{},{},{}", v.x, v.y, v.z);
        }
        let _ = write!(truth, ",{},{},{},{}", s.q.v.x, s.q.v.y, s.q.v.z, s.q.w);
        for v in [&s.b_g, &s.b_a, &s.rho1, &s.rho2] {
            let _ = write!(truth, ",{},{},{}", v.x, v.y, v.z);
        }
        truth.push('\n');
    }
    io::write_string(&out.join("truth.csv"), &truth)?;
    let mut imu = String::from("t,ua_x,ua_y,ua_z,ug_x,ug_y,ug_z\n");
    for u in &data.imu {
        let _ = writeln!(
            imu,
            "{},{},{},{},{},{},{}",
            u.t, u.u_a.x, u.u_a.y, u.u_a.z, u.u_g.x, u.u_g.y, u.u_g.z
        );
    }
    io::write_string(&out.join("imu.csv"), &imu)?;
    let dir = out.join("scans");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (k, scan) in data.scans.iter().enumerate() {
        io::write_scan(
            &dir.join(format!("scan_{k:05}.xyz")),
            &io::ScanFile {
                t: scan.t,
                points: scan.cloud.points.clone(),
            },
        )?;
    }
    Ok(())
}

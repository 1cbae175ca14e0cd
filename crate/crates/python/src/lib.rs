//! Python bindings: quaternions, poses, registration and scenario runs.

use std::path::PathBuf;

use nalgebra::Vector3;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use relnav::akf::AdaptiveMode;
use relnav::attitude::{self, Quaternion as CoreQuat};
use relnav::dynamics::{self, OrbitParams};
use relnav::icp::{self, Frame, IcpConfig, ModelSet, PointCloud, Pose as CorePose};
use relnav::report::Summary as CoreSummary;
use relnav::{mockup, sim, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Singularity(_) | Error::Degenerate(_) => {
            PyArithmeticError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn cloud(points: Vec<[f64; 3]>, frame: Frame) -> PointCloud {
    PointCloud::new(points.into_iter().map(v3).collect(), frame)
}

/// Unit quaternion stored as `(x, y, z, w)`, vector part first.
#[pyclass(frozen, from_py_object)]
#[derive(Clone, Copy)]
struct Quaternion(CoreQuat);

#[pymethods]
impl Quaternion {
    /// Normalizes its input; a zero quaternion is an error.
    #[new]
    fn new(x: f64, y: f64, z: f64, w: f64) -> PyResult<Self> {
        CoreQuat::normalized(Vector3::new(x, y, z), w).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(CoreQuat::identity())
    }

    #[staticmethod]
    fn from_rotation_vector(phi: [f64; 3]) -> Self {
        Self(CoreQuat::from_rotation_vector(&v3(phi)))
    }

    fn components(&self) -> (f64, f64, f64, f64) {
        (self.0.v.x, self.0.v.y, self.0.v.z, self.0.w)
    }

    fn conjugate(&self) -> Self {
        Self(self.0.conjugate())
    }

    /// `A(q)`, row-major.
    fn rotation_matrix(&self) -> PyResult<[[f64; 3]; 3]> {
        let a = self.0.to_rotation_matrix().map_err(to_py)?;
        Ok(std::array::from_fn(|i| std::array::from_fn(|j| a[(i, j)])))
    }

    /// `q ⊗ v ⊗ q*`, equal to `A(q)ᵀ v`.
    fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        arr(&self.0.rotate(&v3(v)))
    }

    /// Rotation angle to `other`, rad.
    fn angle_to(&self, other: &Quaternion) -> f64 {
        self.0.angle_to(&other.0)
    }

    /// `self ⊗ reference*` in the `w ≥ 0` hemisphere.
    fn error_to(&self, reference: &Quaternion) -> Self {
        Self(attitude::error_quat(&self.0, &reference.0))
    }

    fn __mul__(&self, other: &Quaternion) -> Self {
        Self(self.0 * other.0)
    }

    fn __repr__(&self) -> String {
        let (x, y, z, w) = self.components();
        format!("Quaternion({x}, {y}, {z}, {w})")
    }
}

/// Rigid transform `d = A(q) c + rho`.
#[pyclass(frozen, from_py_object)]
#[derive(Clone, Copy)]
struct Pose(CorePose);

#[pymethods]
impl Pose {
    #[new]
    #[pyo3(signature = (q = None, rho = [0.0; 3]))]
    fn new(q: Option<Quaternion>, rho: [f64; 3]) -> Self {
        Self(CorePose::new(q.map_or_else(CoreQuat::identity, |q| q.0), v3(rho)))
    }

    #[getter]
    fn q(&self) -> Quaternion {
        Quaternion(self.0.q)
    }

    #[getter]
    fn rho(&self) -> [f64; 3] {
        arr(&self.0.rho)
    }

    fn apply(&self, c: [f64; 3]) -> [f64; 3] {
        arr(&self.0.apply(&v3(c)))
    }

    fn __repr__(&self) -> String {
        let (x, y, z, w) = Quaternion(self.0.q).components();
        let r = self.0.rho;
        format!("Pose(q=({x}, {y}, {z}, {w}), rho=({}, {}, {}))", r.x, r.y, r.z)
    }
}

/// Outcome of `icp_register`.
#[pyclass(frozen, get_all)]
struct IcpResult {
    pose: Pose,
    epsilon: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

/// Least-squares rigid transform taking `c` onto `d`; returns `(pose, epsilon)`.
#[pyfunction]
fn horn_align(c: Vec<[f64; 3]>, d: Vec<[f64; 3]>) -> PyResult<(Pose, f64)> {
    let a = icp::horn_align(&cloud(c, Frame::Sensor), &cloud(d, Frame::Model)).map_err(to_py)?;
    Ok((Pose(a.pose), a.epsilon))
}

#[pyfunction]
#[pyo3(signature = (scan, model, pose0 = None, eps_th = 1e-8, i_max = 50))]
fn icp_register(
    py: Python<'_>,
    scan: Vec<[f64; 3]>,
    model: Vec<[f64; 3]>,
    pose0: Option<Pose>,
    eps_th: f64,
    i_max: usize,
) -> PyResult<IcpResult> {
    let scan = cloud(scan, Frame::Sensor);
    let model = ModelSet::new(model.into_iter().map(v3).collect()).map_err(to_py)?;
    let start = pose0.map_or_else(CorePose::identity, |p| p.0);
    let r = py
        .detach(|| icp::icp_register(&scan, &model, &start, &IcpConfig::new(eps_th, i_max)))
        .map_err(to_py)?;
    Ok(IcpResult {
        pose: Pose(r.pose),
        epsilon: r.epsilon,
        iterations: r.iterations,
        converged: r.converged,
        history: r.history,
    })
}

/// Surface samples of the built-in target mesh.
#[pyfunction]
#[pyo3(signature = (resolution = 0.05, seed = 0))]
fn mockup_points(resolution: f64, seed: u64) -> PyResult<Vec<[f64; 3]>> {
    let c = icp::sample_model(&mockup::mockup_triangles(), resolution, seed).map_err(to_py)?;
    Ok(c.points.iter().map(arr).collect())
}

/// Relative gravity and frame acceleration at `r` for the default orbit.
#[pyfunction]
fn psi(r: [f64; 3]) -> PyResult<[f64; 3]> {
    dynamics::psi(&v3(r), &OrbitParams::default()).map(|a| arr(&a)).map_err(to_py)
}

/// Default orbit rate, rad/s.
#[pyfunction]
fn orbit_rate() -> f64 {
    OrbitParams::default().n
}

/// Aggregate statistics of one closed-loop run.
#[pyclass(frozen, get_all)]
struct Summary {
    epochs: usize,
    phi_rate: f64,
    rmse_position: f64,
    rmse_attitude: f64,
    mean_nees: f64,
    mean_iterations: f64,
    text: String,
}

impl From<CoreSummary> for Summary {
    fn from(s: CoreSummary) -> Self {
        Self {
            epochs: s.epochs,
            phi_rate: s.phi_rate,
            rmse_position: s.rmse_position,
            rmse_attitude: s.rmse_attitude,
            mean_nees: s.mean_nees,
            mean_iterations: s.mean_iterations,
            text: s.to_string(),
        }
    }
}

#[pyclass]
struct Scenario(sim::Scenario);

#[pymethods]
impl Scenario {
    #[staticmethod]
    #[pyo3(signature = (path, filter = None))]
    fn load(path: PathBuf, filter: Option<PathBuf>) -> PyResult<Self> {
        sim::Scenario::load(&path, filter.as_deref()).map(Self).map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.0.duration
    }

    #[setter]
    fn set_duration(&mut self, d: f64) {
        self.0.duration = d;
    }

    /// `"innovation"`, `"residual"` or `"off"`.
    #[getter]
    fn mode(&self) -> String {
        self.0.filter.mode.to_string()
    }

    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.0.filter.mode = mode.parse::<AdaptiveMode>().map_err(to_py)?;
        Ok(())
    }

    fn to_config_string(&self) -> String {
        self.0.to_config_string()
    }

    /// Closed-loop run of one replicate; returns the summary and the CSV log.
    #[pyo3(signature = (replicate = 0))]
    fn run(&self, py: Python<'_>, replicate: u64) -> PyResult<(Summary, String)> {
        let scn = self.0.clone();
        let records = py
            .detach(|| {
                let model = sim::load_model(&scn)?;
                sim::run_closed_loop(&scn, &model, replicate)
            })
            .map_err(to_py)?;
        let summary = CoreSummary::from_records(&records).map_err(to_py)?;
        Ok((summary.into(), relnav::report::format_csv(&records)))
    }
}

#[pymodule]
fn pyrelnav(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Quaternion>()?;
    m.add_class::<Pose>()?;
    m.add_class::<IcpResult>()?;
    m.add_class::<Summary>()?;
    m.add_class::<Scenario>()?;
    m.add_function(wrap_pyfunction!(horn_align, m)?)?;
    m.add_function(wrap_pyfunction!(icp_register, m)?)?;
    m.add_function(wrap_pyfunction!(mockup_points, m)?)?;
    m.add_function(wrap_pyfunction!(psi, m)?)?;
    m.add_function(wrap_pyfunction!(orbit_rate, m)?)?;
    Ok(())
}

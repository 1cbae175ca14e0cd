//! Point-set registration: nearest-neighbour correspondences against a model
//! cloud, closed-form quaternion alignment, and the iterative refinement loop.
//!
//! A pose `(q, ρ)` maps scan (sensor-frame) points onto the model frame as
//! `d = A(q) c + ρ`.

pub mod eigen;
pub mod kdtree;
pub mod sampling;

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3};

use crate::attitude::{skew, Quaternion};
use crate::error::{Error, Result};
use kdtree::KdTree;

pub use sampling::{sample_model, Triangle};

/// Which frame a cloud's coordinates are expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    Sensor,
    Model,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        centroid(&self.points)
    }

    /// Rejects empty clouds and non-finite coordinates.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("point cloud is empty".into()));
        }
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {i} is not finite")));
        }
        Ok(())
    }
}

/// Model cloud plus its spatial index, immutable once built.
#[derive(Clone, Debug)]
pub struct ModelSet {
    cloud: PointCloud,
    index: KdTree,
}

impl ModelSet {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        let cloud = PointCloud::new(points, Frame::Model);
        cloud.validate()?;
        let index = KdTree::build(&cloud.points);
        Ok(Self { cloud, index })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.cloud.points
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Index and squared distance of the model point closest to `p`.
    pub fn nearest(&self, p: &Vector3<f64>) -> (usize, f64) {
        self.index
            .nearest(p)
            .expect("model set is never empty")
    }
}

/// Rigid transform `d = A(q) c + ρ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub q: Quaternion,
    pub rho: Vector3<f64>,
}

impl Pose {
    pub fn new(q: Quaternion, rho: Vector3<f64>) -> Self {
        Self { q, rho }
    }

    pub fn identity() -> Self {
        Self::new(Quaternion::identity(), Vector3::zeros())
    }

    pub fn apply(&self, c: &Vector3<f64>) -> Vector3<f64> {
        self.q.dcm() * c + self.rho
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Outcome of one closed-form alignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub pose: Pose,
    /// Mean squared residual at the optimum, m².
    pub epsilon: f64,
    /// Largest eigenvalue of `W` is (numerically) repeated, so the rotation
    /// is not unique; collinear inputs land here.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpConfig {
    /// Fit-error threshold `ε_th`, m².
    pub eps_th: f64,
    /// Iteration cap `i_max`.
    pub i_max: usize,
    /// Optional rejection of pairs farther apart than this, m. Off by default.
    pub max_corr_dist: Option<f64>,
}

impl IcpConfig {
    pub fn new(eps_th: f64, i_max: usize) -> Self {
        Self {
            eps_th,
            i_max,
            max_corr_dist: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    pub pose: Pose,
    /// Fit error of the returned pose, m².
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Fit error after each iteration.
    pub history: Vec<f64>,
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    let sum: Vector3<f64> = points.iter().sum();
    sum / points.len() as f64
}

/// For each scan point, the nearest model point to its image under `coarse`.
pub fn correspondences(coarse: &Pose, scan: &PointCloud, model: &ModelSet) -> Result<PointCloud> {
    Ok(correspondence_pairs(coarse, scan, model)?.0)
}

fn correspondence_pairs(
    coarse: &Pose,
    scan: &PointCloud,
    model: &ModelSet,
) -> Result<(PointCloud, Vec<f64>)> {
    if scan.is_empty() {
        return Err(Error::InvalidArgument("scan cloud is empty".into()));
    }
    let a = coarse.q.dcm();
    let mut matched = Vec::with_capacity(scan.len());
    let mut dist2 = Vec::with_capacity(scan.len());
    for c in &scan.points {
        let (i, d2) = model.nearest(&(a * c + coarse.rho));
        matched.push(model.points()[i]);
        dist2.push(d2);
    }
    Ok((PointCloud::new(matched, Frame::Model), dist2))
}

/// `S = (1/m) Σ cᵢ dᵢᵀ − c̄ d̄ᵀ` with the two centroids.
pub fn cross_covariance(
    c: &PointCloud,
    d: &PointCloud,
) -> Result<(Matrix3<f64>, Vector3<f64>, Vector3<f64>)> {
    if c.len() != d.len() {
        return Err(Error::InvalidArgument(format!(
            "point sets differ in size ({} vs {})",
            c.len(),
            d.len()
        )));
    }
    if c.is_empty() {
        return Err(Error::InvalidArgument("point sets are empty".into()));
    }
    let c_bar = c.centroid();
    let d_bar = d.centroid();
    // Centred accumulation; algebraically identical to the raw-moment form.
    let mut s = Matrix3::zeros();
    for (ci, di) in c.points.iter().zip(&d.points) {
        s += (ci - c_bar) * (di - d_bar).transpose();
    }
    Ok((s / c.len() as f64, c_bar, d_bar))
}

/// Symmetric 4×4 weighting matrix in `(q_o, q_v)` block order:
/// `W = [[tr S, sᵀ], [s, S + Sᵀ − tr(S) I]]`, `s = (S₂₃−S₃₂, S₃₁−S₁₃, S₁₂−S₂₁)`.
pub fn w_matrix(s: &Matrix3<f64>) -> Matrix4<f64> {
    let tr = s.trace();
    let sv = Vector3::new(
        s[(1, 2)] - s[(2, 1)],
        s[(2, 0)] - s[(0, 2)],
        s[(0, 1)] - s[(1, 0)],
    );
    let lower = s + s.transpose() - Matrix3::identity() * tr;
    let mut w = Matrix4::zeros();
    w[(0, 0)] = tr;
    for i in 0..3 {
        w[(0, i + 1)] = sv[i];
        w[(i + 1, 0)] = sv[i];
        for j in 0..3 {
            w[(i + 1, j + 1)] = lower[(i, j)];
        }
    }
    w
}

/// Unit eigenvector of `W` for its largest eigenvalue, repacked as a
/// quaternion with non-negative scalar part. Also returns the eigenvalues
/// sorted in descending order.
pub fn max_eigen_quat(w: &Matrix4<f64>) -> Result<(Quaternion, [f64; 4])> {
    let scale = w.amax().max(f64::MIN_POSITIVE);
    if (w - w.transpose()).amax() > 1e-10 * scale {
        return Err(Error::InvalidArgument("W is not symmetric".into()));
    }
    let (values, vectors) = eigen::symmetric_eigen(w)?;
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let top = vectors.column(order[0]).normalize();
    let q = Quaternion::new(Vector3::new(top[1], top[2], top[3]), top[0]).canonical();
    let sorted = order.map(|i| values[i]);
    Ok((q, sorted))
}

/// `(1/m) Σ ‖A(q) cᵢ + ρ − dᵢ‖²`.
pub fn fit_error(pose: &Pose, c: &PointCloud, d: &PointCloud) -> Result<f64> {
    if c.len() != d.len() || c.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "fit error needs equal non-empty sets ({} vs {})",
            c.len(),
            d.len()
        )));
    }
    let a = pose.q.dcm();
    let total: f64 = c
        .points
        .iter()
        .zip(&d.points)
        .map(|(ci, di)| (a * ci + pose.rho - di).norm_squared())
        .sum();
    Ok(total / c.len() as f64)
}

/// Least-squares rigid transform taking `c` onto `d`.
///
/// The rotation is the dominant eigenvector of [`w_matrix`] built from the
/// cross-covariance; the translation is `ρ = d̄ − A(q) c̄`.
pub fn horn_align(c: &PointCloud, d: &PointCloud) -> Result<Alignment> {
    if c.len() != d.len() {
        return Err(Error::InvalidArgument(format!(
            "point sets differ in size ({} vs {})",
            c.len(),
            d.len()
        )));
    }
    if c.len() < 3 {
        return Err(Error::Degenerate(format!(
            "alignment needs at least 3 points, got {}",
            c.len()
        )));
    }
    let (s, c_bar, d_bar) = cross_covariance(c, d)?;
    let w = w_matrix(&s);
    let (q, values) = max_eigen_quat(&w)?;
    let spread = values[0] - values[3];
    let degenerate = spread <= 0.0 || (values[0] - values[1]) <= 1e-9 * spread;
    let rho = d_bar - q.dcm() * c_bar;
    let pose = Pose::new(q, rho);
    let epsilon = fit_error(&pose, c, d)?;
    Ok(Alignment {
        pose,
        epsilon,
        degenerate,
    })
}

/// Alternates correspondence search and closed-form alignment, feeding each
/// refined pose back as the next coarse pose, until `ε ≤ ε_th` or `i_max`
/// iterations have run. The last pose is returned either way.
pub fn icp_register(
    scan: &PointCloud,
    model: &ModelSet,
    pose0: &Pose,
    config: &IcpConfig,
) -> Result<IcpResult> {
    if config.i_max < 1 {
        return Err(Error::InvalidArgument("i_max must be at least 1".into()));
    }
    let mut pose = *pose0;
    let mut history = Vec::with_capacity(config.i_max);
    let mut epsilon = f64::INFINITY;
    for i in 1..=config.i_max {
        let (matched, dist2) = correspondence_pairs(&pose, scan, model)?;
        let alignment = match config.max_corr_dist {
            None => horn_align(scan, &matched)?,
            Some(max_d) => {
                let limit = max_d * max_d;
                let (kept_c, kept_d): (Vec<_>, Vec<_>) = scan
                    .points
                    .iter()
                    .zip(&matched.points)
                    .zip(&dist2)
                    .filter(|(_, &d2)| d2 <= limit)
                    .map(|((c, d), _)| (*c, *d))
                    .unzip();
                horn_align(
                    &PointCloud::new(kept_c, Frame::Sensor),
                    &PointCloud::new(kept_d, Frame::Model),
                )?
            }
        };
        pose = alignment.pose;
        epsilon = alignment.epsilon;
        history.push(epsilon);
        if epsilon <= config.eps_th {
            return Ok(IcpResult {
                pose,
                epsilon,
                iterations: i,
                converged: true,
                history,
            });
        }
    }
    Ok(IcpResult {
        pose,
        epsilon,
        iterations: config.i_max,
        converged: false,
        history,
    })
}

/// Covariance of the aligned pose under isotropic sensor noise `σ`, in
/// measurement order `(ρ, q̃_v)` where `q̃_v` is the vector part of the
/// left error quaternion `q_est ⊗ q_true*`.
///
/// Linearizing `A(δ⊗q) cᵢ + ρ + δρ − dᵢ` about exact correspondences gives,
/// after rotating by `Aᵀ`, the Jacobian `[I, −2[cᵢ×]]` on `(Aᵀδρ, δ_v)`.
pub fn pose_covariance(scan: &PointCloud, pose: &Pose, sigma: f64) -> Result<Matrix6<f64>> {
    if scan.len() < 3 {
        return Err(Error::Degenerate(format!(
            "pose covariance needs at least 3 points, got {}",
            scan.len()
        )));
    }
    let mut info = Matrix6::zeros();
    for c in &scan.points {
        let mut j = nalgebra::Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(c) * -2.0));
        info += j.transpose() * j;
    }
    let inv = info
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("scan geometry does not constrain the pose".into()))?;
    let mut t = Matrix6::zeros();
    t.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.q.dcm());
    t.fixed_view_mut::<3, 3>(3, 3).copy_from(&Matrix3::identity());
    let cov = t * inv * t.transpose() * (sigma * sigma);
    Ok((cov + cov.transpose()) * 0.5)
}

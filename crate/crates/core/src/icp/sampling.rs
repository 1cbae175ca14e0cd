//! Uniform surface sampling of triangle meshes.

use log::warn;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Frame, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangle {
    pub normal: Vector3<f64>,
    pub vertices: [Vector3<f64>; 3],
}

impl Triangle {
    pub fn new(normal: Vector3<f64>, vertices: [Vector3<f64>; 3]) -> Self {
        Self { normal, vertices }
    }

    /// Builds a facet with the right-handed normal of its vertex order.
    pub fn from_vertices(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>) -> Self {
        let n = (b - a).cross(&(c - a));
        let norm = n.norm();
        let normal = if norm > 0.0 { n / norm } else { Vector3::zeros() };
        Self::new(normal, [a, b, c])
    }

    pub fn area(&self) -> f64 {
        let [a, b, c] = self.vertices;
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Point at barycentric-style coordinates drawn from the unit square;
    /// uniform over the facet when `(u, v)` is uniform.
    pub fn point_at(&self, u: f64, v: f64) -> Vector3<f64> {
        let [a, b, c] = self.vertices;
        let su = u.sqrt();
        a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v)
    }
}

/// Draws about one point per `resolution²` of surface area.
///
/// Each facet receives `floor(area / res²)` points plus one more with
/// probability equal to the fractional remainder, and never fewer than one.
/// Facets with zero area are skipped with a warning.
pub fn sample_model(triangles: &[Triangle], resolution: f64, seed: u64) -> Result<PointCloud> {
    if triangles.is_empty() {
        return Err(Error::InvalidArgument("triangle list is empty".into()));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    let cell = resolution * resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut skipped = 0usize;
    for tri in triangles {
        let area = tri.area();
        if !(area > 0.0 && area.is_finite()) {
            skipped += 1;
            continue;
        }
        let expected = area / cell;
        let whole = expected.floor();
        let mut count = whole as usize;
        if rng.random::<f64>() < expected - whole {
            count += 1;
        }
        for _ in 0..count.max(1) {
            let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
            points.push(tri.point_at(u, v));
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} degenerate facet(s) while sampling");
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument(
            "every facet is degenerate; nothing to sample".into(),
        ));
    }
    Ok(PointCloud::new(points, Frame::Model))
}

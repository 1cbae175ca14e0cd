//! Procedural target mesh: a box bus with one solar wing, a dish on a short
//! mast, and a docking cone. Nothing about it is symmetric, so registration
//! against it has a unique answer.

use nalgebra::Vector3;

use crate::icp::Triangle;

fn quad(out: &mut Vec<Triangle>, a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>, d: Vector3<f64>) {
    out.push(Triangle::from_vertices(a, b, c));
    out.push(Triangle::from_vertices(a, c, d));
}

/// Axis-aligned box, outward normals.
fn cuboid(out: &mut Vec<Triangle>, lo: Vector3<f64>, hi: Vector3<f64>) {
    let p = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
    let (x0, y0, z0, x1, y1, z1) = (lo.x, lo.y, lo.z, hi.x, hi.y, hi.z);
    quad(out, p(x0, y0, z0), p(x0, y1, z0), p(x1, y1, z0), p(x1, y0, z0));
    quad(out, p(x0, y0, z1), p(x1, y0, z1), p(x1, y1, z1), p(x0, y1, z1));
    quad(out, p(x0, y0, z0), p(x1, y0, z0), p(x1, y0, z1), p(x0, y0, z1));
    quad(out, p(x0, y1, z0), p(x0, y1, z1), p(x1, y1, z1), p(x1, y1, z0));
    quad(out, p(x0, y0, z0), p(x0, y0, z1), p(x0, y1, z1), p(x0, y1, z0));
    quad(out, p(x1, y0, z0), p(x1, y1, z0), p(x1, y1, z1), p(x1, y0, z1));
}

/// Open cone with apex `apex`, base circle of radius `r` centred at `base`
/// in a plane normal to `axis`.
fn cone(out: &mut Vec<Triangle>, apex: Vector3<f64>, base: Vector3<f64>, r: f64, segments: usize) {
    let axis = (apex - base).normalize();
    let u = axis.cross(&Vector3::x()).try_normalize(1e-9).unwrap_or_else(|| axis.cross(&Vector3::y()).normalize());
    let v = axis.cross(&u);
    let rim = |k: usize| {
        let a = std::f64::consts::TAU * k as f64 / segments as f64;
        base + (u * a.cos() + v * a.sin()) * r
    };
    for k in 0..segments {
        out.push(Triangle::from_vertices(rim(k), rim(k + 1), apex));
        out.push(Triangle::from_vertices(base, rim(k + 1), rim(k)));
    }
}

pub fn mockup_triangles() -> Vec<Triangle> {
    let v = Vector3::new;
    let mut t = Vec::new();
    // Bus.
    cuboid(&mut t, v(-1.0, -0.6, -0.75), v(1.2, 0.6, 0.75));
    // Solar wing on +z only, with a yoke.
    cuboid(&mut t, v(-0.05, -0.05, 0.75), v(0.05, 0.05, 1.1));
    cuboid(&mut t, v(-0.6, -0.02, 1.1), v(0.9, 0.02, 3.6));
    // Dish on a mast, off-centre on +x.
    cuboid(&mut t, v(1.2, 0.15, 0.2), v(1.6, 0.25, 0.3));
    cone(&mut t, v(1.6, 0.2, 0.25), v(1.9, 0.2, 0.25), 0.45, 16);
    // Docking cone on -y, off-axis.
    cone(&mut t, v(-0.4, -0.6, -0.3), v(-0.4, -1.0, -0.3), 0.3, 12);
    // Star tracker baffle.
    cuboid(&mut t, v(-0.9, 0.3, -1.0), v(-0.7, 0.45, -0.75));
    t
}

#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::Vector3;
use proptest::prelude::*;
use relnav::attitude::Quaternion;
use relnav::sim::Scenario;

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn scenario(name: &str) -> Scenario {
    Scenario::load(&scenario_dir().join(name), None).expect("shipped scenario loads")
}

pub fn vec3(scale: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-scale..scale, -scale..scale, -scale..scale).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

pub fn unit_quat() -> impl Strategy<Value = Quaternion> {
    (vec3(1.0), -1.0..1.0f64)
        .prop_filter("away from zero", |(v, w)| v.norm_squared() + w * w > 1e-2)
        .prop_map(|(v, w)| Quaternion::normalized(v, w).unwrap())
}

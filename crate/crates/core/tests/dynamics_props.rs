mod common;

use nalgebra::Vector3;
use proptest::prelude::*;
use relnav::attitude::Quaternion;
use relnav::dynamics::{
    gamma, propagate_full, propagate_state, psi, FullState, ImuSample, NavState, OrbitParams,
    MU_EARTH, STATION_RADIUS,
};

use common::{unit_quat, vec3};

#[test]
fn psi_vanishes_at_origin_exactly() {
    assert_eq!(psi(&Vector3::zeros(), &OrbitParams::default()).unwrap(), Vector3::zeros());
}

#[test]
fn default_orbit_is_consistent() {
    let o = OrbitParams::default();
    assert_eq!(o.mu, MU_EARTH);
    assert_eq!(o.r_e.norm(), STATION_RADIUS);
    let rel = (o.n * o.n * o.r_e.norm().powi(3) - o.mu).abs() / o.mu;
    assert!(rel <= 1e-9, "{rel:e}");
    assert!((o.n - 1.131e-3).abs() < 1e-6, "{}", o.n);
}

#[test]
fn speed_constant_in_force_free_motion() {
    let o = OrbitParams { n: 0.0, n_dot: 0.0, mu: 0.0, ..OrbitParams::default() };
    let mut x = FullState {
        r_dot: Vector3::new(0.3, -0.2, 0.1),
        ..FullState::at_rest(Quaternion::identity())
    };
    let u = ImuSample::new(0.0, Vector3::zeros(), Vector3::new(0.1, 0.0, -0.2));
    let v0 = x.r_dot.norm();
    for _ in 0..1000 {
        x = propagate_full(&x, &u, 0.1, &o).unwrap();
    }
    assert!((x.r_dot.norm() - v0).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn psi_linear_near_origin(r in vec3(2.0 / 3f64.sqrt())) {
        let o = OrbitParams::default();
        let lin = gamma(&o) * r;
        let err = (psi(&r, &o).unwrap() - lin).norm();
        prop_assert!(err <= 1e-6 * lin.norm() + 1e-12, "err {err:e} vs {:e}", lin.norm());
    }

    #[test]
    fn psi_residual_second_order_within_100m(r in vec3(100.0 / 3f64.sqrt())) {
        let o = OrbitParams::default();
        let g = gamma(&o);
        let err = (psi(&r, &o).unwrap() - g * r).norm();
        let bound = 2.0 * r.norm() / o.r_e.norm() * g.norm() * r.norm() + 1e-12;
        prop_assert!(err <= bound, "err {err:e} bound {bound:e}");
    }

    #[test]
    fn propagation_keeps_parameters(
        r in vec3(50.0), v in vec3(0.1), q in unit_quat(),
        bg in vec3(1e-2), ba in vec3(1e-2), rho1 in vec3(0.5), rho2 in vec3(0.5),
        ua in vec3(0.05), ug in vec3(0.05), dt in 0.01..1.0f64,
    ) {
        let x = NavState { r, r_dot: v, q_tilde_v: Vector3::zeros(), b_g: bg, b_a: ba, rho1, rho2, q_ref: q };
        let next = propagate_state(&x, &ImuSample::new(0.0, ua, ug), dt, &OrbitParams::default()).unwrap();
        prop_assert_eq!(next.b_g, bg);
        prop_assert_eq!(next.b_a, ba);
        prop_assert_eq!(next.rho1, rho1);
        prop_assert_eq!(next.rho2, rho2);
        prop_assert_eq!(next.q_tilde_v, Vector3::zeros());
        prop_assert!((next.q_ref.norm() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn step_outside_bounds_rejected() {
    let x = FullState::at_rest(Quaternion::identity());
    let u = ImuSample::new(0.0, Vector3::zeros(), Vector3::zeros());
    let o = OrbitParams::default();
    assert!(propagate_full(&x, &u, 0.0, &o).is_err());
    assert!(propagate_full(&x, &u, 1.5, &o).is_err());
}

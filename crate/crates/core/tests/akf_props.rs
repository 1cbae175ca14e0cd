mod common;

use nalgebra::{Matrix6, Vector3, Vector6};
use proptest::prelude::*;
use relnav::akf::{
    build_h, estimate_r, fault_detect, kf_update, update_window_cov, AdaptiveCov, AdaptiveMode,
    FaultGate, FilterState, Navigator, Observation,
};
use relnav::dynamics::NavState;
use relnav::icp::{Frame, PointCloud};
use relnav::lindisc::StateMatrix;
use relnav::sim;

use common::{scenario, unit_quat, vec3};

fn nav_state() -> impl Strategy<Value = NavState> {
    (vec3(30.0), vec3(0.1), unit_quat(), vec3(5e-3), vec3(5e-3), vec3(0.3), vec3(0.3)).prop_map(
        |(r, r_dot, q_ref, b_g, b_a, rho1, rho2)| NavState {
            r,
            r_dot,
            q_tilde_v: Vector3::zeros(),
            b_g,
            b_a,
            rho1,
            rho2,
            q_ref,
        },
    )
}

/// `L Lᵀ + δI` from a random factor.
fn spd21() -> impl Strategy<Value = StateMatrix> {
    prop::collection::vec(-0.1..0.1f64, 21 * 21)
        .prop_map(|v| {
            let l = StateMatrix::from_vec(v);
            l * l.transpose() + StateMatrix::identity() * 1e-6
        })
}

fn innovations() -> impl Strategy<Value = Vec<Vector6<f64>>> {
    prop::collection::vec(prop::array::uniform6(-1.0..1.0f64).prop_map(Vector6::from), 1..120)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gated_update_leaves_prior_untouched(x in nav_state(), p in spd21(), rho in vec3(30.0), q in unit_quat()) {
        let fs = FilterState::new(x, p);
        let h = build_h(&x);
        let c = h * p * h.transpose() + Matrix6::identity() * 1e-6;
        let out = kf_update(&fs, &Observation::new(0.0, rho, q), &c, false).unwrap();
        prop_assert_eq!(out.state, fs);
    }

    #[test]
    fn accepted_update_resets_and_stays_healthy(x in nav_state(), p in spd21(), d in vec3(0.01)) {
        let fs = FilterState::new(x, p);
        let h = build_h(&x);
        let c = h * p * h.transpose() + Matrix6::identity() * 1e-4;
        let pose = relnav::akf::pose_of(&x);
        let q = (relnav::attitude::Quaternion::from_vector_part(&(d * 0.1)) * pose.q).renormalize();
        let out = kf_update(&fs, &Observation::new(0.0, pose.rho + d, q), &c, true).unwrap();
        prop_assert_eq!(out.state.x.q_tilde_v, Vector3::zeros());
        prop_assert!((out.state.x.q_ref.norm() - 1.0).abs() <= 1e-12);
        prop_assert!(out.state.check_covariance().is_ok());
        prop_assert!(out.state.p.trace() <= p.trace());
    }

    #[test]
    fn recursive_estimate_equals_window_mean(w in 1usize..40, seq in innovations()) {
        let mut acov = AdaptiveCov::new(w, AdaptiveMode::Residual, Matrix6::identity()).unwrap();
        for e in &seq {
            acov = update_window_cov(&acov, e);
            prop_assert!(acov.buffer.len() <= w);
            prop_assert_eq!(acov.c_hat, acov.c_hat.transpose());
            prop_assert!((acov.c_hat - acov.batch_mean()).amax() <= 1e-10);
        }
    }

    #[test]
    fn residual_estimate_is_psd(x in nav_state(), p in spd21(), seq in innovations()) {
        let mut acov = AdaptiveCov::new(10, AdaptiveMode::Residual, Matrix6::zeros()).unwrap();
        for e in &seq {
            acov = update_window_cov(&acov, e);
        }
        let r = estimate_r(&acov, &build_h(&x), &p).unwrap();
        let scale = r.amax().max(f64::MIN_POSITIVE);
        prop_assert!(r.symmetric_eigen().eigenvalues.min() >= -1e-12 * scale);
    }

    #[test]
    fn innovation_estimate_clamped_psd(x in nav_state(), p in spd21(), seq in innovations()) {
        let mut acov = AdaptiveCov::new(10, AdaptiveMode::Innovation, Matrix6::zeros()).unwrap();
        for e in &seq {
            acov = update_window_cov(&acov, &(e * 1e-3));
        }
        let r = estimate_r(&acov, &build_h(&x), &p).unwrap();
        let scale = r.amax().max(f64::MIN_POSITIVE);
        prop_assert!(r.symmetric_eigen().eigenvalues.min() >= -1e-12 * scale);
    }
}

#[test]
fn fixed_mode_has_no_window_estimate() {
    let acov = AdaptiveCov::new(5, AdaptiveMode::Off, Matrix6::identity()).unwrap();
    let x = NavState::from_full(&relnav::dynamics::FullState::at_rest(relnav::attitude::Quaternion::identity()));
    assert!(estimate_r(&acov, &build_h(&x), &StateMatrix::identity()).is_err());
}

#[test]
fn fault_gate_thresholds() {
    let gate = FaultGate::new(1e-4, 3.0, 30);
    let c = Matrix6::identity();
    let small = Vector6::repeat(0.1);
    assert!(fault_detect(1e-5, &small, &c, &gate).unwrap());
    assert!(!fault_detect(1e-4, &small, &c, &gate).unwrap());
    assert!(!fault_detect(f64::INFINITY, &small, &c, &gate).unwrap());
    assert!(!fault_detect(1e-5, &Vector6::repeat(2.0), &c, &gate).unwrap());
}

#[test]
fn rejected_fix_changes_nothing_but_the_counter() {
    let x = NavState::from_full(&relnav::dynamics::FullState::at_rest(relnav::attitude::Quaternion::identity()));
    let mut nav = Navigator::new(x, StateMatrix::identity() * 1e-4, Default::default()).unwrap();
    let before = nav.fs.clone();
    let empty = PointCloud::new(Vec::new(), Frame::Sensor);
    let obs = Observation::new(0.0, Vector3::new(0.01, 0.0, 0.0), x.q_ref);
    let out = nav.process(obs, 1.0, true, &empty, 30, vec![2.0, 1.0]).unwrap();
    assert!(!out.phi);
    assert_eq!(out.posterior.x, before.x);
    assert_eq!(out.posterior.p, before.p);
    assert_eq!(nav.fs.k, before.k + 1);
    assert_eq!(nav.acov.count, 0);
}

#[test]
fn closed_loop_covariance_health() {
    for name in ["nominal.cfg", "outliers.cfg"] {
        let scn = scenario(name);
        let model = sim::load_model(&scn).unwrap();
        let mut epochs = 0;
        sim::run_closed_loop_with(&scn, &model, 1, |out, _| {
            epochs += 1;
            out.posterior.check_covariance().unwrap();
            out.prior.check_covariance().unwrap();
            assert!((out.posterior.x.q_ref.norm() - 1.0).abs() < 1e-12);
            if out.phi {
                assert_eq!(out.posterior.x.q_tilde_v, Vector3::zeros());
            } else {
                assert_eq!(out.posterior.x, out.prior.x);
                assert_eq!(out.posterior.p, out.prior.p);
            }
        })
        .unwrap();
        assert_eq!(epochs, scn.scan_count());
    }
}

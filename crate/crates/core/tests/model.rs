mod common;

use common::{params, rel, sample_params};
use nalgebra::Vector2;
use optosqueeze::model::*;
use proptest::prelude::*;

fn sample_cov(q: &[f64], p: &[f64]) -> [f64; 3] {
    let n = q.len() as f64;
    let mq = q.iter().sum::<f64>() / n;
    let mp = p.iter().sum::<f64>() / n;
    let mut c = [0.0; 3];
    for (a, b) in q.iter().zip(p) {
        c[0] += (a - mq) * (a - mq);
        c[1] += (b - mp) * (b - mp);
        c[2] += (a - mq) * (b - mp);
    }
    c.map(|v| v / n)
}

#[test]
fn long_run_covariance_matches_lyapunov() {
    for (i, p) in sample_params(4, 3).into_iter().enumerate() {
        let model = build_model(&p).unwrap();
        let exact = steady_state_covariance(&model).unwrap();
        // 4000 damping times keeps the Monte Carlo spread near 2%
        let duration = 4000.0 / p.gamma_m();
        let traj = simulate(&model, duration, 4.0 * p.omega_m(), i as u64).unwrap();
        let c = sample_cov(&traj.q, &traj.p);
        assert!(
            rel(c[0], exact[(0, 0)]) < 0.05,
            "set {i}: {} vs {}",
            c[0],
            exact[(0, 0)]
        );
        assert!(
            rel(c[1], exact[(1, 1)]) < 0.05,
            "set {i}: {} vs {}",
            c[1],
            exact[(1, 1)]
        );
        let scale = (exact[(0, 0)] * exact[(1, 1)]).sqrt();
        assert!((c[2] - exact[(0, 1)]).abs() / scale < 0.05);
    }
}

#[test]
fn statistics_do_not_depend_on_sample_rate() {
    let f = optosqueeze::ParamsFile {
        q: 20.0,
        ..Default::default()
    };
    let p = optosqueeze::SystemParams::from_file(&f).unwrap();
    let model = build_model(&p).unwrap();
    let duration = 3000.0 / p.gamma_m();
    let fast = simulate(&model, duration, 100_000.0, 1).unwrap();
    let slow = simulate(&model, duration, 10_000.0, 2).unwrap();
    let q: Vec<f64> = fast.q.iter().step_by(10).copied().collect();
    let pp: Vec<f64> = fast.p.iter().step_by(10).copied().collect();
    assert!(q.len().abs_diff(slow.q.len()) <= 1);
    let a = sample_cov(&q, &pp);
    let b = sample_cov(&slow.q, &slow.p);
    // two independent runs, each with about 2.6% spread
    assert!(rel(a[0], b[0]) < 0.1, "{} {}", a[0], b[0]);
    assert!(rel(a[1], b[1]) < 0.1, "{} {}", a[1], b[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn readout_is_linear_in_position(p in params(), q in -1e3f64..1e3) {
        let model = build_model(&p).unwrap();
        let m = model.measurement_row;
        let one = (m * Vector2::new(q, 0.0))[0];
        let two = (m * Vector2::new(2.0 * q, 0.0))[0];
        prop_assert!((two - 2.0 * one).abs() <= 1e-12 * two.abs().max(1e-300));
        prop_assert_eq!(m[1], 0.0);
    }

    #[test]
    fn steady_state_is_symmetric_positive_definite(p in params()) {
        let model = build_model(&p).unwrap();
        let c = steady_state_covariance(&model).unwrap();
        prop_assert_eq!(c[(0, 1)], c[(1, 0)]);
        prop_assert!(c[(0, 0)] > 0.0 && c.determinant() > 0.0);
    }

    #[test]
    fn discretization_preserves_the_stationary_covariance(p in params(), fs in 2e3f64..5e4) {
        let model = build_model(&p).unwrap();
        let d = discretize(&model, 1.0 / fs).unwrap();
        let c = steady_state_covariance(&model).unwrap();
        let next = d.transition * c * d.transition.transpose() + d.process_cov;
        prop_assert!((next - c).norm() < 1e-9 * c.norm());
    }
}

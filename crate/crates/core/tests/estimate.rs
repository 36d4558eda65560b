mod common;

use nalgebra::Matrix2;
use num_complex::Complex64;
use optosqueeze::dsp::{self, FilterMode, Spectrum, SpectrumKind};
use optosqueeze::estimate::*;
use optosqueeze::model::{build_model, simulate, steady_state_covariance};
use optosqueeze::params::SystemParams;
use optosqueeze::wiener::{modified_susceptibility, OracleFilter};
use proptest::prelude::*;

fn covariance() -> impl Strategy<Value = Matrix2<f64>> {
    (1e-2f64..1e4, 1e-2f64..1e4, -0.99f64..0.99).prop_map(|(a, d, r)| {
        let b = r * (a * d).sqrt();
        Matrix2::new(a, b, b, d)
    })
}

fn spectrum(values: Vec<f64>, df: f64, kind: SpectrumKind) -> Spectrum {
    Spectrum {
        frequencies: (0..values.len()).map(|i| i as f64 * df).collect(),
        values: values.into_iter().map(|v| Complex64::new(v, 0.0)).collect(),
        resolution: df,
        kind,
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

proptest! {
    #[test]
    fn purity_is_inverse_root_determinant(v in covariance()) {
        let s = ConditionalState::from_covariance(&v).unwrap();
        prop_assert!((s.purity * v.determinant().sqrt() - 1.0).abs() < 1e-12);
        prop_assert!(s.squeeze_var <= s.antisqueeze_var);
    }

    #[test]
    fn rotation_is_equivariant(v in covariance(), theta in -3.1f64..3.1) {
        let a = ConditionalState::from_covariance(&v).unwrap();
        prop_assume!(a.antisqueeze_var - a.squeeze_var > 1e-6 * a.antisqueeze_var);
        let r = phase_rotation(theta);
        let b = ConditionalState::from_covariance(&(r * v * r.transpose())).unwrap();
        prop_assert!((a.purity / b.purity - 1.0).abs() < 1e-10);
        prop_assert!(angle_diff(b.angle_deg, a.angle_deg + theta.to_degrees()) < 1e-6);
    }

    #[test]
    fn wider_band_never_shrinks_the_diagonal(
        seed in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0, -1.0f64..1.0), 200),
        lo in 1usize..80, hi in 100usize..190, extra_lo in 0usize..20, extra_hi in 0usize..9,
    ) {
        let qq: Vec<f64> = seed.iter().map(|s| s.0 + 0.01).collect();
        let pp: Vec<f64> = seed.iter().map(|s| s.1 + 0.01).collect();
        // keep the cospectrum inside the Cauchy–Schwarz bound
        let qp: Vec<f64> = seed.iter().zip(qq.iter().zip(&pp)).map(|(s, (a, b))| s.2 * (a * b).sqrt()).collect();
        let (sqq, spp, sqp) = (
            spectrum(qq, 1.0, SpectrumKind::Psd),
            spectrum(pp, 1.0, SpectrumKind::Psd),
            spectrum(qp, 1.0, SpectrumKind::Cross),
        );
        let narrow = covariance_from_spectra(&sqq, &spp, &sqp, (lo as f64, hi as f64));
        let wide = covariance_from_spectra(
            &sqq, &spp, &sqp,
            ((lo.saturating_sub(extra_lo)) as f64, (hi + extra_hi) as f64),
        );
        if let (Ok(n), Ok(w)) = (narrow, wide) {
            prop_assert!(w.covariance[0][0] >= n.covariance[0][0]);
            prop_assert!(w.covariance[1][1] >= n.covariance[1][1]);
        }
    }
}

#[test]
fn notching_mains_contamination_raises_purity() {
    let p = SystemParams::reference();
    let model = build_model(&p).unwrap();
    let fs = 10_000.0;
    let traj = simulate(&model, 20.0, fs, 5).unwrap();
    let std = (traj.x.iter().map(|v| v * v).sum::<f64>() / traj.x.len() as f64).sqrt();
    let dirty: Vec<f64> = traj
        .x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let t = i as f64 / fs;
            v + (2..=7)
                .map(|k| 0.3 * std * (2.0 * std::f64::consts::PI * 50.0 * k as f64 * t).sin())
                .sum::<f64>()
        })
        .collect();
    let cleaned = dsp::notch_harmonics(&dirty, fs, 50.0, 7, 2.0, FilterMode::Causal).unwrap();
    let filter = OracleFilter::new(&model).unwrap();
    let band = default_band(&modified_susceptibility(&p).unwrap(), DEFAULT_F_LO);
    let opts = EstimateOptions {
        discard_s: 1.0,
        ..EstimateOptions::new(band)
    };
    let purity = |x: &[f64]| {
        let c = Conditioner::new(x, fs).unwrap();
        estimate_state(
            &c,
            &filter,
            Reference::Truth {
                q: &traj.q,
                p: &traj.p,
            },
            &opts,
        )
        .unwrap()
        .purity
    };
    let (clean, bad, fixed) = (purity(&traj.x), purity(&dirty), purity(&cleaned));
    assert!(
        fixed > bad,
        "notched {fixed} vs contaminated {bad} (clean {clean})"
    );
    assert!(clean > bad);
}

#[test]
fn synthetic_conditioning_shrinks_both_variances() {
    let p = SystemParams::reference();
    let model = build_model(&p).unwrap();
    let traj = simulate(&model, 20.0, 20_000.0, 9).unwrap();
    let c = Conditioner::new(&traj.x, traj.sample_rate).unwrap();
    let filter = OracleFilter::new(&model).unwrap();
    let r = condition(
        &c,
        &filter,
        Reference::Truth {
            q: &traj.q,
            p: &traj.p,
        },
    )
    .unwrap()
    .trimmed(1.0);
    let v = r.sample_covariance();
    let u = steady_state_covariance(&model).unwrap();
    assert!(v[(0, 0)] < u[(0, 0)] && v[(1, 1)] < u[(1, 1)], "{v} vs {u}");
}

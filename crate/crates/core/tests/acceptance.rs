//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use optosqueeze::dsp::{self, Spectrum, SpectrumKind, Window};
use optosqueeze::estimate::*;
use optosqueeze::ident::detuning_from_counts;
use optosqueeze::model::*;
use optosqueeze::params::*;
use optosqueeze::wiener::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn ok(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn spring() -> Outcome {
    let p = SystemParams::reference();
    let w = derive_confined_frequency(&p.optical, &p.mechanical, &p.constants).unwrap();
    let f = w / (2.0 * PI);
    ok(
        (f - 280.0).abs() <= 10.0,
        format!("omega_m/2pi = {f:.2} Hz (280 +/- 10)"),
    )
}

fn coupling() -> Outcome {
    let p = SystemParams::reference();
    let d = derive_coupling(&p.optical, &p.mechanical, &p.constants, p.omega_m()).unwrap();
    let g = d.confined_coupling / (2.0 * PI);
    let (eg, ec) = (rel(g, -3.2e4), rel(d.quantum_cooperativity, 0.0027));
    ok(
        eg <= 0.10 && ec <= 0.30,
        format!(
            "g_m/2pi = {g:.4e} Hz (err {:.1}%), C_q = {:.4e} (err {:.1}%)",
            100.0 * eg,
            d.quantum_cooperativity,
            100.0 * ec
        ),
    )
}

fn filter_parameters() -> Outcome {
    let p = SystemParams::reference();
    let s = modified_susceptibility(&p).unwrap();
    let c = filter_coefficients(&p, &s).unwrap();
    let (fw, fg) = (s.omega / (2.0 * PI), s.gamma / (2.0 * PI));
    let errs = [
        rel(fw, 706.0),
        rel(fg, 1080.0),
        rel(c.b, 4.1e-4),
        rel(c.a.abs(), 1.2e6),
    ];
    ok(
        errs[0] <= 0.10 && errs[1] <= 0.10 && errs[2] <= 0.15 && errs[3] <= 0.25,
        format!(
            "omega'/2pi = {fw:.1} Hz, gamma'/2pi = {fg:.1} Hz, B = {:.4e} s, |A| = {:.4e} (errs {:.1}/{:.1}/{:.1}/{:.1}%)",
            c.b,
            c.a.abs(),
            100.0 * errs[0],
            100.0 * errs[1],
            100.0 * errs[2],
            100.0 * errs[3]
        ),
    )
}

fn flat(value: f64, kind: SpectrumKind) -> Spectrum {
    Spectrum {
        frequencies: vec![0.0, 1.0],
        values: vec![Complex64::new(value, 0.0); 2],
        resolution: 1.0,
        kind,
    }
}

fn ellipse() -> Outcome {
    let s = covariance_from_spectra(
        &flat(570.0, SpectrumKind::Psd),
        &flat(14000.0, SpectrumKind::Psd),
        &flat(2160.0, SpectrumKind::Cross),
        (0.0, 1.0),
    )
    .unwrap();
    let pass = rel(s.purity, 5.5e-4) <= 0.02
        && (s.angle_deg - 8.9).abs() <= 0.5
        && rel(s.squeeze_var, 231.0) <= 0.01
        && rel(s.antisqueeze_var, 1.434e4) <= 0.01;
    ok(
        pass,
        format!(
            "purity = {:.4e}, angle = {:.2} deg, eigenvalues = {:.1}, {:.1}",
            s.purity, s.angle_deg, s.squeeze_var, s.antisqueeze_var
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let fs = 50_000.0;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for (i, p) in common::sample_params(20, 2024).into_iter().enumerate() {
        let model = build_model(&p).unwrap();
        let traj = simulate(&model, 100.0, fs, 1000 + i as u64).unwrap();
        let c = Conditioner::new(&traj.x, fs).unwrap();
        let response = numerical_causal_wiener(&model, &c.grid()).unwrap();
        let r = condition_sampled(
            &c,
            &response,
            Reference::Truth {
                q: &traj.q,
                p: &traj.p,
            },
        )
        .unwrap()
        .trimmed(1.0);
        let v = r.sample_covariance()[(0, 0)];
        let riccati = solve_riccati(&model).unwrap().covariance[(0, 0)];
        let e = rel(v, riccati);
        worst = worst.max(e);
        if e > 0.10 {
            failures.push(i);
        }
    }
    ok(
        failures.is_empty(),
        format!(
            "20 sets, worst |var/P - 1| = {:.2}%, failing sets {failures:?}",
            100.0 * worst
        ),
    )
}

fn analytic_vs_oracle() -> Outcome {
    let p = SystemParams::reference();
    let analytic = AnalyticFilter::new(&p).unwrap();
    let oracle = OracleFilter::new(&build_model(&p).unwrap()).unwrap();
    let w = analytic.susceptibility.omega;
    let mut worst: f64 = 0.0;
    for k in 0..=400 {
        let omega = w / 3.0 * 9f64.powf(k as f64 / 400.0);
        worst = worst.max(rel(analytic.h_q(omega).norm(), oracle.h_q(omega).norm()));
    }
    let designs: [&dyn FilterDesign; 2] = [&analytic, &oracle];
    let mut pre: f64 = 0.0;
    for d in designs {
        for ir in [
            impulse_response(|w| d.h_q(w), 5000.0, 1.0).unwrap(),
            impulse_response(|w| d.h_p(w), 5000.0, 1.0).unwrap(),
        ] {
            pre = pre.max(ir.pre_zero_energy());
        }
    }
    ok(
        worst <= 0.25 && pre < 1e-4,
        format!(
            "max |H_q| mismatch = {:.1}%, max pre-zero energy = {pre:.2e}",
            100.0 * worst
        ),
    )
}

fn purity_maximum() -> Outcome {
    let p = SystemParams::reference();
    let model = build_model(&p).unwrap();
    let traj = simulate(&model, 100.0, 20_000.0, 11).unwrap();
    let c = Conditioner::new(&traj.x, traj.sample_rate).unwrap();
    let band = default_band(&modified_susceptibility(&p).unwrap(), DEFAULT_F_LO);
    let data = SweepData::Series {
        conditioner: &c,
        reference: Reference::Truth {
            q: &traj.q,
            p: &traj.p,
        },
        options: EstimateOptions::new(band),
    };
    let spec = SweepSpec::default();
    let s = purity_sweep(&p, &data, &OracleFactory::default(), &spec, SweepBand::Full).unwrap();
    let (ci, cj) = s.center();
    let (ai, aj) = s.axis_argmax();
    let near = |a: Option<usize>, c: usize| a.is_some_and(|a| a.abs_diff(c) <= 1);
    ok(
        near(ai, ci) && near(aj, cj) && s.errors.is_empty(),
        format!(
            "generating point ({ci},{cj}); argmax along n_th {ai:?}, along N_th {aj:?}; global argmax {:?}",
            s.argmax()
        ),
    )
}

fn counting_pipeline() -> Outcome {
    let p = SystemParams::reference();
    let (fs, duration, slow_rate) = (5000.0, 60.0, 100.0);
    let scale = p.optical.freq_shift_per_disp / p.kappa();
    // slow displacement swinging the detuning by about ±15%
    let slow: Vec<f64> = (0..=(duration * slow_rate) as usize)
        .map(|i| {
            let t = i as f64 / slow_rate;
            0.1 * p.delta() / scale
                * ((2.0 * PI * 0.05 * t).sin() + 0.5 * (2.0 * PI * 0.23 * t + 1.0).sin())
        })
        .collect();
    let modulation = DetuningModulation {
        displacement: slow,
        sample_rate: slow_rate,
        update_every: 50,
        photon_map: PhotonMap::Lorentzian,
    };
    let traj = simulate_modulated(&p, &modulation, &SimOptions::new(duration, fs, 7)).unwrap();
    let band = dsp::bandpass(&traj.x, fs, 170.0, 360.0).unwrap();
    let counted = dsp::lowpass(&dsp::count_zero_crossings(&band, fs).unwrap(), fs, 8.2).unwrap();
    let binned = dsp::bin_average(&counted, 25).unwrap();
    let truth = dsp::bin_average(traj.resonance_hz.as_ref().unwrap(), 25).unwrap();
    let rms = (binned
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / 25.0)
        .sqrt();
    let disp = dsp::lowpass(traj.displacement.as_ref().unwrap(), fs, 8.2).unwrap();
    let est = detuning_from_counts(&counted, &disp, &p, PhotonMap::Lorentzian).unwrap();
    let e = rel(est.mean_delta, 0.0292);
    ok(
        rms < 2.0 && e <= 0.05,
        format!(
            "track RMS = {rms:.3} Hz, delta = {:.5} +/- {:.5} ({:?} branch, err {:.2}%)",
            est.mean_delta,
            est.std_error,
            est.branch,
            100.0 * e
        ),
    )
}

fn conservation() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x: Vec<f64> = (0..1 << 18).map(|_| rng.sample(StandardNormal)).collect();
    let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let mut parseval: f64 = 0.0;
    for w in [
        Window::Hann,
        Window::Hamming,
        Window::Blackman,
        Window::Rectangular,
    ] {
        let s = dsp::psd_welch(&x, 10_000.0, 2048, 0.5, w).unwrap();
        parseval = parseval.max(rel(s.integrate_real(0.0, 5000.0).unwrap(), var));
    }
    pass &= parseval <= 0.02;
    notes.push(format!("Parseval {:.2}%", 100.0 * parseval));

    let mut zpf: f64 = 0.0;
    for p in common::sample_params(50, 5)
        .iter()
        .chain([SystemParams::reference()].iter())
    {
        let d = p.derived;
        zpf = zpf.max(rel(
            d.zero_point_amplitude * d.zero_point_momentum,
            p.constants.hbar / 2.0,
        ));
    }
    pass &= zpf <= 1e-12;
    notes.push(format!("zpf product {zpf:.1e}"));

    let mut lyap: f64 = 0.0;
    for (i, p) in common::sample_params(3, 77).into_iter().enumerate() {
        let model = build_model(&p).unwrap();
        let exact = steady_state_covariance(&model).unwrap();
        let traj = simulate(&model, 4000.0 / p.gamma_m(), 4.0 * p.omega_m(), i as u64).unwrap();
        let n = traj.q.len() as f64;
        let vq = traj.q.iter().map(|v| v * v).sum::<f64>() / n;
        let vp = traj.p.iter().map(|v| v * v).sum::<f64>() / n;
        lyap = lyap.max(rel(vq, exact[(0, 0)])).max(rel(vp, exact[(1, 1)]));
    }
    pass &= lyap <= 0.05;
    notes.push(format!("Lyapunov vs Monte Carlo {:.2}%", 100.0 * lyap));

    let (sym, lin) = filter_symmetry_and_linearity();
    pass &= sym <= 1e-10 && lin <= 1e-10;
    notes.push(format!("filter symmetry {sym:.1e}, linearity {lin:.1e}"));
    ok(pass, notes.join(", "))
}

/// Worst relative conjugate-symmetry and linearity errors over all filters.
fn filter_symmetry_and_linearity() -> (f64, f64) {
    let fs = 10_000.0;
    let mut sym: f64 = 0.0;
    let mut lin: f64 = 0.0;
    let sos = [
        dsp::bandpass_design(fs, 170.0, 360.0).unwrap(),
        dsp::lowpass_design(fs, 8.2).unwrap(),
        dsp::notch_harmonics_design(fs, 50.0, 7, 2.0).unwrap(),
    ];
    for s in &sos {
        for f in [1.0, 50.0, 280.0, 1234.5] {
            let (a, b) = (s.response(f), s.response(-f));
            sym = sym.max((a - b.conj()).norm() / a.norm().max(1e-300));
        }
    }
    let p = SystemParams::reference();
    let designs: Vec<Box<dyn FilterDesign>> = vec![
        AnalyticFactory.design(&p).unwrap(),
        OracleFactory::default().design(&p).unwrap(),
    ];
    for d in &designs {
        for f in [1.0, 100.0, 280.0, 724.0, 3000.0] {
            let w = 2.0 * PI * f;
            for (a, b) in [(d.h_q(w), d.h_q(-w)), (d.h_p(w), d.h_p(-w))] {
                sym = sym.max((a - b.conj()).norm() / a.norm());
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut noise = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let (x, y) = (noise(4096), noise(4096));
    let (a, b) = (1.7, -0.6);
    let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
    let worst = |fx: &[f64], fy: &[f64], fm: &[f64]| {
        let scale = fm
            .iter()
            .chain(fx)
            .chain(fy)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        fm.iter()
            .zip(fx.iter().zip(fy))
            .map(|(m, (u, v))| (m - a * u - b * v).abs())
            .fold(0.0f64, f64::max)
            / scale
    };
    for s in &sos {
        lin = lin.max(worst(&s.filter(&x), &s.filter(&y), &s.filter(&mix)));
        lin = lin.max(worst(&s.filtfilt(&x), &s.filtfilt(&y), &s.filtfilt(&mix)));
    }
    let cond = |v: &[f64]| Conditioner::new(v, fs).unwrap();
    for d in &designs {
        let (qx, px) = cond(&x).predict(d.as_ref());
        let (qy, py) = cond(&y).predict(d.as_ref());
        let (qm, pm) = cond(&mix).predict(d.as_ref());
        lin = lin.max(worst(&qx, &qy, &qm)).max(worst(&px, &py, &pm));
    }
    (sym, lin)
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 9] = [
        ("optical spring frequency", spring, Duration::from_millis(1)),
        ("coupling chain", coupling, Duration::from_millis(1)),
        (
            "filter parameters",
            filter_parameters,
            Duration::from_millis(1),
        ),
        ("ellipse arithmetic", ellipse, Duration::from_millis(1)),
        (
            "oracle equivalence",
            oracle_equivalence,
            Duration::from_secs(60),
        ),
        (
            "analytic vs oracle filter",
            analytic_vs_oracle,
            Duration::from_secs(5),
        ),
        (
            "purity maximization",
            purity_maximum,
            Duration::from_secs(120),
        ),
        (
            "frequency counting",
            counting_pipeline,
            Duration::from_secs(30),
        ),
        (
            "conservation and normalization",
            conservation,
            Duration::from_secs(30),
        ),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let out = run();
        let elapsed = t0.elapsed();
        let in_time = elapsed <= *budget;
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {}. {name}: {} ({:.3?} / budget {budget:?}{})",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            elapsed,
            if in_time { "" } else { ", over budget" }
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

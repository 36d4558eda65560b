//! Optical-spring identification: resonance-versus-detuning fits, power
//! compensation, resonance tracks from displacement and detuning estimates
//! from counted frequencies.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{spring_frequency, PhotonMap, SystemParams};

/// Resonance (Hz) at detuning `delta` with photons from `map` at `power`.
fn resonance_hz(
    params: &SystemParams,
    map: PhotonMap,
    g_shift: f64,
    delta: f64,
    power: f64,
) -> Result<f64> {
    let o = &params.optical;
    let photons = map.photons(params, delta, power);
    Ok(spring_frequency(
        delta,
        g_shift,
        photons,
        o.decay_rate,
        params.mechanical.mass,
        params.constants.hbar,
    )? / (2.0 * PI))
}

/// d ln f / dδ of the spring resonance.
fn log_derivative(map: PhotonMap, delta: f64) -> f64 {
    0.5 * (1.0 / delta - 8.0 * delta / (1.0 + 4.0 * delta * delta) + map.log_slope(delta))
}

/// Spring resonance (Hz) over a detuning grid at the configured photon number.
pub fn spring_curve(deltas: &[f64], params: &SystemParams) -> Result<Vec<f64>> {
    spring_curve_with(
        deltas,
        params,
        PhotonMap::Fixed,
        params.optical.incident_power,
    )
}

/// Spring resonance (Hz) with photons following `map` at incident `power`.
pub fn spring_curve_with(
    deltas: &[f64],
    params: &SystemParams,
    map: PhotonMap,
    power: f64,
) -> Result<Vec<f64>> {
    let g = params.optical.freq_shift_per_disp;
    deltas
        .iter()
        .map(|&d| resonance_hz(params, map, g, d, power))
        .collect()
}

/// Rescales resonances measured at one power to another (f ∝ √P).
pub fn power_compensate(
    resonances: &[f64],
    measured_power: f64,
    reference_power: f64,
) -> Result<Vec<f64>> {
    if !(measured_power > 0.0) || !(reference_power > 0.0) {
        return Err(Error::Domain(format!(
            "powers must be positive (measured {measured_power} W, reference {reference_power} W)"
        )));
    }
    let factor = (reference_power / measured_power).sqrt();
    Ok(resonances.iter().map(|f| f * factor).collect())
}

/// Resonances measured at known detuning offsets from the operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpringMeasurement {
    /// Detuning of each sample relative to the operating detuning.
    pub detuning_samples: Vec<f64>,
    pub resonance_samples: Vec<f64>,
    pub resonance_errors: Vec<f64>,
    pub incident_power: f64,
}

impl SpringMeasurement {
    pub fn validate(&self) -> Result<()> {
        let n = self.detuning_samples.len();
        if self.resonance_samples.len() != n || self.resonance_errors.len() != n {
            return Err(Error::Length(format!(
                "detuning ({n}), resonance ({}) and error ({}) columns differ in length",
                self.resonance_samples.len(),
                self.resonance_errors.len()
            )));
        }
        if let Some(e) = self.resonance_errors.iter().find(|e| !(**e > 0.0)) {
            return Err(Error::Domain(format!(
                "resonance errors must be positive, got {e}"
            )));
        }
        if !(self.incident_power > 0.0) {
            return Err(Error::Domain("incident power must be positive".into()));
        }
        let mut distinct: Vec<f64> = self.detuning_samples.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < 3 {
            return Err(Error::Domain(format!(
                "need at least 3 distinct detuning samples, got {}",
                distinct.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpringGuess {
    /// Frequency shift per displacement, rad/s per m.
    pub g: f64,
    pub mean_delta: f64,
    pub eta: f64,
}

impl SpringGuess {
    pub fn from_params(params: &SystemParams) -> Self {
        Self {
            g: params.optical.freq_shift_per_disp,
            mean_delta: params.delta(),
            eta: params.eta(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// rad/s per m.
    pub g: f64,
    pub eta: f64,
    pub mean_delta: f64,
    pub residual_norm: f64,
    /// Covariance of (G, η, δ̄); η is held fixed so its row and column are zero.
    pub parameter_covariance: [[f64; 3]; 3],
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn g_std(&self) -> f64 {
        self.parameter_covariance[0][0].sqrt()
    }

    pub fn mean_delta_std(&self) -> f64 {
        self.parameter_covariance[2][2].sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub map: PhotonMap,
    pub max_iterations: usize,
    /// Convergence threshold on the scaled gradient norm.
    pub gradient_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            map: PhotonMap::Lorentzian,
            max_iterations: 200,
            gradient_tolerance: 1e-10,
        }
    }
}

/// Weighted residuals and Jacobian in the scaled parameters (G/G₀, δ̄).
fn spring_system(
    meas: &SpringMeasurement,
    params: &SystemParams,
    map: PhotonMap,
    g0: f64,
    theta: Vector2<f64>,
) -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
    let g = theta[0] * g0;
    let mut r = Vec::with_capacity(meas.detuning_samples.len());
    let mut jac = Vec::with_capacity(meas.detuning_samples.len());
    for ((&d, &f), &s) in meas
        .detuning_samples
        .iter()
        .zip(&meas.resonance_samples)
        .zip(&meas.resonance_errors)
    {
        let delta = theta[1] + d;
        if delta <= 0.0 {
            // no spring on the anti-spring side of resonance
            r.push(-f / s);
            jac.push([0.0, 0.0]);
            continue;
        }
        let model = resonance_hz(params, map, g, delta, meas.incident_power)?;
        r.push((model - f) / s);
        jac.push([model / theta[0] / s, model * log_derivative(map, delta) / s]);
    }
    Ok((r, jac))
}

fn normal_equations(r: &[f64], jac: &[[f64; 2]]) -> (Matrix2<f64>, Vector2<f64>) {
    let mut jtj = Matrix2::zeros();
    let mut jtr = Vector2::zeros();
    for (ri, ji) in r.iter().zip(jac) {
        for a in 0..2 {
            jtr[a] += ji[a] * ri;
            for b in 0..2 {
                jtj[(a, b)] += ji[a] * ji[b];
            }
        }
    }
    (jtj, jtr)
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Weighted least-squares fit of G and δ̄ by Levenberg–Marquardt.
///
/// η does not enter the spring resonance, so it is carried at its guess
/// and reported with a warning.
pub fn fit_spring(
    meas: &SpringMeasurement,
    params: &SystemParams,
    guess: SpringGuess,
    opts: &FitOptions,
) -> Result<FitResult> {
    meas.validate()?;
    if !(guess.g != 0.0) || !(guess.mean_delta > 0.0) {
        return Err(Error::Domain("initial guess needs G != 0 and δ̄ > 0".into()));
    }
    let g0 = guess.g;
    let mut theta = Vector2::new(1.0, guess.mean_delta);
    let (mut r, mut jac) = spring_system(meas, params, opts.map, g0, theta)?;
    let mut cost = sum_sq(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iterations {
        iterations = it + 1;
        let (jtj, jtr) = normal_equations(&r, &jac);
        let diag = Vector2::new(
            jtj[(0, 0)].sqrt().max(1e-300),
            jtj[(1, 1)].sqrt().max(1e-300),
        );
        let scaled_grad = Vector2::new(jtr[0] / diag[0], jtr[1] / diag[1]).norm();
        if scaled_grad < opts.gradient_tolerance * (1.0 + cost.sqrt()) || cost == 0.0 {
            converged = true;
            break;
        }
        let mut stepped = false;
        for _ in 0..60 {
            let mut damped = jtj;
            damped[(0, 0)] *= 1.0 + lambda;
            damped[(1, 1)] *= 1.0 + lambda;
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = theta + step;
            if candidate[1] <= 0.0 {
                lambda *= 10.0;
                continue;
            }
            let (rc, jc) = spring_system(meas, params, opts.map, g0, candidate)?;
            let cc = sum_sq(&rc);
            if cc <= cost {
                let small = step[0].abs() <= 1e-15 * theta[0].abs()
                    && step[1].abs() <= 1e-15 * theta[1].abs();
                theta = candidate;
                r = rc;
                jac = jc;
                cost = cc;
                lambda = (lambda / 10.0).max(1e-12);
                stepped = true;
                if small {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !stepped {
            // no descent direction left: at a minimum to machine precision
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "optical spring fit".into(),
            iterations,
        });
    }

    let (jtj, _) = normal_equations(&r, &jac);
    let mut warnings = vec![
        "η does not enter the spring resonance and was held at its initial value".to_string(),
        "G and n_c enter only as G²·n_c; G assumes the configured photon map".to_string(),
    ];
    let cov_scaled = match jtj.try_inverse() {
        Some(inv) => inv,
        None => {
            warnings.push("Jacobian is rank deficient; covariance is unavailable".into());
            Matrix2::from_element(f64::NAN)
        }
    };
    // back to (G, δ̄), then embed with η's zero row
    let t = Matrix2::new(g0, 0.0, 0.0, 1.0);
    let cov = t * cov_scaled * t.transpose();
    let mut full = Matrix3::zeros();
    full[(0, 0)] = cov[(0, 0)];
    full[(0, 2)] = cov[(0, 1)];
    full[(2, 0)] = cov[(1, 0)];
    full[(2, 2)] = cov[(1, 1)];
    let full = (full + full.transpose()) * 0.5;
    Ok(FitResult {
        g: theta[0] * g0,
        eta: guess.eta,
        mean_delta: theta[1],
        residual_norm: cost.sqrt(),
        parameter_covariance: [
            [full[(0, 0)], full[(0, 1)], full[(0, 2)]],
            [full[(1, 0)], full[(1, 1)], full[(1, 2)]],
            [full[(2, 0)], full[(2, 1)], full[(2, 2)]],
        ],
        residuals: r,
        iterations,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceTrack {
    pub resonance_hz: Vec<f64>,
    /// Fraction of samples whose instantaneous detuning was clamped at zero.
    pub clamp_fraction: f64,
}

/// Resonance implied by δ(t) = δ̄ + G x(t)/κ at each displacement sample.
pub fn resonance_timeseries_model(
    displacement: &[f64],
    params: &SystemParams,
    mean_delta: f64,
    map: PhotonMap,
) -> Result<ResonanceTrack> {
    if !(mean_delta >= 0.0) {
        return Err(Error::Domain(format!("mean detuning {mean_delta} < 0")));
    }
    if displacement.is_empty() {
        return Err(Error::Empty);
    }
    let o = &params.optical;
    let mut clamped = 0usize;
    let resonance = displacement
        .iter()
        .map(|&x| {
            let raw = mean_delta + o.freq_shift_per_disp * x / o.decay_rate;
            if raw < 0.0 {
                clamped += 1;
            }
            resonance_hz(
                params,
                map,
                o.freq_shift_per_disp,
                raw.max(0.0),
                o.incident_power,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResonanceTrack {
        resonance_hz: resonance,
        clamp_fraction: clamped as f64 / displacement.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Below the peak of the spring curve.
    Small,
    /// Above the peak of the spring curve.
    Large,
}

/// Detuning on the given branch whose resonance equals `f_hz`.
pub fn invert_spring(
    f_hz: f64,
    params: &SystemParams,
    map: PhotonMap,
    branch: Branch,
) -> Result<f64> {
    let o = &params.optical;
    let f = |d: f64| resonance_hz(params, map, o.freq_shift_per_disp, d, o.incident_power);
    let peak = map.peak_detuning();
    let f_peak = f(peak)?;
    if !(f_hz >= 0.0) || f_hz > f_peak {
        return Err(Error::Domain(format!(
            "resonance {f_hz} Hz is outside [0, {f_peak}] Hz reachable by the spring"
        )));
    }
    let (mut lo, mut hi) = match branch {
        Branch::Small => (0.0, peak),
        Branch::Large => {
            let mut hi = 2.0 * peak;
            while f(hi)? > f_hz {
                hi *= 2.0;
                if hi > 1e12 {
                    return Err(Error::Domain("large-branch detuning diverges".into()));
                }
            }
            (peak, hi)
        }
    };
    let rising = branch == Branch::Small;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let above = f(mid)? > f_hz;
        if above == rising {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchCandidate {
    pub branch: Branch,
    pub mean_delta: f64,
    pub std_error: f64,
    /// RMS misfit of the binned points in Hz.
    pub residual_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetuningEstimate {
    pub mean_delta: f64,
    pub std_error: f64,
    pub branch: Branch,
    pub candidates: Vec<BranchCandidate>,
    /// Binned (detuning offset, counted frequency in Hz) points.
    pub bins: Vec<(f64, f64)>,
}

pub const DETUNING_BINS: usize = 3;

/// Equal-population bins of (offset, frequency) ordered by offset.
fn tercile_bins(offsets: &[f64], freqs: &[f64], n_bins: usize) -> Result<Vec<(f64, f64)>> {
    let mut order: Vec<usize> = (0..offsets.len()).collect();
    order.sort_by(|&a, &b| offsets[a].total_cmp(&offsets[b]));
    let n = order.len();
    let bins: Vec<(f64, f64)> = (0..n_bins)
        .map(|b| {
            let start = b * n / n_bins;
            let end = (b + 1) * n / n_bins;
            let idx = &order[start..end];
            let m = idx.len() as f64;
            (
                idx.iter().map(|&i| offsets[i]).sum::<f64>() / m,
                idx.iter().map(|&i| freqs[i]).sum::<f64>() / m,
            )
        })
        .collect();
    Ok(bins)
}

/// One-parameter Gauss–Newton fit of δ̄ to the binned points on a branch.
fn fit_mean_delta(
    bins: &[(f64, f64)],
    params: &SystemParams,
    map: PhotonMap,
    start: f64,
    branch: Branch,
) -> Result<BranchCandidate> {
    let o = &params.optical;
    let eval = |d: f64| -> Result<(f64, f64, f64)> {
        let (mut cost, mut jtj, mut jtr) = (0.0, 0.0, 0.0);
        for &(off, f) in bins {
            let delta = d + off;
            if delta <= 0.0 {
                cost += f * f;
                continue;
            }
            let model = resonance_hz(params, map, o.freq_shift_per_disp, delta, o.incident_power)?;
            let j = model * log_derivative(map, delta);
            let r = model - f;
            cost += r * r;
            jtj += j * j;
            jtr += j * r;
        }
        Ok((cost, jtj, jtr))
    };
    let mut d = start;
    let (mut cost, mut jtj, mut jtr) = eval(d)?;
    let mut lambda = 1e-3;
    for _ in 0..200 {
        if jtj == 0.0 || jtr.abs() <= 1e-12 * jtj.sqrt() * (1.0 + cost.sqrt()) {
            break;
        }
        let mut moved = false;
        for _ in 0..60 {
            let cand = d - jtr / (jtj * (1.0 + lambda));
            if cand > 0.0 {
                let (c, a, b) = eval(cand)?;
                if c <= cost {
                    let small = (cand - d).abs() <= 1e-15 * d;
                    d = cand;
                    (cost, jtj, jtr) = (c, a, b);
                    lambda = (lambda / 10.0).max(1e-12);
                    moved = !small;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !moved {
            break;
        }
    }
    let dof = (bins.len() as f64 - 1.0).max(1.0);
    let sigma2 = cost / dof;
    let std_error = if jtj > 0.0 {
        (sigma2 / jtj).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(BranchCandidate {
        branch,
        mean_delta: d,
        std_error,
        residual_rms: (cost / bins.len() as f64).sqrt(),
    })
}

/// Mean detuning from counted frequency and calibrated displacement.
///
/// Samples are split into three equal-population bins by the detuning
/// offset G·x/κ; the bin means are fitted on both branches of the spring
/// curve and the branch with the smaller misfit is returned.
pub fn detuning_from_counts(
    counted_hz: &[f64],
    displacement: &[f64],
    params: &SystemParams,
    map: PhotonMap,
) -> Result<DetuningEstimate> {
    if counted_hz.len() != displacement.len() {
        return Err(Error::Length(format!(
            "counted frequency ({}) and displacement ({}) differ in length",
            counted_hz.len(),
            displacement.len()
        )));
    }
    if counted_hz.len() < DETUNING_BINS {
        return Err(Error::Length(format!(
            "need at least {DETUNING_BINS} samples"
        )));
    }
    let o = &params.optical;
    let offsets: Vec<f64> = displacement
        .iter()
        .map(|x| o.freq_shift_per_disp * x / o.decay_rate)
        .collect();
    let (lo, hi) = offsets
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if !(hi > lo) {
        return Err(Error::DegenerateBinning(
            "detuning offsets have zero range".into(),
        ));
    }
    let bins = tercile_bins(&offsets, counted_hz, DETUNING_BINS)?;
    let mean_f = bins.iter().map(|b| b.1).sum::<f64>() / bins.len() as f64;
    let mean_off = bins.iter().map(|b| b.0).sum::<f64>() / bins.len() as f64;
    let peak_f = resonance_hz(
        params,
        map,
        o.freq_shift_per_disp,
        map.peak_detuning(),
        o.incident_power,
    )?;
    let target = mean_f.min(peak_f * (1.0 - 1e-9));
    let mut candidates = Vec::new();
    for branch in [Branch::Small, Branch::Large] {
        let start = (invert_spring(target, params, map, branch)? - mean_off).max(1e-9);
        candidates.push(fit_mean_delta(&bins, params, map, start, branch)?);
    }
    let best = *candidates
        .iter()
        .min_by(|a, b| a.residual_rms.total_cmp(&b.residual_rms))
        .expect("two candidates");
    Ok(DetuningEstimate {
        mean_delta: best.mean_delta,
        std_error: best.std_error,
        branch: best.branch,
        candidates,
        bins,
    })
}

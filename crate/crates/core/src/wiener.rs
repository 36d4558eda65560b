//! Causal Wiener filters from X to (q̂, p̂).
//!
//! All transfer functions use the Fourier kernel e^{+iωt}, so d/dt ↔ −iω and
//! causal responses have their poles in the lower half-plane.

use nalgebra::{Matrix2, Matrix4, Matrix4x2, Vector2};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{inverse2, lyapunov2, symmetrize2};
use crate::model::{build_model_with, OpticalNoiseMode, StateSpaceModel};
use crate::params::SystemParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModifiedSusceptibility {
    /// ω′ in rad/s.
    pub omega: f64,
    /// γ′ in rad/s.
    pub gamma: f64,
}

impl ModifiedSusceptibility {
    /// χ′(ω) = 1/(ω′² − ω² − iωγ′)
    pub fn chi(&self, omega: f64) -> Complex64 {
        1.0 / Complex64::new(self.omega * self.omega - omega * omega, -omega * self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients {
    pub a: f64,
    /// Derivative weight in seconds.
    pub b: f64,
}

fn cooperativity(params: &SystemParams) -> f64 {
    4.0 * params.g_m().powi(2) / (params.gamma_m() * params.kappa())
}

pub fn modified_susceptibility(params: &SystemParams) -> Result<ModifiedSusceptibility> {
    let n_opt = params.optical_n_th();
    if !(n_opt > 0.0) {
        return Err(Error::Domain(
            "closed-form susceptibility needs N_th > 0; use the numerical filter for vacuum optical noise"
                .into(),
        ));
    }
    let delta = params.delta();
    if delta < 0.0 {
        return Err(Error::invalid("delta_over_kappa", "must be >= 0"));
    }
    let (w, gamma, g, kappa) = (
        params.omega_m(),
        params.gamma_m(),
        params.g_m(),
        params.kappa(),
    );
    let c = cooperativity(params);
    let thermal = 32.0 * params.n_th() * c * gamma * gamma * delta * delta * w * w / n_opt;
    let spring = 32.0 * g * g * delta * w / kappa;
    let omega = (thermal + spring * spring).powf(0.25);
    let gamma_mod = (spring + 2.0 * omega * omega).sqrt();
    Ok(ModifiedSusceptibility {
        omega,
        gamma: gamma_mod,
    })
}

pub fn filter_coefficients(
    params: &SystemParams,
    sus: &ModifiedSusceptibility,
) -> Result<FilterCoefficients> {
    let (w, gamma, g, kappa) = (
        params.omega_m(),
        params.gamma_m(),
        params.g_m(),
        params.kappa(),
    );
    let denom = sus.omega * sus.omega - w * w;
    if denom.abs() <= 1e-12 * w * w {
        return Err(Error::Singular(format!(
            "ω′ = ω_m = {:.6e} rad/s makes the derivative weight diverge",
            w
        )));
    }
    let b = (gamma + sus.gamma) / denom;
    let delta = params.delta();
    if delta == 0.0 || sus.omega == 0.0 {
        return Ok(FilterCoefficients { a: 0.0, b });
    }
    let noise_ratio = gamma * (2.0 * params.n_th() + 1.0) / (2.0 * params.optical_n_th() + 1.0);
    let a = -16.0
        * g
        * w
        * w
        * delta
        * (params.eta() / kappa).sqrt()
        * (8.0 * g * g / kappa + noise_ratio)
        / (sus.omega * sus.omega);
    Ok(FilterCoefficients { a, b })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterSource {
    Analytic,
    Oracle,
}

impl std::fmt::Display for FilterSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterSource::Analytic => "analytic",
            FilterSource::Oracle => "oracle",
        })
    }
}

/// Filter pair sampled on a frequency grid in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResponse {
    pub frequencies_hz: Vec<f64>,
    pub h_q: Vec<Complex64>,
    pub h_p: Vec<Complex64>,
    pub source: FilterSource,
}

/// A filter pair that can be evaluated at any angular frequency.
pub trait FilterDesign: Send + Sync {
    fn h_q(&self, omega: f64) -> Complex64;
    fn h_p(&self, omega: f64) -> Complex64;
    fn source(&self) -> FilterSource;

    fn response(&self, frequencies_hz: &[f64]) -> FilterResponse {
        let w = |f: f64| 2.0 * PI * f;
        FilterResponse {
            frequencies_hz: frequencies_hz.to_vec(),
            h_q: frequencies_hz.iter().map(|&f| self.h_q(w(f))).collect(),
            h_p: frequencies_hz.iter().map(|&f| self.h_p(w(f))).collect(),
            source: self.source(),
        }
    }
}

/// The closed-form filters H_q = A(1 − iBω)χ′ and H_p.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticFilter {
    pub susceptibility: ModifiedSusceptibility,
    pub coefficients: FilterCoefficients,
    pub omega_m: f64,
    pub gamma_m: f64,
}

impl AnalyticFilter {
    pub fn new(params: &SystemParams) -> Result<Self> {
        let susceptibility = modified_susceptibility(params)?;
        let coefficients = filter_coefficients(params, &susceptibility)?;
        Ok(Self {
            susceptibility,
            coefficients,
            omega_m: params.omega_m(),
            gamma_m: params.gamma_m(),
        })
    }
}

impl FilterDesign for AnalyticFilter {
    fn h_q(&self, omega: f64) -> Complex64 {
        let FilterCoefficients { a, b } = self.coefficients;
        if a == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        a * Complex64::new(1.0, -b * omega) * self.susceptibility.chi(omega)
    }

    fn h_p(&self, omega: f64) -> Complex64 {
        let FilterCoefficients { a, b } = self.coefficients;
        if a == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let s = &self.susceptibility;
        let w = self.omega_m;
        let slope = (s.omega * s.omega - w * w) / (s.gamma + self.gamma_m);
        -(a * b / w) * Complex64::new(w * w, omega * slope) * s.chi(omega)
    }

    fn source(&self) -> FilterSource {
        FilterSource::Analytic
    }
}

pub fn position_filter(params: &SystemParams, frequencies_hz: &[f64]) -> Result<FilterResponse> {
    Ok(AnalyticFilter::new(params)?.response(frequencies_hz))
}

pub fn momentum_filter(params: &SystemParams, frequencies_hz: &[f64]) -> Result<FilterResponse> {
    position_filter(params, frequencies_hz)
}

/// Steady state of the continuous Kalman–Bucy filter with correlated noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiSolution {
    /// Conditional covariance of (q, p).
    pub covariance: Matrix2<f64>,
    /// Gain from the innovation onto (q̂̇, p̂̇).
    pub gain: Vector2<f64>,
    /// F − K M
    pub closed_loop: Matrix2<f64>,
}

/// Residual of Ā P + P Āᵀ − P Mᵀ R⁻¹ M P + Q̄.
pub fn riccati_residual(model: &StateSpaceModel, p: &Matrix2<f64>) -> Matrix2<f64> {
    let (a_bar, q_bar, g) = decorrelated(model);
    a_bar * p + p * a_bar.transpose() - p * g * p + q_bar
}

fn decorrelated(model: &StateSpaceModel) -> (Matrix2<f64>, Matrix2<f64>, Matrix2<f64>) {
    let r = model.measurement_noise();
    let m = model.measurement_row;
    let s = model.cross_noise();
    let a_bar = model.drift - s * m / r;
    let q_bar = symmetrize2(&(model.process_noise() - s * s.transpose() / r));
    let g = m.transpose() * m / r;
    (a_bar, q_bar, g)
}

/// Matrix sign function by scaled Newton iteration.
fn sign_function(h: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    const MAX_ITER: usize = 100;
    let mut z = *h;
    for it in 0..MAX_ITER {
        let inv = z.try_inverse().ok_or_else(|| {
            Error::Singular("Hamiltonian has eigenvalues on the imaginary axis".into())
        })?;
        let c = (z.determinant().abs()).powf(-0.25);
        let next = (z * c + inv / c) * 0.5;
        let change = (next - z).abs().max();
        z = next;
        if change <= 1e-13 * z.abs().max() {
            return Ok(z);
        }
        if it + 1 == MAX_ITER {
            break;
        }
    }
    Err(Error::NoConvergence {
        what: "matrix sign iteration".into(),
        iterations: MAX_ITER,
    })
}

/// Solves the filter Riccati equation by the matrix sign function, then
/// polishes with Newton steps.
pub fn solve_riccati(model: &StateSpaceModel) -> Result<RiccatiSolution> {
    let m = model.measurement_row;
    if m.abs().max() == 0.0 {
        return Err(Error::NotDetectable(
            "measurement row is zero (g_m·δ·η = 0)".into(),
        ));
    }
    let r = model.measurement_noise();
    if !(r > 0.0) {
        return Err(Error::Singular(
            "measurement noise variance must be positive".into(),
        ));
    }
    let (a_bar, q_bar, g) = decorrelated(model);

    // balance q and p against the measurement scale to keep the Hamiltonian well conditioned
    let scale = (m[0].abs() / r.sqrt()).max(1e-300);
    let t = Matrix2::from_diagonal(&Vector2::new(scale, scale));
    let t_inv = Matrix2::from_diagonal(&Vector2::new(1.0 / scale, 1.0 / scale));
    let a = a_bar.transpose();
    let gs = t_inv * g * t_inv;
    let qs = t * q_bar * t;

    let mut h = Matrix4::zeros();
    h.fixed_view_mut::<2, 2>(0, 0).copy_from(&a);
    h.fixed_view_mut::<2, 2>(0, 2).copy_from(&(-gs));
    h.fixed_view_mut::<2, 2>(2, 0).copy_from(&(-qs));
    h.fixed_view_mut::<2, 2>(2, 2).copy_from(&(-a.transpose()));
    let w = sign_function(&h)?;
    let eye = Matrix2::identity();
    let w11 = w.fixed_view::<2, 2>(0, 0).into_owned();
    let w12 = w.fixed_view::<2, 2>(0, 2).into_owned();
    let w21 = w.fixed_view::<2, 2>(2, 0).into_owned();
    let w22 = w.fixed_view::<2, 2>(2, 2).into_owned();
    let mut lhs = Matrix4x2::zeros();
    lhs.fixed_view_mut::<2, 2>(0, 0).copy_from(&w12);
    lhs.fixed_view_mut::<2, 2>(2, 0).copy_from(&(w22 + eye));
    let mut rhs = Matrix4x2::zeros();
    rhs.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-(w11 + eye)));
    rhs.fixed_view_mut::<2, 2>(2, 0).copy_from(&(-w21));
    let normal = lhs.transpose() * lhs;
    let xs = inverse2(&normal)? * (lhs.transpose() * rhs);
    let mut p = symmetrize2(&(t_inv * xs * t_inv));

    for _ in 0..3 {
        let res = a_bar * p + p * a_bar.transpose() - p * g * p + q_bar;
        let ac = a_bar - p * g;
        let dp = lyapunov2(&ac, &res)?;
        p = symmetrize2(&(p + dp));
        if dp.abs().max() <= 1e-14 * p.abs().max() {
            break;
        }
    }

    let gain = (p * m.transpose() + model.cross_noise()) / r;
    let closed_loop = model.drift - gain * m;
    let eig = closed_loop.complex_eigenvalues();
    if eig.iter().any(|e| e.re >= 0.0) {
        return Err(Error::NoConvergence {
            what: "Riccati solution is not stabilizing".into(),
            iterations: 0,
        });
    }
    Ok(RiccatiSolution {
        covariance: p,
        gain,
        closed_loop,
    })
}

/// Optimal causal estimator of (q, p) from X, built from the steady-state
/// Riccati solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleFilter {
    pub solution: RiccatiSolution,
}

impl OracleFilter {
    pub fn new(model: &StateSpaceModel) -> Result<Self> {
        Ok(Self {
            solution: solve_riccati(model)?,
        })
    }

    /// (−iω I − (F − K M))⁻¹ K
    pub fn transfer(&self, omega: f64) -> [Complex64; 2] {
        let a = &self.solution.closed_loop;
        let k = &self.solution.gain;
        let s = Complex64::new(0.0, -omega);
        let m00 = s - a[(0, 0)];
        let m01 = Complex64::from(-a[(0, 1)]);
        let m10 = Complex64::from(-a[(1, 0)]);
        let m11 = s - a[(1, 1)];
        let det = m00 * m11 - m01 * m10;
        [
            (m11 * k[0] - m01 * k[1]) / det,
            (m00 * k[1] - m10 * k[0]) / det,
        ]
    }
}

impl FilterDesign for OracleFilter {
    fn h_q(&self, omega: f64) -> Complex64 {
        self.transfer(omega)[0]
    }

    fn h_p(&self, omega: f64) -> Complex64 {
        self.transfer(omega)[1]
    }

    fn source(&self) -> FilterSource {
        FilterSource::Oracle
    }
}

pub fn numerical_causal_wiener(
    model: &StateSpaceModel,
    frequencies_hz: &[f64],
) -> Result<FilterResponse> {
    Ok(OracleFilter::new(model)?.response(frequencies_hz))
}

/// Builds a filter for a given parameter set.
pub trait FilterFactory: Send + Sync {
    fn design(&self, params: &SystemParams) -> Result<Box<dyn FilterDesign>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AnalyticFactory;

impl FilterFactory for AnalyticFactory {
    fn design(&self, params: &SystemParams) -> Result<Box<dyn FilterDesign>> {
        Ok(Box::new(AnalyticFilter::new(params)?))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleFactory {
    pub mode: OpticalNoiseMode,
}

impl FilterFactory for OracleFactory {
    fn design(&self, params: &SystemParams) -> Result<Box<dyn FilterDesign>> {
        Ok(Box::new(OracleFilter::new(&build_model_with(
            params, self.mode,
        )?)?))
    }
}

/// Impulse response sampled by an inverse transform of a band-limited grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    /// Times in seconds, wrapped into [−T/2, T/2).
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl ImpulseResponse {
    /// Energy at t < 0 relative to the total.
    pub fn pre_zero_energy(&self) -> f64 {
        let total: f64 = self.values.iter().map(|v| v * v).sum();
        let pre: f64 = self
            .times
            .iter()
            .zip(&self.values)
            .filter(|(t, _)| **t < 0.0)
            .map(|(_, v)| v * v)
            .sum();
        if total > 0.0 {
            pre / total
        } else {
            0.0
        }
    }
}

/// Inverse transform of `h` sampled on ±f_max with spacing df.
///
/// The response is first multiplied by the causal roll-off
/// 1/(1 − iω/ω_c)³ with f_c = f_max/5, which removes the truncation ringing
/// of slowly decaying responses without moving any pole into the upper
/// half-plane.
pub fn impulse_response<F>(h: F, f_max: f64, df: f64) -> Result<ImpulseResponse>
where
    F: Fn(f64) -> Complex64,
{
    if !(df > 0.0) || !(f_max > df) {
        return Err(Error::Domain("need 0 < df < f_max".into()));
    }
    let m = (f_max / df).round() as usize;
    let n = 2 * m;
    let wc = 2.0 * PI * f_max / 5.0;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (k, b) in buf.iter_mut().enumerate() {
        let idx = if k <= m {
            k as f64
        } else {
            k as f64 - n as f64
        };
        let omega = 2.0 * PI * idx * df;
        let roll = Complex64::new(1.0, -omega / wc).powi(-3);
        *b = h(omega) * roll * df;
    }
    // x(t) = ∫ x(ω) e^{−iωt} dω/2π is a forward DFT on this grid
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let period = 1.0 / df;
    let dt = period / n as f64;
    let mut pairs: Vec<(f64, f64)> = buf
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let t = if j < n / 2 {
                j as f64 * dt
            } else {
                (j as f64 - n as f64) * dt
            };
            (t, v.re)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(ImpulseResponse {
        times: pairs.iter().map(|p| p.0).collect(),
        values: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Uniform grid 0, df, 2df, ... up to and including `f_max` (within rounding).
pub fn frequency_grid(f_max: f64, df: f64) -> Result<Vec<f64>> {
    if !(df > 0.0) || !(f_max >= 0.0) {
        return Err(Error::Domain("grid needs df > 0 and f_max >= 0".into()));
    }
    let n = (f_max / df + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| k as f64 * df).collect())
}

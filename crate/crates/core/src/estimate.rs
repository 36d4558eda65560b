//! Conditioning of the oscillator state on the measured record.
//!
//! The measured quadrature is turned into an analytic signal, filtered in
//! the frequency domain and compared with a reference trajectory. Residual
//! spectra integrated over a band give the conditional covariance V in
//! zero-point units.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix2x3};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, Spectrum, Window};
use crate::error::{Error, Result};
use crate::model::StateSpaceModel;
use crate::params::SystemParams;
use crate::wiener::{FilterDesign, FilterFactory, FilterResponse, ModifiedSusceptibility};

pub const DEFAULT_F_LO: f64 = 105.0;

/// Conditional covariance and its ellipse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalState {
    pub covariance: [[f64; 2]; 2],
    pub squeeze_var: f64,
    pub antisqueeze_var: f64,
    /// Orientation of the minor axis from the q axis, in degrees within
    /// (−90, 90], positive in the direction of free evolution (q → −p).
    pub angle_deg: f64,
    pub purity: f64,
    /// det V < 1: the covariance violates the uncertainty bound.
    pub below_heisenberg: bool,
    /// Minor-axis variance below the vacuum level.
    pub below_vacuum: bool,
}

impl ConditionalState {
    pub fn from_covariance(v: &Matrix2<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("covariance has non-finite entries".into()));
        }
        let (a, b, d) = (v[(0, 0)], 0.5 * (v[(0, 1)] + v[(1, 0)]), v[(1, 1)]);
        let mean = 0.5 * (a + d);
        let radius = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        let (lo, hi) = (mean - radius, mean + radius);
        let det = a * d - b * b;
        if !(det > 0.0) {
            return Err(Error::Domain(format!(
                "covariance is not positive definite (det = {det})"
            )));
        }
        let angle = if radius <= 1e-12 * hi.abs() {
            0.0
        } else {
            // major axis counterclockwise from q; minor axis is 90° further
            let major = 0.5 * (2.0 * b).atan2(a - d);
            wrap_angle(-(major + PI / 2.0).to_degrees())
        };
        Ok(Self {
            covariance: [[a, b], [b, d]],
            squeeze_var: lo,
            antisqueeze_var: hi,
            angle_deg: angle,
            purity: 1.0 / det.sqrt(),
            below_heisenberg: det < 1.0,
            below_vacuum: lo < 1.0,
        })
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        let c = self.covariance;
        Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1])
    }

    pub fn squeeze_amplitude(&self) -> f64 {
        self.squeeze_var.sqrt()
    }

    pub fn antisqueeze_amplitude(&self) -> f64 {
        self.antisqueeze_var.sqrt()
    }
}

/// Maps an angle in degrees into (−90, 90].
fn wrap_angle(deg: f64) -> f64 {
    let mut a = deg % 180.0;
    if a <= -90.0 {
        a += 180.0;
    } else if a > 90.0 {
        a -= 180.0;
    }
    a
}

/// Rotation by phase-space angle θ in the direction of free evolution.
pub fn phase_rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, s, -s, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseReport {
    pub squeeze_var: f64,
    pub antisqueeze_var: f64,
    pub squeeze_amplitude: f64,
    pub antisqueeze_amplitude: f64,
    pub angle_deg: f64,
    pub purity: f64,
    pub below_heisenberg: bool,
    /// One-sigma contour as (q, p) pairs.
    pub boundary: Vec<[f64; 2]>,
}

pub const ELLIPSE_POINTS: usize = 64;

pub fn ellipse_report(state: &ConditionalState) -> EllipseReport {
    let theta = (-state.angle_deg).to_radians();
    let minor = [theta.cos(), theta.sin()];
    let major = [-theta.sin(), theta.cos()];
    let (rs, ra) = (state.squeeze_amplitude(), state.antisqueeze_amplitude());
    let boundary = (0..ELLIPSE_POINTS)
        .map(|k| {
            let phi = 2.0 * PI * k as f64 / ELLIPSE_POINTS as f64;
            let (s, c) = phi.sin_cos();
            [
                rs * c * minor[0] + ra * s * major[0],
                rs * c * minor[1] + ra * s * major[1],
            ]
        })
        .collect();
    EllipseReport {
        squeeze_var: state.squeeze_var,
        antisqueeze_var: state.antisqueeze_var,
        squeeze_amplitude: rs,
        antisqueeze_amplitude: ra,
        angle_deg: state.angle_deg,
        purity: state.purity,
        below_heisenberg: state.below_heisenberg,
        boundary,
    }
}

/// Integration band [f_lo, (ω′ + γ′)/2π].
pub fn default_band(sus: &ModifiedSusceptibility, f_lo: f64) -> (f64, f64) {
    (f_lo, (sus.omega + sus.gamma) / (2.0 * PI))
}

/// The record that predictions are subtracted from.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    /// Simulator truth in zero-point units.
    Truth { q: &'a [f64], p: &'a [f64] },
    /// Calibrated displacement in metres; momentum follows from q̇ = ω_m p.
    Calibrated {
        displacement: &'a [f64],
        x_zpf: f64,
        omega_m: f64,
    },
}

impl Reference<'_> {
    fn resolve(&self, sample_rate: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        match *self {
            Reference::Truth { q, p } => {
                if q.len() != p.len() {
                    return Err(Error::Length("reference q and p differ in length".into()));
                }
                Ok((q.to_vec(), p.to_vec()))
            }
            Reference::Calibrated {
                displacement,
                x_zpf,
                omega_m,
            } => {
                if !(x_zpf > 0.0) || !(omega_m > 0.0) {
                    return Err(Error::Domain(
                        "calibration needs x_zpf > 0 and ω_m > 0".into(),
                    ));
                }
                let q: Vec<f64> = displacement.iter().map(|x| x / x_zpf).collect();
                let p = spectral_derivative(&q, sample_rate)
                    .into_iter()
                    .map(|v| v / omega_m)
                    .collect();
                Ok((q, p))
            }
        }
    }

    fn len(&self) -> usize {
        match self {
            Reference::Truth { q, .. } => q.len(),
            Reference::Calibrated { displacement, .. } => displacement.len(),
        }
    }
}

fn spectral_derivative(x: &[f64], sample_rate: f64) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let idx = if k < n.div_ceil(2) {
            k as f64
        } else if n.is_multiple_of(2) && k == n / 2 {
            0.0
        } else {
            k as f64 - n as f64
        };
        *v *= Complex64::new(0.0, 2.0 * PI * idx * sample_rate / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|v| v.re / n as f64).collect()
}

/// Analytic spectrum of the measured record, zero-padded against wrap-around.
#[derive(Debug, Clone)]
pub struct Conditioner {
    pub sample_rate: f64,
    len: usize,
    n_fft: usize,
    spectrum: Vec<Complex64>,
}

impl Conditioner {
    pub fn new(x: &[f64], sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 0.0) {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if x.len() < 16 {
            return Err(Error::Length(format!(
                "record of {} samples is too short",
                x.len()
            )));
        }
        let n_fft = (2 * x.len()).next_power_of_two();
        Ok(Self {
            sample_rate,
            len: x.len(),
            n_fft,
            spectrum: dsp::analytic_spectrum(x, n_fft),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Frequencies (Hz) on which a sampled filter must be given.
    pub fn grid(&self) -> Vec<f64> {
        let df = self.sample_rate / self.n_fft as f64;
        (0..=self.n_fft / 2).map(|k| k as f64 * df).collect()
    }

    /// Filters the analytic signal by each response and keeps the real part.
    ///
    /// Both outputs are real, so they share one inverse transform: the
    /// q̂ spectrum is Hermitian-extended and p̂ rides on the imaginary axis.
    /// DFT bins use e^{-iωt}, so responses given for e^{+iωt} enter conjugated.
    fn apply_pair<F, G>(&self, hq: F, hp: G) -> (Vec<f64>, Vec<f64>)
    where
        F: Fn(usize) -> Complex64,
        G: Fn(usize) -> Complex64,
    {
        let n = self.n_fft;
        let half = n / 2;
        let zero = Complex64::new(0.0, 0.0);
        let i = Complex64::new(0.0, 1.0);
        let mut buf = vec![zero; n];
        for k in 0..=half {
            // the analytic spectrum doubles interior bins; undo that for the real output
            let x = if k == 0 || k == half {
                self.spectrum[k]
            } else {
                self.spectrum[k] * 0.5
            };
            let yq = x * hq(k).conj();
            let yp = x * hp(k).conj();
            if k == 0 || k == half {
                buf[k] = Complex64::new(yq.re, 0.0) + i * yp.re;
            } else {
                buf[k] += yq + i * yp;
                buf[n - k] += yq.conj() + i * yp.conj();
            }
        }
        FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
        let scale = 1.0 / n as f64;
        buf[..self.len]
            .iter()
            .map(|v| (v.re * scale, v.im * scale))
            .unzip()
    }

    /// Real part of the inverse transform of the filtered analytic spectrum.
    #[cfg(test)]
    fn apply_analytic<F: Fn(usize) -> Complex64>(&self, h: F) -> Vec<f64> {
        let mut buf: Vec<Complex64> = self
            .spectrum
            .iter()
            .enumerate()
            .map(|(k, z)| {
                if k <= self.n_fft / 2 {
                    z * h(k).conj()
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        FftPlanner::new()
            .plan_fft_inverse(self.n_fft)
            .process(&mut buf);
        let scale = 1.0 / self.n_fft as f64;
        buf[..self.len].iter().map(|v| v.re * scale).collect()
    }

    /// Predictions (q̂, p̂) from a filter evaluated on the FFT grid.
    pub fn predict(&self, design: &dyn FilterDesign) -> (Vec<f64>, Vec<f64>) {
        let dw = 2.0 * PI * self.sample_rate / self.n_fft as f64;
        let grid: Vec<f64> = (0..=self.n_fft / 2).map(|k| k as f64 * dw).collect();
        let hq: Vec<Complex64> = grid.iter().map(|&w| design.h_q(w)).collect();
        let hp: Vec<Complex64> = grid.iter().map(|&w| design.h_p(w)).collect();
        self.apply_pair(|k| hq[k], |k| hp[k])
    }

    /// Predictions from a sampled response, which must sit on [`Self::grid`].
    pub fn predict_sampled(&self, response: &FilterResponse) -> Result<(Vec<f64>, Vec<f64>)> {
        let grid = self.grid();
        let df = self.sample_rate / self.n_fft as f64;
        let matches = response.frequencies_hz.len() == grid.len()
            && response.h_q.len() == grid.len()
            && response.h_p.len() == grid.len()
            && response
                .frequencies_hz
                .iter()
                .zip(&grid)
                .all(|(a, b)| (a - b).abs() <= 1e-6 * df);
        if !matches {
            return Err(Error::GridMismatch(format!(
                "filter needs {} points spaced {df} Hz from 0 to {} Hz, got {} points",
                grid.len(),
                self.sample_rate / 2.0,
                response.frequencies_hz.len()
            )));
        }
        Ok(self.apply_pair(|k| response.h_q[k], |k| response.h_p[k]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub sample_rate: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub q_hat: Vec<f64>,
    pub p_hat: Vec<f64>,
}

impl Residuals {
    fn build(
        sample_rate: f64,
        reference: &Reference<'_>,
        q_hat: Vec<f64>,
        p_hat: Vec<f64>,
    ) -> Result<Self> {
        let (q_ref, p_ref) = reference.resolve(sample_rate)?;
        let q = q_ref.iter().zip(&q_hat).map(|(a, b)| a - b).collect();
        let p = p_ref.iter().zip(&p_hat).map(|(a, b)| a - b).collect();
        Ok(Self {
            sample_rate,
            q,
            p,
            q_hat,
            p_hat,
        })
    }

    /// Drops the first `seconds` of every channel.
    pub fn trimmed(&self, seconds: f64) -> Self {
        let k = ((seconds * self.sample_rate).round() as usize).min(self.q.len());
        Self {
            sample_rate: self.sample_rate,
            q: self.q[k..].to_vec(),
            p: self.p[k..].to_vec(),
            q_hat: self.q_hat[k..].to_vec(),
            p_hat: self.p_hat[k..].to_vec(),
        }
    }

    /// Time-domain covariance of (q̃, p̃) after mean removal.
    pub fn sample_covariance(&self) -> Matrix2<f64> {
        let n = self.q.len() as f64;
        let mq = self.q.iter().sum::<f64>() / n;
        let mp = self.p.iter().sum::<f64>() / n;
        let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
        for (q, p) in self.q.iter().zip(&self.p) {
            let (x, y) = (q - mq, p - mp);
            a += x * x;
            b += x * y;
            d += y * y;
        }
        Matrix2::new(a, b, b, d) / (n - 1.0)
    }
}

fn check_lengths(conditioner: &Conditioner, reference: &Reference<'_>) -> Result<()> {
    if reference.len() != conditioner.len() {
        return Err(Error::Length(format!(
            "reference has {} samples, record has {}",
            reference.len(),
            conditioner.len()
        )));
    }
    Ok(())
}

/// Subtracts the filter predictions from the reference.
pub fn condition(
    conditioner: &Conditioner,
    design: &dyn FilterDesign,
    reference: Reference<'_>,
) -> Result<Residuals> {
    check_lengths(conditioner, &reference)?;
    let (q_hat, p_hat) = conditioner.predict(design);
    Residuals::build(conditioner.sample_rate, &reference, q_hat, p_hat)
}

/// As [`condition`] with a filter sampled on the conditioner grid.
pub fn condition_sampled(
    conditioner: &Conditioner,
    response: &FilterResponse,
    reference: Reference<'_>,
) -> Result<Residuals> {
    check_lengths(conditioner, &reference)?;
    let (q_hat, p_hat) = conditioner.predict_sampled(response)?;
    Residuals::build(conditioner.sample_rate, &reference, q_hat, p_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub band: (f64, f64),
    pub resolution_hz: f64,
    pub overlap: f64,
    pub window: Window,
    /// Leading seconds dropped before spectral estimation.
    pub discard_s: f64,
}

impl EstimateOptions {
    pub fn new(band: (f64, f64)) -> Self {
        Self {
            band,
            resolution_hz: 1.0,
            overlap: 0.5,
            window: Window::Hann,
            discard_s: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSpectra {
    pub qq: Spectrum,
    pub pp: Spectrum,
    /// Complex cross-spectrum; the real part is the cospectrum.
    pub qp: Spectrum,
}

pub fn residual_spectra(residuals: &Residuals, opts: &EstimateOptions) -> Result<ResidualSpectra> {
    let r = residuals.trimmed(opts.discard_s);
    let fs = r.sample_rate;
    let seg = dsp::segment_length_for_resolution(fs, opts.resolution_hz);
    Ok(ResidualSpectra {
        qq: dsp::psd_welch(&r.q, fs, seg, opts.overlap, opts.window)?,
        pp: dsp::psd_welch(&r.p, fs, seg, opts.overlap, opts.window)?,
        qp: dsp::cross_spectrum(&r.q, &r.p, fs, seg, opts.overlap, opts.window)?,
    })
}

/// Integrates the residual spectra over the band into V.
pub fn covariance_from_spectra(
    sqq: &Spectrum,
    spp: &Spectrum,
    sqp: &Spectrum,
    band: (f64, f64),
) -> Result<ConditionalState> {
    let same = |a: &Spectrum, b: &Spectrum| {
        a.frequencies.len() == b.frequencies.len()
            && (a.resolution - b.resolution).abs() <= 1e-12 * a.resolution
    };
    if !same(sqq, spp) || !same(sqq, sqp) {
        return Err(Error::GridMismatch("spectra are on different grids".into()));
    }
    let (f_lo, f_hi) = band;
    let vqq = sqq.integrate_real(f_lo, f_hi)?;
    let vpp = spp.integrate_real(f_lo, f_hi)?;
    let vqp = sqp.integrate_real(f_lo, f_hi)?;
    ConditionalState::from_covariance(&Matrix2::new(vqq, vqp, vqp, vpp))
}

/// Full data route: condition, estimate spectra, integrate.
pub fn estimate_state(
    conditioner: &Conditioner,
    design: &dyn FilterDesign,
    reference: Reference<'_>,
    opts: &EstimateOptions,
) -> Result<ConditionalState> {
    let residuals = condition(conditioner, design, reference)?;
    let s = residual_spectra(&residuals, opts)?;
    covariance_from_spectra(&s.qq, &s.pp, &s.qp, opts.band)
}

/// Purity for each lower band edge, upper edge fixed.
pub fn band_sensitivity(
    spectra: &ResidualSpectra,
    f_lo_values: &[f64],
    f_hi: f64,
) -> Vec<(f64, Result<f64>)> {
    f_lo_values
        .iter()
        .map(|&f_lo| {
            let purity =
                covariance_from_spectra(&spectra.qq, &spectra.pp, &spectra.qp, (f_lo, f_hi))
                    .map(|s| s.purity);
            (f_lo, purity)
        })
        .collect()
}

/// One-sided residual densities (S_qq, S_pp, cospectrum) at `f` Hz for a
/// filter applied to the continuous model output.
fn residual_density(model: &StateSpaceModel, design: &dyn FilterDesign, f: f64) -> [f64; 3] {
    let w = 2.0 * PI * f;
    let t = state_transfer(model, w);
    let m = model.measurement_row[0];
    let (hq, hp) = (design.h_q(w), design.h_p(w));
    let mut out = [0.0; 3];
    for j in 0..3 {
        let x = t[(0, j)] * m + model.feedthrough[j];
        let eq = t[(0, j)] - hq * x;
        let ep = t[(1, j)] - hp * x;
        let s = 2.0 * model.input_psd[j];
        out[0] += eq.norm_sqr() * s;
        out[1] += ep.norm_sqr() * s;
        out[2] += (eq.conj() * ep).re * s;
    }
    out
}

fn trapezoid(
    model: &StateSpaceModel,
    design: &dyn FilterDesign,
    grid: impl Iterator<Item = f64>,
) -> ([f64; 3], f64, [f64; 3]) {
    let mut acc = [0.0; 3];
    let mut prev: Option<(f64, [f64; 3])> = None;
    for f in grid {
        let d = residual_density(model, design, f);
        if let Some((f0, d0)) = prev {
            for k in 0..3 {
                acc[k] += 0.5 * (d0[k] + d[k]) * (f - f0);
            }
        }
        prev = Some((f, d));
    }
    let (f_end, d_end) = prev.unwrap_or((0.0, [0.0; 3]));
    (acc, f_end, d_end)
}

/// Line width resolved by the quadrature: a twentieth of γ_m/2π.
fn quadrature_step(model: &StateSpaceModel) -> f64 {
    (model.gamma_m() / (2.0 * PI) / 20.0).clamp(1e-4, 0.5)
}

/// Expected band-limited residual covariance for a filter applied to the
/// continuous model output, by quadrature over one-sided spectra.
pub fn model_covariance(
    model: &StateSpaceModel,
    design: &dyn FilterDesign,
    band: (f64, f64),
) -> Result<Matrix2<f64>> {
    let (f_lo, f_hi) = band;
    if !(f_lo >= 0.0 && f_lo < f_hi) {
        return Err(Error::Band(format!("invalid band [{f_lo}, {f_hi}]")));
    }
    let n = ((f_hi - f_lo) / quadrature_step(model)).ceil().max(1.0) as usize;
    let step = (f_hi - f_lo) / n as f64;
    let (acc, _, _) = trapezoid(model, design, (0..=n).map(|i| f_lo + i as f64 * step));
    Ok(Matrix2::new(acc[0], acc[2], acc[2], acc[1]))
}

/// Residual covariance over all frequencies.
///
/// A fine uniform grid covers the mechanical and filter features, a
/// geometric grid the decaying tail, and the remaining 1/f² tail is added
/// in closed form.
pub fn model_covariance_full(
    model: &StateSpaceModel,
    design: &dyn FilterDesign,
) -> Result<Matrix2<f64>> {
    let f_split = 100.0 * model.omega_m() / (2.0 * PI);
    let df = quadrature_step(model);
    let n = (f_split / df).ceil() as usize;
    let step = f_split / n as f64;
    let per_decade = 200;
    let decades = 5;
    let uniform = (0..=n).map(|i| i as f64 * step);
    let geometric =
        (1..=per_decade * decades).map(|i| f_split * 10f64.powf(i as f64 / per_decade as f64));
    let (mut acc, f_end, d_end) = trapezoid(model, design, uniform.chain(geometric));
    for k in 0..3 {
        acc[k] += d_end[k] * f_end;
    }
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("residual spectrum does not integrate".into()));
    }
    Ok(Matrix2::new(acc[0], acc[2], acc[2], acc[1]))
}

/// (−iω I − F)⁻¹ L
fn state_transfer(model: &StateSpaceModel, omega: f64) -> Matrix2x3<Complex64> {
    let f = &model.drift;
    let s = Complex64::new(0.0, -omega);
    let (a, b, c, d) = (s - f[(0, 0)], -f[(0, 1)], -f[(1, 0)], s - f[(1, 1)]);
    let det = a * d - b * c;
    let inv = [[d / det, -b / det], [-c / det, a / det]];
    let l = model.noise_map.map(Complex64::from);
    Matrix2x3::from_fn(|i, j| inv[i][0] * l[(0, j)] + inv[i][1] * l[(1, j)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Half-width of each grid in decades.
    pub decades: f64,
    pub points: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            decades: 1.0,
            points: 9,
        }
    }
}

impl SweepSpec {
    pub fn grid(&self, center: f64) -> Result<Vec<f64>> {
        if self.points == 0 {
            return Err(Error::Domain("sweep needs at least one point".into()));
        }
        if self.points == 1 {
            return Ok(vec![center]);
        }
        let m = (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|i| center * 10f64.powf(self.decades * (2.0 * i as f64 / m - 1.0)))
            .collect())
    }
}

/// Purity over an (n_th, N_th) grid; rows index n_th, columns N_th.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuritySurface {
    pub n_th: Vec<f64>,
    pub optical_n_th: Vec<f64>,
    pub purity: Vec<Vec<Option<f64>>>,
    /// Failures as (row, column, message).
    pub errors: Vec<(usize, usize, String)>,
}

impl PuritySurface {
    pub fn center(&self) -> (usize, usize) {
        (self.n_th.len() / 2, self.optical_n_th.len() / 2)
    }

    /// Location of the largest purity anywhere on the grid.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for (i, row) in self.purity.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some(((i, j), v));
                    }
                }
            }
        }
        best.map(|b| b.0)
    }

    /// Maxima along each axis through the center: (n_th row, N_th column).
    pub fn axis_argmax(&self) -> (Option<usize>, Option<usize>) {
        let (ci, cj) = self.center();
        let pick = |vals: Vec<Option<f64>>| {
            vals.iter()
                .enumerate()
                .filter_map(|(k, v)| v.map(|v| (k, v)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
        };
        let along_n = pick(self.purity.iter().map(|row| row[cj]).collect());
        let along_opt = pick(self.purity[ci].clone());
        (along_n, along_opt)
    }

    pub fn rows(&self) -> Vec<(f64, f64, Option<f64>)> {
        let mut out = Vec::new();
        for (i, &n) in self.n_th.iter().enumerate() {
            for (j, &o) in self.optical_n_th.iter().enumerate() {
                out.push((n, o, self.purity[i][j]));
            }
        }
        out
    }
}

/// Integration range used at each sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SweepBand {
    /// Time-domain residual covariance (all frequencies).
    Full,
    /// Residual spectra integrated over [f_lo, f_hi] Hz.
    Band(f64, f64),
}

/// What the sweep conditions on.
pub enum SweepData<'a> {
    /// A measured (or simulated) record with its reference.
    Series {
        conditioner: &'a Conditioner,
        reference: Reference<'a>,
        options: EstimateOptions,
    },
    /// Exact expectation under the generating model.
    Model(&'a StateSpaceModel),
}

/// Re-synthesizes the filter at each grid point and records the purity.
pub fn purity_sweep(
    identified: &SystemParams,
    data: &SweepData<'_>,
    factory: &dyn FilterFactory,
    spec: &SweepSpec,
    band: SweepBand,
) -> Result<PuritySurface> {
    let n_grid = spec.grid(identified.n_th())?;
    let o_grid = spec.grid(identified.optical_n_th())?;
    let cells: Vec<(usize, usize)> = (0..n_grid.len())
        .flat_map(|i| (0..o_grid.len()).map(move |j| (i, j)))
        .collect();
    let results: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let params = identified.with_noise(n_grid[i], o_grid[j])?;
            let design = factory.design(&params)?;
            let v = match (data, band) {
                (
                    SweepData::Series {
                        conditioner,
                        reference,
                        options,
                    },
                    SweepBand::Full,
                ) => condition(conditioner, design.as_ref(), *reference)?
                    .trimmed(options.discard_s)
                    .sample_covariance(),
                (
                    SweepData::Series {
                        conditioner,
                        reference,
                        options,
                    },
                    SweepBand::Band(lo, hi),
                ) => {
                    let opts = EstimateOptions {
                        band: (lo, hi),
                        ..*options
                    };
                    estimate_state(conditioner, design.as_ref(), *reference, &opts)?.matrix()
                }
                (SweepData::Model(model), SweepBand::Full) => {
                    model_covariance_full(model, design.as_ref())?
                }
                (SweepData::Model(model), SweepBand::Band(lo, hi)) => {
                    model_covariance(model, design.as_ref(), (lo, hi))?
                }
            };
            let state = ConditionalState::from_covariance(&v)?;
            Ok(state.purity)
        })
        .collect();
    let mut purity = vec![vec![None; o_grid.len()]; n_grid.len()];
    let mut errors = Vec::new();
    for (&(i, j), r) in cells.iter().zip(results) {
        match r {
            Ok(v) => purity[i][j] = Some(v),
            Err(e) => errors.push((i, j, e.to_string())),
        }
    }
    Ok(PuritySurface {
        n_th: n_grid,
        optical_n_th: o_grid,
        purity,
        errors,
    })
}

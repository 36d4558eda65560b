//! Signal-processing kernels: Welch spectra, IIR filters, analytic signal,
//! zero-crossing frequency counting and time binning.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Window {
    #[default]
    Hann,
    Hamming,
    Blackman,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        let nf = n as f64;
        (0..n)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / nf;
                match self {
                    Window::Hann => 0.5 - 0.5 * x.cos(),
                    Window::Hamming => 0.54 - 0.46 * x.cos(),
                    Window::Blackman => 0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectrumKind {
    Psd,
    Cross,
    Transfer,
}

/// One-sided spectrum on a uniform grid starting at 0 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    pub values: Vec<Complex64>,
    pub resolution: f64,
    pub kind: SpectrumKind,
}

impl Spectrum {
    pub fn real(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    /// Trapezoidal integral of the real part over `[f_lo, f_hi]`.
    pub fn integrate_real(&self, f_lo: f64, f_hi: f64) -> Result<f64> {
        let (i0, i1) = self.band_indices(f_lo, f_hi)?;
        let df = self.resolution;
        Ok((i0..i1)
            .map(|i| 0.5 * (self.values[i].re + self.values[i + 1].re) * df)
            .sum())
    }

    /// Indices of the first and last grid points inside the band.
    pub fn band_indices(&self, f_lo: f64, f_hi: f64) -> Result<(usize, usize)> {
        let last = *self.frequencies.last().ok_or(Error::Empty)?;
        if !(f_lo < f_hi) || f_lo < 0.0 || f_hi > last + 1e-9 * last.max(1.0) {
            return Err(Error::Band(format!(
                "band [{f_lo}, {f_hi}] Hz not inside the grid [0, {last}] Hz"
            )));
        }
        let i0 = (f_lo / self.resolution - 1e-9).ceil().max(0.0) as usize;
        let i1 = ((f_hi / self.resolution + 1e-9).floor() as usize).min(self.frequencies.len() - 1);
        if i1 <= i0 {
            return Err(Error::Band(format!(
                "band [{f_lo}, {f_hi}] Hz narrower than the resolution {}",
                self.resolution
            )));
        }
        Ok((i0, i1))
    }
}

/// Segment length giving the requested resolution at a sample rate.
pub fn segment_length_for_resolution(sample_rate: f64, resolution: f64) -> usize {
    (sample_rate / resolution).round().max(2.0) as usize
}

struct Welch {
    fs: f64,
    seg: usize,
    step: usize,
    window: Vec<f64>,
    scale: f64,
}

impl Welch {
    fn new(n: usize, fs: f64, seg: usize, overlap: f64, window: Window) -> Result<Self> {
        if !(fs > 0.0) {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if seg < 2 || seg > n {
            return Err(Error::Length(format!(
                "segment length {seg} must be in [2, {n}]"
            )));
        }
        if !(0.0..1.0).contains(&overlap) {
            return Err(Error::Domain(format!("overlap {overlap} outside [0, 1)")));
        }
        let w = window.coefficients(seg);
        let s2: f64 = w.iter().map(|v| v * v).sum();
        let step = (seg - (overlap * seg as f64).round() as usize).max(1);
        Ok(Self {
            fs,
            seg,
            step,
            window: w,
            scale: 1.0 / (fs * s2),
        })
    }

    fn segments(&self, n: usize) -> usize {
        (n - self.seg) / self.step + 1
    }

    fn windowed_fft(
        &self,
        data: &[f64],
        start: usize,
        fft: &dyn rustfft::Fft<f64>,
        buf: &mut [Complex64],
    ) {
        let chunk = &data[start..start + self.seg];
        let mean = chunk.iter().sum::<f64>() / self.seg as f64;
        for ((b, &x), &w) in buf.iter_mut().zip(chunk).zip(&self.window) {
            *b = Complex64::new((x - mean) * w, 0.0);
        }
        fft.process(buf);
    }

    fn one_sided_factor(&self, k: usize) -> f64 {
        if k == 0 || (self.seg.is_multiple_of(2) && k == self.seg / 2) {
            1.0
        } else {
            2.0
        }
    }

    fn frequencies(&self) -> Vec<f64> {
        (0..=self.seg / 2)
            .map(|k| k as f64 * self.fs / self.seg as f64)
            .collect()
    }
}

/// One-sided Welch PSD with per-segment mean removal.
pub fn psd_welch(
    series: &[f64],
    sample_rate: f64,
    segment_length: usize,
    overlap: f64,
    window: Window,
) -> Result<Spectrum> {
    let cross = cross_spectrum(series, series, sample_rate, segment_length, overlap, window)?;
    Ok(Spectrum {
        values: cross
            .values
            .iter()
            .map(|v| Complex64::new(v.re, 0.0))
            .collect(),
        kind: SpectrumKind::Psd,
        ..cross
    })
}

/// One-sided Welch cross-spectrum S_ab = 2 conj(A) B / (fs Σw²).
///
/// The real part is the cospectrum, the imaginary part the quadspectrum.
pub fn cross_spectrum(
    a: &[f64],
    b: &[f64],
    sample_rate: f64,
    segment_length: usize,
    overlap: f64,
    window: Window,
) -> Result<Spectrum> {
    if a.len() != b.len() {
        return Err(Error::Length(format!(
            "cross spectrum inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let w = Welch::new(a.len(), sample_rate, segment_length, overlap, window)?;
    let same = std::ptr::eq(a.as_ptr(), b.as_ptr());
    let fft = FftPlanner::new().plan_fft_forward(w.seg);
    let nbins = w.seg / 2 + 1;
    let mut acc = vec![Complex64::new(0.0, 0.0); nbins];
    let mut ba = vec![Complex64::new(0.0, 0.0); w.seg];
    let mut bb = vec![Complex64::new(0.0, 0.0); w.seg];
    let nseg = w.segments(a.len());
    for s in 0..nseg {
        let start = s * w.step;
        w.windowed_fft(a, start, fft.as_ref(), &mut ba);
        if same {
            for (acc, x) in acc.iter_mut().zip(&ba) {
                *acc += x.norm_sqr();
            }
        } else {
            w.windowed_fft(b, start, fft.as_ref(), &mut bb);
            for k in 0..nbins {
                acc[k] += ba[k].conj() * bb[k];
            }
        }
    }
    let norm = w.scale / nseg as f64;
    let values = acc
        .iter()
        .enumerate()
        .map(|(k, v)| v * norm * w.one_sided_factor(k))
        .collect();
    Ok(Spectrum {
        frequencies: w.frequencies(),
        values,
        resolution: sample_rate / w.seg as f64,
        kind: SpectrumKind::Cross,
    })
}

/// Magnitude-squared coherence |S_ab|² / (S_aa S_bb).
pub fn coherence(
    a: &[f64],
    b: &[f64],
    sample_rate: f64,
    segment_length: usize,
    overlap: f64,
    window: Window,
) -> Result<Vec<f64>> {
    let sab = cross_spectrum(a, b, sample_rate, segment_length, overlap, window)?;
    let saa = psd_welch(a, sample_rate, segment_length, overlap, window)?;
    let sbb = psd_welch(b, sample_rate, segment_length, overlap, window)?;
    Ok(sab
        .values
        .iter()
        .zip(saa.values.iter().zip(&sbb.values))
        .map(|(ab, (aa, bb))| {
            let d = aa.re * bb.re;
            if d > 0.0 {
                ab.norm_sqr() / d
            } else {
                0.0
            }
        })
        .collect())
}

/// Direct-form II transposed biquad; `a0` normalized to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2)
            / (1.0 + self.a[0] * z_inv + self.a[1] * z2)
    }

    /// State after an infinitely long unit-step input.
    fn step_state(&self) -> [f64; 2] {
        let y = (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1]);
        let z2 = self.b[2] - self.a[1] * y;
        let z1 = self.b[1] - self.a[0] * y + z2;
        [z1, z2]
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sos {
    pub sections: Vec<Biquad>,
    pub gain: f64,
    pub sample_rate: f64,
}

impl Sos {
    pub fn response(&self, f: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f / self.sample_rate);
        self.sections
            .iter()
            .fold(Complex64::new(self.gain, 0.0), |acc, s| {
                acc * s.response(z_inv)
            })
    }

    /// Causal filtering from zero initial state.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let zero = vec![[0.0; 2]; self.sections.len()];
        self.filter_with_state(x, &zero)
    }

    fn filter_with_state(&self, x: &[f64], init: &[[f64; 2]]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| v * self.gain).collect();
        for (s, z0) in self.sections.iter().zip(init) {
            let [mut z1, mut z2] = *z0;
            let [b0, b1, b2] = s.b;
            let [a1, a2] = s.a;
            for v in out.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z1;
                z1 = b1 * xin - a1 * y + z2;
                z2 = b2 * xin - a2 * y;
                *v = y;
            }
        }
        out
    }

    /// Steady-state initial conditions for a constant input `level`.
    fn step_states(&self, level: f64) -> Vec<[f64; 2]> {
        let mut scale = level * self.gain;
        self.sections
            .iter()
            .map(|s| {
                let [z1, z2] = s.step_state();
                let out = [z1 * scale, z2 * scale];
                scale *= (s.b[0] + s.b[1] + s.b[2]) / (1.0 + s.a[0] + s.a[1]);
                out
            })
            .collect()
    }

    /// Forward–backward filtering with odd extension at both ends.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (6 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let fwd = self.filter_with_state(&ext, &self.step_states(ext[0]));
        let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
        rev = self.filter_with_state(&rev, &self.step_states(rev[0]));
        rev.reverse();
        rev[pad..pad + n].to_vec()
    }
}

fn prewarp(f: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f / fs).tan()
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    let k = 2.0 * fs;
    (k + s) / (k - s)
}

fn butterworth_prototype(order: usize) -> Vec<Complex64> {
    (0..order)
        .map(|k| {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

/// Pairs digital poles into sections with the given zeros per section.
fn sections_from_poles(poles: &[Complex64], zeros: [f64; 3]) -> Vec<Biquad> {
    let mut out = Vec::new();
    let mut reals = Vec::new();
    for p in poles {
        if p.im > 1e-12 {
            out.push(Biquad {
                b: zeros,
                a: [-2.0 * p.re, p.norm_sqr()],
            });
        } else if p.im.abs() <= 1e-12 {
            reals.push(p.re);
        }
    }
    for pair in reals.chunks(2) {
        match pair {
            [r1, r2] => out.push(Biquad {
                b: zeros,
                a: [-(r1 + r2), r1 * r2],
            }),
            [r] => out.push(Biquad {
                b: [zeros[0], zeros[1] * 0.5 + zeros[0] * 0.5, 0.0],
                a: [-r, 0.0],
            }),
            _ => unreachable!(),
        }
    }
    out
}

fn check_nyquist(f: f64, fs: f64, what: &str) -> Result<()> {
    if !(f > 0.0) || f >= fs / 2.0 {
        return Err(Error::Band(format!(
            "{what} {f} Hz must lie in (0, {}) Hz",
            fs / 2.0
        )));
    }
    Ok(())
}

/// Butterworth lowpass; `cutoff` is the -3 dB frequency of one pass.
pub fn butter_lowpass(order: usize, cutoff: f64, sample_rate: f64) -> Result<Sos> {
    check_nyquist(cutoff, sample_rate, "cutoff")?;
    if order == 0 {
        return Err(Error::Domain("filter order must be >= 1".into()));
    }
    let wc = prewarp(cutoff, sample_rate);
    let poles: Vec<Complex64> = butterworth_prototype(order)
        .into_iter()
        .map(|p| bilinear(p * wc, sample_rate))
        .collect();
    let mut sos = Sos {
        sections: Vec::new(),
        gain: 1.0,
        sample_rate,
    };
    let mut secs = Vec::new();
    for p in &poles {
        if p.im > 1e-12 {
            secs.push(Biquad {
                b: [1.0, 2.0, 1.0],
                a: [-2.0 * p.re, p.norm_sqr()],
            });
        } else if p.im.abs() <= 1e-12 {
            secs.push(Biquad {
                b: [1.0, 1.0, 0.0],
                a: [-p.re, 0.0],
            });
        }
    }
    sos.sections = secs;
    sos.gain = 1.0 / sos.response(0.0).norm();
    Ok(sos)
}

/// Butterworth bandpass; the band edges are the -3 dB points of one pass.
pub fn butter_bandpass(order: usize, f_lo: f64, f_hi: f64, sample_rate: f64) -> Result<Sos> {
    check_nyquist(f_lo, sample_rate, "lower edge")?;
    check_nyquist(f_hi, sample_rate, "upper edge")?;
    if !(f_lo < f_hi) {
        return Err(Error::Band(format!(
            "lower edge {f_lo} >= upper edge {f_hi}"
        )));
    }
    if order == 0 {
        return Err(Error::Domain("filter order must be >= 1".into()));
    }
    let w1 = prewarp(f_lo, sample_rate);
    let w2 = prewarp(f_hi, sample_rate);
    let w0sq = w1 * w2;
    let bw = w2 - w1;
    let mut poles = Vec::with_capacity(2 * order);
    for p in butterworth_prototype(order) {
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0sq).sqrt();
        poles.push(bilinear((pb + disc) / 2.0, sample_rate));
        poles.push(bilinear((pb - disc) / 2.0, sample_rate));
    }
    let mut sos = Sos {
        sections: sections_from_poles(&poles, [1.0, 0.0, -1.0]),
        gain: 1.0,
        sample_rate,
    };
    let center = (w0sq.sqrt() / (2.0 * sample_rate)).atan() * sample_rate / PI;
    sos.gain = 1.0 / sos.response(center).norm();
    Ok(sos)
}

/// Second-order notch with -3 dB width `width` around `f0`.
pub fn notch(f0: f64, width: f64, sample_rate: f64) -> Result<Biquad> {
    check_nyquist(f0, sample_rate, "notch frequency")?;
    if !(width > 0.0) {
        return Err(Error::Domain("notch width must be positive".into()));
    }
    let w0 = 2.0 * PI * f0 / sample_rate;
    let bw = 2.0 * PI * width / sample_rate;
    // pole radius from the bandwidth, zeros on the unit circle
    let alpha = (bw / 2.0).tan();
    let a0 = 1.0 + alpha;
    let c = w0.cos();
    Ok(Biquad {
        b: [1.0 / a0, -2.0 * c / a0, 1.0 / a0],
        a: [-2.0 * c / a0, (1.0 - alpha) / a0],
    })
}

/// Whether a filter runs once forward or forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterMode {
    Causal,
    ZeroPhase,
}

/// Per-pass attenuation (dB) chosen so that two passes meet the target.
fn zero_phase_edge(order: usize, per_pass_db: f64) -> f64 {
    (10f64.powf(per_pass_db / 10.0) - 1.0).powf(1.0 / (2 * order) as f64)
}

pub const BANDPASS_ORDER: usize = 6;
pub const LOWPASS_ORDER: usize = 4;

/// Zero-phase Butterworth bandpass, at most 1 dB down at the band edges.
pub fn bandpass_design(sample_rate: f64, f_lo: f64, f_hi: f64) -> Result<Sos> {
    check_nyquist(f_lo, sample_rate, "lower edge")?;
    check_nyquist(f_hi, sample_rate, "upper edge")?;
    if !(f_lo < f_hi) {
        return Err(Error::Band(format!(
            "lower edge {f_lo} >= upper edge {f_hi}"
        )));
    }
    // widen the design band (in the prewarped domain) so each pass is 0.49 dB down at the edges
    let edge = zero_phase_edge(BANDPASS_ORDER, 0.49);
    let w1 = prewarp(f_lo, sample_rate);
    let w2 = prewarp(f_hi, sample_rate);
    let w0 = (w1 * w2).sqrt();
    let bw = (w2 - w1) / edge;
    let d1 = (-bw + (bw * bw + 4.0 * w0 * w0).sqrt()) / 2.0;
    let d2 = d1 + bw;
    let unwarp = |w: f64| (w / (2.0 * sample_rate)).atan() * sample_rate / PI;
    butter_bandpass(BANDPASS_ORDER, unwarp(d1), unwarp(d2), sample_rate)
}

/// Zero-phase bandpass used by the frequency-counting pipeline.
pub fn bandpass(series: &[f64], sample_rate: f64, f_lo: f64, f_hi: f64) -> Result<Vec<f64>> {
    Ok(bandpass_design(sample_rate, f_lo, f_hi)?.filtfilt(series))
}

/// Zero-phase lowpass whose combined response is -3 dB at `cutoff`.
pub fn lowpass_design(sample_rate: f64, cutoff: f64) -> Result<Sos> {
    check_nyquist(cutoff, sample_rate, "cutoff")?;
    let edge = zero_phase_edge(LOWPASS_ORDER, 1.5);
    let wc = prewarp(cutoff, sample_rate) / edge;
    let design = (wc / (2.0 * sample_rate)).atan() * sample_rate / PI;
    butter_lowpass(LOWPASS_ORDER, design, sample_rate)
}

pub fn lowpass(series: &[f64], sample_rate: f64, cutoff: f64) -> Result<Vec<f64>> {
    if series.len() < 16 {
        return Err(Error::Length(format!(
            "series of length {} is shorter than 16",
            series.len()
        )));
    }
    Ok(lowpass_design(sample_rate, cutoff)?.filtfilt(series))
}

/// Cascade of notches at f0, 2 f0, ..., n f0.
pub fn notch_harmonics_design(
    sample_rate: f64,
    f0: f64,
    n_harmonics: usize,
    width: f64,
) -> Result<Sos> {
    if n_harmonics == 0 {
        return Err(Error::Domain("need at least one harmonic".into()));
    }
    let top = f0 * n_harmonics as f64;
    if !(f0 > 0.0) || top >= sample_rate / 2.0 {
        return Err(Error::Band(format!(
            "harmonic {n_harmonics} x {f0} Hz = {top} Hz is at or above Nyquist {} Hz",
            sample_rate / 2.0
        )));
    }
    let sections = (1..=n_harmonics)
        .map(|k| notch(f0 * k as f64, width, sample_rate))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sos {
        sections,
        gain: 1.0,
        sample_rate,
    })
}

pub fn notch_harmonics(
    series: &[f64],
    sample_rate: f64,
    f0: f64,
    n_harmonics: usize,
    width: f64,
    mode: FilterMode,
) -> Result<Vec<f64>> {
    let sos = notch_harmonics_design(sample_rate, f0, n_harmonics, width)?;
    Ok(match mode {
        FilterMode::Causal => sos.filter(series),
        FilterMode::ZeroPhase => sos.filtfilt(series),
    })
}

/// FFT analytic signal: real part is the input, negative frequencies removed.
pub fn analytic_signal(series: &[f64]) -> Result<Vec<Complex64>> {
    analytic_signal_padded(series, series.len())
}

/// Analytic signal of the series zero-padded to `n_fft` samples.
pub fn analytic_signal_padded(series: &[f64], n_fft: usize) -> Result<Vec<Complex64>> {
    if series.len() < 16 {
        return Err(Error::Length(format!(
            "series of length {} is shorter than 16",
            series.len()
        )));
    }
    if n_fft < series.len() {
        return Err(Error::Length("FFT length shorter than the series".into()));
    }
    let mut spec = analytic_spectrum(series, n_fft);
    FftPlanner::new().plan_fft_inverse(n_fft).process(&mut spec);
    let scale = 1.0 / n_fft as f64;
    spec.iter_mut().for_each(|v| *v *= scale);
    Ok(spec)
}

/// DFT of the analytic signal: X₀, 2X_k for 0 < k < n/2, X_{n/2}, zeros above.
pub(crate) fn analytic_spectrum(series: &[f64], n_fft: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = series
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n_fft)
        .collect();
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    let half = n_fft / 2;
    for (k, v) in buf.iter_mut().enumerate() {
        let is_edge = k == 0 || (n_fft.is_multiple_of(2) && k == half);
        if is_edge {
            continue;
        }
        if k <= (n_fft - 1) / 2 {
            *v *= 2.0;
        } else {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    buf
}

/// Instantaneous frequency from rising and falling zero crossings.
///
/// Each pair of consecutive crossings (linearly interpolated) gives
/// f = 1/(2 Δt) at the midpoint; the estimates are linearly interpolated
/// back onto the input sample times and held constant past the ends.
pub fn count_zero_crossings(series: &[f64], sample_rate: f64) -> Result<Vec<f64>> {
    let crossings = zero_crossing_times(series);
    if crossings.len() < 2 {
        return Err(Error::NoCrossings);
    }
    let mids: Vec<(f64, f64)> = crossings
        .windows(2)
        .map(|w| (0.5 * (w[0] + w[1]), sample_rate / (2.0 * (w[1] - w[0]))))
        .collect();
    let mut out = Vec::with_capacity(series.len());
    let mut j = 0;
    for i in 0..series.len() {
        let t = i as f64;
        while j + 1 < mids.len() && mids[j + 1].0 <= t {
            j += 1;
        }
        let v = if t <= mids[0].0 {
            mids[0].1
        } else if j + 1 >= mids.len() {
            mids[mids.len() - 1].1
        } else {
            let (t0, f0) = mids[j];
            let (t1, f1) = mids[j + 1];
            f0 + (f1 - f0) * (t - t0) / (t1 - t0)
        };
        out.push(v);
    }
    Ok(out)
}

/// Crossing times in fractional samples.
pub fn zero_crossing_times(series: &[f64]) -> Vec<f64> {
    series
        .windows(2)
        .enumerate()
        .filter(|(_, w)| (w[0] < 0.0) != (w[1] < 0.0))
        .map(|(i, w)| i as f64 + w[0] / (w[0] - w[1]))
        .collect()
}

/// Means over `n_bins` equal contiguous bins; the remainder joins the last bin.
pub fn bin_average(series: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Empty);
    }
    if n_bins == 0 || n_bins > series.len() {
        return Err(Error::Length(format!(
            "cannot split {} samples into {n_bins} bins",
            series.len()
        )));
    }
    let width = series.len() / n_bins;
    Ok((0..n_bins)
        .map(|b| {
            let start = b * width;
            let end = if b + 1 == n_bins {
                series.len()
            } else {
                start + width
            };
            series[start..end].iter().sum::<f64>() / (end - start) as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tone(f: f64, fs: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * f * i as f64 / fs).sin())
            .collect()
    }

    fn white(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn db(x: f64) -> f64 {
        20.0 * x.log10()
    }

    #[test]
    fn white_noise_psd_is_flat_and_integrates_to_variance() {
        let fs = 50_000.0;
        let x = white(500_000, 1);
        let s = psd_welch(&x, fs, 1000, 0.5, Window::Hann).unwrap();
        let mid = &s.values[10..490];
        let mean = mid.iter().map(|v| v.re).sum::<f64>() / mid.len() as f64;
        assert!(
            (mean - 2.0 / fs).abs() < 0.02 * 2.0 / fs,
            "mean level {mean}"
        );
        let total: f64 = s.values.iter().map(|v| v.re).sum::<f64>() * s.resolution;
        assert!((total - 1.0).abs() < 0.02, "integral {total}");
    }

    #[test]
    fn sine_power_lands_in_peak() {
        let fs = 50_000.0;
        let a = 3.0;
        let x = tone(1000.0, fs, 200_000, a);
        let s = psd_welch(&x, fs, 5000, 0.5, Window::Hann).unwrap();
        let peak = s.integrate_real(950.0, 1050.0).unwrap();
        assert!((peak - a * a / 2.0).abs() < 0.01 * a * a / 2.0, "{peak}");
    }

    #[test]
    fn psd_rejects_bad_segment() {
        let x = vec![0.0; 100];
        assert!(matches!(
            psd_welch(&x, 1.0, 200, 0.5, Window::Hann),
            Err(Error::Length(_))
        ));
        assert!(psd_welch(&x, 1.0, 50, 1.0, Window::Hann).is_err());
    }

    #[test]
    fn auto_cross_spectrum_is_real_psd() {
        let x = white(20_000, 2);
        let s = cross_spectrum(&x, &x.clone(), 1000.0, 256, 0.5, Window::Hann).unwrap();
        let p = psd_welch(&x, 1000.0, 256, 0.5, Window::Hann).unwrap();
        for (a, b) in s.values.iter().zip(&p.values) {
            assert!(a.im.abs() < 1e-18);
            assert!((a.re - b.re).abs() < 1e-12 * b.re.max(1e-30));
        }
    }

    #[test]
    fn quadrature_pair_has_no_cospectrum() {
        let fs = 10_000.0;
        let n = 100_000;
        let a: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * 500.0 * i as f64 / fs).cos())
            .collect();
        let b: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * 500.0 * i as f64 / fs).sin())
            .collect();
        let s = cross_spectrum(&a, &b, fs, 1000, 0.5, Window::Hann).unwrap();
        let k = 50;
        assert!(s.values[k].re.abs() < 1e-6 * s.values[k].norm());
    }

    #[test]
    fn cross_spectrum_length_mismatch() {
        assert!(matches!(
            cross_spectrum(&[0.0; 10], &[0.0; 11], 1.0, 4, 0.0, Window::Hann),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn independent_streams_are_incoherent() {
        // 400 non-overlapping averages; coherence of independent noise ~ 1/400
        let a = white(25_600, 3);
        let b = white(25_600, 4);
        let c = coherence(&a, &b, 1.0, 64, 0.0, Window::Hann).unwrap();
        assert!(
            c.iter().all(|&v| v < 0.05),
            "max {:?}",
            c.iter().cloned().fold(0.0, f64::max)
        );
    }

    #[test]
    fn bandpass_passes_center_and_rejects_outside() {
        let fs = 50_000.0;
        let n = 200_000;
        let x = tone(280.0, fs, n, 1.0);
        let y = bandpass(&x, fs, 170.0, 360.0).unwrap();
        let core = 20_000..n - 20_000;
        let gain = rms(&y[core.clone()]) / rms(&x[core.clone()]);
        assert!(db(gain).abs() < 1.0);
        // zero phase: output tracks input sample for sample
        let err = y[core.clone()]
            .iter()
            .zip(&x[core.clone()])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.05, "max deviation {err}");

        let hum = tone(50.0, fs, n, 1.0);
        let yh = bandpass(&hum, fs, 170.0, 360.0).unwrap();
        assert!(db(rms(&yh[core.clone()])) < -40.0);

        let dc = vec![1.0; n];
        let yd = bandpass(&dc, fs, 170.0, 360.0).unwrap();
        assert!(db(rms(&yd[core]).max(1e-300)) < -40.0);
    }

    #[test]
    fn bandpass_design_meets_mask() {
        let fs = 50_000.0;
        let sos = bandpass_design(fs, 170.0, 360.0).unwrap();
        let two_pass = |f: f64| db(sos.response(f).norm_sqr());
        for f in [170.0, 200.0, 250.0, 280.0, 330.0, 360.0] {
            assert!(
                two_pass(f) > -1.0 && two_pass(f) < 1e-9,
                "{f}: {}",
                two_pass(f)
            );
        }
        assert!(two_pass(85.0) < -40.0);
        assert!(two_pass(720.0) < -40.0);
    }

    #[test]
    fn bandpass_rejects_bad_band() {
        assert!(matches!(
            bandpass(&[0.0; 100], 1000.0, 300.0, 200.0),
            Err(Error::Band(_))
        ));
        assert!(matches!(
            bandpass(&[0.0; 100], 1000.0, 100.0, 600.0),
            Err(Error::Band(_))
        ));
    }

    #[test]
    fn lowpass_corner_and_stopband() {
        let fs = 50_000.0;
        let sos = lowpass_design(fs, 8.2).unwrap();
        let two_pass = |f: f64| db(sos.response(f).norm_sqr());
        // -3 dB point within 5% of 8.2 Hz
        assert!(two_pass(8.2 * 0.95) > -3.0);
        assert!(two_pass(8.2 * 1.05) < -3.0);
        assert!((two_pass(8.2) + 3.0).abs() < 0.05);
        let x = tone(280.0, fs, 100_000, 1.0);
        let y = lowpass(&x, fs, 8.2).unwrap();
        assert!(db(rms(&y[20_000..80_000])) < -40.0);
    }

    #[test]
    fn notch_rejects_harmonics_and_keeps_tone() {
        let fs = 10_000.0;
        let n = 200_000;
        let tail = 100_000..n;
        let keep = tone(280.0, fs, n, 1.0);
        let mix: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                (2.0 * PI * 50.0 * t).sin() + (2.0 * PI * 150.0 * t).sin() + keep[i]
            })
            .collect();
        let y = notch_harmonics(&mix, fs, 50.0, 6, 2.0, FilterMode::Causal).unwrap();
        // residual vs the pure tone: only the 280 Hz component should survive
        let diff: Vec<f64> = y[tail.clone()]
            .iter()
            .zip(&keep[tail.clone()])
            .map(|(a, b)| a - b)
            .collect();
        let keep_rms = rms(&keep[tail.clone()]);
        assert!(db(rms(&diff) / keep_rms) < -30.0);
        let sos = notch_harmonics_design(fs, 50.0, 6, 2.0).unwrap();
        assert!(db(sos.response(280.0).norm()).abs() < 0.5);
        for k in 1..=6 {
            assert!(db(sos.response(50.0 * k as f64).norm()) < -30.0);
        }
        // 3 widths away from a notch
        assert!(db(sos.response(106.0).norm()).abs() < 0.5);
        let pure = notch_harmonics(&keep, fs, 50.0, 6, 2.0, FilterMode::Causal).unwrap();
        assert!(db(rms(&pure[tail.clone()]) / keep_rms).abs() < 0.5);
    }

    #[test]
    fn notch_variance_reduction_matches_designed_response() {
        let fs = 2000.0;
        let x = white(2_000_000, 9);
        let (f0, n, w) = (50.0, 6, 5.0);
        let y = notch_harmonics(&x, fs, f0, n, w, FilterMode::Causal).unwrap();
        let ratio = (rms(&y[2000..]) / rms(&x[2000..])).powi(2);
        // oracle: mean of |H|² over [0, Nyquist] from the designed response
        let sos = notch_harmonics_design(fs, f0, n, w).unwrap();
        let m = 200_000;
        let mean: f64 = (0..m)
            .map(|i| {
                sos.response((i as f64 + 0.5) * fs / 2.0 / m as f64)
                    .norm_sqr()
            })
            .sum::<f64>()
            / m as f64;
        assert!((ratio - mean).abs() < 0.003, "{ratio} vs {mean}");
        // each notch removes about (pi/2) * width of bandwidth
        let approx = 1.0 - n as f64 * (PI / 2.0) * w / (fs / 2.0);
        assert!((mean - approx).abs() < 0.01);
    }

    #[test]
    fn notch_above_nyquist_is_rejected() {
        assert!(matches!(
            notch_harmonics(&[0.0; 32], 1000.0, 50.0, 10, 1.0, FilterMode::Causal),
            Err(Error::Band(_))
        ));
    }

    #[test]
    fn analytic_signal_of_cosine() {
        let fs = 1000.0;
        let n = 4000;
        let f0 = 50.0;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * f0 * i as f64 / fs).cos())
            .collect();
        let z = analytic_signal(&x).unwrap();
        let mut acc = 0.0;
        for (i, v) in z.iter().enumerate().take(n - 200).skip(200) {
            let ph = 2.0 * PI * f0 * i as f64 / fs;
            acc += (v - Complex64::new(ph.cos(), ph.sin())).norm_sqr();
            assert!((v.re - x[i]).abs() < 1e-12);
        }
        assert!((acc / (n - 400) as f64).sqrt() < 1e-3);
    }

    #[test]
    fn analytic_signal_has_no_negative_frequencies() {
        let x = white(4096, 7);
        let mut z = analytic_signal(&x).unwrap();
        FftPlanner::new().plan_fft_forward(z.len()).process(&mut z);
        let pos: f64 = z[1..2048].iter().map(|v| v.norm_sqr()).sum();
        let neg: f64 = z[2049..].iter().map(|v| v.norm_sqr()).sum();
        assert!(10.0 * (neg / pos).log10() < -60.0);
    }

    #[test]
    fn envelope_of_am_tone() {
        let fs = 10_000.0;
        let n = 50_000;
        let env: Vec<f64> = (0..n)
            .map(|i| 1.0 + 0.5 * (2.0 * PI * 3.0 * i as f64 / fs).cos())
            .collect();
        let x: Vec<f64> = (0..n)
            .map(|i| env[i] * (2.0 * PI * 800.0 * i as f64 / fs).cos())
            .collect();
        let z = analytic_signal(&x).unwrap();
        for i in (1000..n - 1000).step_by(97) {
            assert!((z[i].norm() - env[i]).abs() < 0.01 * env[i]);
        }
    }

    #[test]
    fn analytic_signal_needs_sixteen_samples() {
        assert!(analytic_signal(&[1.0; 15]).is_err());
    }

    #[test]
    fn counts_pure_tone() {
        let fs = 50_000.0;
        let x = tone(280.0, fs, 100_000, 1.0);
        let f = count_zero_crossings(&x, fs).unwrap();
        assert_eq!(f.len(), x.len());
        assert!(f.iter().all(|v| (v - 280.0).abs() < 0.1));
    }

    #[test]
    fn counts_chirp_after_lowpass() {
        let fs = 50_000.0;
        let dur = 10.0;
        let n = (fs * dur) as usize;
        let (f0, f1) = (250.0, 310.0);
        let rate = (f1 - f0) / dur;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                (2.0 * PI * (f0 * t + 0.5 * rate * t * t)).sin()
            })
            .collect();
        let f = count_zero_crossings(&x, fs).unwrap();
        let smooth = lowpass(&f, fs, 8.2).unwrap();
        for i in (fs as usize..n - fs as usize).step_by(1000) {
            let truth = f0 + rate * i as f64 / fs;
            assert!(
                (smooth[i] - truth).abs() < 1.0,
                "t={} {} vs {truth}",
                i as f64 / fs,
                smooth[i]
            );
        }
    }

    #[test]
    fn counts_noisy_tone() {
        let fs = 50_000.0;
        let n = 500_000;
        let noise = white(n, 11);
        // in-band SNR 20 dB: tone power 0.5, noise power in 170..360 Hz is 0.005
        let sigma = (0.005_f64 / (190.0 / (fs / 2.0))).sqrt();
        let x: Vec<f64> = tone(280.0, fs, n, 1.0)
            .iter()
            .zip(&noise)
            .map(|(s, w)| s + sigma * w)
            .collect();
        let y = bandpass(&x, fs, 170.0, 360.0).unwrap();
        let f = count_zero_crossings(&y, fs).unwrap();
        let smooth = lowpass(&f, fs, 8.2).unwrap();
        let mean = smooth[50_000..n - 50_000].iter().sum::<f64>() / (n - 100_000) as f64;
        assert!((mean - 280.0).abs() < 1.0, "{mean}");
    }

    #[test]
    fn constant_input_has_no_crossings() {
        assert_eq!(
            count_zero_crossings(&[1.0; 100], 10.0),
            Err(Error::NoCrossings)
        );
    }

    #[test]
    fn bins_of_constant_and_ramp() {
        assert_eq!(bin_average(&[2.5; 103], 7).unwrap(), vec![2.5; 7]);
        let n = 1001;
        let ramp: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let b = bin_average(&ramp, 2).unwrap();
        assert!((b[0] - 0.25).abs() < 1.0 / n as f64);
        assert!((b[1] - 0.75).abs() < 1.0 / n as f64);
        assert_eq!(bin_average(&[], 3), Err(Error::Empty));
    }

    #[test]
    fn remainder_goes_to_last_bin() {
        let b = bin_average(&[1.0, 1.0, 1.0, 5.0, 5.0, 8.0, 8.0], 3).unwrap();
        assert_eq!(b, vec![1.0, 3.0, 7.0]);
    }
}

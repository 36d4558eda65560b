//! Linear Gaussian model of the confined mode and its exact discretization.
//!
//! State is `(q, p)` in zero-point units (vacuum variance 1). Inputs are the
//! white noises `(p_in, x_in, y_in)` with double-sided spectral densities
//! `2 n_th + 1` and `2 N_th + 1`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, RowVector2, RowVector3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::params::{spring_frequency, PhotonMap, SystemParams};

/// How the classical laser noise N_th enters the optical inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OpticalNoiseMode {
    /// N_th on both the amplitude and the phase quadrature.
    #[default]
    BothQuadratures,
    /// N_th on the detected (amplitude) quadrature only; phase stays at vacuum.
    AmplitudeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateSpaceModel {
    pub drift: Matrix2<f64>,
    /// Maps `(p_in, x_in, y_in)` onto `(q̇, ṗ)`.
    pub noise_map: Matrix2x3<f64>,
    pub measurement_row: RowVector2<f64>,
    pub feedthrough: RowVector3<f64>,
    /// Diagonal of the double-sided input spectral density matrix.
    pub input_psd: Vector3<f64>,
}

impl StateSpaceModel {
    pub fn omega_m(&self) -> f64 {
        self.drift[(0, 1)]
    }

    pub fn gamma_m(&self) -> f64 {
        -self.drift[(1, 1)]
    }

    fn input_cov(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.input_psd)
    }

    /// L S Lᵀ
    pub fn process_noise(&self) -> Matrix2<f64> {
        self.noise_map * self.input_cov() * self.noise_map.transpose()
    }

    /// D S Dᵀ
    pub fn measurement_noise(&self) -> f64 {
        (self.feedthrough * self.input_cov() * self.feedthrough.transpose())[(0, 0)]
    }

    /// L S Dᵀ: correlation between the force noise and the readout noise.
    pub fn cross_noise(&self) -> Vector2<f64> {
        self.noise_map * self.input_cov() * self.feedthrough.transpose()
    }

    /// Gain from q to X.
    pub fn measurement_gain(&self) -> f64 {
        self.measurement_row[0]
    }

    pub fn with_input_psd(mut self, psd: Vector3<f64>) -> Self {
        self.input_psd = psd;
        self
    }
}

pub fn build_model(params: &SystemParams) -> Result<StateSpaceModel> {
    build_model_with(params, OpticalNoiseMode::default())
}

pub fn build_model_with(params: &SystemParams, mode: OpticalNoiseMode) -> Result<StateSpaceModel> {
    let params = crate::params::validate(params.clone())?;
    let w = params.omega_m();
    let gamma = params.gamma_m();
    let g = params.g_m();
    let delta = params.delta();
    let sk = params.kappa().sqrt();
    let se = params.eta().sqrt();

    let drift = Matrix2::new(0.0, w, -w, -gamma);
    let noise_map = Matrix2x3::new(
        0.0,
        0.0,
        0.0,
        (2.0 * gamma).sqrt(),
        -4.0 * g / sk,
        8.0 * g * delta / sk,
    );
    let measurement_row = RowVector2::new(-8.0 * g * delta * se / sk, 0.0);
    let feedthrough = RowVector3::new(0.0, -se, 4.0 * delta * se);
    let thermal = 2.0 * params.n_th() + 1.0;
    let optical = 2.0 * params.optical_n_th() + 1.0;
    let phase = match mode {
        OpticalNoiseMode::BothQuadratures => optical,
        OpticalNoiseMode::AmplitudeOnly => 1.0,
    };
    Ok(StateSpaceModel {
        drift,
        noise_map,
        measurement_row,
        feedthrough,
        input_psd: Vector3::new(thermal, optical, phase),
    })
}

/// Exactly discretized model at a fixed step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteModel {
    pub dt: f64,
    /// e^{F dt}
    pub transition: Matrix2<f64>,
    /// ∫₀^dt e^{Fs} L S Lᵀ e^{Fᵀs} ds
    pub process_cov: Matrix2<f64>,
    pub measurement_row: RowVector2<f64>,
    /// Variance of the readout noise averaged over one sample, D S Dᵀ / dt.
    pub measurement_var: f64,
    half_transition: Matrix2<f64>,
    /// Joint covariance over half a step of (state noise increment, ∫ D ξ).
    half_joint_cov: Matrix3<f64>,
}

/// Van Loan: ∫₀^t e^{As} Q e^{Aᵀs} ds for a 3-state system.
fn integrated_cov3(a: &Matrix3<f64>, q: &Matrix3<f64>, t: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let mut m = nalgebra::SMatrix::<f64, 6, 6>::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-a * t));
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(q * t));
    m.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(a.transpose() * t));
    let e = m.exp();
    let phi_t = e.fixed_view::<3, 3>(3, 3).into_owned();
    let upper = e.fixed_view::<3, 3>(0, 3).into_owned();
    let cov = phi_t.transpose() * upper;
    (phi_t.transpose(), linalg::symmetrize3(&cov))
}

pub fn discretize(model: &StateSpaceModel, dt: f64) -> Result<DiscreteModel> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!(
            "time step must be positive, got {dt}"
        )));
    }
    if dt * model.omega_m().abs() >= 2.0 {
        return Err(Error::Domain(format!(
            "time step {dt} s too coarse: dt*omega_m = {} >= 2",
            dt * model.omega_m().abs()
        )));
    }
    // Augment with J̇ = D ξ so the readout noise integral rides along.
    let mut a = Matrix3::zeros();
    a.fixed_view_mut::<2, 2>(0, 0).copy_from(&model.drift);
    let mut l = Matrix3::zeros();
    l.fixed_view_mut::<2, 3>(0, 0).copy_from(&model.noise_map);
    l.fixed_view_mut::<1, 3>(2, 0).copy_from(&model.feedthrough);
    let q = l * model.input_cov() * l.transpose();

    let (phi_full, cov_full) = integrated_cov3(&a, &q, dt);
    let (phi_half, cov_half) = integrated_cov3(&a, &q, dt / 2.0);
    Ok(DiscreteModel {
        dt,
        transition: phi_full.fixed_view::<2, 2>(0, 0).into_owned(),
        process_cov: cov_full.fixed_view::<2, 2>(0, 0).into_owned(),
        measurement_row: model.measurement_row,
        measurement_var: model.measurement_noise() / dt,
        half_transition: phi_half.fixed_view::<2, 2>(0, 0).into_owned(),
        half_joint_cov: cov_half,
    })
}

/// Solves F P + P Fᵀ + L S Lᵀ = 0.
pub fn steady_state_covariance(model: &StateSpaceModel) -> Result<Matrix2<f64>> {
    if !(model.gamma_m() > 0.0) {
        return Err(Error::Singular(
            "drift is not Hurwitz (gamma_m <= 0); no stationary covariance".into(),
        ));
    }
    linalg::lyapunov2(&model.drift, &model.process_noise())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InitialState {
    /// Draw from the stationary distribution.
    #[default]
    SteadyState,
    Fixed(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub duration: f64,
    pub sample_rate: f64,
    pub seed: u64,
    pub initial: InitialState,
}

impl SimOptions {
    pub fn new(duration: f64, sample_rate: f64, seed: u64) -> Self {
        Self {
            duration,
            sample_rate,
            seed,
            initial: InitialState::SteadyState,
        }
    }
}

/// Sampled trajectory. `x` is the readout quadrature averaged over a window
/// of one sample centered on each sample time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample_rate: f64,
    pub duration: f64,
    pub seed: u64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub x: Vec<f64>,
    /// Calibrated displacement (m), present for modulated runs.
    pub displacement: Option<Vec<f64>>,
    /// True resonance (Hz) per sample, present for modulated runs.
    pub resonance_hz: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.sample_rate
    }
}

fn sample_count(duration: f64, sample_rate: f64) -> Result<usize> {
    if !(sample_rate > 0.0) || !(duration > 0.0) {
        return Err(Error::Domain(
            "duration and sample rate must be positive".into(),
        ));
    }
    let n = (duration * sample_rate).round();
    if n < 2.0 {
        return Err(Error::Domain(format!(
            "duration*sample_rate = {n} < 2 samples"
        )));
    }
    Ok(n as usize)
}

struct Stepper {
    half_transition: Matrix2<f64>,
    noise_sqrt: Matrix3<f64>,
    gain: f64,
    dt: f64,
}

impl Stepper {
    fn new(model: &StateSpaceModel, dt: f64) -> Result<Self> {
        let d = discretize(model, dt)?;
        Ok(Self {
            half_transition: d.half_transition,
            noise_sqrt: linalg::psd_sqrt3(&d.half_joint_cov),
            gain: model.measurement_gain(),
            dt,
        })
    }

    /// Advances from t_k - dt/2 to t_k + dt/2; returns (x(t_k), X_k, state at end).
    fn step(&self, state: Vector2<f64>, rng: &mut ChaCha8Rng) -> (Vector2<f64>, f64, Vector2<f64>) {
        let n1 = self.noise_sqrt * gaussian3(rng);
        let at_sample = self.half_transition * state + Vector2::new(n1[0], n1[1]);
        let n2 = self.noise_sqrt * gaussian3(rng);
        let end = self.half_transition * at_sample + Vector2::new(n2[0], n2[1]);
        let readout = self.gain * at_sample[0] + (n1[2] + n2[2]) / self.dt;
        (at_sample, readout, end)
    }
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

fn initial_state(
    model: &StateSpaceModel,
    initial: InitialState,
    rng: &mut ChaCha8Rng,
) -> Result<Vector2<f64>> {
    Ok(match initial {
        InitialState::Fixed(q, p) => Vector2::new(q, p),
        InitialState::SteadyState => {
            let cov = steady_state_covariance(model)?;
            let s = linalg::psd_sqrt2(&cov);
            s * Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
        }
    })
}

/// Simulate with a stationary initial state.
pub fn simulate(
    model: &StateSpaceModel,
    duration: f64,
    sample_rate: f64,
    seed: u64,
) -> Result<Trajectory> {
    simulate_with(model, &SimOptions::new(duration, sample_rate, seed))
}

pub fn simulate_with(model: &StateSpaceModel, opts: &SimOptions) -> Result<Trajectory> {
    let n = sample_count(opts.duration, opts.sample_rate)?;
    let dt = 1.0 / opts.sample_rate;
    let stepper = Stepper::new(model, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // the first half step starts half a sample before t = 0
    let mut state = initial_state(model, opts.initial, &mut rng)?;
    if let InitialState::Fixed(..) = opts.initial {
        state = linalg::inverse2(&stepper.half_transition)? * state;
    }
    let mut q = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for _ in 0..n {
        let (s, readout, end) = stepper.step(state, &mut rng);
        q.push(s[0]);
        p.push(s[1]);
        x.push(readout);
        state = end;
    }
    Ok(Trajectory {
        sample_rate: opts.sample_rate,
        duration: opts.duration,
        seed: opts.seed,
        q,
        p,
        x,
        displacement: None,
        resonance_hz: None,
    })
}

/// Slow detuning modulation driven by a low-frequency displacement series.
#[derive(Debug, Clone, PartialEq)]
pub struct DetuningModulation {
    /// Displacement (m) sampled at `sample_rate`; held at its last value past the end.
    pub displacement: Vec<f64>,
    pub sample_rate: f64,
    /// Number of output samples between model rebuilds.
    pub update_every: usize,
    pub photon_map: PhotonMap,
}

impl DetuningModulation {
    fn at(&self, t: f64) -> f64 {
        let pos = t * self.sample_rate;
        let last = self.displacement.len() - 1;
        if pos <= 0.0 {
            return self.displacement[0];
        }
        let i = pos.floor() as usize;
        if i >= last {
            return self.displacement[last];
        }
        let frac = pos - i as f64;
        self.displacement[i] * (1.0 - frac) + self.displacement[i + 1] * frac
    }
}

/// Simulation with a detuning that follows δ(t) = δ̄ + G x(t)/κ.
///
/// The oscillator keeps the zero-point normalization of the mean detuning;
/// only the drift frequency follows the optical spring. The calibrated
/// displacement channel is `x(t) + x_zpf q(t)`.
pub fn simulate_modulated(
    params: &SystemParams,
    modulation: &DetuningModulation,
    opts: &SimOptions,
) -> Result<Trajectory> {
    if modulation.displacement.is_empty() {
        return Err(Error::Empty);
    }
    if modulation.update_every == 0 {
        return Err(Error::Domain("update_every must be >= 1".into()));
    }
    let n = sample_count(opts.duration, opts.sample_rate)?;
    let dt = 1.0 / opts.sample_rate;
    let base = build_model(params)?;
    let x_zpf = params.derived.zero_point_amplitude;
    let g_shift = params.optical.freq_shift_per_disp;
    let kappa = params.kappa();
    let mean_delta = params.delta();
    let gamma = params.gamma_m();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = initial_state(&base, opts.initial, &mut rng)?;
    let mut q = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut disp = Vec::with_capacity(n);
    let mut res = Vec::with_capacity(n);
    let mut stepper = Stepper::new(&base, dt)?;
    let mut omega = base.omega_m();
    for k in 0..n {
        let t = k as f64 * dt;
        let slow = modulation.at(t);
        if k % modulation.update_every == 0 {
            let delta = (mean_delta + g_shift * slow / kappa).max(0.0);
            omega = spring_frequency(
                delta,
                g_shift,
                modulation
                    .photon_map
                    .photons(params, delta, params.optical.incident_power),
                kappa,
                params.mechanical.mass,
                params.constants.hbar,
            )?;
            let mut model = base;
            model.drift = Matrix2::new(0.0, omega, -omega, -gamma);
            stepper = Stepper::new(&model, dt)?;
        }
        let (s, readout, end) = stepper.step(state, &mut rng);
        q.push(s[0]);
        p.push(s[1]);
        x.push(readout);
        disp.push(slow + x_zpf * s[0]);
        res.push(omega / (2.0 * std::f64::consts::PI));
        state = end;
    }
    Ok(Trajectory {
        sample_rate: opts.sample_rate,
        duration: opts.duration,
        seed: opts.seed,
        q,
        p,
        x,
        displacement: Some(disp),
        resonance_hz: Some(res),
    })
}

/// Closed-form 2×2 matrix exponential of the damped-oscillator drift.
pub fn oscillator_propagator(omega: f64, gamma: f64, t: f64) -> Matrix2<f64> {
    // eigenvalues -γ/2 ± iν with ν² = ω² - γ²/4
    let half = gamma / 2.0;
    let disc = omega * omega - half * half;
    let decay = (-half * t).exp();
    let (c, s_over_nu) = if disc > 0.0 {
        let nu = disc.sqrt();
        ((nu * t).cos(), (nu * t).sin() / nu)
    } else if disc < 0.0 {
        let mu = (-disc).sqrt();
        ((mu * t).cosh(), (mu * t).sinh() / mu)
    } else {
        (1.0, t)
    };
    decay
        * Matrix2::new(
            c + half * s_over_nu,
            omega * s_over_nu,
            -omega * s_over_nu,
            c - half * s_over_nu,
        )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference_model() -> StateSpaceModel {
        build_model(&SystemParams::reference()).unwrap()
    }

    #[test]
    fn drift_and_rows_follow_adiabatic_equations() {
        let p = SystemParams::reference();
        let m = reference_model();
        let w = p.omega_m();
        assert_eq!(m.drift, Matrix2::new(0.0, w, -w, -p.gamma_m()));
        assert_eq!(m.measurement_row[1], 0.0);
        assert_eq!(m.noise_map.row(0).iter().copied().sum::<f64>(), 0.0);
        assert_relative_eq!(m.noise_map[(1, 0)], (2.0 * p.gamma_m()).sqrt());
        assert_relative_eq!(m.feedthrough[1], -p.eta().sqrt());
        assert_relative_eq!(m.feedthrough[2], 4.0 * p.delta() * p.eta().sqrt());
    }

    #[test]
    fn reference_measurement_coefficient() {
        let m = reference_model();
        // -8 g_m delta sqrt(eta/kappa) with g_m = -2pi*3.1832e4 Hz: 13.96 s^-1/2
        assert_relative_eq!(m.measurement_gain(), 13.9605, max_relative = 1e-4);
        assert!(m.measurement_gain() > 0.0);
    }

    #[test]
    fn zero_coupling_blinds_the_readout() {
        let mut p = SystemParams::reference();
        p.optical.circulating_photons = 0.0;
        let p = p.rederive().unwrap();
        let m = build_model(&p).unwrap();
        assert_eq!(m.measurement_row, RowVector2::zeros());
    }

    #[test]
    fn zero_detuning_blinds_the_readout() {
        let p = SystemParams::reference().with_detuning(0.0).unwrap();
        let m = build_model(&p).unwrap();
        assert_eq!(m.measurement_row, RowVector2::zeros());
        assert_eq!(m.feedthrough[2], 0.0);
    }

    #[test]
    fn amplitude_only_mode_keeps_phase_at_vacuum() {
        let m =
            build_model_with(&SystemParams::reference(), OpticalNoiseMode::AmplitudeOnly).unwrap();
        assert_eq!(m.input_psd[1], 39.0);
        assert_eq!(m.input_psd[2], 1.0);
    }

    #[test]
    fn undamped_noiseless_transition_is_rotation() {
        let mut m = reference_model();
        m.drift[(1, 1)] = 0.0;
        m.input_psd = Vector3::zeros();
        let dt = 2e-5;
        let d = discretize(&m, dt).unwrap();
        let th = m.omega_m() * dt;
        let rot = Matrix2::new(th.cos(), th.sin(), -th.sin(), th.cos());
        assert!((d.transition - rot).abs().max() < 1e-14);
        assert_eq!(d.process_cov, Matrix2::zeros());
    }

    #[test]
    fn small_step_is_first_order() {
        let m = reference_model();
        let dt = 1e-9;
        let d = discretize(&m, dt).unwrap();
        let first = Matrix2::identity() + m.drift * dt;
        assert!((d.transition - first).abs().max() < 1e-11);
    }

    #[test]
    fn coarse_step_is_rejected() {
        let m = reference_model();
        let dt = 2.5 / m.omega_m();
        assert!(matches!(discretize(&m, dt), Err(Error::Domain(_))));
    }

    #[test]
    fn closed_form_propagator_matches_expm() {
        let m = reference_model();
        let t = 3.7e-4;
        let expm = (m.drift * t).exp();
        let closed = oscillator_propagator(m.omega_m(), m.gamma_m(), t);
        assert!((expm - closed).abs().max() < 1e-12);
    }

    #[test]
    fn thermal_only_stationary_variance() {
        let p = SystemParams::reference();
        let mut m = reference_model();
        m.input_psd[1] = 0.0;
        m.input_psd[2] = 0.0;
        let cov = steady_state_covariance(&m).unwrap();
        let expected = 2.0 * p.n_th() + 1.0;
        assert_relative_eq!(cov[(0, 0)], expected, max_relative = 1e-10);
        assert_relative_eq!(cov[(1, 1)], expected, max_relative = 1e-10);
        assert!(cov[(0, 1)].abs() < 1e-9 * expected);
    }

    #[test]
    fn zero_noise_zero_covariance() {
        let m = reference_model().with_input_psd(Vector3::zeros());
        assert_eq!(steady_state_covariance(&m).unwrap(), Matrix2::zeros());
    }

    #[test]
    fn undamped_covariance_is_singular() {
        let mut m = reference_model();
        m.drift[(1, 1)] = 0.0;
        assert!(matches!(
            steady_state_covariance(&m),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn back_action_adds_to_thermal_variance() {
        let p = SystemParams::reference();
        let m = reference_model();
        let cov = steady_state_covariance(&m).unwrap();
        // force noise D = 2γ(2n+1) + 16 g²/κ (1 + 4δ²)(2N+1); Var = D/(2γ)
        let g = p.g_m();
        let d = p.delta();
        let force = 2.0 * p.gamma_m() * (2.0 * p.n_th() + 1.0)
            + 16.0 * g * g / p.kappa() * (1.0 + 4.0 * d * d) * (2.0 * p.optical_n_th() + 1.0);
        assert_relative_eq!(
            cov[(0, 0)],
            force / (2.0 * p.gamma_m()),
            max_relative = 1e-10
        );
    }

    #[test]
    fn deterministic_oscillator_trajectory() {
        let mut m = reference_model().with_input_psd(Vector3::zeros());
        m.drift[(1, 1)] = 0.0;
        let opts = SimOptions {
            duration: 0.05,
            sample_rate: 50_000.0,
            seed: 1,
            initial: InitialState::Fixed(3.0, 0.0),
        };
        let tr = simulate_with(&m, &opts).unwrap();
        for (i, q) in tr.q.iter().enumerate() {
            let expect = 3.0 * (m.omega_m() * tr.time(i)).cos();
            assert!(
                (q - expect).abs() < 1e-6 * 3.0,
                "sample {i}: {q} vs {expect}"
            );
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let m = reference_model();
        let a = simulate(&m, 0.1, 20_000.0, 42).unwrap();
        let b = simulate(&m, 0.1, 20_000.0, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate(&m, 0.1, 20_000.0, 43).unwrap();
        assert_ne!(a.q, c.q);
    }

    #[test]
    fn too_short_run_is_rejected() {
        let m = reference_model();
        assert!(simulate(&m, 1e-5, 50_000.0, 0).is_err());
    }

    #[test]
    fn channel_lengths_match_duration() {
        let m = reference_model();
        let t = simulate(&m, 0.0123, 10_000.0, 5).unwrap();
        assert_eq!(t.len(), 123);
        assert_eq!(t.p.len(), 123);
        assert_eq!(t.x.len(), 123);
    }
}

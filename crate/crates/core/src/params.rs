//! Optomechanical parameter registry.
//!
//! Every physical symbol of the detuned-cavity model lives here together
//! with the quantities derived from it. Internally all frequencies are
//! angular (rad/s); the on-disk [`ParamsFile`] uses ordinary frequency (Hz).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant in J·s.
pub const HBAR: f64 = 1.0546e-34;

/// Boltzmann constant in J/K.
pub const K_B: f64 = 1.380649e-23;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub hbar: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self { hbar: HBAR }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanicalParams {
    /// kg
    pub mass: f64,
    /// Bare pendulum frequency Ω (rad/s); zero when unknown.
    pub bare_frequency: f64,
    /// Bare dissipation Γ (rad/s).
    pub bare_damping: f64,
    /// Damping of the confined mode under feedback cooling, γ_m (rad/s).
    pub effective_damping: f64,
    pub quality_factor: f64,
    /// Thermal occupancy of the confined mode.
    pub phonon_occupancy: f64,
    /// K
    pub mode_temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalParams {
    /// κ (rad/s)
    pub decay_rate: f64,
    /// Δ (rad/s)
    pub detuning: f64,
    /// δ = Δ/κ
    pub normalized_detuning: f64,
    /// G (rad/s per m). Negative for the reference cavity.
    pub freq_shift_per_disp: f64,
    pub circulating_photons: f64,
    pub detection_efficiency: f64,
    /// Classical laser noise expressed as an occupancy, N_th.
    pub optical_noise_occupancy: f64,
    /// W
    pub incident_power: f64,
    /// Laser frequency ω_L (rad/s). Defines the rotating frame only.
    pub laser_frequency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    /// ω_m (rad/s)
    pub confined_frequency: f64,
    /// m
    pub zero_point_amplitude: f64,
    /// kg·m/s
    pub zero_point_momentum: f64,
    /// g (rad/s); only defined when the bare frequency is known.
    pub bare_coupling: Option<f64>,
    /// g_m (rad/s), carries the sign of G.
    pub confined_coupling: f64,
    pub cooperativity: f64,
    pub quantum_cooperativity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegimeWarning {
    /// κ < 100 ω_m: the adiabatic elimination of the cavity is questionable.
    NotBadCavity { kappa_over_omega_m: f64 },
    /// δ > 0.1: outside the small-detuning expansion.
    LargeDetuning { delta: f64 },
}

impl std::fmt::Display for RegimeWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegimeWarning::NotBadCavity { kappa_over_omega_m } => write!(
                f,
                "bad-cavity limit violated: kappa/omega_m = {kappa_over_omega_m:.3e} < 100"
            ),
            RegimeWarning::LargeDetuning { delta } => write!(
                f,
                "detuning delta = {delta} exceeds the small-detuning regime (0.1)"
            ),
        }
    }
}

/// Full parameter set with derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub constants: PhysicalConstants,
    pub mechanical: MechanicalParams,
    pub optical: OpticalParams,
    pub derived: DerivedParams,
    /// Displacement calibration of the photocurrent (m/V). Its sign absorbs
    /// the photodetector sign so that residuals come out sign-consistent.
    pub calibration_m_per_v: Option<f64>,
    /// One-sigma uncertainties keyed like [`ParamsFile`]; reporting only.
    pub uncertainties: BTreeMap<String, f64>,
    pub warnings: Vec<RegimeWarning>,
}

/// On-disk parameter file (TOML). Frequencies in Hz, mass in mg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub mass_mg: f64,
    pub kappa_hz: f64,
    pub delta_over_kappa: f64,
    pub n_c: f64,
    #[serde(rename = "G_hz_per_m")]
    pub g_hz_per_m: f64,
    pub eta: f64,
    #[serde(rename = "N_th")]
    pub optical_n_th: f64,
    /// Takes precedence over `displacement_variance_m2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_th: Option<f64>,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_m_hz: Option<f64>,
    #[serde(rename = "Gamma_hz")]
    pub gamma_hz: f64,
    #[serde(rename = "T_kelvin")]
    pub t_kelvin: f64,
    pub power_w: f64,
    #[serde(rename = "Omega_hz", default, skip_serializing_if = "Option::is_none")]
    pub bare_omega_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laser_frequency_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_m_per_v: Option<f64>,
    /// Measured displacement variance; used to infer n_th when it is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub displacement_variance_m2: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sigma: BTreeMap<String, f64>,
}

impl Default for ParamsFile {
    /// Reference parameter set of the 7.71 mg pendulum experiment.
    fn default() -> Self {
        let sigma = [
            ("mass_mg", 0.01),
            ("kappa_hz", 0.02e6),
            ("delta_over_kappa", 0.0004),
            ("n_c", 0.06e10),
            ("G_hz_per_m", 0.03e15),
            ("eta", 0.02),
            ("n_th", 1.8e5),
            ("Q", 13.0),
            ("omega_m_hz", 7.0),
            ("Gamma_hz", 0.05e-5),
            ("T_kelvin", 0.002),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            mass_mg: 7.71,
            kappa_hz: 1.64e6,
            delta_over_kappa: 0.0292,
            n_c: 1.17e10,
            g_hz_per_m: -4.72e15,
            eta: 0.92,
            optical_n_th: 19.0,
            n_th: Some(8.0e5),
            q: 250.0,
            omega_m_hz: Some(280.0),
            gamma_hz: 4.74e-5,
            t_kelvin: 0.011,
            power_w: 0.030,
            bare_omega_hz: None,
            laser_frequency_hz: Some(2.8176e14),
            calibration_m_per_v: Some(-2.3e-10),
            displacement_variance_m2: None,
            sigma,
        }
    }
}

impl ParamsFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("parameter file serializes")
    }
}

/// ω_m from the optical spring: sqrt(8ħG²n_c δ/(1+4δ²)/(κ m)).
pub fn derive_confined_frequency(
    optical: &OpticalParams,
    mechanical: &MechanicalParams,
    constants: &PhysicalConstants,
) -> Result<f64> {
    spring_frequency(
        optical.normalized_detuning,
        optical.freq_shift_per_disp,
        optical.circulating_photons,
        optical.decay_rate,
        mechanical.mass,
        constants.hbar,
    )
}

/// Optical-spring resonance (rad/s) for explicit arguments.
pub fn spring_frequency(
    delta: f64,
    g_shift: f64,
    photons: f64,
    kappa: f64,
    mass: f64,
    hbar: f64,
) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::Domain(format!(
            "normalized detuning {delta} < 0 (optical anti-spring is not modeled)"
        )));
    }
    if !(kappa > 0.0) || !(mass > 0.0) || !(photons >= 0.0) {
        return Err(Error::Domain(
            "optical spring needs kappa > 0, mass > 0 and n_c >= 0".into(),
        ));
    }
    let k_spring =
        8.0 * hbar * g_shift * g_shift * photons * delta / (1.0 + 4.0 * delta * delta) / kappa;
    Ok((k_spring / mass).sqrt())
}

/// Inverse of [`spring_frequency`] in the photon number.
pub fn photons_for_frequency(
    omega_m: f64,
    delta: f64,
    g_shift: f64,
    kappa: f64,
    mass: f64,
    hbar: f64,
) -> Result<f64> {
    if !(delta > 0.0) || g_shift == 0.0 {
        return Err(Error::Domain(
            "photon number is undetermined at zero detuning or zero coupling".into(),
        ));
    }
    Ok(
        omega_m * omega_m * mass * kappa * (1.0 + 4.0 * delta * delta)
            / (8.0 * hbar * g_shift * g_shift * delta),
    )
}

/// How the intracavity photon number follows detuning and input power.
///
/// Both maps are anchored so that the configured power and detuning give
/// the configured photon number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhotonMap {
    /// n_c ∝ P, independent of detuning.
    Fixed,
    /// n_c ∝ P/(1 + 4δ²), the cavity Lorentzian.
    #[default]
    Lorentzian,
}

impl PhotonMap {
    /// Photon number at detuning `delta` and incident power `power`.
    pub fn photons(&self, params: &SystemParams, delta: f64, power: f64) -> f64 {
        let o = &params.optical;
        let scale = if o.incident_power > 0.0 {
            power / o.incident_power
        } else {
            1.0
        };
        let shape = match self {
            PhotonMap::Fixed => 1.0,
            PhotonMap::Lorentzian => {
                let d0 = o.normalized_detuning;
                (1.0 + 4.0 * d0 * d0) / (1.0 + 4.0 * delta * delta)
            }
        };
        o.circulating_photons * scale * shape
    }

    /// d ln n_c / dδ
    pub fn log_slope(&self, delta: f64) -> f64 {
        match self {
            PhotonMap::Fixed => 0.0,
            PhotonMap::Lorentzian => -8.0 * delta / (1.0 + 4.0 * delta * delta),
        }
    }

    /// Detuning of the largest spring frequency.
    pub fn peak_detuning(&self) -> f64 {
        match self {
            PhotonMap::Fixed => 0.5,
            PhotonMap::Lorentzian => 1.0 / 12f64.sqrt(),
        }
    }
}

/// Zero-point scales, couplings and cooperativities at a given ω_m.
pub fn derive_coupling(
    optical: &OpticalParams,
    mechanical: &MechanicalParams,
    constants: &PhysicalConstants,
    omega_m: f64,
) -> Result<DerivedParams> {
    if !(omega_m > 0.0) {
        return Err(Error::Domain(format!(
            "confined frequency must be positive, got {omega_m}"
        )));
    }
    let hbar = constants.hbar;
    let m = mechanical.mass;
    let x_zpf = (hbar / (2.0 * m * omega_m)).sqrt();
    let p_zpf = (hbar * m * omega_m / 2.0).sqrt();
    let g_m = optical.freq_shift_per_disp * optical.circulating_photons.sqrt() * x_zpf;
    let bare_coupling = (mechanical.bare_frequency > 0.0)
        .then(|| g_m * (omega_m / mechanical.bare_frequency).sqrt());
    let cooperativity = 4.0 * g_m * g_m / (mechanical.effective_damping * optical.decay_rate);
    let quantum_cooperativity = if mechanical.phonon_occupancy > 0.0 {
        cooperativity / mechanical.phonon_occupancy
    } else {
        f64::INFINITY
    };
    Ok(DerivedParams {
        confined_frequency: omega_m,
        zero_point_amplitude: x_zpf,
        zero_point_momentum: p_zpf,
        bare_coupling,
        confined_coupling: g_m,
        cooperativity,
        quantum_cooperativity,
    })
}

/// Thermal occupancy from a displacement variance, with vacuum variance x_zpf².
pub fn phonon_occupancy_from_variance(variance_m2: f64, x_zpf: f64) -> Result<f64> {
    if !(variance_m2 > 0.0) || !(x_zpf > 0.0) {
        return Err(Error::invalid(
            "displacement_variance_m2",
            "variance and x_zpf must be positive",
        ));
    }
    Ok(((variance_m2 / (x_zpf * x_zpf)) - 1.0) / 2.0)
}

fn hz(f: f64) -> f64 {
    2.0 * PI * f
}

impl SystemParams {
    /// Reference parameter set (see [`ParamsFile::default`]).
    pub fn reference() -> Self {
        Self::from_file(&ParamsFile::default()).expect("reference parameters are valid")
    }

    pub fn from_file(file: &ParamsFile) -> Result<Self> {
        check_positive("mass_mg", file.mass_mg)?;
        check_positive("kappa_hz", file.kappa_hz)?;
        check_positive("Q", file.q)?;
        let constants = PhysicalConstants::default();
        let kappa = hz(file.kappa_hz);
        let delta = file.delta_over_kappa;
        let optical = OpticalParams {
            decay_rate: kappa,
            detuning: delta * kappa,
            normalized_detuning: delta,
            freq_shift_per_disp: hz(file.g_hz_per_m),
            circulating_photons: file.n_c,
            detection_efficiency: file.eta,
            optical_noise_occupancy: file.optical_n_th,
            incident_power: file.power_w,
            laser_frequency: file.laser_frequency_hz.map(hz).unwrap_or(0.0),
        };
        let mut mechanical = MechanicalParams {
            mass: file.mass_mg * 1e-6,
            bare_frequency: file.bare_omega_hz.map(hz).unwrap_or(0.0),
            bare_damping: hz(file.gamma_hz),
            effective_damping: f64::NAN,
            quality_factor: file.q,
            phonon_occupancy: file.n_th.unwrap_or(0.0),
            mode_temperature: file.t_kelvin,
        };
        let omega_m = match file.omega_m_hz {
            Some(f) => hz(f),
            None => derive_confined_frequency(&optical, &mechanical, &constants)?,
        };
        check_positive("omega_m_hz", omega_m)?;
        mechanical.effective_damping = omega_m / file.q;
        if file.n_th.is_none() {
            let variance = file
                .displacement_variance_m2
                .ok_or_else(|| Error::invalid("n_th", "supply n_th or displacement_variance_m2"))?;
            let x_zpf = (constants.hbar / (2.0 * mechanical.mass * omega_m)).sqrt();
            mechanical.phonon_occupancy = phonon_occupancy_from_variance(variance, x_zpf)?;
        }
        let derived = derive_coupling(&optical, &mechanical, &constants, omega_m)?;
        validate(SystemParams {
            constants,
            mechanical,
            optical,
            derived,
            calibration_m_per_v: file.calibration_m_per_v,
            uncertainties: file.sigma.clone(),
            warnings: Vec::new(),
        })
    }

    /// Recompute everything that depends on the primary fields.
    ///
    /// Keeps the current ω_m and quality factor (so γ_m follows ω_m).
    pub fn rederive(mut self) -> Result<Self> {
        let omega_m = self.derived.confined_frequency;
        self.mechanical.effective_damping = omega_m / self.mechanical.quality_factor;
        self.optical.detuning = self.optical.normalized_detuning * self.optical.decay_rate;
        self.derived = derive_coupling(&self.optical, &self.mechanical, &self.constants, omega_m)?;
        self.warnings.clear();
        validate(self)
    }

    /// Same system with the thermal and optical noise occupancies replaced.
    pub fn with_noise(&self, n_th: f64, optical_n_th: f64) -> Result<Self> {
        let mut p = self.clone();
        p.mechanical.phonon_occupancy = n_th;
        p.optical.optical_noise_occupancy = optical_n_th;
        p.rederive()
    }

    pub fn with_detuning(&self, delta: f64) -> Result<Self> {
        let mut p = self.clone();
        p.optical.normalized_detuning = delta;
        p.rederive()
    }

    pub fn omega_m(&self) -> f64 {
        self.derived.confined_frequency
    }

    pub fn gamma_m(&self) -> f64 {
        self.mechanical.effective_damping
    }

    pub fn delta(&self) -> f64 {
        self.optical.normalized_detuning
    }

    pub fn g_m(&self) -> f64 {
        self.derived.confined_coupling
    }

    pub fn kappa(&self) -> f64 {
        self.optical.decay_rate
    }

    pub fn eta(&self) -> f64 {
        self.optical.detection_efficiency
    }

    pub fn n_th(&self) -> f64 {
        self.mechanical.phonon_occupancy
    }

    pub fn optical_n_th(&self) -> f64 {
        self.optical.optical_noise_occupancy
    }
}

fn check_positive(field: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

fn check_nonneg(field: &'static str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            format!("must be >= 0 and finite, got {v}"),
        ))
    }
}

/// Enforce invariants; attach regime warnings for the adiabatic model.
pub fn validate(mut params: SystemParams) -> Result<SystemParams> {
    let m = &params.mechanical;
    let o = &params.optical;
    let d = &params.derived;
    check_positive("hbar", params.constants.hbar)?;
    check_positive("mass_mg", m.mass)?;
    check_nonneg("Omega_hz", m.bare_frequency)?;
    check_positive("Gamma_hz", m.bare_damping)?;
    check_positive("gamma_m", m.effective_damping)?;
    check_nonneg("n_th", m.phonon_occupancy)?;
    check_positive("kappa_hz", o.decay_rate)?;
    check_nonneg("n_c", o.circulating_photons)?;
    check_nonneg("N_th", o.optical_noise_occupancy)?;
    if !(0.0..=1.0).contains(&o.detection_efficiency) {
        return Err(Error::invalid(
            "eta",
            format!(
                "detection efficiency {} outside [0, 1]",
                o.detection_efficiency
            ),
        ));
    }
    if !o.normalized_detuning.is_finite() {
        return Err(Error::invalid("delta_over_kappa", "not finite"));
    }
    let rel = (o.detuning / o.decay_rate - o.normalized_detuning).abs();
    if rel > 1e-12 * o.normalized_detuning.abs().max(1e-300) && rel > 1e-15 {
        return Err(Error::invalid(
            "delta_over_kappa",
            "detuning and normalized detuning disagree",
        ));
    }
    check_positive("omega_m_hz", d.confined_frequency)?;
    let q_implied = d.confined_frequency / m.effective_damping;
    if ((q_implied - m.quality_factor) / m.quality_factor).abs() > 1e-9 {
        return Err(Error::invalid(
            "Q",
            format!("Q = {} but omega_m/gamma_m = {q_implied}", m.quality_factor),
        ));
    }

    params.warnings.clear();
    let ratio = o.decay_rate / d.confined_frequency;
    if ratio < 100.0 {
        params.warnings.push(RegimeWarning::NotBadCavity {
            kappa_over_omega_m: ratio,
        });
    }
    if o.normalized_detuning > 0.1 {
        params.warnings.push(RegimeWarning::LargeDetuning {
            delta: o.normalized_detuning,
        });
    }
    Ok(params)
}

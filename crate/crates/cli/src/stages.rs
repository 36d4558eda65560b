//! Stage bodies shared by the subcommands and the `run` pipeline.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use optosqueeze::dsp;
use optosqueeze::estimate::{
    condition_sampled, covariance_from_spectra, default_band, ellipse_report, purity_sweep,
    residual_spectra, Conditioner, EstimateOptions, Reference, SweepBand, SweepData, SweepSpec,
    DEFAULT_F_LO,
};
use optosqueeze::ident::{fit_spring, FitOptions, SpringGuess, SpringMeasurement};
use optosqueeze::model::{
    build_model, simulate_modulated, simulate_with, DetuningModulation, SimOptions,
};
use optosqueeze::params::PhotonMap;
use optosqueeze::wiener::{
    filter_coefficients, modified_susceptibility, solve_riccati, AnalyticFactory, FilterFactory,
    FilterResponse, FilterSource, OracleFactory,
};
use optosqueeze::{ParamsFile, SystemParams};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{config, Result};
use crate::io::{self, Format, TrajectoryData};
use crate::manifest::StageOutput;

/// Parameters from a TOML file, or the built-in reference set.
pub fn load_params(path: Option<&Path>) -> Result<SystemParams> {
    match path {
        None => Ok(SystemParams::reference()),
        Some(p) => {
            let text = io::read_text(p)?;
            let file = ParamsFile::from_toml_str(&text)
                .map_err(|e| config(format!("{}: {e}", p.display())))?;
            SystemParams::from_file(&file).map_err(|e| config(format!("{}: {e}", p.display())))
        }
    }
}

/// Upper edge of a band or grid: a number or `auto`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Edge {
    Auto,
    Hz(f64),
}

fn parse_number(field: &str, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| config(format!("{field}: `{s}` is not a number")))
}

fn parse_edge(field: &str, s: &str) -> Result<Edge> {
    if s.trim() == "auto" {
        Ok(Edge::Auto)
    } else {
        parse_number(field, s).map(Edge::Hz)
    }
}

impl std::fmt::Display for Edge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Edge::Auto => write!(f, "auto"),
            Edge::Hz(v) => write!(f, "{v}"),
        }
    }
}

/// `f_lo:f_hi` with `f_hi` possibly `auto`; `full` for the whole record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BandSpec {
    Full,
    Range(f64, Edge),
}

impl BandSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if s.trim() == "full" {
            return Ok(BandSpec::Full);
        }
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 2 {
            return Err(config(format!(
                "band `{s}`: expected f_lo:f_hi, f_lo:auto or full"
            )));
        }
        Ok(BandSpec::Range(
            parse_number("band", parts[0])?,
            parse_edge("band", parts[1])?,
        ))
    }

    /// Concrete limits; `auto` is (ω′ + γ′)/2π of the parameter set.
    pub fn resolve(&self, params: &SystemParams) -> Result<Option<(f64, f64)>> {
        match *self {
            BandSpec::Full => Ok(None),
            BandSpec::Range(lo, Edge::Hz(hi)) => Ok(Some((lo, hi))),
            BandSpec::Range(lo, Edge::Auto) => {
                let sus = modified_susceptibility(params)?;
                Ok(Some(default_band(&sus, lo)))
            }
        }
    }
}

impl Default for BandSpec {
    fn default() -> Self {
        BandSpec::Range(DEFAULT_F_LO, Edge::Auto)
    }
}

impl std::str::FromStr for BandSpec {
    type Err = crate::error::CliError;
    fn from_str(s: &str) -> Result<Self> {
        BandSpec::parse(s)
    }
}

impl TryFrom<String> for BandSpec {
    type Error = crate::error::CliError;
    fn try_from(s: String) -> Result<Self> {
        BandSpec::parse(&s)
    }
}

impl From<BandSpec> for String {
    fn from(b: BandSpec) -> String {
        match b {
            BandSpec::Full => "full".into(),
            BandSpec::Range(lo, hi) => format!("{lo}:{hi}"),
        }
    }
}

/// `f0:f1:df` with `f1` possibly `auto` (the Nyquist frequency of the data).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GridSpec {
    pub start: f64,
    pub stop: Edge,
    pub step: f64,
}

impl GridSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(config(format!("grid `{s}`: expected f0:f1:df")));
        }
        let g = GridSpec {
            start: parse_number("grid", parts[0])?,
            stop: parse_edge("grid", parts[1])?,
            step: parse_number("grid", parts[2])?,
        };
        if !(g.step > 0.0) || !(g.start >= 0.0) {
            return Err(config(format!("grid `{s}`: need f0 >= 0 and df > 0")));
        }
        Ok(g)
    }

    pub fn frequencies(&self, nyquist: Option<f64>) -> Result<Vec<f64>> {
        let stop = match self.stop {
            Edge::Hz(f) => f,
            Edge::Auto => nyquist.ok_or_else(|| {
                config(
                    "grid upper edge `auto` needs a data file to take the Nyquist frequency from",
                )
            })?,
        };
        if !(stop > self.start) {
            return Err(config(format!(
                "grid stop {stop} Hz must exceed start {} Hz",
                self.start
            )));
        }
        let n = ((stop - self.start) / self.step + 1e-9).floor() as usize;
        let mut f: Vec<f64> = (0..=n).map(|k| self.start + k as f64 * self.step).collect();
        // always reach the requested stop so resampling onto [start, stop] works
        if stop - f[n] > 1e-9 * stop {
            f.push(stop);
        }
        Ok(f)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: Edge::Auto,
            step: 0.5,
        }
    }
}

impl std::str::FromStr for GridSpec {
    type Err = crate::error::CliError;
    fn from_str(s: &str) -> Result<Self> {
        GridSpec::parse(s)
    }
}

impl TryFrom<String> for GridSpec {
    type Error = crate::error::CliError;
    fn try_from(s: String) -> Result<Self> {
        GridSpec::parse(&s)
    }
}

impl From<GridSpec> for String {
    fn from(g: GridSpec) -> String {
        format!("{}:{}:{}", g.start, g.stop, g.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModulationSettings {
    /// Peak detuning swing of the first tone as a fraction of δ̄.
    pub depth: f64,
    /// Tone frequencies in Hz; tone k has amplitude depth/(k+1).
    pub frequencies_hz: Vec<f64>,
    pub update_every: usize,
    pub photon_map: PhotonMap,
}

impl Default for ModulationSettings {
    fn default() -> Self {
        Self {
            depth: 0.1,
            frequencies_hz: vec![0.05, 0.23],
            update_every: 50,
            photon_map: PhotonMap::Lorentzian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    pub duration: f64,
    pub sample_rate: f64,
    pub modulation: Option<ModulationSettings>,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            duration: 20.0,
            sample_rate: 20_000.0,
            modulation: None,
        }
    }
}

pub fn trajectory_name(format: Format) -> String {
    format!("trajectory.{}", format.extension())
}

pub const RESONANCE_FILE: &str = "resonance.csv";

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

pub fn trajectory_summary(t: &TrajectoryData) -> Value {
    json!({
        "samples": t.x.len(),
        "sample_rate_hz": t.sample_rate,
        "duration_s": t.x.len() as f64 / t.sample_rate,
        "var_q": variance(&t.q),
        "var_p": variance(&t.p),
        "var_X": variance(&t.x),
    })
}

/// Slow displacement that swings δ by `depth`·δ̄ on the first tone.
fn modulation_series(params: &SystemParams, m: &ModulationSettings, duration: f64) -> Vec<f64> {
    let rate = 100.0;
    let scale = params.delta() * params.kappa() / params.optical.freq_shift_per_disp;
    (0..=(duration * rate).ceil() as usize)
        .map(|i| {
            let t = i as f64 / rate;
            m.frequencies_hz
                .iter()
                .enumerate()
                .map(|(k, f)| {
                    m.depth / (k + 1) as f64 * scale * (2.0 * PI * f * t + k as f64).sin()
                })
                .sum()
        })
        .collect()
}

pub fn simulate(
    params: &SystemParams,
    s: &SimulateSettings,
    seed: u64,
    format: Format,
    out_name: &str,
) -> Result<StageOutput> {
    let opts = SimOptions::new(s.duration, s.sample_rate, seed);
    let traj = match &s.modulation {
        None => simulate_with(&build_model(params)?, &opts)?,
        Some(m) => {
            let modulation = DetuningModulation {
                displacement: modulation_series(params, m, s.duration),
                sample_rate: 100.0,
                update_every: m.update_every,
                photon_map: m.photon_map,
            };
            simulate_modulated(params, &modulation, &opts)?
        }
    };
    let data = TrajectoryData::from(&traj);
    let mut files = vec![(out_name.to_string(), io::trajectory_bytes(&data, format))];
    if let (Some(d), Some(r)) = (&traj.displacement, &traj.resonance_hz) {
        let rows: Vec<Vec<f64>> = (0..traj.len())
            .map(|i| vec![traj.time(i), d[i], r[i]])
            .collect();
        files.push((
            sibling(out_name, RESONANCE_FILE),
            io::table_bytes(&["t", "displacement_m", "resonance_hz"], &rows),
        ));
    }
    Ok(StageOutput {
        files,
        summary: trajectory_summary(&data),
    })
}

/// `name` placed in the same directory as `anchor`.
pub fn sibling(anchor: &str, name: &str) -> String {
    match Path::new(anchor)
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
    {
        Some(dir) => dir.join(name).display().to_string(),
        None => name.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentSettings {
    /// CSV `delta,f_hz,sigma_hz`.
    pub data: Option<PathBuf>,
    /// Power of the measurement in W; the parameter set's power if absent.
    pub power_w: Option<f64>,
    pub photon_map: PhotonMap,
}

impl Default for IdentSettings {
    fn default() -> Self {
        Self {
            data: None,
            power_w: None,
            photon_map: PhotonMap::Lorentzian,
        }
    }
}

/// Fits the spring curve. The `delta` column holds nominal detunings; the
/// fit returns the actual operating detuning for the nominal one in `params`.
pub fn ident(params: &SystemParams, data: &Path, s: &IdentSettings) -> Result<StageOutput> {
    let rows = io::read_table(data, &["delta", "f_hz", "sigma_hz"])?;
    let measurement = SpringMeasurement {
        detuning_samples: rows.iter().map(|r| r[0] - params.delta()).collect(),
        resonance_samples: rows.iter().map(|r| r[1]).collect(),
        resonance_errors: rows.iter().map(|r| r[2]).collect(),
        incident_power: s.power_w.unwrap_or(params.optical.incident_power),
    };
    let opts = FitOptions {
        map: s.photon_map,
        ..FitOptions::default()
    };
    let fit = fit_spring(
        &measurement,
        params,
        SpringGuess::from_params(params),
        &opts,
    )?;
    let summary = json!({
        "G_hz_per_m": fit.g / (2.0 * PI),
        "mean_delta": fit.mean_delta,
        "mean_delta_std": fit.mean_delta_std(),
        "residual_norm": fit.residual_norm,
    });
    let body = json!({
        "g_rad_per_s_per_m": fit.g,
        "g_hz_per_m": fit.g / (2.0 * PI),
        "eta": fit.eta,
        "mean_delta": fit.mean_delta,
        "nominal_delta": params.delta(),
        "residual_norm": fit.residual_norm,
        "parameter_covariance": fit.parameter_covariance,
        "parameter_order": ["G", "eta", "mean_delta"],
        "residuals": fit.residuals,
        "iterations": fit.iterations,
        "photon_map": s.photon_map,
        "warnings": fit.warnings,
    });
    Ok(StageOutput {
        files: vec![("fit.json".into(), json_bytes(&body))],
        summary,
    })
}

pub fn json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s.into_bytes()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    #[default]
    Analytic,
    Oracle,
}

impl FilterKind {
    pub fn factory(self) -> Box<dyn FilterFactory> {
        match self {
            FilterKind::Analytic => Box::new(AnalyticFactory),
            FilterKind::Oracle => Box::new(OracleFactory::default()),
        }
    }

    pub fn source(self) -> FilterSource {
        match self {
            FilterKind::Analytic => FilterSource::Analytic,
            FilterKind::Oracle => FilterSource::Oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub filter: FilterKind,
    pub grid: GridSpec,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            filter: FilterKind::Analytic,
            grid: GridSpec::default(),
        }
    }
}

pub fn filter_summary(params: &SystemParams, kind: FilterKind) -> Result<Value> {
    let mut v = json!({ "source": kind });
    match kind {
        FilterKind::Analytic => {
            let sus = modified_susceptibility(params)?;
            let c = filter_coefficients(params, &sus)?;
            v["omega_prime_hz"] = json!(sus.omega / (2.0 * PI));
            v["gamma_prime_hz"] = json!(sus.gamma / (2.0 * PI));
            v["A"] = json!(c.a);
            v["B_s"] = json!(c.b);
        }
        FilterKind::Oracle => {
            let sol = solve_riccati(&build_model(params)?)?;
            let c = sol.covariance;
            v["riccati_covariance"] = json!([[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]]);
        }
    }
    Ok(v)
}

pub fn synth(
    params: &SystemParams,
    s: &SynthSettings,
    nyquist: Option<f64>,
    out_name: &str,
) -> Result<StageOutput> {
    let grid = s.grid.frequencies(nyquist)?;
    let design = s.filter.factory().design(params)?;
    let response = design.response(&grid);
    Ok(StageOutput {
        files: vec![(out_name.to_string(), io::filter_bytes(&response))],
        summary: filter_summary(params, s.filter)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSettings {
    pub band: BandSpec,
    /// Filter used when no synthesized filter file is supplied.
    pub filter: FilterKind,
    pub resolution_hz: f64,
    pub discard_s: f64,
}

impl Default for EstimateSettings {
    fn default() -> Self {
        Self {
            band: BandSpec::default(),
            filter: FilterKind::Analytic,
            resolution_hz: 1.0,
            discard_s: 0.1,
        }
    }
}

pub const ELLIPSE_FILE: &str = "ellipse.csv";
pub const RESIDUAL_FILES: [&str; 3] = ["residual_qq.csv", "residual_pp.csv", "residual_qp.csv"];

pub fn estimate(
    params: &SystemParams,
    traj: &TrajectoryData,
    filter: Option<&FilterResponse>,
    s: &EstimateSettings,
    out_name: &str,
) -> Result<StageOutput> {
    let band = s
        .band
        .resolve(params)?
        .ok_or_else(|| config("estimate needs a finite band, not `full`"))?;
    let conditioner = Conditioner::new(&traj.x, traj.sample_rate)?;
    let grid = conditioner.grid();
    let (response, source) = match filter {
        Some(f) => (io::resample_filter(f, &grid)?, f.source),
        None => {
            let design = s.filter.factory().design(params)?;
            (design.response(&grid), design.source())
        }
    };
    let reference = Reference::Truth {
        q: &traj.q,
        p: &traj.p,
    };
    let residuals = condition_sampled(&conditioner, &response, reference)?;
    let opts = EstimateOptions {
        resolution_hz: s.resolution_hz,
        discard_s: s.discard_s,
        ..EstimateOptions::new(band)
    };
    let spectra = residual_spectra(&residuals, &opts)?;
    let state = covariance_from_spectra(&spectra.qq, &spectra.pp, &spectra.qp, band)?;
    let ellipse = ellipse_report(&state);
    let body = json!({
        "covariance": state.covariance,
        "purity": state.purity,
        "squeeze_var": state.squeeze_var,
        "antisqueeze_var": state.antisqueeze_var,
        "angle_deg": state.angle_deg,
        "below_heisenberg": state.below_heisenberg,
        "below_vacuum": state.below_vacuum,
        "band_hz": [band.0, band.1],
        "filter_source": source,
        "samples": traj.x.len(),
        "sample_rate_hz": traj.sample_rate,
    });
    let files = vec![
        (out_name.to_string(), json_bytes(&body)),
        (sibling(out_name, ELLIPSE_FILE), io::ellipse_bytes(&ellipse)),
        (
            sibling(out_name, RESIDUAL_FILES[0]),
            io::spectrum_bytes(&spectra.qq),
        ),
        (
            sibling(out_name, RESIDUAL_FILES[1]),
            io::spectrum_bytes(&spectra.pp),
        ),
        (
            sibling(out_name, RESIDUAL_FILES[2]),
            io::spectrum_bytes(&spectra.qp),
        ),
    ];
    Ok(StageOutput {
        files,
        summary: json!({
            "purity": state.purity,
            "angle_deg": state.angle_deg,
            "covariance": state.covariance,
            "band_hz": [band.0, band.1],
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub decades: f64,
    pub points: usize,
    pub band: BandSpec,
    pub filter: FilterKind,
    pub discard_s: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            decades: 1.0,
            points: 9,
            band: BandSpec::Full,
            filter: FilterKind::Oracle,
            discard_s: 0.1,
        }
    }
}

pub fn sweep(
    params: &SystemParams,
    traj: &TrajectoryData,
    s: &SweepSettings,
    out_name: &str,
) -> Result<StageOutput> {
    let conditioner = Conditioner::new(&traj.x, traj.sample_rate)?;
    let band = s.band.resolve(params)?;
    let options = EstimateOptions {
        discard_s: s.discard_s,
        ..EstimateOptions::new(band.unwrap_or((0.0, traj.sample_rate / 2.0)))
    };
    let data = SweepData::Series {
        conditioner: &conditioner,
        reference: Reference::Truth {
            q: &traj.q,
            p: &traj.p,
        },
        options,
    };
    let spec = SweepSpec {
        decades: s.decades,
        points: s.points,
    };
    let sweep_band = match band {
        None => SweepBand::Full,
        Some((lo, hi)) => SweepBand::Band(lo, hi),
    };
    let surface = purity_sweep(
        params,
        &data,
        s.filter.factory().as_ref(),
        &spec,
        sweep_band,
    )?;
    let rows: Vec<Vec<f64>> = surface
        .rows()
        .into_iter()
        .map(|(n, o, v)| vec![n, o, v.unwrap_or(f64::NAN)])
        .collect();
    let point = |ij: Option<(usize, usize)>| {
        ij.map(|(i, j)| json!({ "index": [i, j], "n_th": surface.n_th[i], "N_th": surface.optical_n_th[j] }))
    };
    let (ai, aj) = surface.axis_argmax();
    let summary = json!({
        "center": point(Some(surface.center())),
        "argmax": point(surface.argmax()),
        "axis_argmax": { "n_th": ai, "N_th": aj },
        "failed_points": surface.errors.len(),
    });
    Ok(StageOutput {
        files: vec![(
            out_name.to_string(),
            io::table_bytes(&["n_th", "N_th", "purity"], &rows),
        )],
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CountingSettings {
    pub band_hz: (f64, f64),
    pub lowpass_hz: f64,
    pub bins: usize,
}

impl Default for CountingSettings {
    fn default() -> Self {
        Self {
            band_hz: (170.0, 360.0),
            lowpass_hz: 8.2,
            bins: 25,
        }
    }
}

/// Bandpass → zero-crossing count → lowpass.
pub fn counted_frequency(x: &[f64], fs: f64, s: &CountingSettings) -> Result<Vec<f64>> {
    let band = dsp::bandpass(x, fs, s.band_hz.0, s.band_hz.1)?;
    Ok(dsp::lowpass(
        &dsp::count_zero_crossings(&band, fs)?,
        fs,
        s.lowpass_hz,
    )?)
}

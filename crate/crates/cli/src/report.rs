//! Report bundle: plot-ready tables and a JSON summary of headline numbers
//! next to reference values.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use optosqueeze::dsp::{self, Window};
use optosqueeze::ident::detuning_from_counts;
use optosqueeze::params::PhotonMap;
use optosqueeze::wiener::{filter_coefficients, modified_susceptibility};
use optosqueeze::SystemParams;
use serde_json::{json, Map, Value};

use crate::error::{config, Result};
use crate::io;
use crate::manifest::{Manifest, StageOutput};
use crate::stages::{self, CountingSettings};

/// Expected headline values for the reference parameter set.
pub mod reference {
    pub const OMEGA_M_HZ: f64 = 280.0;
    pub const G_M_HZ: f64 = -3.2e4;
    pub const QUANTUM_COOPERATIVITY: f64 = 0.0027;
    pub const OMEGA_PRIME_HZ: f64 = 706.0;
    pub const GAMMA_PRIME_HZ: f64 = 1080.0;
    pub const A_ABS: f64 = 1.2e6;
    pub const B_S: f64 = 4.1e-4;
    pub const COVARIANCE: [[f64; 2]; 2] = [[570.0, 2160.0], [2160.0, 14000.0]];
    pub const PURITY: f64 = 5.5e-4;
    pub const ANGLE_DEG: f64 = 8.9;
    pub const MEAN_DELTA: f64 = 0.0292;
}

fn entry(value: f64, reference: Option<f64>, label: &str) -> Value {
    let mut v = json!({ "value": value, "label": label });
    if let Some(r) = reference {
        v["reference"] = json!(r);
        v["relative_deviation"] = json!((value - r) / r.abs());
    }
    v
}

/// Verified trajectory and its producing stage, if any.
pub fn find_trajectory(m: &Manifest, out_dir: &Path) -> Result<Option<(PathBuf, String)>> {
    for stage in ["simulate", "ingest"] {
        if let Some(name) = m
            .output_named(stage, "trajectory.csv")
            .or_else(|| m.output_named(stage, "trajectory.bin"))
        {
            return Ok(Some((
                m.verified_output(out_dir, stage, &name)?,
                stage.to_string(),
            )));
        }
    }
    Ok(None)
}

fn model_section(params: &SystemParams) -> Result<Value> {
    let d = &params.derived;
    let mut s = Map::new();
    s.insert(
        "omega_m_hz".into(),
        entry(
            params.omega_m() / (2.0 * PI),
            Some(reference::OMEGA_M_HZ),
            "model",
        ),
    );
    s.insert(
        "g_m_hz".into(),
        entry(
            d.confined_coupling / (2.0 * PI),
            Some(reference::G_M_HZ),
            "model",
        ),
    );
    s.insert(
        "quantum_cooperativity".into(),
        entry(
            d.quantum_cooperativity,
            Some(reference::QUANTUM_COOPERATIVITY),
            "model",
        ),
    );
    if let Ok(sus) = modified_susceptibility(params) {
        s.insert(
            "omega_prime_hz".into(),
            entry(
                sus.omega / (2.0 * PI),
                Some(reference::OMEGA_PRIME_HZ),
                "model",
            ),
        );
        s.insert(
            "gamma_prime_hz".into(),
            entry(
                sus.gamma / (2.0 * PI),
                Some(reference::GAMMA_PRIME_HZ),
                "model",
            ),
        );
        let c = filter_coefficients(params, &sus)?;
        s.insert(
            "abs_A".into(),
            entry(c.a.abs(), Some(reference::A_ABS), "model"),
        );
        s.insert("B_s".into(), entry(c.b, Some(reference::B_S), "model"));
    }
    Ok(Value::Object(s))
}

/// Builds the report from every verified stage output in the manifest.
pub fn report(
    manifest: &Manifest,
    out_dir: &Path,
    params: &SystemParams,
    counting: &CountingSettings,
) -> Result<StageOutput> {
    let trajectory = find_trajectory(manifest, out_dir)?;
    let has_estimate = manifest.stages.contains_key("estimate");
    if trajectory.is_none() && !has_estimate {
        return Err(config(
            "report needs a completed simulate, ingest or estimate stage in the manifest",
        ));
    }
    let mut files = Vec::new();
    let mut summary = Map::new();

    let traj = match &trajectory {
        Some((path, _)) => Some(io::read_trajectory(path)?),
        None => None,
    };
    if let Some(t) = &traj {
        summary.insert("trajectory".into(), stages::trajectory_summary(t));
    }

    if has_estimate {
        summary.insert("model".into(), model_section(params)?);
        let state_name = manifest
            .output_named("estimate", ".json")
            .ok_or_else(|| config("estimate stage recorded no state file"))?;
        let state_path = manifest.verified_output(out_dir, "estimate", &state_name)?;
        let state: Value = serde_json::from_str(&io::read_text(&state_path)?)
            .map_err(|e| config(format!("{}: {e}", state_path.display())))?;
        let num = |k: &str| state[k].as_f64().unwrap_or(f64::NAN);
        let mut data = Map::new();
        data.insert(
            "purity".into(),
            entry(num("purity"), Some(reference::PURITY), "data"),
        );
        data.insert(
            "angle_deg".into(),
            entry(num("angle_deg"), Some(reference::ANGLE_DEG), "data"),
        );
        data.insert(
            "covariance".into(),
            json!({
                "value": state["covariance"],
                "reference": reference::COVARIANCE,
                "label": "data",
            }),
        );
        data.insert("band_hz".into(), state["band_hz"].clone());
        data.insert("filter_source".into(), state["filter_source"].clone());
        summary.insert("estimate".into(), Value::Object(data));

        let ellipse = manifest
            .output_named("estimate", stages::ELLIPSE_FILE)
            .ok_or_else(|| config("estimate stage recorded no ellipse"))?;
        let ellipse = manifest.verified_output(out_dir, "estimate", &ellipse)?;
        files.push(("report/ellipse.csv".to_string(), io::read_bytes(&ellipse)?));

        let mut residual = Vec::new();
        for name in stages::RESIDUAL_FILES {
            let rec = manifest
                .output_named("estimate", name)
                .ok_or_else(|| config(format!("estimate stage recorded no {name}")))?;
            let path = manifest.verified_output(out_dir, "estimate", &rec)?;
            residual.push(io::read_table(&path, &["f_hz", "value_re", "value_im"])?);
        }
        files.extend(spectra_tables(traj.as_ref(), &residual)?);
    }

    if manifest.stages.contains_key("sweep") {
        let name = manifest
            .output_named("sweep", ".csv")
            .ok_or_else(|| config("sweep stage recorded no surface"))?;
        let path = manifest.verified_output(out_dir, "sweep", &name)?;
        files.push((
            "report/purity_surface.csv".to_string(),
            io::read_bytes(&path)?,
        ));
        summary.insert("sweep".into(), manifest.stages["sweep"].summary.clone());
    }

    if let Some(t) = &traj {
        let resonance = trajectory.as_ref().and_then(|(_, stage)| {
            manifest
                .output_named(stage, stages::RESONANCE_FILE)
                .map(|n| (stage.clone(), n))
        });
        let truth = match resonance {
            Some((stage, name)) => {
                let path = manifest.verified_output(out_dir, &stage, &name)?;
                Some(io::read_table(
                    &path,
                    &["t", "displacement_m", "resonance_hz"],
                )?)
            }
            None => None,
        };
        let (table, counting_summary) = counting_table(t, truth.as_deref(), params, counting)?;
        files.push(("report/counted_frequency.csv".to_string(), table));
        summary.insert("counting".into(), counting_summary);
    }

    let summary = Value::Object(summary);
    files.push((
        "report/summary.json".to_string(),
        stages::json_bytes(&summary),
    ));
    Ok(StageOutput { files, summary })
}

/// Unconditional and conditional spectra of q and p plus the cospectrum.
fn spectra_tables(
    traj: Option<&io::TrajectoryData>,
    residual: &[Vec<Vec<f64>>],
) -> Result<Vec<(String, Vec<u8>)>> {
    let freqs: Vec<f64> = residual[0].iter().map(|r| r[0]).collect();
    let df = if freqs.len() > 1 {
        freqs[1] - freqs[0]
    } else {
        f64::NAN
    };
    let unconditional = |series: &[f64], fs: f64| -> Result<Option<Vec<f64>>> {
        let seg = dsp::segment_length_for_resolution(fs, df);
        let s = dsp::psd_welch(series, fs, seg, 0.5, Window::Hann)?;
        Ok((s.frequencies.len() == freqs.len()).then(|| s.real()))
    };
    let (uq, up) = match traj {
        Some(t)
            if df.is_finite()
                && t.x.len() > 2 * dsp::segment_length_for_resolution(t.sample_rate, df) =>
        {
            (
                unconditional(&t.q, t.sample_rate)?,
                unconditional(&t.p, t.sample_rate)?,
            )
        }
        _ => (None, None),
    };
    let table = |unc: Option<Vec<f64>>, cond: &[Vec<f64>]| {
        let rows: Vec<Vec<f64>> = cond
            .iter()
            .enumerate()
            .map(|(i, r)| vec![r[0], unc.as_ref().map_or(f64::NAN, |u| u[i]), r[1]])
            .collect();
        io::table_bytes(&["f_hz", "unconditional", "conditional"], &rows)
    };
    let co: Vec<Vec<f64>> = residual[2].iter().map(|r| vec![r[0], r[1], r[2]]).collect();
    Ok(vec![
        ("report/spectrum_q.csv".to_string(), table(uq, &residual[0])),
        ("report/spectrum_p.csv".to_string(), table(up, &residual[1])),
        (
            "report/cospectrum.csv".to_string(),
            io::table_bytes(&["f_hz", "cospectrum", "quadspectrum"], &co),
        ),
    ])
}

/// Binned counted frequency, with the true track and a detuning estimate
/// when the simulator recorded them.
fn counting_table(
    t: &io::TrajectoryData,
    truth: Option<&[Vec<f64>]>,
    params: &SystemParams,
    s: &CountingSettings,
) -> Result<(Vec<u8>, Value)> {
    let fs = t.sample_rate;
    let counted = match stages::counted_frequency(&t.x, fs, s) {
        Ok(c) => c,
        Err(e) => {
            return Ok((
                io::table_bytes(&["t", "counted_hz", "true_hz"], &[]),
                json!({ "error": e.to_string() }),
            ))
        }
    };
    let bins = s.bins.min(counted.len());
    let binned = dsp::bin_average(&counted, bins)?;
    let times: Vec<f64> = (0..counted.len()).map(|i| i as f64 / fs).collect();
    let t_binned = dsp::bin_average(&times, bins)?;
    let true_binned = match truth {
        Some(rows) if rows.len() == counted.len() => Some(dsp::bin_average(
            &rows.iter().map(|r| r[2]).collect::<Vec<_>>(),
            bins,
        )?),
        _ => None,
    };
    let rows: Vec<Vec<f64>> = (0..bins)
        .map(|i| {
            vec![
                t_binned[i],
                binned[i],
                true_binned.as_ref().map_or(f64::NAN, |v| v[i]),
            ]
        })
        .collect();
    let mut summary = json!({
        "bins": bins,
        "mean_counted_hz": counted.iter().sum::<f64>() / counted.len() as f64,
    });
    if let Some(tb) = &true_binned {
        let rms = (binned
            .iter()
            .zip(tb)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / bins as f64)
            .sqrt();
        summary["track_rms_hz"] = json!(rms);
    }
    if let Some(rows) = truth.filter(|r| r.len() == counted.len()) {
        let disp = dsp::lowpass(
            &rows.iter().map(|r| r[1]).collect::<Vec<_>>(),
            fs,
            s.lowpass_hz,
        )?;
        match detuning_from_counts(&counted, &disp, params, PhotonMap::Lorentzian) {
            Ok(est) => {
                summary["mean_delta"] = entry(est.mean_delta, Some(reference::MEAN_DELTA), "data");
                summary["mean_delta_std"] = json!(est.std_error);
                summary["branch"] = json!(est.branch);
                summary["branch_candidates"] = json!(est.candidates);
            }
            Err(e) => summary["mean_delta_error"] = json!(e.to_string()),
        }
    }
    Ok((
        io::table_bytes(&["t", "counted_hz", "true_hz"], &rows),
        summary,
    ))
}

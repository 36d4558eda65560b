//! Run configuration and the stage runners that record into the manifest.

use std::path::{Path, PathBuf};

use optosqueeze::wiener::FilterSource;
use optosqueeze::SystemParams;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{config, CliError, Result};
use crate::io::{self, Format};
use crate::manifest::{stage_seed, Manifest, StageOutput, StageResult};
use crate::report;
use crate::stages::{
    self, CountingSettings, EstimateSettings, FilterKind, IdentSettings, SimulateSettings,
    SweepSettings, SynthSettings,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Simulate,
    Ingest,
    Ident,
    Synth,
    Estimate,
    Sweep,
    Report,
}

impl Stage {
    fn rank(self) -> u8 {
        match self {
            Stage::Simulate | Stage::Ingest => 0,
            Stage::Ident => 1,
            Stage::Synth => 2,
            Stage::Estimate => 3,
            Stage::Sweep => 4,
            Stage::Report => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Ingest => "ingest",
            Stage::Ident => "ident",
            Stage::Synth => "synth",
            Stage::Estimate => "estimate",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

/// Checks that the stage list follows
/// simulate/ingest → ident → synth → estimate → sweep → report.
pub fn validate_order(stages: &[Stage]) -> Result<()> {
    if stages.contains(&Stage::Simulate) && stages.contains(&Stage::Ingest) {
        return Err(config("stages: use either simulate or ingest, not both"));
    }
    for w in stages.windows(2) {
        if w[0].rank() >= w[1].rank() {
            return Err(config(format!(
                "stages: `{}` cannot follow `{}`; order is simulate|ingest, ident, synth, estimate, sweep, report",
                w[1].name(),
                w[0].name()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub params: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub stages: Vec<Stage>,
    /// Trajectory file for the `ingest` stage.
    pub data: Option<PathBuf>,
    pub simulate: SimulateSettings,
    pub ident: IdentSettings,
    pub synth: SynthSettings,
    pub estimate: EstimateSettings,
    pub sweep: SweepSettings,
    pub report: CountingSettings,
}

impl RunConfig {
    /// Parses a TOML config; relative paths are taken from the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        let mut c: RunConfig =
            toml::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut c.params);
        fix(&mut c.out_dir);
        fix(&mut c.data);
        fix(&mut c.ident.data);
        validate_order(&c.stages)?;
        Ok(c)
    }
}

pub const DEFAULT_OUT_DIR: &str = "out";

/// Everything a stage needs besides its own settings.
pub struct Context {
    pub params: SystemParams,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub format: Format,
    pub manifest: Manifest,
}

impl Context {
    pub fn new(params: SystemParams, out_dir: PathBuf, seed: u64, format: Format) -> Result<Self> {
        let manifest = Manifest::load(&out_dir)?;
        Ok(Self {
            params,
            out_dir,
            seed,
            format,
            manifest,
        })
    }

    fn parameters(&self, extra: Value) -> Value {
        json!({
            "params": self.params,
            "stage": extra,
        })
    }

    /// The trajectory recorded by a simulate or ingest stage, hash-checked.
    pub fn recorded_trajectory(&self) -> Result<PathBuf> {
        report::find_trajectory(&self.manifest, &self.out_dir)?
            .map(|(p, _)| p)
            .ok_or_else(|| config("no trajectory: pass --data or run simulate first"))
    }

    fn data_or_recorded(&self, data: Option<&Path>) -> Result<PathBuf> {
        match data {
            Some(p) => Ok(p.to_path_buf()),
            None => self.recorded_trajectory(),
        }
    }

    pub fn simulate(&mut self, s: &SimulateSettings) -> Result<StageResult> {
        let seed = stage_seed(self.seed, "simulate");
        let name = stages::trajectory_name(self.format);
        let parameters = self.parameters(json!({
            "settings": s, "seed": seed, "format": self.format, "out": name,
        }));
        let (params, format) = (&self.params, self.format);
        self.manifest
            .run_stage(&self.out_dir, "simulate", &[], parameters, || {
                stages::simulate(params, s, seed, format, &name)
            })
    }

    /// Copies an external trajectory into the run in the run's format.
    pub fn ingest(&mut self, data: &Path) -> Result<StageResult> {
        let name = stages::trajectory_name(self.format);
        let parameters = self.parameters(json!({ "format": self.format, "out": name }));
        let format = self.format;
        self.manifest.run_stage(
            &self.out_dir,
            "ingest",
            &[data.to_path_buf()],
            parameters,
            || {
                let t = io::read_trajectory(data)?;
                Ok(StageOutput {
                    files: vec![(name.clone(), io::trajectory_bytes(&t, format))],
                    summary: stages::trajectory_summary(&t),
                })
            },
        )
    }

    pub fn ident(&mut self, s: &IdentSettings, out: &str) -> Result<StageResult> {
        let data = s
            .data
            .clone()
            .ok_or_else(|| config("ident needs a data file (`--data` or [ident] data)"))?;
        let parameters = self.parameters(json!({ "settings": s, "out": out }));
        let params = &self.params;
        self.manifest.run_stage(
            &self.out_dir,
            "ident",
            std::slice::from_ref(&data),
            parameters,
            || {
                let mut o = stages::ident(params, &data, s)?;
                o.files[0].0 = out.to_string();
                Ok(o)
            },
        )
    }

    /// Synthesizes the filter; an `auto` grid edge takes the Nyquist
    /// frequency of `data` or of the recorded trajectory.
    pub fn synth(
        &mut self,
        s: &SynthSettings,
        data: Option<&Path>,
        out: &str,
    ) -> Result<StageResult> {
        let source = match s.grid.stop {
            stages::Edge::Auto => Some(self.data_or_recorded(data)?),
            stages::Edge::Hz(_) => None,
        };
        let nyquist = match &source {
            Some(p) => Some(io::read_trajectory(p)?.sample_rate / 2.0),
            None => None,
        };
        let parameters =
            self.parameters(json!({ "settings": s, "nyquist_hz": nyquist, "out": out }));
        let inputs: Vec<PathBuf> = source.into_iter().collect();
        let params = &self.params;
        self.manifest
            .run_stage(&self.out_dir, "synth", &inputs, parameters, || {
                stages::synth(params, s, nyquist, out)
            })
    }

    /// Filter recorded by the synth stage together with its source.
    pub fn recorded_filter(&self) -> Result<Option<(PathBuf, FilterSource)>> {
        let Some(record) = self.manifest.stages.get("synth") else {
            return Ok(None);
        };
        let name = record
            .outputs
            .keys()
            .next()
            .ok_or_else(|| config("synth stage recorded no filter"))?;
        let kind: FilterKind = serde_json::from_value(record.summary["source"].clone())
            .map_err(|e| config(format!("synth summary: {e}")))?;
        let path = self
            .manifest
            .verified_output(&self.out_dir, "synth", name)?;
        Ok(Some((path, kind.source())))
    }

    pub fn estimate(
        &mut self,
        s: &EstimateSettings,
        data: Option<&Path>,
        filter: Option<(PathBuf, FilterSource)>,
        out: &str,
    ) -> Result<StageResult> {
        let data = self.data_or_recorded(data)?;
        let mut inputs = vec![data.clone()];
        inputs.extend(filter.iter().map(|(p, _)| p.clone()));
        let parameters = self.parameters(json!({
            "settings": s,
            "filter_source": filter.as_ref().map(|(_, src)| *src),
            "out": out,
        }));
        let params = &self.params;
        self.manifest
            .run_stage(&self.out_dir, "estimate", &inputs, parameters, || {
                let traj = io::read_trajectory(&data)?;
                let response = match &filter {
                    Some((p, src)) => Some(io::read_filter(p, *src)?),
                    None => None,
                };
                stages::estimate(params, &traj, response.as_ref(), s, out)
            })
    }

    pub fn sweep(
        &mut self,
        s: &SweepSettings,
        data: Option<&Path>,
        out: &str,
    ) -> Result<StageResult> {
        let data = self.data_or_recorded(data)?;
        let parameters = self.parameters(json!({ "settings": s, "out": out }));
        let params = &self.params;
        self.manifest.run_stage(
            &self.out_dir,
            "sweep",
            std::slice::from_ref(&data),
            parameters,
            || {
                let traj = io::read_trajectory(&data)?;
                stages::sweep(params, &traj, s, out)
            },
        )
    }

    pub fn report(&mut self, s: &CountingSettings) -> Result<StageResult> {
        let snapshot = self.manifest.clone();
        let inputs: Vec<PathBuf> = snapshot
            .stages
            .iter()
            .filter(|(name, _)| name.as_str() != "report" && !name.starts_with("dsp"))
            .flat_map(|(_, r)| r.outputs.keys().map(|k| self.out_dir.join(k)))
            .collect();
        let parameters = self.parameters(json!({ "counting": s }));
        let (params, out_dir) = (&self.params, self.out_dir.clone());
        self.manifest
            .run_stage(&self.out_dir, "report", &inputs, parameters, || {
                report::report(&snapshot, &out_dir, params, s)
            })
    }

    /// Records a free-standing kernel output under `dsp-<kernel>`.
    pub fn dsp<F>(
        &mut self,
        kernel: &str,
        input: &Path,
        parameters: Value,
        body: F,
    ) -> Result<StageResult>
    where
        F: FnOnce() -> Result<StageOutput>,
    {
        let stage = format!("dsp-{kernel}");
        self.manifest.run_stage(
            &self.out_dir,
            &stage,
            &[input.to_path_buf()],
            parameters,
            body,
        )
    }
}

/// Runs every stage of the config in order.
pub fn run(ctx: &mut Context, c: &RunConfig) -> Result<Vec<(Stage, StageResult)>> {
    validate_order(&c.stages)?;
    if c.stages.is_empty() {
        return Err(config("stages: list at least one stage"));
    }
    let mut done = Vec::new();
    for &stage in &c.stages {
        let r = match stage {
            Stage::Simulate => ctx.simulate(&c.simulate),
            Stage::Ingest => {
                let data = c
                    .data
                    .as_deref()
                    .ok_or_else(|| config("the ingest stage needs `data`"))?;
                ctx.ingest(data)
            }
            Stage::Ident => ctx.ident(&c.ident, "fit.json"),
            Stage::Synth => ctx.synth(&c.synth, None, "filter.csv"),
            Stage::Estimate => {
                let filter = if c.stages.contains(&Stage::Synth) {
                    ctx.recorded_filter()?
                } else {
                    None
                };
                ctx.estimate(&c.estimate, None, filter, "state.json")
            }
            Stage::Sweep => ctx.sweep(&c.sweep, None, "sweep.csv"),
            Stage::Report => ctx.report(&c.report),
        };
        let r = r.map_err(|e: CliError| e.in_stage(stage.name()))?;
        done.push((stage, r));
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_order_is_checked() {
        use Stage::*;
        assert!(validate_order(&[Simulate, Synth, Estimate, Sweep, Report]).is_ok());
        assert!(validate_order(&[Ingest, Ident, Report]).is_ok());
        assert!(validate_order(&[Estimate, Synth]).is_err());
        assert!(validate_order(&[Simulate, Simulate]).is_err());
        assert!(validate_order(&[Simulate, Ingest]).is_err());
    }

    #[test]
    fn config_parses_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
params = "p.toml"
seed = 3
format = "bin"
stages = ["simulate", "estimate", "report"]

[simulate]
duration = 2.0

[estimate]
band = "105:auto"

[sweep]
points = 3
band = "full"
"#,
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.params, Some(dir.path().join("p.toml")));
        assert_eq!(c.format, Some(Format::Bin));
        assert_eq!(c.simulate.duration, 2.0);
        assert_eq!(c.sweep.points, 3);
        std::fs::write(&path, "stages = [\"report\", \"simulate\"]").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Config(_))));
        std::fs::write(&path, "bogus = 1").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Config(_))));
    }
}

mod error;
mod io;
mod manifest;
mod pipeline;
mod report;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use optosqueeze::dsp::{self, FilterMode, Window};
use optosqueeze::params::PhotonMap;
use serde_json::json;

use error::{config, Result};
use io::{Channel, Format};
use manifest::{StageOutput, StageResult};
use pipeline::{Context, RunConfig, DEFAULT_OUT_DIR};
use stages::{BandSpec, FilterKind, GridSpec, ModulationSettings};

#[derive(Parser)]
#[command(
    name = "optosqueeze",
    version,
    about = "Conditional mechanical squeezing analysis"
)]
struct Cli {
    /// Run configuration (TOML); supplies defaults for every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding outputs and manifest.json.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Trajectory format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Parameter file (TOML); the reference set if absent.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter set operations.
    Params {
        #[command(subcommand)]
        command: ParamsCommand,
    },
    /// Simulate a trajectory.
    Simulate {
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        sample_rate: Option<f64>,
        /// Add slow detuning modulation and record the resonance track.
        #[arg(long)]
        modulate: bool,
    },
    /// Signal processing kernels on a single series.
    Dsp {
        #[command(subcommand)]
        kernel: DspKernel,
    },
    /// Spring-curve identification.
    Ident {
        #[command(subcommand)]
        command: IdentCommand,
    },
    /// Wiener filter synthesis.
    Wiener {
        #[command(subcommand)]
        command: WienerCommand,
    },
    /// Conditional state estimation.
    Estimate {
        #[command(subcommand)]
        command: EstimateCommand,
    },
    /// Plot-ready tables and headline summary from the manifest.
    Report,
    /// Run the stages listed in --config.
    Run,
}

#[derive(Subcommand)]
enum ParamsCommand {
    /// Print the full derived parameter set as JSON.
    Show,
}

#[derive(Subcommand)]
enum IdentCommand {
    Fit {
        /// CSV `delta,f_hz,sigma_hz`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        power_w: Option<f64>,
        /// Use a fixed intracavity photon number instead of the Lorentzian map.
        #[arg(long)]
        fixed_photons: bool,
        #[arg(long, default_value = "fit.json")]
        out: String,
    },
}

#[derive(Subcommand)]
enum WienerCommand {
    Synth {
        /// `f0:f1:df`; `f1` may be `auto`.
        #[arg(long)]
        grid: Option<GridSpec>,
        #[arg(long)]
        oracle: bool,
        /// Trajectory giving the Nyquist frequency for an `auto` grid.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "filter.csv")]
        out: String,
    },
}

#[derive(Subcommand)]
enum EstimateCommand {
    Run {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Filter CSV from `wiener synth`.
        #[arg(long)]
        filter: Option<PathBuf>,
        /// Source of `--filter`, or the filter to design when it is absent.
        #[arg(long, value_enum)]
        filter_source: Option<FilterKind>,
        /// `f_lo:f_hi`, `f_lo:auto` or `full`.
        #[arg(long)]
        band: Option<BandSpec>,
        #[arg(long)]
        resolution_hz: Option<f64>,
        #[arg(long, default_value = "state.json")]
        out: String,
    },
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        grid_decades: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        band: Option<BandSpec>,
        #[arg(long, value_enum)]
        filter_source: Option<FilterKind>,
        #[arg(long, default_value = "sweep.csv")]
        out: String,
    },
}

#[derive(Args)]
struct SeriesIn {
    /// Trajectory or `t,value` CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "X")]
    column: Channel,
    /// Output file, relative to --out-dir.
    #[arg(long)]
    out: String,
}

#[derive(Subcommand)]
enum DspKernel {
    /// Welch power spectral density.
    Psd {
        #[command(flatten)]
        io: SeriesIn,
        #[arg(long, default_value_t = 10.0)]
        resolution_hz: f64,
    },
    /// Welch cross-spectrum of two trajectory channels.
    Csd {
        #[command(flatten)]
        io: SeriesIn,
        #[arg(long, value_enum, default_value = "p")]
        with: Channel,
        #[arg(long, default_value_t = 10.0)]
        resolution_hz: f64,
    },
    /// Zero-phase Butterworth bandpass.
    Bandpass {
        #[command(flatten)]
        io: SeriesIn,
        #[arg(long)]
        lo: f64,
        #[arg(long)]
        hi: f64,
    },
    /// Zero-phase Butterworth lowpass.
    Lowpass {
        #[command(flatten)]
        io: SeriesIn,
        #[arg(long)]
        cutoff: f64,
    },
    /// Zero-phase notch at f0 and its harmonics.
    Notch {
        #[command(flatten)]
        io: SeriesIn,
        #[arg(long, default_value_t = 50.0)]
        f0: f64,
        #[arg(long, default_value_t = 1)]
        harmonics: usize,
        #[arg(long, default_value_t = 1.0)]
        width: f64,
    },
    /// Magnitude of the analytic signal.
    Envelope {
        #[command(flatten)]
        io: SeriesIn,
    },
    /// Instantaneous frequency from zero crossings.
    Count {
        #[command(flatten)]
        io: SeriesIn,
    },
    /// Average into equal bins.
    Bin {
        #[command(flatten)]
        io: SeriesIn,
        #[arg(long, default_value_t = 25)]
        bins: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print_result(stage: &str, r: &StageResult) {
    let v = json!({
        "stage": stage,
        "skipped": r.skipped,
        "outputs": r.record.outputs.keys().collect::<Vec<_>>(),
        "summary": r.record.summary,
    });
    println!("{v}");
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let params_path = cli.params.clone().or(cfg.params.clone());
    let params = stages::load_params(params_path.as_deref())?;

    if let Command::Params {
        command: ParamsCommand::Show,
    } = &cli.command
    {
        let v = serde_json::to_string_pretty(&params).expect("params serialize");
        println!("{v}");
        return Ok(());
    }

    let out_dir = cli
        .out_dir
        .clone()
        .or(cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let format = cli.format.or(cfg.format).unwrap_or_default();
    let mut ctx = Context::new(params, out_dir, seed, format)?;

    match cli.command {
        Command::Params { .. } => unreachable!("handled above"),
        Command::Simulate {
            duration,
            sample_rate,
            modulate,
        } => {
            let mut s = cfg.simulate.clone();
            s.duration = duration.unwrap_or(s.duration);
            s.sample_rate = sample_rate.unwrap_or(s.sample_rate);
            if modulate && s.modulation.is_none() {
                s.modulation = Some(ModulationSettings::default());
            }
            print_result("simulate", &ctx.simulate(&s)?);
        }
        Command::Dsp { kernel } => run_dsp(&mut ctx, kernel)?,
        Command::Ident {
            command:
                IdentCommand::Fit {
                    data,
                    power_w,
                    fixed_photons,
                    out,
                },
        } => {
            let mut s = cfg.ident.clone();
            s.data = data.or(s.data);
            s.power_w = power_w.or(s.power_w);
            if fixed_photons {
                s.photon_map = PhotonMap::Fixed;
            }
            print_result("ident", &ctx.ident(&s, &out)?);
        }
        Command::Wiener {
            command:
                WienerCommand::Synth {
                    grid,
                    oracle,
                    data,
                    out,
                },
        } => {
            let mut s = cfg.synth.clone();
            s.grid = grid.unwrap_or(s.grid);
            if oracle {
                s.filter = FilterKind::Oracle;
            }
            print_result("synth", &ctx.synth(&s, data.as_deref(), &out)?);
        }
        Command::Estimate {
            command:
                EstimateCommand::Run {
                    data,
                    filter,
                    filter_source,
                    band,
                    resolution_hz,
                    out,
                },
        } => {
            let mut s = cfg.estimate.clone();
            s.band = band.unwrap_or(s.band);
            s.resolution_hz = resolution_hz.unwrap_or(s.resolution_hz);
            s.filter = filter_source.unwrap_or(s.filter);
            let filter = filter.map(|p| (p, s.filter.source()));
            print_result(
                "estimate",
                &ctx.estimate(&s, data.as_deref(), filter, &out)?,
            );
        }
        Command::Estimate {
            command:
                EstimateCommand::Sweep {
                    data,
                    grid_decades,
                    points,
                    band,
                    filter_source,
                    out,
                },
        } => {
            let mut s = cfg.sweep.clone();
            s.decades = grid_decades.unwrap_or(s.decades);
            s.points = points.unwrap_or(s.points);
            s.band = band.unwrap_or(s.band);
            s.filter = filter_source.unwrap_or(s.filter);
            print_result("sweep", &ctx.sweep(&s, data.as_deref(), &out)?);
        }
        Command::Report => print_result("report", &ctx.report(&cfg.report)?),
        Command::Run => {
            if cli.config.is_none() {
                return Err(config("run needs --config"));
            }
            for (stage, r) in pipeline::run(&mut ctx, &cfg)? {
                print_result(stage.name(), &r);
            }
        }
    }
    Ok(())
}

fn series(io: &SeriesIn) -> Result<(f64, Vec<f64>)> {
    io::read_series(&io.input, io.column)
}

fn one_file(out: &str, bytes: Vec<u8>, summary: serde_json::Value) -> Result<StageOutput> {
    Ok(StageOutput {
        files: vec![(out.to_string(), bytes)],
        summary,
    })
}

fn segment(fs: f64, resolution_hz: f64, n: usize) -> Result<usize> {
    let seg = dsp::segment_length_for_resolution(fs, resolution_hz);
    if seg > n {
        return Err(config(format!(
            "resolution {resolution_hz} Hz needs {seg} samples per segment but the series has {n}"
        )));
    }
    Ok(seg)
}

fn run_dsp(ctx: &mut Context, kernel: DspKernel) -> Result<()> {
    let column_name = |c: Channel| format!("{c:?}");
    let (name, input, parameters): (&str, &Path, _) = match &kernel {
        DspKernel::Psd { io, resolution_hz } => (
            "psd",
            &io.input,
            json!({ "column": column_name(io.column), "resolution_hz": resolution_hz, "out": io.out }),
        ),
        DspKernel::Csd {
            io,
            with,
            resolution_hz,
        } => (
            "csd",
            &io.input,
            json!({ "column": column_name(io.column), "with": column_name(*with), "resolution_hz": resolution_hz, "out": io.out }),
        ),
        DspKernel::Bandpass { io, lo, hi } => (
            "bandpass",
            &io.input,
            json!({ "column": column_name(io.column), "lo": lo, "hi": hi, "out": io.out }),
        ),
        DspKernel::Lowpass { io, cutoff } => (
            "lowpass",
            &io.input,
            json!({ "column": column_name(io.column), "cutoff": cutoff, "out": io.out }),
        ),
        DspKernel::Notch {
            io,
            f0,
            harmonics,
            width,
        } => (
            "notch",
            &io.input,
            json!({ "column": column_name(io.column), "f0": f0, "harmonics": harmonics, "width": width, "out": io.out }),
        ),
        DspKernel::Envelope { io } => (
            "envelope",
            &io.input,
            json!({ "column": column_name(io.column), "out": io.out }),
        ),
        DspKernel::Count { io } => (
            "count",
            &io.input,
            json!({ "column": column_name(io.column), "out": io.out }),
        ),
        DspKernel::Bin { io, bins } => (
            "bin",
            &io.input,
            json!({ "column": column_name(io.column), "bins": bins, "out": io.out }),
        ),
    };
    let input = input.to_path_buf();
    let body = || -> Result<StageOutput> {
        match &kernel {
            DspKernel::Psd { io, resolution_hz } => {
                let (fs, x) = series(io)?;
                let s = dsp::psd_welch(
                    &x,
                    fs,
                    segment(fs, *resolution_hz, x.len())?,
                    0.5,
                    Window::Hann,
                )?;
                one_file(
                    &io.out,
                    io::spectrum_bytes(&s),
                    json!({ "bins": s.frequencies.len() }),
                )
            }
            DspKernel::Csd {
                io,
                with,
                resolution_hz,
            } => {
                let (fs, a) = series(io)?;
                let (_, b) = io::read_series(&io.input, *with)?;
                let seg = segment(fs, *resolution_hz, a.len())?;
                let s = dsp::cross_spectrum(&a, &b, fs, seg, 0.5, Window::Hann)?;
                one_file(
                    &io.out,
                    io::spectrum_bytes(&s),
                    json!({ "bins": s.frequencies.len() }),
                )
            }
            DspKernel::Bandpass { io, lo, hi } => {
                let (fs, x) = series(io)?;
                let y = dsp::bandpass(&x, fs, *lo, *hi)?;
                one_file(
                    &io.out,
                    io::series_bytes(fs, &y),
                    json!({ "samples": y.len() }),
                )
            }
            DspKernel::Lowpass { io, cutoff } => {
                let (fs, x) = series(io)?;
                let y = dsp::lowpass(&x, fs, *cutoff)?;
                one_file(
                    &io.out,
                    io::series_bytes(fs, &y),
                    json!({ "samples": y.len() }),
                )
            }
            DspKernel::Notch {
                io,
                f0,
                harmonics,
                width,
            } => {
                let (fs, x) = series(io)?;
                let y =
                    dsp::notch_harmonics(&x, fs, *f0, *harmonics, *width, FilterMode::ZeroPhase)?;
                one_file(
                    &io.out,
                    io::series_bytes(fs, &y),
                    json!({ "samples": y.len() }),
                )
            }
            DspKernel::Envelope { io } => {
                let (fs, x) = series(io)?;
                let y: Vec<f64> = dsp::analytic_signal(&x)?.iter().map(|z| z.norm()).collect();
                one_file(
                    &io.out,
                    io::series_bytes(fs, &y),
                    json!({ "samples": y.len() }),
                )
            }
            DspKernel::Count { io } => {
                let (fs, x) = series(io)?;
                let y = dsp::count_zero_crossings(&x, fs)?;
                let mean = y.iter().sum::<f64>() / y.len() as f64;
                one_file(
                    &io.out,
                    io::series_bytes(fs, &y),
                    json!({ "mean_hz": mean }),
                )
            }
            DspKernel::Bin { io, bins } => {
                let (fs, x) = series(io)?;
                let y = dsp::bin_average(&x, *bins)?;
                let rate = *bins as f64 * fs / x.len() as f64;
                one_file(
                    &io.out,
                    io::series_bytes(rate, &y),
                    json!({ "bins": y.len() }),
                )
            }
        }
    };
    let r = ctx.dsp(name, &input, parameters, body)?;
    print_result(&format!("dsp-{name}"), &r);
    Ok(())
}

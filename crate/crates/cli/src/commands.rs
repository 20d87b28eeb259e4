//! The four workflows: simulate, fit, gsi and denoise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tlens::counting::{self, GValue, GapReason, SnrReport, TimeTrace};
use tlens::fitting::{self, Covariance, FitPoint, FitSpec, Param, ProfileOptions, Termination, TimescaleProfiles};
use tlens::{LensModel, LensParams};

use crate::config::{InitMode, RunConfig};
use crate::error::{CliError, CliResult};
use crate::plot::{plot, Series, Style, AUX_COLOR, DATA_COLOR, MODEL_COLOR};
use crate::trace_io::{load_trace, save_trace};

/// Files written by a command.
#[derive(Debug, Default)]
pub struct Outputs {
    pub files: Vec<PathBuf>,
}

fn prepare_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn poisson_errors(counts: &[u64]) -> Vec<f64> {
    counts.iter().map(|&c| (c as f64).sqrt()).collect()
}

fn as_f64(counts: &[u64]) -> Vec<f64> {
    counts.iter().map(|&c| c as f64).collect()
}

/// Simulates a counting trace and writes `trace.csv` (and `trace.svg`).
pub fn simulate(config: &RunConfig, out: &Path, csv_only: bool) -> CliResult<Outputs> {
    prepare_dir(out)?;
    let trace = counting::simulate(&config.source, &config.scenario, &config.lens)?;
    let mut outputs = Outputs::default();
    let csv_path = out.join("trace.csv");
    save_trace(&csv_path, &trace)?;
    outputs.files.push(csv_path);
    if !csv_only {
        let svg = out.join("trace.svg");
        let (c, err) = (as_f64(&trace.c), poisson_errors(&trace.c));
        plot(
            &svg,
            "Coincidence counts",
            "t (s)",
            "counts per bin",
            &[Series {
                label: "coincidences",
                x: &trace.t,
                y: &c,
                err: Some(&err),
                style: Style::Points,
                color: DATA_COLOR,
            }],
        )?;
        outputs.files.push(svg);
    }
    Ok(outputs)
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub params: LensParams,
    pub amplitude: f64,
    pub t_on: f64,
    pub free: Vec<String>,
    /// One-sigma errors of the free parameters; null when the curvature is singular.
    pub errors: BTreeMap<String, Option<f64>>,
    pub chi2: f64,
    pub dof: usize,
    pub reduced_chi2: f64,
    pub n_evals: usize,
    pub converged: bool,
    pub termination: Termination,
    pub init: FitPoint,
    pub covariance: Option<Covariance>,
    pub profiles: Option<TimescaleProfiles>,
}

fn baseline_mean(trace: &TimeTrace, t_on: f64) -> f64 {
    let n = trace.baseline_len(t_on).max(1).min(trace.len());
    trace.c[..n].iter().sum::<u64>() as f64 / n as f64
}

/// Fits the trace and writes `fit_report.json` (and `fit_overlay.svg`).
/// A fit that exhausts its budget still writes its best point, then fails
/// with a numerical error.
pub fn fit(config: &RunConfig, trace_path: &Path, out: &Path, csv_only: bool) -> CliResult<(Outputs, FitReport)> {
    let trace = load_trace(trace_path, config.source.bin_width)?;
    prepare_dir(out)?;
    let scenario = config.scenario;
    let init = match config.fit.init {
        InitMode::Heuristic => {
            // Parameters held fixed keep their configured values.
            let mut guess = fitting::initial_guess(&trace, &scenario, &config.lens)?;
            let configured = FitPoint { lens: config.lens, ..guess };
            for p in Param::LENS.into_iter().filter(|p| !config.fit.free.contains(p)) {
                guess.set(p, configured.get(p));
            }
            guess
        }
        InitMode::Config => FitPoint {
            lens: config.lens,
            amplitude: baseline_mean(&trace, scenario.t_on),
            t_on: scenario.t_on,
        },
    };
    let spec = FitSpec {
        free: config.fit.free.clone(),
        init,
        bounds: config.fit.bounds.resolve(scenario.t_on),
        weights: config.fit.weights,
        max_evals: config.fit.max_evals,
        scenario,
    };
    let result = fitting::fit(&trace, &spec)?;
    let profiles = if config.fit.profile {
        let options = ProfileOptions {
            grid_points: config.fit.profile_points,
            span: config.fit.profile_span,
        };
        Some(fitting::profile_timescales(&trace, &spec, &result, &options)?)
    } else {
        None
    };
    let report = FitReport {
        params: result.params,
        amplitude: result.amplitude,
        t_on: result.t_on,
        free: result.free.iter().map(|p| p.name().to_string()).collect(),
        errors: result.free.iter().map(|&p| (p.name().to_string(), result.sigma(p))).collect(),
        chi2: result.chi2,
        dof: result.dof,
        reduced_chi2: result.reduced_chi2(),
        n_evals: result.n_evals,
        converged: result.converged,
        termination: result.termination,
        init,
        covariance: result.covariance.clone(),
        profiles,
    };
    let mut outputs = Outputs::default();
    let json = out.join("fit_report.json");
    write_json(&json, &report)?;
    outputs.files.push(json);
    if !csv_only {
        let model: Vec<f64> = LensModel::default()
            .trace(&spec.scenario_at(result.t_on), &result.params, &trace.t)?
            .iter()
            .map(|t| result.amplitude * t)
            .collect();
        let svg = out.join("fit_overlay.svg");
        let (c, err) = (as_f64(&trace.c), poisson_errors(&trace.c));
        plot(
            &svg,
            "Coincidence counts and fitted model",
            "t (s)",
            "counts per bin",
            &[
                Series {
                    label: "data",
                    x: &trace.t,
                    y: &c,
                    err: Some(&err),
                    style: Style::Points,
                    color: DATA_COLOR,
                },
                Series {
                    label: "model",
                    x: &trace.t,
                    y: &model,
                    err: None,
                    style: Style::Line,
                    color: MODEL_COLOR,
                },
            ],
        )?;
        outputs.files.push(svg);
    }
    if !result.converged {
        return Err(CliError::Numerical(format!(
            "fit did not converge within {} model evaluations; best point written to {}",
            config.fit.max_evals,
            out.join("fit_report.json").display()
        )));
    }
    Ok((outputs, report))
}

/// Windowed g_{s-i}; writes `gsi.csv` (and `gsi.svg`). Windows with no
/// singles or no coincidences are kept in the CSV with empty values and a
/// flag.
pub fn gsi(config: &RunConfig, trace_path: &Path, out: &Path, csv_only: bool) -> CliResult<Outputs> {
    let trace = load_trace(trace_path, config.source.bin_width)?;
    prepare_dir(out)?;
    let windows = counting::g_si(&trace, &config.source, config.output.g_window)?;
    let gaps = windows.iter().filter(|w| w.g().is_none()).count();
    if gaps > 0 {
        log::warn!("{gaps} g windows are undefined and flagged in the output");
    }
    let mut outputs = Outputs::default();
    let csv_path = out.join("gsi.csv");
    write_csv(
        &csv_path,
        &["t_start", "bins", "g", "sigma", "flag"],
        windows.iter().map(|w| {
            let (g, s, flag) = match w.value {
                GValue::Defined { g, sigma } => (g.to_string(), sigma.to_string(), String::new()),
                GValue::Gap(GapReason::ZeroSingles) => (String::new(), String::new(), "zero_singles".into()),
                GValue::Gap(GapReason::ZeroCoincidences) => (String::new(), String::new(), "zero_coincidences".into()),
            };
            vec![w.t_start.to_string(), w.bins.to_string(), g, s, flag]
        }),
    )?;
    outputs.files.push(csv_path);
    if !csv_only {
        let defined: Vec<_> = windows.iter().filter_map(|w| Some((w.t_start, w.g()?, w.sigma()?))).collect();
        let x: Vec<f64> = defined.iter().map(|d| d.0).collect();
        let y: Vec<f64> = defined.iter().map(|d| d.1).collect();
        let e: Vec<f64> = defined.iter().map(|d| d.2).collect();
        let svg = out.join("gsi.svg");
        plot(
            &svg,
            "Signal-idler correlation",
            "t (s)",
            "g_si",
            &[Series {
                label: "g_si",
                x: &x,
                y: &y,
                err: Some(&e),
                style: Style::Points,
                color: DATA_COLOR,
            }],
        )?;
        outputs.files.push(svg);
    }
    Ok(outputs)
}

#[derive(Debug, Serialize)]
pub struct DenoiseReport {
    pub g_baseline: f64,
    /// Background counts per bin subtracted from both routes.
    pub noise_per_bin: f64,
    pub snr: Option<SnrReport>,
}

/// Recovers the true signal trace; writes `denoised.csv`,
/// `denoise_report.json` (and `denoised.svg`).
pub fn denoise(config: &RunConfig, trace_path: &Path, out: &Path, csv_only: bool) -> CliResult<(Outputs, DenoiseReport)> {
    let trace = load_trace(trace_path, config.source.bin_width)?;
    prepare_dir(out)?;
    let d = counting::denoise(&trace, &config.source, config.scenario.t_on)?;
    let report = DenoiseReport {
        g_baseline: d.g_baseline,
        noise_per_bin: config.source.noise_rate_s * trace.bin_width,
        snr: d.snr,
    };
    let mut outputs = Outputs::default();
    let csv_path = out.join("denoised.csv");
    write_csv(
        &csv_path,
        &["t_s", "s_s", "s_t", "s_t_err"],
        (0..d.t.len()).map(|i| {
            let opt = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
            vec![d.t[i].to_string(), d.s_s[i].to_string(), opt(d.s_t[i]), opt(d.s_t_err[i])]
        }),
    )?;
    outputs.files.push(csv_path);
    let json = out.join("denoise_report.json");
    write_json(&json, &report)?;
    outputs.files.push(json);
    if !csv_only {
        let svg = out.join("denoised.svg");
        let raw = as_f64(&d.s_s);
        plot(
            &svg,
            "Signal singles: raw and recovered from coincidences",
            "t (s)",
            "counts per bin",
            &[
                Series {
                    label: "raw singles",
                    x: &d.t,
                    y: &raw,
                    err: None,
                    style: Style::Points,
                    color: AUX_COLOR,
                },
                Series {
                    label: "recovered signal",
                    x: &d.t,
                    y: &d.s_t,
                    err: Some(&d.s_t_err),
                    style: Style::Points,
                    color: DATA_COLOR,
                },
            ],
        )?;
        outputs.files.push(svg);
    }
    Ok((outputs, report))
}

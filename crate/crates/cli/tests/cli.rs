use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tlens_cli::trace_io::load_trace;

fn tlens(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tlens"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_valid_svg(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(doc.root_element().tag_name().name(), "svg");
}

fn mean(v: &[u64]) -> f64 {
    v.iter().sum::<u64>() as f64 / v.len() as f64
}

/// Runs `simulate` into `dir/sim` and loads the trace.
fn simulate(dir: &Path, config: &Path, extra: &[&str]) -> (PathBuf, tlens::TimeTrace) {
    let out = dir.join("sim");
    let mut args = vec!["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    assert_ok(&tlens(&args, &[]));
    let path = out.join("trace.csv");
    let trace = load_trace(&path, 0.1).unwrap();
    (path, trace)
}

const SHORT_PUMP_ON: &str = "[scenario]\nt_on = 10.0\nduration = 60.0\n";

#[test]
fn simulate_writes_csv_and_valid_svg_with_drop_at_shutter() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), SHORT_PUMP_ON);
    let (csv, trace) = simulate(dir.path(), &config, &[]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("t_s,s_i,s_s,c\n") && text.ends_with('\n'));
    assert_eq!(trace.len(), 600);
    let base = mean(&trace.c[..100]);
    assert!((base - 1200.0).abs() < 3.0 * (1200.0f64 / 100.0).sqrt() * 1.5, "{base}");
    assert!(mean(&trace.c[500..]) < 0.9 * base);
    assert_valid_svg(&dir.path().join("sim/trace.svg"));
}

#[test]
fn zero_phase_gives_flat_baseline() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &format!("{SHORT_PUMP_ON}[lens]\ntheta_th = 0.0\ntheta_s = 0.0\n"));
    let (_, trace) = simulate(dir.path(), &config, &["--csv-only"]);
    let (before, after) = (mean(&trace.c[..100]), mean(&trace.c[100..]));
    // Both means are Poisson averages of 1200; 5 sigma bounds.
    assert!((before - 1200.0).abs() < 5.0 * (1200.0f64 / 100.0).sqrt());
    assert!((after - 1200.0).abs() < 5.0 * (1200.0f64 / 500.0).sqrt());
    assert!(!dir.path().join("sim/trace.svg").exists());
}

#[test]
fn pump_off_scenario_recovers() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "[scenario]\nt_on = 5.0\nt_off = 65.0\nduration = 200.0\n");
    let (_, trace) = simulate(dir.path(), &config, &["--csv-only"]);
    let at_off = mean(&trace.c[600..650]);
    let late = mean(&trace.c[1900..]);
    assert!(late > at_off + 50.0, "at t_off {at_off}, late {late}");
}

#[test]
fn simulation_is_deterministic_and_seed_overrides_apply() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), SHORT_PUMP_ON);
    let run = |sub: &str, args: &[&str], env: &[(&str, &str)]| {
        let out = dir.path().join(sub);
        let mut all = vec!["simulate", "--config", config.to_str().unwrap(), "--csv-only", "--out", out.to_str().unwrap()];
        all.extend_from_slice(args);
        assert_ok(&tlens(&all, env));
        std::fs::read(out.join("trace.csv")).unwrap()
    };
    let a = run("a", &[], &[]);
    let b = run("b", &[], &[]);
    assert_eq!(a, b);
    let c = run("c", &["--seed", "5"], &[]);
    assert_ne!(a, c);
    let d = run("d", &[], &[("TLENS__SOURCE__SEED", "5")]);
    assert_eq!(c, d);
}

#[test]
fn validation_failures_exit_with_code_2() {
    let dir = TempDir::new().unwrap();
    let bad_key = write_config(dir.path(), "[source]\nrep_rat = 1.0\n");
    let out = tlens(&["simulate", "--config", bad_key.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rep_rat"));

    let bad_value = write_config(dir.path(), "[lens]\nc_r = 1.5\n");
    assert_eq!(tlens(&["simulate", "--config", bad_value.to_str().unwrap()], &[]).status.code(), Some(2));

    let good = write_config(dir.path(), SHORT_PUMP_ON);
    let no_trace = tlens(&["gsi", "--config", good.to_str().unwrap()], &[]);
    assert_eq!(no_trace.status.code(), Some(2));

    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "t_s,s_i,s_s,c\n0,1,1,1\n0.1,1,1,-4\n").unwrap();
    let out = tlens(&["gsi", "--config", good.to_str().unwrap(), "--trace", csv.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let bad_env = tlens(&["simulate", "--config", good.to_str().unwrap()], &[("TLENS__LENS__THETA", "1")]);
    assert_eq!(bad_env.status.code(), Some(2));

    assert_eq!(tlens(&["simulate"], &[]).status.code(), Some(2));
}

#[test]
fn io_failures_exit_with_code_4() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(tlens(&["simulate", "--config", missing.to_str().unwrap()], &[]).status.code(), Some(4));
    let config = write_config(dir.path(), SHORT_PUMP_ON);
    let missing_trace = dir.path().join("nope.csv");
    let out = tlens(&["gsi", "--config", config.to_str().unwrap(), "--trace", missing_trace.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(4));
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn run_fit(dir: &Path, config: &Path, trace: &Path, sub: &str) -> (Output, PathBuf) {
    let out = dir.join(sub);
    let o = tlens(
        &["fit", "--config", config.to_str().unwrap(), "--trace", trace.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    );
    (o, out)
}

fn rel(report: &serde_json::Value, key: &str, truth: f64) -> f64 {
    (report["params"][key].as_f64().unwrap() / truth - 1.0).abs()
}

#[test]
fn fit_round_trip_thermal_only() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        "[scenario]\nt_on = 10.0\nduration = 60.0\n\
         [lens]\ntheta_th = 0.8\ntheta_s = 0.0\nt_th = 2.0\nk = 0.0\nc_r = 1.0\n\
         [fit]\nfree = [\"theta_th\", \"t_th\", \"amplitude\"]\ninit = \"heuristic\"\n",
    );
    let (trace, _) = simulate(dir.path(), &config, &["--csv-only"]);
    let (out, res) = run_fit(dir.path(), &config, &trace, "fit");
    assert_ok(&out);
    let report = read_json(&res.join("fit_report.json"));
    assert!(report["converged"].as_bool().unwrap());
    assert!(rel(&report, "theta_th", 0.8) < 0.05, "{report}");
    assert!(rel(&report, "t_th", 2.0) < 0.1, "{report}");
    assert!(report["errors"]["t_th"].as_f64().unwrap() > 0.0);
    assert_valid_svg(&res.join("fit_overlay.svg"));
}

#[test]
fn fit_round_trip_six_parameters() {
    let dir = TempDir::new().unwrap();
    let truth = [("theta_th", 2.0), ("theta_s", 3.0), ("t_th", 1.0), ("t_s", 30.0), ("k", 0.02), ("c_r", 0.4)];
    let lens: String = truth.iter().map(|(k, v)| format!("{k} = {v:?}\n")).collect();
    let config = write_config(dir.path(), &format!("[lens]\n{lens}"));
    let (trace, _) = simulate(dir.path(), &config, &["--csv-only"]);
    let (out, res) = run_fit(dir.path(), &config, &trace, "fit");
    assert_ok(&out);
    let report = read_json(&res.join("fit_report.json"));
    for (key, value) in truth {
        let tol = if matches!(key, "theta_th" | "theta_s" | "t_th") { 0.10 } else { 0.25 };
        assert!(rel(&report, key, value) < tol, "{key}: {}", report["params"][key]);
    }
}

#[test]
fn fit_round_trip_reduced_model_within_error_bars() {
    // Soret amplitude fixed at 0 in both data and fit.
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        "[scenario]\nt_on = 10.0\nduration = 120.0\n\
         [lens]\ntheta_th = 1.0\ntheta_s = 0.0\nt_th = 2.0\nk = 0.03\nc_r = 0.5\n\
         [fit]\nfree = [\"theta_th\", \"t_th\", \"k\", \"c_r\", \"amplitude\"]\ninit = \"config\"\n",
    );
    let (trace, _) = simulate(dir.path(), &config, &["--csv-only"]);
    let (out, res) = run_fit(dir.path(), &config, &trace, "fit");
    assert_ok(&out);
    let report = read_json(&res.join("fit_report.json"));
    for (key, truth) in [("theta_th", 1.0), ("t_th", 2.0), ("k", 0.03), ("c_r", 0.5)] {
        let est = report["params"][key].as_f64().unwrap();
        let sigma = report["errors"][key].as_f64().unwrap();
        assert!((est - truth).abs() < 4.0 * sigma, "{key}: {est} ± {sigma}");
    }
}

#[test]
fn fit_is_deterministic_and_reports_budget_exhaustion() {
    let dir = TempDir::new().unwrap();
    let text = "[scenario]\nt_on = 10.0\nduration = 40.0\n\
                [lens]\ntheta_th = 0.6\ntheta_s = 0.0\nk = 0.0\nc_r = 1.0\n\
                [fit]\nfree = [\"theta_th\", \"t_th\", \"amplitude\"]\n";
    let config = write_config(dir.path(), text);
    let (trace, _) = simulate(dir.path(), &config, &["--csv-only"]);
    let (a, ra) = run_fit(dir.path(), &config, &trace, "a");
    let (b, rb) = run_fit(dir.path(), &config, &trace, "b");
    assert_ok(&a);
    assert_ok(&b);
    assert_eq!(
        std::fs::read(ra.join("fit_report.json")).unwrap(),
        std::fs::read(rb.join("fit_report.json")).unwrap()
    );

    let starved = write_config(dir.path(), &format!("{text}max_evals = 3\n"));
    let (out, res) = run_fit(dir.path(), &starved, &trace, "starved");
    assert_eq!(out.status.code(), Some(3));
    let report = read_json(&res.join("fit_report.json"));
    assert!(!report["converged"].as_bool().unwrap());
    assert_eq!(report["termination"], "budget_exhausted");
}

fn read_gsi(path: &Path) -> Vec<(f64, Option<f64>, String)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[2].parse().ok(), rec[4].to_string())
        })
        .collect()
}

#[test]
fn gsi_constant_transmission_is_flat_at_inverse_mu() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &format!("{SHORT_PUMP_ON}[lens]\ntheta_th = 0.0\ntheta_s = 0.0\n[output]\ng_window = 50\n"),
    );
    let (trace, _) = simulate(dir.path(), &config, &["--csv-only"]);
    let out = dir.path().join("g");
    assert_ok(&tlens(
        &["gsi", "--config", config.to_str().unwrap(), "--trace", trace.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    ));
    let rows = read_gsi(&out.join("gsi.csv"));
    assert_eq!(rows.len(), 12);
    // 1/μ = 24; each window holds ~60000 coincidences, so σ_g ≈ 0.1.
    for (_, g, flag) in &rows {
        assert!(flag.is_empty());
        assert!((g.unwrap() - 24.0).abs() < 0.6, "{g:?}");
    }
    assert_valid_svg(&out.join("gsi.svg"));
}

#[test]
fn gsi_flags_zero_coincidence_windows() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "[output]\ng_window = 1\n");
    let csv = dir.path().join("t.csv");
    std::fs::write(&csv, "t_s,s_i,s_s,c\n0,1000,1000,10\n0.1,1000,1000,0\n0.2,0,1000,0\n").unwrap();
    let out = dir.path().join("g");
    assert_ok(&tlens(
        &["gsi", "--config", config.to_str().unwrap(), "--trace", csv.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    ));
    let rows = read_gsi(&out.join("gsi.csv"));
    assert!(rows[0].1.is_some());
    assert_eq!((rows[1].1, rows[1].2.as_str()), (None, "zero_coincidences"));
    assert_eq!((rows[2].1, rows[2].2.as_str()), (None, "zero_singles"));
}

#[test]
fn gsi_two_channel_simulation_varies_by_factor_two() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        "[scenario]\nt_on = 5.0\nduration = 60.0\n\
         [source]\nm_singles = 0.05\n\
         [lens]\ntheta_th = 1.5\ntheta_s = 1.0\n\
         [output]\ng_window = 20\n",
    );
    let (trace, _) = simulate(dir.path(), &config, &["--csv-only"]);
    let out = dir.path().join("g");
    assert_ok(&tlens(
        &["gsi", "--config", config.to_str().unwrap(), "--trace", trace.to_str().unwrap(), "--out", out.to_str().unwrap(), "--csv-only"],
        &[],
    ));
    let g: Vec<f64> = read_gsi(&out.join("gsi.csv")).iter().filter_map(|r| r.1).collect();
    let (lo, hi) = g.iter().fold((f64::MAX, f64::MIN), |a, &v| (a.0.min(v), a.1.max(v)));
    assert!(hi / lo > 2.0, "g range {lo}..{hi}");
}

#[test]
fn denoise_reports_snr_gain_near_g() {
    let dir = TempDir::new().unwrap();
    // Noise at 10x the signal singles rate (720 per bin): 7200 per bin.
    let config = write_config(dir.path(), &format!("{SHORT_PUMP_ON}[source]\nnoise_rate_s = 72000.0\n"));
    let (trace, _) = simulate(dir.path(), &config, &["--csv-only"]);
    let out = dir.path().join("d");
    let o = tlens(
        &["denoise", "--config", config.to_str().unwrap(), "--trace", trace.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    );
    assert_ok(&o);
    let report = read_json(&out.join("denoise_report.json"));
    let g = report["g_baseline"].as_f64().unwrap();
    let ratio = report["snr"]["ratio"].as_f64().unwrap();
    assert!((g - 24.0).abs() < 2.0, "{g}");
    assert!((ratio / g - 1.0).abs() < 0.3, "ratio {ratio}, g {g}");
    let text = std::fs::read_to_string(out.join("denoised.csv")).unwrap();
    assert!(text.starts_with("t_s,s_s,s_t,s_t_err\n"));
    assert_eq!(text.lines().count(), 601);
    assert_valid_svg(&out.join("denoised.svg"));
}

#[test]
fn shipped_example_config_is_the_default_run() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pump_on.toml");
    let shipped = tlens_cli::RunConfig::load(&path).unwrap();
    let default = tlens_cli::RunConfig::from_toml_str("", Vec::new()).unwrap();
    assert_eq!(shipped, default);
}

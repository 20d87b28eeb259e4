//! Run configuration: a TOML file with sections `[source]`, `[lens]`,
//! `[scenario]`, `[fit]` and `[output]`, overridable from the environment.
//!
//! Units are SI: rates in 1/s, times in s, phases in rad. Every section and
//! key is optional and defaults to the standard operating point. Unknown
//! keys are rejected.
//!
//! An environment variable `TLENS__SECTION__KEY=value` replaces one key.
//! Deeper tables are reached with more segments, for example
//! `TLENS__FIT__BOUNDS__T_TH="[0.1, 20]"`. Values are parsed as TOML and fall
//! back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tlens::counting::CountingConfig;
use tlens::fitting::{Bounds, Param, ProfileOptions, Weighting, DEFAULT_MAX_EVALS};
use tlens::{LensParams, Scenario};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "TLENS__";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub source: CountingConfig,
    pub lens: LensParams,
    pub scenario: Scenario,
    pub fit: FitSection,
    pub output: OutputSection,
}

/// Where a fit starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Derived from the shape of the trace.
    #[default]
    Heuristic,
    /// The `[lens]` values, with the baseline mean as amplitude.
    Config,
}

/// Per-parameter overrides of the default bounds, as `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub theta_th: Option<(f64, f64)>,
    pub theta_s: Option<(f64, f64)>,
    pub t_th: Option<(f64, f64)>,
    pub t_s: Option<(f64, f64)>,
    pub k: Option<(f64, f64)>,
    pub c_r: Option<(f64, f64)>,
    pub amplitude: Option<(f64, f64)>,
    pub t_on: Option<(f64, f64)>,
}

impl BoundsSection {
    pub fn resolve(&self, t_on: f64) -> Bounds {
        let d = Bounds::around(t_on);
        Bounds {
            theta_th: self.theta_th.unwrap_or(d.theta_th),
            theta_s: self.theta_s.unwrap_or(d.theta_s),
            t_th: self.t_th.unwrap_or(d.t_th),
            t_s: self.t_s.unwrap_or(d.t_s),
            k: self.k.unwrap_or(d.k),
            c_r: self.c_r.unwrap_or(d.c_r),
            amplitude: self.amplitude.unwrap_or(d.amplitude),
            t_on: self.t_on.unwrap_or(d.t_on),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub free: Vec<Param>,
    pub weights: Weighting,
    pub max_evals: usize,
    pub init: InitMode,
    pub bounds: BoundsSection,
    /// Also compute timescale profiles.
    pub profile: bool,
    pub profile_points: usize,
    pub profile_span: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        let profile = ProfileOptions::default();
        let mut free = Param::LENS.to_vec();
        free.push(Param::Amplitude);
        Self {
            free,
            weights: Weighting::Poisson,
            max_evals: DEFAULT_MAX_EVALS,
            init: InitMode::Heuristic,
            bounds: BoundsSection::default(),
            profile: false,
            profile_points: profile.grid_points,
            profile_span: profile.span,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Skip SVG plots.
    pub csv_only: bool,
    /// Bins per g window.
    pub g_window: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            csv_only: false,
            g_window: 10,
        }
    }
}

impl RunConfig {
    /// Re-checks the invariants of every embedded type.
    pub fn validate(&self) -> CliResult<()> {
        self.source.validate()?;
        self.lens.validate()?;
        self.scenario.validate()?;
        if self.output.g_window == 0 {
            return Err(CliError::Validation("output.g_window must be at least 1".into()));
        }
        if self.fit.free.is_empty() {
            return Err(CliError::Validation("fit.free must name at least one parameter".into()));
        }
        if !(self.fit.profile_span > 1.0) {
            return Err(CliError::Validation(format!(
                "fit.profile_span must exceed 1, got {}",
                self.fit.profile_span
            )));
        }
        self.fit.bounds.resolve(self.scenario.t_on).validate()?;
        for d in self.source.diagnostics().into_iter().chain(self.lens.diagnostics()) {
            log::warn!("{d}");
        }
        Ok(())
    }

    /// Parses TOML text, applies environment overrides and validates.
    pub fn from_toml_str<I>(text: &str, env: I) -> CliResult<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        apply_env_overrides(&mut table, env)?;
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file with overrides from the process environment.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text, std::env::vars())
            .map_err(|e| match e {
                CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
                other => other,
            })
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_env_overrides<I>(table: &mut toml::Table, env: I) -> CliResult<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_lowercase()).collect();
        if path.len() < 2 || path.iter().any(|s| s.is_empty()) {
            return Err(CliError::Validation(format!(
                "environment override {key} must have the form {ENV_PREFIX}SECTION__KEY"
            )));
        }
        let (leaf, parents) = path.split_last().expect("at least two segments");
        let mut node = &mut *table;
        for p in parents {
            let entry = node
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry.as_table_mut().ok_or_else(|| {
                CliError::Validation(format!("environment override {key}: '{p}' is not a table"))
            })?;
        }
        node.insert(leaf.clone(), parse_env_value(&raw));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn empty_config_is_the_operating_point() {
        let c = RunConfig::from_toml_str("", no_env()).unwrap();
        assert_eq!(c.source.rep_rate, 8e7);
        assert_eq!(c.source.bin_width, 0.1);
        assert!((c.source.true_coincidences_per_bin(1.0) - 1200.0).abs() < 1e-9);
        assert!((c.lens.m - 0.61f64.powi(2) / 0.57f64.powi(2)).abs() < 1e-12);
        assert_eq!(c.scenario.t_on, 40.0);
        assert_eq!(c.scenario.t_off, f64::INFINITY);
    }

    #[test]
    fn sections_parse() {
        let text = r#"
            [source]
            seed = 7
            noise_rate_s = 1e5
            [lens]
            theta_th = 0.5
            [scenario]
            t_on = 10.0
            t_off = 50.0
            duration = 100.0
            [fit]
            free = ["theta_th", "t_th"]
            weights = "uniform"
            bounds = { t_th = [0.1, 5.0] }
            [output]
            dir = "results"
            g_window = 5
        "#;
        let c = RunConfig::from_toml_str(text, no_env()).unwrap();
        assert_eq!(c.source.seed, 7);
        assert_eq!(c.lens.theta_th, 0.5);
        assert_eq!(c.scenario.t_off, 50.0);
        assert_eq!(c.fit.free, vec![Param::ThetaTh, Param::TTh]);
        assert_eq!(c.fit.weights, Weighting::Uniform);
        assert_eq!(c.fit.bounds.resolve(10.0).t_th, (0.1, 5.0));
        assert_eq!(c.output.dir, PathBuf::from("results"));
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        for text in ["[source]\nrep_rat = 1.0", "[lenz]\nm = 1.0", "extra = 1", "[fit]\nfree = [\"m\"]"] {
            let err = RunConfig::from_toml_str(text, no_env()).unwrap_err();
            assert!(matches!(err, CliError::Validation(_)), "{text}");
        }
    }

    #[test]
    fn physical_invariants_are_revalidated() {
        for text in [
            "[source]\neta_i = 1.5",
            "[lens]\nt_th = -1.0",
            "[scenario]\nt_on = 50.0\nt_off = 20.0",
            "[output]\ng_window = 0",
        ] {
            assert!(RunConfig::from_toml_str(text, no_env()).is_err(), "{text}");
        }
    }

    #[test]
    fn environment_overrides() {
        let env = vec![
            ("TLENS__SOURCE__SEED".to_string(), "99".to_string()),
            ("TLENS__OUTPUT__DIR".to_string(), "elsewhere".to_string()),
            ("TLENS__FIT__BOUNDS__T_TH".to_string(), "[0.5, 4.0]".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let c = RunConfig::from_toml_str("[source]\nseed = 1", env).unwrap();
        assert_eq!(c.source.seed, 99);
        assert_eq!(c.output.dir, PathBuf::from("elsewhere"));
        assert_eq!(c.fit.bounds.t_th, Some((0.5, 4.0)));
        let bad = vec![("TLENS__SOURCE__NOPE".to_string(), "1".to_string())];
        assert!(RunConfig::from_toml_str("", bad).is_err());
        let malformed = vec![("TLENS__SEED".to_string(), "1".to_string())];
        assert!(RunConfig::from_toml_str("", malformed).is_err());
    }
}

//! Pulsed photon-pair counting chain and the estimators applied to it.
//!
//! Each laser pulse emits at most one pair with probability μ. The idler
//! heralds; the signal crosses the pumped sample with transmission T(t) and
//! meets an uncorrelated background of rate S_n. Counts are binned, and the
//! bin-level sampler draws them from the Poisson limit of the per-pulse
//! process: true coincidences, unheralded idlers, unheralded signal photons
//! and background clicks are independent Poisson streams, so every channel
//! has the right marginal and the right correlations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::lensmodel::{LensModel, LensParams, Scenario};

/// Pulse repetition rate of the pump laser (Hz).
pub const DEFAULT_REP_RATE: f64 = 8.0e7;
/// Counting bin width (s).
pub const DEFAULT_BIN_WIDTH: f64 = 0.1;
/// Detection efficiency of each arm.
pub const DEFAULT_EFFICIENCY: f64 = 0.06;
/// Coincidences per bin at the unpumped operating point.
pub const BASELINE_COINCIDENCES: f64 = 1200.0;
/// Above this pair probability the single-pair approximation is questionable.
pub const MU_WARNING_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountingConfig {
    /// Pulses per second.
    pub rep_rate: f64,
    /// Mean pairs per pulse.
    pub mu_pair: f64,
    pub eta_i: f64,
    /// Signal-arm efficiency at baseline (transmission 1).
    pub eta_s: f64,
    /// Uncorrelated background in the signal arm (counts/s).
    pub noise_rate_s: f64,
    /// Seconds per bin.
    pub bin_width: f64,
    pub seed: u64,
    /// Mode parameter seen by the singles channel, if it differs from the
    /// coincidence channel's `m`.
    pub m_singles: Option<f64>,
}

impl Default for CountingConfig {
    fn default() -> Self {
        Self {
            rep_rate: DEFAULT_REP_RATE,
            mu_pair: mu_for_coincidences(
                BASELINE_COINCIDENCES,
                DEFAULT_REP_RATE,
                DEFAULT_BIN_WIDTH,
                DEFAULT_EFFICIENCY,
                DEFAULT_EFFICIENCY,
            ),
            eta_i: DEFAULT_EFFICIENCY,
            eta_s: DEFAULT_EFFICIENCY,
            noise_rate_s: 0.0,
            bin_width: DEFAULT_BIN_WIDTH,
            seed: 0,
            m_singles: None,
        }
    }
}

/// Pair probability giving `per_bin` true coincidences per bin at T = 1.
pub fn mu_for_coincidences(per_bin: f64, rep_rate: f64, bin_width: f64, eta_i: f64, eta_s: f64) -> f64 {
    per_bin / (rep_rate * bin_width * eta_i * eta_s)
}

impl CountingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rep_rate", self.rep_rate),
            ("mu_pair", self.mu_pair),
            ("eta_i", self.eta_i),
            ("eta_s", self.eta_s),
            ("noise_rate_s", self.noise_rate_s),
            ("bin_width", self.bin_width),
        ] {
            ensure_finite(name, v)?;
        }
        if self.rep_rate <= 0.0 || self.bin_width <= 0.0 {
            return Err(Error::Invalid(format!(
                "rep_rate and bin_width must be positive (rep_rate={}, bin_width={})",
                self.rep_rate, self.bin_width
            )));
        }
        if !(self.mu_pair > 0.0 && self.mu_pair <= 1.0) {
            return Err(Error::Invalid(format!("mu_pair must lie in (0, 1], got {}", self.mu_pair)));
        }
        for (name, eta) in [("eta_i", self.eta_i), ("eta_s", self.eta_s)] {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1], got {eta}")));
            }
        }
        if self.noise_rate_s < 0.0 {
            return Err(Error::Invalid(format!(
                "noise_rate_s must be >= 0, got {}",
                self.noise_rate_s
            )));
        }
        if let Some(m) = self.m_singles {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Invalid(format!("m_singles must be positive, got {m}")));
            }
        }
        Ok(())
    }

    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.mu_pair > MU_WARNING_THRESHOLD {
            out.push(format!(
                "mu_pair={} exceeds {MU_WARNING_THRESHOLD}; multipair emission is not modelled",
                self.mu_pair
            ));
        }
        out
    }

    /// Pulses per bin.
    pub fn pulses_per_bin(&self) -> f64 {
        self.rep_rate * self.bin_width
    }

    /// Expected idler singles per bin.
    pub fn idler_per_bin(&self) -> f64 {
        self.pulses_per_bin() * self.mu_pair * self.eta_i
    }

    /// Expected true (pair) coincidences per bin at channel transmission `t`.
    pub fn true_coincidences_per_bin(&self, t: f64) -> f64 {
        self.idler_per_bin() * self.eta_s * t
    }

    /// Expected noise-induced accidental coincidences per bin.
    pub fn accidentals_per_bin(&self) -> f64 {
        self.noise_rate_s * self.bin_width * self.mu_pair * self.eta_i
    }

    /// Expected signal singles per bin at singles-channel transmission `t`.
    pub fn signal_per_bin(&self, t: f64) -> f64 {
        self.pulses_per_bin() * self.mu_pair * self.eta_s * t + self.noise_rate_s * self.bin_width
    }
}

/// Uniformly binned counting record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeTrace {
    /// Bin start times (s).
    pub t: Vec<f64>,
    pub s_i: Vec<u64>,
    pub s_s: Vec<u64>,
    pub c: Vec<u64>,
    pub bin_width: f64,
}

/// Allowed deviation of a timestamp from the uniform grid (s).
pub const TIMESTAMP_TOLERANCE: f64 = 1e-9;

impl TimeTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if self.s_i.len() != n || self.s_s.len() != n || self.c.len() != n {
            return Err(Error::Invalid(format!(
                "trace columns differ in length (t={}, s_i={}, s_s={}, c={})",
                n,
                self.s_i.len(),
                self.s_s.len(),
                self.c.len()
            )));
        }
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return Err(Error::Invalid(format!("bin_width must be positive, got {}", self.bin_width)));
        }
        if let Some(&t0) = self.t.first() {
            for (i, &t) in self.t.iter().enumerate() {
                let expected = t0 + i as f64 * self.bin_width;
                if !t.is_finite() || (t - expected).abs() > TIMESTAMP_TOLERANCE {
                    return Err(Error::Invalid(format!(
                        "timestamp {i} is {t}, expected {expected} on a uniform grid"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of leading bins that start before `t_on`.
    pub fn baseline_len(&self, t_on: f64) -> usize {
        self.t.partition_point(|&t| t < t_on)
    }

    /// Timestamps of `n` bins of width `bin_width` starting at 0.
    pub fn bin_starts(n: usize, bin_width: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * bin_width).collect()
    }
}

/// A simulated trace with the hidden channels kept for diagnostics.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub trace: TimeTrace,
    /// Pair coincidences in each bin.
    pub true_coincidences: Vec<u64>,
    /// Background clicks that fell in a heralded pulse.
    pub accidentals: Vec<u64>,
    /// Background clicks in the signal arm.
    pub noise: Vec<u64>,
    /// Transmission seen by the coincidence channel.
    pub transmission_c: Vec<f64>,
    /// Transmission seen by the singles channel.
    pub transmission_s: Vec<f64>,
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

/// Channel transmissions at the bin starts of a scenario.
pub fn channel_transmissions(
    model: &LensModel,
    config: &CountingConfig,
    scenario: &Scenario,
    p: &LensParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_bins = (scenario.duration / config.bin_width + 1e-9).floor() as usize;
    let times = TimeTrace::bin_starts(n_bins, config.bin_width);
    let t_c = model.trace(scenario, p, &times)?;
    let t_s = match config.m_singles {
        Some(m) if m != p.m => {
            let ps = LensParams { m, ..*p };
            model.trace(scenario, &ps, &times)?
        }
        _ => t_c.clone(),
    };
    Ok((t_c, t_s))
}

fn sample_bins(config: &CountingConfig, t_c: &[f64], t_s: &[f64], rng: &mut ChaCha8Rng) -> Simulation {
    let n = t_c.len();
    let heralds = config.idler_per_bin();
    let signal_pairs = config.pulses_per_bin() * config.mu_pair * config.eta_s;
    let noise_mean = config.noise_rate_s * config.bin_width;
    let herald_prob = config.mu_pair * config.eta_i;

    let mut sim = Simulation {
        trace: TimeTrace {
            t: TimeTrace::bin_starts(n, config.bin_width),
            s_i: Vec::with_capacity(n),
            s_s: Vec::with_capacity(n),
            c: Vec::with_capacity(n),
            bin_width: config.bin_width,
        },
        true_coincidences: Vec::with_capacity(n),
        accidentals: Vec::with_capacity(n),
        noise: Vec::with_capacity(n),
        transmission_c: t_c.to_vec(),
        transmission_s: t_s.to_vec(),
    };
    for (&tc, &ts) in t_c.iter().zip(t_s) {
        let true_mean = heralds * config.eta_s * tc;
        let pairs = poisson(rng, true_mean);
        let idler_only = poisson(rng, heralds - true_mean);
        let signal_only = poisson(rng, (signal_pairs * ts - true_mean).max(0.0));
        let accidental = poisson(rng, noise_mean * herald_prob);
        let background = poisson(rng, noise_mean * (1.0 - herald_prob));
        sim.trace.s_i.push(pairs + idler_only);
        sim.trace.s_s.push(pairs + signal_only + accidental + background);
        sim.trace.c.push(pairs + accidental);
        sim.true_coincidences.push(pairs);
        sim.accidentals.push(accidental);
        sim.noise.push(accidental + background);
    }
    sim
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates a counting trace over the scenario, keeping hidden channels.
pub fn simulate_detailed(config: &CountingConfig, scenario: &Scenario, p: &LensParams) -> Result<Simulation> {
    config.validate()?;
    scenario.validate()?;
    p.validate()?;
    let model = LensModel::default();
    let (t_c, t_s) = channel_transmissions(&model, config, scenario, p)?;
    let mut rng = rng_for(config.seed, 0);
    Ok(sample_bins(config, &t_c, &t_s, &mut rng))
}

/// Samples one bin per entry of the given channel transmissions, which must
/// have equal lengths.
pub fn simulate_transmissions(config: &CountingConfig, t_c: &[f64], t_s: &[f64]) -> Result<Simulation> {
    config.validate()?;
    if t_c.len() != t_s.len() {
        return Err(Error::Contract(format!(
            "transmission lengths differ: {} vs {}",
            t_c.len(),
            t_s.len()
        )));
    }
    if let Some(t) = t_c.iter().chain(t_s).find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::Domain(format!("transmission must be finite and non-negative, got {t}")));
    }
    let mut rng = rng_for(config.seed, 0);
    Ok(sample_bins(config, t_c, t_s, &mut rng))
}

/// Bin-level Poisson simulation; deterministic given `config.seed`.
pub fn simulate(config: &CountingConfig, scenario: &Scenario, p: &LensParams) -> Result<TimeTrace> {
    Ok(simulate_detailed(config, scenario, p)?.trace)
}

/// Simulates `n` independent realisations sharing one model evaluation.
/// Realisation `i` draws from stream `i` of the configured seed.
pub fn simulate_ensemble(
    config: &CountingConfig,
    scenario: &Scenario,
    p: &LensParams,
    n: usize,
) -> Result<Vec<Simulation>> {
    config.validate()?;
    scenario.validate()?;
    p.validate()?;
    let (t_c, t_s) = channel_transmissions(&LensModel::default(), config, scenario, p)?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(config.seed, i as u64);
            sample_bins(config, &t_c, &t_s, &mut rng)
        })
        .collect())
}

/// Counts of one bin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BinCounts {
    pub s_i: u64,
    pub s_s: u64,
    pub c: u64,
}

/// Exact per-pulse Bernoulli simulation of `n_bins` bins at fixed channel
/// transmissions, with round(R·Δ) pulses per bin. Slow; used as the oracle
/// for the bin-level sampler.
pub fn simulate_pulses(config: &CountingConfig, t_c: f64, t_s: f64, n_bins: usize) -> Result<Vec<BinCounts>> {
    config.validate()?;
    let pulses = config.pulses_per_bin().round() as u64;
    let sig_heralded = config.eta_s * t_c;
    let sig_unheralded = if config.eta_i < 1.0 {
        (config.eta_s * (t_s - config.eta_i * t_c) / (1.0 - config.eta_i)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let p_noise = config.noise_rate_s / config.rep_rate;
    let mut rng = rng_for(config.seed, 0);
    Ok((0..n_bins)
        .map(|_| {
            let mut bin = BinCounts::default();
            for _ in 0..pulses {
                let pair = rng.random::<f64>() < config.mu_pair;
                let idler = pair && rng.random::<f64>() < config.eta_i;
                let pair_signal = pair && {
                    let p = if idler { sig_heralded } else { sig_unheralded };
                    rng.random::<f64>() < p
                };
                let noise = p_noise > 0.0 && rng.random::<f64>() < p_noise;
                let signal = pair_signal || noise;
                bin.s_i += idler as u64;
                bin.s_s += signal as u64;
                bin.c += (idler && signal) as u64;
            }
            bin
        })
        .collect())
}

/// Why a g window has no value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapReason {
    ZeroSingles,
    ZeroCoincidences,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GValue {
    Defined { g: f64, sigma: f64 },
    Gap(GapReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GWindow {
    /// Start time of the first bin in the window (s).
    pub t_start: f64,
    pub bins: usize,
    pub value: GValue,
}

impl GWindow {
    pub fn g(&self) -> Option<f64> {
        match self.value {
            GValue::Defined { g, .. } => Some(g),
            GValue::Gap(_) => None,
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        match self.value {
            GValue::Defined { sigma, .. } => Some(sigma),
            GValue::Gap(_) => None,
        }
    }
}

/// Signal–idler correlation g = C·R/(S_i·S_s) from rates aggregated over
/// consecutive windows of `window` bins (the last window may be shorter).
///
/// The error treats C, S_i − C and S_s − C as independent Poisson counts.
pub fn g_si(trace: &TimeTrace, config: &CountingConfig, window: usize) -> Result<Vec<GWindow>> {
    if window == 0 {
        return Err(Error::Contract("g window must span at least one bin".into()));
    }
    trace.validate()?;
    let n = trace.len();
    Ok((0..n)
        .step_by(window)
        .map(|start| {
            let end = (start + window).min(n);
            let sum = |v: &[u64]| v[start..end].iter().sum::<u64>() as f64;
            let (c, s_i, s_s) = (sum(&trace.c), sum(&trace.s_i), sum(&trace.s_s));
            let span = (end - start) as f64 * trace.bin_width;
            let value = if s_i == 0.0 || s_s == 0.0 {
                GValue::Gap(GapReason::ZeroSingles)
            } else if c == 0.0 {
                GValue::Gap(GapReason::ZeroCoincidences)
            } else {
                let g = c * config.rep_rate * span / (s_i * s_s);
                // Coincidences are a subset of both singles counts, so the
                // shared Poisson component partly cancels in the ratio.
                let rel_var = 1.0 / c - 1.0 / s_i - 1.0 / s_s + 2.0 * c / (s_i * s_s);
                let sigma = g * rel_var.max(0.0).sqrt();
                GValue::Defined { g, sigma }
            };
            GWindow {
                t_start: trace.t[start],
                bins: end - start,
                value,
            }
        })
        .collect())
}

/// Expected accidental coincidences per bin, S_i·S_s/(R·Δ), in counts.
pub fn accidentals(trace: &TimeTrace, config: &CountingConfig) -> Vec<f64> {
    trace
        .s_i
        .iter()
        .zip(&trace.s_s)
        .map(|(&si, &ss)| si as f64 * ss as f64 / (config.rep_rate * trace.bin_width))
        .collect()
}

/// A ratio estimate with its one-sigma error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
}

/// Klyshko efficiency of the signal arm, ΣC/ΣS_i over the bins before
/// `t_on`, with a binomial error. Measures channel transmission times
/// detector efficiency.
pub fn klyshko_efficiency(trace: &TimeTrace, t_on: f64) -> Result<Estimate> {
    let nb = trace.baseline_len(t_on);
    if nb == 0 {
        return Err(Error::Contract(format!("no baseline bins before t_on={t_on}")));
    }
    let c: u64 = trace.c[..nb].iter().sum();
    let s_i: u64 = trace.s_i[..nb].iter().sum();
    if s_i == 0 {
        return Err(Error::Contract("baseline has no idler counts".into()));
    }
    let p = c as f64 / s_i as f64;
    Ok(Estimate {
        value: p,
        sigma: (p * (1.0 - p) / s_i as f64).sqrt(),
    })
}

/// Signal-to-background ratios of the two detection routes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    /// (S_s − S_n)/S_n.
    pub singles: f64,
    /// (C − C_acc)/C_acc with C_acc = S_i·S_n/R.
    pub coincidences: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoised {
    pub t: Vec<f64>,
    /// Estimated true signal singles per bin; NaN where the bin has no idler counts.
    pub s_t: Vec<f64>,
    pub s_t_err: Vec<f64>,
    /// Raw signal singles per bin.
    pub s_s: Vec<u64>,
    /// Pair correlation of the source from the baseline, background removed.
    pub g_baseline: f64,
    /// `None` when no background rate is configured.
    pub snr: Option<SnrReport>,
}

/// Recovers the true signal trace from heralded coincidences.
///
/// Per bin, X = C·R·Δ/S_i = g·S_t + S_n (in counts). The background per bin
/// S_n is taken from `config.noise_rate_s` (a calibrated background rate),
/// and g from the bins before `t_on` as (X̄ − S_n)/(S̄_s − S_n). Then
/// Ŝ_t = (X − S_n)/g.
pub fn denoise(trace: &TimeTrace, config: &CountingConfig, t_on: f64) -> Result<Denoised> {
    trace.validate()?;
    let nb = trace.baseline_len(t_on);
    if nb == 0 {
        return Err(Error::Contract(format!(
            "denoising needs baseline bins before t_on={t_on}"
        )));
    }
    let rd = config.rep_rate * trace.bin_width;
    let noise = config.noise_rate_s * trace.bin_width;
    let sum = |v: &[u64]| v.iter().sum::<u64>() as f64;
    let (c_b, si_b, ss_b) = (sum(&trace.c[..nb]), sum(&trace.s_i[..nb]), sum(&trace.s_s[..nb]));
    if si_b == 0.0 {
        return Err(Error::Contract("baseline has no idler counts".into()));
    }
    let x_b = c_b * rd / si_b;
    let signal_b = ss_b / nb as f64 - noise;
    if signal_b <= 0.0 || x_b - noise <= 0.0 {
        return Err(Error::numerical(
            "baseline signal is not above the configured background",
            signal_b / noise.max(1e-300),
        ));
    }
    let g = (x_b - noise) / signal_b;

    let mut s_t = Vec::with_capacity(trace.len());
    let mut s_t_err = Vec::with_capacity(trace.len());
    for (&c, &si) in trace.c.iter().zip(&trace.s_i) {
        if si == 0 {
            s_t.push(f64::NAN);
            s_t_err.push(f64::NAN);
            continue;
        }
        let (c, si) = (c as f64, si as f64);
        let x = c * rd / si;
        s_t.push((x - noise) / g);
        let x_err = rd / si * (c.max(1.0) + c * c / si).sqrt();
        s_t_err.push(x_err / g);
    }

    let snr = (noise > 0.0).then(|| {
        let n = trace.len() as f64;
        let mean_ss = sum(&trace.s_s) / n;
        let mean_c = sum(&trace.c) / n;
        let acc = sum(&trace.s_i) / n * noise / rd;
        let singles = (mean_ss - noise) / noise;
        let coincidences = (mean_c - acc) / acc;
        SnrReport {
            singles,
            coincidences,
            ratio: coincidences / singles,
        }
    });

    Ok(Denoised {
        t: trace.t.clone(),
        s_t,
        s_t_err,
        s_s: trace.s_s.clone(),
        g_baseline: g,
        snr,
    })
}

/// Significance (in σ) of a mean shift between two segments, using their
/// empirical variances.
pub fn step_significance(before: &[f64], after: &[f64]) -> f64 {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var / n)
    };
    let (m0, v0) = stats(before);
    let (m1, v1) = stats(after);
    (m1 - m0).abs() / (v0 + v1).sqrt()
}

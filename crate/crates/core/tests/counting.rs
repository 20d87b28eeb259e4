use proptest::prelude::*;
use tlens::counting::{
    accidentals, denoise, g_si, klyshko_efficiency, simulate, simulate_detailed, simulate_ensemble, simulate_pulses,
    simulate_transmissions, step_significance, CountingConfig, TimeTrace,
};
use tlens::{LensParams, Scenario};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

fn as_f64(v: &[u64]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn no_phase() -> LensParams {
    LensParams {
        theta_th: 0.0,
        theta_s: 0.0,
        ..Default::default()
    }
}

/// |a − b| within `z` combined standard errors of two sample means.
fn means_agree(a: &[f64], b: &[f64], z: f64) -> bool {
    let se = (var(a) / a.len() as f64 + var(b) / b.len() as f64).sqrt();
    (mean(a) - mean(b)).abs() < z * se
}

/// Sample variances agree within `z` standard errors, using the Gaussian
/// approximation var(s²) ≈ 2σ⁴/(n − 1).
fn variances_agree(a: &[f64], b: &[f64], z: f64) -> bool {
    let (va, vb) = (var(a), var(b));
    let se = (2.0 * va * va / (a.len() as f64 - 1.0) + 2.0 * vb * vb / (b.len() as f64 - 1.0)).sqrt();
    (va - vb).abs() < z * se
}

#[test]
fn bin_sampler_agrees_with_per_pulse_oracle() {
    // 10⁵ pulses per bin in the small-μ regime, with background and
    // unequal channel transmissions.
    let config = CountingConfig {
        rep_rate: 1e6,
        mu_pair: 0.02,
        eta_i: 0.2,
        eta_s: 0.3,
        noise_rate_s: 2000.0,
        seed: 11,
        ..Default::default()
    };
    let n = 400;
    let (t_c, t_s) = (0.8, 0.9);
    let pulses = simulate_pulses(&config, t_c, t_s, n).unwrap();
    let bins = simulate_transmissions(&config, &vec![t_c; n], &vec![t_s; n]).unwrap().trace;
    let channels: [(&str, Vec<f64>, Vec<f64>); 3] = [
        ("s_i", pulses.iter().map(|b| b.s_i as f64).collect(), as_f64(&bins.s_i)),
        ("s_s", pulses.iter().map(|b| b.s_s as f64).collect(), as_f64(&bins.s_s)),
        ("c", pulses.iter().map(|b| b.c as f64).collect(), as_f64(&bins.c)),
    ];
    for (name, oracle, sampled) in &channels {
        assert!(means_agree(oracle, sampled, 3.0), "{name}: means {} vs {}", mean(oracle), mean(sampled));
        assert!(variances_agree(oracle, sampled, 3.0), "{name}: variances {} vs {}", var(oracle), var(sampled));
    }
}

#[test]
fn coincidence_rate_arithmetic() {
    let config = CountingConfig {
        mu_pair: 0.01,
        seed: 3,
        ..Default::default()
    };
    assert!((config.true_coincidences_per_bin(1.0) - 288.0).abs() < 1e-9);
    let trace = simulate(&config, &Scenario::pump_on(10.0, 100.0), &no_phase()).unwrap();
    let c = as_f64(&trace.c);
    let se = (288.0 / c.len() as f64).sqrt();
    assert!((mean(&c) - 288.0).abs() < 3.0 * se, "{}", mean(&c));
}

#[test]
fn simulation_is_bit_reproducible() {
    let config = CountingConfig {
        seed: 42,
        noise_rate_s: 1e4,
        ..Default::default()
    };
    let scenario = Scenario::pump_on(5.0, 30.0);
    let a = simulate(&config, &scenario, &LensParams::default()).unwrap();
    let b = simulate(&config, &scenario, &LensParams::default()).unwrap();
    assert_eq!(a, b);
    let ensemble = simulate_ensemble(&config, &scenario, &LensParams::default(), 2).unwrap();
    assert_eq!(ensemble[0].trace, a);
    assert_ne!(ensemble[1].trace, a);
}

#[test]
fn ideal_source_g_is_inverse_mu_with_calibrated_error_bars() {
    let scenario = Scenario::pump_on(10.0, 20.0);
    for mu in [0.002, 0.005, 0.01] {
        let config = CountingConfig {
            mu_pair: mu,
            seed: 7,
            ..Default::default()
        };
        let runs = simulate_ensemble(&config, &scenario, &no_phase(), 100).unwrap();
        let (g, sigma): (Vec<f64>, Vec<f64>) = runs
            .iter()
            .map(|r| {
                let w = g_si(&r.trace, &config, r.trace.len()).unwrap();
                (w[0].g().unwrap(), w[0].sigma().unwrap())
            })
            .unzip();
        let spread = var(&g).sqrt();
        let se = spread / (g.len() as f64).sqrt();
        assert!((mean(&g) - 1.0 / mu).abs() < 3.0 * se, "mu={mu}: mean g {} ± {se}", mean(&g));
        let ratio = spread / mean(&sigma);
        assert!((ratio - 1.0).abs() < 0.2, "mu={mu}: empirical/propagated sigma = {ratio}");
    }
}

#[test]
fn accidentals_match_uncorrelated_coincidences() {
    // Noise clicks are the only uncorrelated signal-arm events, so the
    // measured excess c − true follows S_i·S_n/(R·Δ).
    let config = CountingConfig {
        noise_rate_s: 72_000.0,
        seed: 5,
        ..Default::default()
    };
    let sim = simulate_detailed(&config, &Scenario::pump_on(10.0, 200.0), &LensParams::default()).unwrap();
    let excess: Vec<f64> = sim
        .trace
        .c
        .iter()
        .zip(&sim.true_coincidences)
        .map(|(&c, &t)| (c - t) as f64)
        .collect();
    let uncorrelated = TimeTrace {
        s_s: sim.noise.clone(),
        ..sim.trace.clone()
    };
    let predicted = accidentals(&uncorrelated, &config);
    let se = (var(&excess) / excess.len() as f64).sqrt();
    assert!((mean(&excess) - mean(&predicted)).abs() < 3.0 * se, "{} vs {}", mean(&excess), mean(&predicted));

    let quiet = CountingConfig { seed: 5, ..Default::default() };
    let sim = simulate_detailed(&quiet, &Scenario::pump_on(10.0, 50.0), &LensParams::default()).unwrap();
    assert_eq!(sim.trace.c, sim.true_coincidences);
    assert!(sim.accidentals.iter().all(|&a| a == 0));
}

#[test]
fn klyshko_recovers_channel_times_detector_efficiency() {
    let config = CountingConfig { seed: 9, ..Default::default() };
    let trace = simulate(&config, &Scenario::default(), &LensParams::default()).unwrap();
    let k = klyshko_efficiency(&trace, 40.0).unwrap();
    assert!((k.value - 0.06).abs() < 3.0 * k.sigma, "{k:?}");

    let n = 400;
    let dimmed = simulate_transmissions(&config, &vec![0.5; n], &vec![0.5; n]).unwrap().trace;
    let k = klyshko_efficiency(&dimmed, f64::INFINITY).unwrap();
    assert!((k.value - 0.03).abs() < 3.0 * k.sigma, "{k:?}");
    assert!(klyshko_efficiency(&dimmed, 0.0).is_err());
}

#[test]
fn denoise_is_unbiased_on_noiseless_traces() {
    let config = CountingConfig { seed: 21, ..Default::default() };
    let scenario = Scenario::pump_on(10.0, 60.0);
    let runs = simulate_ensemble(&config, &scenario, &LensParams::default(), 100).unwrap();
    let rel_bias: Vec<f64> = runs
        .iter()
        .map(|r| {
            let d = denoise(&r.trace, &config, scenario.t_on).unwrap();
            let truth: Vec<f64> = r.transmission_s.iter().map(|&t| config.signal_per_bin(t)).collect();
            let est: f64 = d.s_t.iter().sum();
            est / truth.iter().sum::<f64>() - 1.0
        })
        .collect();
    assert!(mean(&rel_bias).abs() < 0.01, "{}", mean(&rel_bias));

    // Without background the estimate tracks the raw singles.
    let d = denoise(&runs[0].trace, &config, scenario.t_on).unwrap();
    let diff: Vec<f64> = d.s_t.iter().zip(&d.s_s).map(|(&e, &s)| e - s as f64).collect();
    let se = (var(&diff) / diff.len() as f64).sqrt();
    assert!(mean(&diff).abs() < 3.0 * se, "{} ± {se}", mean(&diff));
    assert!(d.snr.is_none());
}

#[test]
fn heavy_noise_step_is_visible_only_after_denoising() {
    // Coincidences beat singles statistically by about sqrt(η_i/μ) once the
    // background dominates, so the source has a high-efficiency herald and
    // μ = 0.01. Background (2e6 per bin) is 400x the signal singles. The
    // step is T = 1 → 0.8 after 200 baseline bins, compared over 6 bins
    // either side.
    let config = CountingConfig {
        mu_pair: 0.01,
        eta_i: 0.9,
        noise_rate_s: 2e7,
        seed: 13,
        ..Default::default()
    };
    let t: Vec<f64> = (0..400).map(|i| if i < 200 { 1.0 } else { 0.8 }).collect();
    let trace = simulate_transmissions(&config, &t, &t).unwrap().trace;
    let d = denoise(&trace, &config, trace.t[200]).unwrap();
    let (before, after) = (194..200, 200..206);
    let denoised = step_significance(&d.s_t[before.clone()], &d.s_t[after.clone()]);
    let s_s = as_f64(&trace.s_s);
    let raw = step_significance(&s_s[before], &s_s[after]);
    assert!(denoised > 5.0, "denoised step at {denoised} sigma");
    assert!(raw < 3.0, "raw step at {raw} sigma");
}

fn arb_trace() -> impl Strategy<Value = TimeTrace> {
    (1usize..60).prop_flat_map(|n| {
        let counts = || proptest::collection::vec(0u64..100_000, n);
        (counts(), counts(), counts()).prop_map(move |(s_i, s_s, c)| TimeTrace {
            t: TimeTrace::bin_starts(n, 0.1),
            s_i,
            s_s,
            c,
            bin_width: 0.1,
        })
    })
}

proptest! {
    #[test]
    fn accidentals_are_non_negative(trace in arb_trace()) {
        let acc = accidentals(&trace, &CountingConfig::default());
        prop_assert_eq!(acc.len(), trace.len());
        prop_assert!(acc.iter().all(|&a| a >= 0.0 && a.is_finite()));
    }

    #[test]
    fn g_windows_cover_every_bin(trace in arb_trace(), window in 1usize..20) {
        let w = g_si(&trace, &CountingConfig::default(), window).unwrap();
        prop_assert_eq!(w.iter().map(|x| x.bins).sum::<usize>(), trace.len());
        for x in &w {
            if let (Some(g), Some(s)) = (x.g(), x.sigma()) {
                prop_assert!(g > 0.0 && g.is_finite());
                prop_assert!(s >= 0.0 && s.is_finite());
            }
        }
    }

    #[test]
    fn simulated_counts_follow_the_seed(seed in any::<u64>()) {
        let config = CountingConfig { seed, noise_rate_s: 1e3, ..Default::default() };
        let t = [1.0, 0.7, 0.4];
        let a = simulate_transmissions(&config, &t, &t).unwrap();
        let b = simulate_transmissions(&config, &t, &t).unwrap();
        prop_assert_eq!(&a.trace, &b.trace);
        for i in 0..t.len() {
            prop_assert!(a.trace.c[i] <= a.trace.s_s[i]);
            prop_assert_eq!(a.trace.c[i], a.true_coincidences[i] + a.accidentals[i]);
        }
    }
}

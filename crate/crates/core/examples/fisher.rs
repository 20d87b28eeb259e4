//! Expected parameter errors at a ground truth from the curvature of chi2
//! on noiseless expectation data.
//!
//! Usage: `cargo run --release --example fisher -- theta_th theta_s t_th t_s k c_r [fix_amplitude]`

use tlens::counting::{CountingConfig, TimeTrace};
use tlens::fitting::{fit, FitPoint, FitSpec, Param};
use tlens::{LensModel, LensParams, Scenario};

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let mut truth = LensParams::default();
    if args.len() >= 6 {
        truth.theta_th = args[0];
        truth.theta_s = args[1];
        truth.t_th = args[2];
        truth.t_s = args[3];
        truth.k = args[4];
        truth.c_r = args[5];
    }
    let fix_amplitude = args.get(6).is_some_and(|&v| v != 0.0);
    let duration = 340.0;
    let scenario = Scenario::pump_on(40.0, duration);
    let cfg = CountingConfig::default();
    let amplitude = cfg.true_coincidences_per_bin(1.0);
    let n = (duration / cfg.bin_width).round() as usize;
    let times = TimeTrace::bin_starts(n, cfg.bin_width);
    let t = LensModel::default().trace(&scenario, &truth, &times).expect("trace");
    let trace = TimeTrace {
        c: t.iter().map(|v| (amplitude * v).round() as u64).collect(),
        s_i: vec![1; n],
        s_s: vec![1; n],
        t: times,
        bin_width: cfg.bin_width,
    };
    let mut free = Param::LENS.to_vec();
    if !fix_amplitude {
        free.push(Param::Amplitude);
    }
    let init = FitPoint { lens: truth, amplitude, t_on: 40.0 };
    let mut spec = FitSpec::new(scenario, init, free);
    spec.max_evals = 60;
    let res = fit(&trace, &spec).expect("fit");
    for p in Param::LENS {
        let v = init.get(p);
        let s = res.sigma(p).unwrap_or(f64::NAN);
        println!("{p:>9} truth {v:>8.4} sigma {s:.4e} rel {:.3}", s / v);
    }
    if std::env::var("PROFILE").is_ok() {
        let span = 1.0 + res.sigma(Param::TTh).unwrap() / truth.t_th;
        let opts = tlens::fitting::ProfileOptions { grid_points: 3, span };
        let prof = tlens::fitting::profile_timescales(&trace, &spec, &res, &opts).expect("profile");
        println!("best {:.4}", res.chi2);
        for pr in &prof.profiles {
            println!("{:?} {:?} {:?}", pr.param, pr.values, pr.chi2);
        }
    }
}

//! Simulates a pump-on trace and fits all six lens parameters.
//!
//! Usage: `cargo run --release --example roundtrip -- seed [theta_th theta_s t_th t_s k c_r]`

use std::time::Instant;

use tlens::counting::{simulate, CountingConfig};
use tlens::fitting::{fit, initial_guess, FitSpec, Param};
use tlens::{LensParams, Scenario};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    let v: Vec<f64> = args.iter().skip(1).filter_map(|s| s.parse().ok()).collect();
    let mut truth = LensParams::default();
    if v.len() >= 6 {
        truth = LensParams { theta_th: v[0], theta_s: v[1], t_th: v[2], t_s: v[3], k: v[4], c_r: v[5], ..truth };
    }
    let scenario = Scenario::default();
    let config = CountingConfig { seed, ..Default::default() };
    let trace = simulate(&config, &scenario, &truth).expect("simulation");
    let init = initial_guess(&trace, &scenario, &truth).expect("initial guess");
    println!("init  {:?} A={:.1}", init.lens, init.amplitude);
    let mut free = Param::LENS.to_vec();
    free.push(Param::Amplitude);
    let spec = FitSpec::new(scenario, init, free);
    let start = Instant::now();
    let res = fit(&trace, &spec).expect("fit");
    println!("fit   {:?} A={:.1}", res.params, res.amplitude);
    println!(
        "chi2/dof {:.4} evals {} {:?} in {:.1} s",
        res.reduced_chi2(),
        res.n_evals,
        res.termination,
        start.elapsed().as_secs_f64()
    );
    let truth_pt = tlens::fitting::FitPoint { lens: truth, amplitude: res.amplitude, t_on: scenario.t_on };
    let r = tlens::fitting::residuals(&trace, &spec, &truth_pt).expect("residuals");
    println!("chi2 at truth {:.3} vs fit {:.3}", r.iter().map(|x| x * x).sum::<f64>(), res.chi2);
    for p in Param::LENS {
        let est = res.point().get(p);
        let tru = tlens::fitting::FitPoint { lens: truth, amplitude: 0.0, t_on: 0.0 }.get(p);
        println!("{p:>9} {est:>10.5} truth {tru:>8.4} rel {:+.3} sigma {:?}", est / tru - 1.0, res.sigma(p));
    }
}

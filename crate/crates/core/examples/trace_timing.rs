//! Times a 3400-point pump-on trace at the default parameters, with and
//! without the quadrature order check.
//!
//! Usage: `cargo run --release --example trace_timing -- [--no-decay] [--no-phase]`

use std::time::Instant;

use tlens::{LensModel, LensParams, Scenario};

fn main() {
    let scenario = Scenario::default();
    let mut p = LensParams::default();
    if std::env::args().any(|a| a == "--no-decay") {
        p.k = 0.0;
    }
    if std::env::args().any(|a| a == "--no-phase") {
        p.theta_th = 0.0;
        p.theta_s = 0.0;
    }
    let times: Vec<f64> = (0..3400).map(|i| i as f64 * 0.1).collect();
    let model = LensModel::default();
    for check in [true, false] {
        let model = model.clone().with_order_check(check);
        let start = Instant::now();
        let t = model.trace(&scenario, &p, &times).unwrap();
        println!(
            "order check {check}: {:.1} ms, T(end) = {:.6}, min T = {:.6}",
            start.elapsed().as_secs_f64() * 1e3,
            t[t.len() - 1],
            t.iter().cloned().fold(f64::INFINITY, f64::min)
        );
    }
}

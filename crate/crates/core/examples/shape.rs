//! Prints a pump-on transmission curve.
//!
//! Usage: `cargo run --release --example shape -- theta_th theta_s t_th t_s k c_r`

use tlens::{LensModel, LensParams};

fn main() {
    let a: Vec<f64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let mut p = LensParams::default();
    if a.len() >= 6 {
        p = LensParams { theta_th: a[0], theta_s: a[1], t_th: a[2], t_s: a[3], k: a[4], c_r: a[5], ..p };
    }
    let times = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 60.0, 100.0, 150.0, 200.0, 250.0, 300.0];
    let t = LensModel::default().pump_on_curve(&p, &times).expect("curve");
    for (a, b) in times.iter().zip(&t) {
        println!("{a:6.1} {b:.5}");
    }
}

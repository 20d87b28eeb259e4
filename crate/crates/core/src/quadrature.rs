//! Gauss–Legendre rules and Gauss–Kronrod adaptive integration.

use crate::error::{Error, Result};

/// Fixed-order Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes from Newton iteration on the three-term Legendre recurrence.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Legendre order must be positive");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    let (_, d) = legendre_with_derivative(n, x);
                    dp = d;
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights mapped onto [a, b].
    pub fn on_interval(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let nodes = self.nodes.iter().map(|x| mid + half * x).collect();
        let weights = self.weights.iter().map(|w| half * w).collect();
        (nodes, weights)
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        half * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

// Kronrod 15 / Gauss 7 abscissae and weights (QUADPACK qk15).
const XGK15: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK15: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG7: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Gauss–Kronrod 7/15 panel: (Kronrod estimate, |Kronrod − Gauss|).
pub fn gauss_kronrod_15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let fc = f(mid);
    let mut kronrod = WGK15[7] * fc;
    let mut gauss = WG7[3] * fc;
    for i in 0..7 {
        let dx = half * XGK15[i];
        let pair = f(mid - dx) + f(mid + dx);
        kronrod += WGK15[i] * pair;
        if i % 2 == 1 {
            gauss += WG7[i / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

/// Globally adaptive Gauss–Kronrod integration: bisect the panel with the
/// largest error estimate until the summed estimate falls below
/// `max(abs_tol, rel_tol·|I|)`.
pub fn adaptive_gk15<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_panels: usize,
) -> Result<Integral> {
    if a == b {
        return Ok(Integral {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
        });
    }
    let (v, e) = gauss_kronrod_15(&mut f, a, b);
    let mut panels = vec![(a, b, v, e)];
    let mut evaluations = 15;
    loop {
        let value: f64 = panels.iter().map(|p| p.2).sum();
        let error: f64 = panels.iter().map(|p| p.3).sum();
        if !value.is_finite() {
            return Err(Error::numerical("non-finite integrand", f64::INFINITY));
        }
        if error <= abs_tol.max(rel_tol * value.abs()) {
            return Ok(Integral {
                value,
                error,
                evaluations,
            });
        }
        if panels.len() >= max_panels {
            let achieved = if value != 0.0 { error / value.abs() } else { error };
            return Err(Error::numerical(
                "adaptive quadrature did not converge",
                achieved,
            ));
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("at least one panel");
        let (lo, hi, _, _) = panels.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gauss_kronrod_15(&mut f, lo, mid);
        let (v2, e2) = gauss_kronrod_15(&mut f, mid, hi);
        evaluations += 30;
        panels.push((lo, mid, v1, e1));
        panels.push((mid, hi, v2, e2));
    }
}

/// Abscissae of the 7-point Kronrod extension of 3-point Gauss, for the
/// vectorised incremental integrals in the lens model.
pub(crate) const XGK7: [f64; 4] = [
    0.960_491_268_708_020_3,
    0.774_596_669_241_483_4,
    0.434_243_749_346_802_6,
    0.0,
];
pub(crate) const WGK7: [f64; 4] = [
    0.104_656_226_026_467_3,
    0.268_488_089_868_333_4,
    0.401_397_414_775_962_2,
    0.450_916_538_658_474_1,
];
pub(crate) const WG3: [f64; 2] = [5.0 / 9.0, 8.0 / 9.0];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_rule_is_exact_for_polynomials() {
        let rule = GaussLegendre::new(5);
        for deg in 0..10 {
            let got = rule.integrate(-1.0, 2.0, |x| x.powi(deg));
            let want = (2f64.powi(deg + 1) - (-1f64).powi(deg + 1)) / (deg + 1) as f64;
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "deg {deg}");
        }
        let w: f64 = GaussLegendre::new(256).weights.iter().sum();
        assert!((w - 2.0).abs() < 1e-13);
    }

    #[test]
    fn kronrod7_rule_exactness() {
        // K7 integrates polynomials to degree 11 exactly, G3 to degree 5.
        for deg in 0..12 {
            let f = |x: f64| x.powi(deg);
            let mut k = WGK7[3] * f(0.0);
            let mut g = WG3[1] * f(0.0);
            for i in 0..3 {
                k += WGK7[i] * (f(XGK7[i]) + f(-XGK7[i]));
            }
            g += WG3[0] * (f(XGK7[1]) + f(-XGK7[1]));
            let want = if deg % 2 == 0 { 2.0 / (deg + 1) as f64 } else { 0.0 };
            assert!((k - want).abs() < 1e-14, "K7 deg {deg}");
            if deg < 6 {
                assert!((g - want).abs() < 1e-14, "G3 deg {deg}");
            }
        }
    }

    #[test]
    fn adaptive_integrates_peaked_function() {
        let r = adaptive_gk15(|x| 1.0 / (1e-4 + x * x), -1.0, 1.0, 1e-12, 0.0, 500).unwrap();
        let want = 2.0 * (1.0f64 / 1e-2).atan() / 1e-2;
        assert!(((r.value - want) / want).abs() < 1e-11);
    }

    #[test]
    fn adaptive_reports_failure_with_achieved_tolerance() {
        let err = adaptive_gk15(|x| 1.0 / x.abs().sqrt(), -1.0, 1.0, 1e-14, 0.0, 4).unwrap_err();
        assert!(matches!(err, Error::Numerical { achieved, .. } if achieved > 1e-14));
    }
}

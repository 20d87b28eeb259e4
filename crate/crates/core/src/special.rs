//! Exponential integral and the saturating logarithmic integral built on it.
//!
//! `e1` is the hot-path evaluator used when building phase grids: a power
//! series below 1 and per-octave Chebyshev fits of `x·eˣ·E₁(x)` above. The
//! fits are generated once from [`e1_reference`], which is the slow
//! series / continued-fraction evaluator and serves as the test oracle.

use std::f64::consts::PI;
use std::sync::OnceLock;

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const SERIES_TERMS: usize = 20;
const OCTAVES: usize = 10;
const PIECES: usize = 2 * OCTAVES;
const CHEB_DEGREE: usize = 17;

/// Reference E₁(x) for x > 0: alternating power series for x ≤ 1, modified
/// Lentz continued fraction otherwise. Accurate to a few ulp but slow.
pub fn e1_reference(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::INFINITY;
    }
    if x <= 1.0 {
        let mut sum = 0.0;
        let mut fact = 1.0;
        let mut k = 1.0;
        loop {
            fact *= -x / k;
            let term = fact / k;
            sum += term;
            if term.abs() < 1e-18 * sum.abs().max(1e-300) {
                break;
            }
            k += 1.0;
        }
        -EULER_GAMMA - x.ln() - sum
    } else {
        scaled_e1_fraction(x) * (-x).exp()
    }
}

/// eˣ·E₁(x) for x > 1 by the modified Lentz continued fraction. Finite
/// where E₁ itself underflows.
fn scaled_e1_fraction(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -((i * i) as f64);
        b += 2.0;
        d = 1.0 / (an * d + b);
        c = b + an / c;
        let del = c * d;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

struct E1Tables {
    /// Coefficients of Σ_{k≥1} (−1)^{k+1} x^{k−1}/(k·k!).
    series: [f64; SERIES_TERMS],
    /// Chebyshev coefficients of x·eˣ·E₁(x) on half-octaves
    /// [2^j, 1.5·2^j] and [1.5·2^j, 2^{j+1}].
    pieces: [[f64; CHEB_DEGREE + 1]; PIECES],
}

fn tables() -> &'static E1Tables {
    static TABLES: OnceLock<E1Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut series = [0.0; SERIES_TERMS];
        let mut fact = 1.0;
        for (i, coef) in series.iter_mut().enumerate() {
            let k = (i + 1) as f64;
            fact *= k;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            *coef = sign / (k * fact);
        }

        let n = CHEB_DEGREE + 1;
        let mut pieces = [[0.0; CHEB_DEGREE + 1]; PIECES];
        for (i, coefs) in pieces.iter_mut().enumerate() {
            let (lo, hi) = piece_bounds(i);
            let samples: Vec<f64> = (0..n)
                .map(|k| {
                    let u = (PI * (k as f64 + 0.5) / n as f64).cos();
                    let x = 0.5 * (lo + hi) + 0.5 * (hi - lo) * u;
                    x * scaled_e1_fraction(x)
                })
                .collect();
            for (m, c) in coefs.iter_mut().enumerate() {
                let s: f64 = samples
                    .iter()
                    .enumerate()
                    .map(|(k, f)| f * (PI * m as f64 * (k as f64 + 0.5) / n as f64).cos())
                    .sum();
                *c = 2.0 * s / n as f64;
            }
            coefs[0] *= 0.5;
        }
        E1Tables { series, pieces }
    })
}

fn piece_bounds(i: usize) -> (f64, f64) {
    let base = (1u64 << (i / 2)) as f64;
    if i % 2 == 0 {
        (base, 1.5 * base)
    } else {
        (1.5 * base, 2.0 * base)
    }
}

#[inline]
fn clenshaw(coefs: &[f64], u: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &c in coefs.iter().skip(1).rev() {
        let b0 = 2.0 * u * b1 - b2 + c;
        b2 = b1;
        b1 = b0;
    }
    u * b1 - b2 + coefs[0]
}

/// Fast exponential integral E₁(x) for x ≥ 0. Returns +∞ at 0 and NaN for
/// negative or NaN input.
#[inline]
pub fn e1(x: f64) -> f64 {
    if !(x > 0.0) {
        return if x == 0.0 { f64::INFINITY } else { f64::NAN };
    }
    let t = tables();
    if x <= 1.0 {
        let mut p = 0.0;
        for &c in t.series.iter().rev() {
            p = p * x + c;
        }
        -EULER_GAMMA - x.ln() + x * p
    } else if x < 745.0 {
        // Piece index from the binary exponent and leading mantissa bit.
        let bits = x.to_bits();
        let octave = (((bits >> 52) & 0x7ff) as usize) - 1023;
        let upper = ((bits >> 51) & 1) as usize;
        let i = 2 * octave + upper;
        let base = (1u64 << octave) as f64;
        // Each piece spans half an octave: u = (x − centre)/(base/4).
        let centre = base * (1.25 + 0.5 * upper as f64);
        let u = (x - centre) * 4.0 / base;
        clenshaw(&t.pieces[i], u) * (-x).exp() / x
    } else {
        0.0
    }
}

/// J(a, S) = ∫₁^S (1 − e^{−a/σ})/σ dσ = ln S − E₁(a/S) + E₁(a), for a ≥ 0, S ≥ 1.
///
/// `e1_a` may carry a precomputed E₁(a) so grid builders can hoist it out of
/// the time loop.
pub fn saturating_log_integral(a: f64, s: f64, e1_a: Option<f64>) -> f64 {
    if a == 0.0 || s <= 1.0 {
        return 0.0;
    }
    saturating_log_integral_with(a, s, s.ln(), 1.0 / s, e1_a)
}

/// [`saturating_log_integral`] with ln S and 1/S supplied by the caller.
#[inline]
pub(crate) fn saturating_log_integral_with(a: f64, s: f64, ln_s: f64, inv_s: f64, e1_a: Option<f64>) -> f64 {
    if a == 0.0 || s <= 1.0 {
        return 0.0;
    }
    if s - 1.0 <= 1e-3 {
        // Short interval: the integrand is smooth on the scale of the step.
        const NODES: [f64; 4] = [
            0.183_434_642_495_649_8,
            0.525_532_409_916_329,
            0.796_666_477_413_626_7,
            0.960_289_856_497_536_3,
        ];
        const WEIGHTS: [f64; 4] = [
            0.362_683_783_378_362,
            0.313_706_645_877_887_3,
            0.222_381_034_453_374_5,
            0.101_228_536_290_376_3,
        ];
        let half = 0.5 * ln_s;
        let g = |u: f64| -(-a * (-u).exp()).exp_m1();
        return half
            * NODES
                .iter()
                .zip(WEIGHTS.iter())
                .map(|(&x, &w)| w * (g(half * (1.0 + x)) + g(half * (1.0 - x))))
                .sum::<f64>();
    }
    if a <= 0.5 {
        // Σ_{n≥1} (−1)^{n+1} aⁿ (1 − S⁻ⁿ)/(n·n!); S − 1 > 1e-3 here so 1 − S⁻ⁿ
        // is well conditioned for n ≥ 2.
        let mut sum = a * -(-ln_s).exp_m1();
        let mut pow_fact = a;
        let mut inv_pow = inv_s;
        let mut n = 2.0;
        let mut sign = -1.0;
        loop {
            pow_fact *= a / n;
            inv_pow *= inv_s;
            let term = pow_fact * (1.0 - inv_pow) / n;
            sum += sign * term;
            if term < 1e-18 * sum.abs() {
                break;
            }
            sign = -sign;
            n += 1.0;
        }
        return sum;
    }
    let x = a * inv_s;
    if x > 45.0 {
        // E₁(a/S) and E₁(a) are below 1e-21 of ln S.
        return ln_s;
    }
    let e1_a = e1_a.unwrap_or_else(|| e1(a));
    ln_s - e1(x) + e1_a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_matches_tabulated_values() {
        // Abramowitz & Stegun table 5.1
        let cases = [
            (0.5, 0.559_773_594_776_160_8),
            (1.0, 0.219_383_934_395_520_3),
            (2.0, 0.048_900_510_708_061_12),
            (5.0, 0.001_148_295_591_275_325_6),
            (10.0, 4.156_968_929_685_324e-6),
        ];
        for (x, want) in cases {
            let got = e1_reference(x);
            assert!(((got - want) / want).abs() < 1e-14, "E1({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn fast_e1_tracks_reference() {
        let mut worst: f64 = 0.0;
        let mut x = 1e-6;
        while x < 700.0 {
            let r = e1_reference(x);
            let err = ((e1(x) - r) / r).abs();
            assert!(err.is_finite(), "E1({x}) = {}", e1(x));
            worst = worst.max(err);
            x *= 1.013;
        }
        assert!(worst < 2e-14, "worst relative error {worst:e}");
        // Up to the cutoff the value may be subnormal but never NaN.
        let mut x = 500.0;
        while x < 745.0 {
            assert!(e1(x).is_finite() && e1(x) >= 0.0, "E1({x}) = {}", e1(x));
            x += 0.37;
        }
    }

    #[test]
    fn e1_edge_values() {
        assert_eq!(e1(0.0), f64::INFINITY);
        assert!(e1(-1.0).is_nan());
        assert_eq!(e1(800.0), 0.0);
    }

    #[test]
    fn log_integral_branches_agree_at_switch_points() {
        // Series branch (a ≤ 0.5) against the E₁ difference just above it.
        for &s in &[1.002, 1.5, 3.0, 201.0] {
            let below = saturating_log_integral(0.5, s, None);
            let above = saturating_log_integral(0.5 + 1e-12, s, None);
            assert!(((below - above) / below).abs() < 1e-10);
            // Short-interval branch against the general one.
            let short = saturating_log_integral(2.0, 1.0 + 1e-3, None);
            let long = saturating_log_integral(2.0, 1.0 + 1e-3 + 1e-13, None);
            assert!(((short - long) / short).abs() < 1e-8);
        }
    }

    #[test]
    fn log_integral_large_argument_limit() {
        // For a → ∞ the saturating factor is 1 and J → ln S.
        let s: f64 = 7.0;
        assert!((saturating_log_integral(2000.0, s, None) - s.ln()).abs() < 1e-14);
    }
}

//! Time-resolved thermal-lens phase and the on-axis probe transmission.
//!
//! The pump induces a radial phase made of a fast thermal term and a slow
//! Soret term. Each term is
//!
//! ```text
//! φ(g,t) = (θ/t_c)·[ c_r·I₁(t) + (1−c_r)·e^{−kt}·∫₀ᵗ e^{kt'} f(t') dt' ]
//! f(t')  = (1 − exp[−2mg/(1+2t'/t_c)]) / (1+2t'/t_c)
//! ```
//!
//! with I₁ = ∫₀ᵗ f. The far-field on-axis transmission is
//! `T = (1+V²)·|∫₀^∞ exp[−(1+iV)g − iφ(g,t)] dg|²`, normalised so that T = 1
//! without pump.

use std::sync::Arc;

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::quadrature::{adaptive_gk15, GaussLegendre, WG3, WGK7, XGK7};
use crate::special::{e1, saturating_log_integral, saturating_log_integral_with};

/// Upper limit of the radial integral; the integrand is bounded by e^{−g}.
pub const G_MAX: f64 = 30.0;
/// Default Gauss–Legendre order of the radial integral.
pub const DEFAULT_ORDER: usize = 200;
/// Relative tolerance of the decaying-population integral.
pub const DECAY_REL_TOL: f64 = 1e-9;
/// Allowed relative change of T when the radial order is doubled.
pub const ORDER_CHECK_TOL: f64 = 1e-7;

/// Beam radii measured at the sample, in millimetres.
pub const SIGNAL_RADIUS_MM: f64 = 0.61;
pub const PUMP_RADIUS_MM: f64 = 0.57;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LensParams {
    /// Thermal phase amplitude (rad).
    pub theta_th: f64,
    /// Soret phase amplitude (rad).
    pub theta_s: f64,
    /// Thermal characteristic time (s).
    pub t_th: f64,
    /// Soret characteristic time (s).
    pub t_s: f64,
    /// Photochemical decay rate (1/s).
    pub k: f64,
    /// Residual equilibrium concentration fraction.
    pub c_r: f64,
    /// Squared beam-radius ratio w_s²/w_p².
    pub m: f64,
    /// Geometry parameter of the diffraction integral.
    pub v_geom: f64,
}

impl Default for LensParams {
    fn default() -> Self {
        Self {
            theta_th: 0.4,
            theta_s: 0.3,
            t_th: 2.0,
            t_s: 60.0,
            k: 0.01,
            c_r: 0.8,
            m: BeamGeometry::default().m(),
            v_geom: 1.0,
        }
    }
}

impl LensParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta_th", self.theta_th),
            ("theta_s", self.theta_s),
            ("t_th", self.t_th),
            ("t_s", self.t_s),
            ("k", self.k),
            ("c_r", self.c_r),
            ("m", self.m),
            ("v_geom", self.v_geom),
        ] {
            ensure_finite(name, v)?;
        }
        if self.t_th <= 0.0 || self.t_s <= 0.0 {
            return Err(Error::Invalid(format!(
                "characteristic times must be positive (t_th={}, t_s={})",
                self.t_th, self.t_s
            )));
        }
        if self.k < 0.0 {
            return Err(Error::Invalid(format!("k must be >= 0, got {}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.c_r) {
            return Err(Error::Invalid(format!("c_r must lie in [0,1], got {}", self.c_r)));
        }
        if self.m <= 0.0 {
            return Err(Error::Invalid(format!("m must be positive, got {}", self.m)));
        }
        Ok(())
    }

    /// Non-fatal diagnostics about physically unexpected parameter sets.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.t_s < self.t_th {
            out.push(format!(
                "Soret time t_s={} is shorter than thermal time t_th={}",
                self.t_s, self.t_th
            ));
        }
        out
    }

    fn terms(&self) -> [PhaseTerm; 2] {
        [
            PhaseTerm {
                amp: self.theta_th,
                t_c: self.t_th,
            },
            PhaseTerm {
                amp: self.theta_s,
                t_c: self.t_s,
            },
        ]
    }
}

/// Signal and pump beam radii at the sample (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamGeometry {
    pub w_s: f64,
    pub w_p: f64,
}

impl Default for BeamGeometry {
    fn default() -> Self {
        Self {
            w_s: SIGNAL_RADIUS_MM,
            w_p: PUMP_RADIUS_MM,
        }
    }
}

impl BeamGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_s > 0.0 && self.w_p > 0.0) || !self.w_s.is_finite() || !self.w_p.is_finite() {
            return Err(Error::Invalid(format!(
                "beam radii must be positive (w_s={}, w_p={})",
                self.w_s, self.w_p
            )));
        }
        Ok(())
    }

    pub fn m(&self) -> f64 {
        (self.w_s * self.w_s) / (self.w_p * self.w_p)
    }

    /// Checks that the geometry reproduces `params.m` to 1e-12 relative.
    pub fn check_consistent(&self, params: &LensParams) -> Result<()> {
        self.validate()?;
        let m = self.m();
        if ((m - params.m) / m).abs() > 1e-12 {
            return Err(Error::Invalid(format!(
                "beam radii give m={m}, lens parameters carry m={}",
                params.m
            )));
        }
        Ok(())
    }
}

/// Characteristic times used after the pump is switched off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxTimes {
    pub t_th: f64,
    pub t_s: f64,
}

/// Pump shutter schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub t_on: f64,
    /// `f64::INFINITY` for pump-on-only runs.
    pub t_off: f64,
    pub duration: f64,
    pub relax_params: Option<RelaxTimes>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self::pump_on(40.0, 340.0)
    }
}

impl Scenario {
    pub fn pump_on(t_on: f64, duration: f64) -> Self {
        Self {
            t_on,
            t_off: f64::INFINITY,
            duration,
            relax_params: None,
        }
    }

    pub fn pump_on_off(t_on: f64, t_off: f64, duration: f64) -> Self {
        Self {
            t_on,
            t_off,
            duration,
            relax_params: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("t_on", self.t_on)?;
        ensure_finite("duration", self.duration)?;
        if self.t_off.is_nan() {
            return Err(Error::Domain("t_off must not be NaN".into()));
        }
        let ok = 0.0 <= self.t_on
            && self.t_on < self.t_off
            && (self.t_off <= self.duration || self.t_off == f64::INFINITY);
        if !ok {
            return Err(Error::Invalid(format!(
                "scenario needs 0 <= t_on < t_off <= duration (or t_off = inf); got t_on={}, t_off={}, duration={}",
                self.t_on, self.t_off, self.duration
            )));
        }
        if let Some(r) = self.relax_params {
            if !(r.t_th > 0.0 && r.t_s > 0.0 && r.t_th.is_finite() && r.t_s.is_finite()) {
                return Err(Error::Invalid(format!(
                    "relaxation times must be positive (t_th={}, t_s={})",
                    r.t_th, r.t_s
                )));
            }
        }
        Ok(())
    }

    fn relax_times(&self, p: &LensParams) -> RelaxTimes {
        self.relax_params.unwrap_or(RelaxTimes {
            t_th: p.t_th,
            t_s: p.t_s,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct PhaseTerm {
    amp: f64,
    t_c: f64,
}

#[inline]
fn saturating_response(a: f64, inv_s: f64) -> f64 {
    let x = a * inv_s;
    if x > 0.25 {
        (1.0 - (-x).exp()) * inv_s
    } else {
        -(-x).exp_m1() * inv_s
    }
}

/// One bracketed term of the phase with generic amplitude and time constant.
///
/// `g` is r²/w_s² and `t` the time since the pump was switched on. The
/// c_r part uses the closed form in E₁; the decaying part is integrated
/// adaptively with e^{k(t'−t)} evaluated as a single exponent.
pub fn phase_component(g: f64, t: f64, amp: f64, t_c: f64, k: f64, c_r: f64, m: f64) -> Result<f64> {
    for (name, v) in [("g", g), ("t", t), ("amp", amp), ("t_c", t_c), ("k", k), ("c_r", c_r), ("m", m)] {
        ensure_finite(name, v)?;
    }
    if g < 0.0 || t < 0.0 || t_c <= 0.0 || k < 0.0 || m <= 0.0 || !(0.0..=1.0).contains(&c_r) {
        return Err(Error::Domain(format!(
            "phase_component needs g>=0, t>=0, t_c>0, k>=0, m>0, 0<=c_r<=1 (g={g}, t={t}, t_c={t_c}, k={k}, m={m}, c_r={c_r})"
        )));
    }
    if t == 0.0 || g == 0.0 || amp == 0.0 {
        return Ok(0.0);
    }
    let a = 2.0 * m * g;
    let s = 1.0 + 2.0 * t / t_c;
    let steady = 0.5 * t_c * saturating_log_integral(a, s, None);
    let decaying = if k == 0.0 {
        steady
    } else if c_r == 1.0 {
        0.0
    } else {
        adaptive_gk15(
            |tp| {
                let inv_s = 1.0 / (1.0 + 2.0 * tp / t_c);
                (k * (tp - t)).exp() * saturating_response(a, inv_s)
            },
            0.0,
            t,
            DECAY_REL_TOL,
            1e-300,
            4096,
        )?
        .value
    };
    Ok(amp / t_c * (c_r * steady + (1.0 - c_r) * decaying))
}

/// Thermal plus Soret phase; both terms share k, c_r and m.
pub fn phase_total(g: f64, t: f64, p: &LensParams) -> Result<f64> {
    p.validate()?;
    p.terms()
        .iter()
        .map(|term| phase_component(g, t, term.amp, term.t_c, p.k, p.c_r, p.m))
        .sum()
}

fn transmission(v: f64, nodes: &[f64], weights: &[f64], phase: impl Fn(usize) -> f64) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (j, (&g, &w)) in nodes.iter().zip(weights).enumerate() {
        let (sin, cos) = (v * g + phase(j)).sin_cos();
        acc += w * (-g).exp() * Complex64::new(cos, -sin);
    }
    (1.0 + v * v) * acc.norm_sqr()
}

/// Normalised on-axis probe transmission `t` seconds after the pump is
/// switched on, using the scalar phase path. The radial integral is
/// evaluated at the default order and checked against twice that order.
pub fn intensity(t: f64, p: &LensParams) -> Result<f64> {
    ensure_finite("t", t)?;
    if t < 0.0 {
        return Err(Error::Domain(format!("intensity needs t >= 0, got {t}")));
    }
    p.validate()?;
    let eval = |order: usize| -> Result<f64> {
        let (nodes, weights) = GaussLegendre::new(order).on_interval(0.0, G_MAX);
        let phases = nodes
            .iter()
            .map(|&g| phase_total(g, t, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(transmission(p.v_geom, &nodes, &weights, |j| phases[j]))
    };
    let coarse = eval(DEFAULT_ORDER)?;
    let fine = eval(2 * DEFAULT_ORDER)?;
    let rel = ((coarse - fine) / fine).abs();
    if rel > ORDER_CHECK_TOL {
        return Err(Error::numerical("radial quadrature order check failed", rel));
    }
    Ok(coarse)
}

/// Radial phase sampled on the quadrature nodes at a sorted set of times.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    times: Vec<f64>,
    n_nodes: usize,
    /// Node-major: `values[j * times.len() + n]`.
    values: Vec<f64>,
}

impl PhaseGrid {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn get(&self, node: usize, time_index: usize) -> f64 {
        self.values[node * self.times.len() + time_index]
    }

    pub fn node_count(&self) -> usize {
        self.n_nodes
    }
}

const NODE_BLOCK: usize = 25;
const MAX_BISECTIONS: u32 = 48;

/// Reusable evaluator holding the radial quadrature rule.
///
/// A trace costs one phase-grid build (closed form for the c_r part,
/// incremental Kronrod panels between consecutive sample times for the
/// decaying part) plus one radial sum per sample time.
#[derive(Debug, Clone)]
pub struct LensModel {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    check_order: bool,
}

impl Default for LensModel {
    fn default() -> Self {
        Self::new(DEFAULT_ORDER)
    }
}

impl LensModel {
    pub fn new(order: usize) -> Self {
        let (nodes, weights) = GaussLegendre::new(order).on_interval(0.0, G_MAX);
        Self {
            nodes,
            weights,
            check_order: true,
        }
    }

    /// Enables or disables the per-trace radial order-doubling check.
    pub fn with_order_check(mut self, enabled: bool) -> Self {
        self.check_order = enabled;
        self
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Total phase on the radial nodes at sorted `times` since pump-on.
    pub fn phase_grid(&self, p: &LensParams, times: &[f64]) -> Result<PhaseGrid> {
        p.validate()?;
        check_sorted_nonnegative(times)?;
        let mut parts = Vec::with_capacity(2);
        for term in p.terms() {
            if term.amp == 0.0 {
                continue;
            }
            let steady = self.steady_grid(term.t_c, p.m, times);
            let decaying = if p.k > 0.0 && p.c_r < 1.0 {
                Some(self.decaying_grid(term.t_c, p.k, p.m, times)?)
            } else {
                None
            };
            parts.push((term.amp, steady, decaying));
        }
        let parts: Vec<TermGrids<'_>> = parts
            .iter()
            .map(|(amp, s, d)| TermGrids {
                amp: *amp,
                steady: s,
                decaying: d.as_deref(),
            })
            .collect();
        Ok(self.combine(times, p.c_r, &parts))
    }

    /// Unit-amplitude c_r part (1/t_c)·I₁ on the nodes, node-major.
    fn steady_grid(&self, t_c: f64, m: f64, times: &[f64]) -> Vec<f64> {
        let n_t = times.len();
        let mut out = vec![0.0; self.nodes.len() * n_t];
        if n_t == 0 {
            return out;
        }
        let inv_tc = 1.0 / t_c;
        let s: Vec<(f64, f64, f64)> = times
            .iter()
            .map(|t| {
                let s = 1.0 + 2.0 * t * inv_tc;
                (s, s.ln(), 1.0 / s)
            })
            .collect();
        out.par_chunks_mut(NODE_BLOCK * n_t)
            .zip(self.nodes.par_chunks(NODE_BLOCK))
            .for_each(|(block, g_block)| {
                for (row, &g) in block.chunks_mut(n_t).zip(g_block) {
                    let a = 2.0 * m * g;
                    if a == 0.0 {
                        continue;
                    }
                    let e1_a = e1(a);
                    for (v, &(s, ln_s, inv_s)) in row.iter_mut().zip(&s) {
                        *v = 0.5 * saturating_log_integral_with(a, s, ln_s, inv_s, Some(e1_a));
                    }
                }
            });
        out
    }

    /// Unit-amplitude decaying part (1/t_c)·e^{−kt}∫₀ᵗ e^{kt'}f dt', node-major.
    fn decaying_grid(&self, t_c: f64, k: f64, m: f64, times: &[f64]) -> Result<Vec<f64>> {
        let n_t = times.len();
        let mut out = vec![0.0; self.nodes.len() * n_t];
        if n_t == 0 {
            return Ok(out);
        }
        let inv_tc = 1.0 / t_c;
        let results: Vec<Result<()>> = out
            .par_chunks_mut(NODE_BLOCK * n_t)
            .zip(self.nodes.par_chunks(NODE_BLOCK))
            .map(|(block, g_block)| {
                let a: Vec<f64> = g_block.iter().map(|g| 2.0 * m * g).collect();
                let n_g = a.len();
                let mut decayed = vec![0.0; n_g];
                let mut panel = vec![0.0; n_g];
                let mut prev = 0.0;
                for (n, &t) in times.iter().enumerate() {
                    if t > prev {
                        let shrink = (-k * (t - prev)).exp();
                        decayed.iter_mut().for_each(|d| *d *= shrink);
                        panel.iter_mut().for_each(|x| *x = 0.0);
                        integrate_decay_interval(&a, t_c, k, prev, t, &mut panel)?;
                        for (d, add) in decayed.iter_mut().zip(&panel) {
                            *d += add;
                        }
                        prev = t;
                    }
                    for (j, d) in decayed.iter().enumerate() {
                        block[j * n_t + n] = d * inv_tc;
                    }
                }
                Ok(())
            })
            .collect();
        results.into_iter().collect::<Result<()>>()?;
        Ok(out)
    }

    fn combine(&self, times: &[f64], c_r: f64, parts: &[TermGrids<'_>]) -> PhaseGrid {
        let mut values = vec![0.0; self.nodes.len() * times.len()];
        for part in parts {
            match part.decaying {
                Some(decaying) => {
                    let ws = part.amp * c_r;
                    let wd = part.amp * (1.0 - c_r);
                    for ((v, s), d) in values.iter_mut().zip(part.steady).zip(decaying) {
                        *v += ws * s + wd * d;
                    }
                }
                None => {
                    for (v, s) in values.iter_mut().zip(part.steady) {
                        *v += part.amp * s;
                    }
                }
            }
        }
        PhaseGrid {
            times: times.to_vec(),
            n_nodes: self.nodes.len(),
            values,
        }
    }

    fn transmission_at(&self, v: f64, grid: &PhaseGrid, n: usize) -> f64 {
        transmission(v, &self.nodes, &self.weights, |j| grid.get(j, n))
    }

    fn transmissions(&self, v: f64, grid: &PhaseGrid) -> Vec<f64> {
        let n_t = grid.times.len();
        let mut acc = vec![Complex64::new(0.0, 0.0); n_t];
        for (j, (&g, &w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            let base = w * (-g).exp();
            let vg = v * g;
            let row = &grid.values[j * n_t..(j + 1) * n_t];
            for (a, &phi) in acc.iter_mut().zip(row) {
                let (sin, cos) = (vg + phi).sin_cos();
                *a += Complex64::new(base * cos, -base * sin);
            }
        }
        let norm = 1.0 + v * v;
        acc.into_iter().map(|a| norm * a.norm_sqr()).collect()
    }

    /// Transmission at sorted times since pump-on with the pump left on.
    pub fn pump_on_curve(&self, p: &LensParams, times: &[f64]) -> Result<Vec<f64>> {
        let grid = self.phase_grid(p, times)?;
        let out = self.transmissions(p.v_geom, &grid);
        if self.check_order {
            if let Some(&t_last) = times.last() {
                self.check_against_doubled(p, t_last, *out.last().expect("non-empty"))?;
            }
        }
        Ok(out)
    }

    /// Compares a transmission value against the same point evaluated with
    /// twice the radial order.
    pub fn check_against_doubled(&self, p: &LensParams, t: f64, value: f64) -> Result<()> {
        let fine = LensModel::new(2 * self.order()).with_order_check(false);
        let grid = fine.phase_grid(p, &[t])?;
        let reference = fine.transmission_at(p.v_geom, &grid, 0);
        let rel = ((value - reference) / reference).abs();
        if rel > ORDER_CHECK_TOL {
            return Err(Error::numerical("radial quadrature order check failed", rel));
        }
        Ok(())
    }

    /// Transmission at absolute sample times under a shutter schedule.
    ///
    /// Before `t_on` the transmission is 1. While the pump is on it follows
    /// the rising phase. After `t_off` the phase relaxes as
    /// `φ_ss(g) − φ_rise(g, t − t_off)`, held at zero once the rise overtakes
    /// the steady value, where `φ_ss` is the phase reached at `t_off` and
    /// `φ_rise` uses the scenario's relaxation times.
    pub fn trace(&self, scenario: &Scenario, p: &LensParams, sample_times: &[f64]) -> Result<Vec<f64>> {
        TraceEvaluator::new(self.clone(), *scenario, sample_times.to_vec())?.evaluate(p)
    }
}

struct TermGrids<'a> {
    amp: f64,
    steady: &'a [f64],
    decaying: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct GridKey {
    branch: Branch,
    t_c: u64,
    k: u64,
    m: u64,
}

impl GridKey {
    fn new(branch: Branch, t_c: f64, k: f64, m: f64) -> Self {
        Self {
            branch,
            t_c: t_c.to_bits(),
            k: k.to_bits(),
            m: m.to_bits(),
        }
    }
}

/// Small most-recently-used cache of unit phase grids.
#[derive(Debug, Default)]
struct GridCache {
    entries: Vec<(GridKey, Arc<Vec<f64>>)>,
}

const CACHE_CAPACITY: usize = 6;

impl GridCache {
    fn get_or_try_insert(&mut self, key: GridKey, build: impl FnOnce() -> Result<Vec<f64>>) -> Result<Arc<Vec<f64>>> {
        if let Some(pos) = self.entries.iter().position(|(k, _)| *k == key) {
            let entry = self.entries.remove(pos);
            let grid = Arc::clone(&entry.1);
            self.entries.insert(0, entry);
            return Ok(grid);
        }
        let grid = Arc::new(build()?);
        self.entries.insert(0, (key, Arc::clone(&grid)));
        self.entries.truncate(CACHE_CAPACITY);
        Ok(grid)
    }

    fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Trace evaluator for a fixed set of sample times, caching the
/// unit-amplitude phase grids between calls.
///
/// Amplitudes and c_r enter the phase linearly, so re-evaluating with only
/// those changed costs just the radial sums; changing one time constant
/// rebuilds only the grids of that term.
#[derive(Debug)]
pub struct TraceEvaluator {
    model: LensModel,
    scenario: Scenario,
    sample_times: Vec<f64>,
    pre: usize,
    off: usize,
    on_times: Vec<f64>,
    off_times: Vec<f64>,
    steady: GridCache,
    decaying: GridCache,
}

impl TraceEvaluator {
    pub fn new(model: LensModel, scenario: Scenario, sample_times: Vec<f64>) -> Result<Self> {
        for w in sample_times.windows(2) {
            if !(w[0] <= w[1]) {
                return Err(Error::Contract(format!(
                    "sample times must be sorted ascending ({} precedes {})",
                    w[0], w[1]
                )));
            }
        }
        let mut ev = Self {
            model,
            scenario,
            sample_times,
            pre: 0,
            off: 0,
            on_times: Vec::new(),
            off_times: Vec::new(),
            steady: GridCache::default(),
            decaying: GridCache::default(),
        };
        ev.set_scenario(scenario)?;
        Ok(ev)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn sample_times(&self) -> &[f64] {
        &self.sample_times
    }

    pub fn model(&self) -> &LensModel {
        &self.model
    }

    /// Replaces the shutter schedule; cached grids are dropped when the
    /// branch times change.
    pub fn set_scenario(&mut self, scenario: Scenario) -> Result<()> {
        scenario.validate()?;
        let slack = 1e-9 * scenario.duration.max(1.0);
        if let (Some(&first), Some(&last)) = (self.sample_times.first(), self.sample_times.last()) {
            if first < -slack || last > scenario.duration + slack {
                return Err(Error::Contract(format!(
                    "sample times must lie within [0, {}], got [{first}, {last}]",
                    scenario.duration
                )));
            }
        }
        let times = &self.sample_times;
        let pre = times.partition_point(|&t| t < scenario.t_on);
        let off = times.partition_point(|&t| t < scenario.t_off);
        let mut on_times: Vec<f64> = times[pre..off].iter().map(|&t| t - scenario.t_on).collect();
        if off < times.len() {
            on_times.push(scenario.t_off - scenario.t_on);
        }
        let off_times: Vec<f64> = times[off..].iter().map(|&t| t - scenario.t_off).collect();
        if on_times != self.on_times || off_times != self.off_times {
            self.steady.clear();
            self.decaying.clear();
        }
        self.pre = pre;
        self.off = off;
        self.on_times = on_times;
        self.off_times = off_times;
        self.scenario = scenario;
        Ok(())
    }

    fn branch_phase(&mut self, branch: Branch, p: &LensParams, t_c: [f64; 2]) -> Result<PhaseGrid> {
        let times = match branch {
            Branch::On => &self.on_times,
            Branch::Off => &self.off_times,
        };
        let model = &self.model;
        let need_decay = p.k > 0.0 && p.c_r < 1.0;
        let mut held = Vec::with_capacity(2);
        for (amp, tc) in [(p.theta_th, t_c[0]), (p.theta_s, t_c[1])] {
            if amp == 0.0 {
                continue;
            }
            let steady = self
                .steady
                .get_or_try_insert(GridKey::new(branch, tc, 0.0, p.m), || Ok(model.steady_grid(tc, p.m, times)))?;
            let decaying = if need_decay {
                Some(self.decaying.get_or_try_insert(GridKey::new(branch, tc, p.k, p.m), || {
                    model.decaying_grid(tc, p.k, p.m, times)
                })?)
            } else {
                None
            };
            held.push((amp, steady, decaying));
        }
        let parts: Vec<TermGrids<'_>> = held
            .iter()
            .map(|(amp, s, d)| TermGrids {
                amp: *amp,
                steady: s.as_slice(),
                decaying: d.as_ref().map(|d| d.as_slice()),
            })
            .collect();
        Ok(model.combine(times, p.c_r, &parts))
    }

    /// Transmission at every sample time.
    pub fn evaluate(&mut self, p: &LensParams) -> Result<Vec<f64>> {
        p.validate()?;
        let (pre, off) = (self.pre, self.off);
        let mut out = vec![1.0; self.sample_times.len()];
        if self.on_times.is_empty() {
            return Ok(out);
        }
        let on_grid = self.branch_phase(Branch::On, p, [p.t_th, p.t_s])?;
        let on_values = self.model.transmissions(p.v_geom, &on_grid);
        out[pre..off].copy_from_slice(&on_values[..off - pre]);

        if off < self.sample_times.len() {
            let ss_index = self.on_times.len() - 1;
            let relax = self.scenario.relax_times(p);
            let mut grid = self.branch_phase(Branch::Off, p, [relax.t_th, relax.t_s])?;
            let n_t = self.off_times.len();
            for j in 0..self.model.nodes.len() {
                let steady = on_grid.get(j, ss_index);
                for v in &mut grid.values[j * n_t..(j + 1) * n_t] {
                    let remaining = steady - *v;
                    *v = if steady >= 0.0 { remaining.max(0.0) } else { remaining.min(0.0) };
                }
            }
            let off_values = self.model.transmissions(p.v_geom, &grid);
            out[off..].copy_from_slice(&off_values);
        }

        if self.model.check_order && pre < off {
            self.model
                .check_against_doubled(p, self.on_times[off - pre - 1], out[off - 1])?;
        }
        for d in p.diagnostics() {
            warn!("{d}");
        }
        Ok(out)
    }
}

/// `trace` with the default radial order.
pub fn trace(scenario: &Scenario, p: &LensParams, sample_times: &[f64]) -> Result<Vec<f64>> {
    LensModel::default().trace(scenario, p, sample_times)
}

fn check_sorted_nonnegative(times: &[f64]) -> Result<()> {
    if let Some(&t) = times.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(Error::Domain(format!("phase times must be finite and >= 0, got {t}")));
    }
    if times.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract("phase times must be sorted ascending".into()));
    }
    Ok(())
}

/// ∫_lo^hi e^{k(t'−hi)} f_j(t') dt' for every node j, into `out`.
///
/// Panels are bisected until |K7 − G3| on every node is within the
/// relative tolerance of that panel's contribution.
fn integrate_decay_interval(
    a: &[f64],
    t_c: f64,
    k: f64,
    lo: f64,
    hi: f64,
    out: &mut [f64],
) -> Result<()> {
    let n_g = a.len();
    let mut kron = vec![0.0; n_g];
    let mut gauss = vec![0.0; n_g];
    let mut stack = vec![(lo, hi, 0u32)];
    while let Some((l, h, depth)) = stack.pop() {
        let half = 0.5 * (h - l);
        let mid = 0.5 * (l + h);
        kron.iter_mut().for_each(|x| *x = 0.0);
        gauss.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..7 {
            let (x, wk, wg) = match i {
                0..=2 => (-XGK7[i], WGK7[i], if i == 1 { WG3[0] } else { 0.0 }),
                3 => (0.0, WGK7[3], WG3[1]),
                _ => (XGK7[6 - i], WGK7[6 - i], if i == 5 { WG3[0] } else { 0.0 }),
            };
            let tp = mid + half * x;
            let inv_s = 1.0 / (1.0 + 2.0 * tp / t_c);
            let decay = (k * (tp - hi)).exp();
            let ck = wk * decay * half;
            let cg = wg * decay * half;
            for j in 0..n_g {
                let f = saturating_response(a[j], inv_s);
                kron[j] += ck * f;
                gauss[j] += cg * f;
            }
        }
        // The integrand is non-negative, so a per-panel relative bound
        // carries over to the accumulated integral.
        let mut worst: f64 = 0.0;
        let mut accept = true;
        for j in 0..n_g {
            let err = (kron[j] - gauss[j]).abs();
            let scale = kron[j].abs();
            if err > DECAY_REL_TOL * scale && err > 1e-300 {
                accept = false;
                worst = worst.max(err / scale.max(1e-300));
            }
        }
        if accept {
            for (o, k) in out.iter_mut().zip(&kron) {
                *o += k;
            }
        } else if depth >= MAX_BISECTIONS {
            return Err(Error::numerical("decaying-population integral did not converge", worst));
        } else {
            stack.push((mid, h, depth + 1));
            stack.push((l, mid, depth + 1));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> LensParams {
        LensParams::default()
    }

    #[test]
    fn component_vanishes_at_origin_and_onset() {
        assert_eq!(phase_component(3.0, 0.0, 1.0, 2.0, 0.1, 0.5, 1.1).unwrap(), 0.0);
        assert_eq!(phase_component(0.0, 5.0, 1.0, 2.0, 0.1, 0.5, 1.1).unwrap(), 0.0);
    }

    #[test]
    fn component_rejects_bad_inputs() {
        assert!(matches!(phase_component(f64::NAN, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(phase_component(1.0, -1.0, 1.0, 1.0, 0.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(phase_component(1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(phase_component(1.0, 1.0, 1.0, 1.0, 0.0, 1.5, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn without_decay_concentration_fraction_drops_out() {
        let a = phase_component(1.3, 7.0, 0.7, 2.0, 0.0, 0.2, 1.1).unwrap();
        let b = phase_component(1.3, 7.0, 0.7, 2.0, 0.0, 0.9, 1.1).unwrap();
        assert!((a - b).abs() < 1e-15 * a.abs());
    }

    #[test]
    fn decaying_part_survives_large_kt() {
        // e^{kt} would overflow; the single-exponent form must not.
        let v = phase_component(1.0, 2000.0, 1.0, 2.0, 1.0, 0.0, 1.0).unwrap();
        assert!(v.is_finite() && v > 0.0);
        // With k·t ≫ 1 the decaying integral tends to f(t)/k.
        let s: f64 = 1.0 + 2.0 * 2000.0 / 2.0;
        let f_t = (1.0 - (-2.0 / s).exp()) / s;
        assert!((v - f_t / 2.0).abs() / v < 2e-3);
    }

    #[test]
    fn soret_free_total_equals_thermal_component() {
        let mut p = params();
        p.theta_s = 0.0;
        let total = phase_total(2.0, 30.0, &p).unwrap();
        let thermal = phase_component(2.0, 30.0, p.theta_th, p.t_th, p.k, p.c_r, p.m).unwrap();
        assert_eq!(total, thermal);
    }

    #[test]
    fn beam_geometry_consistency() {
        let geom = BeamGeometry::default();
        assert!((geom.m() - 0.61f64.powi(2) / 0.57f64.powi(2)).abs() < 1e-15);
        geom.check_consistent(&params()).unwrap();
        let mut p = params();
        p.m *= 1.0 + 1e-9;
        assert!(geom.check_consistent(&p).is_err());
    }

    #[test]
    fn params_validation_and_diagnostics() {
        let mut p = params();
        p.c_r = 1.2;
        assert!(p.validate().is_err());
        let mut p = params();
        p.t_s = 0.5;
        p.validate().unwrap();
        assert_eq!(p.diagnostics().len(), 1);
        assert!(params().diagnostics().is_empty());
    }

    #[test]
    fn scenario_validation() {
        Scenario::default().validate().unwrap();
        Scenario::pump_on_off(40.0, 340.0, 680.0).validate().unwrap();
        assert!(Scenario::pump_on_off(40.0, 30.0, 100.0).validate().is_err());
        assert!(Scenario::pump_on_off(40.0, 120.0, 100.0).validate().is_err());
        assert!(Scenario::pump_on(-1.0, 100.0).validate().is_err());
    }

    #[test]
    fn grid_matches_scalar_phase() {
        let p = params();
        let model = LensModel::new(40);
        let times = [0.0, 0.05, 0.3, 1.0, 4.5, 30.0, 250.0];
        let grid = model.phase_grid(&p, &times).unwrap();
        for (n, &t) in times.iter().enumerate() {
            for (j, &g) in model.nodes().iter().enumerate() {
                let want = phase_total(g, t, &p).unwrap();
                let got = grid.get(j, n);
                assert!(
                    (got - want).abs() <= 1e-9 * want.abs() + 1e-14,
                    "g={g} t={t}: grid {got} vs scalar {want}"
                );
            }
        }
    }

    #[test]
    fn zero_phase_is_unit_transmission() {
        let mut p = params();
        p.theta_th = 0.0;
        p.theta_s = 0.0;
        for v in [0.0, 1.0, 7.0] {
            p.v_geom = v;
            assert!((intensity(10.0, &p).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_amplitude_reduces_transmission() {
        let p = params();
        let t = intensity(20.0, &p).unwrap();
        assert!(t < 1.0, "T = {t}");
    }

    #[test]
    fn trace_rejects_unsorted_and_out_of_range_times() {
        let s = Scenario::default();
        let p = params();
        assert!(matches!(trace(&s, &p, &[1.0, 0.5]), Err(Error::Contract(_))));
        assert!(matches!(trace(&s, &p, &[1.0, 400.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn trace_before_shutter_is_baseline() {
        let vals = trace(&Scenario::default(), &params(), &[0.0, 10.0, 39.9]).unwrap();
        assert_eq!(vals, vec![1.0; 3]);
    }
}

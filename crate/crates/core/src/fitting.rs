//! Weighted least-squares recovery of lens parameters from coincidence traces.
//!
//! The model for bin j is A·T(t_j), with T the lens transmission under the
//! trace's shutter schedule and A the counts per bin at T = 1. The optimizer
//! runs a Nelder–Mead stage followed by a Levenberg–Marquardt polish with a
//! forward-difference Jacobian. Both work in internal coordinates: log for
//! the characteristic times, k·duration for the decay rate, identity
//! otherwise. A free amplitude is profiled out exactly by linear least
//! squares at every candidate.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counting::TimeTrace;
use crate::error::{Error, Result};
use crate::lensmodel::{LensModel, LensParams, Scenario, TraceEvaluator};

/// Parameters that a fit may vary. The mode parameter m and the geometry
/// parameter V are always held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    ThetaTh,
    ThetaS,
    TTh,
    TS,
    K,
    CR,
    Amplitude,
    TOn,
}

impl Param {
    pub const ALL: [Param; 8] = [
        Param::ThetaTh,
        Param::ThetaS,
        Param::TTh,
        Param::TS,
        Param::K,
        Param::CR,
        Param::Amplitude,
        Param::TOn,
    ];

    /// The six lens parameters of the standard fit.
    pub const LENS: [Param; 6] = [
        Param::ThetaTh,
        Param::ThetaS,
        Param::TTh,
        Param::TS,
        Param::K,
        Param::CR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::ThetaTh => "theta_th",
            Param::ThetaS => "theta_s",
            Param::TTh => "t_th",
            Param::TS => "t_s",
            Param::K => "k",
            Param::CR => "c_r",
            Param::Amplitude => "amplitude",
            Param::TOn => "t_on",
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Param {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Param::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown fit parameter '{s}'")))
    }
}

/// A full candidate: lens parameters, counts per bin at T = 1, shutter time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub lens: LensParams,
    pub amplitude: f64,
    pub t_on: f64,
}

impl FitPoint {
    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::ThetaTh => self.lens.theta_th,
            Param::ThetaS => self.lens.theta_s,
            Param::TTh => self.lens.t_th,
            Param::TS => self.lens.t_s,
            Param::K => self.lens.k,
            Param::CR => self.lens.c_r,
            Param::Amplitude => self.amplitude,
            Param::TOn => self.t_on,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::ThetaTh => self.lens.theta_th = v,
            Param::ThetaS => self.lens.theta_s = v,
            Param::TTh => self.lens.t_th = v,
            Param::TS => self.lens.t_s = v,
            Param::K => self.lens.k = v,
            Param::CR => self.lens.c_r = v,
            Param::Amplitude => self.amplitude = v,
            Param::TOn => self.t_on = v,
        }
    }
}

/// Box constraints per parameter, as (lo, hi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub theta_th: (f64, f64),
    pub theta_s: (f64, f64),
    pub t_th: (f64, f64),
    pub t_s: (f64, f64),
    pub k: (f64, f64),
    pub c_r: (f64, f64),
    pub amplitude: (f64, f64),
    pub t_on: (f64, f64),
}

/// Half-width of the default shutter-time window (s).
pub const T_ON_WINDOW: f64 = 2.0;

impl Bounds {
    /// Default box with the shutter time allowed within ±2 s of `t_on`.
    pub fn around(t_on: f64) -> Self {
        Self {
            theta_th: (0.0, 10.0),
            theta_s: (0.0, 10.0),
            t_th: (0.01, 50.0),
            t_s: (1.0, 1e4),
            k: (0.0, 1.0),
            c_r: (0.0, 1.0),
            amplitude: (0.0, f64::INFINITY),
            t_on: ((t_on - T_ON_WINDOW).max(0.0), t_on + T_ON_WINDOW),
        }
    }

    pub fn get(&self, p: Param) -> (f64, f64) {
        match p {
            Param::ThetaTh => self.theta_th,
            Param::ThetaS => self.theta_s,
            Param::TTh => self.t_th,
            Param::TS => self.t_s,
            Param::K => self.k,
            Param::CR => self.c_r,
            Param::Amplitude => self.amplitude,
            Param::TOn => self.t_on,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in Param::ALL {
            let (lo, hi) = self.get(p);
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::Invalid(format!("bounds for {p} are not an interval: ({lo}, {hi})")));
            }
        }
        if self.t_th.0 <= 0.0 || self.t_s.0 <= 0.0 {
            return Err(Error::Invalid("time-constant bounds must be positive".into()));
        }
        if self.k.0 < 0.0 || self.c_r.0 < 0.0 || self.c_r.1 > 1.0 {
            return Err(Error::Invalid("k bounds must be >= 0 and c_r bounds within [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// σ_j = sqrt(max(c_j, 1)).
    #[default]
    Poisson,
    /// σ_j = 1.
    Uniform,
}

pub const DEFAULT_MAX_EVALS: usize = 3000;

/// What to fit and where to start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub free: Vec<Param>,
    /// Starting values for free parameters and values of the fixed ones.
    pub init: FitPoint,
    pub bounds: Bounds,
    pub weights: Weighting,
    /// Budget of model evaluations.
    pub max_evals: usize,
    /// Shutter schedule of the trace. When t_on moves, t_off moves with it.
    pub scenario: Scenario,
}

impl FitSpec {
    /// Spec with default bounds, Poisson weights and budget.
    pub fn new(scenario: Scenario, init: FitPoint, free: Vec<Param>) -> Self {
        Self {
            free,
            init,
            bounds: Bounds::around(scenario.t_on),
            weights: Weighting::Poisson,
            max_evals: DEFAULT_MAX_EVALS,
            scenario,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.free.is_empty() {
            return Err(Error::Invalid("no free parameters".into()));
        }
        for (i, p) in self.free.iter().enumerate() {
            if self.free[..i].contains(p) {
                return Err(Error::Invalid(format!("parameter {p} listed twice in free set")));
            }
        }
        self.bounds.validate()?;
        self.init.lens.validate()?;
        self.scenario.validate()?;
        for p in Param::ALL {
            let (lo, hi) = self.bounds.get(p);
            let v = self.init.get(p);
            if self.free.contains(&p) && !(lo <= v && v <= hi) {
                return Err(Error::Invalid(format!("initial {p}={v} outside bounds ({lo}, {hi})")));
            }
        }
        if !(self.init.amplitude.is_finite() && self.init.amplitude >= 0.0) {
            return Err(Error::Invalid(format!("amplitude must be >= 0, got {}", self.init.amplitude)));
        }
        if self.max_evals == 0 {
            return Err(Error::Invalid("max_evals must be positive".into()));
        }
        Ok(())
    }

    /// The `FitSpec` shutter schedule moved to start at `t_on`.
    pub fn scenario_at(&self, t_on: f64) -> Scenario {
        let shift = t_on - self.scenario.t_on;
        Scenario {
            t_on,
            t_off: self.scenario.t_off + shift,
            ..self.scenario
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Relative chi2 change below 1e-8 over 5 iterations.
    ChiSquareConverged,
    /// Proposed step norm below 1e-9.
    StepConverged,
    /// No damped step lowers chi2 any further.
    NoImprovement,
    BudgetExhausted,
}

/// Covariance of the free parameters in their natural units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariance {
    pub params: Vec<Param>,
    pub matrix: Vec<Vec<f64>>,
}

impl Covariance {
    pub fn sigma(&self, p: Param) -> Option<f64> {
        let i = self.params.iter().position(|&q| q == p)?;
        Some(self.matrix[i][i].max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: LensParams,
    pub amplitude: f64,
    pub t_on: f64,
    pub free: Vec<Param>,
    pub chi2: f64,
    pub dof: usize,
    /// (JᵀJ)⁻¹ at the optimum; `None` when the curvature is singular.
    pub covariance: Option<Covariance>,
    pub n_evals: usize,
    pub converged: bool,
    pub termination: Termination,
}

impl FitResult {
    pub fn point(&self) -> FitPoint {
        FitPoint {
            lens: self.params,
            amplitude: self.amplitude,
            t_on: self.t_on,
        }
    }

    pub fn reduced_chi2(&self) -> f64 {
        self.chi2 / self.dof.max(1) as f64
    }

    pub fn sigma(&self, p: Param) -> Option<f64> {
        self.covariance.as_ref().and_then(|c| c.sigma(p))
    }
}

fn sigmas(counts: &[u64], weights: Weighting) -> Vec<f64> {
    counts
        .iter()
        .map(|&c| match weights {
            Weighting::Poisson => (c.max(1) as f64).sqrt(),
            Weighting::Uniform => 1.0,
        })
        .collect()
}

fn fit_model() -> LensModel {
    LensModel::default().with_order_check(false)
}

/// Weighted residuals r_j = (c_j − A·T(t_j))/σ_j at `candidate`, which must
/// lie within the `FitSpec` bounds.
pub fn residuals(trace: &TimeTrace, spec: &FitSpec, candidate: &FitPoint) -> Result<Vec<f64>> {
    trace.validate()?;
    spec.bounds.validate()?;
    for p in Param::ALL {
        let (lo, hi) = spec.bounds.get(p);
        let v = candidate.get(p);
        if !(lo <= v && v <= hi) {
            return Err(Error::Contract(format!("candidate {p}={v} outside bounds ({lo}, {hi})")));
        }
    }
    let model = LensModel::default().trace(&spec.scenario_at(candidate.t_on), &candidate.lens, &trace.t)?;
    let sigma = sigmas(&trace.c, spec.weights);
    Ok(trace
        .c
        .iter()
        .zip(&model)
        .zip(&sigma)
        .map(|((&c, &t), &s)| (c as f64 - candidate.amplitude * t) / s)
        .collect())
}

fn chi2_of(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// How the optimizer sees one problem: which parameters move and how the
/// rest are pinned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tie {
    None,
    /// t_s follows t_th.
    SoretToThermal,
}

struct Problem<'a> {
    data: Vec<f64>,
    sigma: Vec<f64>,
    evaluator: TraceEvaluator,
    spec: &'a FitSpec,
    base: FitPoint,
    vars: Vec<Param>,
    profile_amplitude: bool,
    tie: Tie,
    k_scale: f64,
    evals: usize,
}

impl<'a> Problem<'a> {
    fn new(trace: &TimeTrace, spec: &'a FitSpec, base: FitPoint, free: &[Param], tie: Tie) -> Result<Self> {
        let evaluator = TraceEvaluator::new(fit_model(), spec.scenario_at(base.t_on), trace.t.clone())?;
        let profile_amplitude = free.contains(&Param::Amplitude);
        let vars = free
            .iter()
            .copied()
            .filter(|&p| p != Param::Amplitude && !(tie == Tie::SoretToThermal && p == Param::TS))
            .collect();
        Ok(Self {
            data: trace.c.iter().map(|&c| c as f64).collect(),
            sigma: sigmas(&trace.c, spec.weights),
            evaluator,
            spec,
            base,
            vars,
            profile_amplitude,
            tie,
            k_scale: spec.scenario.duration.max(1.0),
            evals: 0,
        })
    }

    fn to_internal(&self, p: Param, v: f64) -> f64 {
        match p {
            Param::TTh | Param::TS => v.ln(),
            Param::K => v * self.k_scale,
            _ => v,
        }
    }

    fn to_external(&self, p: Param, x: f64) -> f64 {
        match p {
            Param::TTh | Param::TS => x.exp(),
            Param::K => x / self.k_scale,
            _ => x,
        }
    }

    fn internal_bounds(&self, p: Param) -> (f64, f64) {
        let (lo, hi) = self.spec.bounds.get(p);
        (self.to_internal(p, lo), self.to_internal(p, hi))
    }

    fn clamp(&self, x: &mut [f64]) {
        for (xi, &p) in x.iter_mut().zip(&self.vars) {
            let (lo, hi) = self.internal_bounds(p);
            *xi = xi.clamp(lo, hi);
        }
    }

    fn start(&self) -> Vec<f64> {
        let mut x: Vec<f64> = self.vars.iter().map(|&p| self.to_internal(p, self.base.get(p))).collect();
        self.clamp(&mut x);
        x
    }

    fn point(&self, x: &[f64]) -> FitPoint {
        let mut pt = self.base;
        for (&xi, &p) in x.iter().zip(&self.vars) {
            let (lo, hi) = self.spec.bounds.get(p);
            pt.set(p, self.to_external(p, xi).clamp(lo, hi));
        }
        if self.tie == Tie::SoretToThermal {
            pt.lens.t_s = pt.lens.t_th;
        }
        pt
    }

    fn transmission(&mut self, pt: &FitPoint) -> Result<Vec<f64>> {
        if pt.t_on != self.evaluator.scenario().t_on {
            self.evaluator.set_scenario(self.spec.scenario_at(pt.t_on))?;
        }
        self.evals += 1;
        self.evaluator.evaluate(&pt.lens)
    }

    /// Residuals at internal coordinates `x`, with the amplitude profiled
    /// when free. Returns the completed point as well.
    fn residuals(&mut self, x: &[f64]) -> Result<(Vec<f64>, FitPoint)> {
        let mut pt = self.point(x);
        let t = self.transmission(&pt)?;
        if self.profile_amplitude {
            let (mut num, mut den) = (0.0, 0.0);
            for ((&c, &ti), &s) in self.data.iter().zip(&t).zip(&self.sigma) {
                let w = 1.0 / (s * s);
                num += w * c * ti;
                den += w * ti * ti;
            }
            let (lo, hi) = self.spec.bounds.amplitude;
            pt.amplitude = if den > 0.0 { (num / den).clamp(lo, hi) } else { pt.amplitude };
        }
        let r = self
            .data
            .iter()
            .zip(&t)
            .zip(&self.sigma)
            .map(|((&c, &ti), &s)| (c - pt.amplitude * ti) / s)
            .collect();
        Ok((r, pt))
    }

    fn chi2(&mut self, x: &[f64]) -> f64 {
        match self.residuals(x) {
            Ok((r, _)) => chi2_of(&r),
            Err(e) => {
                debug!("candidate rejected: {e}");
                f64::INFINITY
            }
        }
    }

    fn simplex_step(&self, p: Param, x: f64) -> f64 {
        match p {
            Param::ThetaTh | Param::ThetaS => (0.1 * x.abs()).max(0.02),
            Param::TTh | Param::TS => 0.2,
            Param::K => (0.2 * x.abs()).max(0.2),
            Param::CR => 0.05,
            Param::TOn => 0.5,
            Param::Amplitude => (0.01 * x.abs()).max(1.0),
        }
    }

    /// Largest move of one internal coordinate in a single damped step.
    fn max_step(&self, p: Param) -> f64 {
        match p {
            Param::ThetaTh | Param::ThetaS => 0.5,
            Param::TTh | Param::TS => 0.7,
            Param::K => 2.0,
            Param::CR => 0.2,
            Param::TOn => 0.5,
            Param::Amplitude => f64::INFINITY,
        }
    }

    fn fd_step(&self, x: f64) -> f64 {
        1e-6 * x.abs().max(1.0)
    }

    /// Nelder–Mead on the internal coordinates. Returns the best vertex.
    fn nelder_mead(&mut self, x0: Vec<f64>, budget: usize) -> Result<(Vec<f64>, f64)> {
        let n = x0.len();
        let f0 = self.chi2(&x0);
        if !f0.is_finite() {
            // Surface the model error for the starting point.
            self.residuals(&x0)?;
        }
        let mut simplex = vec![(x0.clone(), f0)];
        for i in 0..n {
            let mut x = x0.clone();
            let step = self.simplex_step(self.vars[i], x[i]);
            let (lo, hi) = self.internal_bounds(self.vars[i]);
            x[i] = if x[i] + step <= hi { x[i] + step } else { (x[i] - step).max(lo) };
            let f = self.chi2(&x);
            simplex.push((x, f));
        }
        let start = self.evals;
        while self.evals - start < budget {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (best, worst) = (simplex[0].1, simplex[n].1);
            if worst - best <= 1e-6 * best.abs() + 1e-12 {
                break;
            }
            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|v| v.0[j]).sum::<f64>() / n as f64)
                .collect();
            let along = |s: f64, me: &Self| {
                let mut x: Vec<f64> = (0..n).map(|j| centroid[j] + s * (simplex[n].0[j] - centroid[j])).collect();
                me.clamp(&mut x);
                x
            };
            let xr = along(-1.0, self);
            let fr = self.chi2(&xr);
            if fr < best {
                let xe = along(-2.0, self);
                let fe = self.chi2(&xe);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < worst {
                    let xc = along(-0.5, self);
                    let fc = self.chi2(&xc);
                    (xc, fc)
                } else {
                    let xc = along(0.5, self);
                    let fc = self.chi2(&xc);
                    (xc, fc)
                };
                if fc < worst.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let x_best = simplex[0].0.clone();
                    for v in simplex.iter_mut().skip(1) {
                        let mut x: Vec<f64> = v.0.iter().zip(&x_best).map(|(a, b)| b + 0.5 * (a - b)).collect();
                        self.clamp(&mut x);
                        v.1 = self.chi2(&x);
                        v.0 = x;
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, f) = simplex.swap_remove(0);
        Ok((x, f))
    }

    /// Forward-difference Jacobian of the residuals at `x`.
    fn jacobian(&mut self, x: &[f64], r0: &[f64]) -> Result<DMatrix<f64>> {
        let n = x.len();
        let mut j = DMatrix::zeros(r0.len(), n);
        for i in 0..n {
            let (_, hi) = self.internal_bounds(self.vars[i]);
            let mut h = self.fd_step(x[i]);
            if x[i] + h > hi {
                h = -h;
            }
            let mut xp = x.to_vec();
            xp[i] += h;
            let (rp, _) = self.residuals(&xp)?;
            for (row, (a, b)) in rp.iter().zip(r0).enumerate() {
                j[(row, i)] = (a - b) / h;
            }
        }
        Ok(j)
    }

    /// Levenberg–Marquardt from `x`.
    fn levenberg_marquardt(&mut self, mut x: Vec<f64>, max_evals: usize) -> Result<(Vec<f64>, f64, Termination)> {
        let (mut r, _) = self.residuals(&x)?;
        let mut chi2 = chi2_of(&r);
        let mut lambda = 1e-3;
        let mut history = vec![chi2];
        loop {
            if self.evals >= max_evals {
                return Ok((x, chi2, Termination::BudgetExhausted));
            }
            let jac = self.jacobian(&x, &r)?;
            let h = jac.transpose() * &jac;
            let g = jac.transpose() * DVector::from_column_slice(&r);
            let diag_floor = 1e-12 * h.diagonal().max().max(1e-300);
            loop {
                let mut a = h.clone();
                for i in 0..x.len() {
                    a[(i, i)] += lambda * h[(i, i)].max(diag_floor);
                }
                let Some(chol) = a.cholesky() else {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        return Ok((x, chi2, Termination::NoImprovement));
                    }
                    continue;
                };
                let mut delta = chol.solve(&(-&g));
                // Nearly flat directions can ask for huge moves; shrink the
                // step uniformly so no coordinate exceeds its cap.
                let excess = delta
                    .iter()
                    .zip(&self.vars)
                    .map(|(d, &p)| d.abs() / self.max_step(p))
                    .fold(1.0, f64::max);
                delta /= excess;
                let mut x_new: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
                self.clamp(&mut x_new);
                let step = x_new.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if step < 1e-9 {
                    return Ok((x, chi2, Termination::StepConverged));
                }
                let trial = self.residuals(&x_new);
                let improved = match &trial {
                    Ok((r_new, _)) => chi2_of(r_new) < chi2,
                    Err(_) => false,
                };
                if improved {
                    let (r_new, _) = trial.expect("checked above");
                    chi2 = chi2_of(&r_new);
                    r = r_new;
                    x = x_new;
                    lambda = (lambda / 3.0).max(1e-12);
                    break;
                }
                lambda *= 4.0;
                if lambda > 1e16 {
                    return Ok((x, chi2, Termination::NoImprovement));
                }
                if self.evals >= max_evals {
                    return Ok((x, chi2, Termination::BudgetExhausted));
                }
            }
            history.push(chi2);
            if history.len() > 5 {
                let old = history[history.len() - 6];
                if (old - chi2) <= 1e-8 * chi2.abs().max(1e-300) {
                    return Ok((x, chi2, Termination::ChiSquareConverged));
                }
            }
        }
    }

    /// (JᵀJ)⁻¹ over `free` in natural units, from a forward-difference
    /// Jacobian of the unprofiled residuals at `pt`.
    fn covariance(&mut self, pt: &FitPoint, free: &[Param]) -> Result<Option<Covariance>> {
        let t0 = self.transmission(pt)?;
        let model = |t: &[f64], a: f64, sigma: &[f64]| -> Vec<f64> {
            t.iter().zip(sigma).map(|(ti, s)| a * ti / s).collect::<Vec<f64>>()
        };
        let m0 = model(&t0, pt.amplitude, &self.sigma);
        let mut jac = DMatrix::zeros(t0.len(), free.len());
        for (i, &p) in free.iter().enumerate() {
            if p == Param::Amplitude {
                for (row, (ti, s)) in t0.iter().zip(&self.sigma).enumerate() {
                    jac[(row, i)] = -ti / s;
                }
                continue;
            }
            let v = pt.get(p);
            let scale = match p {
                Param::ThetaTh | Param::ThetaS | Param::CR | Param::TOn => 1e-2,
                Param::K => 1e-4,
                _ => 0.0,
            };
            let mut h = 1e-5 * v.abs().max(scale);
            let (lo, hi) = self.spec.bounds.get(p);
            if v + h > hi {
                h = -h;
            }
            if v + h < lo {
                return Ok(None);
            }
            let mut shifted = *pt;
            shifted.set(p, v + h);
            let t = self.transmission(&shifted)?;
            let m = model(&t, pt.amplitude, &self.sigma);
            for (row, (a, b)) in m.iter().zip(&m0).enumerate() {
                jac[(row, i)] = -(a - b) / h;
            }
        }
        Ok(invert_curvature(&(jac.transpose() * &jac)).map(|inv| Covariance {
            params: free.to_vec(),
            matrix: (0..free.len())
                .map(|i| (0..free.len()).map(|j| inv[(i, j)]).collect())
                .collect(),
        }))
    }
}

/// Inverse of a symmetric curvature matrix, or `None` when it is singular
/// to working precision after diagonal scaling.
fn invert_curvature(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = h.nrows();
    let d: Vec<f64> = (0..n).map(|i| h[(i, i)]).collect();
    if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return None;
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| h[(i, j)] / (d[i] * d[j]).sqrt());
    let eig = SymmetricEigen::new(scaled);
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    if !(min > 1e-12 * max) {
        return None;
    }
    let inv_eig = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let inv_scaled = &eig.eigenvectors * inv_eig * eig.eigenvectors.transpose();
    let mut inv = DMatrix::from_fn(n, n, |i, j| inv_scaled[(i, j)] / (d[i] * d[j]).sqrt());
    let sym = (&inv + inv.transpose()) * 0.5;
    inv.copy_from(&sym);
    Some(inv)
}

fn check_trace(trace: &TimeTrace, spec: &FitSpec) -> Result<()> {
    trace.validate()?;
    spec.validate()?;
    if trace.len() < 2 * spec.free.len() {
        return Err(Error::Contract(format!(
            "{} bins cannot constrain {} free parameters",
            trace.len(),
            spec.free.len()
        )));
    }
    if spec.free.contains(&Param::TOn) {
        let lo = spec.bounds.t_on.0;
        if trace.baseline_len(lo) == 0 {
            return Err(Error::Contract("fitting t_on needs baseline bins before the shutter".into()));
        }
    }
    Ok(())
}

/// Minimizes chi2 over the `FitSpec` free parameters.
pub fn fit(trace: &TimeTrace, spec: &FitSpec) -> Result<FitResult> {
    check_trace(trace, spec)?;
    let mut problem = Problem::new(trace, spec, spec.init, &spec.free, Tie::None)?;
    let x0 = problem.start();
    let (x, termination) = if problem.vars.is_empty() {
        (x0, Termination::StepConverged)
    } else {
        let nm_budget = (10 * (problem.vars.len() + 1)).min(spec.max_evals / 3);
        let (x_nm, _) = problem.nelder_mead(x0, nm_budget)?;
        let (x, _, term) = problem.levenberg_marquardt(x_nm, spec.max_evals)?;
        (x, term)
    };
    finish(trace, spec, &mut problem, &x, termination, &spec.free)
}

fn finish(
    trace: &TimeTrace,
    spec: &FitSpec,
    problem: &mut Problem<'_>,
    x: &[f64],
    termination: Termination,
    free: &[Param],
) -> Result<FitResult> {
    let (r, pt) = problem.residuals(x)?;
    let chi2 = chi2_of(&r);
    // One order-checked evaluation at the optimum.
    LensModel::default().trace(&spec.scenario_at(pt.t_on), &pt.lens, &trace.t)?;
    let covariance = problem.covariance(&pt, free)?;
    if covariance.is_none() {
        warn!("curvature matrix is singular; covariance unavailable");
    }
    Ok(FitResult {
        params: pt.lens,
        amplitude: pt.amplitude,
        t_on: pt.t_on,
        free: free.to_vec(),
        chi2,
        dof: trace.len().saturating_sub(free.len()),
        covariance,
        n_evals: problem.evals,
        converged: termination != Termination::BudgetExhausted,
        termination,
    })
}

/// Refits with `pinned` held at the value already in `start` (or tied),
/// warm-started and polished by Levenberg–Marquardt only.
fn refit(
    trace: &TimeTrace,
    spec: &FitSpec,
    start: FitPoint,
    pinned: Param,
    tie: Tie,
) -> Result<(f64, FitPoint)> {
    let free: Vec<Param> = spec.free.iter().copied().filter(|&p| p != pinned).collect();
    let mut problem = Problem::new(trace, spec, start, &free, tie)?;
    let x0 = problem.start();
    let x = if problem.vars.is_empty() {
        x0
    } else {
        problem.levenberg_marquardt(x0, spec.max_evals)?.0
    };
    let (r, pt) = problem.residuals(&x)?;
    Ok((chi2_of(&r), pt))
}

/// Initial guess for a pump-on coincidence trace.
///
/// The amplitude is the baseline mean. The thermal time is twice the delay
/// to half the fast drop, where the fast drop is read off a straight line
/// through the late part of the trace extrapolated back to the shutter. The
/// Soret time comes from the ratio of successive decrements of the late
/// trace. k = 1/duration and c_r = 0.9. The phase amplitudes start from a
/// linear fit of the drop to small-amplitude model curves.
///
/// Large phases make that linear estimate crude, so the guess is refined on
/// a 3×3 grid of (t_th, t_s) around the shape estimates: at each grid point
/// θ_th, θ_s, c_r and the amplitude are fitted with the timescales held, and
/// the best point wins. Those parameters reuse the cached phase grids, so
/// the refinement costs about one trace evaluation per grid point.
pub fn initial_guess(trace: &TimeTrace, scenario: &Scenario, base: &LensParams) -> Result<FitPoint> {
    let guess = shape_guess(trace, scenario, base)?;
    if trace.baseline_len(scenario.t_off) <= trace.baseline_len(scenario.t_on) + 20 {
        return Ok(guess);
    }
    let spec = FitSpec::new(
        *scenario,
        guess,
        vec![Param::ThetaTh, Param::ThetaS, Param::CR, Param::Amplitude],
    );
    spec.validate()?;
    let (th_lo, th_hi) = spec.bounds.t_th;
    let (ts_lo, ts_hi) = spec.bounds.t_s;
    let mut best = (f64::INFINITY, guess);
    for f_th in [0.5, 1.0, 2.0] {
        let t_th = (f_th * guess.lens.t_th).clamp(th_lo, th_hi);
        for f_s in [1.0 / 3.0, 1.0, 3.0] {
            let t_s = (f_s * guess.lens.t_s).clamp((3.0 * t_th).max(ts_lo), ts_hi);
            let mut start = guess;
            start.lens.t_th = t_th;
            start.lens.t_s = t_s;
            let mut problem = Problem::new(trace, &spec, start, &spec.free, Tie::None)?;
            let x0 = problem.start();
            let (x, chi2, _) = problem.levenberg_marquardt(x0, GUESS_EVALS)?;
            if chi2 < best.0 {
                best = (chi2, problem.residuals(&x)?.1);
            }
        }
    }
    // Keep both phase amplitudes off the zero bound so neither term starts
    // switched off.
    let floor = 0.05 * (best.1.lens.theta_th + best.1.lens.theta_s);
    best.1.lens.theta_th = best.1.lens.theta_th.max(floor);
    best.1.lens.theta_s = best.1.lens.theta_s.max(floor);
    debug!("initial guess {:?} with chi2 {}", best.1, best.0);
    Ok(best.1)
}

/// Evaluation budget of each grid point in [`initial_guess`].
const GUESS_EVALS: usize = 60;

fn shape_guess(trace: &TimeTrace, scenario: &Scenario, base: &LensParams) -> Result<FitPoint> {
    trace.validate()?;
    scenario.validate()?;
    let bounds = Bounds::around(scenario.t_on);
    let nb = trace.baseline_len(scenario.t_on);
    let c: Vec<f64> = trace.c.iter().map(|&v| v as f64).collect();
    let head = if nb > 0 { nb } else { c.len().min(10) };
    if head == 0 {
        return Err(Error::Contract("cannot initialise from an empty trace".into()));
    }
    let amplitude = c[..head].iter().sum::<f64>() / head as f64;
    if !(amplitude > 0.0) {
        return Err(Error::Contract("baseline has no coincidences".into()));
    }
    let end = trace.t.partition_point(|&t| t < scenario.t_off);
    let on: Vec<(f64, f64)> = (nb..end).map(|j| (trace.t[j] - scenario.t_on, c[j] / amplitude)).collect();
    let mut guess = FitPoint {
        lens: LensParams {
            k: 1.0 / scenario.duration,
            c_r: 0.9,
            ..*base
        },
        amplitude,
        t_on: scenario.t_on,
    };
    if on.len() < 20 {
        return Ok(guess);
    }
    let span = on.last().expect("non-empty").0;

    // Straight line through the last 40 % of the pump-on segment.
    let late = &on[on.len() * 3 / 5..];
    let n = late.len() as f64;
    let (sx, sy) = late.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / n, sy / n);
    let sxx: f64 = late.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = late.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let knee = my - slope * mx;
    let fast_drop = 1.0 - knee;

    let smooth = |i: usize| {
        let lo = i.saturating_sub(1);
        let hi = (i + 2).min(on.len());
        on[lo..hi].iter().map(|p| p.1).sum::<f64>() / (hi - lo) as f64
    };
    let t_half = (0..on.len())
        .find(|&i| 1.0 - smooth(i) >= 0.5 * fast_drop)
        .map(|i| on[i].0)
        .unwrap_or(0.05 * span);
    guess.lens.t_th = (2.0 * t_half).clamp(bounds.t_th.0.max(trace.bin_width), bounds.t_th.1);

    // Successive decrements of three block means over the last 60 %.
    let tail = &on[on.len() * 2 / 5..];
    let third = tail.len() / 3;
    let block = |k: usize| tail[k * third..(k + 1) * third].iter().map(|p| p.1).sum::<f64>() / third as f64;
    let (b0, b1, b2) = (block(0), block(1), block(2));
    let spacing = third as f64 * trace.bin_width;
    let ratio = (b0 - b1) / (b1 - b2);
    let tau = if ratio.is_finite() && ratio > 1.0 { spacing / ratio.ln() } else { span };
    guess.lens.t_s = tau.clamp((5.0 * guess.lens.t_th).max(bounds.t_s.0), bounds.t_s.1);

    // Amplitudes from a linear fit of 1 − T to small-amplitude responses.
    let eps = 1e-3;
    let model = LensModel::default().with_order_check(false);
    let times: Vec<f64> = on.iter().map(|p| p.0).collect();
    let unit = |theta_th: f64, theta_s: f64| -> Result<Vec<f64>> {
        let p = LensParams {
            theta_th,
            theta_s,
            ..guess.lens
        };
        Ok(model.pump_on_curve(&p, &times)?.iter().map(|t| (1.0 - t) / eps).collect())
    };
    let (u_th, u_s) = (unit(eps, 0.0)?, unit(0.0, eps)?);
    let drop: Vec<f64> = on.iter().map(|p| 1.0 - p.1).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let m = nalgebra::Matrix2::new(dot(&u_th, &u_th), dot(&u_th, &u_s), dot(&u_s, &u_th), dot(&u_s, &u_s));
    let rhs = nalgebra::Vector2::new(dot(&u_th, &drop), dot(&u_s, &drop));
    let floor = 1e-3;
    if let Some(sol) = m.try_inverse().map(|inv| inv * rhs) {
        guess.lens.theta_th = sol[0].clamp(floor, bounds.theta_th.1);
        guess.lens.theta_s = sol[1].clamp(floor, bounds.theta_s.1);
    } else {
        guess.lens.theta_th = (fast_drop).clamp(floor, bounds.theta_th.1);
        guess.lens.theta_s = (knee - on.last().expect("non-empty").1).clamp(floor, bounds.theta_s.1);
    }
    Ok(guess)
}

/// Options for [`profile_timescales`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Grid points per profiled timescale (0 skips the grids).
    pub grid_points: usize,
    /// The grid spans [estimate/span, estimate·span] on a log scale.
    pub span: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            grid_points: 7,
            span: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub param: Param,
    pub values: Vec<f64>,
    pub chi2: Vec<f64>,
}

impl Profile {
    /// Grid value with the lowest chi2.
    pub fn argmin(&self) -> Option<f64> {
        self.values
            .iter()
            .zip(&self.chi2)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(v, _)| *v)
    }
}

/// How a timescale is removed from the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    /// k = 0: no photochemical decay.
    NoDecay,
    /// t_s = t_th: a single diffusive timescale.
    SoretTiedToThermal,
    /// t_th at its lower bound: an instantaneous thermal response.
    InstantThermal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedFit {
    pub param: Param,
    pub degeneracy: Degeneracy,
    pub chi2: f64,
    /// chi2 of the pinned refit minus the best-fit chi2.
    pub delta_chi2: f64,
    pub params: LensParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimescaleProfiles {
    pub best_chi2: f64,
    pub profiles: Vec<Profile>,
    pub pinned: Vec<PinnedFit>,
}

/// One-dimensional chi2 profiles of the free timescales (t_th, t_s, k)
/// around a completed fit, each grid point re-optimising the other free
/// parameters, plus the chi2 cost of removing each timescale.
pub fn profile_timescales(
    trace: &TimeTrace,
    spec: &FitSpec,
    result: &FitResult,
    options: &ProfileOptions,
) -> Result<TimescaleProfiles> {
    check_trace(trace, spec)?;
    if !(options.span > 1.0) {
        return Err(Error::Invalid(format!("profile span must exceed 1, got {}", options.span)));
    }
    let best = result.point();
    let timescales: Vec<Param> = [Param::TTh, Param::TS, Param::K]
        .into_iter()
        .filter(|p| spec.free.contains(p))
        .collect();

    let mut jobs: Vec<(Param, f64)> = Vec::new();
    for &p in &timescales {
        let centre = best.get(p);
        let (lo, hi) = spec.bounds.get(p);
        if !(centre > 0.0) || options.grid_points == 0 {
            continue;
        }
        let half = (options.grid_points as f64 - 1.0) / 2.0;
        for i in 0..options.grid_points {
            let f = if half > 0.0 { (i as f64 - half) / half } else { 0.0 };
            jobs.push((p, (centre * options.span.powf(f)).clamp(lo, hi)));
        }
    }
    let grid: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(p, v)| {
            let mut start = best;
            start.set(p, v);
            refit(trace, spec, start, p, Tie::None).map(|r| r.0)
        })
        .collect();
    let mut profiles: Vec<Profile> = Vec::new();
    for ((p, v), chi2) in jobs.into_iter().zip(grid) {
        let chi2 = chi2?;
        match profiles.iter_mut().find(|pr| pr.param == p) {
            Some(pr) => {
                pr.values.push(v);
                pr.chi2.push(chi2);
            }
            None => profiles.push(Profile {
                param: p,
                values: vec![v],
                chi2: vec![chi2],
            }),
        }
    }

    let degenerate: Vec<(Param, Degeneracy)> = timescales
        .iter()
        .map(|&p| match p {
            Param::K => (p, Degeneracy::NoDecay),
            Param::TS => (p, Degeneracy::SoretTiedToThermal),
            _ => (p, Degeneracy::InstantThermal),
        })
        .collect();
    let pinned: Vec<Result<PinnedFit>> = degenerate
        .par_iter()
        .map(|&(p, d)| {
            let mut start = best;
            let tie = match d {
                Degeneracy::NoDecay => {
                    start.lens.k = 0.0;
                    Tie::None
                }
                Degeneracy::SoretTiedToThermal => {
                    start.lens.t_s = start.lens.t_th;
                    Tie::SoretToThermal
                }
                Degeneracy::InstantThermal => {
                    start.lens.t_th = spec.bounds.t_th.0;
                    Tie::None
                }
            };
            let (chi2, pt) = refit(trace, spec, start, p, tie)?;
            Ok(PinnedFit {
                param: p,
                degeneracy: d,
                chi2,
                delta_chi2: chi2 - result.chi2,
                params: pt.lens,
            })
        })
        .collect();
    Ok(TimescaleProfiles {
        best_chi2: result.chi2,
        profiles,
        pinned: pinned.into_iter().collect::<Result<_>>()?,
    })
}

//! Limited-memory BFGS with a strong-Wolfe bracket-and-zoom line search.
//!
//! The search direction comes from the usual two-loop recursion over the
//! last `memory` curvature pairs, with the initial inverse Hessian scaled by
//! `s'y / y'y` of the newest pair. A step is only accepted when it satisfies
//! both strong Wolfe conditions; if the line search cannot find one the
//! minimizer stops at the current point.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Curvature pairs with `s'y` at or below this are dropped.
const MIN_CURVATURE: f64 = 1e-10;
/// Wolfe points with a smaller relative slope are not polished.
const POLISH_SLOPE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub max_line_search_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 200,
            grad_tol: 1e-6,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search_steps: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::InvalidParameter(
                "Wolfe constants must satisfy 0 < c1 < c2 < 1".into(),
            ));
        }
        if self.memory == 0 || self.max_line_search_steps == 0 {
            return Err(Error::InvalidParameter(
                "memory and line-search budget must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
}

/// One accepted line-search step, kept so callers can audit the Wolfe conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineStep {
    pub alpha: f64,
    pub f_start: f64,
    pub f_end: f64,
    /// Directional derivative at the start of the step.
    pub slope_start: f64,
    /// Directional derivative at the accepted point.
    pub slope_end: f64,
}

impl LineStep {
    pub fn satisfies_strong_wolfe(&self, c1: f64, c2: f64) -> bool {
        self.f_end <= self.f_start + c1 * self.alpha * self.slope_start
            && self.slope_end.abs() <= c2 * self.slope_start.abs()
    }
}

#[derive(Debug, Clone)]
pub struct OptResult {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub grad_norm: f64,
    pub iters: usize,
    pub converged: bool,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub steps: Vec<LineStep>,
    pub stop: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn two_loop(grad: &[f64], pairs: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = pairs.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for (p, a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - b) * si;
        }
    }
    for qi in &mut q {
        *qi = -*qi;
    }
    q
}

struct Probe {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Minimizer of the cubic through two points with values and slopes,
/// falling back to bisection when the cubic is unusable.
fn cubic_step(a: &Probe, b: &Probe) -> f64 {
    let mid = 0.5 * (a.alpha + b.alpha);
    if !(a.f.is_finite() && b.f.is_finite() && a.slope.is_finite() && b.slope.is_finite()) {
        return mid;
    }
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    let (lo, hi) = if a.alpha < b.alpha {
        (a.alpha, b.alpha)
    } else {
        (b.alpha, a.alpha)
    };
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        mid
    }
}

/// Unrestricted minimizer of the cubic through two probes, if it has one.
fn cubic_minimizer(a: &Probe, b: &Probe) -> Option<f64> {
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc.is_nan() || disc < 0.0 {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    (t.is_finite() && t > 0.0).then_some(t)
}

struct LineSearch<'a, F> {
    objective: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    fn probe(&mut self, alpha: f64) -> Option<Probe> {
        if self.budget == 0 {
            return None;
        }
        self.budget -= 1;
        let x: Vec<f64> = self
            .x
            .iter()
            .zip(self.dir)
            .map(|(xi, di)| xi + alpha * di)
            .collect();
        let (f, g) = (self.objective)(&x);
        let slope = if g.iter().all(|v| v.is_finite()) {
            dot(&g, self.dir)
        } else {
            f64::NAN
        };
        let f = if f.is_finite() && slope.is_finite() {
            f
        } else {
            f64::INFINITY
        };
        Some(Probe {
            alpha,
            f,
            slope,
            x,
            g,
        })
    }

    fn armijo_fails(&self, p: &Probe) -> bool {
        !p.f.is_finite() || p.f > self.f0 + self.c1 * p.alpha * self.slope0
    }

    fn curvature_holds(&self, p: &Probe) -> bool {
        p.slope.abs() <= -self.c2 * self.slope0
    }

    /// Finds a strong-Wolfe point, then tries the cubic minimizer through the
    /// start and that point. The extra probe replaces the Wolfe point only if
    /// it also satisfies both conditions and lowers the objective. On a
    /// quadratic the cubic is exact, so the search returns the exact line
    /// minimizer and the outer iteration terminates in at most `d + 1` steps.
    fn run(mut self, alpha0: f64) -> Option<Probe> {
        let found = self.search(alpha0)?;
        if found.slope.abs() <= POLISH_SLOPE * self.slope0.abs() {
            return Some(found);
        }
        let start = Probe {
            alpha: 0.0,
            f: self.f0,
            slope: self.slope0,
            x: Vec::new(),
            g: Vec::new(),
        };
        let Some(t) = cubic_minimizer(&start, &found) else {
            return Some(found);
        };
        if (t - found.alpha).abs() <= 1e-12 * found.alpha {
            return Some(found);
        }
        match self.probe(t) {
            Some(p) if !self.armijo_fails(&p) && self.curvature_holds(&p) && p.f <= found.f => {
                Some(p)
            }
            _ => Some(found),
        }
    }

    fn search(&mut self, alpha0: f64) -> Option<Probe> {
        let start = Probe {
            alpha: 0.0,
            f: self.f0,
            slope: self.slope0,
            x: self.x.to_vec(),
            g: Vec::new(),
        };
        let mut prev = start;
        let mut alpha = alpha0;
        let mut first = true;
        loop {
            let cur = self.probe(alpha)?;
            if !cur.f.is_finite() {
                // Shrink toward the last good point; never accept.
                return self.zoom(prev, cur);
            }
            if self.armijo_fails(&cur) || (!first && cur.f >= prev.f) {
                return self.zoom(prev, cur);
            }
            if self.curvature_holds(&cur) {
                return Some(cur);
            }
            if cur.slope >= 0.0 {
                return self.zoom(cur, prev);
            }
            first = false;
            alpha = 2.0 * cur.alpha;
            prev = cur;
        }
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe) -> Option<Probe> {
        loop {
            if (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1e-300) {
                return None;
            }
            let alpha = if hi.f.is_finite() {
                cubic_step(&lo, &hi)
            } else {
                0.5 * (lo.alpha + hi.alpha)
            };
            let cur = self.probe(alpha)?;
            if self.armijo_fails(&cur) || cur.f >= lo.f {
                hi = cur;
                continue;
            }
            if self.curvature_holds(&cur) {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
}

/// Minimizes `objective`, which returns the value and gradient at a point.
pub fn minimize<F>(mut objective: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    cfg.validate()?;
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x);
    if g.len() != x.len() {
        return Err(Error::InvalidParameter(format!(
            "gradient has {} components for a {}-dimensional point",
            g.len(),
            x.len()
        )));
    }
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteStart);
    }

    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut trace = vec![f];
    let mut steps = Vec::new();
    let mut iters = 0;
    let mut stop = StopReason::MaxIterations;

    loop {
        let gnorm = norm(&g);
        if gnorm < cfg.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        if iters >= cfg.max_iters {
            break;
        }

        let mut dir = two_loop(&g, &pairs);
        let mut slope = dot(&g, &dir);
        if !slope.is_finite() || slope >= 0.0 {
            pairs.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let alpha0 = if pairs.is_empty() {
            (1.0 / norm(&dir)).min(1.0)
        } else {
            1.0
        };

        let search = LineSearch {
            objective: &mut objective,
            x: &x,
            dir: &dir,
            f0: f,
            slope0: slope,
            c1: cfg.wolfe_c1,
            c2: cfg.wolfe_c2,
            budget: cfg.max_line_search_steps,
        };
        let Some(accepted) = search.run(alpha0) else {
            stop = StopReason::LineSearchFailed;
            break;
        };

        let step = LineStep {
            alpha: accepted.alpha,
            f_start: f,
            f_end: accepted.f,
            slope_start: slope,
            slope_end: accepted.slope,
        };
        assert!(
            step.satisfies_strong_wolfe(cfg.wolfe_c1, cfg.wolfe_c2),
            "accepted step violates the strong Wolfe conditions: {step:?}"
        );

        let s: Vec<f64> = accepted.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = accepted.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > MIN_CURVATURE {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back(Pair {
                s,
                y,
                rho: 1.0 / sy,
            });
        }

        x = accepted.x;
        f = accepted.f;
        g = accepted.g;
        trace.push(f);
        steps.push(step);
        iters += 1;
    }

    let grad_norm = norm(&g);
    Ok(OptResult {
        x_star: x,
        f_star: f,
        grad_norm,
        iters,
        converged: stop == StopReason::GradientTolerance,
        trace,
        steps,
        stop,
    })
}

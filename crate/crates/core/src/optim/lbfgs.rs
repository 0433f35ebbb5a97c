use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::mean_abs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    /// Number of stored `(s, y)` pairs.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once the mean absolute gradient entry is at or below this.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Upper bound of the backtracking factor.
    pub shrink: f64,
    pub max_backtracks: usize,
    /// After an accepted step, try the secant minimizer along the search
    /// direction and keep it if it is lower. Exact on quadratics.
    pub refine: bool,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-6,
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 30,
            refine: true,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::Config("lbfgs memory must be at least 1".into()));
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(Error::Config(format!("lbfgs c1 = {} must lie in (0, 1)", self.c1)));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Config(format!("lbfgs shrink = {} must lie in (0, 1)", self.shrink)));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::Config("lbfgs grad_tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub theta: Vec<f64>,
    pub value: f64,
    pub mean_abs_grad: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Times the history was cleared after a failed line search.
    pub restarts: usize,
    pub evaluations: usize,
    /// The line search failed from a steepest-descent direction; `theta` is
    /// the best iterate.
    pub stalled: bool,
    /// The stall happened because every trial point was non-finite.
    pub stall_non_finite: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn finite(v: f64, g: &[f64]) -> bool {
    v.is_finite() && g.iter().all(|x| x.is_finite())
}

/// `-H g` by the two-loop recursion with `H₀ = (sᵀy / yᵀy) I`.
fn direction(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn run<F>(mut f: F, theta0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let mut x = theta0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    if !finite(fx, &g) {
        return Err(Error::NumericalFailure("non-finite loss or gradient at the starting point".into()));
    }
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut restarts = 0;
    let mut iterations = 0;
    let mut stall = None;
    let done = |g: &[f64]| mean_abs(g) <= cfg.grad_tol;

    while !done(&g) && iterations < cfg.max_iters {
        let mut d = direction(&g, &hist);
        let mut gd = dot(&g, &d);
        if !(gd < 0.0) || !gd.is_finite() {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
            gd = -dot(&g, &g);
        }
        let mut alpha = if hist.is_empty() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        let mut saw_non_finite = false;
        let mut trial = vec![0.0; x.len()];
        for _ in 0..=cfg.max_backtracks {
            for ((t, xi), di) in trial.iter_mut().zip(&x).zip(&d) {
                *t = xi + alpha * di;
            }
            let (ft, gt) = f(&trial)?;
            evaluations += 1;
            if finite(ft, &gt) {
                if ft <= fx + cfg.c1 * alpha * gd {
                    accepted = Some((alpha, ft, gt));
                    break;
                }
                // Minimizer of the quadratic through f(0), f'(0), f(α),
                // safeguarded to [0.1α, shrink·α].
                let denom = 2.0 * (ft - fx - gd * alpha);
                let interp = if denom > 0.0 { -gd * alpha * alpha / denom } else { 0.0 };
                alpha = interp.clamp(0.1 * alpha, cfg.shrink * alpha);
            } else {
                saw_non_finite = true;
                alpha *= cfg.shrink;
            }
        }

        let Some((mut step, mut f_new, mut g_new)) = accepted else {
            if hist.is_empty() {
                stall = Some(saw_non_finite);
                break;
            }
            hist.clear();
            restarts += 1;
            iterations += 1;
            continue;
        };

        if cfg.refine {
            let gdn = dot(&g_new, &d);
            let curv = gdn - gd;
            if curv > 0.0 && gdn.abs() > 1e-12 * gd.abs() {
                let a_s = step * (-gd) / curv;
                if a_s.is_finite() && a_s > 0.0 && (a_s - step).abs() > 1e-9 * step {
                    for ((t, xi), di) in trial.iter_mut().zip(&x).zip(&d) {
                        *t = xi + a_s * di;
                    }
                    let (fs, gs) = f(&trial)?;
                    evaluations += 1;
                    if finite(fs, &gs) && fs < f_new {
                        step = a_s;
                        f_new = fs;
                        g_new = gs;
                    }
                }
            }
        }

        let s: Vec<f64> = d.iter().map(|di| step * di).collect();
        let x_new: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if hist.len() == cfg.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        iterations += 1;
    }

    Ok(LbfgsResult {
        mean_abs_grad: mean_abs(&g),
        converged: done(&g),
        theta: x,
        value: fx,
        iterations,
        restarts,
        evaluations,
        stalled: stall.is_some(),
        stall_non_finite: stall.unwrap_or(false),
    })
}

/// Minimize `f` from `theta0`. `f` returns the value and gradient.
///
/// Stops when the mean absolute gradient reaches `cfg.grad_tol` or after
/// `cfg.max_iters` iterations. A line search that fails clears the history
/// and retries along the steepest-descent direction; if that also fails the
/// call returns [`Error::LineSearch`] carrying the best iterate.
pub fn lbfgs_minimize<F>(f: F, theta0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let r = run(f, theta0, cfg)?;
    if r.stalled {
        return Err(Error::LineSearch {
            best: r.theta,
            best_value: r.value,
            iterations: r.iterations,
            non_finite: r.stall_non_finite,
        });
    }
    Ok(r)
}

/// Like [`lbfgs_minimize`], but a stall with finite values returns the best
/// iterate (with `stalled` set) instead of an error. Non-finite stalls still
/// fail.
pub fn accept_stall<F>(f: F, theta0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let r = run(f, theta0, cfg)?;
    if r.stalled && r.stall_non_finite {
        return Err(Error::LineSearch {
            best: r.theta,
            best_value: r.value,
            iterations: r.iterations,
            non_finite: true,
        });
    }
    Ok(r)
}

/// Runs until convergence, the iteration cap or a stall of any kind, and
/// returns the best iterate. Used where non-finite values mark a region the
/// iterates must not enter.
pub(crate) fn minimize_until_stall<F>(f: F, theta0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    run(f, theta0, cfg)
}

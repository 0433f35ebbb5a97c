use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::lbfgs::{accept_stall, minimize_until_stall, LbfgsConfig};
use super::nadam::{nadam_step, NadamState};
use super::{ConstrainedProblem, TraceRow};
use crate::error::{Error, Result};
use crate::objectives::mean_abs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualAscentConfig {
    /// Maximum dual iteration index (`D_m`); the loop runs `0..=d_max`.
    pub d_max: usize,
    /// Maximum primal iteration index (`P_m`).
    pub p_max: usize,
    /// Constraint tolerance on `mean |Q|`.
    pub eps_lambda: f64,
    /// Primal stationarity tolerance on `mean |∇ℒ|`.
    pub eps_pr: f64,
    /// LMA linearization feasibility tolerance on `mean |Q̄ − Q|`.
    pub eps_l: f64,
    pub lbfgs: LbfgsConfig,
}

impl Default for DualAscentConfig {
    fn default() -> Self {
        Self {
            d_max: 50,
            p_max: 20,
            eps_lambda: 1e-4,
            eps_pr: 1e-6,
            eps_l: 1e-4,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

impl DualAscentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_lambda", self.eps_lambda),
            ("eps_pr", self.eps_pr),
            ("eps_l", self.eps_l),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        self.lbfgs.validate()
    }
}

/// Which primal subproblem each dual iteration solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimalKind {
    /// Linearized constraints, plain Lagrangian.
    Lma,
    /// Augmented Lagrangian with penalty `rho`.
    Alma { rho: f64 },
}

/// The multiplier update `λ ← λ + step(Q)`.
#[derive(Debug, Clone, PartialEq)]
pub enum DualRule {
    /// `λ += α Q`.
    Gradient { alpha: f64 },
    /// Nadam ascent with gradient `Q`.
    Nadam { alpha: f64, state: NadamState },
    /// `λ += ρ Q`.
    Penalty { rho: f64 },
}

impl DualRule {
    fn apply(&mut self, lambda: &mut [f64], q: &[f64]) -> Result<()> {
        match self {
            DualRule::Gradient { alpha } => {
                lambda.iter_mut().zip(q).for_each(|(l, v)| *l += *alpha * v);
                Ok(())
            }
            DualRule::Nadam { alpha, state } => nadam_step(lambda, q, state, *alpha),
            DualRule::Penalty { rho } => {
                lambda.iter_mut().zip(q).for_each(|(l, v)| *l += *rho * v);
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalOutcome {
    pub theta: Vec<f64>,
    pub primal_iters: usize,
    pub value: f64,
    pub mean_abs_grad: f64,
    /// `mean |Q̄ − Q|` at the returned point (LMA; zero for ALMA).
    pub feasibility_gap: f64,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualOutcome {
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Residual at the returned `theta`.
    pub q: Vec<f64>,
    pub dual_iters: usize,
    pub converged: bool,
    pub mean_abs_q: f64,
    /// `mean |∇ℒ(θ, λ)|` at the returned pair.
    pub mean_abs_grad: f64,
    /// Mean absolute change of `Q` over the last dual iteration, if there
    /// were at least two.
    pub mean_abs_dq: Option<f64>,
    /// The pass started from `λ = 0` and did a plain fit.
    pub unconstrained: bool,
    pub trace: Vec<TraceRow>,
}

/// `ℒ = J + λᵀQ + ρ ΣQ²` with its gradient and `Q`.
pub(crate) fn lagrangian_eval(
    problem: &dyn ConstrainedProblem,
    theta: &[f64],
    lambda: &[f64],
    rho: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (j, mut grad) = problem.objective(theta)?;
    let q = if problem.n_constraints() == 0 {
        Vec::new()
    } else {
        problem.residual_vjp(theta, &|e, qe| lambda[e] + 2.0 * rho * qe, &mut grad)?
    };
    let lq: f64 = lambda.iter().zip(&q).map(|(l, v)| l * v).sum();
    let sq: f64 = q.iter().map(|v| v * v).sum();
    Ok((j + lq + rho * sq, grad, q))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// LMA primal update: repeatedly linearize at the last feasible point and
/// minimize `J + λᵀQ̄` by L-BFGS.
///
/// The linearized loss is treated as infinite wherever `mean |Q̄ − Q| ≥ ε_l`,
/// so the line search keeps every accepted iterate feasible and the solve
/// ends at the last feasible iterate, which becomes the next linearization
/// point.
pub fn primal_update_lma(
    problem: &dyn ConstrainedProblem,
    theta: &[f64],
    lambda: &[f64],
    cfg: &DualAscentConfig,
) -> Result<PrimalOutcome> {
    let n = problem.n_params();
    let mut theta_hat = theta.to_vec();
    let mut trace = Vec::new();
    let mut last = None;
    for p in 0..=cfg.p_max {
        let start = Instant::now();
        let (q_hat, jac) = problem.jacobian(&theta_hat)?;
        let m = q_hat.len();
        let mut shift = vec![0.0; n];
        for (e, &l) in lambda.iter().enumerate() {
            if l != 0.0 {
                shift.iter_mut().zip(&jac[e * n..(e + 1) * n]).for_each(|(s, j)| *s += l * j);
            }
        }
        let gap_at = |t: &[f64]| -> Result<f64> {
            if m == 0 {
                return Ok(0.0);
            }
            let exact = problem.residual(t)?;
            let sum: f64 = (0..m)
                .map(|e| {
                    let row = &jac[e * n..(e + 1) * n];
                    let lin = q_hat[e] + row.iter().zip(t).zip(&theta_hat).map(|((j, a), b)| j * (a - b)).sum::<f64>();
                    (lin - exact[e]).abs()
                })
                .sum();
            Ok(sum / m as f64)
        };
        let c0: f64 = lambda.iter().zip(&q_hat).map(|(l, q)| l * q).sum();
        let objective = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
            let g = gap_at(t)?;
            if !(g < cfg.eps_l) {
                return Ok((f64::INFINITY, vec![0.0; n]));
            }
            let (j, mut g) = problem.objective(t)?;
            g.iter_mut().zip(&shift).for_each(|(a, b)| *a += b);
            let delta: f64 = shift.iter().zip(t).zip(&theta_hat).map(|((s, a), b)| s * (a - b)).sum();
            Ok((j + c0 + delta, g))
        };
        let res = minimize_until_stall(objective, &theta_hat, &cfg.lbfgs)?;
        if res.stalled && res.iterations == 0 && res.stall_non_finite {
            return Err(Error::LmaStall(format!(
                "no feasible step from the linearization point at primal iteration {p} (ε_l {:e})",
                cfg.eps_l
            )));
        }
        let gap = gap_at(&res.theta)?;
        theta_hat = res.theta;
        let (value, grad, q) = lagrangian_eval(problem, &theta_hat, lambda, 0.0)?;
        let mean_abs_grad = mean_abs(&grad);
        trace.push(TraceRow {
            outer_iter: 0,
            dual_iter: 0,
            primal_iter: p,
            loss: value,
            mean_abs_grad,
            mean_abs_q: mean_abs(&q),
            wall_ms: ms(start),
        });
        last = Some((p, value, mean_abs_grad, gap));
        if mean_abs_grad < cfg.eps_pr && gap < cfg.eps_l {
            break;
        }
    }
    let (p, value, mean_abs_grad, feasibility_gap) = last.expect("loop runs at least once");
    Ok(PrimalOutcome {
        theta: theta_hat,
        primal_iters: p + 1,
        value,
        mean_abs_grad,
        feasibility_gap,
        trace,
    })
}

/// ALMA primal update: L-BFGS on `J + λᵀQ + ρ ΣQ²`, restarted until the
/// gradient is small or `P_m` is reached.
pub fn primal_update_alma(
    problem: &dyn ConstrainedProblem,
    theta: &[f64],
    lambda: &[f64],
    rho: f64,
    cfg: &DualAscentConfig,
) -> Result<PrimalOutcome> {
    if !(rho > 0.0) {
        return Err(Error::Config(format!("penalty rho must be positive, got {rho}")));
    }
    let mut theta = theta.to_vec();
    let mut trace = Vec::new();
    let mut last = None;
    for p in 0..=cfg.p_max {
        let start = Instant::now();
        let res = accept_stall(
            |t: &[f64]| lagrangian_eval(problem, t, lambda, rho).map(|(v, g, _)| (v, g)),
            &theta,
            &cfg.lbfgs,
        )?;
        theta = res.theta;
        let q = problem.residual(&theta)?;
        trace.push(TraceRow {
            outer_iter: 0,
            dual_iter: 0,
            primal_iter: p,
            loss: res.value,
            mean_abs_grad: res.mean_abs_grad,
            mean_abs_q: mean_abs(&q),
            wall_ms: ms(start),
        });
        last = Some((p, res.value, res.mean_abs_grad));
        if res.mean_abs_grad < cfg.eps_pr || res.stalled {
            break;
        }
    }
    let (p, value, mean_abs_grad) = last.expect("loop runs at least once");
    Ok(PrimalOutcome {
        theta,
        primal_iters: p + 1,
        value,
        mean_abs_grad,
        feasibility_gap: 0.0,
        trace,
    })
}

/// Alternate primal minimization and multiplier ascent.
///
/// When `λ₀` is all zeros the pass is a single plain L-BFGS fit of `J`
/// followed by one multiplier update. Otherwise the loop runs until
/// `mean |Q| < ε_λ` and `mean |∇ℒ| < ε_pr` or `d_max` is exhausted.
pub fn dual_ascent(
    problem: &dyn ConstrainedProblem,
    theta0: &[f64],
    lambda0: &[f64],
    primal: PrimalKind,
    rule: &mut DualRule,
    cfg: &DualAscentConfig,
) -> Result<DualOutcome> {
    cfg.validate()?;
    if theta0.len() != problem.n_params() {
        return Err(Error::Shape {
            context: "primal start",
            expected: problem.n_params(),
            got: theta0.len(),
        });
    }
    if lambda0.len() != problem.n_constraints() {
        return Err(Error::Shape {
            context: "multipliers",
            expected: problem.n_constraints(),
            got: lambda0.len(),
        });
    }
    let rho = match primal {
        PrimalKind::Alma { rho } => rho,
        PrimalKind::Lma => 0.0,
    };
    let mut theta = theta0.to_vec();
    let mut lambda = lambda0.to_vec();
    let mut prev_q: Option<Vec<f64>> = None;
    let mut trace = Vec::new();
    let unconstrained = lambda.iter().all(|l| *l == 0.0);
    let mut out = None;
    for d in 0..=cfg.d_max {
        let start = Instant::now();
        let wrap = |e: Error, prev: &Option<Vec<f64>>| Error::Dual {
            dual_iter: d,
            mean_abs_q: prev.as_deref().map(mean_abs).unwrap_or(f64::NAN),
            source: Box::new(e),
        };
        if unconstrained {
            let res = accept_stall(|t: &[f64]| problem.objective(t), &theta, &cfg.lbfgs)
                .map_err(|e| wrap(e, &prev_q))?;
            theta = res.theta;
        } else {
            let res = match primal {
                PrimalKind::Lma => primal_update_lma(problem, &theta, &lambda, cfg),
                PrimalKind::Alma { rho } => primal_update_alma(problem, &theta, &lambda, rho, cfg),
            }
            .map_err(|e| wrap(e, &prev_q))?;
            theta = res.theta;
            trace.extend(res.trace.into_iter().map(|mut r| {
                r.dual_iter = d;
                r
            }));
        }
        let q = problem.residual(&theta).map_err(|e| wrap(e, &prev_q))?;
        let dq = prev_q.as_ref().map(|p| {
            if q.is_empty() {
                0.0
            } else {
                q.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / q.len() as f64
            }
        });
        rule.apply(&mut lambda, &q).map_err(|e| wrap(e, &prev_q))?;
        let (value, grad, _) =
            lagrangian_eval(problem, &theta, &lambda, rho).map_err(|e| wrap(e, &prev_q))?;
        let (mq, mg) = (mean_abs(&q), mean_abs(&grad));
        if unconstrained {
            trace.push(TraceRow {
                outer_iter: 0,
                dual_iter: d,
                primal_iter: 0,
                loss: value,
                mean_abs_grad: mg,
                mean_abs_q: mq,
                wall_ms: ms(start),
            });
        }
        let converged = mq < cfg.eps_lambda && mg < cfg.eps_pr;
        out = Some((d, converged, mq, mg, dq, q.clone()));
        if converged || unconstrained {
            break;
        }
        prev_q = Some(q);
    }
    let (d, converged, mean_abs_q, mean_abs_grad, mean_abs_dq, q) =
        out.expect("loop runs at least once");
    Ok(DualOutcome {
        theta,
        lambda,
        q,
        dual_iters: d + 1,
        converged,
        mean_abs_q,
        mean_abs_grad,
        mean_abs_dq,
        unconstrained,
        trace,
    })
}

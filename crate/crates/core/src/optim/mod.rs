//! L-BFGS, Nadam and the dual-ascent driver with its two primal updates.

mod dual;
mod lbfgs;
mod nadam;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use dual::{
    dual_ascent, primal_update_alma, primal_update_lma, DualAscentConfig, DualOutcome, DualRule,
    PrimalKind, PrimalOutcome,
};
pub(crate) use dual::lagrangian_eval;
pub use lbfgs::{accept_stall, lbfgs_minimize, LbfgsConfig, LbfgsResult};
pub use nadam::{nadam_step, NadamState};

use crate::error::{Error, Result};

/// An objective `J(θ)` with equality constraints `Q(θ) = 0`.
pub trait ConstrainedProblem: Sync {
    fn n_params(&self) -> usize;
    fn n_constraints(&self) -> usize;
    /// `J` and `∇J`.
    fn objective(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn residual(&self, theta: &[f64]) -> Result<Vec<f64>>;
    /// `Q(θ)`, accumulating `Σ_e weight(e, Q_e) ∇Q_e` into `grad`.
    fn residual_vjp(
        &self,
        theta: &[f64],
        weight: &dyn Fn(usize, f64) -> f64,
        grad: &mut [f64],
    ) -> Result<Vec<f64>>;
    /// `Q(θ)` and the row-major Jacobian `∂Q/∂θ`.
    fn jacobian(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// One line of a per-subdomain optimizer trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer_iter: usize,
    pub dual_iter: usize,
    pub primal_iter: usize,
    pub loss: f64,
    pub mean_abs_grad: f64,
    pub mean_abs_q: f64,
    pub wall_ms: f64,
}

pub const TRACE_HEADER: &str = "outer_iter,dual_iter,primal_iter,loss,mean_abs_grad,mean_abs_Q,wall_ms";

/// Append rows to a trace CSV, writing the header if the file is new.
pub fn append_trace(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if fresh {
        writeln!(w, "{TRACE_HEADER}").map_err(io)?;
    }
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:e},{:e},{:e},{:.3}",
            r.outer_iter, r.dual_iter, r.primal_iter, r.loss, r.mean_abs_grad, r.mean_abs_q, r.wall_ms
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

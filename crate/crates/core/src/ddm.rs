//! The outer substructuring loop: predict interfaces, solve every subdomain
//! concurrently against the frozen predictions, refit the interface
//! networks, then test the global convergence criteria.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CollocationMode, Method, RunConfig};
use crate::data::{normalize, Dataset, Normalization, Row};
use crate::decomposition::{
    apply_gap, assign_samples, AssignmentStats, BoundingBox, InterfaceSegment, LocalDataset,
    Location, Partition, Split,
};
use crate::error::{Error, Result};
use crate::metrics;
use crate::mlp::{MlpNetwork, NetworkCheckpoint};
use crate::objectives::{
    constraint_sites, interface_loss, mean_abs, ConstraintBlock, ConstraintSet, InterfaceFitData,
    InterfacePrediction, SubdomainProblem,
};
use crate::optim::{
    accept_stall, append_trace, dual_ascent, lagrangian_eval, ConstrainedProblem, DualRule, LbfgsConfig,
    LbfgsResult, NadamState, PrimalKind, TraceRow,
};

pub const CHECKPOINT_FILE: &str = "model.json";
pub const REPORT_SCHEMA: u32 = 1;

const INTERFACE_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn trace_file_name(subdomain: usize) -> String {
    format!("trace_subdomain_{subdomain}.csv")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceStatus {
    Converged,
    NotConverged,
}

/// All trained state: partition, networks, multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct DdmModel {
    pub partition: Partition,
    pub method: Method,
    pub local_nets: Vec<MlpNetwork>,
    pub interface_nets: Vec<MlpNetwork>,
    /// Concatenated multipliers of every subdomain, blocks in ascending
    /// interface id.
    pub lambdas: Vec<Vec<f64>>,
    /// Per-subdomain Nadam moments (LMA).
    pub nadam: Vec<NadamState>,
    pub rho: f64,
    /// Completed outer iterations.
    pub k: usize,
    pub normalization: Normalization,
    /// Normalized parameter samples at which interface constraints are
    /// imposed; a single empty sample for deterministic data.
    pub samples: Vec<Vec<f64>>,
    pub tol: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema: u32,
    method: Method,
    split: Split,
    bounds: BoundingBox,
    tol: f64,
    rho: f64,
    k: usize,
    normalization: Normalization,
    samples: Vec<Vec<f64>>,
    collocation: Vec<Vec<Vec<f64>>>,
    local_nets: Vec<NetworkCheckpoint>,
    interface_nets: Vec<NetworkCheckpoint>,
    lambdas: Vec<Vec<f64>>,
    nadam: Vec<NadamState>,
    #[serde(default)]
    history: Vec<IterationRecord>,
}

/// Mean `|Q|` of one subdomain's block on one interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResidual {
    pub subdomain: usize,
    pub interface: usize,
    pub mean_abs_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub eps_pr: f64,
    pub eps_lambda: f64,
    pub eps_ij: f64,
}

impl Tolerances {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            eps_pr: cfg.eps_pr,
            eps_lambda: cfg.eps_lambda,
            eps_ij: cfg.eps_ij,
        }
    }
}

/// Values of the three global criteria after one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criteria {
    /// `mean |∇ℒ_i|` per subdomain.
    pub primal: Vec<f64>,
    /// `mean |Q_i(θ^{k+1}) − Q_i(θ^k)|` per subdomain, both against the new
    /// interface predictions. `None` on the first iteration.
    pub dual: Option<Vec<f64>>,
    pub constraint: Vec<PairResidual>,
    pub max_primal: f64,
    pub max_dual: Option<f64>,
    pub max_constraint: f64,
    pub primal_ok: bool,
    pub dual_ok: bool,
    pub constraint_ok: bool,
    pub converged: bool,
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

/// Combine criterion values into a status. The dual criterion counts as
/// unmet while it cannot be evaluated, unless there are no constraints at
/// all.
pub fn check_convergence(
    primal: Vec<f64>,
    dual: Option<Vec<f64>>,
    constraint: Vec<PairResidual>,
    tol: &Tolerances,
) -> Criteria {
    let max_primal = max_of(primal.iter().copied());
    let max_dual = dual.as_ref().map(|d| max_of(d.iter().copied()));
    let max_constraint = max_of(constraint.iter().map(|p| p.mean_abs_q));
    let primal_ok = primal.iter().all(|v| *v <= tol.eps_pr);
    let dual_ok = match &dual {
        Some(d) => d.iter().all(|v| *v <= tol.eps_lambda),
        None => constraint.is_empty(),
    };
    let constraint_ok = constraint.iter().all(|p| p.mean_abs_q <= tol.eps_ij);
    Criteria {
        primal,
        dual,
        constraint,
        max_primal,
        max_dual,
        max_constraint,
        primal_ok,
        dual_ok,
        constraint_ok,
        converged: primal_ok && dual_ok && constraint_ok,
    }
}

/// What one outer iteration did; timing-free so reports are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    /// Every subdomain pass started from zero multipliers (plain fits).
    pub unconstrained: bool,
    /// Local MSE per subdomain after the solve.
    pub losses: Vec<f64>,
    pub interface_losses: Vec<f64>,
    pub interface_iters: Vec<usize>,
    pub dual_iters: Vec<usize>,
    /// Whether each dual ascent met its own tolerances.
    pub dual_converged: Vec<bool>,
    /// Change of `Q` over the last dual iteration of each subdomain.
    pub dual_dq: Vec<Option<f64>>,
    /// Mean `|û_left − û_right|` at each interface's sites, after the
    /// subdomain solve.
    pub interface_jump: Vec<f64>,
    pub mean_jump: f64,
    pub criteria: Criteria,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub k: usize,
    pub predict_ms: f64,
    pub subdomain_ms: f64,
    pub per_subdomain_ms: Vec<f64>,
    pub interface_ms: f64,
    pub check_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub rows: usize,
    pub spatial_dim: usize,
    pub param_dim: usize,
    pub output_dim: usize,
    pub n_samples: usize,
    pub assignment: AssignmentStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    /// Maximum relative error over the full (normalized) training data.
    pub max_e_rel: f64,
    pub argmax_row: usize,
    pub argmax_point: Vec<f64>,
    pub mean_e_rel: f64,
    pub mean_jump: f64,
    /// Jump after the first (unconstrained) pass.
    pub baseline_jump: Option<f64>,
    pub max_mean_abs_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub config: RunConfig,
    pub data: DataSummary,
    pub partition: serde_json::Value,
    pub status: ConvergenceStatus,
    pub outer_iterations: usize,
    pub iterations: Vec<IterationRecord>,
    #[serde(rename = "final")]
    pub final_metrics: Option<FinalMetrics>,
    /// Wall-clock per phase; written to its own file.
    #[serde(skip)]
    pub timings: Vec<PhaseTimings>,
}

impl RunReport {
    pub fn converged(&self) -> bool {
        self.status == ConvergenceStatus::Converged
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl DdmModel {
    fn init(cfg: &RunConfig, setup: &Setup) -> Result<Self> {
        let schema = setup.normalized.schema;
        let mut widths = vec![schema.input_dim()];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(schema.output_dim);
        let n = setup.partition.n_subdomains();
        let local_nets = (0..n)
            .map(|i| MlpNetwork::new(widths.clone(), cfg.activation, cfg.seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let interface_nets = (0..setup.partition.interfaces.len())
            .map(|j| {
                let seed = cfg.seed.wrapping_add(INTERFACE_SEED_OFFSET).wrapping_add(j as u64);
                MlpNetwork::new(widths.clone(), cfg.activation, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self {
            partition: setup.partition.clone(),
            method: cfg.method,
            local_nets,
            interface_nets,
            lambdas: Vec::new(),
            nadam: Vec::new(),
            rho: cfg.rho,
            k: 0,
            normalization: setup.normalization.clone(),
            samples: setup.samples.clone(),
            tol: cfg.tol,
        };
        model.lambdas = (0..n).map(|i| vec![0.0; model.n_constraints(i)]).collect();
        model.nadam = model.lambdas.iter().map(|l| NadamState::new(l.len())).collect();
        Ok(model)
    }

    pub fn n_subdomains(&self) -> usize {
        self.partition.n_subdomains()
    }

    /// Network inputs at which interface `j` is constrained.
    pub fn sites(&self, j: usize) -> Vec<Vec<f64>> {
        constraint_sites(&self.partition.interfaces[j].collocation, &self.samples)
    }

    fn n_constraints(&self, i: usize) -> usize {
        let n_out = self.normalization.schema.output_dim;
        self.partition
            .interfaces_of(i)
            .into_iter()
            .map(|j| 2 * n_out * self.partition.interfaces[j].collocation.len() * self.samples.len())
            .sum()
    }

    /// Values and normal derivatives of every interface net at its sites.
    pub fn predict_interfaces(&self) -> Result<Vec<InterfacePrediction>> {
        self.partition
            .interfaces
            .iter()
            .map(|f| {
                InterfacePrediction::evaluate(f.id, &self.interface_nets[f.id], &self.sites(f.id), &f.normal)
                    .map_err(|e| Error::Interface { id: f.id, source: Box::new(e) })
            })
            .collect()
    }

    /// Constraints of subdomain `i` against the given predictions.
    pub fn constraint_set(&self, i: usize, predictions: &[InterfacePrediction]) -> Result<ConstraintSet> {
        let blocks = self
            .partition
            .interfaces_of(i)
            .into_iter()
            .map(|j| {
                let f = &self.partition.interfaces[j];
                ConstraintBlock::new(self.sites(j), f.normal.clone(), predictions[j].clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ConstraintSet { blocks })
    }

    /// Mean `|û_left − û_right|` at each interface's sites.
    pub fn interface_jumps(&self) -> Result<Vec<f64>> {
        self.partition
            .interfaces
            .iter()
            .map(|f| {
                let sites = self.sites(f.id);
                let l = InterfacePrediction::evaluate(f.id, &self.local_nets[f.left_id], &sites, &f.normal)?;
                let r = InterfacePrediction::evaluate(f.id, &self.local_nets[f.right_id], &sites, &f.normal)?;
                let d: Vec<f64> = l.values.iter().zip(&r.values).map(|(a, b)| a - b).collect();
                Ok(mean_abs(&d))
            })
            .collect()
    }

    /// Prediction at a normalized point. Points on an interface use that
    /// interface's network; everything else its box's local network.
    pub fn evaluate_global(&self, x: &[f64], zeta: &[f64]) -> Result<Vec<f64>> {
        let param_dim = self.normalization.schema.param_dim;
        if zeta.len() != param_dim {
            return Err(Error::Shape {
                context: "parameter sample",
                expected: param_dim,
                got: zeta.len(),
            });
        }
        let net = match self.partition.locate(x, self.tol)? {
            Location::Interface(j) => &self.interface_nets[j],
            Location::Subdomain(i) => &self.local_nets[i],
        };
        let mut input = x.to_vec();
        input.extend_from_slice(zeta);
        net.forward(&input)
    }

    /// Predictions for normalized rows; every out-of-bounds row is listed
    /// in the error.
    pub fn predict(&self, rows: &[Row]) -> Result<Vec<Vec<f64>>> {
        let outside: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.x.len() != self.partition.dim() || !self.partition.bounds.contains(&r.x, self.tol))
            .map(|(i, _)| i)
            .collect();
        if !outside.is_empty() {
            return Err(Error::OutOfDomain { rows: outside });
        }
        rows.iter().map(|r| self.evaluate_global(&r.x, &r.zeta)).collect()
    }

    /// Predictions for a dataset in raw units: normalize inputs, predict,
    /// map outputs back.
    pub fn predict_raw(&self, dataset: &Dataset) -> Result<Dataset> {
        let normalized = self.normalization.apply(dataset)?;
        let pred = self.predict(&normalized.rows)?;
        let rows = normalized
            .rows
            .iter()
            .zip(pred)
            .map(|(r, u)| Row {
                x: r.x.clone(),
                zeta: r.zeta.clone(),
                u,
            })
            .collect();
        Ok(self.normalization.invert(&Dataset::new(normalized.schema, rows)?))
    }

    pub fn save(&self, path: impl AsRef<Path>, history: &[IterationRecord]) -> Result<()> {
        let path = path.as_ref();
        let file = ModelFile {
            schema: REPORT_SCHEMA,
            method: self.method,
            split: self.partition.split.clone(),
            bounds: self.partition.bounds.clone(),
            tol: self.tol,
            rho: self.rho,
            k: self.k,
            normalization: self.normalization.clone(),
            samples: self.samples.clone(),
            collocation: self.partition.interfaces.iter().map(|f| f.collocation.clone()).collect(),
            local_nets: self.local_nets.iter().map(MlpNetwork::to_checkpoint).collect(),
            interface_nets: self.interface_nets.iter().map(MlpNetwork::to_checkpoint).collect(),
            lambdas: self.lambdas.clone(),
            nadam: self.nadam.clone(),
            history: history.to_vec(),
        };
        let text = serde_json::to_string(&file)?;
        // Write then rename so an interrupted run never leaves a torn file.
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Load a checkpoint and the iteration history stored with it.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<IterationRecord>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
        if file.schema != REPORT_SCHEMA {
            return Err(Error::Config(format!("unsupported checkpoint schema {}", file.schema)));
        }
        let mut partition = Partition::grid(file.bounds, file.split)?;
        if file.collocation.len() != partition.interfaces.len() {
            return Err(Error::InconsistentInterface(format!(
                "checkpoint has {} interfaces, partition has {}",
                file.collocation.len(),
                partition.interfaces.len()
            )));
        }
        for (j, pts) in file.collocation.into_iter().enumerate() {
            partition.set_collocation(j, pts)?;
        }
        let nets = |v: Vec<NetworkCheckpoint>| -> Result<Vec<MlpNetwork>> {
            v.into_iter().map(MlpNetwork::from_checkpoint).collect()
        };
        let model = Self {
            method: file.method,
            local_nets: nets(file.local_nets)?,
            interface_nets: nets(file.interface_nets)?,
            lambdas: file.lambdas,
            nadam: file.nadam,
            rho: file.rho,
            k: file.k,
            normalization: file.normalization,
            samples: file.samples,
            tol: file.tol,
            partition,
        };
        model.check()?;
        Ok((model, file.history))
    }

    fn check(&self) -> Result<()> {
        let n = self.n_subdomains();
        if self.local_nets.len() != n || self.lambdas.len() != n || self.nadam.len() != n {
            return Err(Error::Config(format!("checkpoint does not hold {n} subdomains")));
        }
        if self.interface_nets.len() != self.partition.interfaces.len() {
            return Err(Error::Config("checkpoint interface count mismatch".into()));
        }
        let schema = self.normalization.schema;
        for net in self.local_nets.iter().chain(&self.interface_nets) {
            if net.input_dim() != schema.input_dim() || net.output_dim() != schema.output_dim {
                return Err(Error::Config("checkpoint network does not match data schema".into()));
            }
        }
        for i in 0..n {
            if self.lambdas[i].len() != self.n_constraints(i) || self.nadam[i].m.len() != self.lambdas[i].len() {
                return Err(Error::Config(format!("checkpoint multipliers of subdomain {i} have the wrong length")));
            }
        }
        Ok(())
    }
}

/// Fit one interface network to its two frozen neighbours by L-BFGS on the
/// interface loss, warm-started from `net`.
pub fn fit_interface(
    net: &MlpNetwork,
    left: &MlpNetwork,
    right: &MlpNetwork,
    interface: &InterfaceSegment,
    samples: &[Vec<f64>],
    cfg: &LbfgsConfig,
) -> Result<(MlpNetwork, LbfgsResult)> {
    let sites = constraint_sites(&interface.collocation, samples);
    let fit = InterfaceFitData::new(interface.id, sites, interface.normal.clone(), left, right)?;
    let res = accept_stall(|t: &[f64]| interface_loss(&net.with_params_unchecked(t), &fit), net.params(), cfg)?;
    let mut out = net.clone();
    out.set_params(&res.theta)?;
    Ok((out, res))
}

/// Where training artifacts go and whether to continue from `model.json`.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
}

struct Setup {
    normalized: Dataset,
    normalization: Normalization,
    partition: Partition,
    locals: Vec<LocalDataset>,
    stats: AssignmentStats,
    samples: Vec<Vec<f64>>,
}

/// Projections of the data's spatial points onto each interface facet.
fn data_collocation(partition: &mut Partition, normalized: &Dataset, tol: f64) -> Result<()> {
    let points = normalized.spatial_points();
    for j in 0..partition.interfaces.len() {
        let f = &partition.interfaces[j];
        let mut seen = std::collections::HashSet::new();
        let mut pts = Vec::new();
        for p in &points {
            let mut q = p.clone();
            q[f.axis] = f.position;
            if f.facet.contains(&q, tol) && seen.insert(q.iter().map(|v| v.to_bits()).collect::<Vec<_>>()) {
                pts.push(q);
            }
        }
        partition.set_collocation(j, pts)?;
    }
    Ok(())
}

fn setup(cfg: &RunConfig, dataset: &Dataset) -> Result<Setup> {
    if dataset.is_empty() {
        return Err(Error::EmptyData);
    }
    let dim = dataset.schema.spatial_dim;
    if cfg.split.dim() != dim {
        return Err(Error::Config(format!(
            "split {} is {}-dimensional but the data is {dim}-dimensional",
            cfg.split,
            cfg.split.dim()
        )));
    }
    let (normalized, normalization) = normalize(dataset)?;
    let mut partition = Partition::grid(BoundingBox::symmetric_unit(dim), cfg.split.clone())?;
    match cfg.collocation_mode {
        CollocationMode::Uniform => partition = partition.with_collocation(cfg.collocation)?,
        CollocationMode::Data => data_collocation(&mut partition, &normalized, cfg.tol)?,
    }
    let (locals, mut stats) = assign_samples(&normalized, &partition, cfg.tol)?;
    if let Some(empty) = locals.iter().find(|l| l.is_empty()) {
        return Err(Error::EmptySubdomain(empty.subdomain_id));
    }
    let locals = apply_gap(&locals, &partition, cfg.gap_rows, &mut stats)?;
    let samples = normalized.param_samples();
    Ok(Setup {
        normalized,
        normalization,
        partition,
        locals,
        stats,
        samples,
    })
}

/// Train in memory, without artifacts.
pub fn run_ddm(cfg: &RunConfig, dataset: &Dataset) -> Result<(DdmModel, RunReport)> {
    train(cfg, dataset, &TrainOptions::default())
}

/// Train, checkpointing into `opts.out_dir` after every outer iteration.
pub fn train(cfg: &RunConfig, dataset: &Dataset, opts: &TrainOptions) -> Result<(DdmModel, RunReport)> {
    cfg.validate()?;
    let setup = setup(cfg, dataset)?;
    let ckpt = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let resuming = opts.resume && ckpt.as_ref().is_some_and(|p| p.exists());
    let (mut model, mut history) = if resuming {
        let (model, history) = DdmModel::load(ckpt.as_ref().expect("checked"))?;
        if model.method != cfg.method
            || model.partition.split != cfg.split
            || model.normalization != setup.normalization
            || model.partition.interfaces != setup.partition.interfaces
        {
            return Err(Error::Config("checkpoint does not match the config and data".into()));
        }
        (model, history)
    } else {
        if let Some(dir) = &opts.out_dir {
            for i in 0..setup.partition.n_subdomains() {
                let p = dir.join(trace_file_name(i));
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        (DdmModel::init(cfg, &setup)?, Vec::new())
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let tol = Tolerances::from_config(cfg);
    let mut timings = Vec::new();
    let mut done = history.last().is_some_and(|r| r.criteria.converged);
    while !done && model.k <= cfg.k_max {
        let (record, timing, traces) = pool.install(|| outer_iteration(&mut model, &setup, cfg, &tol))?;
        model.k += 1;
        done = record.criteria.converged || setup.partition.interfaces.is_empty();
        history.push(record);
        timings.push(timing);
        if let Some(dir) = &opts.out_dir {
            model.save(dir.join(CHECKPOINT_FILE), &history)?;
            for (i, rows) in traces.iter().enumerate() {
                append_trace(dir.join(trace_file_name(i)), rows)?;
            }
        }
    }
    let status = if history.last().is_some_and(|r| r.criteria.converged) {
        ConvergenceStatus::Converged
    } else {
        ConvergenceStatus::NotConverged
    };
    let field = metrics::error_field(&model, &setup.normalized)?;
    let last = history.last();
    let final_metrics = Some(FinalMetrics {
        max_e_rel: field.max,
        argmax_row: field.argmax,
        argmax_point: field.points[field.argmax].clone(),
        mean_e_rel: field.mean,
        mean_jump: model.interface_jumps().map(|j| mean_or_zero(&j))?,
        baseline_jump: history.first().filter(|r| r.unconstrained).map(|r| r.mean_jump),
        max_mean_abs_q: last.map(|r| r.criteria.max_constraint).unwrap_or(0.0),
    });
    let mut echo = cfg.clone();
    echo.out_dir = None;
    let report = RunReport {
        schema: REPORT_SCHEMA,
        config: echo,
        data: DataSummary {
            rows: dataset.len(),
            spatial_dim: dataset.schema.spatial_dim,
            param_dim: dataset.schema.param_dim,
            output_dim: dataset.schema.output_dim,
            n_samples: setup.samples.len(),
            assignment: setup.stats.clone(),
        },
        partition: setup.partition.summary(Some(&setup.stats)),
        status,
        outer_iterations: history.len(),
        iterations: history,
        final_metrics,
        timings,
    };
    Ok((model, report))
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

type SolveResult = Result<(crate::optim::DualOutcome, Option<NadamState>, f64)>;

fn outer_iteration(
    model: &mut DdmModel,
    setup: &Setup,
    cfg: &RunConfig,
    tol: &Tolerances,
) -> Result<(IterationRecord, PhaseTimings, Vec<Vec<TraceRow>>)> {
    let k = model.k;
    let t_total = Instant::now();
    let n = model.n_subdomains();
    let m = model.partition.interfaces.len();

    let t = Instant::now();
    let preds = model.predict_interfaces()?;
    let sets = (0..n).map(|i| model.constraint_set(i, &preds)).collect::<Result<Vec<_>>>()?;
    let predict_ms = ms(t);

    let t = Instant::now();
    let dual_cfg = cfg.dual_config();
    let primal = match model.method {
        Method::Lma => PrimalKind::Lma,
        Method::Alma => PrimalKind::Alma { rho: model.rho },
    };
    let solves: Vec<SolveResult> = {
        let model = &*model;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let start = Instant::now();
                let wrap = |e| Error::Subdomain { id: i, source: Box::new(e) };
                let net = &model.local_nets[i];
                let problem = SubdomainProblem::new(net, &setup.locals[i].rows, &sets[i]).map_err(wrap)?;
                let mut rule = match model.method {
                    Method::Lma => DualRule::Nadam {
                        alpha: cfg.alpha,
                        state: model.nadam[i].clone(),
                    },
                    Method::Alma => DualRule::Penalty { rho: model.rho },
                };
                let out = dual_ascent(&problem, net.params(), &model.lambdas[i], primal, &mut rule, &dual_cfg)
                    .map_err(wrap)?;
                let state = match rule {
                    DualRule::Nadam { state, .. } => Some(state),
                    _ => None,
                };
                Ok((out, state, ms(start)))
            })
            .collect()
    };
    let mut outcomes = Vec::with_capacity(n);
    for s in solves {
        outcomes.push(s?);
    }
    let subdomain_ms = ms(t);

    let old_thetas: Vec<Vec<f64>> = model.local_nets.iter().map(|n| n.params().to_vec()).collect();
    let mut traces = Vec::with_capacity(n);
    let mut per_subdomain_ms = Vec::with_capacity(n);
    let mut dual_iters = Vec::with_capacity(n);
    let mut dual_converged = Vec::with_capacity(n);
    let mut dual_dq = Vec::with_capacity(n);
    let mut unconstrained = true;
    for (i, (out, state, wall)) in outcomes.into_iter().enumerate() {
        model.local_nets[i].set_params(&out.theta)?;
        model.lambdas[i] = out.lambda;
        if let Some(s) = state {
            model.nadam[i] = s;
        }
        unconstrained &= out.unconstrained;
        dual_iters.push(out.dual_iters);
        dual_converged.push(out.converged);
        dual_dq.push(out.mean_abs_dq);
        per_subdomain_ms.push(wall);
        traces.push(
            out.trace
                .into_iter()
                .map(|mut r| {
                    r.outer_iter = k;
                    r
                })
                .collect::<Vec<_>>(),
        );
    }
    let interface_jump = model.interface_jumps()?;

    let t = Instant::now();
    let icfg = cfg.interface_lbfgs();
    let fits: Vec<Result<(MlpNetwork, LbfgsResult)>> = {
        let model = &*model;
        (0..m)
            .into_par_iter()
            .map(|j| {
                let f = &model.partition.interfaces[j];
                fit_interface(
                    &model.interface_nets[j],
                    &model.local_nets[f.left_id],
                    &model.local_nets[f.right_id],
                    f,
                    &model.samples,
                    &icfg,
                )
                .map_err(|e| Error::Interface { id: j, source: Box::new(e) })
            })
            .collect()
    };
    let mut interface_losses = Vec::with_capacity(m);
    let mut interface_iters = Vec::with_capacity(m);
    for (j, fit) in fits.into_iter().enumerate() {
        let (net, res) = fit?;
        model.interface_nets[j] = net;
        interface_losses.push(res.value);
        interface_iters.push(res.iterations);
    }
    let interface_ms = ms(t);

    let t = Instant::now();
    let preds = model.predict_interfaces()?;
    let rho = match model.method {
        Method::Lma => 0.0,
        Method::Alma => model.rho,
    };
    type Check = Result<(f64, f64, f64, Vec<PairResidual>)>;
    let checks: Vec<Check> = {
        let model = &*model;
        let preds = &preds;
        let old_thetas = &old_thetas;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let set = model.constraint_set(i, preds)?;
                let net = &model.local_nets[i];
                let problem = SubdomainProblem::new(net, &setup.locals[i].rows, &set)?;
                let (_, grad, q) = lagrangian_eval(&problem, net.params(), &model.lambdas[i], rho)?;
                let (loss, _) = problem.objective(net.params())?;
                let q_old = problem.residual(&old_thetas[i])?;
                let dq: Vec<f64> = q.iter().zip(&q_old).map(|(a, b)| a - b).collect();
                let pairs = set
                    .blocks
                    .iter()
                    .zip(set.offsets())
                    .map(|(b, o)| PairResidual {
                        subdomain: i,
                        interface: b.interface_id,
                        mean_abs_q: mean_abs(&q[o..o + b.len()]),
                    })
                    .collect();
                Ok((loss, mean_abs(&grad), mean_abs(&dq), pairs))
            })
            .collect()
    };
    let mut losses = Vec::with_capacity(n);
    let mut primal_vals = Vec::with_capacity(n);
    let mut dual_vals = Vec::with_capacity(n);
    let mut pairs = Vec::new();
    for (i, c) in checks.into_iter().enumerate() {
        let (loss, g, dq, p) = c.map_err(|e| Error::Subdomain { id: i, source: Box::new(e) })?;
        losses.push(loss);
        primal_vals.push(g);
        dual_vals.push(dq);
        pairs.extend(p);
    }
    let dual = (k > 0).then_some(dual_vals);
    let criteria = check_convergence(primal_vals, dual, pairs, tol);
    let check_ms = ms(t);

    let record = IterationRecord {
        k,
        unconstrained,
        losses,
        interface_losses,
        interface_iters,
        dual_iters,
        dual_converged,
        dual_dq,
        mean_jump: mean_or_zero(&interface_jump),
        interface_jump,
        criteria,
    };
    let timing = PhaseTimings {
        k,
        predict_ms,
        subdomain_ms,
        per_subdomain_ms,
        interface_ms,
        check_ms,
        total_ms: ms(t_total),
    };
    Ok((record, timing, traces))
}

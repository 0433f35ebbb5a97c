//! Run configuration, read from JSON with command-line overrides applied on
//! top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_2d_field, generate_3d_parametric, CylinderGrid, Dataset, MaterialDistribution};
use crate::decomposition::Split;
use crate::error::{Error, Result};
use crate::mlp::Activation;
use crate::optim::{DualAscentConfig, LbfgsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Lagrange multipliers with linearized constraints.
    Lma,
    /// Augmented Lagrangian.
    Alma,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lma" => Ok(Method::Lma),
            "alma" => Ok(Method::Alma),
            other => Err(Error::Config(format!("unknown method {other:?} (expected lma or alma)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Lma => "lma",
            Method::Alma => "alma",
        })
    }
}

/// How interface collocation points are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollocationMode {
    /// `collocation` uniform points per facet.
    Uniform,
    /// The data's spatial points projected onto each facet (node-coincident).
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
    },
    Generate2d {
        nx: usize,
        nz: usize,
        #[serde(default = "default_boundary_layer")]
        boundary_layer: f64,
    },
    Generate3d {
        samples: usize,
        #[serde(default = "default_grid")]
        grid: String,
        #[serde(default)]
        seed: u64,
    },
}

impl DataSource {
    /// Read or generate the raw dataset.
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Csv { path } => Dataset::load_csv(path, None),
            DataSource::Generate2d { nx, nz, boundary_layer } => generate_2d_field(*nx, *nz, *boundary_layer),
            DataSource::Generate3d { samples, grid, seed } => generate_3d_parametric(
                *samples,
                &MaterialDistribution::default(),
                &CylinderGrid::preset(grid)?,
                *seed,
            ),
        }
    }
}

fn default_boundary_layer() -> f64 {
    crate::data::DEFAULT_BOUNDARY_LAYER
}

fn default_grid() -> String {
    "coarse".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub split: Split,
    /// Hidden layer widths of every local and interface network.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Collocation points per interface (uniform mode).
    #[serde(default = "default_collocation")]
    pub collocation: usize,
    #[serde(default = "default_collocation_mode")]
    pub collocation_mode: CollocationMode,
    #[serde(default = "default_eps_pr")]
    pub eps_pr: f64,
    #[serde(default = "default_eps_lambda")]
    pub eps_lambda: f64,
    #[serde(default = "default_eps_l")]
    pub eps_l: f64,
    #[serde(default = "default_eps_ij")]
    pub eps_ij: f64,
    /// Nadam step size for the LMA multipliers. Nadam steps are about
    /// `alpha` per entry whatever the size of `Q`, so this has to be on the
    /// scale of the multipliers at the optimum.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// ALMA penalty and multiplier step.
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_d_max")]
    pub d_max: usize,
    #[serde(default = "default_p_max")]
    pub p_max: usize,
    #[serde(default = "default_memory")]
    pub lbfgs_memory: usize,
    /// Iteration cap of each L-BFGS solve on a subdomain problem.
    #[serde(default = "default_max_iters")]
    pub lbfgs_max_iters: usize,
    /// Iteration cap of each interface fit.
    #[serde(default = "default_interface_iters")]
    pub interface_max_iters: usize,
    #[serde(default = "default_true")]
    pub line_search_refine: bool,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for subdomain solves; all cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Grid lines removed on each side of every interface.
    #[serde(default)]
    pub gap_rows: usize,
    /// Interface membership tolerance in normalized coordinates.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_hidden() -> Vec<usize> {
    vec![40, 40]
}
fn default_activation() -> Activation {
    Activation::Swish
}
fn default_collocation() -> usize {
    10
}
fn default_collocation_mode() -> CollocationMode {
    CollocationMode::Uniform
}
fn default_eps_pr() -> f64 {
    1e-6
}
fn default_eps_lambda() -> f64 {
    1e-4
}
fn default_eps_l() -> f64 {
    1e-4
}
fn default_eps_ij() -> f64 {
    1e-3
}
fn default_alpha() -> f64 {
    1e-6
}
fn default_rho() -> f64 {
    1e-3
}
fn default_k_max() -> usize {
    100
}
fn default_d_max() -> usize {
    50
}
fn default_p_max() -> usize {
    20
}
fn default_memory() -> usize {
    10
}
fn default_max_iters() -> usize {
    500
}
fn default_interface_iters() -> usize {
    500
}
fn default_true() -> bool {
    true
}
fn default_tol() -> f64 {
    crate::decomposition::DEFAULT_TOL
}

impl RunConfig {
    /// Defaults for everything except the two required fields.
    pub fn new(method: Method, split: Split) -> Self {
        Self {
            method,
            split,
            hidden: default_hidden(),
            activation: default_activation(),
            collocation: default_collocation(),
            collocation_mode: default_collocation_mode(),
            eps_pr: default_eps_pr(),
            eps_lambda: default_eps_lambda(),
            eps_l: default_eps_l(),
            eps_ij: default_eps_ij(),
            alpha: default_alpha(),
            rho: default_rho(),
            k_max: default_k_max(),
            d_max: default_d_max(),
            p_max: default_p_max(),
            lbfgs_memory: default_memory(),
            lbfgs_max_iters: default_max_iters(),
            interface_max_iters: default_interface_iters(),
            line_search_refine: true,
            seed: 0,
            workers: None,
            gap_rows: 0,
            tol: default_tol(),
            data: None,
            out_dir: None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        for (name, v) in [
            ("eps_pr", self.eps_pr),
            ("eps_lambda", self.eps_lambda),
            ("eps_l", self.eps_l),
            ("eps_ij", self.eps_ij),
            ("alpha", self.alpha),
            ("rho", self.rho),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tol must be non-negative".into()));
        }
        if self.collocation < 2 && self.collocation_mode == CollocationMode::Uniform {
            return Err(Error::Config("collocation needs at least 2 points".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.primal_lbfgs().validate()
    }

    pub fn primal_lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            memory: self.lbfgs_memory,
            max_iters: self.lbfgs_max_iters,
            grad_tol: self.eps_pr,
            refine: self.line_search_refine,
            ..LbfgsConfig::default()
        }
    }

    /// Interface fits stop on the primal gradient tolerance; `eps_ij` is the
    /// target for the residuals they leave, not a gradient size.
    pub fn interface_lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iters: self.interface_max_iters,
            ..self.primal_lbfgs()
        }
    }

    pub fn dual_config(&self) -> DualAscentConfig {
        DualAscentConfig {
            d_max: self.d_max,
            p_max: self.p_max,
            eps_lambda: self.eps_lambda,
            eps_pr: self.eps_pr,
            eps_l: self.eps_l,
            lbfgs: self.primal_lbfgs(),
        }
    }
}

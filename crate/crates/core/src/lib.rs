//! Surrogate-model training by non-overlapping domain decomposition.
//!
//! The spatial input domain is split into a grid of boxes. Each box gets its
//! own small network, trained on the samples inside it; a separate network
//! per interface provides reference values and normal derivatives that both
//! neighbours are constrained to match (C¹ continuity). Constraints are
//! enforced either with Lagrange multipliers on linearized constraints
//! ([`Method::Lma`]) or with an augmented Lagrangian ([`Method::Alma`]), both
//! driven by dual ascent with an L-BFGS primal solver.
//!
//! Module map:
//! - [`mlp`]: network evaluation and exact derivatives,
//! - [`decomposition`]: grid partitions, interfaces, sample assignment,
//! - [`objectives`]: losses, constraint residuals, linearization,
//! - [`optim`]: L-BFGS, Nadam, dual ascent and the two primal updates,
//! - [`ddm`]: the outer substructuring loop,
//! - [`data`]: generators, normalization and CSV I/O,
//! - [`metrics`]: error metrics, field statistics and report emission,
//! - [`config`] and [`cli`]: run configuration and the command-line tool.

pub mod cli;
pub mod config;
pub mod data;
pub mod ddm;
pub mod decomposition;
pub mod error;
pub mod metrics;
pub mod mlp;
pub mod objectives;
pub mod optim;

pub use config::{Method, RunConfig};
pub use data::{Dataset, Normalization};
pub use ddm::{run_ddm, ConvergenceStatus, DdmModel, RunReport};
pub use decomposition::{BoundingBox, InterfaceSegment, LocalDataset, Partition, Split};
pub use error::{Error, Result};
pub use mlp::{Activation, MlpNetwork, NormalDirection};

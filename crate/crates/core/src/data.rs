//! Datasets: synthetic generators, min-max normalization and CSV I/O.
//!
//! CSV layout is `x,y[,z][,kappa,mu],u1[,u2,u3]` with a header row, comma
//! separators and LF line endings. Floats are written with 17 significant
//! digits so a save/load cycle is lossless.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample: spatial point, optional parameter sample, target vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub x: Vec<f64>,
    pub zeta: Vec<f64>,
    pub u: Vec<f64>,
}

/// Column layout of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub spatial_dim: usize,
    pub param_dim: usize,
    pub output_dim: usize,
}

impl Schema {
    pub fn new(spatial_dim: usize, param_dim: usize, output_dim: usize) -> Result<Self> {
        if !(spatial_dim == 2 || spatial_dim == 3)
            || !(param_dim == 0 || param_dim == 2)
            || !(1..=3).contains(&output_dim)
        {
            return Err(Error::Config(format!(
                "unsupported schema: spatial {spatial_dim}, params {param_dim}, outputs {output_dim}"
            )));
        }
        Ok(Self {
            spatial_dim,
            param_dim,
            output_dim,
        })
    }

    pub fn n_columns(&self) -> usize {
        self.spatial_dim + self.param_dim + self.output_dim
    }

    pub fn input_dim(&self) -> usize {
        self.spatial_dim + self.param_dim
    }

    pub fn header(&self) -> Vec<String> {
        let mut cols: Vec<String> = ["x", "y", "z"][..self.spatial_dim]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.param_dim == 2 {
            cols.push("kappa".into());
            cols.push("mu".into());
        }
        cols.extend((1..=self.output_dim).map(|i| format!("u{i}")));
        cols
    }

    fn from_header(header: &[&str]) -> Result<Self> {
        let spatial_dim = if header.get(2) == Some(&"z") { 3 } else { 2 };
        let param_dim = if header.get(spatial_dim) == Some(&"kappa") {
            2
        } else {
            0
        };
        let output_dim = header.len().saturating_sub(spatial_dim + param_dim);
        let schema = Schema::new(spatial_dim, param_dim, output_dim).map_err(|_| Error::Parse {
            line: 1,
            message: format!("unrecognized header {header:?}"),
        })?;
        let expected = schema.header();
        if expected.iter().map(String::as_str).ne(header.iter().copied()) {
            return Err(Error::Parse {
                line: 1,
                message: format!("header {header:?} does not match {expected:?}"),
            });
        }
        Ok(schema)
    }
}

/// Per-column affine map onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub min: f64,
    pub max: f64,
    /// Constant column: everything maps to 0.
    pub degenerate: bool,
}

impl ColumnMap {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            min = min.min(v);
            max = max.max(v);
        }
        Self {
            min,
            max,
            degenerate: !(max > min),
        }
    }

    pub fn forward(&self, v: f64) -> f64 {
        if self.degenerate {
            0.0
        } else {
            2.0 * (v - self.min) / (self.max - self.min) - 1.0
        }
    }

    pub fn inverse(&self, v: f64) -> f64 {
        if self.degenerate {
            self.min
        } else {
            (v + 1.0) * 0.5 * (self.max - self.min) + self.min
        }
    }

    /// Derivative of the normalized value w.r.t. the raw value.
    pub fn scale(&self) -> f64 {
        if self.degenerate {
            0.0
        } else {
            2.0 / (self.max - self.min)
        }
    }
}

/// Column maps in schema order (spatial, parameters, outputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub schema: Schema,
    pub columns: Vec<ColumnMap>,
}

impl Normalization {
    /// Map a raw dataset into normalized coordinates with this transform.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.schema != self.schema {
            return Err(Error::Config(format!(
                "dataset schema {:?} does not match transform schema {:?}",
                ds.schema, self.schema
            )));
        }
        Ok(ds.map_columns(|col, v| self.columns[col].forward(v)))
    }

    pub fn invert(&self, ds: &Dataset) -> Dataset {
        ds.map_columns(|col, v| self.columns[col].inverse(v))
    }

    pub fn spatial(&self) -> &[ColumnMap] {
        &self.columns[..self.schema.spatial_dim]
    }

    pub fn outputs(&self) -> &[ColumnMap] {
        &self.columns[self.schema.input_dim()..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub rows: Vec<Row>,
}

impl Dataset {
    pub fn new(schema: Schema, rows: Vec<Row>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.x.len() != schema.spatial_dim
                || r.zeta.len() != schema.param_dim
                || r.u.len() != schema.output_dim
            {
                return Err(Error::Shape {
                    context: "dataset row",
                    expected: schema.n_columns(),
                    got: r.x.len() + r.zeta.len() + r.u.len(),
                })
                .map_err(|e| Error::Parse {
                    line: i + 2,
                    message: e.to_string(),
                });
            }
        }
        Ok(Self { schema, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn column(&self, col: usize) -> impl Iterator<Item = f64> + '_ {
        let s = self.schema;
        self.rows.iter().map(move |r| {
            if col < s.spatial_dim {
                r.x[col]
            } else if col < s.input_dim() {
                r.zeta[col - s.spatial_dim]
            } else {
                r.u[col - s.input_dim()]
            }
        })
    }

    fn map_columns(&self, f: impl Fn(usize, f64) -> f64) -> Dataset {
        let s = self.schema;
        let rows = self
            .rows
            .iter()
            .map(|r| Row {
                x: r.x.iter().enumerate().map(|(c, &v)| f(c, v)).collect(),
                zeta: r
                    .zeta
                    .iter()
                    .enumerate()
                    .map(|(c, &v)| f(s.spatial_dim + c, v))
                    .collect(),
                u: r
                    .u
                    .iter()
                    .enumerate()
                    .map(|(c, &v)| f(s.input_dim() + c, v))
                    .collect(),
            })
            .collect();
        Dataset { schema: s, rows }
    }

    /// Distinct parameter samples in order of first appearance. A dataset
    /// without parameter columns has exactly one (empty) sample.
    pub fn param_samples(&self) -> Vec<Vec<f64>> {
        if self.schema.param_dim == 0 {
            return vec![Vec::new()];
        }
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for r in &self.rows {
            let key: Vec<u64> = r.zeta.iter().map(|v| v.to_bits()).collect();
            if seen.insert(key) {
                out.push(r.zeta.clone());
            }
        }
        out
    }

    /// Distinct spatial points in order of first appearance.
    pub fn spatial_points(&self) -> Vec<Vec<f64>> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for r in &self.rows {
            let key: Vec<u64> = r.x.iter().map(|v| v.to_bits()).collect();
            if seen.insert(key) {
                out.push(r.x.clone());
            }
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", self.schema.header().join(",")).map_err(io)?;
        for r in &self.rows {
            let line: Vec<String> = r
                .x
                .iter()
                .chain(&r.zeta)
                .chain(&r.u)
                .map(|v| format_f64(*v))
                .collect();
            writeln!(w, "{}", line.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Load a CSV. With `schema = Some(..)` the header must match it.
    pub fn load_csv(path: impl AsRef<Path>, schema: Option<Schema>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut records = reader.records();
        let header = match records.next() {
            Some(h) => h.map_err(|e| csv_error(path, e))?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        };
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        let found = Schema::from_header(&names)?;
        if let Some(s) = schema {
            if s != found {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected columns {:?}", s.header()),
                });
            }
        }
        let mut rows = Vec::new();
        for rec in records {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != found.n_columns() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} columns, found {}", found.n_columns(), rec.len()),
                });
            }
            let mut vals = Vec::with_capacity(rec.len());
            for cell in rec.iter() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("non-numeric cell {cell:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("non-finite cell {cell:?}"),
                    });
                }
                vals.push(v);
            }
            let (x, rest) = vals.split_at(found.spatial_dim);
            let (zeta, u) = rest.split_at(found.param_dim);
            rows.push(Row {
                x: x.to_vec(),
                zeta: zeta.to_vec(),
                u: u.to_vec(),
            });
        }
        Ok(Self { schema: found, rows })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Fit a min-max transform to every column and apply it.
pub fn normalize(ds: &Dataset) -> Result<(Dataset, Normalization)> {
    if ds.is_empty() {
        return Err(Error::EmptyData);
    }
    let columns: Vec<ColumnMap> = (0..ds.schema.n_columns())
        .map(|c| ColumnMap::fit(ds.column(c)))
        .collect();
    if columns.iter().any(|c| !c.min.is_finite() || !c.max.is_finite()) {
        return Err(Error::NumericalFailure("non-finite column values".into()));
    }
    let transform = Normalization {
        schema: ds.schema,
        columns,
    };
    let normalized = transform.apply(ds)?;
    Ok((normalized, transform))
}

/// Default boundary-layer width of the 2D field.
pub const DEFAULT_BOUNDARY_LAYER: f64 = 0.05;

/// Manufactured 2D field on `[0,1]²`: `u(x, z) = (2x − 1) · z · (1 − exp(−z/ℓ))`.
///
/// Zero on the clamped edge `z = 0`, antisymmetric about `x = 0.5`, with a
/// steep layer of width about `ℓ` near the clamp. Coordinates use columns
/// `x, y` with `y` the vertical coordinate. Values are raw (not normalized).
pub fn manufactured_2d(x: f64, z: f64, boundary_layer: f64) -> f64 {
    (2.0 * x - 1.0) * z * (1.0 - (-z / boundary_layer).exp())
}

pub fn generate_2d_field(nx: usize, nz: usize, boundary_layer: f64) -> Result<Dataset> {
    if nx < 2 || nz < 2 {
        return Err(Error::InvalidCount(format!("grid {nx}x{nz} needs at least 2x2")));
    }
    if !(boundary_layer > 0.0) || !boundary_layer.is_finite() {
        return Err(Error::Config(format!("boundary layer {boundary_layer} must be > 0")));
    }
    let mut rows = Vec::with_capacity(nx * nz);
    let span = (nx - 1) as f64;
    for j in 0..nz {
        let z = j as f64 / (nz - 1) as f64;
        let profile = z * (1.0 - (-z / boundary_layer).exp());
        for i in 0..nx {
            // (2x − 1) from the integer numerator keeps the grid exactly
            // antisymmetric.
            let a = (2.0 * i as f64 - span) / span;
            rows.push(Row {
                x: vec![i as f64 / span, z],
                zeta: vec![],
                u: vec![a * profile],
            });
        }
    }
    Dataset::new(Schema::new(2, 0, 1)?, rows)
}

/// Lognormal bulk and shear moduli in GPa, moment-matched to the given
/// mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialDistribution {
    pub kappa_mean: f64,
    pub kappa_std: f64,
    pub mu_mean: f64,
    pub mu_std: f64,
}

impl Default for MaterialDistribution {
    fn default() -> Self {
        Self {
            kappa_mean: 175.0,
            kappa_std: 10.0,
            mu_mean: 81.0,
            mu_std: 10.0,
        }
    }
}

/// `(mu, sigma)` of the underlying normal for a lognormal with the given
/// mean and standard deviation.
pub fn lognormal_params(mean: f64, std: f64) -> (f64, f64) {
    let s2 = (1.0 + (std * std) / (mean * mean)).ln();
    (mean.ln() - 0.5 * s2, s2.sqrt())
}

impl MaterialDistribution {
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
        let dist = |m: f64, s: f64| {
            let (mu, sigma) = lognormal_params(m, s);
            LogNormal::new(mu, sigma).map_err(|e| Error::Config(e.to_string()))
        };
        let kappa = dist(self.kappa_mean, self.kappa_std)?;
        let shear = dist(self.mu_mean, self.mu_std)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let (k, m) = (kappa.sample(&mut rng), shear.sample(&mut rng));
            if k > 0.0 && m > 0.0 && k.is_finite() && m.is_finite() {
                out.push([k, m]);
            }
        }
        Ok(out)
    }
}

/// Young's modulus from bulk and shear moduli.
pub fn youngs_modulus(kappa: f64, mu: f64) -> f64 {
    9.0 * kappa * mu / (3.0 * kappa + mu)
}

pub fn poisson_ratio(kappa: f64, mu: f64) -> f64 {
    (3.0 * kappa - 2.0 * mu) / (2.0 * (3.0 * kappa + mu))
}

/// Cylinder cross-section and height sampling for the 3D generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylinderGrid {
    /// Points per axis across the diameter; only those inside the disk are kept.
    pub n_cross: usize,
    pub n_height: usize,
    pub diameter_mm: f64,
    pub height_mm: f64,
}

impl CylinderGrid {
    pub fn preset(name: &str) -> Result<Self> {
        let (n_cross, n_height) = match name {
            "coarse" => (5, 8),
            "fine" => (9, 15),
            other => return Err(Error::Config(format!("unknown grid preset {other:?}"))),
        };
        Ok(Self {
            n_cross,
            n_height,
            diameter_mm: 20.0,
            height_mm: 70.0,
        })
    }

    pub fn points(&self) -> Vec<[f64; 3]> {
        let r = 0.5 * self.diameter_mm;
        let axis = |n: usize, lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let mut pts = Vec::new();
        for k in 0..self.n_height {
            let z = axis(self.n_height, 0.0, self.height_mm, k);
            for j in 0..self.n_cross {
                let y = axis(self.n_cross, -r, r, j);
                for i in 0..self.n_cross {
                    let x = axis(self.n_cross, -r, r, i);
                    if x * x + y * y <= r * r * (1.0 + 1e-12) {
                        pts.push([x, y, z]);
                    }
                }
            }
        }
        pts
    }
}

/// Axial load in newtons.
pub const CYLINDER_LOAD_N: f64 = 20_000.0;

/// Closed-form uniaxial compression of the cylinder for each sampled
/// `(kappa, mu)`. Rows are grid-point-major within each sample.
pub fn generate_3d_parametric(
    n_samples: usize,
    dist: &MaterialDistribution,
    grid: &CylinderGrid,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::InvalidCount("need at least one material sample".into()));
    }
    if grid.n_cross < 2 || grid.n_height < 2 {
        return Err(Error::InvalidCount("cylinder grid needs at least 2 points per axis".into()));
    }
    let area = std::f64::consts::PI * (0.5 * grid.diameter_mm).powi(2);
    let points = grid.points();
    let mut rows = Vec::with_capacity(points.len() * n_samples);
    for [kappa, mu] in dist.sample(n_samples, seed)? {
        // GPa -> N/mm².
        let e = youngs_modulus(kappa, mu) * 1e3;
        let nu = poisson_ratio(kappa, mu);
        let strain = -CYLINDER_LOAD_N / (e * area);
        for &[x, y, z] in &points {
            rows.push(Row {
                x: vec![x, y, z],
                zeta: vec![kappa, mu],
                u: vec![-nu * strain * x, -nu * strain * y, strain * z],
            });
        }
    }
    Dataset::new(Schema::new(3, 2, 3)?, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn field_is_clamped_and_antisymmetric() {
        for i in 0..=10 {
            let x = i as f64 / 10.0;
            assert_eq!(manufactured_2d(x, 0.0, 0.05), 0.0);
            assert_eq!(manufactured_2d(0.5, x, 0.05), 0.0);
            for j in 0..=10 {
                let z = j as f64 / 10.0;
                let (a, b) = (manufactured_2d(x, z, 0.05), manufactured_2d(1.0 - x, z, 0.05));
                assert!((a + b).abs() < 1e-15);
            }
        }
        let (nx, nz) = (21, 70);
        let ds = generate_2d_field(nx, nz, 0.05).unwrap();
        for j in 0..nz {
            for i in 0..nx {
                let r = &ds.rows[j * nx + i];
                assert_eq!(r.u[0], -ds.rows[j * nx + nx - 1 - i].u[0]);
                let expect = manufactured_2d(r.x[0], r.x[1], 0.05);
                assert!((r.u[0] - expect).abs() < 1e-15);
            }
        }
        assert!((manufactured_2d(1.0, 1.0, 0.05) - (1.0 - (-20f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn grid_size() {
        let ds = generate_2d_field(21, 70, 0.05).unwrap();
        assert_eq!(ds.len(), 21 * 70);
        assert!(generate_2d_field(1, 70, 0.05).is_err());
        assert!(generate_2d_field(21, 70, 0.0).is_err());
    }

    #[test]
    fn elastic_conversions() {
        let e = youngs_modulus(175.0, 81.0);
        assert!((e - 127575.0 / 606.0).abs() < 1e-12);
        assert!((e - 210.52).abs() < 0.01);
        let nu = poisson_ratio(175.0, 81.0);
        assert!((nu - 363.0 / 1212.0).abs() < 1e-15);
        assert!((nu - 0.2995).abs() < 1e-4);
    }

    #[test]
    fn lognormal_sample_mean() {
        let d = MaterialDistribution::default();
        let s = d.sample(100_000, 3).unwrap();
        let mean_k = s.iter().map(|v| v[0]).sum::<f64>() / s.len() as f64;
        let mean_m = s.iter().map(|v| v[1]).sum::<f64>() / s.len() as f64;
        assert!((mean_k / 175.0 - 1.0).abs() < 0.01, "{mean_k}");
        assert!((mean_m / 81.0 - 1.0).abs() < 0.01, "{mean_m}");
        assert!(s.iter().all(|v| v[0] > 0.0 && v[1] > 0.0));
    }

    #[test]
    fn cylinder_field_is_linear() {
        let grid = CylinderGrid::preset("coarse").unwrap();
        let ds = generate_3d_parametric(3, &MaterialDistribution::default(), &grid, 1).unwrap();
        assert_eq!(ds.len(), grid.points().len() * 3);
        for r in &ds.rows {
            if r.x[2] == 0.0 {
                assert_eq!(r.u[2], 0.0);
            }
        }
        // Three collinear points along z for the first sample at x = y = 0.
        let col: Vec<&Row> = ds
            .rows
            .iter()
            .filter(|r| r.x[0] == 0.0 && r.x[1] == 0.0 && r.zeta == ds.rows[0].zeta)
            .collect();
        assert!(col.len() >= 3);
        let (a, b, c) = (col[0], col[1], col[2]);
        let slope1 = (b.u[2] - a.u[2]) / (b.x[2] - a.x[2]);
        let slope2 = (c.u[2] - b.u[2]) / (c.x[2] - b.x[2]);
        assert!((slope1 - slope2).abs() < 1e-15);
        // Transverse: u_x proportional to x at fixed z and zeta.
        let row_x: Vec<&Row> = ds
            .rows
            .iter()
            .filter(|r| r.x[1] == 0.0 && r.x[2] == 0.0 && r.zeta == ds.rows[0].zeta)
            .collect();
        let k0 = row_x[0].u[0] / row_x[0].x[0];
        for r in row_x.iter().filter(|r| r.x[0] != 0.0) {
            assert!((r.u[0] / r.x[0] - k0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_endpoints_and_constant_columns() {
        let rows = vec![
            Row { x: vec![0.0, 5.0], zeta: vec![], u: vec![1.0] },
            Row { x: vec![70.0, 5.0], zeta: vec![], u: vec![2.0] },
            Row { x: vec![35.0, 5.0], zeta: vec![], u: vec![3.0] },
        ];
        let ds = Dataset::new(Schema::new(2, 0, 1).unwrap(), rows).unwrap();
        let (n, t) = normalize(&ds).unwrap();
        assert_eq!(n.rows[0].x[0], -1.0);
        assert_eq!(n.rows[1].x[0], 1.0);
        assert_eq!(n.rows[2].x[0], 0.0);
        assert!(n.rows.iter().all(|r| r.x[1] == 0.0));
        assert!(t.columns[1].degenerate);
        assert!(!t.columns[0].degenerate);
        assert!(matches!(
            normalize(&Dataset::new(ds.schema, vec![]).unwrap()),
            Err(Error::EmptyData)
        ));
    }

    #[test]
    fn csv_header_only_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        std::fs::write(&p, "x,y,u1\n").unwrap();
        let ds = Dataset::load_csv(&p, None).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn csv_bad_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        let mut text = String::from("x,y,u1\n");
        for i in 0..5 {
            text.push_str(&format!("{i},0,1\n"));
        }
        text.push_str("1,2\n");
        std::fs::write(&p, text).unwrap();
        match Dataset::load_csv(&p, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "x,y,u1\n1,2,abc\n").unwrap();
        match Dataset::load_csv(&p, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "x,q,u1\n1,2,3\n").unwrap();
        assert!(matches!(Dataset::load_csv(&p, None), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        generate_2d_field(3, 3, 0.05).unwrap().save_csv(&p).unwrap();
        assert!(Dataset::load_csv(&p, Some(Schema::new(3, 2, 3).unwrap())).is_err());
        assert!(Dataset::load_csv(&p, Some(Schema::new(2, 0, 1).unwrap())).is_ok());
    }

    #[test]
    fn param_samples_are_distinct() {
        let grid = CylinderGrid::preset("coarse").unwrap();
        let ds = generate_3d_parametric(4, &MaterialDistribution::default(), &grid, 9).unwrap();
        assert_eq!(ds.param_samples().len(), 4);
        assert_eq!(ds.spatial_points().len(), grid.points().len());
        assert_eq!(generate_2d_field(3, 3, 0.05).unwrap().param_samples(), vec![Vec::<f64>::new()]);
    }

    proptest! {
        #[test]
        fn normalization_round_trip(cols in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..20)) {
            let rows: Vec<Row> = cols
                .iter()
                .map(|c| Row { x: vec![c[0], c[1]], zeta: vec![], u: vec![c[2]] })
                .collect();
            let ds = Dataset::new(Schema::new(2, 0, 1).unwrap(), rows).unwrap();
            let (n, t) = normalize(&ds).unwrap();
            for r in &n.rows {
                for v in r.x.iter().chain(&r.u) {
                    prop_assert!((-1.0..=1.0).contains(v));
                }
            }
            let back = t.invert(&n);
            for (a, b) in back.rows.iter().zip(&ds.rows) {
                for (col, (p, q)) in a.x.iter().chain(&a.u).zip(b.x.iter().chain(&b.u)).enumerate() {
                    if !t.columns[if col < 2 { col } else { 2 }].degenerate {
                        prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
                    }
                }
            }
        }

        #[test]
        fn csv_round_trip(vals in prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 7), 0..10)) {
            let rows: Vec<Row> = vals
                .iter()
                .map(|v| Row { x: v[..2].to_vec(), zeta: v[2..4].to_vec(), u: v[4..].to_vec() })
                .collect();
            let schema = Schema { spatial_dim: 2, param_dim: 2, output_dim: 3 };
            let ds = Dataset::new(schema, rows).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("d.csv");
            ds.save_csv(&p).unwrap();
            let back = Dataset::load_csv(&p, Some(schema)).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}

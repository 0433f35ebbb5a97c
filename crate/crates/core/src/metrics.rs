//! Error metrics, field statistics over parameter samples, and report
//! emission.
//!
//! Everything is computed in normalized units, where the relative error
//! `e_rel = |û − u| / (|u| + 1)` is well behaved near zero targets.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::data::{format_f64, Dataset, Normalization, Row};
use crate::ddm::{DdmModel, RunReport};
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const ERROR_GRID_FILE: &str = "error_grid.csv";
pub const INTERFACE_SAMPLES_FILE: &str = "interface_samples.csv";

pub fn statistics_file_name(label: &str) -> String {
    format!("statistics_{label}.csv")
}

/// Per-component `|p − t| / (|t| + 1)`.
pub fn relative_error_components(pred: &[f64], truth: &[f64]) -> Vec<f64> {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs() / (t.abs() + 1.0)).collect()
}

/// `e_rel`, reduced by the maximum over components.
pub fn relative_error(pred: &[f64], truth: &[f64]) -> f64 {
    relative_error_components(pred, truth).into_iter().fold(0.0, f64::max)
}

/// Predictions, targets and relative errors at every row of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorField {
    /// Normalized spatial coordinates.
    pub points: Vec<Vec<f64>>,
    pub prediction: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
    pub e_rel: Vec<f64>,
    pub e_rel_components: Vec<Vec<f64>>,
    pub max: f64,
    pub argmax: usize,
    pub mean: f64,
}

impl ErrorField {
    pub fn from_predictions(rows: &[Row], prediction: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyData);
        }
        if prediction.len() != rows.len() {
            return Err(Error::Shape {
                context: "predictions",
                expected: rows.len(),
                got: prediction.len(),
            });
        }
        let e_rel_components: Vec<Vec<f64>> = prediction
            .iter()
            .zip(rows)
            .map(|(p, r)| relative_error_components(p, &r.u))
            .collect();
        let e_rel: Vec<f64> = e_rel_components.iter().map(|c| c.iter().copied().fold(0.0, f64::max)).collect();
        let mut argmax = 0;
        for (i, e) in e_rel.iter().enumerate() {
            if *e > e_rel[argmax] {
                argmax = i;
            }
        }
        Ok(Self {
            points: rows.iter().map(|r| r.x.clone()).collect(),
            truth: rows.iter().map(|r| r.u.clone()).collect(),
            prediction,
            max: e_rel[argmax],
            argmax,
            mean: e_rel.iter().sum::<f64>() / e_rel.len() as f64,
            e_rel,
            e_rel_components,
        })
    }

    pub fn len(&self) -> usize {
        self.e_rel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_rel.is_empty()
    }
}

/// Error field of a model over normalized data.
pub fn error_field(model: &DdmModel, normalized: &Dataset) -> Result<ErrorField> {
    let pred = model.predict(&normalized.rows)?;
    ErrorField::from_predictions(&normalized.rows, pred)
}

/// Maximum `e_rel` over every row and the spatial point where it occurs.
pub fn max_relative_error(model: &DdmModel, normalized: &Dataset) -> Result<(f64, Vec<f64>)> {
    let f = error_field(model, normalized)?;
    Ok((f.max, f.points[f.argmax].clone()))
}

/// Mean and standard deviation over samples, per point and component, with
/// the population (`1/N`) estimator. `values[point][sample][component]`.
pub fn field_statistics(values: &[Vec<Vec<f64>>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut means = Vec::with_capacity(values.len());
    let mut stds = Vec::with_capacity(values.len());
    for (p, samples) in values.iter().enumerate() {
        if samples.is_empty() {
            return Err(Error::InvalidCount(format!("point {p} has no samples")));
        }
        let n = samples.len() as f64;
        let n_out = samples[0].len();
        let mut mean = vec![0.0; n_out];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; n_out];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        stds.push(var.into_iter().map(|v| (v / n).sqrt()).collect());
        means.push(mean);
    }
    Ok((means, stds))
}

/// Group per-row values by spatial point, in order of first appearance.
pub fn group_by_point(rows: &[Row], values: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut points = Vec::new();
    let mut groups: Vec<Vec<Vec<f64>>> = Vec::new();
    for (r, v) in rows.iter().zip(values) {
        let key: Vec<u64> = r.x.iter().map(|c| c.to_bits()).collect();
        let at = *index.entry(key).or_insert_with(|| {
            points.push(r.x.clone());
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[at].push(v.clone());
    }
    (points, groups)
}

/// Model and data statistics over parameter samples at every spatial point.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticsField {
    pub points: Vec<Vec<f64>>,
    pub n_samples: Vec<usize>,
    pub mean_pred: Vec<Vec<f64>>,
    pub std_pred: Vec<Vec<f64>>,
    pub mean_true: Vec<Vec<f64>>,
    pub std_true: Vec<Vec<f64>>,
    /// `e_rel` of the mean field, per point and component.
    pub e_mean: Vec<Vec<f64>>,
    pub e_std: Vec<Vec<f64>>,
}

impl StatisticsField {
    pub fn from_predictions(rows: &[Row], prediction: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyData);
        }
        let truth: Vec<Vec<f64>> = rows.iter().map(|r| r.u.clone()).collect();
        let (points, pred_groups) = group_by_point(rows, prediction);
        let (_, true_groups) = group_by_point(rows, &truth);
        let (mean_pred, std_pred) = field_statistics(&pred_groups)?;
        let (mean_true, std_true) = field_statistics(&true_groups)?;
        let e_mean = mean_pred.iter().zip(&mean_true).map(|(p, t)| relative_error_components(p, t)).collect();
        let e_std = std_pred.iter().zip(&std_true).map(|(p, t)| relative_error_components(p, t)).collect();
        Ok(Self {
            n_samples: pred_groups.iter().map(Vec::len).collect(),
            points,
            mean_pred,
            std_pred,
            mean_true,
            std_true,
            e_mean,
            e_std,
        })
    }

    pub fn max_e_mean(&self) -> f64 {
        self.e_mean.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn max_e_std(&self) -> f64 {
        self.e_std.iter().flatten().copied().fold(0.0, f64::max)
    }
}

pub fn statistics_field(model: &DdmModel, normalized: &Dataset) -> Result<StatisticsField> {
    let pred = model.predict(&normalized.rows)?;
    StatisticsField::from_predictions(&normalized.rows, &pred)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for l in lines {
        writeln!(w, "{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn spatial_header(dim: usize) -> Vec<String> {
    ["x", "y", "z"][..dim].iter().map(|s| s.to_string()).collect()
}

fn raw_point(norm: &Normalization, x: &[f64]) -> Vec<String> {
    x.iter().zip(norm.spatial()).map(|(v, c)| format_f64(c.inverse(*v))).collect()
}

/// `x,y[,z],e_rel[,e_rel_u1,...]`, one line per row, raw coordinates.
pub fn write_error_grid(path: impl AsRef<Path>, field: &ErrorField, norm: &Normalization) -> Result<()> {
    let n_out = norm.schema.output_dim;
    let mut header = spatial_header(norm.schema.spatial_dim);
    header.push("e_rel".into());
    if n_out > 1 {
        header.extend((1..=n_out).map(|c| format!("e_rel_u{c}")));
    }
    let lines = (0..field.len()).map(|i| {
        let mut cols = raw_point(norm, &field.points[i]);
        cols.push(format_f64(field.e_rel[i]));
        if n_out > 1 {
            cols.extend(field.e_rel_components[i].iter().map(|v| format_f64(*v)));
        }
        cols.join(",")
    });
    write_lines(path.as_ref(), &header.join(","), lines)
}

/// Per-point mean and standard deviation of model and data, in normalized
/// units, with their relative errors.
pub fn write_statistics(path: impl AsRef<Path>, stats: &StatisticsField, norm: &Normalization) -> Result<()> {
    let n_out = norm.schema.output_dim;
    let mut header = spatial_header(norm.schema.spatial_dim);
    header.push("n_samples".into());
    for name in ["mean_pred", "std_pred", "mean_true", "std_true", "e_rel_mean", "e_rel_std"] {
        header.extend((1..=n_out).map(|c| format!("{name}_u{c}")));
    }
    let lines = (0..stats.points.len()).map(|i| {
        let mut cols = raw_point(norm, &stats.points[i]);
        cols.push(stats.n_samples[i].to_string());
        for block in [
            &stats.mean_pred[i],
            &stats.std_pred[i],
            &stats.mean_true[i],
            &stats.std_true[i],
            &stats.e_mean[i],
            &stats.e_std[i],
        ] {
            cols.extend(block.iter().map(|v| format_f64(*v)));
        }
        cols.join(",")
    });
    write_lines(path.as_ref(), &header.join(","), lines)
}

/// Interface-network predictions at every collocation point for every
/// parameter sample, raw units: the per-point sample distributions.
pub fn write_interface_samples(path: impl AsRef<Path>, model: &DdmModel) -> Result<()> {
    let norm = &model.normalization;
    let s = norm.schema;
    let mut header = vec!["interface".to_string(), "point".into(), "sample".into()];
    header.extend(spatial_header(s.spatial_dim));
    if s.param_dim == 2 {
        header.extend(["kappa".to_string(), "mu".into()]);
    }
    header.extend((1..=s.output_dim).map(|c| format!("u{c}")));
    let mut lines = Vec::new();
    for f in &model.partition.interfaces {
        for (p, x) in f.collocation.iter().enumerate() {
            for (k, z) in model.samples.iter().enumerate() {
                let mut input = x.clone();
                input.extend_from_slice(z);
                let out = model.interface_nets[f.id].forward(&input)?;
                let mut cols = vec![f.id.to_string(), p.to_string(), k.to_string()];
                cols.extend(raw_point(norm, x));
                let params = &norm.columns[s.spatial_dim..s.input_dim()];
                cols.extend(z.iter().zip(params).map(|(v, c)| format_f64(c.inverse(*v))));
                cols.extend(out.iter().zip(norm.outputs()).map(|(v, c)| format_f64(c.inverse(*v))));
                lines.push(cols.join(","));
            }
        }
    }
    write_lines(path.as_ref(), &header.join(","), lines.into_iter())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `report.json` (no wall-clock values, so it is reproducible),
/// `timings.json`, and `error_grid.csv` when a field is given. Existing
/// files are overwritten.
pub fn emit_report(
    report: &RunReport,
    field: Option<(&ErrorField, &Normalization)>,
    out_dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(REPORT_FILE), report)?;
    write_json(&dir.join(TIMINGS_FILE), &report.timings)?;
    if let Some((field, norm)) = field {
        write_error_grid(dir.join(ERROR_GRID_FILE), field, norm)?;
    }
    Ok(())
}

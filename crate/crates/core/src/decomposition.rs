//! Uniform grid partitions of the spatial domain, their interfaces and the
//! assignment of samples to subdomains.
//!
//! Split convention: in 2D a `KxL` split puts `K` boxes along the vertical
//! axis (`y`, axis 1) and `L` along `x`, so `3x1` gives three stacked boxes.
//! In 3D a `KxLxM` split counts boxes along `x`, `y` and `z`. Subdomain ids
//! run row-major over the split indices; interfaces are sorted by
//! `(left_id, right_id)` and their normal points from left to right along
//! the positive coordinate axis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Row};
use crate::error::{Error, Result};
use crate::mlp::NormalDirection;

/// Default tolerance for "lies on an interface" in normalized coordinates.
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidPartition("bounds dimension mismatch".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
            return Err(Error::InvalidPartition(format!("degenerate bounds {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// `[-1, 1]^dim`, the image of any normalized dataset.
    pub fn symmetric_unit(dim: usize) -> Self {
        Self {
            lo: vec![-1.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= a - tol && *v <= b + tol)
    }
}

/// Number of boxes along each spatial axis.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Split {
    per_axis: Vec<usize>,
}

impl Split {
    /// 2D `KxL`: `k` boxes along `y`, `l` along `x`.
    pub fn two_d(k: usize, l: usize) -> Result<Self> {
        Self::from_axes(vec![l, k])
    }

    /// 3D `KxLxM`: boxes along `x`, `y`, `z`.
    pub fn three_d(k: usize, l: usize, m: usize) -> Result<Self> {
        Self::from_axes(vec![k, l, m])
    }

    pub fn from_axes(per_axis: Vec<usize>) -> Result<Self> {
        if !(per_axis.len() == 2 || per_axis.len() == 3) {
            return Err(Error::InvalidPartition(format!(
                "split needs 2 or 3 axes, got {}",
                per_axis.len()
            )));
        }
        if per_axis.contains(&0) {
            return Err(Error::InvalidPartition("split counts must be at least 1".into()));
        }
        Ok(Self { per_axis })
    }

    pub fn per_axis(&self) -> &[usize] {
        &self.per_axis
    }

    pub fn dim(&self) -> usize {
        self.per_axis.len()
    }

    pub fn n_subdomains(&self) -> usize {
        self.per_axis.iter().product()
    }

    /// The user-facing counts (`[K, L]` in 2D, `[K, L, M]` in 3D).
    pub fn counts(&self) -> Vec<usize> {
        match self.per_axis.as_slice() {
            [l, k] => vec![*k, *l],
            other => other.to_vec(),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.counts().iter().map(usize::to_string).collect();
        f.write_str(&parts.join("x"))
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let counts: Vec<usize> = s
            .split(['x', 'X', ','])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidPartition(format!("cannot parse split {s:?}")))?;
        match counts.as_slice() {
            [k, l] => Split::two_d(*k, *l),
            [k, l, m] => Split::three_d(*k, *l, *m),
            _ => Err(Error::InvalidPartition(format!("cannot parse split {s:?}"))),
        }
    }
}

impl Serialize for Split {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceSegment {
    pub id: usize,
    pub left_id: usize,
    pub right_id: usize,
    /// Axis the facet is orthogonal to.
    pub axis: usize,
    /// Coordinate of the facet along `axis`.
    pub position: f64,
    /// The facet; `lo[axis] == hi[axis] == position`.
    pub facet: BoundingBox,
    pub normal: NormalDirection,
    pub collocation: Vec<Vec<f64>>,
}

impl InterfaceSegment {
    pub fn on_facet(&self, x: &[f64], tol: f64) -> bool {
        (x[self.axis] - self.position).abs() <= tol && self.facet.contains(x, tol)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub bounds: BoundingBox,
    pub split: Split,
    pub subdomains: Vec<BoundingBox>,
    pub interfaces: Vec<InterfaceSegment>,
}

/// Where a point falls in a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Subdomain(usize),
    Interface(usize),
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Uniform points on a facet. Segments get `n` points including both ends;
/// rectangles get a tensor grid of `na × nb ≈ n` points whose aspect follows
/// the facet's.
pub fn collocation_points(facet: &BoundingBox, axis: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::InvalidCount(format!("need at least 2 collocation points, got {n}")));
    }
    let free: Vec<usize> = (0..facet.dim()).filter(|&a| a != axis).collect();
    let base = facet.lo.clone();
    match free.as_slice() {
        [a] => Ok(linspace(facet.lo[*a], facet.hi[*a], n)
            .into_iter()
            .map(|v| {
                let mut p = base.clone();
                p[*a] = v;
                p
            })
            .collect()),
        [a, b] => {
            let (la, lb) = (facet.hi[*a] - facet.lo[*a], facet.hi[*b] - facet.lo[*b]);
            let na = ((n as f64 * la / lb).sqrt().round() as usize).max(2);
            let nb = ((n as f64 / na as f64).round() as usize).max(2);
            let mut pts = Vec::with_capacity(na * nb);
            for vb in linspace(facet.lo[*b], facet.hi[*b], nb) {
                for va in linspace(facet.lo[*a], facet.hi[*a], na) {
                    let mut p = base.clone();
                    p[*a] = va;
                    p[*b] = vb;
                    pts.push(p);
                }
            }
            Ok(pts)
        }
        _ => Err(Error::InvalidPartition("facets need 2 or 3 spatial dimensions".into())),
    }
}

impl Partition {
    /// Equal-size boxes tiling `bounds`, with 2 collocation points per
    /// interface until [`Partition::with_collocation`] is called.
    pub fn grid(bounds: BoundingBox, split: Split) -> Result<Self> {
        if bounds.dim() != split.dim() {
            return Err(Error::InvalidPartition(format!(
                "{}-dimensional bounds with a {}-dimensional split",
                bounds.dim(),
                split.dim()
            )));
        }
        let dim = split.dim();
        let counts = split.per_axis().to_vec();
        let edges: Vec<Vec<f64>> = (0..dim)
            .map(|a| linspace(bounds.lo[a], bounds.hi[a], counts[a] + 1))
            .collect();

        // Row-major over the user-facing indices; in 2D that is (y, x).
        let order: Vec<usize> = if dim == 2 { vec![1, 0] } else { vec![0, 1, 2] };
        let n = split.n_subdomains();
        let mut cells: Vec<Vec<usize>> = Vec::with_capacity(n);
        let mut idx = vec![0usize; dim];
        for _ in 0..n {
            cells.push(idx.clone());
            for &a in order.iter().rev() {
                idx[a] += 1;
                if idx[a] < counts[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let id_of = |cell: &[usize]| -> usize {
            order.iter().fold(0, |acc, &a| acc * counts[a] + cell[a])
        };

        let subdomains: Vec<BoundingBox> = cells
            .iter()
            .map(|c| BoundingBox {
                lo: (0..dim).map(|a| edges[a][c[a]]).collect(),
                hi: (0..dim).map(|a| edges[a][c[a] + 1]).collect(),
            })
            .collect();

        let mut pairs = Vec::new();
        for (left, cell) in cells.iter().enumerate() {
            for axis in 0..dim {
                if cell[axis] + 1 < counts[axis] {
                    let mut nb = cell.clone();
                    nb[axis] += 1;
                    pairs.push((left, id_of(&nb), axis));
                }
            }
        }
        pairs.sort();
        let mut interfaces = Vec::with_capacity(pairs.len());
        for (id, (left, right, axis)) in pairs.into_iter().enumerate() {
            let lb = &subdomains[left];
            let position = lb.hi[axis];
            let mut facet = lb.clone();
            facet.lo[axis] = position;
            facet.hi[axis] = position;
            let collocation = collocation_points(&facet, axis, 2)?;
            interfaces.push(InterfaceSegment {
                id,
                left_id: left,
                right_id: right,
                axis,
                position,
                normal: NormalDirection::axis(dim, axis)?,
                facet,
                collocation,
            });
        }
        Ok(Self {
            bounds,
            split,
            subdomains,
            interfaces,
        })
    }

    /// Replace every interface's collocation set by `n` uniform points.
    pub fn with_collocation(mut self, n: usize) -> Result<Self> {
        for iface in &mut self.interfaces {
            iface.collocation = collocation_points(&iface.facet, iface.axis, n)?;
        }
        Ok(self)
    }

    /// Use an explicit point list for one interface. Every point must lie
    /// on the facet.
    pub fn set_collocation(&mut self, interface: usize, points: Vec<Vec<f64>>) -> Result<()> {
        let iface = self
            .interfaces
            .get_mut(interface)
            .ok_or_else(|| Error::InvalidInterface(format!("no interface {interface}")))?;
        if points.len() < 2 {
            return Err(Error::InvalidCount(format!(
                "interface {interface} needs at least 2 collocation points"
            )));
        }
        for p in &points {
            if p.len() != iface.facet.dim() || !iface.on_facet(p, 1e-12) {
                return Err(Error::InvalidInterface(format!(
                    "point {p:?} is not on interface {interface}"
                )));
            }
        }
        iface.collocation = points;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn n_subdomains(&self) -> usize {
        self.subdomains.len()
    }

    /// Interfaces touching `subdomain`, in ascending interface id.
    pub fn interfaces_of(&self, subdomain: usize) -> Vec<usize> {
        self.interfaces
            .iter()
            .filter(|f| f.left_id == subdomain || f.right_id == subdomain)
            .map(|f| f.id)
            .collect()
    }

    /// Index of the box containing `x` (half-open cells, clamped at the
    /// upper bound). Does not check interfaces.
    pub fn cell_of(&self, x: &[f64]) -> usize {
        let counts = self.split.per_axis();
        let dim = self.dim();
        let mut cell = vec![0usize; dim];
        for a in 0..dim {
            let size = (self.bounds.hi[a] - self.bounds.lo[a]) / counts[a] as f64;
            let i = ((x[a] - self.bounds.lo[a]) / size).floor();
            cell[a] = (i.max(0.0) as usize).min(counts[a] - 1);
        }
        let order: Vec<usize> = if dim == 2 { vec![1, 0] } else { vec![0, 1, 2] };
        order.iter().fold(0, |acc, &a| acc * counts[a] + cell[a])
    }

    /// Locate a spatial point. Points within `tol` of an interface belong
    /// to that interface (the lowest id wins at corners).
    pub fn locate(&self, x: &[f64], tol: f64) -> Result<Location> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                context: "spatial point",
                expected: self.dim(),
                got: x.len(),
            });
        }
        if !self.bounds.contains(x, tol) {
            return Err(Error::OutOfDomain { rows: vec![0] });
        }
        if let Some(f) = self.interfaces.iter().find(|f| f.on_facet(x, tol)) {
            return Ok(Location::Interface(f.id));
        }
        Ok(Location::Subdomain(self.cell_of(x)))
    }

    /// JSON summary: boxes, interface facets and collocation points, and
    /// optional discard counts.
    pub fn summary(&self, discarded: Option<&AssignmentStats>) -> serde_json::Value {
        let counts = self.split.counts();
        serde_json::json!({
            "bounds": self.bounds,
            "split": counts,
            "subdomains": self.subdomains,
            "interfaces": self.interfaces.iter().map(|f| serde_json::json!({
                "id": f.id,
                "left_id": f.left_id,
                "right_id": f.right_id,
                "axis": f.axis,
                "position": f.position,
                "facet": f.facet,
                "normal": f.normal.spatial(),
                "collocation": f.collocation,
            })).collect::<Vec<_>>(),
            "assignment": discarded,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub subdomain_id: usize,
    pub rows: Vec<Row>,
}

impl LocalDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Bookkeeping from [`assign_samples`] and [`apply_gap`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentStats {
    /// Samples dropped because they lie on an interface.
    pub discarded: usize,
    /// Samples per subdomain after assignment (and gap removal).
    pub counts: Vec<usize>,
    /// Samples removed by the gap, per interface.
    pub gap_removed: Vec<usize>,
    /// Distance between the outermost removed grid lines, per interface.
    pub gap_width: Vec<f64>,
}

/// Send each sample to the box whose interior contains it. Samples within
/// `tol` of an interface facet are dropped and counted.
pub fn assign_samples(
    dataset: &Dataset,
    partition: &Partition,
    tol: f64,
) -> Result<(Vec<LocalDataset>, AssignmentStats)> {
    if dataset.schema.spatial_dim != partition.dim() {
        return Err(Error::Shape {
            context: "dataset spatial dimension",
            expected: partition.dim(),
            got: dataset.schema.spatial_dim,
        });
    }
    let outside: Vec<usize> = dataset
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| !partition.bounds.contains(&r.x, tol))
        .map(|(i, _)| i)
        .collect();
    if !outside.is_empty() {
        return Err(Error::OutOfDomain { rows: outside });
    }
    let mut locals: Vec<LocalDataset> = (0..partition.n_subdomains())
        .map(|i| LocalDataset {
            subdomain_id: i,
            rows: Vec::new(),
        })
        .collect();
    let mut discarded = 0;
    for r in &dataset.rows {
        if partition.interfaces.iter().any(|f| f.on_facet(&r.x, tol)) {
            discarded += 1;
        } else {
            locals[partition.cell_of(&r.x)].rows.push(r.clone());
        }
    }
    let stats = AssignmentStats {
        discarded,
        counts: locals.iter().map(LocalDataset::len).collect(),
        gap_removed: vec![0; partition.interfaces.len()],
        gap_width: vec![0.0; partition.interfaces.len()],
    };
    Ok((locals, stats))
}

/// Remove the `rows` grid lines nearest each interface on both sides.
///
/// A grid line is a distinct coordinate value along the interface normal
/// among the adjacent subdomain's samples. The reported gap width is the
/// distance between the outermost removed lines on either side.
pub fn apply_gap(
    locals: &[LocalDataset],
    partition: &Partition,
    rows: usize,
    stats: &mut AssignmentStats,
) -> Result<Vec<LocalDataset>> {
    let mut out = locals.to_vec();
    let n_if = partition.interfaces.len();
    stats.gap_removed = vec![0; n_if];
    stats.gap_width = vec![0.0; n_if];
    if rows == 0 {
        return Ok(out);
    }
    // Compute every cut against the un-gapped data so interface order does
    // not matter.
    let mut cuts: Vec<(usize, usize, f64, f64)> = Vec::new();
    for f in &partition.interfaces {
        let mut outer = [f.position; 2];
        for (side, id) in [f.left_id, f.right_id].into_iter().enumerate() {
            let mut lines: Vec<f64> = locals[id].rows.iter().map(|r| r.x[f.axis]).collect();
            lines.sort_by(|a, b| {
                (a - f.position)
                    .abs()
                    .total_cmp(&(b - f.position).abs())
                    .then(a.total_cmp(b))
            });
            lines.dedup();
            let taken = &lines[..rows.min(lines.len())];
            let (lo, hi) = taken.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
                (l.min(*v), h.max(*v))
            });
            if !taken.is_empty() {
                outer[side] = if side == 0 { lo } else { hi };
                cuts.push((f.id, id, lo, hi));
            }
        }
        stats.gap_width[f.id] = outer[1] - outer[0];
    }
    for (iface, id, lo, hi) in cuts {
        let axis = partition.interfaces[iface].axis;
        let before = out[id].rows.len();
        out[id].rows.retain(|r| r.x[axis] < lo || r.x[axis] > hi);
        stats.gap_removed[iface] += before - out[id].rows.len();
    }
    if let Some(empty) = out.iter().find(|l| l.is_empty()) {
        return Err(Error::EmptySubdomain(empty.subdomain_id));
    }
    stats.counts = out.iter().map(LocalDataset::len).collect();
    Ok(out)
}

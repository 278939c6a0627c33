//! Discrete measures, patches and the monomial test-function basis.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Node count up to which patch radii are exact pairwise maxima.
pub const PAIR_CUTOFF: usize = 2048;

/// Relative threshold below which weights are purged after recombination.
pub const PURGE_THRESHOLD: f64 = 1e-15;

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Running Neumaier accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    sum: f64,
    c: f64,
}

impl Accumulator {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.c
    }
}

/// One atom of a discrete measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub point: Vec<f64>,
    pub weight: f64,
}

/// A finitely supported nonnegative measure on R^N. Points are stored flat,
/// `dim` coordinates per node.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    total: f64,
}

impl DiscreteMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() != dim * weights.len() {
            return Err(Error::InvalidPatch(format!(
                "{} coordinates do not form {} points of dim {dim}",
                points.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidPatch(format!("invalid weight {w}")));
        }
        let total = compensated_sum(weights.iter().copied());
        Ok(Self {
            dim,
            points,
            weights,
            total,
        })
    }

    /// Unit point mass at `x`.
    pub fn dirac(x: &[f64]) -> Self {
        Self {
            dim: x.len(),
            points: x.to_vec(),
            weights: vec![1.0],
            total: 1.0,
        }
    }

    pub fn from_nodes(dim: usize, nodes: &[Node]) -> Result<Self> {
        if let Some(n) = nodes.iter().find(|n| n.point.len() != dim) {
            return Err(Error::InvalidPatch(format!(
                "node of length {} in a measure of dim {dim}",
                n.point.len()
            )));
        }
        let points = nodes.iter().flat_map(|n| n.point.iter().copied()).collect();
        let weights = nodes.iter().map(|n| n.weight).collect();
        Self::new(dim, points, weights)
    }

    /// Built from parts whose consistency the caller guarantees.
    pub(crate) fn from_parts_unchecked(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Self {
        debug_assert_eq!(points.len(), dim * weights.len());
        let total = compensated_sum(weights.iter().copied());
        Self {
            dim,
            points,
            weights,
            total,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Intended total mass.
    pub fn total(&self) -> f64 {
        self.total
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    pub fn nodes(&self) -> Vec<Node> {
        self.iter()
            .map(|(p, w)| Node {
                point: p.to_vec(),
                weight: w,
            })
            .collect()
    }

    /// Σ f(p_j) w_j, compensated.
    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        compensated_sum(self.iter().map(|(p, w)| w * f(p)))
    }

    /// Sub-measure on `indices` (weights unchanged).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut points = Vec::with_capacity(indices.len() * self.dim);
        let mut weights = Vec::with_capacity(indices.len());
        for &i in indices {
            points.extend_from_slice(self.point(i));
            weights.push(self.weights[i]);
        }
        Self::from_parts_unchecked(self.dim, points, weights)
    }

    /// Multiply every weight by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        for w in &mut self.weights {
            *w *= factor;
        }
        self.total *= factor;
        self
    }

    /// Drop nodes whose weight is below `rel · total`. The intended total is
    /// kept.
    pub fn purge(&mut self, rel: f64) {
        let cut = rel * self.total;
        if self.weights.iter().all(|w| *w >= cut) {
            return;
        }
        let dim = self.dim;
        let mut points = Vec::with_capacity(self.points.len());
        let mut weights = Vec::with_capacity(self.weights.len());
        for (p, w) in self.points.chunks_exact(dim).zip(&self.weights) {
            if *w >= cut {
                points.extend_from_slice(p);
                weights.push(*w);
            }
        }
        self.points = points;
        self.weights = weights;
    }

    /// Concatenate measures of the same dimension.
    pub fn concat(dim: usize, parts: impl IntoIterator<Item = DiscreteMeasure>) -> Self {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for m in parts {
            debug_assert_eq!(m.dim, dim);
            points.extend_from_slice(&m.points);
            weights.extend_from_slice(&m.weights);
        }
        Self::from_parts_unchecked(dim, points, weights)
    }

    /// CSV with header `x1,...,xN,weight` and 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dim).map(|k| format!("x{k}")).collect();
        header.push("weight".into());
        wtr.write_record(&header)?;
        for (p, wt) in self.iter() {
            let row: Vec<String> = p
                .iter()
                .chain(std::iter::once(&wt))
                .map(|v| format_f64(*v))
                .collect();
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.len() < 2 || &header[header.len() - 1] != "weight" {
            return Err(Error::Io("measure CSV must end with a `weight` column".into()));
        }
        let dim = header.len() - 1;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            for (k, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Io(format!("bad number `{field}`")))?;
                if k < dim {
                    points.push(v);
                } else {
                    weights.push(v);
                }
            }
        }
        Self::new(dim, points, weights)
    }
}

/// 17 significant digits, round-trip exact.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Patch radius together with whether it is the exact pairwise maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Radius {
    pub value: f64,
    pub exact: bool,
}

/// Largest pairwise distance among the indexed points, exact up to
/// `pair_cutoff` points and otherwise bounded by twice the largest distance to
/// the weighted centroid.
pub fn radius_with_cutoff(
    measure: &DiscreteMeasure,
    indices: &[usize],
    pair_cutoff: usize,
) -> Result<Radius> {
    if indices.is_empty() {
        return Err(Error::InvalidPatch("radius of an empty index set".into()));
    }
    if indices.len() <= pair_cutoff {
        let mut best = 0.0f64;
        for (a, &i) in indices.iter().enumerate() {
            let pi = measure.point(i);
            for &j in &indices[a + 1..] {
                best = best.max(dist2(pi, measure.point(j)));
            }
        }
        return Ok(Radius {
            value: best.sqrt(),
            exact: true,
        });
    }
    let c = weighted_mean(measure, indices);
    let far = indices
        .iter()
        .map(|&i| dist2(measure.point(i), &c))
        .fold(0.0f64, f64::max);
    Ok(Radius {
        value: 2.0 * far.sqrt(),
        exact: false,
    })
}

pub fn radius(measure: &DiscreteMeasure, indices: &[usize]) -> Result<f64> {
    radius_with_cutoff(measure, indices, PAIR_CUTOFF).map(|r| r.value)
}

/// Weighted mean of the indexed points; plain mean if their mass is zero.
pub(crate) fn weighted_mean(measure: &DiscreteMeasure, indices: &[usize]) -> Vec<f64> {
    let dim = measure.dim();
    let mass = compensated_sum(indices.iter().map(|&i| measure.weight(i)));
    let mut c = vec![0.0; dim];
    if mass > 0.0 {
        for &i in indices {
            let w = measure.weight(i) / mass;
            for (ck, pk) in c.iter_mut().zip(measure.point(i)) {
                *ck += w * pk;
            }
        }
    } else {
        for &i in indices {
            for (ck, pk) in c.iter_mut().zip(measure.point(i)) {
                *ck += pk / indices.len() as f64;
            }
        }
    }
    c
}

/// A member of a patch division.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub indices: Vec<usize>,
    pub radius: f64,
    pub weight: f64,
    /// Radius is the exact pairwise maximum (not the centroid bound).
    pub radius_exact: bool,
    /// Emitted because it could not be split further (singleton or
    /// coincident points), not because it passed the acceptance test.
    pub forced: bool,
}

impl Patch {
    pub fn new(measure: &DiscreteMeasure, indices: Vec<usize>) -> Result<Self> {
        let r = radius_with_cutoff(measure, &indices, PAIR_CUTOFF)?;
        let weight = compensated_sum(indices.iter().map(|&i| measure.weight(i)));
        Ok(Self {
            indices,
            radius: r.value,
            weight,
            radius_exact: r.exact,
            forced: false,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Disjoint cover of a measure's node indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchDivision {
    pub patches: Vec<Patch>,
}

impl PatchDivision {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Whether the patches are pairwise disjoint and cover `0..node_count`.
    pub fn is_disjoint_cover(&self, node_count: usize) -> bool {
        let mut seen = vec![false; node_count];
        let mut count = 0;
        for p in &self.patches {
            for &i in &p.indices {
                if i >= node_count || seen[i] {
                    return false;
                }
                seen[i] = true;
                count += 1;
            }
        }
        count == node_count
    }
}

/// All monomials of total degree ≤ m in N variables, first entry the constant.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBasis {
    dim: usize,
    degree: u32,
    exponents: Vec<Vec<u32>>,
}

impl MonomialBasis {
    /// Graded lexicographic order: by total degree, then lexicographically
    /// descending in the exponent of `x1`, `x2`, ...
    pub fn new(dim: usize, degree: u32) -> Self {
        let mut exponents = Vec::new();
        for d in 0..=degree {
            let mut cur = vec![0u32; dim];
            push_with_degree(&mut exponents, &mut cur, 0, d);
        }
        Self {
            dim,
            degree,
            exponents,
        }
    }

    /// Custom ordering. The first exponent must be zero and entries distinct.
    pub fn from_exponents(dim: usize, exponents: Vec<Vec<u32>>) -> Result<Self> {
        if exponents.is_empty() || exponents[0].iter().any(|&e| e != 0) {
            return Err(Error::InvalidParams(
                "basis must start with the constant monomial".into(),
            ));
        }
        if exponents.iter().any(|e| e.len() != dim) {
            return Err(Error::InvalidParams("exponent length mismatch".into()));
        }
        let mut sorted = exponents.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != exponents.len() {
            return Err(Error::InvalidParams("duplicate monomials".into()));
        }
        let degree = exponents
            .iter()
            .map(|e| e.iter().sum::<u32>())
            .max()
            .unwrap_or(0);
        Ok(Self {
            dim,
            degree,
            exponents,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Writes `(g_1(x), …, g_M(x))` into `out`; `powers` is scratch of length
    /// `dim * (degree + 1)`.
    pub fn evaluate_into(&self, x: &[f64], powers: &mut [f64], out: &mut [f64]) {
        let stride = self.degree as usize + 1;
        for (k, &xk) in x.iter().enumerate() {
            let row = &mut powers[k * stride..(k + 1) * stride];
            row[0] = 1.0;
            for e in 1..stride {
                row[e] = row[e - 1] * xk;
            }
        }
        for (o, alpha) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (k, &a) in alpha.iter().enumerate() {
                if a > 0 {
                    v *= powers[k * stride + a as usize];
                }
            }
            *o = v;
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        let mut powers = vec![0.0; self.dim * (self.degree as usize + 1)];
        let mut out = vec![0.0; self.len()];
        self.evaluate_into(x, &mut powers, &mut out);
        out
    }
}

fn push_with_degree(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        push_with_degree(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

pub fn evaluate_basis(basis: &MonomialBasis, x: &[f64]) -> Vec<f64> {
    basis.evaluate(x)
}

/// `∫ g_k dμ` for every basis function, compensated.
pub fn moments(measure: &DiscreteMeasure, basis: &MonomialBasis) -> Vec<f64> {
    let m = basis.len();
    let mut acc = vec![Accumulator::default(); m];
    let mut powers = vec![0.0; basis.dim() * (basis.degree() as usize + 1)];
    let mut vals = vec![0.0; m];
    for (p, w) in measure.iter() {
        basis.evaluate_into(p, &mut powers, &mut vals);
        for (a, v) in acc.iter_mut().zip(&vals) {
            a.add(w * v);
        }
    }
    acc.iter().map(|a| a.value()).collect()
}

//! Reduced measures: keep every test-function integral of a discrete measure
//! while shrinking its support to at most `rank(A) + 1` of its own atoms.
//!
//! The test matrix `A[i][j] = g_i(y_j)` is built over the atoms, a kernel
//! basis is taken from its singular value decomposition, and atoms are
//! eliminated one kernel vector at a time: with `v` the leading kernel vector,
//! `α = min{β_j / v_j : v_j > 0}` removes the arg-min atom, `β ← β − αv`, and
//! the remaining kernel vectors are made to vanish at that atom by one step of
//! Gaussian elimination against `v`.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};
use crate::measures::{compensated_sum, moments, DiscreteMeasure, MonomialBasis};

/// Relative singular-value threshold for numerical rank.
pub const RANK_TOL: f64 = 1e-10;
/// Largest tolerated relative moment drift of a finished reduction.
pub const DRIFT_TOL: f64 = 1e-8;
/// Relative residual `‖Av‖ / (‖A‖‖v‖)` above which updated kernel vectors are
/// recomputed from scratch.
const KERNEL_RESIDUAL_TOL: f64 = 1e-10;

/// `A[i][j] = g_i(y_j)`: rows follow the basis order, columns the points.
pub fn build_test_matrix<'a, I>(points: I, basis: &MonomialBasis) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let m = basis.len();
    let mut powers = vec![0.0; basis.dim() * (basis.degree() as usize + 1)];
    let mut col = vec![0.0; m];
    let mut data = Vec::new();
    for p in points {
        basis.evaluate_into(p, &mut powers, &mut col);
        data.extend_from_slice(&col);
    }
    let k = data.len() / m.max(1);
    DMatrix::from_vec(m, k, data)
}

/// Orthonormal basis of `ker(A)` and the numerical rank, from the SVD with
/// singular values below `tol · σ_max` treated as zero.
pub fn kernel_and_rank(a: &DMatrix<f64>, tol: f64) -> Result<(Vec<DVector<f64>>, usize)> {
    let (m, k) = a.shape();
    if k == 0 {
        return Err(Error::Numeric("test matrix has no columns".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in test matrix".into()));
    }
    // a wide matrix is padded with zero rows so that V comes out square
    let square = if m < k {
        let mut p = DMatrix::zeros(k, k);
        p.view_mut((0, 0), (m, k)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = SVD::try_new(square, false, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD returned no right singular vectors".into()))?;
    let sigma = &svd.singular_values;
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let cut = tol * smax;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let mut kernel = Vec::new();
    let mut rank = 0;
    for &i in &order {
        if smax > 0.0 && sigma[i] > cut {
            rank += 1;
        } else {
            kernel.push(v_t.row(i).transpose());
        }
    }
    Ok((kernel, rank))
}

/// Orthonormal basis of `ker(A)`; empty when `A` has full column rank.
pub fn kernel_basis(a: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    kernel_and_rank(a, RANK_TOL).map(|(k, _)| k)
}

/// State of the elimination loop on one set of atoms.
#[derive(Debug, Clone)]
pub struct ReductionWorkspace {
    matrix: DMatrix<f64>,
    kernel: Vec<Vec<f64>>,
    beta: Vec<f64>,
    alive: Vec<usize>,
    eliminated: Vec<usize>,
    rank: usize,
    rank_tol: f64,
    refactorizations: usize,
}

impl ReductionWorkspace {
    /// `matrix` columns correspond to `ids`, with current weights `beta`.
    pub fn new(matrix: DMatrix<f64>, beta: Vec<f64>, ids: Vec<usize>, rank_tol: f64) -> Result<Self> {
        debug_assert_eq!(matrix.ncols(), beta.len());
        debug_assert_eq!(ids.len(), beta.len());
        let (kernel, rank) = kernel_and_rank(&matrix, rank_tol)?;
        Ok(Self {
            matrix,
            kernel: kernel.into_iter().map(|v| v.as_slice().to_vec()).collect(),
            beta,
            alive: ids,
            eliminated: Vec::new(),
            rank,
            rank_tol,
            refactorizations: 0,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn kernel_dim(&self) -> usize {
        self.kernel.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alive(&self) -> &[usize] {
        &self.alive
    }

    pub fn eliminated(&self) -> &[usize] {
        &self.eliminated
    }

    pub fn kernel(&self) -> &[Vec<f64>] {
        &self.kernel
    }

    pub fn refactorizations(&self) -> usize {
        self.refactorizations
    }

    /// One elimination. Returns `false` once the kernel is exhausted.
    pub fn eliminate_one(&mut self) -> Result<bool> {
        loop {
            if self.kernel.is_empty() {
                return Ok(false);
            }
            let mut v = self.kernel.remove(0);
            if !v.iter().any(|x| *x > 0.0) {
                if v.iter().all(|x| *x == 0.0) {
                    continue;
                }
                v.iter_mut().for_each(|x| *x = -*x);
            }

            // α = min β_j / v_j over v_j > 0, smallest index on ties
            let mut best: Option<(usize, f64)> = None;
            for (j, (&b, &vj)) in self.beta.iter().zip(&v).enumerate() {
                if vj > 0.0 {
                    let r = b / vj;
                    if best.is_none_or(|(_, a)| r < a) {
                        best = Some((j, r));
                    }
                }
            }
            let (e, alpha) = best.expect("kernel vector has a positive entry");
            let pivot = v[e];
            assert!(pivot > 0.0);

            for (b, vj) in self.beta.iter_mut().zip(&v) {
                *b -= alpha * vj;
                if *b < 0.0 {
                    *b = 0.0;
                }
            }
            self.beta[e] = 0.0;

            for w in &mut self.kernel {
                let d = w[e] / pivot;
                if d != 0.0 {
                    for (wj, vj) in w.iter_mut().zip(&v) {
                        *wj -= d * vj;
                    }
                }
                w.remove(e);
            }
            self.beta.remove(e);
            self.eliminated.push(self.alive.remove(e));
            self.matrix = self.matrix.clone().remove_column(e);

            if let Some(next) = self.kernel.first() {
                if self.residual(next) > KERNEL_RESIDUAL_TOL {
                    self.refactor()?;
                }
            }
            return Ok(true);
        }
    }

    fn residual(&self, v: &[f64]) -> f64 {
        let v = DVector::from_column_slice(v);
        let an = self.matrix.norm();
        let vn = v.norm();
        if an == 0.0 || vn == 0.0 {
            return 0.0;
        }
        (&self.matrix * &v).norm() / (an * vn)
    }

    fn refactor(&mut self) -> Result<()> {
        let (kernel, _) = kernel_and_rank(&self.matrix, self.rank_tol)?;
        self.kernel = kernel.into_iter().map(|v| v.as_slice().to_vec()).collect();
        self.refactorizations += 1;
        Ok(())
    }

    /// Eliminate until the kernel is empty.
    pub fn run(&mut self) -> Result<()> {
        while self.eliminate_one()? {}
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReduceOptions {
    pub rank_tol: f64,
    pub drift_tol: f64,
    /// Largest atom count handled in one factorisation. Larger measures are
    /// reduced by sweeping: survivors of one batch are carried into the next.
    /// `None` picks `2 · M_G`.
    pub batch_cap: Option<usize>,
}

impl Default for ReduceOptions {
    fn default() -> Self {
        Self {
            rank_tol: RANK_TOL,
            drift_tol: DRIFT_TOL,
            batch_cap: None,
        }
    }
}

/// Per-patch diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionReport {
    pub measure: DiscreteMeasure,
    pub k_before: usize,
    /// Largest numerical rank met across batches.
    pub rank: usize,
    pub k_after: usize,
    pub max_drift: f64,
    /// Drift exceeded tolerance; `measure` is the unreduced input.
    pub failed: bool,
}

/// Reduce `measure` keeping all `basis` integrals; see [`reduce_with_report`].
pub fn reduce_measure(measure: &DiscreteMeasure, basis: &MonomialBasis) -> Result<DiscreteMeasure> {
    let report = reduce_with_report(measure, basis, &ReduceOptions::default())?;
    if report.failed {
        return Err(Error::ReductionFailed {
            drift: report.max_drift,
        });
    }
    Ok(report.measure)
}

/// Reduce and report. A reduction whose moment drift exceeds
/// `opts.drift_tol` returns the input unchanged with `failed` set.
pub fn reduce_with_report(
    measure: &DiscreteMeasure,
    basis: &MonomialBasis,
    opts: &ReduceOptions,
) -> Result<ReductionReport> {
    let k = measure.len();
    if measure.dim() != basis.dim() {
        return Err(Error::InvalidPatch("measure and basis dimensions differ".into()));
    }
    if k <= 1 {
        return Ok(ReductionReport {
            measure: measure.clone(),
            k_before: k,
            rank: k,
            k_after: k,
            max_drift: 0.0,
            failed: false,
        });
    }
    let mass = measure.total();
    if !(mass > 0.0) {
        return Err(Error::DegeneratePatch("patch has zero mass".into()));
    }

    // Affine changes of coordinates map polynomials of degree ≤ m onto
    // themselves, so the kernel is computed on centred, scaled points.
    let normalized = normalize(measure);
    let m = basis.len();
    let cap = opts.batch_cap.unwrap_or(2 * m).max(m + 2);
    let beta: Vec<f64> = measure.weights().iter().map(|w| w / mass).collect();

    let (survivors, weights, rank) = if k <= cap {
        let a = build_test_matrix(normalized.chunks_exact(measure.dim()), basis);
        let mut ws = ReductionWorkspace::new(a, beta, (0..k).collect(), opts.rank_tol)?;
        let rank = ws.rank();
        ws.run()?;
        (ws.alive.clone(), ws.beta.clone(), rank)
    } else {
        sweep(&normalized, measure.dim(), beta, basis, cap, opts.rank_tol)?
    };

    let mut keep: Vec<(usize, f64)> = survivors
        .into_iter()
        .zip(weights)
        .filter(|(_, w)| *w > 0.0)
        .collect();
    keep.sort_by_key(|(i, _)| *i);
    let dim = measure.dim();
    let mut points = Vec::with_capacity(keep.len() * dim);
    let mut ws = Vec::with_capacity(keep.len());
    for (i, w) in &keep {
        points.extend_from_slice(measure.point(*i));
        ws.push(*w);
    }
    // restore the patch mass exactly
    let sum = compensated_sum(ws.iter().copied());
    for w in &mut ws {
        *w *= mass / sum;
    }
    let reduced = DiscreteMeasure::from_parts_unchecked(dim, points, ws);

    let before = moments(measure, basis);
    let after = moments(&reduced, basis);
    let max_drift = before
        .iter()
        .zip(&after)
        .map(|(b, a)| (b - a).abs() / mass / (b.abs() / mass).max(1.0))
        .fold(0.0, f64::max);
    let failed = !(max_drift <= opts.drift_tol);
    let k_after = if failed { k } else { reduced.len() };
    Ok(ReductionReport {
        measure: if failed { measure.clone() } else { reduced },
        k_before: k,
        rank,
        k_after,
        max_drift,
        failed,
    })
}

fn normalize(measure: &DiscreteMeasure) -> Vec<f64> {
    let dim = measure.dim();
    let all: Vec<usize> = (0..measure.len()).collect();
    let c = crate::measures::weighted_mean(measure, &all);
    let mut scale = 0.0f64;
    for (p, _) in measure.iter() {
        for (x, ck) in p.iter().zip(&c) {
            scale = scale.max((x - ck).abs());
        }
    }
    if scale == 0.0 {
        scale = 1.0;
    }
    let mut out = Vec::with_capacity(measure.len() * dim);
    for (p, _) in measure.iter() {
        out.extend(p.iter().zip(&c).map(|(x, ck)| (x - ck) / scale));
    }
    out
}

/// Batched reduction: survivors of each batch are topped up with fresh atoms
/// until all atoms have been seen.
fn sweep(
    points: &[f64],
    dim: usize,
    beta: Vec<f64>,
    basis: &MonomialBasis,
    cap: usize,
    rank_tol: f64,
) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    let k = beta.len();
    let mut ids: Vec<usize> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut next = 0;
    let mut rank = 0;
    while next < k {
        while ids.len() < cap && next < k {
            ids.push(next);
            weights.push(beta[next]);
            next += 1;
        }
        let a = build_test_matrix(ids.iter().map(|&i| &points[i * dim..(i + 1) * dim]), basis);
        let mut ws = ReductionWorkspace::new(a, weights, ids, rank_tol)?;
        rank = rank.max(ws.rank());
        ws.run()?;
        let (alive, beta_after) = (ws.alive, ws.beta);
        ids = Vec::with_capacity(cap);
        weights = Vec::with_capacity(cap);
        for (i, w) in alive.into_iter().zip(beta_after) {
            if w > 0.0 {
                ids.push(i);
                weights.push(w);
            }
        }
    }
    Ok((ids, weights, rank))
}

//! Patch divisions of a measure's support.

use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::measures::{compensated_sum, DiscreteMeasure, Patch, PatchDivision};

/// Points closer than this to each other are treated as one location.
pub const COINCIDENT_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatchKind {
    RecursiveWLL,
    RecursiveLL,
    Random,
    ConcentricCircles,
}

impl PatchKind {
    pub fn name(&self) -> &'static str {
        match self {
            PatchKind::RecursiveWLL => "wll",
            PatchKind::RecursiveLL => "ll",
            PatchKind::Random => "rand",
            PatchKind::ConcentricCircles => "cc",
        }
    }

    pub fn is_recursive(&self) -> bool {
        matches!(self, PatchKind::RecursiveWLL | PatchKind::RecursiveLL)
    }
}

impl FromStr for PatchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wll" => Ok(PatchKind::RecursiveWLL),
            "ll" => Ok(PatchKind::RecursiveLL),
            "rand" | "random" => Ok(PatchKind::Random),
            "cc" => Ok(PatchKind::ConcentricCircles),
            other => Err(Error::Config(format!("unknown patch rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchRule {
    pub kind: PatchKind,
    /// Scale of the radius bound (recursive rules).
    pub lambda: f64,
    /// Number of groups (random and concentric rules).
    pub target_patches: usize,
    pub seed: u64,
    /// Degree of the uniformly hypoelliptic condition used by the LL bound.
    pub ell: u32,
}

impl PatchRule {
    pub fn wll(lambda: f64) -> Self {
        Self {
            kind: PatchKind::RecursiveWLL,
            lambda,
            target_patches: 1,
            seed: 0,
            ell: 1,
        }
    }

    pub fn ll(lambda: f64) -> Self {
        Self {
            kind: PatchKind::RecursiveLL,
            ..Self::wll(lambda)
        }
    }

    pub fn random(target_patches: usize, seed: u64) -> Self {
        Self {
            kind: PatchKind::Random,
            lambda: 1.0,
            target_patches,
            seed,
            ell: 1,
        }
    }

    pub fn concentric(target_patches: usize) -> Self {
        Self {
            kind: PatchKind::ConcentricCircles,
            ..Self::random(target_patches, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParams(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.target_patches == 0 {
            return Err(Error::InvalidParams("target_patches must be at least 1".into()));
        }
        if self.ell == 0 {
            return Err(Error::InvalidParams("ell must be at least 1".into()));
        }
        Ok(())
    }
}

/// Position of an interior step within the time partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub maturity: f64,
    /// Time reached after the step.
    pub time: f64,
    /// Length of the step.
    pub step: f64,
    /// Moment degree of the scheme.
    pub degree: u32,
}

impl StepContext {
    pub fn new(maturity: f64, time: f64, step: f64, degree: u32) -> Result<Self> {
        let ctx = Self {
            maturity,
            time,
            step,
            degree,
        };
        ctx.check()?;
        Ok(ctx)
    }

    fn check(&self) -> Result<()> {
        if !(self.time < self.maturity) {
            return Err(Error::InvalidContext(format!(
                "time {} is not before maturity {}",
                self.time, self.maturity
            )));
        }
        if !(self.step > 0.0) || !self.time.is_finite() {
            return Err(Error::InvalidContext(format!("bad step length {}", self.step)));
        }
        Ok(())
    }

    /// WLL threshold at unit weight: λ-free part of the bound.
    fn wll_scale(&self) -> f64 {
        let m = self.degree as f64;
        (self.maturity - self.time).powf(m / (2.0 * (m + 1.0))) * self.step.sqrt()
    }
}

/// Radius minus the weighted radius bound; a patch is accepted when this is
/// not positive. The bound grows as the patch weight shrinks, so light
/// regions of the support are gathered into wide patches.
pub fn penalty(ctx: &StepContext, radius: f64, weight: f64, lambda: f64) -> Result<f64> {
    ctx.check()?;
    let m = ctx.degree as f64;
    Ok(radius - lambda * ctx.wll_scale() * weight.max(0.0).powf(-1.0 / (m + 1.0)))
}

/// Unweighted radius bound used by the LL rule.
pub fn ll_radius_bound(ctx: &StepContext, ell: u32) -> Result<f64> {
    ctx.check()?;
    let m = ctx.degree as f64;
    let l = ell as f64;
    let inner = ctx.step.powf(m + 1.0) / (ctx.maturity - ctx.time).powf(m * (1.0 - l));
    Ok(inner.powf(1.0 / (2.0 * (m + 1.0))))
}

/// Mean of the indexed points with weights renormalised over the subset.
pub fn centroid(measure: &DiscreteMeasure, indices: &[usize]) -> Result<Vec<f64>> {
    let mass = compensated_sum(indices.iter().map(|&i| measure.weight(i)));
    if !(mass > 0.0) {
        return Err(Error::DegeneratePatch("subset has zero total weight".into()));
    }
    let mut c = vec![0.0; measure.dim()];
    for &i in indices {
        let w = measure.weight(i) / mass;
        for (ck, pk) in c.iter_mut().zip(measure.point(i)) {
            *ck += w * pk;
        }
    }
    Ok(c)
}

/// Leading eigenvector of the weighted covariance of the indexed points.
pub fn projection_direction(measure: &DiscreteMeasure, indices: &[usize]) -> Result<Vec<f64>> {
    let c = centroid(measure, indices)?;
    let dim = measure.dim();
    let mass = compensated_sum(indices.iter().map(|&i| measure.weight(i)));
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut diff = vec![0.0; dim];
    for &i in indices {
        let w = measure.weight(i) / mass;
        for (d, (p, ck)) in diff.iter_mut().zip(measure.point(i).iter().zip(&c)) {
            *d = p - ck;
        }
        for a in 0..dim {
            for b in 0..dim {
                cov[(a, b)] += w * diff[a] * diff[b];
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let (top, &lmax) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .ok_or(Error::DegenerateDirection)?;
    if !(lmax > 0.0) {
        return Err(Error::DegenerateDirection);
    }
    let mut v: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::DegenerateDirection);
    }
    let first = v.iter().copied().find(|x| *x != 0.0).unwrap_or(1.0);
    let sign = if first < 0.0 { -1.0 } else { 1.0 };
    for x in &mut v {
        *x *= sign / norm;
    }
    Ok(v)
}

/// Order members by projection onto `direction` and cut in half; the low
/// half receives ⌊k/2⌋ members.
pub fn split_half(
    measure: &DiscreteMeasure,
    indices: &[usize],
    direction: &[f64],
    center: &[f64],
) -> (Vec<usize>, Vec<usize>) {
    let mut keyed: Vec<(f64, usize)> = indices
        .iter()
        .map(|&i| {
            let proj = measure
                .point(i)
                .iter()
                .zip(center)
                .zip(direction)
                .map(|((p, c), d)| (p - c) * d)
                .sum::<f64>();
            (proj, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let half = keyed.len() / 2;
    let low = keyed[..half].iter().map(|k| k.1).collect();
    let high = keyed[half..].iter().map(|k| k.1).collect();
    (low, high)
}

fn coincident(measure: &DiscreteMeasure, indices: &[usize]) -> bool {
    let first = measure.point(indices[0]);
    indices[1..].iter().all(|&i| {
        measure
            .point(i)
            .iter()
            .zip(first)
            .all(|(a, b)| (a - b).abs() <= COINCIDENT_TOL)
    })
}

/// Divide the support of `measure` into patches according to `rule`.
pub fn divide(measure: &DiscreteMeasure, ctx: &StepContext, rule: &PatchRule) -> Result<PatchDivision> {
    rule.validate()?;
    ctx.check()?;
    let k = measure.len();
    if k == 0 {
        return Ok(PatchDivision::default());
    }
    let all: Vec<usize> = (0..k).collect();
    let patches = match rule.kind {
        PatchKind::RecursiveWLL | PatchKind::RecursiveLL => {
            let ll_bound = if rule.kind == PatchKind::RecursiveLL {
                rule.lambda * ll_radius_bound(ctx, rule.ell)?
            } else {
                0.0
            };
            let mut out = Vec::new();
            recurse(measure, ctx, rule, ll_bound, all, &mut out)?;
            out
        }
        PatchKind::Random => {
            let mut order = all;
            let mut rng = ChaCha8Rng::seed_from_u64(rule.seed ^ ctx.time.to_bits());
            order.shuffle(&mut rng);
            chunk_equal(measure, order, rule.target_patches)?
        }
        PatchKind::ConcentricCircles => {
            let c = centroid(measure, &all)?;
            let mut keyed: Vec<(f64, usize)> = all
                .into_iter()
                .map(|i| {
                    let d2: f64 = measure.point(i).iter().zip(&c).map(|(p, q)| (p - q) * (p - q)).sum();
                    (d2, i)
                })
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            chunk_equal(measure, keyed.into_iter().map(|k| k.1).collect(), rule.target_patches)?
        }
    };
    Ok(PatchDivision { patches })
}

fn chunk_equal(measure: &DiscreteMeasure, order: Vec<usize>, groups: usize) -> Result<Vec<Patch>> {
    let k = order.len();
    let groups = groups.min(k).max(1);
    let mut out = Vec::with_capacity(groups);
    for g in 0..groups {
        let lo = g * k / groups;
        let hi = (g + 1) * k / groups;
        out.push(Patch::new(measure, order[lo..hi].to_vec())?);
    }
    Ok(out)
}

fn recurse(
    measure: &DiscreteMeasure,
    ctx: &StepContext,
    rule: &PatchRule,
    ll_bound: f64,
    indices: Vec<usize>,
    out: &mut Vec<Patch>,
) -> Result<()> {
    if indices.len() == 1 || coincident(measure, &indices) {
        let mut p = Patch::new(measure, indices)?;
        p.forced = p.len() > 1 || p.radius > 0.0;
        out.push(p);
        return Ok(());
    }
    let patch = Patch::new(measure, indices)?;
    let accepted = match rule.kind {
        PatchKind::RecursiveWLL => penalty(ctx, patch.radius, patch.weight, rule.lambda)? <= 0.0,
        _ => patch.radius <= ll_bound,
    };
    if accepted {
        out.push(patch);
        return Ok(());
    }
    let indices = patch.indices;
    let (low, high) = match centroid(measure, &indices).and_then(|c| {
        let dir = projection_direction(measure, &indices)?;
        Ok(split_half(measure, &indices, &dir, &c))
    }) {
        Ok(halves) => halves,
        // zero-mass or degenerate subsets fall back to singletons
        Err(_) => {
            for i in indices {
                let mut p = Patch::new(measure, vec![i])?;
                p.forced = true;
                out.push(p);
            }
            return Ok(());
        }
    };
    recurse(measure, ctx, rule, ll_bound, low, out)?;
    recurse(measure, ctx, rule, ll_bound, high, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::tests::appendix_points;

    fn ctx() -> StepContext {
        StepContext::new(1.0, 0.5, 0.25, 5).unwrap()
    }

    fn uniform(dim: usize, points: Vec<f64>) -> DiscreteMeasure {
        let k = points.len() / dim;
        DiscreteMeasure::new(dim, points, vec![1.0 / k as f64; k]).unwrap()
    }

    #[test]
    fn penalty_values() {
        let c = ctx();
        let threshold = 0.5f64.powf(5.0 / 12.0) * 0.5;
        assert!((threshold - 0.374_577_1).abs() < 1e-6);
        assert_eq!(penalty(&c, threshold, 1.0, 1.0).unwrap(), 0.0);
        assert!((penalty(&c, 0.3, 1.0, 1.0).unwrap() + 0.074_577_1).abs() < 1e-6);
        assert!(penalty(&c, 0.0, 0.01, 1.0).unwrap() < 0.0);
        let light = penalty(&c, 0.3, 1.0 / 64.0, 1.0).unwrap();
        assert!((light - (0.3 - 2.0 * threshold)).abs() < 1e-15);
        let end = StepContext {
            time: 1.0,
            ..c
        };
        assert!(matches!(penalty(&end, 0.1, 1.0, 1.0), Err(Error::InvalidContext(_))));
        assert!(StepContext::new(1.0, 1.0, 0.5, 5).is_err());
    }

    #[test]
    fn ll_bound_values() {
        let c = StepContext::new(1.0, 0.5, 0.5, 5).unwrap();
        assert!((ll_radius_bound(&c, 1).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let c2 = StepContext::new(1.0, 0.5, 0.25, 5).unwrap();
        assert!((ll_radius_bound(&c2, 1).unwrap() - 0.5).abs() < 1e-15);
        let l2 = ll_radius_bound(&c, 2).unwrap();
        let s: f64 = 0.5;
        let expect = (s.powi(6) * s.powi(5)).powf(1.0 / 12.0);
        assert!((l2 - expect).abs() < 1e-14);
    }

    #[test]
    fn centroid_examples() {
        let m = uniform(2, appendix_points());
        let all: Vec<usize> = (0..8).collect();
        let c = centroid(&m, &all).unwrap();
        assert!((c[0] - 9.0 / 8.0).abs() < 1e-15 && (c[1] - 7.0 / 8.0).abs() < 1e-15);
        assert_eq!(centroid(&m, &[3]).unwrap(), m.point(3).to_vec());
        let z = DiscreteMeasure::new(1, vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert!(matches!(centroid(&z, &[0, 1]), Err(Error::DegeneratePatch(_))));
    }

    #[test]
    fn direction_examples() {
        let line = uniform(2, vec![0.0, 0.0, 1.0, 0.0, 3.0, 0.0]);
        let d = projection_direction(&line, &[0, 1, 2]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-14 && d[1].abs() < 1e-14);

        let two = uniform(2, vec![1.0, 1.0, -2.0, 5.0]);
        let d = projection_direction(&two, &[0, 1]).unwrap();
        let (dx, dy) = (-3.0 / 5.0, 4.0 / 5.0);
        assert!((d[0] * dx + d[1] * dy).abs() > 1.0 - 1e-12);
        assert!(d[0] > 0.0);

        let sq = uniform(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let d = projection_direction(&sq, &[0, 1, 2, 3]).unwrap();
        let norm: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let mut cd = [0.0; 2];
        for i in 0..4 {
            let p = sq.point(i);
            let q = [p[0] - 0.5, p[1] - 0.5];
            let proj = q[0] * d[0] + q[1] * d[1];
            cd[0] += 0.25 * q[0] * proj;
            cd[1] += 0.25 * q[1] * proj;
        }
        let resid = ((cd[0] - 0.25 * d[0]).powi(2) + (cd[1] - 0.25 * d[1]).powi(2)).sqrt();
        assert!(resid <= 1e-10);

        let same = uniform(2, vec![2.0, 2.0, 2.0, 2.0]);
        assert_eq!(projection_direction(&same, &[0, 1]), Err(Error::DegenerateDirection));
    }

    #[test]
    fn split_examples() {
        let m = uniform(1, vec![3.0, 1.0, 0.0, 2.0, 4.0]);
        let (lo, hi) = split_half(&m, &[0, 1, 2, 3, 4], &[1.0], &[2.0]);
        assert_eq!((lo.len(), hi.len()), (2, 3));
        assert_eq!(lo, vec![2, 1]);
        let line = uniform(2, vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let (lo, hi) = split_half(&line, &[0, 1, 2, 3], &[1.0, 0.0], &[1.5, 0.0]);
        assert_eq!((lo, hi), (vec![0, 1], vec![2, 3]));
        let (lo, hi) = split_half(&line, &[3, 1], &[1.0, 0.0], &[1.5, 0.0]);
        assert_eq!((lo, hi), (vec![1], vec![3]));
    }

    fn grid16(spacing: f64) -> DiscreteMeasure {
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                pts.push(i as f64 * spacing);
                pts.push(j as f64 * spacing);
            }
        }
        uniform(2, pts)
    }

    #[test]
    fn far_apart_nodes_become_singletons() {
        let m = grid16(100.0);
        let div = divide(&m, &ctx(), &PatchRule::wll(1.0)).unwrap();
        assert_eq!(div.len(), 16);
        assert!(div.is_disjoint_cover(16));
        assert!(div.patches.iter().all(|p| p.len() == 1));
    }

    #[test]
    fn tight_cluster_is_one_patch() {
        let m = grid16(1e-4);
        for rule in [PatchRule::wll(1.0), PatchRule::ll(1.0)] {
            let div = divide(&m, &ctx(), &rule).unwrap();
            assert_eq!(div.len(), 1);
            assert!(!div.patches[0].forced);
        }
        let single = DiscreteMeasure::dirac(&[1.0, 2.0]);
        for rule in [PatchRule::wll(1.0), PatchRule::random(4, 1), PatchRule::concentric(3)] {
            assert_eq!(divide(&single, &ctx(), &rule).unwrap().len(), 1);
        }
    }

    #[test]
    fn baselines_cover_with_requested_counts() {
        let m = grid16(0.3);
        let r = divide(&m, &ctx(), &PatchRule::random(5, 7)).unwrap();
        assert_eq!(r.len(), 5);
        assert!(r.is_disjoint_cover(16));
        assert_eq!(r, divide(&m, &ctx(), &PatchRule::random(5, 7)).unwrap());
        let cc = divide(&m, &ctx(), &PatchRule::concentric(4)).unwrap();
        assert_eq!(cc.len(), 4);
        assert!(cc.is_disjoint_cover(16));
        // inner annulus holds the four central grid points
        let mut inner = cc.patches[0].indices.clone();
        inner.sort();
        assert_eq!(inner, vec![5, 6, 9, 10]);
    }

    #[test]
    fn wll_patches_pass_the_test_or_are_forced() {
        let m = grid16(0.07);
        let c = ctx();
        let div = divide(&m, &c, &PatchRule::wll(0.5)).unwrap();
        assert!(div.is_disjoint_cover(16));
        for p in &div.patches {
            assert!(p.forced || p.len() == 1 || penalty(&c, p.radius, p.weight, 0.5).unwrap() <= 0.0);
        }
    }

    #[test]
    fn coincident_points_are_one_forced_patch() {
        let m = uniform(2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let div = divide(&m, &ctx(), &PatchRule::wll(1e-9)).unwrap();
        assert_eq!(div.len(), 1);
        assert!(div.patches[0].forced);
    }

    #[test]
    fn rule_parsing_and_validation() {
        assert_eq!("WLL".parse::<PatchKind>().unwrap(), PatchKind::RecursiveWLL);
        assert_eq!("cc".parse::<PatchKind>().unwrap(), PatchKind::ConcentricCircles);
        assert!("x".parse::<PatchKind>().is_err());
        assert!(PatchRule::wll(0.0).validate().is_err());
        assert!(PatchRule::random(0, 1).validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cloud() -> impl Strategy<Value = DiscreteMeasure> {
            (1usize..4, 1usize..60).prop_flat_map(|(dim, k)| {
                (
                    prop::collection::vec(-3.0f64..3.0, dim * k),
                    prop::collection::vec(0.01f64..1.0, k),
                )
                    .prop_map(move |(pts, ws)| {
                        let s: f64 = ws.iter().sum();
                        DiscreteMeasure::new(dim, pts, ws.iter().map(|w| w / s).collect()).unwrap()
                    })
            })
        }

        proptest! {
            #[test]
            fn every_rule_gives_a_disjoint_cover(m in cloud(), lambda in 0.01f64..5.0, k in 1usize..20, seed in 0u64..100) {
                let c = ctx();
                for rule in [PatchRule::wll(lambda), PatchRule::ll(lambda), PatchRule::random(k, seed), PatchRule::concentric(k)] {
                    let div = divide(&m, &c, &rule).unwrap();
                    prop_assert!(div.is_disjoint_cover(m.len()));
                    prop_assert_eq!(&div, &divide(&m, &c, &rule).unwrap());
                }
            }

            #[test]
            fn smaller_lambda_never_gives_fewer_patches(m in cloud(), l1 in 0.01f64..3.0, f in 1.0f64..4.0) {
                let c = ctx();
                let a = divide(&m, &c, &PatchRule::wll(l1)).unwrap().len();
                let b = divide(&m, &c, &PatchRule::wll(l1 * f)).unwrap().len();
                prop_assert!(a >= b);
            }
        }
    }
}

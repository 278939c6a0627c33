//! One-step forward operators on discrete measures and time partitions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{
    combined_flow_in_place, flow_in_place, ito_drift_from_stratonovich, FlowScratch, Model,
    OdeSteps, VectorField,
};
use crate::measures::{Accumulator, DiscreteMeasure};

/// `0 = t_0 < t_1 < … < t_n = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePartition {
    times: Vec<f64>,
}

impl TimePartition {
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 {
            return Err(Error::InvalidPartition(
                "a partition starts at 0 and has at least one step".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidPartition("times must increase strictly".into()));
        }
        Ok(Self { times })
    }

    /// `t_j = jT/n`.
    pub fn even(maturity: f64, n: usize) -> Result<Self> {
        Self::check(maturity, n)?;
        let mut times: Vec<f64> = (0..=n).map(|j| maturity * j as f64 / n as f64).collect();
        times[n] = maturity;
        Self::from_times(times)
    }

    /// `t_j = T(1 − (1 − j/n)^γ)`.
    pub fn kusuoka(maturity: f64, n: usize, gamma: f64) -> Result<Self> {
        Self::check(maturity, n)?;
        if !(gamma > 0.0) {
            return Err(Error::InvalidPartition(format!("gamma = {gamma} must be positive")));
        }
        let mut times: Vec<f64> = (0..=n)
            .map(|j| maturity * (1.0 - (1.0 - j as f64 / n as f64).powf(gamma)))
            .collect();
        times[0] = 0.0;
        times[n] = maturity;
        Self::from_times(times)
    }

    fn check(maturity: f64, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidPartition("n must be at least 1".into()));
        }
        if !(maturity > 0.0) || !maturity.is_finite() {
            return Err(Error::InvalidPartition(format!("T = {maturity} must be positive")));
        }
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of steps `n`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// `s_i = t_i − t_{i−1}` for `i ≥ 1`.
    pub fn step(&self, i: usize) -> f64 {
        self.times[i] - self.times[i - 1]
    }

    pub fn maturity(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeKind {
    /// Discrete Ninomiya–Victoir with 3-point 5th-moment variables.
    NinomiyaVictoir,
    /// Degree-3 cubature: one ODE along a Rademacher-weighted combined field.
    Cub3,
    /// Euler–Maruyama with Rademacher increments.
    EulerMaruyama,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::NinomiyaVictoir => "nv",
            SchemeKind::Cub3 => "cub3",
            SchemeKind::EulerMaruyama => "em",
        }
    }

    /// Similarity degree, used as default basis degree.
    pub fn moment_degree(&self) -> u32 {
        match self {
            SchemeKind::NinomiyaVictoir => 5,
            _ => 3,
        }
    }

    /// Children per node for `d` driving Brownian motions.
    pub fn branching(&self, d: usize) -> usize {
        match self {
            SchemeKind::NinomiyaVictoir => 2 * 3usize.pow(d as u32),
            _ => 1 << d,
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nv" => Ok(SchemeKind::NinomiyaVictoir),
            "cub3" => Ok(SchemeKind::Cub3),
            "em" => Ok(SchemeKind::EulerMaruyama),
            _ => Err(Error::Config(format!("unknown scheme `{s}`"))),
        }
    }
}

/// Parents handled per parallel task. Fixed so that results do not depend on
/// the worker count.
const CHUNK: usize = 256;
const WEIGHT_UNDERFLOW: f64 = 1e-300;

/// Children of one or more parents, stored flat.
#[derive(Debug, Clone, Default)]
pub struct ChildBuf {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ChildBuf {
    fn clear(&mut self) {
        self.points.clear();
        self.weights.clear();
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Per-worker buffers.
#[derive(Debug, Clone)]
pub struct StepScratch {
    flow: FlowScratch,
    levels: Vec<Vec<f64>>,
    plus: Vec<f64>,
    minus: Vec<f64>,
    eval: Vec<f64>,
    drift: Vec<f64>,
}

impl StepScratch {
    fn new(dim: usize, d: usize) -> Self {
        Self {
            flow: FlowScratch::new(dim),
            levels: vec![Vec::new(); d + 2],
            plus: Vec::new(),
            minus: Vec::new(),
            eval: vec![0.0; dim],
            drift: vec![0.0; dim],
        }
    }
}

/// A forward operator bound to a model.
#[derive(Debug, Clone)]
pub struct Stepper {
    model: Model,
    kind: SchemeKind,
    ode: OdeSteps,
    ito_drift: Option<VectorField>,
    check_positivity: bool,
}

const ETA5: [f64; 3] = [-1.732_050_807_568_877_2, 0.0, 1.732_050_807_568_877_2];
const PHI5: [f64; 3] = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];

impl Stepper {
    pub fn new(model: &Model, kind: SchemeKind) -> Result<Self> {
        let ito_drift = match kind {
            SchemeKind::EulerMaruyama => Some(ito_drift_from_stratonovich(model)?),
            _ => None,
        };
        Ok(Self {
            model: model.clone(),
            kind,
            ode: OdeSteps::default(),
            ito_drift,
            check_positivity: true,
        })
    }

    pub fn with_ode_steps(mut self, ode: OdeSteps) -> Self {
        self.ode = ode;
        self
    }

    /// Turn off the per-node check of the model's positive coordinates.
    pub fn without_positivity_check(mut self) -> Self {
        self.check_positivity = false;
        self
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn branching(&self) -> usize {
        self.kind.branching(self.model.driving_dim())
    }

    pub fn scratch(&self) -> StepScratch {
        StepScratch::new(self.model.dim(), self.model.driving_dim())
    }

    /// Appends the children of `(p, w)` to `out`, merging bitwise-equal
    /// sibling points.
    pub fn children(
        &self,
        p: &[f64],
        w: f64,
        s: f64,
        scratch: &mut StepScratch,
        out: &mut ChildBuf,
    ) -> Result<()> {
        let start = out.len();
        match self.kind {
            SchemeKind::NinomiyaVictoir => self.nv_children(p, w, s, scratch, out)?,
            SchemeKind::Cub3 => self.cub3_children(p, w, s, scratch, out)?,
            SchemeKind::EulerMaruyama => self.em_children(p, w, s, scratch, out)?,
        }
        merge_siblings(self.model.dim(), out, start);
        if let Some(&wc) = out.weights[start..].iter().find(|wc| **wc < WEIGHT_UNDERFLOW) {
            return Err(Error::Scheme {
                node: 0,
                reason: format!("child weight {wc:e} underflows"),
            });
        }
        if self.check_positivity {
            let dim = self.model.dim();
            for c in out.points[start * dim..].chunks_exact(dim) {
                for &k in self.model.positive_coords() {
                    if !(c[k] > 0.0) {
                        return Err(Error::Positivity {
                            coord: k,
                            value: c[k],
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn nv_children(
        &self,
        p: &[f64],
        w: f64,
        s: f64,
        scratch: &mut StepScratch,
        out: &mut ChildBuf,
    ) -> Result<()> {
        let d = self.model.driving_dim();
        let dim = self.model.dim();
        let count = 3usize.pow(d as u32);
        let rs = s.sqrt();

        // y⁻: exp(sV0) first, then V1, …, Vd. Index digits: η_1 most significant.
        let order_minus: Vec<usize> = (0..=d).collect();
        // y⁺: Vd first, then …, V1, and exp(sV0) last.
        let order_plus: Vec<usize> = (1..=d).rev().chain(std::iter::once(0)).collect();

        scratch.minus.resize(count * dim, 0.0);
        scratch.plus.resize(count * dim, 0.0);
        let mut minus = std::mem::take(&mut scratch.minus);
        let mut plus = std::mem::take(&mut scratch.plus);
        self.expand_sequence(p, s, rs, &order_minus, scratch, &mut minus)?;
        self.expand_sequence(p, s, rs, &order_plus, scratch, &mut plus)?;

        for idx in 0..count {
            let mut phi = 1.0;
            let mut rem = idx;
            for _ in 0..d {
                phi *= PHI5[rem % 3];
                rem /= 3;
            }
            let wc = w * phi / 2.0;
            out.points.extend_from_slice(&plus[idx * dim..(idx + 1) * dim]);
            out.weights.push(wc);
            out.points.extend_from_slice(&minus[idx * dim..(idx + 1) * dim]);
            out.weights.push(wc);
        }
        scratch.minus = minus;
        scratch.plus = plus;
        Ok(())
    }

    /// Applies the flows in `order` (field indices, first applied first) to
    /// `p` for every η ∈ {−√3, 0, √3}^d, sharing common prefixes. Result for
    /// η is written at index `Σ_i digit(η_i) 3^{i−1}`.
    fn expand_sequence(
        &self,
        p: &[f64],
        s: f64,
        rs: f64,
        order: &[usize],
        scratch: &mut StepScratch,
        result: &mut [f64],
    ) -> Result<()> {
        let dim = self.model.dim();
        // levels[l] holds states after l flows, as (index-so-far, state)
        let mut frontier: Vec<(usize, Vec<f64>)> = vec![(0, p.to_vec())];
        for &field_idx in order {
            let field = self.model.field(field_idx);
            let exact = self.model.exact_flow(field_idx);
            let mut next = Vec::with_capacity(frontier.len() * 3);
            for (idx, state) in frontier {
                if field_idx == 0 {
                    let mut st = state;
                    flow_in_place(field, s, &mut st, exact, self.ode, &mut scratch.flow)?;
                    next.push((idx, st));
                } else {
                    let place = 3usize.pow(field_idx as u32 - 1);
                    for (digit, eta) in ETA5.iter().enumerate() {
                        let mut st = state.clone();
                        flow_in_place(field, rs * eta, &mut st, exact, self.ode, &mut scratch.flow)?;
                        next.push((idx + digit * place, st));
                    }
                }
            }
            frontier = next;
        }
        for (idx, state) in frontier {
            result[idx * dim..(idx + 1) * dim].copy_from_slice(&state);
        }
        Ok(())
    }

    fn cub3_children(
        &self,
        p: &[f64],
        w: f64,
        s: f64,
        scratch: &mut StepScratch,
        out: &mut ChildBuf,
    ) -> Result<()> {
        let d = self.model.driving_dim();
        let rs = s.sqrt();
        let wc = w / (1usize << d) as f64;
        let mut coeffs = vec![0.0; d + 1];
        coeffs[0] = s;
        let buf = &mut scratch.levels[0];
        for mask in 0..(1usize << d) {
            for i in 0..d {
                coeffs[i + 1] = if mask >> (d - 1 - i) & 1 == 1 { rs } else { -rs };
            }
            buf.clear();
            buf.extend_from_slice(p);
            combined_flow_in_place(self.model.fields(), &coeffs, buf, self.ode, &mut scratch.flow)?;
            out.points.extend_from_slice(buf);
            out.weights.push(wc);
        }
        Ok(())
    }

    fn em_children(
        &self,
        p: &[f64],
        w: f64,
        s: f64,
        scratch: &mut StepScratch,
        out: &mut ChildBuf,
    ) -> Result<()> {
        let d = self.model.driving_dim();
        let dim = self.model.dim();
        let rs = s.sqrt();
        let wc = w / (1usize << d) as f64;
        let drift = self.ito_drift.as_ref().expect("EM stepper has an Itô drift");
        drift.eval_into(p, &mut scratch.drift)?;
        let diffusion = &mut scratch.levels[0];
        diffusion.resize(d * dim, 0.0);
        for i in 0..d {
            self.model
                .field(i + 1)
                .eval_into(p, &mut scratch.eval)?;
            diffusion[i * dim..(i + 1) * dim].copy_from_slice(&scratch.eval);
        }
        for mask in 0..(1usize << d) {
            let base = out.points.len();
            for k in 0..dim {
                out.points.push(p[k] + s * scratch.drift[k]);
            }
            for i in 0..d {
                let sign = if mask >> (d - 1 - i) & 1 == 1 { rs } else { -rs };
                for k in 0..dim {
                    out.points[base + k] += sign * diffusion[i * dim + k];
                }
            }
            if out.points[base..].iter().any(|v| !v.is_finite()) {
                return Err(Error::FlowDivergence {
                    label: "euler-maruyama".into(),
                });
            }
            out.weights.push(wc);
        }
        Ok(())
    }

    /// Forward measure after one step of length `s`. Output node order is
    /// parent order, children in scheme order.
    pub fn step(&self, measure: &DiscreteMeasure, s: f64) -> Result<DiscreteMeasure> {
        check_step(s)?;
        let dim = self.model.dim();
        if measure.dim() != dim {
            return Err(Error::InvalidModel("measure and model dimensions differ".into()));
        }
        let parents: Vec<usize> = (0..measure.len()).collect();
        let parts: Vec<Result<ChildBuf>> = parents
            .par_chunks(CHUNK)
            .map_init(
                || self.scratch(),
                |scratch, chunk| {
                    let mut buf = ChildBuf::default();
                    for &j in chunk {
                        self.children(measure.point(j), measure.weight(j), s, scratch, &mut buf)
                            .map_err(|e| with_node(e, j))?;
                    }
                    Ok(buf)
                },
            )
            .collect();
        let mut points = Vec::with_capacity(measure.len() * self.branching() * dim);
        let mut weights = Vec::with_capacity(measure.len() * self.branching());
        for part in parts {
            let part = part?;
            points.extend_from_slice(&part.points);
            weights.extend_from_slice(&part.weights);
        }
        Ok(DiscreteMeasure::from_parts_unchecked(dim, points, weights))
    }

    /// Expectations of `payoffs` after one further step, without materialising
    /// the children. Returns the values and the child count.
    pub fn expect_step(
        &self,
        measure: &DiscreteMeasure,
        s: f64,
        payoffs: &[&(dyn Fn(&[f64]) -> f64 + Sync)],
    ) -> Result<(Vec<f64>, usize)> {
        self.expect_tree(measure, &[s], payoffs)
    }

    /// Expectations of `payoffs` under the full (un-recombined) tree grown
    /// from `measure` over the step sizes `steps`, depth first from each node.
    pub fn expect_tree(
        &self,
        measure: &DiscreteMeasure,
        steps: &[f64],
        payoffs: &[&(dyn Fn(&[f64]) -> f64 + Sync)],
    ) -> Result<(Vec<f64>, usize)> {
        for &s in steps {
            check_step(s)?;
        }
        let parents: Vec<usize> = (0..measure.len()).collect();
        let np = payoffs.len();
        let parts: Vec<Result<(Vec<f64>, usize)>> = parents
            .par_chunks(CHUNK)
            .map_init(
                || (self.scratch(), vec![ChildBuf::default(); steps.len()]),
                |(scratch, bufs), chunk| {
                    let mut acc = vec![Accumulator::default(); np];
                    let mut count = 0usize;
                    for &j in chunk {
                        self.dfs(
                            measure.point(j),
                            measure.weight(j),
                            steps,
                            0,
                            scratch,
                            bufs,
                            payoffs,
                            &mut acc,
                            &mut count,
                        )
                        .map_err(|e| with_node(e, j))?;
                    }
                    Ok((acc.iter().map(|a| a.value()).collect(), count))
                },
            )
            .collect();
        let mut total = vec![Accumulator::default(); np];
        let mut count = 0;
        for part in parts {
            let (vals, c) = part?;
            for (t, v) in total.iter_mut().zip(vals) {
                t.add(v);
            }
            count += c;
        }
        Ok((total.iter().map(|a| a.value()).collect(), count))
    }

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        &self,
        p: &[f64],
        w: f64,
        steps: &[f64],
        depth: usize,
        scratch: &mut StepScratch,
        bufs: &mut [ChildBuf],
        payoffs: &[&(dyn Fn(&[f64]) -> f64 + Sync)],
        acc: &mut [Accumulator],
        count: &mut usize,
    ) -> Result<()> {
        let dim = self.model.dim();
        let mut buf = std::mem::take(&mut bufs[depth]);
        buf.clear();
        self.children(p, w, steps[depth], scratch, &mut buf)?;
        if depth + 1 == steps.len() {
            for (c, wc) in buf.points.chunks_exact(dim).zip(&buf.weights) {
                for (a, f) in acc.iter_mut().zip(payoffs) {
                    a.add(wc * f(c));
                }
            }
            *count += buf.len();
        } else {
            for (c, wc) in buf.points.chunks_exact(dim).zip(&buf.weights) {
                self.dfs(c, *wc, steps, depth + 1, scratch, bufs, payoffs, acc, count)?;
            }
        }
        bufs[depth] = buf;
        Ok(())
    }
}

fn check_step(s: f64) -> Result<()> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidPartition(format!("step size {s} must be positive")));
    }
    Ok(())
}

fn with_node(e: Error, node: usize) -> Error {
    match e {
        Error::Scheme { reason, .. } => Error::Scheme { node, reason },
        other => other,
    }
}

/// Merge children from `start` on whose points are bitwise equal, keeping the
/// first occurrence.
fn merge_siblings(dim: usize, buf: &mut ChildBuf, start: usize) {
    let n = buf.len();
    let mut keep = start;
    for i in start..n {
        let pi = i * dim;
        let mut merged = false;
        for j in start..keep {
            let pj = j * dim;
            if (0..dim).all(|k| buf.points[pi + k].to_bits() == buf.points[pj + k].to_bits()) {
                buf.weights[j] += buf.weights[i];
                merged = true;
                break;
            }
        }
        if !merged {
            if keep != i {
                buf.points.copy_within(pi..pi + dim, keep * dim);
                buf.weights[keep] = buf.weights[i];
            }
            keep += 1;
        }
    }
    buf.points.truncate(keep * dim);
    buf.weights.truncate(keep);
}

pub fn nv_one_step(measure: &DiscreteMeasure, model: &Model, s: f64) -> Result<DiscreteMeasure> {
    Stepper::new(model, SchemeKind::NinomiyaVictoir)?.step(measure, s)
}

pub fn cub3_one_step(measure: &DiscreteMeasure, model: &Model, s: f64) -> Result<DiscreteMeasure> {
    Stepper::new(model, SchemeKind::Cub3)?.step(measure, s)
}

pub fn em_one_step(measure: &DiscreteMeasure, model: &Model, s: f64) -> Result<DiscreteMeasure> {
    Stepper::new(model, SchemeKind::EulerMaruyama)?.step(measure, s)
}

pub fn even_partition(maturity: f64, n: usize) -> Result<TimePartition> {
    TimePartition::even(maturity, n)
}

pub fn kusuoka_partition(maturity: f64, n: usize, gamma: f64) -> Result<TimePartition> {
    TimePartition::kusuoka(maturity, n, gamma)
}

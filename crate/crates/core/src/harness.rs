//! End-to-end pricing with recombination, the studies built on it, and their
//! CSV / SVG output.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{heston_model, heston_model_exact, HestonParams, Model, HESTON_ASIAN_REFERENCE};
use crate::measures::{format_f64, DiscreteMeasure, MonomialBasis, PatchDivision, PURGE_THRESHOLD};
use crate::patching::{divide, PatchKind, PatchRule, StepContext};
use crate::recombine::{reduce_with_report, ReduceOptions};
use crate::schemes::{SchemeKind, Stepper, TimePartition};
use crate::svg;

/// Whole trees larger than `(2·3²)^6` leaves need `allow_huge`.
pub const DEFAULT_WHOLE_TREE_CAP: usize = 6;

pub fn asian_payoff(y: &[f64], strike: f64, maturity: f64) -> f64 {
    (y[2] / maturity - strike).max(0.0)
}

/// Cone of height `height` and base radius `radius` centred at `(xc, yc)`,
/// zero outside the base.
pub fn cone_payoff(x: f64, y: f64, height: f64, radius: f64, xc: f64, yc: f64) -> f64 {
    let dist = ((x - xc).powi(2) + (y - yc).powi(2)).sqrt();
    (height - height / radius * dist).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payoff {
    AsianCall {
        strike: f64,
        maturity: f64,
    },
    /// Evaluated at `(y3 / scale.0, y2 / scale.1)`.
    Cone {
        height: f64,
        radius: f64,
        center: (f64, f64),
        scale: (f64, f64),
    },
}

impl Payoff {
    pub fn asian(strike: f64, maturity: f64) -> Self {
        Payoff::AsianCall { strike, maturity }
    }

    /// Cone with constant volume: height `10 / radius²`, coordinates scaled
    /// by the initial price and variance.
    pub fn cone(radius: f64, center: (f64, f64), initial: &[f64]) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidParams(format!("cone radius must be positive, got {radius}")));
        }
        if initial.len() < 2 || initial[0] == 0.0 || initial[1] == 0.0 {
            return Err(Error::InvalidParams("cone scaling needs nonzero initial price and variance".into()));
        }
        Ok(Payoff::Cone {
            height: 10.0 / (radius * radius),
            radius,
            center,
            scale: (initial[0], initial[1]),
        })
    }

    pub fn evaluate(&self, y: &[f64]) -> f64 {
        match *self {
            Payoff::AsianCall { strike, maturity } => asian_payoff(y, strike, maturity),
            Payoff::Cone {
                height,
                radius,
                center,
                scale,
            } => cone_payoff(y[2] / scale.0, y[1] / scale.1, height, radius, center.0, center.1),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Payoff::AsianCall { strike, .. } => format!("asian(K={strike})"),
            Payoff::Cone { radius, center, .. } => {
                format!("cone(r={radius};c=({},{}))", center.0, center.1)
            }
        }
    }
}

fn with_payoffs<R>(payoffs: &[Payoff], f: impl FnOnce(&[&(dyn Fn(&[f64]) -> f64 + Sync)]) -> R) -> R {
    let closures: Vec<_> = payoffs.iter().map(|p| move |y: &[f64]| p.evaluate(y)).collect();
    let refs: Vec<&(dyn Fn(&[f64]) -> f64 + Sync)> = closures
        .iter()
        .map(|c| c as &(dyn Fn(&[f64]) -> f64 + Sync))
        .collect();
    f(&refs)
}

/// Patch rule for the recombined pipeline, optionally with a per-step
/// patch count overriding `rule.target_patches`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecombinationPlan {
    pub rule: PatchRule,
    pub per_step_targets: Option<Vec<usize>>,
    pub reduce: ReduceOptions,
}

impl RecombinationPlan {
    pub fn new(rule: PatchRule) -> Self {
        Self {
            rule,
            per_step_targets: None,
            reduce: ReduceOptions::default(),
        }
    }

    pub fn with_targets(mut self, targets: Vec<usize>) -> Self {
        self.per_step_targets = Some(targets);
        self
    }

    fn rule_at(&self, step: usize) -> PatchRule {
        let mut rule = self.rule;
        if let Some(t) = self.per_step_targets.as_ref().and_then(|t| t.get(step)) {
            rule.target_patches = (*t).max(1);
        }
        rule
    }
}

/// Statistics of one evolution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub values: Vec<f64>,
    pub support_card_t: usize,
    /// Largest forward measure held at any step.
    pub max_support_card: usize,
    pub total_patches: usize,
    /// Patch count at each recombination step.
    pub patches_per_step: Vec<usize>,
    /// Support after recombination at each step.
    pub supports: Vec<usize>,
    /// Patches whose reduction drifted and were kept unreduced.
    pub failures: usize,
    pub wall: Duration,
}

/// Replace every patch of `division` by a reduced measure of equal mass.
/// Returns the reassembled measure and the number of failed reductions.
pub fn recombine_patches(
    measure: &DiscreteMeasure,
    division: &PatchDivision,
    basis: &MonomialBasis,
    opts: &ReduceOptions,
) -> Result<(DiscreteMeasure, usize)> {
    let parts: Vec<Result<(DiscreteMeasure, bool)>> = division
        .patches
        .par_iter()
        .enumerate()
        .map(|(id, patch)| {
            let sub = measure.subset(&patch.indices);
            if patch.len() <= 1 {
                return Ok((sub, false));
            }
            let report = reduce_with_report(&sub, basis, opts).map_err(|e| e.in_patch(id))?;
            Ok((report.measure, report.failed))
        })
        .collect();
    let mut failures = 0;
    let mut reduced = Vec::with_capacity(parts.len());
    for part in parts {
        let (m, failed) = part?;
        failures += failed as usize;
        reduced.push(m);
    }
    let mut out = DiscreteMeasure::concat(measure.dim(), reduced);
    out.purge(PURGE_THRESHOLD);
    Ok((out, failures))
}

/// Evolve to the last interior time, recombining after every step.
fn evolve_interior(
    stepper: &Stepper,
    partition: &TimePartition,
    plan: Option<&RecombinationPlan>,
    basis: &MonomialBasis,
    stats: &mut RunOutcome,
) -> Result<DiscreteMeasure> {
    let n = partition.steps();
    if n == 0 {
        return Err(Error::InvalidPartition("partition has no steps".into()));
    }
    if basis.dim() != stepper.model().dim() {
        return Err(Error::InvalidParams("basis and model dimensions differ".into()));
    }
    let times = partition.times();
    let maturity = partition.maturity();
    let mut measure = DiscreteMeasure::dirac(stepper.model().initial());
    for i in 0..n - 1 {
        let s = partition.step(i + 1);
        measure = stepper.step(&measure, s).map_err(|e| e.at_step(i + 1))?;
        stats.max_support_card = stats.max_support_card.max(measure.len());
        if let Some(plan) = plan {
            let ctx = StepContext::new(maturity, times[i + 1], s, basis.degree()).map_err(|e| e.at_step(i + 1))?;
            let division = divide(&measure, &ctx, &plan.rule_at(i)).map_err(|e| e.at_step(i + 1))?;
            let (next, failed) =
                recombine_patches(&measure, &division, basis, &plan.reduce).map_err(|e| e.at_step(i + 1))?;
            if failed > 0 {
                log::warn!("step {}: {failed} patch reductions kept unreduced", i + 1);
            }
            stats.failures += failed;
            stats.total_patches += division.len();
            stats.patches_per_step.push(division.len());
            measure = next;
        }
        stats.supports.push(measure.len());
    }
    Ok(measure)
}

/// Measure at maturity: forward steps with recombination at every interior
/// time, and a plain forward step at the end.
pub fn evolve_with_recombination(
    model: &Model,
    scheme: SchemeKind,
    partition: &TimePartition,
    plan: Option<&RecombinationPlan>,
    basis: &MonomialBasis,
) -> Result<DiscreteMeasure> {
    let stepper = Stepper::new(model, scheme)?;
    let mut stats = RunOutcome::default();
    let measure = evolve_interior(&stepper, partition, plan, basis, &mut stats)?;
    let n = partition.steps();
    stepper.step(&measure, partition.step(n)).map_err(|e| e.at_step(n))
}

/// Expectations under the recombined measure at maturity. The last step is
/// integrated without being stored.
pub fn run_recombined(
    stepper: &Stepper,
    partition: &TimePartition,
    plan: Option<&RecombinationPlan>,
    basis: &MonomialBasis,
    payoffs: &[Payoff],
) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut stats = RunOutcome::default();
    let measure = evolve_interior(stepper, partition, plan, basis, &mut stats)?;
    let n = partition.steps();
    let (values, card) = with_payoffs(payoffs, |f| stepper.expect_step(&measure, partition.step(n), f))
        .map_err(|e| e.at_step(n))?;
    stats.values = values;
    stats.support_card_t = card;
    stats.max_support_card = stats.max_support_card.max(card);
    stats.wall = start.elapsed();
    Ok(stats)
}

/// Expectations under the full tree, traversed depth first.
pub fn run_whole_tree(stepper: &Stepper, partition: &TimePartition, payoffs: &[Payoff]) -> Result<RunOutcome> {
    let start = Instant::now();
    let root = DiscreteMeasure::dirac(stepper.model().initial());
    let steps: Vec<f64> = (1..=partition.steps()).map(|i| partition.step(i)).collect();
    let (values, card) = with_payoffs(payoffs, |f| stepper.expect_tree(&root, &steps, f))?;
    Ok(RunOutcome {
        values,
        support_card_t: card,
        max_support_card: card,
        wall: start.elapsed(),
        ..RunOutcome::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionKind {
    Even,
    Kusuoka { gamma: f64 },
}

impl PartitionKind {
    pub fn build(&self, maturity: f64, n: usize) -> Result<TimePartition> {
        match *self {
            PartitionKind::Even => TimePartition::even(maturity, n),
            PartitionKind::Kusuoka { gamma } => TimePartition::kusuoka(maturity, n, gamma),
        }
    }
}

/// Settings shared by the CLI subcommands.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub heston: HestonParams,
    pub reference: Option<f64>,
    pub scheme: SchemeKind,
    pub partition: PartitionKind,
    pub rule: PatchRule,
    pub moment_degree: Option<u32>,
    pub n_list: Vec<usize>,
    /// λ values (recursive rules) compared in the recombination-error study.
    pub lambdas: Vec<f64>,
    pub recomb_n: usize,
    pub cone_n: Vec<usize>,
    pub cone_radii: Vec<f64>,
    pub cone_centers: Vec<(f64, f64)>,
    pub whole_tree_cap: usize,
    pub allow_huge: bool,
    /// Use closed-form flows for the diffusion fields.
    pub exact_flows: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            heston: HestonParams::default(),
            reference: Some(HESTON_ASIAN_REFERENCE),
            scheme: SchemeKind::NinomiyaVictoir,
            partition: PartitionKind::Even,
            rule: PatchRule::wll(1.0),
            moment_degree: None,
            n_list: vec![2, 3, 4, 5, 6],
            lambdas: vec![2.0, 1.0, 0.5],
            recomb_n: 6,
            cone_n: vec![6],
            cone_radii: vec![5.0, 4.0, 3.0, 2.0, 1.5, 1.2, 1.0, 0.9],
            cone_centers: vec![
                (0.0, 0.0),
                (1.0, 0.0),
                (0.0, 1.0),
                (1.0, 1.0),
                (2.0, 0.0),
                (0.0, 2.0),
                (2.0, 2.0),
                (3.0, 0.0),
                (0.0, 3.0),
                (3.0, 3.0),
            ],
            whole_tree_cap: DEFAULT_WHOLE_TREE_CAP,
            allow_huge: false,
            exact_flows: true,
        }
    }
}

fn cfg_err(key: &str, what: &str) -> Error {
    Error::Config(format!("key `{key}`: {what}"))
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(x) => Ok(*x),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(cfg_err(key, "expected a number")),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(cfg_err(key, "expected a nonnegative integer")),
    }
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| cfg_err(key, "expected a string"))
}

fn as_array<'a>(key: &str, v: &'a toml::Value) -> Result<&'a [toml::Value]> {
    v.as_array()
        .map(|a| a.as_slice())
        .ok_or_else(|| cfg_err(key, "expected an array"))
}

/// Parse a comma separated list such as `2,4,6`.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|_| Error::Config(format!("cannot parse `{t}` in list `{s}`"))))
        .collect()
}

impl HarnessConfig {
    /// Read `key = value` settings over the defaults. Unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut cfg = Self::default();
        let mut gamma = None;
        let mut partition = None;
        for (key, v) in &table {
            let k = key.as_str();
            match k {
                "mu" => cfg.heston.mu = as_f64(k, v)?,
                "alpha" => cfg.heston.alpha = as_f64(k, v)?,
                "theta" => cfg.heston.theta = as_f64(k, v)?,
                "beta" => cfg.heston.beta = as_f64(k, v)?,
                "rho" => cfg.heston.rho = as_f64(k, v)?,
                "x1" | "price0" => cfg.heston.x1_0 = as_f64(k, v)?,
                "x2" | "variance0" => cfg.heston.x2_0 = as_f64(k, v)?,
                "T" | "maturity" => cfg.heston.maturity = as_f64(k, v)?,
                "K" | "strike" => cfg.heston.strike = as_f64(k, v)?,
                "reference" => cfg.reference = Some(as_f64(k, v)?),
                "scheme" => cfg.scheme = as_str(k, v)?.parse()?,
                "partition" => partition = Some(as_str(k, v)?.to_string()),
                "gamma" => gamma = Some(as_f64(k, v)?),
                "patch" => cfg.rule.kind = as_str(k, v)?.parse()?,
                "lambda" => cfg.rule.lambda = as_f64(k, v)?,
                "patches" => cfg.rule.target_patches = as_usize(k, v)?,
                "seed" => cfg.rule.seed = as_usize(k, v)? as u64,
                "ufg_ell" | "ell" => cfg.rule.ell = as_usize(k, v)? as u32,
                "moment_degree" => cfg.moment_degree = Some(as_usize(k, v)? as u32),
                "n" => cfg.n_list = as_array(k, v)?.iter().map(|x| as_usize(k, x)).collect::<Result<_>>()?,
                "lambdas" => cfg.lambdas = as_array(k, v)?.iter().map(|x| as_f64(k, x)).collect::<Result<_>>()?,
                "recomb_n" => cfg.recomb_n = as_usize(k, v)?,
                "cone_n" => cfg.cone_n = as_array(k, v)?.iter().map(|x| as_usize(k, x)).collect::<Result<_>>()?,
                "cone_radii" => {
                    cfg.cone_radii = as_array(k, v)?.iter().map(|x| as_f64(k, x)).collect::<Result<_>>()?
                }
                "cone_centers" => {
                    cfg.cone_centers = as_array(k, v)?
                        .iter()
                        .map(|c| {
                            let pair = as_array(k, c)?;
                            if pair.len() != 2 {
                                return Err(cfg_err(k, "centers are [x, y] pairs"));
                            }
                            Ok((as_f64(k, &pair[0])?, as_f64(k, &pair[1])?))
                        })
                        .collect::<Result<_>>()?
                }
                "whole_tree_cap" => cfg.whole_tree_cap = as_usize(k, v)?,
                "allow_huge" => cfg.allow_huge = v.as_bool().ok_or_else(|| cfg_err(k, "expected a boolean"))?,
                "exact_flows" => cfg.exact_flows = v.as_bool().ok_or_else(|| cfg_err(k, "expected a boolean"))?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        if let Some(p) = partition {
            cfg.set_partition(&p, gamma)?;
        } else if let Some(g) = gamma {
            cfg.partition = PartitionKind::Kusuoka { gamma: g };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn set_partition(&mut self, name: &str, gamma: Option<f64>) -> Result<()> {
        self.partition = match name {
            "even" => PartitionKind::Even,
            "kusuoka" => PartitionKind::Kusuoka {
                gamma: gamma.unwrap_or(match self.partition {
                    PartitionKind::Kusuoka { gamma } => gamma,
                    PartitionKind::Even => 1.0,
                }),
            },
            other => return Err(Error::Config(format!("unknown partition `{other}`"))),
        };
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.heston.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.rule.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.n_list.contains(&0) || self.recomb_n == 0 || self.cone_n.contains(&0) {
            return Err(Error::Config("step counts must be at least 1".into()));
        }
        if self.lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("lambdas must be positive".into()));
        }
        if self.cone_radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("cone radii must be positive".into()));
        }
        if let PartitionKind::Kusuoka { gamma } = self.partition {
            if !(gamma > 0.0) {
                return Err(Error::Config("gamma must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        if self.exact_flows {
            heston_model_exact(&self.heston)
        } else {
            heston_model(&self.heston)
        }
    }

    pub fn stepper(&self, scheme: SchemeKind) -> Result<Stepper> {
        Stepper::new(&self.model()?, scheme)
    }

    pub fn basis(&self, scheme: SchemeKind) -> MonomialBasis {
        MonomialBasis::new(3, self.moment_degree.unwrap_or(scheme.moment_degree()))
    }

    pub fn partition(&self, n: usize) -> Result<TimePartition> {
        self.partition.build(self.heston.maturity, n)
    }

    pub fn asian(&self) -> Payoff {
        Payoff::asian(self.heston.strike, self.heston.maturity)
    }

    /// Whether the whole tree for `n` steps fits under the cap.
    pub fn tree_feasible(&self, stepper: &Stepper, n: usize) -> bool {
        let budget = (2.0 * 3f64.powi(2)).powi(self.whole_tree_cap as i32);
        self.allow_huge || (stepper.branching() as f64).powi(n as i32) <= budget * (1.0 + 1e-12)
    }

    fn require_tree(&self, stepper: &Stepper, n: usize) -> Result<()> {
        if self.tree_feasible(stepper, n) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "whole tree for n = {n} exceeds the cap (n = {} for the default scheme); pass --allow-huge",
                self.whole_tree_cap
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Tree,
    Recombined,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Tree => "tree",
            RunMode::Recombined => "recombined",
        })
    }
}

/// One cell of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub study: &'static str,
    pub n: usize,
    pub scheme: SchemeKind,
    pub mode: RunMode,
    pub rule: Option<PatchKind>,
    /// λ for the recursive rules, patch count (or budget source λ) otherwise.
    pub setting: Option<f64>,
    pub payoff: String,
    pub value: f64,
    pub reference: Option<f64>,
    pub abs_error: Option<f64>,
    pub support_card_t: usize,
    pub max_support_card: usize,
    pub total_patches: usize,
    pub failures: usize,
    pub wall_ms: f64,
}

/// Mean slope statistic with a 95% normal-approximation interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeSummary {
    pub n: usize,
    pub rule: PatchKind,
    pub grouping: &'static str,
    pub key: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub slopes: Vec<SlopeSummary>,
}

#[allow(clippy::too_many_arguments)]
fn make_row(
    study: &'static str,
    n: usize,
    scheme: SchemeKind,
    mode: RunMode,
    rule: Option<PatchKind>,
    setting: Option<f64>,
    payoff: &Payoff,
    value: f64,
    reference: Option<f64>,
    out: &RunOutcome,
) -> StudyRow {
    StudyRow {
        study,
        n,
        scheme,
        mode,
        rule,
        setting,
        payoff: payoff.label(),
        value,
        reference,
        abs_error: reference.map(|r| (value - r).abs()),
        support_card_t: out.support_card_t,
        max_support_card: out.max_support_card,
        total_patches: out.total_patches,
        failures: out.failures,
        wall_ms: out.wall.as_secs_f64() * 1e3,
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Mean and 95% interval half-width, `1.96 · sd / √count`.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, 1.96 * (var / k).sqrt())
}

/// Error against a reference and support at maturity for each scheme, with
/// and without recombination.
pub fn study_convergence(cfg: &HarnessConfig) -> Result<StudyResult> {
    let payoff = cfg.asian();
    let mut rows = Vec::new();
    for &n in &cfg.n_list {
        let partition = cfg.partition(n)?;
        for scheme in [SchemeKind::EulerMaruyama, SchemeKind::NinomiyaVictoir] {
            let stepper = cfg.stepper(scheme)?;
            if cfg.tree_feasible(&stepper, n) {
                let out = run_whole_tree(&stepper, &partition, &[payoff])?;
                log::info!("{} tree n={n}: {}", scheme.name(), out.values[0]);
                rows.push(make_row(
                    "convergence",
                    n,
                    scheme,
                    RunMode::Tree,
                    None,
                    None,
                    &payoff,
                    out.values[0],
                    cfg.reference,
                    &out,
                ));
            }
            let plan = RecombinationPlan::new(cfg.rule);
            let out = run_recombined(&stepper, &partition, Some(&plan), &cfg.basis(scheme), &[payoff])?;
            log::info!("{} recombined n={n}: {}", scheme.name(), out.values[0]);
            rows.push(make_row(
                "convergence",
                n,
                scheme,
                RunMode::Recombined,
                Some(cfg.rule.kind),
                Some(rule_setting(&cfg.rule)),
                &payoff,
                out.values[0],
                cfg.reference,
                &out,
            ));
        }
    }
    Ok(StudyResult {
        rows,
        slopes: Vec::new(),
    })
}

fn rule_setting(rule: &PatchRule) -> f64 {
    if rule.kind.is_recursive() {
        rule.lambda
    } else {
        rule.target_patches as f64
    }
}

/// One rule's run in a matched-budget comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedRun {
    pub rule: PatchRule,
    pub outcome: RunOutcome,
}

/// Run WLL at `lambda`, then LL with λ tuned so its support at maturity
/// matches, and the random and concentric rules with WLL's per-step patch
/// counts.
pub fn matched_runs(
    stepper: &Stepper,
    partition: &TimePartition,
    basis: &MonomialBasis,
    payoffs: &[Payoff],
    lambda: f64,
    seed: u64,
    ell: u32,
) -> Result<Vec<MatchedRun>> {
    let mut wll_rule = PatchRule::wll(lambda);
    wll_rule.ell = ell;
    let wll = run_recombined(stepper, partition, Some(&RecombinationPlan::new(wll_rule)), basis, payoffs)?;
    let target = wll.support_card_t;

    let mut ll_rule = PatchRule::ll(lambda);
    ll_rule.ell = ell;
    let ll = match_support(stepper, partition, basis, payoffs, ll_rule, target)?;

    let mut out = vec![
        MatchedRun {
            rule: wll_rule,
            outcome: wll.clone(),
        },
        ll,
    ];
    for rule in [PatchRule::random(1, seed), PatchRule::concentric(1)] {
        let plan = RecombinationPlan::new(rule).with_targets(wll.patches_per_step.clone());
        let outcome = run_recombined(stepper, partition, Some(&plan), basis, payoffs)?;
        out.push(MatchedRun { rule, outcome });
    }
    Ok(out)
}

/// Bisect λ (in log scale) for a recursive rule until its support at
/// maturity is as close to `target` as the search finds.
fn match_support(
    stepper: &Stepper,
    partition: &TimePartition,
    basis: &MonomialBasis,
    payoffs: &[Payoff],
    rule: PatchRule,
    target: usize,
) -> Result<MatchedRun> {
    let run = |lambda: f64| -> Result<MatchedRun> {
        let rule = PatchRule { lambda, ..rule };
        let outcome = run_recombined(stepper, partition, Some(&RecombinationPlan::new(rule)), basis, payoffs)?;
        Ok(MatchedRun { rule, outcome })
    };
    let gap = |r: &MatchedRun| (r.outcome.support_card_t as f64 - target as f64).abs();
    let (mut lo, mut hi) = ((rule.lambda * 1e-4).ln(), (rule.lambda * 1e4).ln());
    let mut best = run(rule.lambda)?;
    for _ in 0..40 {
        if gap(&best) == 0.0 || hi - lo < 1e-4 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let cand = run(mid.exp())?;
        // larger λ accepts larger patches and leaves fewer atoms
        if cand.outcome.support_card_t > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if gap(&cand) < gap(&best) {
            best = cand;
        }
    }
    Ok(best)
}

/// Recombination error against the whole tree for every rule at matched
/// budgets, one comparison per configured λ.
pub fn study_recombination_error(cfg: &HarnessConfig) -> Result<StudyResult> {
    let n = cfg.recomb_n;
    let scheme = cfg.scheme;
    let stepper = cfg.stepper(scheme)?;
    cfg.require_tree(&stepper, n)?;
    let partition = cfg.partition(n)?;
    let basis = cfg.basis(scheme);
    let payoff = cfg.asian();
    let tree = run_whole_tree(&stepper, &partition, &[payoff])?;
    let oracle = tree.values[0];
    let mut rows = vec![make_row(
        "recomb-error",
        n,
        scheme,
        RunMode::Tree,
        None,
        None,
        &payoff,
        oracle,
        cfg.reference,
        &tree,
    )];
    for &lambda in &cfg.lambdas {
        let runs = matched_runs(&stepper, &partition, &basis, &[payoff], lambda, cfg.rule.seed, cfg.rule.ell)?;
        for r in runs {
            let setting = if r.rule.kind.is_recursive() {
                r.rule.lambda
            } else {
                lambda
            };
            rows.push(make_row(
                "recomb-error",
                n,
                scheme,
                RunMode::Recombined,
                Some(r.rule.kind),
                Some(setting),
                &payoff,
                r.outcome.values[0],
                Some(oracle),
                &r.outcome,
            ));
        }
    }
    Ok(StudyResult {
        rows,
        slopes: Vec::new(),
    })
}

/// Cone payoffs for every radius and centre.
pub fn cone_family(cfg: &HarnessConfig) -> Result<Vec<Payoff>> {
    let initial = [cfg.heston.x1_0, cfg.heston.x2_0];
    let mut out = Vec::with_capacity(cfg.cone_radii.len() * cfg.cone_centers.len());
    for &r in &cfg.cone_radii {
        for &c in &cfg.cone_centers {
            out.push(Payoff::cone(r, c, &initial)?);
        }
    }
    Ok(out)
}

/// Recombination error divided by support at maturity, per cone and rule,
/// aggregated by radius and by centre.
pub fn study_cones(cfg: &HarnessConfig) -> Result<StudyResult> {
    let scheme = cfg.scheme;
    let stepper = cfg.stepper(scheme)?;
    let basis = cfg.basis(scheme);
    let cones = cone_family(cfg)?;
    let mut result = StudyResult::default();
    for &n in &cfg.cone_n {
        cfg.require_tree(&stepper, n)?;
        let partition = cfg.partition(n)?;
        let tree = run_whole_tree(&stepper, &partition, &cones)?;
        let runs = matched_runs(&stepper, &partition, &basis, &cones, cfg.rule.lambda, cfg.rule.seed, cfg.rule.ell)?;
        for run in &runs {
            let kind = run.rule.kind;
            let card = run.outcome.support_card_t.max(1) as f64;
            let mut slopes = Vec::with_capacity(cones.len());
            for (j, cone) in cones.iter().enumerate() {
                let row = make_row(
                    "cones",
                    n,
                    scheme,
                    RunMode::Recombined,
                    Some(kind),
                    Some(cfg.rule.lambda),
                    cone,
                    run.outcome.values[j],
                    Some(tree.values[j]),
                    &run.outcome,
                );
                slopes.push((cone, row.abs_error.unwrap_or(f64::NAN) / card));
                result.rows.push(row);
            }
            let mut push = |grouping: &'static str, key: String, vals: Vec<f64>| {
                let (mean, half) = mean_ci(&vals);
                result.slopes.push(SlopeSummary {
                    n,
                    rule: kind,
                    grouping,
                    key,
                    mean,
                    ci_low: mean - half,
                    ci_high: mean + half,
                    count: vals.len(),
                });
            };
            push("all", "all".into(), slopes.iter().map(|s| s.1).collect());
            for &r in &cfg.cone_radii {
                let vals = slopes
                    .iter()
                    .filter(|(c, _)| matches!(c, Payoff::Cone { radius, .. } if *radius == r))
                    .map(|s| s.1)
                    .collect();
                push("radius", format!("{r}"), vals);
            }
            for &ctr in &cfg.cone_centers {
                let vals = slopes
                    .iter()
                    .filter(|(c, _)| matches!(c, Payoff::Cone { center, .. } if *center == ctr))
                    .map(|s| s.1)
                    .collect();
                push("center", format!("({},{})", ctr.0, ctr.1), vals);
            }
        }
    }
    Ok(result)
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

pub const RESULTS_HEADER: [&str; 15] = [
    "study",
    "n",
    "scheme",
    "mode",
    "patch_rule",
    "lambda",
    "payoff",
    "value",
    "reference",
    "abs_error",
    "support_card_t",
    "max_support_card",
    "total_patches",
    "failures",
    "wall_ms",
];

/// Write `results.csv` (and `slopes.csv` when present) into `dir`, plus SVG
/// charts when `plot` is set.
pub fn emit(result: &StudyResult, dir: &Path, plot: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    w.write_record(RESULTS_HEADER)?;
    for r in &result.rows {
        w.write_record([
            r.study.to_string(),
            r.n.to_string(),
            r.scheme.name().to_string(),
            r.mode.to_string(),
            r.rule.map(|k| k.name().to_string()).unwrap_or_default(),
            opt_f64(r.setting),
            r.payoff.clone(),
            format_f64(r.value),
            opt_f64(r.reference),
            opt_f64(r.abs_error),
            r.support_card_t.to_string(),
            r.max_support_card.to_string(),
            r.total_patches.to_string(),
            r.failures.to_string(),
            format!("{:.3}", r.wall_ms),
        ])?;
    }
    w.flush()?;
    if !result.slopes.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("slopes.csv"))?;
        w.write_record(["n", "patch_rule", "grouping", "key", "mean_slope", "ci_low", "ci_high", "count"])?;
        for s in &result.slopes {
            w.write_record([
                s.n.to_string(),
                s.rule.name().to_string(),
                s.grouping.to_string(),
                s.key.clone(),
                format_f64(s.mean),
                format_f64(s.ci_low),
                format_f64(s.ci_high),
                s.count.to_string(),
            ])?;
        }
        w.flush()?;
    }
    if plot {
        write_plots(result, dir)?;
    }
    Ok(())
}

fn series_key(r: &StudyRow) -> String {
    match r.rule {
        Some(k) => format!("{} {} {}", r.scheme.name(), r.mode, k.name()),
        None => format!("{} {}", r.scheme.name(), r.mode),
    }
}

fn collect_series(rows: &[StudyRow], f: impl Fn(&StudyRow) -> Option<(f64, f64)>) -> Vec<svg::Series> {
    let mut out: Vec<svg::Series> = Vec::new();
    for r in rows {
        let Some(pt) = f(r) else { continue };
        let key = series_key(r);
        match out.iter_mut().find(|s| s.name == key) {
            Some(s) => s.points.push(pt),
            None => out.push(svg::Series {
                name: key,
                points: vec![pt],
            }),
        }
    }
    out
}

fn write_plots(result: &StudyResult, dir: &Path) -> Result<()> {
    let rows = &result.rows;
    let charts = [
        (
            "error_vs_n.svg",
            "Absolute error against step count",
            "n",
            "error",
            collect_series(rows, |r| r.abs_error.map(|e| (r.n as f64, e))),
        ),
        (
            "support_vs_n.svg",
            "Support at maturity against step count",
            "n",
            "support",
            collect_series(rows, |r| Some((r.n as f64, r.support_card_t as f64))),
        ),
        (
            "error_vs_support.svg",
            "Absolute error against support",
            "support",
            "error",
            collect_series(rows, |r| r.abs_error.map(|e| (r.support_card_t as f64, e))),
        ),
    ];
    for (file, title, xl, yl, series) in charts {
        std::fs::write(dir.join(file), svg::loglog_chart(title, xl, yl, &series))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::VectorField;

    #[test]
    fn payoff_examples() {
        assert!((asian_payoff(&[1.0, 0.09, 1.2], 1.05, 1.0) - 0.15).abs() < 1e-15);
        assert_eq!(asian_payoff(&[1.0, 0.09, 1.0], 1.05, 1.0), 0.0);
        assert_eq!(cone_payoff(1.0, 2.0, 4.0, 0.5, 1.0, 2.0), 4.0);
        assert_eq!(cone_payoff(1.5, 2.0, 4.0, 0.5, 1.0, 2.0), 0.0);
        assert_eq!(cone_payoff(9.0, 2.0, 4.0, 0.5, 1.0, 2.0), 0.0);
        let c = Payoff::cone(2.0, (1.0, 1.0), &[1.0, 0.09]).unwrap();
        match c {
            Payoff::Cone { height, .. } => assert_eq!(height, 2.5),
            _ => unreachable!(),
        }
        // (y3, y2) = (1, 0.09) maps to the centre (1, 1)
        assert!((c.evaluate(&[1.0, 0.09, 1.0]) - 2.5).abs() < 1e-15);
        assert!(Payoff::cone(0.0, (0.0, 0.0), &[1.0, 0.09]).is_err());
    }

    fn brownian() -> Model {
        Model::new(
            vec![
                VectorField::zero(1),
                VectorField::constant("b", vec![1.0]),
            ],
            vec![0.0],
        )
        .unwrap()
    }

    #[test]
    fn one_step_equals_plain_forward_step() {
        let cfg = HarnessConfig::default();
        let model = cfg.model().unwrap();
        let part = TimePartition::even(1.0, 1).unwrap();
        let basis = MonomialBasis::new(3, 5);
        let plan = RecombinationPlan::new(PatchRule::wll(1.0));
        let a = evolve_with_recombination(&model, SchemeKind::NinomiyaVictoir, &part, Some(&plan), &basis).unwrap();
        let b = Stepper::new(&model, SchemeKind::NinomiyaVictoir)
            .unwrap()
            .step(&DiscreteMeasure::dirac(model.initial()), 1.0)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recombined_brownian_keeps_low_moments() {
        let model = brownian();
        let part = TimePartition::even(1.0, 5).unwrap();
        let basis = MonomialBasis::new(1, 5);
        let plan = RecombinationPlan::new(PatchRule::wll(1.0));
        let m = evolve_with_recombination(&model, SchemeKind::NinomiyaVictoir, &part, Some(&plan), &basis).unwrap();
        let full = evolve_with_recombination(&model, SchemeKind::NinomiyaVictoir, &part, None, &basis).unwrap();
        assert!(m.len() < full.len());
        for k in 0..=5 {
            let a = m.integrate(|x| x[0].powi(k));
            let b = full.integrate(|x| x[0].powi(k));
            assert!((a - b).abs() < 1e-10, "moment {k}: {a} vs {b}");
        }
        assert!((full.integrate(|x| x[0] * x[0]) - 1.0).abs() < 1e-12);
        assert!((full.integrate(|x| x[0].powi(4)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_lambda_reproduces_the_tree() {
        let cfg = HarnessConfig::default();
        let stepper = cfg.stepper(SchemeKind::NinomiyaVictoir).unwrap();
        let part = cfg.partition(3).unwrap();
        let payoff = cfg.asian();
        let tree = run_whole_tree(&stepper, &part, &[payoff]).unwrap();
        let plan = RecombinationPlan::new(PatchRule::wll(1e-6));
        let rec = run_recombined(&stepper, &part, Some(&plan), &cfg.basis(SchemeKind::NinomiyaVictoir), &[payoff]).unwrap();
        assert!((tree.values[0] - rec.values[0]).abs() <= 1e-13 * tree.values[0]);
        assert_eq!(tree.support_card_t, 17usize.pow(3));
    }

    #[test]
    fn config_parsing() {
        let cfg = HarnessConfig::from_toml_str(
            "mu = 0.05\nT = 2\nK = 1.1\nreference = 0.07\nn = [2, 4]\npatch = \"ll\"\nlambda = 0.5\npartition = \"kusuoka\"\ngamma = 2.0\ncone_centers = [[0, 0], [1.5, 2]]\n",
        )
        .unwrap();
        assert_eq!(cfg.heston.maturity, 2.0);
        assert_eq!(cfg.heston.strike, 1.1);
        assert_eq!(cfg.reference, Some(0.07));
        assert_eq!(cfg.n_list, vec![2, 4]);
        assert_eq!(cfg.rule.kind, PatchKind::RecursiveLL);
        assert_eq!(cfg.partition, PartitionKind::Kusuoka { gamma: 2.0 });
        assert_eq!(cfg.cone_centers, vec![(0.0, 0.0), (1.5, 2.0)]);
        for bad in ["bogus = 1", "lambda = -1", "alpha = \"x\"", "n = [0]", "rho = 2", "mu = "] {
            let e = HarnessConfig::from_toml_str(bad).unwrap_err();
            assert!(e.is_config(), "{bad}: {e}");
        }
        assert_eq!(parse_list::<usize>("2, 4,6").unwrap(), vec![2, 4, 6]);
        assert!(parse_list::<usize>("2,x").is_err());
    }

    #[test]
    fn tree_cap() {
        let cfg = HarnessConfig::default();
        let nv = cfg.stepper(SchemeKind::NinomiyaVictoir).unwrap();
        assert!(cfg.tree_feasible(&nv, 6));
        assert!(!cfg.tree_feasible(&nv, 7));
        let huge = HarnessConfig {
            allow_huge: true,
            ..cfg.clone()
        };
        assert!(huge.tree_feasible(&nv, 8));
        let em = cfg.stepper(SchemeKind::EulerMaruyama).unwrap();
        assert!(cfg.tree_feasible(&em, 12));
    }

    #[test]
    fn slope_and_ci_helpers() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-2.0)).collect();
        assert!((loglog_slope(&xs, &ys) + 2.0).abs() < 1e-12);
        let (m, h) = mean_ci(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((h - 1.96 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_ci(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn emitted_csv_has_header_and_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let payoff = Payoff::asian(1.05, 1.0);
        let out = RunOutcome {
            values: vec![0.1],
            support_card_t: 17,
            ..RunOutcome::default()
        };
        let row = make_row(
            "convergence",
            1,
            SchemeKind::NinomiyaVictoir,
            RunMode::Tree,
            None,
            None,
            &payoff,
            0.1,
            Some(0.3),
            &out,
        );
        let result = StudyResult {
            rows: vec![row],
            slopes: Vec::new(),
        };
        emit(&result, dir.path(), true).unwrap();
        let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), RESULTS_HEADER.join(","));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields[7].parse::<f64>().unwrap(), 0.1);
        assert_eq!(fields[9].parse::<f64>().unwrap(), 0.19999999999999998);
        assert!(dir.path().join("error_vs_n.svg").exists());
    }

    #[test]
    fn no_plan_equals_whole_tree() {
        let cfg = HarnessConfig::default();
        let stepper = cfg.stepper(SchemeKind::NinomiyaVictoir).unwrap();
        let basis = cfg.basis(SchemeKind::NinomiyaVictoir);
        let part = cfg.partition(3).unwrap();
        let payoff = [cfg.asian()];
        let tree = run_whole_tree(&stepper, &part, &payoff).unwrap();
        let flat = run_recombined(&stepper, &part, None, &basis, &payoff).unwrap();
        assert!((tree.values[0] - flat.values[0]).abs() < 1e-13);
        assert_eq!(tree.support_card_t, flat.support_card_t);
    }

    #[test]
    fn recombined_heston_measure_is_a_probability() {
        let cfg = HarnessConfig::default();
        let model = cfg.model().unwrap();
        let basis = cfg.basis(SchemeKind::NinomiyaVictoir);
        let part = cfg.partition(5).unwrap();
        let plan = RecombinationPlan::new(PatchRule::wll(1.0));
        let mu = evolve_with_recombination(&model, SchemeKind::NinomiyaVictoir, &part, Some(&plan), &basis).unwrap();
        assert!((mu.total() - 1.0).abs() < 1e-12);
        assert!(mu.weights().iter().all(|w| *w >= 0.0));
        assert!(mu.iter().all(|(p, _)| p[1] >= 0.0));
    }

    #[test]
    fn random_plan_is_reproducible() {
        let cfg = HarnessConfig::default();
        let stepper = cfg.stepper(SchemeKind::NinomiyaVictoir).unwrap();
        let basis = cfg.basis(SchemeKind::NinomiyaVictoir);
        let part = cfg.partition(4).unwrap();
        let plan = RecombinationPlan::new(PatchRule::random(12, 7));
        let a = run_recombined(&stepper, &part, Some(&plan), &basis, &[cfg.asian()]).unwrap();
        let b = run_recombined(&stepper, &part, Some(&plan), &basis, &[cfg.asian()]).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.patches_per_step, b.patches_per_step);
    }
}

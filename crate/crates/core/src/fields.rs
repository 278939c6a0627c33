//! Tangent vector fields, their ODE flows, the Itô correction of a
//! Stratonovich drift, and the Heston model in Stratonovich form.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// `eval(x, out)` writes V(x) into `out`.
pub type FieldFn = dyn Fn(&[f64], &mut [f64]) -> Result<()> + Send + Sync;
/// Row-major N×N Jacobian, `jac[k * N + j] = ∂V^k/∂x_j`.
pub type JacobianFn = dyn Fn(&[f64], &mut [f64]) -> Result<()> + Send + Sync;
/// `flow(t, x, out)` writes exp(tV)(x) into `out`.
pub type FlowFn = dyn Fn(f64, &[f64], &mut [f64]) -> Result<()> + Send + Sync;

/// A smooth vector field on R^N.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    label: String,
    eval: Arc<FieldFn>,
    jacobian: Option<Arc<JacobianFn>>,
    is_zero: bool,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl VectorField {
    pub fn new<F>(dim: usize, label: impl Into<String>, eval: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) -> Result<()> + Send + Sync + 'static,
    {
        assert!(dim > 0, "vector field dimension must be positive");
        Self {
            dim,
            label: label.into(),
            eval: Arc::new(eval),
            jacobian: None,
            is_zero: false,
        }
    }

    /// The identically zero field. Its flow is the identity.
    pub fn zero(dim: usize) -> Self {
        let mut v = Self::new(dim, "zero", |_, out| {
            out.fill(0.0);
            Ok(())
        });
        v.is_zero = true;
        v
    }

    /// A constant (translation) field.
    pub fn constant(label: impl Into<String>, c: Vec<f64>) -> Self {
        let dim = c.len();
        Self::new(dim, label, move |_, out| {
            out.copy_from_slice(&c);
            Ok(())
        })
    }

    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&[f64], &mut [f64]) -> Result<()> + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_zero(&self) -> bool {
        self.is_zero
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        (self.eval)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::InvalidModel(format!(
                "field `{}` has dim {} but point has length {}",
                self.label,
                self.dim,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// Jacobian at `x`, row-major. Analytic when supplied, otherwise central
    /// differences with step `1e-6 * max(1, |x_j|)` per coordinate.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim;
        let mut jac = vec![0.0; n * n];
        if let Some(j) = &self.jacobian {
            j(x, &mut jac)?;
            return Ok(jac);
        }
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let h = FD_STEP * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            self.eval_into(&xp, &mut fp)?;
            xp[j] = x[j] - h;
            self.eval_into(&xp, &mut fm)?;
            xp[j] = x[j];
            let inv = 1.0 / (2.0 * h);
            for k in 0..n {
                jac[k * n + j] = (fp[k] - fm[k]) * inv;
            }
        }
        Ok(jac)
    }
}

/// Relative central-difference step for Jacobians.
pub const FD_STEP: f64 = 1e-6;

/// How many RK4 substeps an ODE flow uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OdeSteps {
    /// A fixed number of substeps per flow, whatever its length.
    Fixed(usize),
    /// `ceil(|t| / h)` substeps for a flow of length `t`.
    MaxStep(f64),
}

impl Default for OdeSteps {
    fn default() -> Self {
        OdeSteps::Fixed(8)
    }
}

impl OdeSteps {
    pub fn count(&self, t: f64) -> usize {
        match *self {
            OdeSteps::Fixed(k) => k.max(1),
            OdeSteps::MaxStep(h) => ((t.abs() / h).ceil() as usize).max(1),
        }
    }
}

/// Reusable RK4 stage buffers.
#[derive(Debug, Clone)]
pub struct FlowScratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
    acc: Vec<f64>,
}

impl FlowScratch {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            stage: vec![0.0; dim],
            acc: vec![0.0; dim],
        }
    }
}

/// Classical RK4 on `z' = rhs(z)` over `[0, t]` with `steps` substeps,
/// updating `state` in place.
fn integrate_rk4<F>(
    mut rhs: F,
    t: f64,
    steps: usize,
    state: &mut [f64],
    scratch: &mut FlowScratch,
    label: &str,
) -> Result<()>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let h = t / steps as f64;
    let n = state.len();
    let FlowScratch {
        k1,
        k2,
        k3,
        k4,
        stage,
        ..
    } = scratch;
    for _ in 0..steps {
        rhs(state, k1)?;
        for i in 0..n {
            stage[i] = state[i] + 0.5 * h * k1[i];
        }
        rhs(stage, k2)?;
        for i in 0..n {
            stage[i] = state[i] + 0.5 * h * k2[i];
        }
        rhs(stage, k3)?;
        for i in 0..n {
            stage[i] = state[i] + h * k3[i];
        }
        rhs(stage, k4)?;
        for i in 0..n {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::FlowDivergence {
                label: label.to_string(),
            });
        }
    }
    Ok(())
}

/// In-place exp(tV)(x). Uses `exact` when given, RK4 otherwise.
pub fn flow_in_place(
    field: &VectorField,
    t: f64,
    state: &mut [f64],
    exact: Option<&FlowFn>,
    steps: OdeSteps,
    scratch: &mut FlowScratch,
) -> Result<()> {
    if t == 0.0 || field.is_zero() {
        return Ok(());
    }
    if let Some(flow) = exact {
        let acc = &mut scratch.acc;
        flow(t, state, acc)?;
        if acc.iter().any(|v| !v.is_finite()) {
            return Err(Error::FlowDivergence {
                label: field.label.clone(),
            });
        }
        state.copy_from_slice(acc);
        return Ok(());
    }
    integrate_rk4(
        |z, out| field.eval_into(z, out),
        t,
        steps.count(t),
        state,
        scratch,
        &field.label,
    )
}

/// exp(sV)(x) as a fresh vector.
pub fn flow(
    field: &VectorField,
    s: f64,
    x: &[f64],
    exact: Option<&FlowFn>,
    steps: OdeSteps,
) -> Result<Vec<f64>> {
    if !s.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::FlowDivergence {
            label: field.label.clone(),
        });
    }
    if x.len() != field.dim() {
        return Err(Error::InvalidModel(format!(
            "flow of `{}`: point length {} != dim {}",
            field.label,
            x.len(),
            field.dim()
        )));
    }
    let mut state = x.to_vec();
    let mut scratch = FlowScratch::new(field.dim());
    flow_in_place(field, s, &mut state, exact, steps, &mut scratch)?;
    Ok(state)
}

/// In-place flow over unit time of the combined field `Σ coeffs[i] · fields[i]`.
pub fn combined_flow_in_place(
    fields: &[VectorField],
    coeffs: &[f64],
    state: &mut [f64],
    steps: OdeSteps,
    scratch: &mut FlowScratch,
) -> Result<()> {
    debug_assert_eq!(fields.len(), coeffs.len());
    let active: Vec<(f64, &VectorField)> = coeffs
        .iter()
        .zip(fields)
        .filter(|(c, f)| **c != 0.0 && !f.is_zero())
        .map(|(c, f)| (*c, f))
        .collect();
    if active.is_empty() {
        return Ok(());
    }
    let n = state.len();
    let mut part = vec![0.0; n];
    let label = active
        .iter()
        .map(|(_, f)| f.label())
        .collect::<Vec<_>>()
        .join("+");
    // the magnitude of the combined field sets the step count
    let scale: f64 = active.iter().map(|(c, _)| c.abs()).fold(0.0, f64::max);
    integrate_rk4(
        |z, out| {
            out.fill(0.0);
            for (c, f) in &active {
                f.eval_into(z, &mut part)?;
                for k in 0..n {
                    out[k] += c * part[k];
                }
            }
            Ok(())
        },
        1.0,
        steps.count(scale),
        state,
        scratch,
        &label,
    )
}

/// A Stratonovich SDE `dX = Σ_i V_i(X) ∘ dB^i` with `dB^0 = dt`.
#[derive(Clone)]
pub struct Model {
    dim: usize,
    fields: Vec<VectorField>,
    exact_flows: Vec<Option<Arc<FlowFn>>>,
    params: BTreeMap<String, f64>,
    initial: Vec<f64>,
    positive_coords: Vec<usize>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("dim", &self.dim)
            .field("fields", &self.fields)
            .field("params", &self.params)
            .field("initial", &self.initial)
            .finish()
    }
}

impl Model {
    /// `fields[0]` is the Stratonovich drift; `fields[1..]` the diffusion fields.
    pub fn new(fields: Vec<VectorField>, initial: Vec<f64>) -> Result<Self> {
        if fields.len() < 2 {
            return Err(Error::InvalidModel(
                "a model needs a drift and at least one diffusion field".into(),
            ));
        }
        let dim = fields[0].dim();
        if let Some(f) = fields.iter().find(|f| f.dim() != dim) {
            return Err(Error::InvalidModel(format!(
                "field `{}` has dim {} but the drift has dim {dim}",
                f.label(),
                f.dim()
            )));
        }
        if initial.len() != dim {
            return Err(Error::InvalidModel(format!(
                "initial point has length {} but model dim is {dim}",
                initial.len()
            )));
        }
        let exact_flows = vec![None; fields.len()];
        Ok(Self {
            dim,
            fields,
            exact_flows,
            params: BTreeMap::new(),
            initial,
            positive_coords: Vec::new(),
        })
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn with_exact_flow<F>(mut self, index: usize, flow: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) -> Result<()> + Send + Sync + 'static,
    {
        self.exact_flows[index] = Some(Arc::new(flow));
        self
    }

    /// Coordinates that must stay strictly positive on every node.
    pub fn with_positive_coords(mut self, coords: Vec<usize>) -> Self {
        self.positive_coords = coords;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of driving Brownian motions `d`.
    pub fn driving_dim(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    pub fn field(&self, i: usize) -> &VectorField {
        &self.fields[i]
    }

    pub fn exact_flow(&self, i: usize) -> Option<&FlowFn> {
        self.exact_flows[i].as_deref()
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn positive_coords(&self) -> &[usize] {
        &self.positive_coords
    }
}

/// Itô drift `Ṽ_0 = V_0 + ½ Σ_{i≥1} (DV_i) V_i` of a Stratonovich model.
pub fn ito_drift_from_stratonovich(model: &Model) -> Result<VectorField> {
    let dim = model.dim();
    if model.fields().iter().any(|f| f.dim() != dim) {
        return Err(Error::InvalidModel("field dimension mismatch".into()));
    }
    let fields = model.fields().to_vec();
    let label = format!("ito({})", fields[0].label());
    Ok(VectorField::new(dim, label, move |x, out| {
        fields[0].eval_into(x, out)?;
        let mut v = vec![0.0; dim];
        for f in fields.iter().skip(1).filter(|f| !f.is_zero()) {
            f.eval_into(x, &mut v)?;
            let jac = f.jacobian(x)?;
            for k in 0..dim {
                let row = &jac[k * dim..(k + 1) * dim];
                let dv: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                out[k] += 0.5 * dv;
            }
        }
        Ok(())
    }))
}

/// Heston stochastic-volatility model parameters with the Asian option setup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HestonParams {
    pub mu: f64,
    pub alpha: f64,
    pub theta: f64,
    pub beta: f64,
    pub rho: f64,
    pub x1_0: f64,
    pub x2_0: f64,
    pub maturity: f64,
    pub strike: f64,
}

impl Default for HestonParams {
    fn default() -> Self {
        Self {
            mu: 0.05,
            alpha: 2.0,
            theta: 0.09,
            beta: 0.1,
            rho: 0.3,
            x1_0: 1.0,
            x2_0: 0.09,
            maturity: 1.0,
            strike: 1.05,
        }
    }
}

/// Reference price of the Asian call for [`HestonParams::default`].
pub const HESTON_ASIAN_REFERENCE: f64 = 0.06068740243939;

impl HestonParams {
    /// `2αθ − β² > 0`.
    pub fn feller(&self) -> bool {
        2.0 * self.alpha * self.theta - self.beta * self.beta > 0.0
    }

    /// `4αθ − β² > 0`, positivity of the discretised variance.
    pub fn nv_positive(&self) -> bool {
        4.0 * self.alpha * self.theta - self.beta * self.beta > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.mu,
            self.alpha,
            self.theta,
            self.beta,
            self.rho,
            self.x1_0,
            self.x2_0,
            self.maturity,
            self.strike,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParams("non-finite Heston parameter".into()));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidParams(format!("rho = {} outside [-1, 1]", self.rho)));
        }
        if self.x1_0 <= 0.0 || self.x2_0 <= 0.0 {
            return Err(Error::InvalidParams(
                "initial price and variance must be positive".into(),
            ));
        }
        if self.maturity <= 0.0 || self.strike <= 0.0 {
            return Err(Error::InvalidParams("T and K must be positive".into()));
        }
        Ok(())
    }
}

const VARIANCE_ROUNDOFF: f64 = 1e-12;

#[inline]
fn sqrt_variance(y2: f64, label: &str) -> Result<f64> {
    if y2 <= -VARIANCE_ROUNDOFF || y2.is_nan() {
        return Err(Error::Domain {
            label: label.to_string(),
            coord: 1,
            value: y2,
        });
    }
    Ok(y2.max(0.0).sqrt())
}

/// Heston model (price, variance, running integral of price) in Stratonovich
/// form, driven by two Brownian motions.
pub fn heston_model(p: &HestonParams) -> Result<Model> {
    p.validate()?;
    if !p.feller() {
        log::warn!(
            "Feller condition violated: 2·alpha·theta − beta² = {}",
            2.0 * p.alpha * p.theta - p.beta * p.beta
        );
    }
    let HestonParams {
        mu,
        alpha,
        theta,
        beta,
        rho,
        ..
    } = *p;

    let w0 = VectorField::new(3, "W0", move |y, out| {
        let y2 = y[1].max(0.0);
        if y[1] <= -VARIANCE_ROUNDOFF {
            return Err(Error::Domain {
                label: "W0".into(),
                coord: 1,
                value: y[1],
            });
        }
        out[0] = y[0] * (mu - y2 / 2.0) - beta * rho * y[0] / 4.0;
        out[1] = alpha * (theta - y2) - beta * beta / 4.0;
        out[2] = y[0];
        Ok(())
    });
    let w1 = VectorField::new(3, "W1", move |y, out| {
        let sv = sqrt_variance(y[1], "W1")?;
        out[0] = y[0] * sv;
        out[1] = beta * rho * sv;
        out[2] = 0.0;
        Ok(())
    });
    let w2 = VectorField::new(3, "W2", move |y, out| {
        let sv = sqrt_variance(y[1], "W2")?;
        out[0] = 0.0;
        out[1] = beta * (1.0 - rho * rho).sqrt() * sv;
        out[2] = 0.0;
        Ok(())
    });

    let model = Model::new(vec![w0, w1, w2], vec![p.x1_0, p.x2_0, 0.0])?
        .with_param("mu", mu)
        .with_param("alpha", alpha)
        .with_param("theta", theta)
        .with_param("beta", beta)
        .with_param("rho", rho)
        .with_param("x1_0", p.x1_0)
        .with_param("x2_0", p.x2_0)
        .with_param("T", p.maturity)
        .with_param("K", p.strike)
        .with_positive_coords(vec![0, 1]);
    Ok(model)
}

/// Heston model with closed-form flows for the two diffusion fields.
///
/// Along W1, `√y2` moves linearly at rate `βρ/2` and `y1` grows by
/// `exp(∫√y2)`; along W2 only `√y2` moves, at rate `β√(1−ρ²)/2`. A flow
/// that would drive `√y2` through zero has no unique solution and is
/// reported as a domain error.
pub fn heston_model_exact(p: &HestonParams) -> Result<Model> {
    let beta = p.beta;
    let rho = p.rho;
    let model = heston_model(p)?
        .with_exact_flow(1, move |t, y, out| {
            let r0 = sqrt_variance(y[1], "W1")?;
            let r = r0 + beta * rho * t / 2.0;
            if r < 0.0 {
                return Err(Error::Domain {
                    label: "W1".into(),
                    coord: 1,
                    value: -r * r,
                });
            }
            out[0] = y[0] * (r0 * t + beta * rho * t * t / 4.0).exp();
            out[1] = r * r;
            out[2] = y[2];
            Ok(())
        })
        .with_exact_flow(2, move |t, y, out| {
            let r0 = sqrt_variance(y[1], "W2")?;
            let r = r0 + beta * (1.0 - rho * rho).sqrt() * t / 2.0;
            if r < 0.0 {
                return Err(Error::Domain {
                    label: "W2".into(),
                    coord: 1,
                    value: -r * r,
                });
            }
            out[0] = y[0];
            out[1] = r * r;
            out[2] = y[2];
            Ok(())
        });
    Ok(model)
}

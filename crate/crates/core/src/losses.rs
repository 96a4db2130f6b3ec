//! Loss families on tabular edgeflows with analytic gradients.
//!
//! Every function here works on raw edge values and returns the gradient
//! with respect to those values; the parameterization chain rule (log-space
//! flows, backward-policy logits) is applied by the `*_params` wrappers and
//! by the optimizer. Training distributions enter as explicit weights: `nu`
//! per state for flow-matching losses, per edge for detailed-balance losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{in_flow, out_flow, EdgeFlow, Path, Reward};
use crate::graphs::ExplicitGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FKind {
    /// f(x) = (1 - x)²
    Chi2,
    /// f(x) = |1 - x|
    Tv,
}

/// Parameters of the Δ-form `f(a - b)·g(a, b)` with
/// `f(x) = log(1 + ε|x|^α)` and `g(a, b) = (1 + η(a + b))^β`.
/// `simplified` switches to `f(x) = x²`, `g ≡ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StableParams {
    pub epsilon: f64,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub simplified: bool,
}

impl Default for StableParams {
    fn default() -> Self {
        Self {
            epsilon: 0.001,
            eta: 1.0,
            alpha: 2.0,
            beta: 1.0,
            simplified: false,
        }
    }
}

impl StableParams {
    pub fn simplified() -> Self {
        Self {
            simplified: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.simplified {
            return Ok(());
        }
        if !(self.epsilon > 0.0 && self.eta > 0.0 && self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidLossParams(format!(
                "need ε, η, α, β > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// (f(x), f'(x)); f'(0) = 0.
    fn f(&self, x: f64) -> (f64, f64) {
        if self.simplified {
            return (x * x, 2.0 * x);
        }
        let ax = x.abs();
        if ax == 0.0 {
            return (0.0, 0.0);
        }
        let p = self.epsilon * ax.powf(self.alpha);
        let d = self.epsilon * self.alpha * ax.powf(self.alpha - 1.0) / (1.0 + p);
        (p.ln_1p(), d * x.signum())
    }

    /// (g(s), g'(s)) where s is the total mass argument (a + b, or F_out).
    fn g(&self, s: f64) -> (f64, f64) {
        if self.simplified {
            return (1.0, 0.0);
        }
        let base = 1.0 + self.eta * s;
        (
            base.powf(self.beta),
            self.beta * self.eta * base.powf(self.beta - 1.0),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum LossFamily {
    FmLog2,
    DbLog2,
    TbLog2,
    FmFdiv { f_kind: FKind },
    FmStable,
    DbStable,
}

impl LossFamily {
    /// Whether the family trains a separately parameterized backward policy.
    pub fn uses_backward_policy(&self) -> bool {
        matches!(
            self,
            LossFamily::DbLog2 | LossFamily::TbLog2 | LossFamily::DbStable
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    #[serde(flatten)]
    pub family: LossFamily,
    #[serde(default)]
    pub stable: StableParams,
    #[serde(default)]
    pub reg_alpha: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::new(LossFamily::FmStable)
    }
}

impl LossSpec {
    pub fn new(family: LossFamily) -> Self {
        Self {
            family,
            stable: StableParams::default(),
            reg_alpha: 0.0,
        }
    }

    pub fn with_stable(mut self, stable: StableParams) -> Self {
        self.stable = stable;
        self
    }

    pub fn with_reg(mut self, reg_alpha: f64) -> Self {
        self.reg_alpha = reg_alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reg_alpha >= 0.0) {
            return Err(Error::InvalidLossParams(format!(
                "reg_alpha = {}",
                self.reg_alpha
            )));
        }
        if matches!(self.family, LossFamily::FmStable | LossFamily::DbStable) {
            self.stable.validate()?;
        }
        Ok(())
    }

    /// Short identifier used in file names and plot legends.
    pub fn name(&self) -> String {
        let base = match self.family {
            LossFamily::FmLog2 => "fm_log2".to_string(),
            LossFamily::DbLog2 => "db_log2".to_string(),
            LossFamily::TbLog2 => "tb_log2".to_string(),
            LossFamily::FmFdiv {
                f_kind: FKind::Chi2,
            } => "fm_chi2".to_string(),
            LossFamily::FmFdiv { f_kind: FKind::Tv } => "fm_tv".to_string(),
            LossFamily::FmStable if self.stable.simplified => "fm_stable_sq".to_string(),
            LossFamily::FmStable => "fm_stable".to_string(),
            LossFamily::DbStable if self.stable.simplified => "db_stable_sq".to_string(),
            LossFamily::DbStable => "db_stable".to_string(),
        };
        if self.reg_alpha > 0.0 {
            format!("{base}_reg{}", self.reg_alpha)
        } else {
            base
        }
    }
}

/// A loss value and its gradient in the layout of the loss's arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl LossValue {
    pub fn zero(len: usize) -> Self {
        Self {
            value: 0.0,
            gradient: vec![0.0; len],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &LossValue) {
        self.value += scale * other.value;
        for (g, o) in self.gradient.iter_mut().zip(&other.gradient) {
            *g += scale * o;
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, got })
    }
}

/// Pushes per-state derivatives dL/dF_in, dL/dF_out back to edges.
fn state_grads_to_edges(graph: &ExplicitGraph, d_in: &[f64], d_out: &[f64]) -> Vec<f64> {
    graph
        .edges()
        .iter()
        .map(|e| d_out[e.from] + d_in[e.to])
        .collect()
}

/// One flow-matching summand `ℓ(F_in, F_out)` with its partial derivatives
/// `(ℓ, ∂ℓ/∂F_in, ∂ℓ/∂F_out)`. `None` when the term is undefined at the
/// given flows.
pub type FmTerm = dyn Fn(f64, f64) -> Option<(f64, f64, f64)> + Sync;

fn log2_term(fin: f64, fout: f64) -> Option<(f64, f64, f64)> {
    if !(fin > 0.0 && fout > 0.0) {
        return None;
    }
    let lr = (fout / fin).ln();
    Some((lr * lr, -2.0 * lr / fin, 2.0 * lr / fout))
}

fn fdiv_term(kind: FKind, fin: f64, fout: f64) -> Option<(f64, f64, f64)> {
    let delta = fout - fin;
    match kind {
        FKind::Tv => {
            let sg = if delta == 0.0 { 0.0 } else { delta.signum() };
            Some((delta.abs(), -sg, sg))
        }
        FKind::Chi2 => {
            if !(fout > 0.0) {
                return None;
            }
            let d_out = 2.0 * delta / fout - delta * delta / (fout * fout);
            Some((delta * delta / fout, -2.0 * delta / fout, d_out))
        }
    }
}

fn stable_term(params: &StableParams, fin: f64, fout: f64) -> (f64, f64, f64) {
    let (f, df) = params.f(fin - fout);
    let (g, dg) = params.g(fin + fout);
    (f * g, df * g + f * dg, -df * g + f * dg)
}

/// The per-state summand of a flow-matching loss; errors for the
/// edge-level families (DB, TB).
pub fn fm_term(spec: &LossSpec) -> Result<Box<FmTerm>> {
    spec.validate()?;
    let stable = spec.stable;
    Ok(match spec.family {
        LossFamily::FmLog2 => Box::new(log2_term),
        LossFamily::FmFdiv { f_kind } => Box::new(move |a, b| fdiv_term(f_kind, a, b)),
        LossFamily::FmStable => Box::new(move |a, b| Some(stable_term(&stable, a, b))),
        other => {
            return Err(Error::InvalidConfig(format!(
                "{other:?} is not a flow-matching loss"
            )));
        }
    })
}

/// Σ_s ν(s) ℓ(F_in(s), F_out(s)) over S*, skipping states with ν = 0.
pub fn fm_loss(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    nu: &[f64],
    term: &FmTerm,
) -> Result<LossValue> {
    check_len(graph.num_states(), nu.len())?;
    let fin = in_flow(graph, flow);
    let fout = out_flow(graph, flow);
    let mut value = 0.0;
    let mut d_in = vec![0.0; graph.num_states()];
    let mut d_out = vec![0.0; graph.num_states()];
    for s in graph.interior_states() {
        if nu[s] == 0.0 {
            continue;
        }
        let (v, di, d_o) = term(fin[s], fout[s]).ok_or(Error::NonpositiveFlowAtVisitedState(s))?;
        value += nu[s] * v;
        d_in[s] = nu[s] * di;
        d_out[s] = nu[s] * d_o;
    }
    Ok(LossValue {
        value,
        gradient: state_grads_to_edges(graph, &d_in, &d_out),
    })
}

/// Σ_s ν(s) log²(F_out(s) / F_in(s)) over S*.
pub fn fm_log2(graph: &ExplicitGraph, flow: &EdgeFlow, nu: &[f64]) -> Result<LossValue> {
    fm_loss(graph, flow, nu, &log2_term)
}

/// Σ_s ν(s) f(F_in(s)/F_out(s)) F_out(s) for f ∈ {chi2, tv}; the tv
/// subgradient at the kink is 0.
pub fn fm_fdiv(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    kind: FKind,
    nu: &[f64],
) -> Result<LossValue> {
    fm_loss(graph, flow, nu, &move |a, b| fdiv_term(kind, a, b))
}

/// Σ_s ν(s) f(F_in(s) - F_out(s)) g(F_in(s), F_out(s)).
pub fn fm_stable(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    params: &StableParams,
    nu: &[f64],
) -> Result<LossValue> {
    params.validate()?;
    let params = *params;
    fm_loss(graph, flow, nu, &move |a, b| {
        Some(stable_term(&params, a, b))
    })
}

/// Σ_e w(e) log²(F^f(e) / F^b(e)) over weighted non-terminal edges. The gradient has
/// length `2E`: first d/dF^f, then d/dF^b.
pub fn db_log2(
    graph: &ExplicitGraph,
    forward: &EdgeFlow,
    backward: &EdgeFlow,
    weights: &[f64],
) -> Result<LossValue> {
    let m = graph.num_edges();
    check_len(m, weights.len())?;
    check_len(m, forward.len())?;
    check_len(m, backward.len())?;
    let mut out = LossValue::zero(2 * m);
    for e in 0..m {
        if weights[e] == 0.0 || graph.is_terminal_edge(e) {
            continue;
        }
        let (a, b) = (forward.get(e), backward.get(e));
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::NonpositiveFlowAtVisitedState(graph.edge(e).from));
        }
        let lr = (a / b).ln();
        out.value += weights[e] * lr * lr;
        out.gradient[e] = 2.0 * weights[e] * lr / a;
        out.gradient[m + e] = -2.0 * weights[e] * lr / b;
    }
    Ok(out)
}

/// Σ_e w(e) f(F^f(e) - F^b(e)) g(F_out(src e)) with F_out taken from the
/// forward measure. Gradient layout as in [`db_log2`].
pub fn db_stable(
    graph: &ExplicitGraph,
    forward: &EdgeFlow,
    backward: &EdgeFlow,
    params: &StableParams,
    weights: &[f64],
) -> Result<LossValue> {
    let m = graph.num_edges();
    check_len(m, weights.len())?;
    check_len(m, forward.len())?;
    check_len(m, backward.len())?;
    params.validate()?;
    let fout = out_flow(graph, forward);
    let mut out = LossValue::zero(2 * m);
    let mut d_fout = vec![0.0; graph.num_states()];
    for e in 0..m {
        if weights[e] == 0.0 || graph.is_terminal_edge(e) {
            continue;
        }
        let src = graph.edge(e).from;
        let (f, df) = params.f(forward.get(e) - backward.get(e));
        let (g, dg) = params.g(fout[src]);
        out.value += weights[e] * f * g;
        out.gradient[e] += weights[e] * df * g;
        out.gradient[m + e] -= weights[e] * df * g;
        d_fout[src] += weights[e] * f * dg;
    }
    for (e, edge) in graph.edges().iter().enumerate() {
        out.gradient[e] += d_fout[edge.from];
    }
    Ok(out)
}

/// Σ_e F(e) over non-terminal edges.
pub fn regularizer_l1(graph: &ExplicitGraph, flow: &EdgeFlow) -> LossValue {
    let mut out = LossValue::zero(graph.num_edges());
    for e in 0..graph.num_edges() {
        if !graph.is_terminal_edge(e) {
            out.value += flow.get(e);
            out.gradient[e] = 1.0;
        }
    }
    out
}

/// Backward policy with one logit per edge; rows are the in-edges of each
/// interior state. Logits of terminal edges are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardParams {
    pub logits: Vec<f64>,
}

impl BackwardParams {
    /// Uniform over in-edges.
    pub fn uniform(graph: &ExplicitGraph) -> Self {
        Self {
            logits: vec![0.0; graph.num_edges()],
        }
    }

    /// Logits reproducing π_b(s→s') = F(s→s') / F_in(s') (edges with zero
    /// mass get a very negative logit).
    pub fn from_flow(flow: &EdgeFlow) -> Self {
        Self {
            logits: flow
                .values()
                .iter()
                .map(|&v| if v > 0.0 { v.ln() } else { -1e3 })
                .collect(),
        }
    }

    /// Softmax over the in-edges of every interior state.
    pub fn probs(&self, graph: &ExplicitGraph) -> Vec<f64> {
        let mut p = vec![0.0; graph.num_edges()];
        for s in graph.interior_states() {
            let row = graph.in_edges(s);
            let max = row
                .iter()
                .map(|&e| self.logits[e])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&e| (self.logits[e] - max).exp()).sum();
            for &e in row {
                p[e] = (self.logits[e] - max).exp() / z;
            }
        }
        p
    }
}

/// F^b(s→s') = F_out(s') π_b(s→s') on edges into S*; zero on terminal edges.
pub fn backward_measure(graph: &ExplicitGraph, flow: &EdgeFlow, pb: &[f64]) -> EdgeFlow {
    let fout = out_flow(graph, flow);
    let values = graph
        .edges()
        .iter()
        .enumerate()
        .map(|(e, edge)| {
            if graph.is_interior(edge.to) {
                fout[edge.to] * pb[e]
            } else {
                0.0
            }
        })
        .collect();
    EdgeFlow::new(values).expect("nonnegative")
}

/// Chains a gradient w.r.t. (F^f, F^b) back to (F, logits), where
/// F^f = F and F^b = F_out(target)·softmax(logits). Output has length `2E`.
fn chain_backward_measure(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    pb: &[f64],
    grad: &[f64],
) -> Vec<f64> {
    let m = graph.num_edges();
    let fout = out_flow(graph, flow);
    let (d_ff, d_fb) = grad.split_at(m);
    // dL/dF_out(t) through every F^b(e) with target t
    let mut d_fout = vec![0.0; graph.num_states()];
    for (e, edge) in graph.edges().iter().enumerate() {
        if graph.is_interior(edge.to) {
            d_fout[edge.to] += d_fb[e] * pb[e];
        }
    }
    let mut out = vec![0.0; 2 * m];
    for (e, edge) in graph.edges().iter().enumerate() {
        out[e] = d_ff[e] + d_fout[edge.from];
    }
    for s in graph.interior_states() {
        let row = graph.in_edges(s);
        let mean: f64 = row.iter().map(|&e| pb[e] * d_fb[e]).sum();
        for &e in row {
            out[m + e] = fout[s] * pb[e] * (d_fb[e] - mean);
        }
    }
    out
}

/// Detailed balance in log² form with a parameterized backward policy.
/// Gradient layout: d/dF (E entries), then d/dlogits (E entries).
pub fn db_log2_params(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    backward: &BackwardParams,
    weights: &[f64],
) -> Result<LossValue> {
    let pb = backward.probs(graph);
    let fb = backward_measure(graph, flow, &pb);
    let raw = db_log2(graph, flow, &fb, weights)?;
    Ok(LossValue {
        value: raw.value,
        gradient: chain_backward_measure(graph, flow, &pb, &raw.gradient),
    })
}

/// Stable detailed balance with a parameterized backward policy; layout as
/// in [`db_log2_params`].
pub fn db_stable_params(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    backward: &BackwardParams,
    params: &StableParams,
    weights: &[f64],
) -> Result<LossValue> {
    let pb = backward.probs(graph);
    let fb = backward_measure(graph, flow, &pb);
    let raw = db_stable(graph, flow, &fb, params, weights)?;
    Ok(LossValue {
        value: raw.value,
        gradient: chain_backward_measure(graph, flow, &pb, &raw.gradient),
    })
}

/// Mean over complete paths of
/// log²(F_out(s0) Π π_f / (R(s_τ) Π π_b)). Gradient layout as in
/// [`db_log2_params`].
pub fn tb_log2(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    backward: &BackwardParams,
    reward: &Reward,
    paths: &[Path],
) -> Result<LossValue> {
    let m = graph.num_edges();
    let fout = out_flow(graph, flow);
    let pb = backward.probs(graph);
    let mut out = LossValue::zero(2 * m);
    if paths.is_empty() {
        return Ok(out);
    }
    let n = paths.len() as f64;
    let s0 = graph.source();
    for path in paths {
        if path.truncated {
            return Err(Error::TruncatedPathInTBBatch);
        }
        let last = path.states[path.tau];
        if !(fout[s0] > 0.0 && reward.get(last) > 0.0) {
            return Err(Error::NonpositiveFlowAtVisitedState(last));
        }
        let mut log_ratio = fout[s0].ln() - reward.get(last).ln();
        for (t, &e) in path.actions.iter().enumerate() {
            let s = path.states[t];
            if !(flow.get(e) > 0.0 && fout[s] > 0.0) {
                return Err(Error::NonpositiveFlowAtVisitedState(s));
            }
            log_ratio += flow.get(e).ln() - fout[s].ln();
            if !graph.is_terminal_edge(e) {
                log_ratio -= pb[e].ln();
            }
        }
        out.value += log_ratio * log_ratio / n;
        let c = 2.0 * log_ratio / n;
        for &e in graph.out_edges(s0) {
            out.gradient[e] += c / fout[s0];
        }
        for (t, &e) in path.actions.iter().enumerate() {
            let s = path.states[t];
            out.gradient[e] += c / flow.get(e);
            for &x in graph.out_edges(s) {
                out.gradient[x] -= c / fout[s];
            }
            if !graph.is_terminal_edge(e) {
                // -log softmax over the in-edges of the target
                out.gradient[m + e] -= c;
                for &x in graph.in_edges(graph.edge(e).to) {
                    out.gradient[m + x] += c * pb[x];
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameters where one-sided differences disagree independently of the
    /// step size; excluded from the max.
    pub kinks: Vec<usize>,
}

/// Max over parameters of |analytic - FD| / (|analytic| + |FD| + 1e-12),
/// skipping points where the loss is not differentiable.
pub fn grad_check<L>(loss: L, params: &[f64], h: f64) -> Result<GradCheck>
where
    L: Fn(&[f64]) -> Result<LossValue>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {h} outside [1e-7, 1e-4]"
        )));
    }
    let base = loss(params)?;
    check_len(params.len(), base.gradient.len())?;
    let mut x = params.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut kinks = Vec::new();
    for i in 0..params.len() {
        x[i] = params[i] + h;
        let up = loss(&x)?.value;
        x[i] = params[i] - h;
        let down = loss(&x)?.value;
        x[i] = params[i];
        let fwd = (up - base.value) / h;
        let bwd = (base.value - down) / h;
        let gap = (fwd - bwd).abs();
        if gap > 1e-6_f64.max(1e-3 * (fwd.abs() + bwd.abs())) {
            // Curvature also separates the one-sided slopes, by about h * L''.
            // A kink keeps the gap as the step shrinks; curvature does not.
            let small = h / 10.0;
            x[i] = params[i] + small;
            let up_s = loss(&x)?.value;
            x[i] = params[i] - small;
            let down_s = loss(&x)?.value;
            x[i] = params[i];
            let gap_s = ((up_s - base.value) / small - (base.value - down_s) / small).abs();
            if gap_s > 0.5 * gap {
                kinks.push(i);
                continue;
            }
        }
        let fd = (up - down) / (2.0 * h);
        let a = base.gradient[i];
        max_rel_error = max_rel_error.max((a - fd).abs() / (a.abs() + fd.abs() + 1e-12));
    }
    Ok(GradCheck {
        max_rel_error,
        kinks,
    })
}

//! Sampler flows, exact absorbing-chain oracles, training metrics, cycle
//! decomposition and stability probes on explicit graphs.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flows::{forward_policy, in_flow, out_flow, EdgeFlow, Policy, Reward};
use crate::graphs::ExplicitGraph;

/// Power-method cutoff multiplier used when none is given.
pub const DEFAULT_LAMBDA: f64 = 10.0;
/// Log metrics never go below this value.
pub const LOG_FLOOR: f64 = -30.0;
/// Edges at or below this mass are outside the positive support.
pub const SUPPORT_TOL: f64 = 1e-12;
const FLOW_TOL: f64 = 1e-9;

pub fn clamped_ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln().max(LOG_FLOOR)
    } else if x.is_nan() {
        f64::NAN
    } else {
        LOG_FLOOR
    }
}

/// The flow actually realized by running the forward policy from `s0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerFlowResult {
    /// F̄ on every edge.
    pub flow: EdgeFlow,
    /// F̄_out per state (`s0` carries F_out(s0)).
    pub visits: Vec<f64>,
    /// R̄(s) = F̄(s → sf) per state.
    pub terminal: Vec<f64>,
    pub expected_tau: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

impl SamplerFlowResult {
    /// R̄ / R̄(S*) per state; `None` when no mass terminates.
    pub fn sampling_distribution(&self) -> Option<Vec<f64>> {
        let z: f64 = self.terminal.iter().sum();
        (z > 0.0).then(|| self.terminal.iter().map(|r| r / z).collect())
    }
}

fn initial_mass(graph: &ExplicitGraph, flow: &EdgeFlow) -> Vec<f64> {
    let mut mu = vec![0.0; graph.num_states()];
    for &e in graph.out_edges(graph.source()) {
        let to = graph.edge(e).to;
        if graph.is_interior(to) {
            mu[to] += flow.get(e);
        }
    }
    mu
}

/// Power-method estimate of the sampler flow, truncated after
/// `ceil(lambda * width)` propagation steps.
pub fn sampler_flow(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    lambda: f64,
    width: usize,
) -> Result<SamplerFlowResult> {
    let fout = out_flow(graph, flow);
    if fout[graph.source()] <= 0.0 {
        return Err(Error::NoInitialFlow);
    }
    let policy = forward_policy(graph, flow, 0.0)?;
    let max_iter = (lambda * width as f64).ceil().max(1.0) as usize;

    let mut mu = initial_mass(graph, flow);
    let start: f64 = mu.iter().sum();
    let mut visits = vec![0.0; graph.num_states()];
    let mut next = vec![0.0; graph.num_states()];
    let mut iterations_used = 0;
    let mut converged = start == 0.0;
    while iterations_used < max_iter && !converged {
        for (v, m) in visits.iter_mut().zip(&mu) {
            *v += m;
        }
        next.iter_mut().for_each(|x| *x = 0.0);
        for s in graph.interior_states() {
            if mu[s] == 0.0 || !policy.is_live(s) {
                continue;
            }
            for &e in graph.out_edges(s) {
                let to = graph.edge(e).to;
                if graph.is_interior(to) {
                    next[to] += mu[s] * policy.prob(e);
                }
            }
        }
        std::mem::swap(&mut mu, &mut next);
        iterations_used += 1;
        converged = mu.iter().sum::<f64>() / start < 1e-9;
    }

    visits[graph.source()] = fout[graph.source()];
    let mut bar = vec![0.0; graph.num_edges()];
    for (e, edge) in graph.edges().iter().enumerate() {
        bar[e] = if edge.from == graph.source() {
            flow.get(e)
        } else {
            visits[edge.from] * policy.prob(e)
        };
    }
    let mut terminal = vec![0.0; graph.num_states()];
    for s in graph.interior_states() {
        if let Some(e) = graph.terminal_edge(s) {
            terminal[s] = bar[e];
        }
    }
    let interior_visits: f64 = graph.interior_states().map(|s| visits[s]).sum();
    let ended: f64 = terminal.iter().sum();
    Ok(SamplerFlowResult {
        flow: EdgeFlow::new(bar)?,
        visits,
        terminal,
        expected_tau: if ended > 0.0 {
            interior_visits / ended
        } else {
            f64::INFINITY
        },
        iterations_used,
        converged,
    })
}

/// Exact sampler quantities from the absorbing-chain linear system.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSampling {
    /// Expected visits per state, scaled by the initial mass F(s0 → S*).
    pub visits: Vec<f64>,
    /// P(s_τ = s).
    pub distribution: Vec<f64>,
    pub expected_tau: f64,
}

/// Solves `(I - Q)ᵀ x = μ0` over the interior states reachable from `s0`,
/// where `Q` is the forward policy restricted to S*. Independent of
/// [`sampler_flow`].
pub fn exact_sampling(graph: &ExplicitGraph, flow: &EdgeFlow) -> Result<ExactSampling> {
    let policy = forward_policy(graph, flow, 0.0)?;
    let mu0 = initial_mass(graph, flow);
    let start: f64 = mu0.iter().sum();
    if start <= 0.0 {
        return Err(Error::NoInitialFlow);
    }

    // interior states reachable along positive-probability edges
    let mut index = vec![usize::MAX; graph.num_states()];
    let mut order = Vec::new();
    let mut stack: Vec<usize> = graph.interior_states().filter(|&s| mu0[s] > 0.0).collect();
    for &s in &stack {
        index[s] = 0;
    }
    while let Some(s) = stack.pop() {
        index[s] = order.len();
        order.push(s);
        if !policy.is_live(s) {
            return Err(Error::DeadState(s));
        }
        for &e in graph.out_edges(s) {
            let to = graph.edge(e).to;
            if graph.is_interior(to) && policy.prob(e) > 0.0 && index[to] == usize::MAX {
                index[to] = 0;
                stack.push(to);
            }
        }
    }

    let n = order.len();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (i, &s) in order.iter().enumerate() {
        b[i] = mu0[s];
        for &e in graph.out_edges(s) {
            let to = graph.edge(e).to;
            if graph.is_interior(to) && policy.prob(e) > 0.0 {
                a[(index[to], i)] -= policy.prob(e);
            }
        }
    }
    let x = a.lu().solve(&b).ok_or(Error::SingularSystem)?;

    let mut visits = vec![0.0; graph.num_states()];
    let mut ended = vec![0.0; graph.num_states()];
    for (i, &s) in order.iter().enumerate() {
        if !x[i].is_finite() || x[i] < -1e-9 * start {
            return Err(Error::SingularSystem);
        }
        visits[s] = x[i].max(0.0);
        if let Some(e) = graph.terminal_edge(s) {
            ended[s] = visits[s] * policy.prob(e);
        }
    }
    let total_end: f64 = ended.iter().sum();
    if !(total_end > 0.0) || ((total_end - start) / start).abs() > 1e-6 {
        return Err(Error::SingularSystem);
    }
    let total_visits: f64 = visits.iter().sum();
    Ok(ExactSampling {
        distribution: ended.iter().map(|v| v / total_end).collect(),
        expected_tau: total_visits / total_end,
        visits,
    })
}

/// Distribution of `s_τ` under the forward policy of `flow`.
pub fn exact_sampling_distribution(graph: &ExplicitGraph, flow: &EdgeFlow) -> Result<Vec<f64>> {
    Ok(exact_sampling(graph, flow)?.distribution)
}

/// Σ_s |p(s) - q(s)| over S*.
pub fn tv_distance(graph: &ExplicitGraph, p: &[f64], q: &[f64]) -> f64 {
    graph.interior_states().map(|s| (p[s] - q[s]).abs()).sum()
}

/// Snapshot of sampler, approximation and integration errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub loss: f64,
    pub tv_error: f64,
    pub e_f: f64,
    pub e_r: f64,
    pub e_i: f64,
    pub expected_tau: f64,
    pub total_mass: f64,
}

pub const METRICS_HEADER: [&str; 8] = [
    "step",
    "loss",
    "tv_error",
    "E_F",
    "E_R",
    "E_I",
    "expected_tau",
    "total_mass",
];

impl MetricsRecord {
    /// Values in [`METRICS_HEADER`] order after `step`.
    pub fn fields(&self) -> [f64; 7] {
        [
            self.loss,
            self.tv_error,
            self.e_f,
            self.e_r,
            self.e_i,
            self.expected_tau,
            self.total_mass,
        ]
    }
}

/// Writes metrics rows under the `step,loss,tv_error,E_F,E_R,E_I,expected_tau,total_mass` header.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[(usize, MetricsRecord)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for (step, m) in rows {
        let mut rec = vec![step.to_string()];
        rec.extend(m.fields().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Computes every metric; `loss` is left at zero for the caller to fill.
pub fn metrics(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    reward: &Reward,
    lambda: f64,
    width: usize,
) -> MetricsRecord {
    let total_mass = flow.total();
    let r_total = reward.total(graph);
    let fin = in_flow(graph, flow);

    let (tv_error, expected_tau) = match sampler_flow(graph, flow, lambda, width) {
        Ok(bar) => match (bar.sampling_distribution(), reward.normalized(graph)) {
            (Some(p), Ok(q)) => (tv_distance(graph, &p, &q), bar.expected_tau),
            _ => (2.0, bar.expected_tau),
        },
        Err(_) => (2.0, f64::INFINITY),
    };

    // R̂(s) = max(F_in(s) - F(s → S*), 0)
    let mut to_interior = vec![0.0; graph.num_states()];
    for (e, edge) in graph.edges().iter().enumerate() {
        if graph.is_interior(edge.to) {
            to_interior[edge.from] += flow.get(e);
        }
    }
    let e_r = graph
        .interior_states()
        .map(|s| ((fin[s] - to_interior[s]).max(0.0) - reward.get(s)).abs())
        .sum::<f64>()
        / r_total;
    let initial: f64 = graph
        .out_edges(graph.source())
        .iter()
        .filter(|&&e| graph.is_interior(graph.edge(e).to))
        .map(|&e| flow.get(e))
        .sum();
    let e_i = clamped_ln(((initial - r_total) / r_total).abs());

    MetricsRecord {
        loss: 0.0,
        tv_error,
        e_f: clamped_ln(tv_error),
        e_r,
        e_i,
        expected_tau,
        total_mass,
    }
}

/// F_out(S*) / R(S*).
pub fn expected_sampling_time_bound(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    reward: &Reward,
) -> Result<f64> {
    let r = reward.total(graph);
    if r <= 0.0 {
        return Err(Error::ZeroReward);
    }
    let fout = out_flow(graph, flow);
    Ok(graph.interior_states().map(|s| fout[s]).sum::<f64>() / r)
}

/// max over S* of |F_in(s) - F_out(s)|.
pub fn flow_matching_residual(graph: &ExplicitGraph, flow: &EdgeFlow) -> f64 {
    let fin = in_flow(graph, flow);
    let fout = out_flow(graph, flow);
    graph
        .interior_states()
        .map(|s| (fin[s] - fout[s]).abs())
        .fold(0.0, f64::max)
}

/// A directed cycle inside S* with the mass removed along it.
#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    pub states: Vec<usize>,
    pub edges: Vec<usize>,
    pub weight: f64,
}

impl Cycle {
    /// `weight * 1_γ` as an edgeflow.
    pub fn as_flow(&self, num_edges: usize) -> EdgeFlow {
        let mut v = vec![0.0; num_edges];
        for &e in &self.edges {
            v[e] += self.weight;
        }
        EdgeFlow::new(v).expect("cycle weights are positive")
    }
}

/// `F = F0 + F_min` with `F0` a sum of weighted cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub zero_part: EdgeFlow,
    pub minimal: EdgeFlow,
    pub cycles: Vec<Cycle>,
}

/// Finds a directed cycle in the support subgraph restricted to S*, using
/// depth-first search from the lowest-index state with support out-mass.
fn find_cycle(graph: &ExplicitGraph, values: &[f64]) -> Option<Vec<usize>> {
    let in_support = |e: usize| {
        values[e] > SUPPORT_TOL
            && graph.is_interior(graph.edge(e).from)
            && graph.is_interior(graph.edge(e).to)
    };
    // 0 = unseen, 1 = on stack, 2 = done
    let mut color = vec![0u8; graph.num_states()];
    for root in graph.interior_states() {
        if color[root] != 0 || !graph.out_edges(root).iter().any(|&e| in_support(e)) {
            continue;
        }
        // stack of (state, next out-edge position); `via` holds the edge entering each frame
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        let mut via: Vec<usize> = Vec::new();
        color[root] = 1;
        while let Some(&mut (s, ref mut pos)) = stack.last_mut() {
            let outs = graph.out_edges(s);
            if *pos >= outs.len() {
                color[s] = 2;
                stack.pop();
                via.pop();
                continue;
            }
            let e = outs[*pos];
            *pos += 1;
            if !in_support(e) {
                continue;
            }
            let t = graph.edge(e).to;
            match color[t] {
                0 => {
                    color[t] = 1;
                    stack.push((t, 0));
                    via.push(e);
                }
                1 => {
                    let start = stack.iter().position(|&(x, _)| x == t).unwrap();
                    let mut edges: Vec<usize> = via[start..].to_vec();
                    edges.push(e);
                    return Some(edges);
                }
                _ => {}
            }
        }
    }
    None
}

/// Greedy cycle extraction on any edgeflow: repeatedly removes
/// `λ·1_γ` with `λ` the smallest mass on the cycle `γ`, until the support
/// inside S* is acyclic.
pub fn extract_cycles(graph: &ExplicitGraph, flow: &EdgeFlow) -> Decomposition {
    let mut rest = flow.values().to_vec();
    let mut cycles = Vec::new();
    while let Some(edges) = find_cycle(graph, &rest) {
        let (argmin, weight) =
            edges
                .iter()
                .map(|&e| (e, rest[e]))
                .fold((usize::MAX, f64::INFINITY), |acc, x| {
                    if x.1 < acc.1 {
                        x
                    } else {
                        acc
                    }
                });
        for &e in &edges {
            rest[e] = (rest[e] - weight).max(0.0);
        }
        rest[argmin] = 0.0;
        let states = edges.iter().map(|&e| graph.edge(e).from).collect();
        cycles.push(Cycle {
            states,
            edges,
            weight,
        });
    }
    let zero: Vec<f64> = flow
        .values()
        .iter()
        .zip(&rest)
        .map(|(f, r)| f - r)
        .collect();
    Decomposition {
        zero_part: EdgeFlow::new(zero.into_iter().map(|x| x.max(0.0)).collect())
            .expect("nonnegative"),
        minimal: EdgeFlow::new(rest).expect("nonnegative"),
        cycles,
    }
}

/// Splits a flow into a maximal 0-subflow and an acyclic remainder. The
/// 0-subflow is not unique; which one comes out depends on the search order.
pub fn decompose_zero_flow(graph: &ExplicitGraph, flow: &EdgeFlow) -> Result<Decomposition> {
    let scale = flow.values().iter().copied().fold(1.0, f64::max);
    let residual = flow_matching_residual(graph, flow);
    if residual > FLOW_TOL * scale {
        return Err(Error::NotAFlow(residual));
    }
    Ok(extract_cycles(graph, flow))
}

/// True iff the edges inside S* carrying more than [`SUPPORT_TOL`] contain
/// no directed cycle.
pub fn is_acyclic_flow(graph: &ExplicitGraph, flow: &EdgeFlow) -> bool {
    find_cycle(graph, flow.values()).is_none()
}

/// Checks that `direction` is a 0-flow: flow matching on S*, no mass on
/// initial or terminal edges.
pub fn check_zero_flow(graph: &ExplicitGraph, direction: &EdgeFlow) -> Result<()> {
    if direction.len() != graph.num_edges() {
        return Err(Error::LengthMismatch {
            expected: graph.num_edges(),
            got: direction.len(),
        });
    }
    for e in 0..graph.num_edges() {
        if (graph.is_terminal_edge(e) || graph.is_initial_edge(e)) && direction.get(e) != 0.0 {
            return Err(Error::DirectionNotZeroFlow(format!(
                "edge {e} touches s0 or sf"
            )));
        }
    }
    let scale = direction.values().iter().copied().fold(1.0, f64::max);
    let residual = flow_matching_residual(graph, direction);
    if residual > FLOW_TOL * scale {
        return Err(Error::DirectionNotZeroFlow(format!(
            "matching residual {residual:e}"
        )));
    }
    Ok(())
}

/// Finite-difference derivative of `loss` at the family `(F_1, ..., F_p)`
/// along a 0-flow added to every member: central when `F_i - h·F0 >= 0`
/// for all members, forward otherwise.
pub fn directional_derivative<L>(
    graph: &ExplicitGraph,
    loss: L,
    family: &[EdgeFlow],
    direction: &EdgeFlow,
    h: f64,
) -> Result<f64>
where
    L: Fn(&[EdgeFlow]) -> Result<f64>,
{
    check_zero_flow(graph, direction)?;
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h = {h}")));
    }
    let plus = family
        .iter()
        .map(|f| f.axpy(h, direction))
        .collect::<Result<Vec<_>>>()?;
    let minus: Option<Vec<EdgeFlow>> = family.iter().map(|f| f.axpy(-h, direction).ok()).collect();
    match minus {
        Some(minus) => Ok((loss(&plus)? - loss(&minus)?) / (2.0 * h)),
        None => Ok((loss(&plus)? - loss(family)?) / h),
    }
}

/// Policy helper shared with the metrics code in other modules.
pub fn stop_probabilities(graph: &ExplicitGraph, policy: &Policy) -> Vec<f64> {
    (0..graph.num_states())
        .map(|s| match graph.terminal_edge(s) {
            Some(e) if policy.is_live(s) => policy.prob(e),
            _ => 0.0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{chain, cycle_chain};

    fn chain_flow(f1: f64, f2: f64, f3: f64, c: f64) -> EdgeFlow {
        EdgeFlow::new(vec![f1, f2, f3 + c, c, 1.0]).unwrap()
    }

    fn chain_reward() -> Reward {
        Reward::new(vec![0.0, 0.0, 0.0, 1.0, 0.0]).unwrap()
    }

    /// Brute-force oracle for E(τ) on the cycle chain with `c` on C→B:
    /// τ = 3 + 2k where k ~ Geometric with loop probability c / (c + 1).
    fn chain_tau_oracle(c: f64) -> f64 {
        let loop_p = c / (c + 1.0);
        (0..2000)
            .map(|k| (3.0 + 2.0 * k as f64) * loop_p.powi(k) * (1.0 - loop_p))
            .sum()
    }

    #[test]
    fn sampler_flow_exactly_sampled_chain() {
        let g = cycle_chain();
        let f = chain_flow(1.0, 1.0, 1.0, 1.0);
        let bar = sampler_flow(&g, &f, 10.0, 20).unwrap();
        assert!(bar.converged);
        for e in 0..5 {
            assert!((bar.flow.get(e) - f.get(e)).abs() < 1e-8);
        }
        assert!((bar.expected_tau - 5.0).abs() < 1e-8);
        assert!((chain_tau_oracle(1.0) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn sampler_flow_ignores_unreachable_cycle() {
        // s0→A:1, A→sf:1, B→C:1, C→B:1 with zero-mass edges s0→B and C→sf
        // keeping B and C connected to the source and sink.
        let (s0, a, b, c, sf) = (0, 1, 2, 3, 4);
        let g = ExplicitGraph::new(
            5,
            &[(s0, a), (a, sf), (b, c), (c, b), (s0, b), (c, sf)],
            s0,
            sf,
        )
        .unwrap();
        let f = EdgeFlow::new(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let bar = sampler_flow(&g, &f, 10.0, 5).unwrap();
        assert_eq!(bar.flow.values(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(bar.terminal[a], 1.0);
    }

    #[test]
    fn sampler_flow_of_overweighted_terminal() {
        // s0→A:1, A→sf:2, B→sf:1 with an empty edge s0→B.
        let (s0, a, b, sf) = (0, 1, 2, 3);
        let g = ExplicitGraph::new(4, &[(s0, a), (a, sf), (b, sf), (s0, b)], s0, sf).unwrap();
        let f = EdgeFlow::new(vec![1.0, 2.0, 1.0, 0.0]).unwrap();
        let bar = sampler_flow(&g, &f, 10.0, 5).unwrap();
        assert_eq!(bar.flow.values(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn sampler_flow_needs_initial_mass() {
        let g = cycle_chain();
        assert_eq!(
            sampler_flow(&g, &chain_flow(0.0, 1.0, 1.0, 1.0), 10.0, 5),
            Err(Error::NoInitialFlow)
        );
    }

    #[test]
    fn exact_oracle_on_chain() {
        let g = cycle_chain();
        for c in [0.0, 0.5, 1.0, 3.0] {
            let ex = exact_sampling(&g, &chain_flow(1.0, 1.0, 1.0, c)).unwrap();
            assert_eq!(ex.distribution[chain::C], 1.0);
            assert!(
                (ex.expected_tau - chain_tau_oracle(c)).abs() < 1e-9,
                "c={c}"
            );
        }
    }

    #[test]
    fn exact_oracle_detects_trap() {
        let g = cycle_chain();
        let f = EdgeFlow::new(vec![1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(exact_sampling(&g, &f), Err(Error::SingularSystem));
    }

    #[test]
    fn metrics_at_exact_acyclic_flow() {
        let g = cycle_chain();
        let m = metrics(
            &g,
            &chain_flow(1.0, 1.0, 1.0, 0.0),
            &chain_reward(),
            10.0,
            5,
        );
        assert_eq!(m.tv_error, 0.0);
        assert_eq!(m.e_f, LOG_FLOOR);
        assert_eq!(m.e_r, 0.0);
        assert_eq!(m.e_i, LOG_FLOOR);
        assert!((m.expected_tau - 3.0).abs() < 1e-12);
        assert_eq!(m.total_mass, 4.0);
    }

    #[test]
    fn metrics_initial_flow_error() {
        let g = cycle_chain();
        let m = metrics(
            &g,
            &chain_flow(2.0, 1.0, 1.0, 0.0),
            &chain_reward(),
            10.0,
            5,
        );
        assert!(m.e_i.abs() < 1e-15);
        let m = metrics(
            &g,
            &chain_flow(1.0, 1.0, 1.0, 1.0),
            &chain_reward(),
            10.0,
            20,
        );
        assert!((m.expected_tau - 5.0).abs() < 1e-8);
    }

    #[test]
    fn metrics_csv_header() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,loss,tv_error,E_F,E_R,E_I,expected_tau,total_mass\n"
        );
    }

    #[test]
    fn decomposition_of_chain() {
        let g = cycle_chain();
        let d = decompose_zero_flow(&g, &chain_flow(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!(d.zero_part.values(), &[0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(d.minimal.values(), &[1.0, 1.0, 1.0, 0.0, 1.0]);
        assert_eq!(d.cycles.len(), 1);
        assert_eq!(d.cycles[0].states, vec![chain::B, chain::C]);
    }

    #[test]
    fn decomposition_of_two_cycle_example() {
        // s0→B, B→A, A→D, D→B, B→C, C→D, D→sf, all weight 1
        let (s0, a, b, c, d, sf) = (0, 1, 2, 3, 4, 5);
        let g = ExplicitGraph::new(
            6,
            &[(s0, b), (b, a), (a, d), (d, b), (b, c), (c, d), (d, sf)],
            s0,
            sf,
        )
        .unwrap();
        let f = EdgeFlow::constant(7, 1.0);
        let dec = decompose_zero_flow(&g, &f).unwrap();
        assert_eq!(dec.cycles.len(), 1);
        assert!(is_acyclic_flow(&g, &dec.minimal));
        assert!(flow_matching_residual(&g, &dec.zero_part) < 1e-12);
        assert_eq!(dec.zero_part.total(), 3.0);
        // either A→D→B→A or D→B→C→D
        let mut states = dec.cycles[0].states.clone();
        states.sort();
        assert!(
            states == vec![a, b, d] || states == vec![b, c, d],
            "{states:?}"
        );
    }

    #[test]
    fn decomposition_rejects_non_flows() {
        let g = cycle_chain();
        assert!(matches!(
            decompose_zero_flow(&g, &chain_flow(1.0, 2.0, 1.0, 1.0)),
            Err(Error::NotAFlow(_))
        ));
        let d = decompose_zero_flow(&g, &chain_flow(1.0, 1.0, 1.0, 0.0)).unwrap();
        assert!(d.cycles.is_empty());
        assert_eq!(d.zero_part.total(), 0.0);
    }

    #[test]
    fn acyclicity() {
        let g = cycle_chain();
        assert!(is_acyclic_flow(&g, &chain_flow(1.0, 1.0, 1.0, 0.0)));
        assert!(!is_acyclic_flow(&g, &chain_flow(1.0, 1.0, 1.0, 0.5)));
        assert!(is_acyclic_flow(&g, &EdgeFlow::zeros(5)));
    }

    #[test]
    fn sampling_time_bound() {
        let g = cycle_chain();
        let r = chain_reward();
        assert_eq!(
            expected_sampling_time_bound(&g, &chain_flow(1.0, 1.0, 1.0, 0.0), &r).unwrap(),
            3.0
        );
        for c in [0.5, 2.0, 10.0] {
            let b = expected_sampling_time_bound(&g, &chain_flow(1.0, 1.0, 1.0, c), &r).unwrap();
            assert!((b - (3.0 + 2.0 * c)).abs() < 1e-12);
        }
        let zero = Reward::new(vec![0.0; 5]).unwrap();
        assert_eq!(
            expected_sampling_time_bound(&g, &chain_flow(1.0, 1.0, 1.0, 0.0), &zero),
            Err(Error::ZeroReward)
        );
    }

    #[test]
    fn directional_derivative_of_linear_functional() {
        let g = cycle_chain();
        let l1 = |fam: &[EdgeFlow]| -> Result<f64> {
            Ok((0..5)
                .filter(|&e| !g.is_terminal_edge(e))
                .map(|e| fam[0].get(e))
                .sum())
        };
        let dir = EdgeFlow::new(vec![0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let d =
            directional_derivative(&g, l1, &[chain_flow(1.0, 1.0, 1.0, 1.0)], &dir, 1e-3).unwrap();
        assert!((d - 2.0).abs() < 1e-9);
        // C→B carries nothing, so the forward difference is used
        let d =
            directional_derivative(&g, l1, &[chain_flow(1.0, 1.0, 1.0, 0.0)], &dir, 1e-3).unwrap();
        assert!((d - 2.0).abs() < 1e-9);
    }

    #[test]
    fn directional_derivative_rejects_non_zero_flows() {
        let g = cycle_chain();
        let loss = |_: &[EdgeFlow]| Ok(0.0);
        let f = chain_flow(1.0, 1.0, 1.0, 1.0);
        let not_balanced = EdgeFlow::new(vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            directional_derivative(&g, loss, std::slice::from_ref(&f), &not_balanced, 1e-3),
            Err(Error::DirectionNotZeroFlow(_))
        ));
        let terminal = EdgeFlow::new(vec![0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            directional_derivative(&g, loss, &[f], &terminal, 1e-3),
            Err(Error::DirectionNotZeroFlow(_))
        ));
    }
}

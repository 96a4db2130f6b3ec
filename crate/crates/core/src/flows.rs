//! Edgeflows on explicit graphs, the policies they induce, and path sampling.

use std::fmt::Display;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graphs::ExplicitGraph;

/// Nonnegative weight per edge of an [`ExplicitGraph`], in edge-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFlow(Vec<f64>);

impl EdgeFlow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((e, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::InvalidFlow(format!("edge {e} has value {v}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(num_edges: usize) -> Self {
        Self(vec![0.0; num_edges])
    }

    pub fn constant(num_edges: usize, value: f64) -> Self {
        Self(vec![value; num_edges])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, edge: usize) -> f64 {
        self.0[edge]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    /// `self + scale * other`; fails if the result leaves the nonnegative cone.
    pub fn axpy(&self, scale: f64, other: &EdgeFlow) -> Result<EdgeFlow> {
        EdgeFlow::new(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + scale * b)
                .collect(),
        )
    }

    fn check_len(&self, graph: &ExplicitGraph) -> Result<()> {
        if self.0.len() == graph.num_edges() {
            Ok(())
        } else {
            Err(Error::LengthMismatch {
                expected: graph.num_edges(),
                got: self.0.len(),
            })
        }
    }
}

/// Nonnegative reward per state; entries for `s0` and `sf` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Reward(Vec<f64>);

impl Reward {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((s, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::InvalidFlow(format!("reward at state {s} is {v}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, state: usize) -> f64 {
        self.0[state]
    }

    /// R(S*).
    pub fn total(&self, graph: &ExplicitGraph) -> f64 {
        graph.interior_states().map(|s| self.0[s]).sum()
    }

    /// R / R(S*) over all states (zero on `s0`, `sf`).
    pub fn normalized(&self, graph: &ExplicitGraph) -> Result<Vec<f64>> {
        let z = self.total(graph);
        if z <= 0.0 {
            return Err(Error::ZeroReward);
        }
        Ok((0..graph.num_states())
            .map(|s| {
                if graph.is_interior(s) {
                    self.0[s] / z
                } else {
                    0.0
                }
            })
            .collect())
    }
}

/// F_in(s) = Σ_{s'→s} F(s'→s).
pub fn in_flow(graph: &ExplicitGraph, flow: &EdgeFlow) -> Vec<f64> {
    let mut out = vec![0.0; graph.num_states()];
    for (e, edge) in graph.edges().iter().enumerate() {
        out[edge.to] += flow.0[e];
    }
    out
}

/// F_out(s) = Σ_{s→s'} F(s→s').
pub fn out_flow(graph: &ExplicitGraph, flow: &EdgeFlow) -> Vec<f64> {
    let mut out = vec![0.0; graph.num_states()];
    for (e, edge) in graph.edges().iter().enumerate() {
        out[edge.from] += flow.0[e];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Forward,
    Backward,
}

/// Categorical distribution per state over its out-edges (forward) or
/// in-edges (backward), stored as one probability per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    kind: PolicyKind,
    probs: Vec<f64>,
    live: Vec<bool>,
}

impl Policy {
    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn prob(&self, edge: usize) -> f64 {
        self.probs[edge]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Whether the row of `state` is a proper distribution.
    pub fn is_live(&self, state: usize) -> bool {
        self.live[state]
    }

    /// `(edge, probability)` pairs of the row of `state`.
    pub fn row(&self, graph: &ExplicitGraph, state: usize) -> Result<Vec<(usize, f64)>> {
        if !self.live[state] {
            return Err(match self.kind {
                PolicyKind::Forward => Error::DeadState(state),
                PolicyKind::Backward => Error::UnreachableState(state),
            });
        }
        let edges = match self.kind {
            PolicyKind::Forward => graph.out_edges(state),
            PolicyKind::Backward => graph.in_edges(state),
        };
        Ok(edges.iter().map(|&e| (e, self.probs[e])).collect())
    }
}

fn normalize_rows(graph: &ExplicitGraph, weights: &[f64], kind: PolicyKind) -> Policy {
    let mut probs = vec![0.0; graph.num_edges()];
    let mut live = vec![false; graph.num_states()];
    for s in 0..graph.num_states() {
        let row = match kind {
            PolicyKind::Forward => graph.out_edges(s),
            PolicyKind::Backward => graph.in_edges(s),
        };
        let total: f64 = row.iter().map(|&e| weights[e]).sum();
        if total > 0.0 {
            live[s] = true;
            for &e in row {
                probs[e] = weights[e] / total;
            }
        }
    }
    Policy { kind, probs, live }
}

/// π_f(s→s') ∝ F(s→s') + exploration_mass.
pub fn forward_policy(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    exploration_mass: f64,
) -> Result<Policy> {
    flow.check_len(graph)?;
    if !(exploration_mass >= 0.0 && exploration_mass.is_finite()) {
        return Err(Error::InvalidFlow(format!(
            "exploration mass {exploration_mass}"
        )));
    }
    let weights: Vec<f64> = flow.0.iter().map(|v| v + exploration_mass).collect();
    Ok(normalize_rows(graph, &weights, PolicyKind::Forward))
}

/// π_b(s→s') = F(s→s') / F_in(s').
pub fn backward_policy(graph: &ExplicitGraph, flow: &EdgeFlow) -> Result<Policy> {
    flow.check_len(graph)?;
    Ok(normalize_rows(graph, &flow.0, PolicyKind::Backward))
}

/// Overwrites every terminal edge `s -> sf` with `R(s)`.
pub fn apply_reward_constraint(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    reward: &Reward,
) -> Result<EdgeFlow> {
    flow.check_len(graph)?;
    let mut values = flow.0.clone();
    for s in graph.interior_states() {
        match graph.terminal_edge(s) {
            Some(e) => values[e] = reward.0[s],
            None if reward.0[s] > 0.0 => return Err(Error::MissingTerminalEdge(s)),
            None => {}
        }
    }
    Ok(EdgeFlow(values))
}

/// A trajectory from the source. `states` starts with `s0`; it ends with
/// `sf` unless the path was truncated at the cutoff. `actions[i]` is the move
/// taken from `states[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path<S = usize> {
    pub states: Vec<S>,
    pub actions: Vec<usize>,
    pub tau: usize,
    pub truncated: bool,
    pub log_prob: f64,
}

impl<S: Clone> Path<S> {
    /// The last non-sink state `s_τ`, if the path terminated.
    pub fn final_state(&self) -> Option<&S> {
        if self.truncated || self.tau == 0 {
            None
        } else {
            self.states.get(self.tau)
        }
    }

    /// `s_1, ..., s_τ`.
    pub fn interior(&self) -> &[S] {
        &self.states[1..=self.tau]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch<S = usize> {
    pub seed: u64,
    pub paths: Vec<Path<S>>,
}

impl<S: Clone + Display> PathBatch<S> {
    /// Mean τ; truncated paths count at their truncation length.
    pub fn mean_tau(&self) -> f64 {
        if self.paths.is_empty() {
            return 0.0;
        }
        self.paths.iter().map(|p| p.tau as f64).sum::<f64>() / self.paths.len() as f64
    }

    pub fn num_truncated(&self) -> usize {
        self.paths.iter().filter(|p| p.truncated).count()
    }

    /// CSV rows `seed,path_index,tau,truncated,states,log_prob` with states
    /// joined by `;`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record([
            "seed",
            "path_index",
            "tau",
            "truncated",
            "states",
            "log_prob",
        ])?;
        for (i, p) in self.paths.iter().enumerate() {
            let states = p
                .states
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                self.seed.to_string(),
                i.to_string(),
                p.tau.to_string(),
                p.truncated.to_string(),
                states,
                format!("{}", p.log_prob),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl PathBatch<usize> {
    /// Mean number of visits per state over the batch, counting `s_1..s_τ`.
    pub fn state_visits(&self, num_states: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_states];
        for p in &self.paths {
            for &s in p.interior() {
                v[s] += 1.0;
            }
        }
        let n = self.paths.len().max(1) as f64;
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    /// Mean number of traversals per edge over the batch.
    pub fn edge_visits(&self, num_edges: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_edges];
        for p in &self.paths {
            for &e in &p.actions {
                v[e] += 1.0;
            }
        }
        let n = self.paths.len().max(1) as f64;
        v.iter_mut().for_each(|x| *x /= n);
        v
    }
}

/// Per-path generator: stream `index` of a ChaCha8 keyed by `seed`, so each
/// path is reproducible regardless of how the batch is split across workers.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws from `(item, weight)` pairs with total weight `total > 0`.
pub(crate) fn draw<T: Copy, R: Rng>(
    rng: &mut R,
    items: impl IntoIterator<Item = (T, f64)>,
    total: f64,
) -> T {
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (item, w) in items {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(item);
        if u < acc {
            return item;
        }
    }
    last.expect("draw from an empty distribution")
}

/// Samples `n` paths by iterating the forward policy from `s0`.
///
/// A path stops on entering `sf`; a path that would take a `cutoff + 1`-th
/// interior step is marked truncated with `τ = cutoff`.
pub fn sample_paths(
    graph: &ExplicitGraph,
    policy: &Policy,
    n: usize,
    cutoff: usize,
    seed: u64,
) -> Result<PathBatch> {
    if policy.kind != PolicyKind::Forward {
        return Err(Error::InvalidConfig(
            "sampling needs a forward policy".into(),
        ));
    }
    let paths = (0..n)
        .into_par_iter()
        .map(|i| sample_one(graph, policy, cutoff, &mut path_rng(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathBatch { seed, paths })
}

fn sample_one<R: Rng>(
    graph: &ExplicitGraph,
    policy: &Policy,
    cutoff: usize,
    rng: &mut R,
) -> Result<Path> {
    let mut state = graph.source();
    let mut states = vec![state];
    let mut actions = Vec::new();
    let mut log_prob = 0.0;
    let mut tau = 0;
    loop {
        if !policy.live[state] {
            return Err(Error::DeadState(state));
        }
        let e = draw(
            rng,
            graph.out_edges(state).iter().map(|&e| (e, policy.probs[e])),
            1.0,
        );
        let next = graph.edge(e).to;
        if next != graph.sink() && tau == cutoff {
            return Ok(Path {
                states,
                actions,
                tau,
                truncated: true,
                log_prob,
            });
        }
        log_prob += policy.probs[e].ln();
        actions.push(e);
        states.push(next);
        if next == graph.sink() {
            return Ok(Path {
                states,
                actions,
                tau,
                truncated: false,
                log_prob,
            });
        }
        tau += 1;
        state = next;
    }
}

/// Probability that an unstopped rollout is still alive at each position:
/// `w_1 = 1`, `w_t = Π_{u<t} (1 - p_stop(s_u))`.
pub fn survival_weights(stop_probs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(stop_probs.len());
    let mut alive = 1.0;
    for &p in stop_probs {
        out.push(alive);
        alive *= 1.0 - p;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{chain, cycle_chain};

    /// The cycle-chain family: s0→A = f1, A→B = f2, B→C = f3 + c,
    /// C→B = c, C→sf = 1.
    fn chain_flow(f1: f64, f2: f64, f3: f64, c: f64) -> EdgeFlow {
        EdgeFlow::new(vec![f1, f2, f3 + c, c, 1.0]).unwrap()
    }

    #[test]
    fn in_out_flow_on_cycle_chain() {
        let g = cycle_chain();
        let f = chain_flow(1.0, 1.0, 1.0, 1.0);
        let fin = in_flow(&g, &f);
        let fout = out_flow(&g, &f);
        assert_eq!(fin[chain::B], 2.0);
        assert_eq!(fin[chain::S0], 0.0);
        assert_eq!(fout[chain::C], 2.0);
        assert_eq!(fout[chain::SF], 0.0);
        let interior: f64 = g.interior_states().map(|s| fout[s]).sum();
        assert_eq!(interior, 5.0);
        let zero = EdgeFlow::zeros(5);
        assert!(in_flow(&g, &zero).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_policy_rows() {
        let g = cycle_chain();
        let p = forward_policy(&g, &chain_flow(1.0, 1.0, 1.0, 1.0), 0.0).unwrap();
        assert_eq!(p.row(&g, chain::C).unwrap(), vec![(3, 0.5), (4, 0.5)]);
        assert_eq!(p.row(&g, chain::A).unwrap(), vec![(1, 1.0)]);

        let p = forward_policy(&g, &EdgeFlow::zeros(5), 0.1).unwrap();
        assert_eq!(p.row(&g, chain::C).unwrap(), vec![(3, 0.5), (4, 0.5)]);

        let p = forward_policy(&g, &EdgeFlow::zeros(5), 0.0).unwrap();
        assert_eq!(p.row(&g, chain::A), Err(Error::DeadState(chain::A)));
    }

    #[test]
    fn backward_policy_rows() {
        let g = cycle_chain();
        let p = backward_policy(&g, &chain_flow(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!(p.row(&g, chain::B).unwrap(), vec![(1, 0.5), (3, 0.5)]);
        assert_eq!(p.row(&g, chain::A).unwrap(), vec![(0, 1.0)]);
        assert_eq!(
            p.row(&g, chain::S0),
            Err(Error::UnreachableState(chain::S0))
        );
    }

    #[test]
    fn reward_constraint_overwrites_terminal_edges() {
        let g = cycle_chain();
        let f = EdgeFlow::new(vec![1.0, 1.0, 2.0, 1.0, 7.0]).unwrap();
        let r = Reward::new(vec![0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let out = apply_reward_constraint(&g, &f, &r).unwrap();
        assert_eq!(out.values(), &[1.0, 1.0, 2.0, 1.0, 1.0]);

        let r0 = Reward::new(vec![0.0; 5]).unwrap();
        assert_eq!(apply_reward_constraint(&g, &f, &r0).unwrap().get(4), 0.0);

        let bad = Reward::new(vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            apply_reward_constraint(&g, &f, &bad),
            Err(Error::MissingTerminalEdge(chain::B))
        );
    }

    #[test]
    fn deterministic_chain_path() {
        let g = ExplicitGraph::new(3, &[(0, 1), (1, 2)], 0, 2).unwrap();
        let p = forward_policy(&g, &EdgeFlow::constant(2, 1.0), 0.0).unwrap();
        let batch = sample_paths(&g, &p, 3, 10, 0).unwrap();
        for path in &batch.paths {
            assert_eq!(path.states, vec![0, 1, 2]);
            assert_eq!(path.tau, 1);
            assert!(!path.truncated);
            assert_eq!(path.log_prob, 0.0);
        }
    }

    #[test]
    fn cutoff_truncates_loops() {
        let g = cycle_chain();
        // C never stops
        let f = EdgeFlow::new(vec![1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let p = forward_policy(&g, &f, 0.0).unwrap();
        let batch = sample_paths(&g, &p, 20, 3, 1).unwrap();
        for path in &batch.paths {
            assert!(path.truncated);
            assert_eq!(path.tau, 3);
            assert_eq!(path.states, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn cycle_chain_mean_tau() {
        let g = cycle_chain();
        let p = forward_policy(&g, &chain_flow(1.0, 1.0, 1.0, 1.0), 0.0).unwrap();
        let batch = sample_paths(&g, &p, 10_000, 10_000, 7).unwrap();
        assert_eq!(batch.num_truncated(), 0);
        assert!(
            (batch.mean_tau() - 5.0).abs() < 0.25,
            "{}",
            batch.mean_tau()
        );
    }

    #[test]
    fn sampling_is_reproducible() {
        let g = cycle_chain();
        let p = forward_policy(&g, &chain_flow(1.0, 1.0, 1.0, 2.0), 0.0).unwrap();
        let a = sample_paths(&g, &p, 50, 100, 42).unwrap();
        let b = sample_paths(&g, &p, 50, 100, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_paths(&g, &p, 50, 100, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn path_csv() {
        let g = ExplicitGraph::new(3, &[(0, 1), (1, 2)], 0, 2).unwrap();
        let p = forward_policy(&g, &EdgeFlow::constant(2, 1.0), 0.0).unwrap();
        let batch = sample_paths(&g, &p, 2, 5, 9).unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "seed,path_index,tau,truncated,states,log_prob\n9,0,1,false,0;1;2,0\n9,1,1,false,0;1;2,0\n"
        );
    }

    #[test]
    fn visits() {
        let g = cycle_chain();
        let f = EdgeFlow::new(vec![1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let p = forward_policy(&g, &f, 0.0).unwrap();
        let batch = sample_paths(&g, &p, 4, 10, 0).unwrap();
        assert_eq!(batch.state_visits(5), vec![0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(batch.edge_visits(5), vec![1.0, 1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn survival() {
        assert_eq!(survival_weights(&[0.0, 0.0, 0.0]), vec![1.0, 1.0, 1.0]);
        assert_eq!(
            survival_weights(&[0.5, 0.5, 0.5, 0.5]),
            vec![1.0, 0.5, 0.25, 0.125]
        );
        assert_eq!(survival_weights(&[1.0, 0.3, 0.2]), vec![1.0, 0.0, 0.0]);
        assert!(survival_weights(&[]).is_empty());
    }

    #[test]
    fn invalid_flows_rejected() {
        assert!(EdgeFlow::new(vec![1.0, -0.1]).is_err());
        assert!(EdgeFlow::new(vec![f64::NAN]).is_err());
        assert!(Reward::new(vec![f64::INFINITY]).is_err());
    }
}

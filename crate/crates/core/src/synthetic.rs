//! Random cyclic graphs, flows and edgeflows for property tests and the
//! acceptance suite.

use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::flows::{EdgeFlow, Reward};
use crate::graphs::ExplicitGraph;

/// A graph on `num_interior` interior states with at least one directed
/// cycle. States: `0` is `s0`, `1..=n` interior, `n + 1` is `sf`.
///
/// The interior always contains the chain `1 → 2 → … → n`, state `n` has a
/// terminal edge, and at least one backward edge closes a cycle.
pub fn random_cyclic_graph<R: Rng>(
    rng: &mut R,
    num_interior: usize,
    extra_edges: usize,
) -> ExplicitGraph {
    let n = num_interior.max(2);
    let sink = n + 1;
    let mut edges: Vec<(usize, usize)> = vec![(0, 1)];
    let push = |edges: &mut Vec<(usize, usize)>, e: (usize, usize)| {
        if !edges.contains(&e) {
            edges.push(e);
        }
    };
    for s in 2..=n {
        if rng.random_bool(0.3) {
            push(&mut edges, (0, s));
        }
    }
    for s in 1..n {
        push(&mut edges, (s, s + 1));
    }
    let back_to = rng.random_range(1..n);
    let back_from = rng.random_range(back_to + 1..=n);
    push(&mut edges, (back_from, back_to));
    for _ in 0..extra_edges {
        let u = rng.random_range(1..=n);
        let v = rng.random_range(1..=n);
        if u != v {
            push(&mut edges, (u, v));
        }
    }
    for s in 1..=n {
        if s == n || rng.random_bool(0.6) {
            push(&mut edges, (s, sink));
        }
    }
    ExplicitGraph::new(n + 2, &edges, 0, sink).expect("construction keeps every state connected")
}

/// Number of edges on a shortest path to the sink, per state.
fn sink_distance(graph: &ExplicitGraph) -> Vec<usize> {
    let mut dist = vec![usize::MAX; graph.num_states()];
    let mut queue = VecDeque::from([graph.sink()]);
    dist[graph.sink()] = 0;
    while let Some(t) = queue.pop_front() {
        for &e in graph.in_edges(t) {
            let s = graph.edge(e).from;
            if dist[s] == usize::MAX {
                dist[s] = dist[t] + 1;
                queue.push_back(s);
            }
        }
    }
    dist
}

/// Interior edges of a shortest path `from → to` inside S*.
fn interior_path(graph: &ExplicitGraph, from: usize, to: usize) -> Option<Vec<usize>> {
    let mut via = vec![usize::MAX; graph.num_states()];
    let mut seen = vec![false; graph.num_states()];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(s) = queue.pop_front() {
        if s == to {
            let mut edges = Vec::new();
            let mut cur = to;
            while cur != from {
                let e = via[cur];
                edges.push(e);
                cur = graph.edge(e).from;
            }
            edges.reverse();
            return Some(edges);
        }
        for &e in graph.out_edges(s) {
            let t = graph.edge(e).to;
            if graph.is_interior(t) && !seen[t] {
                seen[t] = true;
                via[t] = e;
                queue.push_back(t);
            }
        }
    }
    None
}

/// A random flow: a positive combination of `num_paths` random `s0 → sf`
/// walks plus `num_cycles` weighted directed cycles. Weights are in
/// `[0.1, 2)`.
pub fn random_flow<R: Rng>(
    rng: &mut R,
    graph: &ExplicitGraph,
    num_paths: usize,
    num_cycles: usize,
) -> EdgeFlow {
    let dist = sink_distance(graph);
    let mut values = vec![0.0; graph.num_edges()];
    let cap = 3 * graph.num_states();
    for _ in 0..num_paths.max(1) {
        let w = rng.random_range(0.1..2.0);
        let mut s = graph.source();
        let mut steps = 0;
        while s != graph.sink() {
            let outs = graph.out_edges(s);
            let e = if steps >= cap {
                // head home along a shortest path
                *outs
                    .iter()
                    .min_by_key(|&&e| dist[graph.edge(e).to])
                    .unwrap()
            } else {
                *outs.choose(rng).unwrap()
            };
            values[e] += w;
            s = graph.edge(e).to;
            steps += 1;
        }
    }
    let interior: Vec<usize> = (0..graph.num_edges())
        .filter(|&e| graph.is_interior(graph.edge(e).from) && graph.is_interior(graph.edge(e).to))
        .collect();
    for _ in 0..num_cycles {
        let Some(&e) = interior.choose(rng) else {
            break;
        };
        let edge = graph.edge(e);
        if let Some(back) = interior_path(graph, edge.to, edge.from) {
            let w = rng.random_range(0.1..2.0);
            values[e] += w;
            for b in back {
                values[b] += w;
            }
        }
    }
    EdgeFlow::new(values).expect("nonnegative")
}

/// A strictly positive edgeflow with no matching constraint; entries in
/// `[0.1, 3)`.
pub fn random_edgeflow<R: Rng>(rng: &mut R, graph: &ExplicitGraph) -> EdgeFlow {
    EdgeFlow::new(
        (0..graph.num_edges())
            .map(|_| rng.random_range(0.1..3.0))
            .collect(),
    )
    .expect("positive")
}

/// The reward carried by the terminal edges of `flow`.
pub fn terminal_reward(graph: &ExplicitGraph, flow: &EdgeFlow) -> Reward {
    let mut r = vec![0.0; graph.num_states()];
    for s in graph.interior_states() {
        if let Some(e) = graph.terminal_edge(s) {
            r[s] = flow.get(e);
        }
    }
    Reward::new(r).expect("nonnegative")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{flow_matching_residual, is_acyclic_flow};
    use crate::flows::path_rng;

    #[test]
    fn graphs_have_cycles_and_flows_match() {
        for seed in 0..50 {
            let mut rng = path_rng(seed, 0);
            let n = rng.random_range(2..=8);
            let g = random_cyclic_graph(&mut rng, n, 4);
            assert!(g.num_states() <= 10);
            let f = random_flow(&mut rng, &g, 3, 2);
            assert!(flow_matching_residual(&g, &f) < 1e-12);
            let full = EdgeFlow::constant(g.num_edges(), 1.0);
            assert!(!is_acyclic_flow(&g, &full), "seed {seed}");
        }
    }
}

//! Directed state spaces with a distinguished source `s0` and sink `sf`.
//!
//! Explicit graphs are fully enumerated and carry per-state adjacency lists;
//! Cayley graphs of permutation groups only expose a neighbor oracle. Both
//! implement [`StateSpace`] so samplers can be written once.

mod cayley;
mod hypergrid;

pub use cayley::{
    CayleyGraph, CayleyState, DistanceFn, Perm, RewardSpec, DEFAULT_BACKGROUND_REWARD,
};
pub use hypergrid::{Hypergrid, HypergridSpec};

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// One outgoing move from a state. For explicit graphs `action` is the edge
/// id; for Cayley graphs it is the generator index, with `q` meaning the
/// terminal move.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<S> {
    pub action: usize,
    pub target: S,
}

/// Unified neighbor query over explicit and implicit state spaces.
pub trait StateSpace {
    type State: Clone + PartialEq + fmt::Debug;

    fn source(&self) -> Self::State;
    fn is_sink(&self, state: &Self::State) -> bool;
    /// All out-moves of `state` in a fixed order, terminal move included.
    fn neighbors(&self, state: &Self::State) -> Result<Vec<Neighbor<Self::State>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

/// A finite directed graph on states `0..num_states`.
///
/// Edges keep their declaration order; every per-state adjacency list is
/// sorted by edge id.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitGraph {
    num_states: usize,
    edges: Vec<Edge>,
    source: usize,
    sink: usize,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

impl ExplicitGraph {
    pub fn new(
        num_states: usize,
        edges: &[(usize, usize)],
        source: usize,
        sink: usize,
    ) -> Result<Self> {
        let check = |s: usize| {
            if s < num_states {
                Ok(())
            } else {
                Err(Error::StateOutOfRange {
                    state: s,
                    num_states,
                })
            }
        };
        check(source)?;
        check(sink)?;
        if source == sink {
            return Err(Error::SourceIsSink);
        }

        let mut seen = HashSet::with_capacity(edges.len());
        let mut out_edges = vec![Vec::new(); num_states];
        let mut in_edges = vec![Vec::new(); num_states];
        let mut list = Vec::with_capacity(edges.len());
        for (id, &(from, to)) in edges.iter().enumerate() {
            check(from)?;
            check(to)?;
            if to == source {
                return Err(Error::EdgeIntoSource { from, to });
            }
            if from == sink {
                return Err(Error::EdgeOutOfSink { from, to });
            }
            if !seen.insert((from, to)) {
                return Err(Error::DuplicateEdge { from, to });
            }
            out_edges[from].push(id);
            in_edges[to].push(id);
            list.push(Edge { from, to });
        }

        let graph = Self {
            num_states,
            edges: list,
            source,
            sink,
            out_edges,
            in_edges,
        };
        graph.check_connected()?;
        Ok(graph)
    }

    fn check_connected(&self) -> Result<()> {
        let forward = self.reach(self.source, |s| {
            self.out_edges[s].iter().map(|&e| self.edges[e].to)
        });
        let backward = self.reach(self.sink, |s| {
            self.in_edges[s].iter().map(|&e| self.edges[e].from)
        });
        match (0..self.num_states).find(|&s| !(forward[s] && backward[s])) {
            Some(s) => Err(Error::DisconnectedState(s)),
            None => Ok(()),
        }
    }

    fn reach<I, F>(&self, start: usize, next: F) -> Vec<bool>
    where
        F: Fn(usize) -> I,
        I: Iterator<Item = usize>,
    {
        let mut seen = vec![false; self.num_states];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(s) = stack.pop() {
            for t in next(s) {
                if !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        seen
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> Edge {
        self.edges[id]
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn sink(&self) -> usize {
        self.sink
    }

    pub fn out_edges(&self, state: usize) -> &[usize] {
        &self.out_edges[state]
    }

    pub fn in_edges(&self, state: usize) -> &[usize] {
        &self.in_edges[state]
    }

    /// True for `s -> sf`.
    pub fn is_terminal_edge(&self, id: usize) -> bool {
        self.edges[id].to == self.sink
    }

    /// True for `s0 -> s`.
    pub fn is_initial_edge(&self, id: usize) -> bool {
        self.edges[id].from == self.source
    }

    /// True for states in S*, i.e. neither source nor sink.
    pub fn is_interior(&self, state: usize) -> bool {
        state != self.source && state != self.sink
    }

    /// States of S* in index order.
    pub fn interior_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_states).filter(move |&s| self.is_interior(s))
    }

    /// Edge ids of every non-terminal edge, in declaration order.
    pub fn non_terminal_edges(&self) -> Vec<usize> {
        (0..self.edges.len())
            .filter(|&e| !self.is_terminal_edge(e))
            .collect()
    }

    /// The edge `state -> sf`, if any.
    pub fn terminal_edge(&self, state: usize) -> Option<usize> {
        self.out_edges[state]
            .iter()
            .copied()
            .find(|&e| self.edges[e].to == self.sink)
    }

    /// Looks up the edge `from -> to`.
    pub fn find_edge(&self, from: usize, to: usize) -> Option<usize> {
        self.out_edges
            .get(from)?
            .iter()
            .copied()
            .find(|&e| self.edges[e].to == to)
    }

    /// Writes the plain-text edge list: a `states N s0 I sf J` header, then
    /// one `from to` pair per line.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "states {} s0 {} sf {}",
            self.num_states, self.source, self.sink
        )?;
        for e in &self.edges {
            writeln!(out, "{} {}", e.from, e.to)?;
        }
        Ok(())
    }

    pub fn read_edge_list<R: BufRead>(input: R) -> Result<Self> {
        let mut header = None;
        let mut edges = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            let num = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("expected a nonnegative integer, got {s:?}"),
                })
            };
            if header.is_none() {
                match fields.as_slice() {
                    ["states", n, "s0", i, "sf", j] => header = Some((num(n)?, num(i)?, num(j)?)),
                    _ => {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: "expected header `states N s0 I sf J`".into(),
                        })
                    }
                }
                continue;
            }
            match fields.as_slice() {
                [a, b] => edges.push((num(a)?, num(b)?)),
                _ => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "expected `from to`".into(),
                    })
                }
            }
        }
        let (n, s0, sf) = header.ok_or(Error::Parse {
            line: 0,
            msg: "missing header".into(),
        })?;
        Self::new(n, &edges, s0, sf)
    }
}

impl StateSpace for ExplicitGraph {
    type State = usize;

    fn source(&self) -> usize {
        self.source
    }

    fn is_sink(&self, state: &usize) -> bool {
        *state == self.sink
    }

    fn neighbors(&self, state: &usize) -> Result<Vec<Neighbor<usize>>> {
        let s = *state;
        if s >= self.num_states {
            return Err(Error::StateOutOfRange {
                state: s,
                num_states: self.num_states,
            });
        }
        if s == self.sink {
            return Err(Error::SinkHasNoNeighbors);
        }
        Ok(self.out_edges[s]
            .iter()
            .map(|&e| Neighbor {
                action: e,
                target: self.edges[e].to,
            })
            .collect())
    }
}

/// State indices of [`cycle_chain`].
pub mod chain {
    pub const S0: usize = 0;
    pub const A: usize = 1;
    pub const B: usize = 2;
    pub const C: usize = 3;
    pub const SF: usize = 4;
}

/// The five-state graph `s0 -> A -> B <-> C -> sf`.
///
/// Edge ids: 0 `s0->A`, 1 `A->B`, 2 `B->C`, 3 `C->B`, 4 `C->sf`.
pub fn cycle_chain() -> ExplicitGraph {
    use chain::*;
    ExplicitGraph::new(5, &[(S0, A), (A, B), (B, C), (C, B), (C, SF)], S0, SF)
        .expect("cycle chain is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_chain_shape() {
        let g = cycle_chain();
        assert_eq!(g.num_states(), 5);
        assert_eq!(g.num_edges(), 5);
        assert_eq!(g.interior_states().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(g.terminal_edge(chain::C), Some(4));
        assert_eq!(g.terminal_edge(chain::B), None);
    }

    #[test]
    fn minimal_graph() {
        let g = ExplicitGraph::new(2, &[(0, 1)], 0, 1).unwrap();
        assert_eq!(g.interior_states().count(), 0);
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn construction_errors() {
        assert_eq!(
            ExplicitGraph::new(3, &[(0, 1), (1, 0), (1, 2)], 0, 2),
            Err(Error::EdgeIntoSource { from: 1, to: 0 })
        );
        assert_eq!(
            ExplicitGraph::new(3, &[(0, 1), (1, 2), (2, 1)], 0, 2),
            Err(Error::EdgeOutOfSink { from: 2, to: 1 })
        );
        assert_eq!(
            ExplicitGraph::new(3, &[(0, 1), (1, 2), (0, 1)], 0, 2),
            Err(Error::DuplicateEdge { from: 0, to: 1 })
        );
        // state 3 is reachable but cannot reach the sink
        assert_eq!(
            ExplicitGraph::new(4, &[(0, 1), (1, 2), (1, 3)], 0, 2),
            Err(Error::DisconnectedState(3))
        );
        assert!(matches!(
            ExplicitGraph::new(2, &[(0, 5)], 0, 1),
            Err(Error::StateOutOfRange { .. })
        ));
    }

    #[test]
    fn neighbors_in_edge_order() {
        let g = cycle_chain();
        let n = g.neighbors(&chain::C).unwrap();
        assert_eq!(
            n,
            vec![
                Neighbor {
                    action: 3,
                    target: chain::B
                },
                Neighbor {
                    action: 4,
                    target: chain::SF
                },
            ]
        );
        assert_eq!(g.neighbors(&chain::SF), Err(Error::SinkHasNoNeighbors));
    }

    #[test]
    fn edge_list_text_format() {
        let g = cycle_chain();
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "states 5 s0 0 sf 4\n0 1\n1 2\n2 3\n3 2\n3 4\n");
        let back = ExplicitGraph::read_edge_list(&buf[..]).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn edge_list_parse_errors() {
        let bad = "nodes 3\n0 1\n";
        assert!(matches!(
            ExplicitGraph::read_edge_list(bad.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let bad = "states 3 s0 0 sf 2\n0 1\n1 x\n";
        assert!(matches!(
            ExplicitGraph::read_edge_list(bad.as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}

use crate::error::{Error, Result};

use super::ExplicitGraph;

/// `D`-dimensional grid of side `W` with a chosen entry cell `a` (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HypergridSpec {
    pub dim: usize,
    pub width: usize,
    pub initial: Vec<usize>,
}

impl HypergridSpec {
    /// Grid entered at the corner `(1, ..., 1)`.
    pub fn corner(dim: usize, width: usize) -> Self {
        Self {
            dim,
            width,
            initial: vec![1; dim],
        }
    }
}

/// Cells `[1, W]^D` with unit moves in both directions along every axis, a
/// single initial edge `s0 -> a` and a terminal edge from every cell.
///
/// State 0 is `s0`, cells occupy `1..=W^D` in mixed-radix order with the
/// first axis varying fastest, and the last state is `sf`.
#[derive(Debug, Clone)]
pub struct Hypergrid {
    spec: HypergridSpec,
    num_cells: usize,
    graph: ExplicitGraph,
}

impl Hypergrid {
    pub fn new(spec: HypergridSpec) -> Result<Self> {
        if spec.dim == 0 || spec.width == 0 {
            return Err(Error::InvalidInitialCell(format!(
                "need D >= 1 and W >= 1, got D={} W={}",
                spec.dim, spec.width
            )));
        }
        if spec.initial.len() != spec.dim || spec.initial.iter().any(|&c| c == 0 || c > spec.width)
        {
            return Err(Error::InvalidInitialCell(format!(
                "initial cell {:?} is not in [1,{}]^{}",
                spec.initial, spec.width, spec.dim
            )));
        }
        let num_cells = spec
            .width
            .checked_pow(spec.dim as u32)
            .ok_or_else(|| Error::InvalidInitialCell("grid too large".into()))?;
        let source = 0;
        let sink = num_cells + 1;

        let mut edges = Vec::with_capacity(1 + num_cells * (2 * spec.dim + 1));
        let mut grid = Self {
            spec,
            num_cells,
            graph: ExplicitGraph::new(2, &[(0, 1)], 0, 1)?,
        };
        edges.push((source, grid.state_of(&grid.spec.initial)));
        let mut coords = vec![0; grid.spec.dim];
        for cell in 1..=num_cells {
            grid.fill_coords(cell, &mut coords);
            for axis in 0..grid.spec.dim {
                if coords[axis] > 1 {
                    coords[axis] -= 1;
                    edges.push((cell, grid.state_of(&coords)));
                    coords[axis] += 1;
                }
                if coords[axis] < grid.spec.width {
                    coords[axis] += 1;
                    edges.push((cell, grid.state_of(&coords)));
                    coords[axis] -= 1;
                }
            }
            edges.push((cell, sink));
        }
        grid.graph = ExplicitGraph::new(num_cells + 2, &edges, source, sink)?;
        Ok(grid)
    }

    pub fn graph(&self) -> &ExplicitGraph {
        &self.graph
    }

    pub fn spec(&self) -> &HypergridSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    /// State index of a 1-based cell.
    pub fn state_of(&self, coords: &[usize]) -> usize {
        let mut idx = 0;
        for &c in coords.iter().rev() {
            idx = idx * self.spec.width + (c - 1);
        }
        idx + 1
    }

    /// 1-based coordinates of an interior state.
    pub fn coords(&self, state: usize) -> Vec<usize> {
        let mut out = vec![0; self.spec.dim];
        self.fill_coords(state, &mut out);
        out
    }

    fn fill_coords(&self, state: usize, out: &mut [usize]) {
        let mut rem = state - 1;
        for c in out.iter_mut() {
            *c = rem % self.spec.width + 1;
            rem /= self.spec.width;
        }
    }

    pub fn initial_state(&self) -> usize {
        self.state_of(&self.spec.initial)
    }

    /// Manhattan distance between two interior states.
    pub fn grid_distance(&self, a: usize, b: usize) -> usize {
        self.coords(a)
            .iter()
            .zip(self.coords(b))
            .map(|(&x, y)| x.abs_diff(y))
            .sum()
    }

    /// Reward with `peak` on the `2^D` corner cells and `background`
    /// everywhere else in S*; zero on `s0` and `sf`.
    pub fn corner_reward(&self, peak: f64, background: f64) -> Vec<f64> {
        let w = self.spec.width;
        let mut r = vec![0.0; self.graph.num_states()];
        for s in 1..=self.num_cells {
            let corner = self.coords(s).iter().all(|&c| c == 1 || c == w);
            r[s] = if corner { peak } else { background };
        }
        r
    }
}

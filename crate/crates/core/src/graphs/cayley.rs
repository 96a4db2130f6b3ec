use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::{ExplicitGraph, Neighbor, StateSpace};

/// A permutation of `{0, ..., p-1}` stored as its image vector
/// `(σ(0), ..., σ(p-1))`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Perm(Vec<usize>);

impl Perm {
    pub fn new(images: Vec<usize>) -> Result<Self> {
        let p = images.len();
        let mut seen = vec![false; p];
        for &x in &images {
            if x >= p || seen[x] {
                return Err(Error::InvalidPermutation(format!(
                    "{images:?} is not a bijection on 0..{p}"
                )));
            }
            seen[x] = true;
        }
        Ok(Self(images))
    }

    pub fn identity(p: usize) -> Self {
        Self((0..p).collect())
    }

    /// The transposition swapping `i` and `j`.
    pub fn transposition(p: usize, i: usize, j: usize) -> Result<Self> {
        if i >= p || j >= p || i == j {
            return Err(Error::InvalidPermutation(format!(
                "transposition ({i} {j}) in degree {p}"
            )));
        }
        let mut v: Vec<usize> = (0..p).collect();
        v.swap(i, j);
        Ok(Self(v))
    }

    /// The p-cycle `i -> i+1 mod p`.
    pub fn cycle(p: usize) -> Self {
        Self((0..p).map(|i| (i + 1) % p).collect())
    }

    pub fn degree(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn image(&self, i: usize) -> usize {
        self.0[i]
    }

    /// Right multiplication `g -> gσ`, i.e. `(gσ)(i) = g(σ(i))`.
    pub fn mul(&self, sigma: &Perm) -> Perm {
        Perm(sigma.0.iter().map(|&i| self.0[i]).collect())
    }

    pub fn inverse(&self) -> Perm {
        let mut inv = vec![0; self.0.len()];
        for (i, &x) in self.0.iter().enumerate() {
            inv[x] = i;
        }
        Perm(inv)
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &x)| i == x)
    }

    /// Number of positions where the two image vectors differ.
    pub fn hamming(&self, other: &Perm) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    /// Every permutation of degree `p` in lexicographic order.
    pub fn all(p: usize) -> Vec<Perm> {
        let mut cur: Vec<usize> = (0..p).collect();
        let mut out = vec![Perm(cur.clone())];
        loop {
            let Some(i) = (1..p).rev().find(|&i| cur[i - 1] < cur[i]) else {
                return out;
            };
            let j = (i..p).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
            cur.swap(i - 1, j);
            cur[i..].reverse();
            out.push(Perm(cur.clone()));
        }
    }

    /// Lexicographic rank, the inverse of indexing into [`Perm::all`].
    pub fn rank(&self) -> usize {
        let p = self.0.len();
        let mut rank = 0;
        for i in 0..p {
            let smaller = self.0[i + 1..].iter().filter(|&&x| x < self.0[i]).count();
            rank = rank * (p - i) + smaller;
        }
        rank
    }
}

impl fmt::Display for Perm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "-")?;
            }
            write!(f, "{x}")?;
        }
        Ok(())
    }
}

impl FromStr for Perm {
    type Err = Error;

    /// Parses `0-2-1` or `0 2 1` or `0,2,1`.
    fn from_str(s: &str) -> Result<Self> {
        let images = s
            .split(|c: char| c == '-' || c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::InvalidPermutation(format!("bad entry {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Perm::new(images)
    }
}

/// Metric on permutations used by the distance reward.
#[derive(Clone)]
pub struct DistanceFn(Arc<dyn Fn(&Perm, &Perm) -> f64 + Send + Sync>);

impl DistanceFn {
    pub fn new(f: impl Fn(&Perm, &Perm) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn hamming() -> Self {
        Self::new(|a, b| a.hamming(b) as f64)
    }

    pub fn eval(&self, a: &Perm, b: &Perm) -> f64 {
        (self.0)(a, b)
    }
}

impl fmt::Debug for DistanceFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DistanceFn(..)")
    }
}

#[derive(Debug, Clone)]
pub enum RewardSpec {
    /// `scale` on permutations fixing every point of `0..prefix`, zero elsewhere.
    Fixed { prefix: usize, scale: f64 },
    /// Distance from the permutation to the nearest element of `targets`.
    Distance {
        targets: Vec<Perm>,
        distance: DistanceFn,
    },
}

pub const DEFAULT_BACKGROUND_REWARD: f64 = 0.001;

/// Cayley graph of the symmetric group on `p` points with edges `g -> gσ_i`.
///
/// Never enumerated; callers only get neighbor and reward oracles. The
/// source fans out uniformly over the whole group.
#[derive(Debug, Clone)]
pub struct CayleyGraph {
    degree: usize,
    generators: Vec<Perm>,
    inverses: Vec<Perm>,
    reward: RewardSpec,
    background: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CayleyState {
    Source,
    Element(Perm),
    Sink,
}

impl fmt::Display for CayleyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CayleyState::Source => f.write_str("s0"),
            CayleyState::Sink => f.write_str("sf"),
            CayleyState::Element(g) => write!(f, "{g}"),
        }
    }
}

impl CayleyGraph {
    pub fn new(degree: usize, generators: Vec<Perm>, reward: RewardSpec) -> Result<Self> {
        if generators.is_empty() {
            return Err(Error::InvalidPermutation("generator set is empty".into()));
        }
        for g in &generators {
            if g.degree() != degree {
                return Err(Error::InvalidPermutation(format!(
                    "generator {g} has degree {} instead of {degree}",
                    g.degree()
                )));
            }
        }
        match &reward {
            RewardSpec::Fixed { prefix, scale } => {
                if *prefix > degree || !(*scale >= 0.0) {
                    return Err(Error::InvalidPermutation(format!(
                        "fixed-point reward needs prefix <= {degree} and scale >= 0"
                    )));
                }
            }
            RewardSpec::Distance { targets, .. } => {
                if targets.is_empty() || targets.iter().any(|t| t.degree() != degree) {
                    return Err(Error::InvalidPermutation(
                        "distance targets must be nonempty and of matching degree".into(),
                    ));
                }
            }
        }
        let inverses = generators.iter().map(Perm::inverse).collect();
        Ok(Self {
            degree,
            generators,
            inverses,
            reward,
            background: DEFAULT_BACKGROUND_REWARD,
        })
    }

    /// Generators `(0 1)`, the p-cycle and its inverse.
    pub fn transposition_and_cycles(degree: usize, reward: RewardSpec) -> Result<Self> {
        let c = Perm::cycle(degree);
        let gens = vec![Perm::transposition(degree, 0, 1)?, c.clone(), c.inverse()];
        Self::new(degree, gens, reward)
    }

    /// Adjacent transpositions `(i, i+1)`.
    pub fn bubble_sort(degree: usize, reward: RewardSpec) -> Result<Self> {
        let gens = (0..degree.saturating_sub(1))
            .map(|i| Perm::transposition(degree, i, i + 1))
            .collect::<Result<Vec<_>>>()?;
        Self::new(degree, gens, reward)
    }

    pub fn with_background(mut self, background: f64) -> Self {
        self.background = background;
        self
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn generators(&self) -> &[Perm] {
        &self.generators
    }

    pub fn num_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn background(&self) -> f64 {
        self.background
    }

    pub fn reward_spec(&self) -> &RewardSpec {
        &self.reward
    }

    /// Successors `gσ_1, ..., gσ_q`.
    pub fn successors(&self, g: &Perm) -> Vec<Perm> {
        self.generators.iter().map(|s| g.mul(s)).collect()
    }

    /// Predecessors `gσ_i^{-1}`: the state reaching `g` through generator `i`.
    pub fn predecessors(&self, g: &Perm) -> Vec<Perm> {
        self.inverses.iter().map(|s| g.mul(s)).collect()
    }

    /// Generators united with their inverses, deduplicated, in first-seen order.
    pub fn symmetric_moves(&self) -> Vec<Perm> {
        let mut out: Vec<Perm> = Vec::new();
        for s in self.generators.iter().chain(&self.inverses) {
            if !out.contains(s) {
                out.push(s.clone());
            }
        }
        out
    }

    /// Reward without the background term.
    pub fn base_reward(&self, g: &Perm) -> f64 {
        match &self.reward {
            RewardSpec::Fixed { prefix, scale } => {
                if (0..*prefix).all(|i| g.image(i) == i) {
                    *scale
                } else {
                    0.0
                }
            }
            RewardSpec::Distance { targets, distance } => targets
                .iter()
                .map(|t| distance.eval(g, t))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Reward including the background term.
    pub fn reward(&self, g: &Perm) -> f64 {
        self.base_reward(g) + self.background
    }

    pub fn in_reward_set(&self, g: &Perm) -> bool {
        self.base_reward(g) > 0.0
    }

    /// Enumerates the graph for small degrees: state 0 is `s0`, states
    /// `1..=p!` are the permutations in lexicographic order, the last is `sf`.
    /// Edge order per element: generators, then terminal; `s0` edges first.
    pub fn enumerate(&self) -> Result<(ExplicitGraph, Vec<Perm>)> {
        if self.degree > 8 {
            return Err(Error::InvalidConfig(format!(
                "refusing to enumerate S_{}",
                self.degree
            )));
        }
        let elems = Perm::all(self.degree);
        let n = elems.len();
        let sink = n + 1;
        let mut edges: Vec<(usize, usize)> = (1..=n).map(|s| (0, s)).collect();
        for (i, g) in elems.iter().enumerate() {
            for h in self.successors(g) {
                edges.push((i + 1, h.rank() + 1));
            }
            edges.push((i + 1, sink));
        }
        Ok((ExplicitGraph::new(n + 2, &edges, 0, sink)?, elems))
    }
}

impl StateSpace for CayleyGraph {
    type State = CayleyState;

    fn source(&self) -> CayleyState {
        CayleyState::Source
    }

    fn is_sink(&self, state: &CayleyState) -> bool {
        matches!(state, CayleyState::Sink)
    }

    fn neighbors(&self, state: &CayleyState) -> Result<Vec<Neighbor<CayleyState>>> {
        match state {
            CayleyState::Source => Err(Error::ImplicitSource),
            CayleyState::Sink => Err(Error::SinkHasNoNeighbors),
            CayleyState::Element(g) => {
                let mut out: Vec<_> = self
                    .successors(g)
                    .into_iter()
                    .enumerate()
                    .map(|(i, h)| Neighbor {
                        action: i,
                        target: CayleyState::Element(h),
                    })
                    .collect();
                out.push(Neighbor {
                    action: self.generators.len(),
                    target: CayleyState::Sink,
                });
                Ok(out)
            }
        }
    }
}

//! Gradient-descent training: Adam, log-space tabular flows on explicit
//! graphs, MLP flows on Cayley graphs, and the training history.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{metrics, sampler_flow, MetricsRecord, DEFAULT_LAMBDA, METRICS_HEADER};
use crate::error::{Error, Result};
use crate::flows::{
    apply_reward_constraint, draw, forward_policy, path_rng, sample_paths, survival_weights,
    EdgeFlow, Path, Reward,
};
use crate::graphs::{CayleyGraph, ExplicitGraph, Perm, RewardSpec};
use crate::losses::{
    db_log2_params, db_stable_params, fm_loss, fm_term, regularizer_l1, tb_log2, BackwardParams,
    LossFamily, LossSpec, LossValue,
};
use crate::nnflow::{
    encode_perm, mlp_backward_into, mlp_forward, mlp_init, ForwardTrace, MlpParams,
};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Returns the parameter update for `grad` and advances the moments.
    pub fn step(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        Ok(grad
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                -self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps)
            })
            .collect())
    }
}

/// Mixes a root seed with a component tag and an index (splitmix64).
pub fn derive_seed(root: u64, tag: u64, index: u64) -> u64 {
    let mut z =
        root ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(skip)]
    pub loss: LossSpec,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub cutoff: usize,
    pub self_training: bool,
    pub self_training_delta: f64,
    pub exploration_mass: f64,
    pub lr: f64,
    pub seed: u64,
    /// Fresh paths per history point.
    pub eval_paths: usize,
    /// Power-method budget factor for the sampler flow.
    pub lambda: f64,
    /// Width used for the sampler-flow budget; defaults to the number of states.
    pub sampler_width: Option<usize>,
    /// Stop after the first epoch whose mean loss falls below this value.
    pub target_loss: Option<f64>,
    /// MLP hidden width (Cayley).
    pub width: usize,
    /// MLP linear-layer count (Cayley).
    pub depth: usize,
    /// Fixed flow `F(s0 → g)` per state (Cayley); defaults to the mean reward.
    pub source_inflow: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::default(),
            epochs: 50,
            steps_per_epoch: 200,
            batch_size: 64,
            cutoff: 80,
            self_training: false,
            self_training_delta: 0.001,
            exploration_mass: 0.0,
            lr: 0.01,
            seed: 0,
            eval_paths: 256,
            lambda: DEFAULT_LAMBDA,
            sampler_width: None,
            target_loss: None,
            width: 32,
            depth: 3,
            source_inflow: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("cutoff", self.cutoff),
            ("eval_paths", self.eval_paths),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !(self.self_training_delta >= 0.0 && self.exploration_mass >= 0.0) {
            return Err(Error::InvalidConfig("deltas must be nonnegative".into()));
        }
        if !(self.lr > 0.0 && self.lambda > 0.0) {
            return Err(Error::InvalidConfig(
                "lr and lambda must be positive".into(),
            ));
        }
        if matches!(self.source_inflow, Some(x) if !(x > 0.0)) {
            return Err(Error::InvalidConfig(
                "source_inflow must be positive".into(),
            ));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub metrics: MetricsRecord,
    pub mean_reward: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }

    /// The metrics columns followed by `mean_reward,mean_length`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header: Vec<&str> = METRICS_HEADER.to_vec();
        header.extend(["mean_reward", "mean_length"]);
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.step.to_string()];
            rec.extend(row.metrics.fields().iter().map(|v| v.to_string()));
            rec.push(row.mean_reward.to_string());
            rec.push(row.mean_length.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Log-space flows on non-terminal edges; terminal edges are always `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularParams {
    edges: Vec<usize>,
    pub log_flow: Vec<f64>,
    pinned: Vec<f64>,
    pub backward: Option<BackwardParams>,
}

impl TabularParams {
    /// Every non-terminal edge starts at flow 1; π_b starts uniform.
    pub fn new(graph: &ExplicitGraph, reward: &Reward, with_backward: bool) -> Result<Self> {
        let pinned = apply_reward_constraint(graph, &EdgeFlow::zeros(graph.num_edges()), reward)?
            .into_values();
        let edges = graph.non_terminal_edges();
        Ok(Self {
            log_flow: vec![0.0; edges.len()],
            edges,
            pinned,
            backward: with_backward.then(|| BackwardParams::uniform(graph)),
        })
    }

    /// Starts from a given flow, which must be positive on non-terminal edges.
    pub fn from_flow(
        graph: &ExplicitGraph,
        flow: &EdgeFlow,
        reward: &Reward,
        with_backward: bool,
    ) -> Result<Self> {
        let mut params = Self::new(graph, reward, with_backward)?;
        for (k, &e) in params.edges.iter().enumerate() {
            if !(flow.get(e) > 0.0) {
                return Err(Error::InvalidFlow(format!(
                    "edge {e} must be positive for log-space training"
                )));
            }
            params.log_flow[k] = flow.get(e).ln();
        }
        Ok(params)
    }

    pub fn flow(&self, graph: &ExplicitGraph) -> EdgeFlow {
        let mut values = self.pinned.clone();
        debug_assert_eq!(values.len(), graph.num_edges());
        for (k, &e) in self.edges.iter().enumerate() {
            values[e] = self.log_flow[k].exp();
        }
        EdgeFlow::new(values).expect("exp is positive")
    }

    /// Log-flows, then backward logits of the non-terminal edges if present.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.log_flow.clone();
        if let Some(bp) = &self.backward {
            out.extend(self.edges.iter().map(|&e| bp.logits[e]));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.edges.len() * if self.backward.is_some() { 2 } else { 1 }
    }

    pub fn with_flat(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                expected: self.num_params(),
                got: theta.len(),
            });
        }
        let mut out = self.clone();
        let k = self.edges.len();
        out.log_flow.copy_from_slice(&theta[..k]);
        if let Some(bp) = &mut out.backward {
            for (j, &e) in self.edges.iter().enumerate() {
                bp.logits[e] = theta[k + j];
            }
        }
        Ok(out)
    }

    fn apply(&mut self, delta: &[f64]) {
        let k = self.edges.len();
        for (x, d) in self.log_flow.iter_mut().zip(delta) {
            *x += d;
        }
        if let Some(bp) = &mut self.backward {
            for (j, &e) in self.edges.iter().enumerate() {
                bp.logits[e] += delta[k + j];
            }
        }
    }
}

/// Training distribution for one step: per-state weights for FM losses,
/// per-edge weights for DB, complete paths for TB.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingWeights {
    pub nu: Vec<f64>,
    pub edge: Vec<f64>,
    pub paths: Vec<Path>,
}

impl TrainingWeights {
    pub fn from_paths(graph: &ExplicitGraph, paths: Vec<Path>) -> Self {
        let batch = crate::flows::PathBatch { seed: 0, paths };
        Self {
            nu: batch.state_visits(graph.num_states()),
            edge: batch.edge_visits(graph.num_edges()),
            paths: batch.paths.into_iter().filter(|p| !p.truncated).collect(),
        }
    }
}

/// Loss plus `reg_alpha`·L1 at `params`, with the gradient in the
/// [`TabularParams::flat`] layout.
pub fn tabular_loss(
    graph: &ExplicitGraph,
    reward: &Reward,
    spec: &LossSpec,
    params: &TabularParams,
    weights: &TrainingWeights,
) -> Result<LossValue> {
    let flow = params.flow(graph);
    let m = graph.num_edges();
    let backward = || {
        params.backward.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("{} needs backward-policy parameters", spec.name()))
        })
    };
    let mut raw = match spec.family {
        LossFamily::FmLog2 | LossFamily::FmFdiv { .. } | LossFamily::FmStable => {
            let mut lv = fm_loss(graph, &flow, &weights.nu, fm_term(spec)?.as_ref())?;
            lv.gradient.resize(2 * m, 0.0);
            lv
        }
        LossFamily::DbLog2 => db_log2_params(graph, &flow, backward()?, &weights.edge)?,
        LossFamily::DbStable => {
            db_stable_params(graph, &flow, backward()?, &spec.stable, &weights.edge)?
        }
        LossFamily::TbLog2 => tb_log2(graph, &flow, backward()?, reward, &weights.paths)?,
    };
    if spec.reg_alpha > 0.0 {
        let mut reg = regularizer_l1(graph, &flow);
        reg.gradient.resize(2 * m, 0.0);
        raw.add_scaled(spec.reg_alpha, &reg);
    }
    let mut gradient: Vec<f64> = params
        .edges
        .iter()
        .map(|&e| raw.gradient[e] * flow.get(e))
        .collect();
    if params.backward.is_some() {
        gradient.extend(params.edges.iter().map(|&e| raw.gradient[m + e]));
    }
    Ok(LossValue {
        value: raw.value,
        gradient,
    })
}

fn self_training_density(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    delta: f64,
    lambda: f64,
    width: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let shifted = EdgeFlow::new(flow.values().iter().map(|v| v + delta).collect())?;
    let bar = sampler_flow(graph, &shifted, lambda, width)?;
    let mut nu = vec![0.0; graph.num_states()];
    for s in graph.interior_states() {
        nu[s] = bar.visits[s];
    }
    let z: f64 = nu.iter().sum();
    let mut edge = vec![0.0; graph.num_edges()];
    if z > 0.0 {
        nu.iter_mut().for_each(|x| *x /= z);
        for e in graph.non_terminal_edges() {
            edge[e] = bar.flow.get(e) / z;
        }
    }
    Ok((nu, edge))
}

/// ν ∝ the sampler visits of `F + δ` on S*, normalized to sum 1.
pub fn self_training_update(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    delta: f64,
    lambda: f64,
    width: usize,
) -> Result<Vec<f64>> {
    Ok(self_training_density(graph, flow, delta, lambda, width)?.0)
}

/// Monte-Carlo (mean reward, mean length) from fresh paths without
/// exploration. Truncated paths count reward 0 and length `cutoff`.
pub fn evaluate_history_point(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    reward: &Reward,
    n_paths: usize,
    cutoff: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let policy = forward_policy(graph, flow, 0.0)?;
    let batch = sample_paths(graph, &policy, n_paths.max(1), cutoff, seed)?;
    let n = batch.paths.len() as f64;
    let mean_reward = batch
        .paths
        .iter()
        .map(|p| p.final_state().map_or(0.0, |&s| reward.get(s)))
        .sum::<f64>()
        / n;
    Ok((mean_reward, batch.mean_tau()))
}

/// Trains a tabular flow on an explicit graph.
pub fn train_tabular(
    graph: &ExplicitGraph,
    reward: &Reward,
    config: &TrainConfig,
) -> Result<(TabularParams, TrainHistory)> {
    let params = TabularParams::new(graph, reward, config.loss.family.uses_backward_policy())?;
    train_tabular_from(graph, reward, config, params)
}

/// As [`train_tabular`], from given initial parameters.
pub fn train_tabular_from(
    graph: &ExplicitGraph,
    reward: &Reward,
    config: &TrainConfig,
    mut params: TabularParams,
) -> Result<(TabularParams, TrainHistory)> {
    config.validate()?;
    if !(reward.total(graph) > 0.0) {
        return Err(Error::ZeroReward);
    }
    let width = config.sampler_width.unwrap_or(graph.num_states());
    let mut adam = AdamState::new(params.num_params(), config.lr);
    let mut history = TrainHistory::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let fixed = if config.self_training {
            let flow = params.flow(graph);
            Some(self_training_density(
                graph,
                &flow,
                config.self_training_delta,
                config.lambda,
                width,
            )?)
        } else {
            None
        };
        let mut loss_sum = 0.0;
        for _ in 0..config.steps_per_epoch {
            let needs_paths = fixed.is_none() || config.loss.family == LossFamily::TbLog2;
            let mut weights = TrainingWeights::default();
            if needs_paths {
                let flow = params.flow(graph);
                let policy = forward_policy(graph, &flow, config.exploration_mass)?;
                let batch = sample_paths(
                    graph,
                    &policy,
                    config.batch_size,
                    config.cutoff,
                    derive_seed(config.seed, 1, step as u64),
                )?;
                weights = TrainingWeights::from_paths(graph, batch.paths);
            }
            if let Some((nu, edge)) = &fixed {
                weights.nu = nu.clone();
                weights.edge = edge.clone();
            }
            let lv = tabular_loss(graph, reward, &config.loss, &params, &weights)?;
            let delta = adam.step(&lv.gradient)?;
            params.apply(&delta);
            loss_sum += lv.value;
            step += 1;
        }
        let flow = params.flow(graph);
        let mut record = metrics(graph, &flow, reward, config.lambda, width);
        record.loss = loss_sum / config.steps_per_epoch as f64;
        let (mean_reward, mean_length) = evaluate_history_point(
            graph,
            &flow,
            reward,
            config.eval_paths,
            config.cutoff,
            derive_seed(config.seed, 2, epoch as u64),
        )?;
        history.rows.push(HistoryRow {
            step,
            metrics: record,
            mean_reward,
            mean_length,
        });
        if matches!(config.target_loss, Some(t) if record.loss < t) {
            break;
        }
    }
    Ok((params, history))
}

/// `F(s0 → g)` equal to the mean reward over the group, so the fixed
/// initial flow carries `R(S*)` in total.
pub fn default_source_inflow(space: &CayleyGraph, seed: u64) -> f64 {
    let p = space.degree();
    match space.reward_spec() {
        RewardSpec::Fixed { prefix, scale } => {
            // fraction of permutations fixing 0..k is (p-k)!/p!
            let frac: f64 = (0..(*prefix).min(p))
                .map(|i| 1.0 / (p - i) as f64)
                .product();
            scale * frac + space.background()
        }
        RewardSpec::Distance { .. } => {
            let mut rng = path_rng(seed, u64::MAX);
            let n = 4096;
            (0..n)
                .map(|_| space.reward(&random_perm(p, &mut rng)))
                .sum::<f64>()
                / n as f64
        }
    }
}

fn random_perm<R: Rng>(p: usize, rng: &mut R) -> Perm {
    let mut v: Vec<usize> = (0..p).collect();
    v.shuffle(rng);
    Perm::new(v).expect("shuffle of the identity")
}

/// An MLP flow on a Cayley graph. Generator edges come from the network;
/// the terminal edge is pinned to `R(g)` and `F(s0 → g)` is a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct CayleyModel {
    pub mlp: MlpParams,
    pub source_inflow: f64,
}

impl CayleyModel {
    pub fn new(space: &CayleyGraph, config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            mlp: mlp_init(
                config.seed,
                space.degree(),
                config.width,
                config.depth,
                space.num_generators() + 1,
            )?,
            source_inflow: config
                .source_inflow
                .unwrap_or_else(|| default_source_inflow(space, config.seed)),
        })
    }

    fn eval(&self, g: &Perm) -> Result<(Vec<f64>, ForwardTrace)> {
        mlp_forward(&self.mlp, &encode_perm(g))
    }

    /// Generator flows at `g`.
    pub fn generator_flows(&self, space: &CayleyGraph, g: &Perm) -> Result<Vec<f64>> {
        let (mut out, _) = self.eval(g)?;
        out.truncate(space.num_generators());
        Ok(out)
    }

    /// The model as an edgeflow on the enumerated graph (degree ≤ 8).
    pub fn explicit_flow(&self, space: &CayleyGraph) -> Result<(ExplicitGraph, EdgeFlow, Reward)> {
        let (graph, elems) = space.enumerate()?;
        let mut values = vec![0.0; graph.num_edges()];
        let mut reward = vec![0.0; graph.num_states()];
        let mut e = 0;
        for _ in &elems {
            values[e] = self.source_inflow;
            e += 1;
        }
        for (i, g) in elems.iter().enumerate() {
            for f in self.generator_flows(space, g)? {
                values[e] = f;
                e += 1;
            }
            reward[i + 1] = space.reward(g);
            values[e] = reward[i + 1];
            e += 1;
        }
        Ok((graph, EdgeFlow::new(values)?, Reward::new(reward)?))
    }
}

struct Rollout {
    value: f64,
    grad: Vec<f64>,
    mean_reward: f64,
    mean_length: f64,
    start_out_flow: f64,
}

/// An unstopped walk `s_1..s_T` from a uniform start, moving along
/// generators with probability ∝ their flow, plus the stop probability
/// `R(s)/F_out(s)` at every position.
fn cayley_walk<R: Rng>(
    space: &CayleyGraph,
    model: &CayleyModel,
    cutoff: usize,
    rng: &mut R,
) -> Result<(Vec<Perm>, Vec<f64>)> {
    let q = space.num_generators();
    let mut g = random_perm(space.degree(), rng);
    let mut states = Vec::with_capacity(cutoff);
    let mut stop = Vec::with_capacity(cutoff);
    for _ in 0..cutoff {
        let (out, _) = model.eval(&g)?;
        let r = space.reward(&g);
        let gen_total: f64 = out[..q].iter().sum();
        stop.push(r / (gen_total + r));
        let i = draw(rng, out[..q].iter().copied().enumerate(), gen_total);
        let next = g.mul(&space.generators()[i]);
        states.push(std::mem::replace(&mut g, next));
    }
    Ok((states, stop))
}

/// Σ_t w_t ℓ(F_in(s_t), F_out(s_t)) (+ the L1 term on generator flows)
/// with the weights held constant, and its parameter gradient.
fn cayley_path_loss(
    space: &CayleyGraph,
    model: &CayleyModel,
    spec: &LossSpec,
    states: &[Perm],
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let q = space.num_generators();
    let term = fm_term(spec)?;
    let mut grad = vec![0.0; model.mlp.num_params()];
    let mut value = 0.0;
    for (t, (g, &w)) in states.iter().zip(weights).enumerate() {
        let (out, trace) = model.eval(g)?;
        let gen_total: f64 = out[..q].iter().sum();
        let fout = gen_total + space.reward(g);
        let mut fin = model.source_inflow;
        let mut pred_traces = Vec::with_capacity(q);
        for (i, pred) in space.predecessors(g).iter().enumerate() {
            let (po, pt) = model.eval(pred)?;
            fin += po[i];
            pred_traces.push(pt);
        }
        let (v, d_in, d_out) =
            term(fin, fout).ok_or(Error::NonpositiveFlowAtVisitedState(t + 1))?;
        value += w * (v + spec.reg_alpha * gen_total);
        let mut up = vec![w * (d_out + spec.reg_alpha); q + 1];
        up[q] = 0.0;
        mlp_backward_into(&model.mlp, &trace, &up, &mut grad)?;
        for (i, pt) in pred_traces.iter().enumerate() {
            let mut up = vec![0.0; q + 1];
            up[i] = w * d_in;
            mlp_backward_into(&model.mlp, pt, &up, &mut grad)?;
        }
    }
    Ok((value, grad))
}

fn cayley_rollout<R: Rng>(
    space: &CayleyGraph,
    model: &CayleyModel,
    spec: &LossSpec,
    cutoff: usize,
    rng: &mut R,
) -> Result<Rollout> {
    let (states, stop) = cayley_walk(space, model, cutoff, rng)?;
    let weights = survival_weights(&stop);
    let (value, grad) = cayley_path_loss(space, model, spec, &states, &weights)?;
    let (mut mean_reward, mut mean_length) = (0.0, 0.0);
    for (t, (g, (&w, &p))) in states.iter().zip(weights.iter().zip(&stop)).enumerate() {
        mean_reward += w * p * space.reward(g);
        mean_length += w * p * (t + 1) as f64;
    }
    let alive_at_end = weights
        .last()
        .map_or(1.0, |w| w * (1.0 - stop.last().unwrap()));
    mean_length += alive_at_end * cutoff as f64;
    let start_reward = space.reward(&states[0]);
    let start_out_flow = start_reward / stop[0];
    Ok(Rollout {
        value,
        grad,
        mean_reward,
        mean_length,
        start_out_flow,
    })
}

/// Trains an MLP flow on a Cayley graph from unstopped rollouts weighted by
/// survival probabilities. Only flow-matching families are supported.
pub fn train_cayley(
    space: &CayleyGraph,
    config: &TrainConfig,
) -> Result<(CayleyModel, TrainHistory)> {
    config.validate()?;
    let _ = fm_term(&config.loss)?;
    let mut model = CayleyModel::new(space, config)?;
    let mut adam = AdamState::new(model.mlp.num_params(), config.lr);
    let mut history = TrainHistory::default();
    let group_size: f64 = (1..=space.degree()).map(|k| k as f64).product();
    let b = config.batch_size as f64;
    let mut step = 0;
    for _epoch in 0..config.epochs {
        let (mut loss_sum, mut reward_sum, mut length_sum, mut out_sum) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..config.steps_per_epoch {
            let seed = derive_seed(config.seed, 3, step as u64);
            let rollouts = (0..config.batch_size)
                .into_par_iter()
                .map(|i| {
                    cayley_rollout(
                        space,
                        &model,
                        &config.loss,
                        config.cutoff,
                        &mut path_rng(seed, i as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; model.mlp.num_params()];
            let mut value = 0.0;
            for r in &rollouts {
                value += r.value / b;
                for (g, x) in grad.iter_mut().zip(&r.grad) {
                    *g += x / b;
                }
                reward_sum += r.mean_reward / b;
                length_sum += r.mean_length / b;
                out_sum += r.start_out_flow / b;
            }
            let delta = adam.step(&grad)?;
            for (p, d) in model.mlp.as_mut_slice().iter_mut().zip(&delta) {
                *p += d;
            }
            loss_sum += value;
            step += 1;
        }
        let n = config.steps_per_epoch as f64;
        let record = if space.degree() <= 8 {
            let (graph, flow, reward) = model.explicit_flow(space)?;
            let mut m = metrics(
                &graph,
                &flow,
                &reward,
                config.lambda,
                config.sampler_width.unwrap_or(config.cutoff),
            );
            m.loss = loss_sum / n;
            m
        } else {
            MetricsRecord {
                loss: loss_sum / n,
                tv_error: f64::NAN,
                e_f: f64::NAN,
                e_r: f64::NAN,
                e_i: f64::NAN,
                expected_tau: f64::NAN,
                // uniform start states give an unbiased estimate of the mean F_out
                total_mass: group_size * (out_sum / n + model.source_inflow),
            }
        };
        history.rows.push(HistoryRow {
            step,
            metrics: record,
            mean_reward: reward_sum / n,
            mean_length: length_sum / n,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::exact_sampling;
    use crate::graphs::{chain, cycle_chain, Hypergrid, HypergridSpec};
    use crate::losses::{grad_check, FKind, StableParams};

    fn chain_reward() -> Reward {
        Reward::new(vec![0.0, 0.0, 0.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn adam_first_step_and_errors() {
        let mut a = AdamState::new(1, 0.01);
        let d = a.step(&[1.0]).unwrap();
        assert!((d[0] + 0.01).abs() < 1e-9);
        let mut a = AdamState::new(3, 0.01);
        assert_eq!(a.step(&[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(
            a.step(&[0.0, f64::NAN, 0.0]),
            Err(Error::NonFiniteGradient(1))
        );
        assert!(a.v.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut a = AdamState::new(2, 0.05);
        let mut x = [3.0, -2.0];
        for _ in 0..2000 {
            let d = a.step(&[2.0 * x[0], 2.0 * x[1]]).unwrap();
            x[0] += d[0];
            x[1] += d[1];
        }
        assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2, "{x:?}");
    }

    #[test]
    fn tabular_init_pins_reward() {
        let g = cycle_chain();
        let p = TabularParams::new(&g, &chain_reward(), false).unwrap();
        assert_eq!(p.flow(&g).values(), &[1.0, 1.0, 1.0, 1.0, 1.0]);
        let bad = Reward::new(vec![0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(
            TabularParams::new(&g, &bad, false),
            Err(Error::MissingTerminalEdge(chain::A))
        );
    }

    #[test]
    fn self_training_collapses_to_visits() {
        // exact acyclic R-flow θ = (1,1,1,0), δ = 0: every interior state visited once
        let g = cycle_chain();
        let f = EdgeFlow::new(vec![1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let nu = self_training_update(&g, &f, 0.0, 10.0, 5).unwrap();
        let third = 1.0 / 3.0;
        for (s, expected) in [(chain::A, third), (chain::B, third), (chain::C, third)] {
            assert!((nu[s] - expected).abs() < 1e-12);
        }
        assert_eq!(nu[chain::S0], 0.0);
    }

    #[test]
    fn self_training_on_zero_interior_flow() {
        // only δ drives the chain; oracle: geometric visits on the uniform-exploration chain
        let g = cycle_chain();
        let f = EdgeFlow::new(vec![0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let delta = 0.1;
        let nu = self_training_update(&g, &f, delta, 1e4, 5).unwrap();
        // B→C w.p. 1; C→B w.p. δ/(δ + 1 + δ); visits: A 1, B = C = 1/(1 - p_back)
        let p_back = delta / (2.0 * delta + 1.0);
        let v = [1.0, 1.0 / (1.0 - p_back), 1.0 / (1.0 - p_back)];
        let z: f64 = v.iter().sum();
        assert!((nu[chain::A] - v[0] / z).abs() < 1e-9);
        assert!((nu[chain::C] - v[2] / z).abs() < 1e-9);
    }

    #[test]
    fn self_training_leaves_unreachable_region_empty() {
        let g = ExplicitGraph::new(5, &[(0, 1), (0, 2), (1, 4), (2, 3), (3, 4)], 0, 4).unwrap();
        let f = EdgeFlow::new(vec![1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let nu = self_training_update(&g, &f, 0.0, 10.0, 5).unwrap();
        assert_eq!((nu[1], nu[2], nu[3]), (1.0, 0.0, 0.0));
    }

    #[test]
    fn history_point_on_acyclic_chain_flow() {
        let g = cycle_chain();
        let f = EdgeFlow::new(vec![1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let (r, l) = evaluate_history_point(&g, &f, &chain_reward(), 50, 80, 3).unwrap();
        assert_eq!((r, l), (1.0, 3.0));
        assert_eq!(
            evaluate_history_point(&g, &f, &chain_reward(), 1, 80, 9).unwrap(),
            evaluate_history_point(&g, &f, &chain_reward(), 1, 80, 9).unwrap()
        );
    }

    #[test]
    fn history_point_for_trapped_policy() {
        let g = cycle_chain();
        let f = EdgeFlow::new(vec![1.0, 1.0, 1.0, 1e9, 1e-300]).unwrap();
        let (r, l) = evaluate_history_point(&g, &f, &chain_reward(), 20, 80, 1).unwrap();
        assert_eq!((r, l), (0.0, 80.0));
    }

    fn weights_for(g: &ExplicitGraph) -> TrainingWeights {
        let paths = vec![
            Path {
                states: vec![0, 1, 2, 3, 4],
                actions: vec![0, 1, 2, 4],
                tau: 3,
                truncated: false,
                log_prob: 0.0,
            },
            Path {
                states: vec![0, 1, 2, 3, 2, 3, 4],
                actions: vec![0, 1, 2, 3, 2, 4],
                tau: 5,
                truncated: false,
                log_prob: 0.0,
            },
        ];
        TrainingWeights::from_paths(g, paths)
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let g = cycle_chain();
        let r = chain_reward();
        let w = weights_for(&g);
        let specs = [
            LossSpec::new(LossFamily::FmLog2),
            LossSpec::new(LossFamily::FmFdiv {
                f_kind: FKind::Chi2,
            }),
            LossSpec::new(LossFamily::FmStable).with_reg(0.1),
            LossSpec::new(LossFamily::FmStable).with_stable(StableParams::simplified()),
            LossSpec::new(LossFamily::DbLog2),
            LossSpec::new(LossFamily::DbStable),
            LossSpec::new(LossFamily::TbLog2),
        ];
        for spec in specs {
            let base = TabularParams::new(&g, &r, spec.family.uses_backward_policy()).unwrap();
            let theta: Vec<f64> = (0..base.num_params())
                .map(|i| 0.3 * ((i * 7 % 5) as f64 - 2.0))
                .collect();
            let f = |t: &[f64]| tabular_loss(&g, &r, &spec, &base.with_flat(t)?, &w);
            let check = grad_check(f, &theta, 1e-5).unwrap();
            assert!(check.max_rel_error < 1e-5, "{}: {check:?}", spec.name());
            assert!(check.kinks.is_empty());
        }
    }

    #[test]
    fn stable_regularized_training_kills_the_cycle() {
        let g = cycle_chain();
        let config = TrainConfig {
            loss: LossSpec::new(LossFamily::FmStable).with_reg(0.01),
            epochs: 10,
            batch_size: 16,
            seed: 5,
            ..TrainConfig::default()
        };
        let (params, hist) = train_tabular(&g, &chain_reward(), &config).unwrap();
        let f = params.flow(&g);
        assert_eq!(f.get(4), 1.0);
        assert!(f.get(3) < 0.5, "{:?}", f.values());
        let steps: Vec<usize> = hist.rows.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let g = cycle_chain();
        let config = TrainConfig {
            loss: LossSpec::new(LossFamily::DbLog2),
            epochs: 2,
            steps_per_epoch: 20,
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let (a, ha) = train_tabular(&g, &chain_reward(), &config).unwrap();
        let (b, hb) = train_tabular(&g, &chain_reward(), &config).unwrap();
        assert_eq!(a, b);
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        ha.write_csv(&mut ca).unwrap();
        hb.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert!(text.starts_with(
            "step,loss,tv_error,E_F,E_R,E_I,expected_tau,total_mass,mean_reward,mean_length\n"
        ));
    }

    #[test]
    fn self_training_fits_a_small_hypergrid() {
        let grid = Hypergrid::new(HypergridSpec::corner(2, 3)).unwrap();
        let g = grid.graph();
        let r = Reward::new(grid.corner_reward(1.0, 0.1)).unwrap();
        let config = TrainConfig {
            loss: LossSpec::new(LossFamily::FmStable).with_stable(StableParams::simplified()),
            epochs: 15,
            self_training: true,
            seed: 2,
            ..TrainConfig::default()
        };
        let (params, hist) = train_tabular(g, &r, &config).unwrap();
        let exact = exact_sampling(g, &params.flow(g)).unwrap();
        let tv = crate::analysis::tv_distance(g, &exact.distribution, &r.normalized(g).unwrap());
        assert!(tv < 0.05, "tv {tv}, history {:?}", hist.last());
    }

    #[test]
    fn cayley_inflow_defaults_to_mean_reward() {
        let space = CayleyGraph::transposition_and_cycles(
            5,
            RewardSpec::Fixed {
                prefix: 1,
                scale: 5.0,
            },
        )
        .unwrap();
        let x = default_source_inflow(&space, 0);
        assert!((x - (5.0 / 5.0 + 0.001)).abs() < 1e-12);
        let mean: f64 = Perm::all(5).iter().map(|g| space.reward(g)).sum::<f64>() / 120.0;
        assert!((x - mean).abs() < 1e-12);
    }

    #[test]
    fn cayley_training_runs_and_is_reproducible() {
        let gens = vec![Perm::transposition(4, 0, 1).unwrap(), Perm::cycle(4)];
        let space = CayleyGraph::new(
            4,
            gens,
            RewardSpec::Fixed {
                prefix: 1,
                scale: 4.0,
            },
        )
        .unwrap();
        let config = TrainConfig {
            epochs: 2,
            steps_per_epoch: 5,
            batch_size: 8,
            cutoff: 10,
            width: 8,
            ..TrainConfig::default()
        };
        let (a, ha) = train_cayley(&space, &config).unwrap();
        let (b, _) = train_cayley(&space, &config).unwrap();
        assert_eq!(a, b);
        let row = ha.last().unwrap();
        assert!(row.metrics.loss.is_finite() && row.mean_length <= 10.0);
        assert!(row.metrics.tv_error.is_finite());
        let db = TrainConfig {
            loss: LossSpec::new(LossFamily::DbLog2),
            ..config
        };
        assert!(matches!(
            train_cayley(&space, &db),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn cayley_loss_gradient_matches_finite_differences() {
        let gens = vec![Perm::transposition(4, 0, 1).unwrap(), Perm::cycle(4)];
        let space = CayleyGraph::new(
            4,
            gens,
            RewardSpec::Fixed {
                prefix: 1,
                scale: 4.0,
            },
        )
        .unwrap();
        let config = TrainConfig {
            width: 6,
            ..TrainConfig::default()
        };
        let model = CayleyModel::new(&space, &config).unwrap();
        let spec = LossSpec::new(LossFamily::FmStable).with_stable(StableParams::simplified());
        let (states, stop) = cayley_walk(&space, &model, 6, &mut path_rng(1, 0)).unwrap();
        let weights = survival_weights(&stop);
        for spec in [
            spec,
            LossSpec::new(LossFamily::FmStable).with_reg(0.1),
            LossSpec::new(LossFamily::FmLog2),
        ] {
            let f = |theta: &[f64]| {
                let mut m = model.clone();
                m.mlp.as_mut_slice().copy_from_slice(theta);
                let (value, gradient) = cayley_path_loss(&space, &m, &spec, &states, &weights)?;
                Ok(LossValue { value, gradient })
            };
            let check = grad_check(f, model.mlp.as_slice(), 1e-5).unwrap();
            assert!(check.max_rel_error < 1e-5, "{}: {check:?}", spec.name());
        }
    }
}

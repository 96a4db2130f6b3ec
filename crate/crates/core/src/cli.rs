//! Configuration-driven experiment runner behind the `cycleflow` binary.
//!
//! An experiment is a TOML file with a `[task]` table, an optional `[train]`
//! table (the fields of [`TrainConfig`]), one or more `[[loss]]` tables and
//! an optional `[mh]` table for the Metropolis-Hastings baseline.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::analysis::{decompose_zero_flow, directional_derivative, extract_cycles};
use crate::baselines::{mh_run, stationarity, MhConfig};
use crate::error::{Error, Result};
use crate::flows::{EdgeFlow, Reward};
use crate::graphs::{
    cycle_chain, CayleyGraph, DistanceFn, ExplicitGraph, Hypergrid, HypergridSpec, Perm, RewardSpec,
};
use crate::losses::{
    backward_measure, db_log2, db_stable, fm_loss, fm_term, regularizer_l1, BackwardParams,
    LossFamily, LossSpec,
};
use crate::optim::{
    derive_seed, train_cayley, train_tabular, HistoryRow, TrainConfig, TrainHistory,
};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "CYCLEFLOW_THREADS";

/// Step used for the finite-difference probe.
pub const PROBE_STEP: f64 = 1e-5;
/// Derivatives below `-PROBE_TOL` are reported as sign violations.
pub const PROBE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Hypergrid {
        dim: usize,
        width: usize,
        /// Entry cell, 1-based; defaults to `(1, ..., 1)`.
        initial: Option<Vec<usize>>,
        #[serde(default = "default_peak")]
        peak: f64,
        #[serde(default = "default_grid_background")]
        background: f64,
    },
    Cayley {
        degree: usize,
        #[serde(default)]
        generators: GeneratorSet,
        /// `R1`: `scale` on permutations fixing the first `prefix` points.
        #[serde(default = "default_prefix")]
        prefix: usize,
        #[serde(default = "default_scale")]
        scale: f64,
        /// `R2` instead of `R1`: Hamming distance to the nearest target.
        distance_targets: Option<Vec<Vec<usize>>>,
        #[serde(default = "default_cayley_background")]
        background: f64,
    },
    CustomGraph {
        /// Path to an edge list (relative to the config file), or the
        /// string `cycle_chain`.
        graph: String,
        /// Reward per state; its length must equal the number of states.
        reward: Vec<f64>,
        /// Optional flow file used by `probe` instead of the all-ones start.
        initial_flow: Option<String>,
    },
}

fn default_peak() -> f64 {
    2.0
}
fn default_grid_background() -> f64 {
    0.01
}
fn default_prefix() -> usize {
    1
}
fn default_scale() -> f64 {
    5.0
}
fn default_cayley_background() -> f64 {
    crate::graphs::DEFAULT_BACKGROUND_REWARD
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSet {
    /// `(0 1)`, the p-cycle and its inverse.
    #[default]
    TranspositionAndCycles,
    /// `(0 1)` and the p-cycle.
    TranspositionAndCycle,
    /// Adjacent transpositions.
    BubbleSort,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(rename = "loss", default)]
    pub losses: Vec<LossSpec>,
    /// Also run the MH baseline in `run` (Cayley tasks only).
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub mh: MhConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Root seed; every component seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Directory of the config file, for resolving relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Parse {
            line: e
                .span()
                .map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut config = Self::parse(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if config.output_dir.is_relative() {
            config.output_dir = config.base_dir.join(&config.output_dir);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one [[loss]] table is required".into(),
            ));
        }
        let mut names: Vec<String> = self.losses.iter().map(LossSpec::name).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(format!("loss {} listed twice", w[0])));
        }
        for loss in &self.losses {
            self.train_config(loss).validate()?;
        }
        if let TaskConfig::Cayley { .. } = self.task {
            if let Some(loss) = self.losses.iter().find(|l| !fm_family(l)) {
                return Err(Error::InvalidConfig(format!(
                    "{} is not supported on Cayley tasks",
                    loss.name()
                )));
            }
        } else if self.baseline {
            return Err(Error::InvalidConfig(
                "the MH baseline needs a Cayley task".into(),
            ));
        }
        if self.baseline {
            self.mh_config().validate()?;
        }
        Ok(())
    }

    /// Training settings for one loss, seeded from the root seed.
    pub fn train_config(&self, loss: &LossSpec) -> TrainConfig {
        TrainConfig {
            loss: *loss,
            seed: derive_seed(self.seed, 10, 0),
            ..self.train.clone()
        }
    }

    pub fn mh_config(&self) -> MhConfig {
        MhConfig {
            seed: derive_seed(self.seed, 11, 0),
            ..self.mh.clone()
        }
    }

    fn resolve(&self, path: &str) -> PathBuf {
        self.base_dir.join(path)
    }
}

fn fm_family(loss: &LossSpec) -> bool {
    matches!(
        loss.family,
        LossFamily::FmLog2 | LossFamily::FmFdiv { .. } | LossFamily::FmStable
    )
}

/// A task with its state space materialized.
pub enum Task {
    Explicit {
        graph: ExplicitGraph,
        reward: Reward,
        initial_flow: Option<EdgeFlow>,
    },
    Cayley(CayleyGraph),
}

impl Task {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        match &config.task {
            TaskConfig::Hypergrid {
                dim,
                width,
                initial,
                peak,
                background,
            } => {
                let spec = HypergridSpec {
                    dim: *dim,
                    width: *width,
                    initial: initial.clone().unwrap_or_else(|| vec![1; *dim]),
                };
                let grid = Hypergrid::new(spec)?;
                let reward = Reward::new(grid.corner_reward(*peak, *background))?;
                Ok(Task::Explicit {
                    graph: grid.graph().clone(),
                    reward,
                    initial_flow: None,
                })
            }
            TaskConfig::Cayley {
                degree,
                generators,
                prefix,
                scale,
                distance_targets,
                background,
            } => {
                let p = *degree;
                let reward = match distance_targets {
                    Some(targets) => RewardSpec::Distance {
                        targets: targets
                            .iter()
                            .map(|t| Perm::new(t.clone()))
                            .collect::<Result<_>>()?,
                        distance: DistanceFn::hamming(),
                    },
                    None => RewardSpec::Fixed {
                        prefix: *prefix,
                        scale: *scale,
                    },
                };
                let space = match generators {
                    GeneratorSet::TranspositionAndCycles => {
                        CayleyGraph::transposition_and_cycles(p, reward)?
                    }
                    GeneratorSet::TranspositionAndCycle => CayleyGraph::new(
                        p,
                        vec![Perm::transposition(p, 0, 1)?, Perm::cycle(p)],
                        reward,
                    )?,
                    GeneratorSet::BubbleSort => CayleyGraph::bubble_sort(p, reward)?,
                };
                Ok(Task::Cayley(space.with_background(*background)))
            }
            TaskConfig::CustomGraph {
                graph,
                reward,
                initial_flow,
            } => {
                let graph = if graph == "cycle_chain" {
                    cycle_chain()
                } else {
                    ExplicitGraph::read_edge_list(BufReader::new(File::open(
                        config.resolve(graph),
                    )?))?
                };
                if reward.len() != graph.num_states() {
                    return Err(Error::LengthMismatch {
                        expected: graph.num_states(),
                        got: reward.len(),
                    });
                }
                let initial_flow = match initial_flow {
                    Some(path) => Some(read_flow_file(
                        &graph,
                        BufReader::new(File::open(config.resolve(path))?),
                    )?),
                    None => None,
                };
                Ok(Task::Explicit {
                    graph,
                    reward: Reward::new(reward.clone())?,
                    initial_flow,
                })
            }
        }
    }
}

/// Reads one nonnegative value per line in edge-id order; blank lines and
/// lines starting with `#` are skipped.
pub fn read_flow_file<R: BufRead>(graph: &ExplicitGraph, input: R) -> Result<EdgeFlow> {
    let mut values = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v = t.parse::<f64>().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("expected a number, got {t:?}"),
        })?;
        values.push(v);
    }
    if values.len() != graph.num_edges() {
        return Err(Error::LengthMismatch {
            expected: graph.num_edges(),
            got: values.len(),
        });
    }
    EdgeFlow::new(values)
}

/// One finished training (or baseline) run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub name: String,
    pub history: TrainHistory,
}

/// Trains every configured loss (in parallel) and the optional baseline,
/// then writes the CSV histories, `summary.csv` and the two charts.
pub fn run(config: &ExperimentConfig) -> Result<Vec<RunOutput>> {
    let task = Task::build(config)?;
    fs::create_dir_all(&config.output_dir)?;
    let mut outputs = config
        .losses
        .par_iter()
        .map(|loss| {
            let train = config.train_config(loss);
            let history = match &task {
                Task::Explicit { graph, reward, .. } => train_tabular(graph, reward, &train)?.1,
                Task::Cayley(space) => train_cayley(space, &train)?.1,
            };
            let out = RunOutput {
                name: loss.name(),
                history,
            };
            write_history(&config.output_dir, &out)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    if config.baseline {
        if let Task::Cayley(space) = &task {
            let mh = mh_run(space, &config.mh_config())?;
            let out = RunOutput {
                name: "mh".into(),
                history: mh.history,
            };
            write_history(&config.output_dir, &out)?;
            outputs.push(out);
        }
    }
    write_summary(&config.output_dir.join("summary.csv"), &outputs)?;
    let reward_series = series(&outputs, |r| r.mean_reward);
    let length_series = series(&outputs, |r| r.mean_length);
    fs::write(
        config.output_dir.join("reward.svg"),
        line_chart_svg("Average reward", "mean reward", &reward_series),
    )?;
    fs::write(
        config.output_dir.join("length.svg"),
        line_chart_svg("Average path length", "mean length", &length_series),
    )?;
    Ok(outputs)
}

fn write_history(dir: &Path, out: &RunOutput) -> Result<()> {
    let file = File::create(dir.join(format!("history_{}.csv", out.name)))?;
    out.history.write_csv(BufWriter::new(file))
}

/// Final history row of every run, prefixed by the run name.
pub fn write_summary(path: &Path, outputs: &[RunOutput]) -> Result<()> {
    let mut buf = Vec::new();
    for (i, out) in outputs.iter().enumerate() {
        let single = TrainHistory {
            rows: out.history.last().into_iter().copied().collect(),
        };
        let mut csv = Vec::new();
        single.write_csv(&mut csv)?;
        let text = String::from_utf8(csv).expect("csv output is utf-8");
        for (j, line) in text.lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    writeln!(buf, "run,{line}")?;
                }
            } else {
                writeln!(buf, "{},{line}", out.name)?;
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

type Series = (String, Vec<(f64, f64)>);

fn series(outputs: &[RunOutput], value: impl Fn(&HistoryRow) -> f64) -> Vec<Series> {
    outputs
        .iter()
        .map(|o| {
            (
                o.name.clone(),
                o.history
                    .rows
                    .iter()
                    .map(|r| (r.step as f64, value(r)))
                    .collect(),
            )
        })
        .collect()
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// A static line chart: one polyline per series, axes with min/max ticks and
/// a legend. Non-finite points break the line.
pub fn line_chart_svg(title: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let finite = series
        .iter()
        .flat_map(|(_, pts)| pts.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        left + pw / 2.0,
        escape(title)
    ));
    s.push_str(&format!(
        "<polyline points=\"{left},{top} {left},{} {},{}\" fill=\"none\" stroke=\"black\"/>\n",
        top + ph,
        left + pw,
        top + ph
    ));
    let label = |x: f64, y: f64, anchor: &str, text: &str| {
        format!("<text x=\"{x:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{text}</text>\n")
    };
    s.push_str(&label(left, top + ph + 16.0, "middle", &fmt_tick(x0)));
    s.push_str(&label(left + pw, top + ph + 16.0, "middle", &fmt_tick(x1)));
    s.push_str(&label(left + pw / 2.0, top + ph + 36.0, "middle", "step"));
    s.push_str(&label(left - 6.0, top + ph + 4.0, "end", &fmt_tick(y0)));
    s.push_str(&label(left - 6.0, top + 4.0, "end", &fmt_tick(y1)));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    ));

    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |segment: &mut Vec<String>, s: &mut String| {
            if !segment.is_empty() {
                s.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                    segment.join(" ")
                ));
                segment.clear();
            }
        };
        for &(x, y) in pts {
            if x.is_finite() && y.is_finite() {
                segment.push(format!("{:.2},{:.2}", px(x), py(y)));
            } else {
                flush(&mut segment, &mut s);
            }
        }
        flush(&mut segment, &mut s);
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        s.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            lx + 20.0
        ));
        s.push_str(&label(lx + 26.0, ly + 4.0, "start", &escape(name)));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Directional derivative of one loss along one extracted cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEntry {
    pub loss: String,
    pub cycle: usize,
    /// `None` for losses that are not functions of edgeflows (TB).
    pub derivative: Option<f64>,
}

impl ProbeEntry {
    pub fn is_violation(&self) -> bool {
        matches!(self.derivative, Some(d) if d < -PROBE_TOL)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// State sequences of the cycles probed, as unit 0-flows.
    pub cycles: Vec<Vec<usize>>,
    pub entries: Vec<ProbeEntry>,
}

pub type EdgeflowLoss<'a> = Box<dyn Fn(&[EdgeFlow]) -> Result<f64> + 'a>;

/// The loss as a function of its edgeflow arguments: `[F]` for FM losses,
/// `[F^f, F^b]` for DB losses. Training weights are uniform. `None` for TB.
pub fn edgeflow_loss<'a>(
    graph: &'a ExplicitGraph,
    spec: &LossSpec,
) -> Result<Option<EdgeflowLoss<'a>>> {
    spec.validate()?;
    let spec = *spec;
    let nu: Vec<f64> = (0..graph.num_states())
        .map(|s| if graph.is_interior(s) { 1.0 } else { 0.0 })
        .collect();
    let weights = vec![1.0; graph.num_edges()];
    let reg = move |f: &EdgeFlow| spec.reg_alpha * regularizer_l1(graph, f).value;
    Ok(match spec.family {
        LossFamily::TbLog2 => None,
        LossFamily::DbLog2 => Some(Box::new(move |fam: &[EdgeFlow]| {
            Ok(db_log2(graph, &fam[0], &fam[1], &weights)?.value + reg(&fam[0]))
        })),
        LossFamily::DbStable => Some(Box::new(move |fam: &[EdgeFlow]| {
            Ok(db_stable(graph, &fam[0], &fam[1], &spec.stable, &weights)?.value + reg(&fam[0]))
        })),
        _ => {
            let term = fm_term(&spec)?;
            Some(Box::new(move |fam: &[EdgeFlow]| {
                Ok(fm_loss(graph, &fam[0], &nu, term.as_ref())?.value + reg(&fam[0]))
            }))
        }
    })
}

/// The argument family of `spec` at `flow`: the flow itself, plus for DB the
/// backward measure of the policy `π_b(s→s') = F(s→s') / F_in(s')`.
pub fn loss_family_at(graph: &ExplicitGraph, spec: &LossSpec, flow: &EdgeFlow) -> Vec<EdgeFlow> {
    if matches!(spec.family, LossFamily::DbLog2 | LossFamily::DbStable) {
        let pb = BackwardParams::from_flow(flow).probs(graph);
        vec![flow.clone(), backward_measure(graph, flow, &pb)]
    } else {
        vec![flow.clone()]
    }
}

/// Derivatives of every loss along the unit indicator of each cycle greedily
/// extracted from `flow`.
pub fn probe_flow(
    graph: &ExplicitGraph,
    flow: &EdgeFlow,
    losses: &[LossSpec],
    h: f64,
) -> Result<ProbeReport> {
    let cycles = extract_cycles(graph, flow).cycles;
    let mut entries = Vec::new();
    for spec in losses {
        let loss = edgeflow_loss(graph, spec)?;
        let family = loss_family_at(graph, spec, flow);
        for (k, cycle) in cycles.iter().enumerate() {
            let mut unit = cycle.clone();
            unit.weight = 1.0;
            let derivative = match &loss {
                Some(l) => Some(directional_derivative(
                    graph,
                    l,
                    &family,
                    &unit.as_flow(graph.num_edges()),
                    h,
                )?),
                None => None,
            };
            entries.push(ProbeEntry {
                loss: spec.name(),
                cycle: k,
                derivative,
            });
        }
    }
    Ok(ProbeReport {
        cycles: cycles.into_iter().map(|c| c.states).collect(),
        entries,
    })
}

/// Runs [`probe_flow`] on the task's initial flow and formats the report.
pub fn probe(config: &ExperimentConfig) -> Result<String> {
    let Task::Explicit {
        graph,
        reward,
        initial_flow,
    } = Task::build(config)?
    else {
        return Err(Error::InvalidConfig(
            "probe needs an explicit-graph task".into(),
        ));
    };
    let flow = match initial_flow {
        Some(f) => f,
        None => crate::optim::TabularParams::new(&graph, &reward, false)?.flow(&graph),
    };
    let report = probe_flow(&graph, &flow, &config.losses, PROBE_STEP)?;
    Ok(format_probe(&report, &config.losses))
}

pub fn format_probe(report: &ProbeReport, losses: &[LossSpec]) -> String {
    if report.cycles.is_empty() {
        return "no 0-subflows found\n".into();
    }
    let mut out = String::new();
    for (k, states) in report.cycles.iter().enumerate() {
        let names: Vec<String> = states
            .iter()
            .chain(states.first())
            .map(usize::to_string)
            .collect();
        out.push_str(&format!("cycle {k}: {}\n", names.join(" -> ")));
    }
    for spec in losses {
        let name = spec.name();
        let rows: Vec<&ProbeEntry> = report.entries.iter().filter(|e| e.loss == name).collect();
        if rows.iter().all(|e| e.derivative.is_none()) {
            out.push_str(&format!("{name}: skipped (not a function of edgeflows)\n"));
            continue;
        }
        for e in &rows {
            out.push_str(&format!(
                "{name} cycle {}: {:+.6e}\n",
                e.cycle,
                e.derivative.unwrap_or(f64::NAN)
            ));
        }
        let verdict = if rows.iter().any(|e| e.is_violation()) {
            "UNSTABLE"
        } else {
            "STABLE"
        };
        out.push_str(&format!("{name}: {verdict}\n"));
    }
    out
}

/// Cycle extraction on a flow read from disk; returns the report text.
pub fn decompose(edge_list: &Path, flow_file: &Path) -> Result<String> {
    let graph = ExplicitGraph::read_edge_list(BufReader::new(File::open(edge_list)?))?;
    let flow = read_flow_file(&graph, BufReader::new(File::open(flow_file)?))?;
    let d = decompose_zero_flow(&graph, &flow)?;
    let mut out = String::new();
    for (k, c) in d.cycles.iter().enumerate() {
        let names: Vec<String> = c
            .states
            .iter()
            .chain(c.states.first())
            .map(usize::to_string)
            .collect();
        out.push_str(&format!(
            "# cycle {k} weight {}: {}\n",
            c.weight,
            names.join(" -> ")
        ));
    }
    out.push_str("edge,from,to,flow,zero_part,minimal\n");
    for (e, edge) in graph.edges().iter().enumerate() {
        out.push_str(&format!(
            "{e},{},{},{},{},{}\n",
            edge.from,
            edge.to,
            flow.get(e),
            d.zero_part.get(e),
            d.minimal.get(e)
        ));
    }
    Ok(out)
}

/// The MH baseline alone; writes `history_mh.csv` and returns a summary.
pub fn mh(config: &ExperimentConfig) -> Result<String> {
    let Task::Cayley(space) = Task::build(config)? else {
        return Err(Error::InvalidConfig("mh needs a Cayley task".into()));
    };
    let mh_config = config.mh_config();
    let result = mh_run(&space, &mh_config)?;
    fs::create_dir_all(&config.output_dir)?;
    let out = RunOutput {
        name: "mh".into(),
        history: result.history.clone(),
    };
    write_history(&config.output_dir, &out)?;
    let mut text = format!(
        "acceptance_rate {}\nmean_reward {}\nmean_length {}\n",
        result.acceptance_rate, result.mean_reward, result.mean_length
    );
    if space.degree() <= 8 && !mh_config.restart_on_reward {
        let rep = stationarity(&space, &result.samples, space.background(), 20)?;
        text.push_str(&format!(
            "max_z {}\nstates_outside_3sigma {}\n",
            rep.max_z(),
            rep.num_outside(3.0)
        ));
    }
    Ok(text)
}

/// Builds the global thread pool, honoring [`THREADS_ENV`].
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::InvalidConfig(format!("{THREADS_ENV}={value:?} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::StableParams;

    const CHAIN: &str = r#"
        [task]
        kind = "custom_graph"
        graph = "cycle_chain"
        reward = [0, 0, 0, 1, 0]

        [train]
        epochs = 2
        steps_per_epoch = 10
        batch_size = 8
        cutoff = 20
        eval_paths = 16

        [[loss]]
        family = "fm_log2"

        [[loss]]
        family = "fm_stable"
    "#;

    #[test]
    fn parses_and_validates() {
        let c = ExperimentConfig::parse(CHAIN).unwrap();
        assert_eq!(c.losses.len(), 2);
        assert_eq!(c.train.epochs, 2);
        assert!(matches!(
            ExperimentConfig::parse("[[loss]]\nfamily = \"fm_log2\"\n"),
            Err(Error::Parse { .. })
        ));
        let no_loss = CHAIN.split("[[loss]]").next().unwrap();
        assert!(matches!(
            ExperimentConfig::parse(no_loss),
            Err(Error::InvalidConfig(_))
        ));
        let dup = format!("{CHAIN}\n[[loss]]\nfamily = \"fm_log2\"\n");
        assert!(ExperimentConfig::parse(&dup).is_err());
    }

    #[test]
    fn stable_parameters_in_config() {
        let text = CHAIN.replace(
            "family = \"fm_stable\"",
            "family = \"fm_stable\"\nstable = { simplified = true }",
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.losses[1].stable, StableParams::simplified());
        assert_eq!(c.losses[1].name(), "fm_stable_sq");
    }

    #[test]
    fn cayley_rejects_edge_losses() {
        let text = r#"
            [task]
            kind = "cayley"
            degree = 4
            [[loss]]
            family = "db_log2"
        "#;
        assert!(matches!(
            ExperimentConfig::parse(text),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn probe_on_cycle_chain() {
        let c = ExperimentConfig::parse(CHAIN).unwrap();
        let text = probe(&c).unwrap();
        assert!(text.contains("fm_log2: UNSTABLE"), "{text}");
        assert!(text.contains("fm_stable: STABLE"), "{text}");
    }

    #[test]
    fn probe_on_acyclic_graph() {
        let g = ExplicitGraph::new(4, &[(0, 1), (1, 2), (1, 3), (2, 3)], 0, 3).unwrap();
        let f = EdgeFlow::new(vec![2.0, 1.0, 1.0, 1.0]).unwrap();
        let report = probe_flow(&g, &f, &[LossSpec::new(LossFamily::FmLog2)], PROBE_STEP).unwrap();
        assert_eq!(format_probe(&report, &[]), "no 0-subflows found\n");
    }

    #[test]
    fn chart_skips_non_finite_points() {
        let svg = line_chart_svg(
            "t",
            "y",
            &[(
                "a".into(),
                vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 2.0), (3.0, 3.0)],
            )],
        );
        assert_eq!(svg.matches("stroke-width=\"1.5\"").count(), 2);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn flow_file_round_trip() {
        let g = cycle_chain();
        let f = read_flow_file(&g, "# comment\n1\n1\n\n2\n1\n1\n".as_bytes()).unwrap();
        assert_eq!(f.values(), &[1.0, 1.0, 2.0, 1.0, 1.0]);
        assert!(read_flow_file(&g, "1\n".as_bytes()).is_err());
        assert!(matches!(
            read_flow_file(&g, "x\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ArchEncoding, SearchConfig, SearchMode};
use crate::constrainer::{manipulate, ConstraintSpec, GradientBundle};
use crate::diffengine::{sgd_step, Adam, Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::hwmodel::{cost_hw, evaluate, expand_indices, CostConfig, HwConfig, LayerShape, MetricId, Metrics, CANDIDATES};
use crate::rng::stream;
use crate::supernet::{arch_encoding, one_hot_encoding, ArchParams, MixSource, Supernet, TaskDataset, ALPHA, NUM_CANDIDATES};
use crate::surrogate::{EstimatorModel, GeneratorModel, HwEncoding};

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_nas: f64,
    /// Estimator-based hardware cost of the current relaxed design.
    pub cost_hw: f64,
    pub global_loss: f64,
    /// Per constraint: estimator value, search target, δ in effect.
    pub t: Vec<f64>,
    pub target: Vec<f64>,
    pub delta: Vec<f64>,
    pub manipulated: bool,
    /// `g_loss . g_const` on α; zero when no constraint is violated.
    pub dot: f64,
    /// Weighted soft penalty, present in soft mode only.
    pub soft_term: Option<f64>,
}

impl TrajectoryRow {
    pub fn violated(&self) -> bool {
        self.t.iter().zip(&self.target).any(|(t, tt)| t > tt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub metrics: Vec<MetricId>,
    pub soft: bool,
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn header(&self) -> String {
        let mut h = String::from("epoch,step,loss_nas,cost_hw,global_loss");
        for m in &self.metrics {
            write!(h, ",{m}_t,{m}_T,{m}_delta").expect("string write");
        }
        h.push_str(",manipulated,dot");
        if self.soft {
            h.push_str(",soft_term");
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{},{},{},{}", r.epoch, r.step, r.loss_nas, r.cost_hw, r.global_loss).expect("string write");
            for i in 0..r.t.len() {
                write!(out, ",{},{},{}", r.t[i], r.target[i], r.delta[i]).expect("string write");
            }
            write!(out, ",{},{}", u8::from(r.manipulated), r.dot).expect("string write");
            if let Some(s) = r.soft_term {
                write!(out, ",{s}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    /// Mean NAS loss over the rows of the final epoch.
    pub fn final_loss_nas(&self) -> f64 {
        let Some(last) = self.rows.last() else { return f64::NAN };
        let tail: Vec<f64> = self.rows.iter().filter(|r| r.epoch == last.epoch).map(|r| r.loss_nas).collect();
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

mod arch_pairs {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::hwmodel::CANDIDATES;

    pub fn serialize<S: Serializer>(arch: &[usize], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(arch.iter().map(|&c| [CANDIDATES[c].0, CANDIDATES[c].1]))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<usize>, D::Error> {
        let pairs = Vec::<[u32; 2]>::deserialize(d)?;
        pairs
            .iter()
            .map(|p| {
                CANDIDATES
                    .iter()
                    .position(|c| c.0 == p[0] && c.1 == p[1])
                    .ok_or_else(|| serde::de::Error::custom(format!("unknown block {p:?}")))
            })
            .collect()
    }
}

/// Final design of a run. All metrics used for verdicts come from the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Solution {
    /// Candidate index per layer, written as `[kernel, expand]` pairs.
    #[serde(with = "arch_pairs")]
    pub arch: Vec<usize>,
    pub hw: HwConfig,
    pub oracle: Metrics,
    pub estimator: Metrics,
    /// Final NAS loss plus `lambda_cost` times the oracle hardware cost.
    pub loss: f64,
    pub seed: u64,
    pub mode: String,
    pub lambda_cost: f64,
    /// Validation error of the relaxed supernet under the final α.
    pub val_error: f64,
    pub constraints: Vec<ConstraintSpec>,
    /// Oracle verdict per constrained metric against the unscaled target.
    pub in_constraint: BTreeMap<String, bool>,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_path: Option<String>,
}

impl Solution {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution serializes")
    }

    pub fn verdict(&self) -> String {
        let mut parts = vec![if self.feasible { "in-constraint" } else { "out-of-constraint" }.to_string()];
        for c in &self.constraints {
            let v = self.oracle.get(c.metric);
            let ok = self.in_constraint.get(c.metric.key()).copied().unwrap_or(false);
            parts.push(format!("{}={v:.6}{}{}", c.metric, if ok { "<=" } else { ">" }, c.target));
        }
        parts.push(format!("hw={}", self.hw));
        parts.join(" ")
    }
}

/// Oracle verdicts of `m` against each constraint's unscaled target.
pub fn check_constraints(m: &Metrics, constraints: &[ConstraintSpec]) -> (BTreeMap<String, bool>, bool) {
    let map: BTreeMap<String, bool> = constraints
        .iter()
        .map(|c| (c.metric.key().to_string(), m.get(c.metric) <= c.target))
        .collect();
    let all = map.values().all(|&b| b);
    (map, all)
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub solution: Solution,
    pub trajectory: Trajectory,
    pub alpha: ArchParams,
}

/// Discrete design read off a relaxed state.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub arch: Vec<usize>,
    pub hw: HwConfig,
    pub oracle: Metrics,
    pub estimator: Metrics,
}

/// Hardens α by per-layer argmax, asks the generator for hardware on the
/// hardened encoding, and evaluates the pair with the oracle.
pub fn extract_solution(alpha: &ArchParams, gen: &GeneratorModel, est: &EstimatorModel) -> Result<Extracted> {
    let arch = alpha.argmax();
    let enc = one_hot_encoding(&arch);
    let hw = gen.forward(&enc)?.discretize();
    let oracle = evaluate(&expand_indices(&arch, LayerShape::default_stem())?, &hw)?;
    let estimator = est.predict(&enc, &HwEncoding::encode(&hw))?;
    Ok(Extracted {
        arch,
        hw,
        oracle,
        estimator,
    })
}

const ST_SHIFT: &str = "st_shift";

struct Nodes {
    loss_nas: NodeId,
    cost: NodeId,
    global: NodeId,
    v_loss: NodeId,
    ts: Vec<NodeId>,
    hinge: Option<NodeId>,
    soft: Option<NodeId>,
}

/// Everything that changes during one run.
pub struct SearchState<'a> {
    cfg: SearchConfig,
    mode: SearchMode,
    est: &'a EstimatorModel,
    task: &'a TaskDataset,
    seed: u64,
    pub supernet: Supernet,
    pub alpha: ArchParams,
    pub gen: GeneratorModel,
    pub constraints: Vec<ConstraintSpec>,
    cost: CostConfig,
    adam: Adam,
    graph: Graph,
    nodes: Nodes,
    steps_done: usize,
    epoch: usize,
    shuffle_rng: ChaCha8Rng,
}

/// Diagnostics of one step beyond the logged row.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub row: TrajectoryRow,
    pub alpha_bundle: Option<GradientBundle>,
    pub v_bundle: Option<GradientBundle>,
    /// δ passed to the correction (sum over violated constraints).
    pub delta_used: f64,
}

fn pick(g: &mut Graph, metrics: NodeId, column: usize) -> NodeId {
    let mut sel = vec![0.0; 3];
    sel[column] = 1.0;
    let c = g.constant(Tensor::from_parts(vec![3, 1], sel));
    let t = g.matmul(metrics, c);
    g.sum(t)
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Option<NodeId> {
    nodes.iter().copied().reduce(|a, b| g.add(a, b))
}

fn flatten(grads: &Gradients, names: &[String], sizes: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (name, &n) in names.iter().zip(sizes) {
        match grads.get(name) {
            Some(g) => out.extend_from_slice(g.values()),
            None => out.extend(std::iter::repeat_n(0.0, n)),
        }
    }
    out
}

/// Manipulation for one parameter group. A group whose constraint gradient
/// norm is at or below `floor` (for instance a saturated generator) keeps its
/// plain loss gradient: the correction scales like 1/|g_const| and would
/// otherwise throw the group far outside its working range.
fn correct(g_loss: &[f64], g_const: &[f64], delta: f64, floor: f64) -> Result<Option<GradientBundle>> {
    let norm = g_const.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= floor {
        return Ok(None);
    }
    match manipulate(g_loss, g_const, true, delta) {
        Ok(b) => Ok(Some(b)),
        Err(Error::ZeroConstraintGradient) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Seeded logits with spread `alpha_init_std` (all zeros by default).
fn initial_alpha(cfg: &SearchConfig, seed: u64) -> ArchParams {
    let mut a = ArchParams::zeros(cfg.layers);
    if cfg.alpha_init_std > 0.0 {
        let mut rng = stream(seed, 3);
        for v in a.logits_mut().values_mut() {
            *v = cfg.alpha_init_std * crate::rng::normal(&mut rng);
        }
    }
    a
}

impl<'a> SearchState<'a> {
    pub fn new(
        cfg: &SearchConfig,
        mode: SearchMode,
        est: &'a EstimatorModel,
        task: &'a TaskDataset,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if !est.is_pretrained() {
            return Err(Error::Unpretrained);
        }
        if est.layers() != cfg.layers {
            return Err(Error::Config(format!(
                "estimator was trained for {} layers, config asks for {}",
                est.layers(),
                cfg.layers
            )));
        }
        let constraints = cfg.scheduled_constraints()?;
        let cost = cfg.cost.with_references(est.refs());
        let supernet = Supernet::init(cfg.layers, seed);
        let gen = GeneratorModel::init(cfg.layers, seed);

        let sg = supernet.build_graph(&MixSource::Alpha);
        let mut g = sg.graph;
        let alpha = g.param(ALPHA);
        let probs = g.softmax(alpha);
        let mut arch = g.reshape(probs, &[1, cfg.layers * NUM_CANDIDATES]);
        if cfg.arch_encoding == ArchEncoding::StraightThrough {
            // Fed each step with one_hot(argmax) - probs, so the value is
            // hardened while the gradient is that of the probabilities.
            let shift = g.input(ST_SHIFT);
            arch = g.add(arch, shift);
        }
        let hw = gen.build(&mut g, arch);
        let metrics = est.build(&mut g, arch, hw);
        let weights = cost.weights();
        let wc = g.constant(Tensor::from_parts(vec![3, 1], weights.to_vec()));
        let cost_node = g.matmul(metrics, wc);
        let cost_node = g.sum(cost_node);

        let mut ts = Vec::new();
        let mut hinges = Vec::new();
        let mut softs = Vec::new();
        for c in &constraints {
            let t = pick(&mut g, metrics, c.metric.index());
            let target = c.target * cfg.margin;
            ts.push(t);
            let over = g.add_scalar(t, -target);
            hinges.push(g.relu(over));
            let ratio = g.scale(t, 1.0 / target);
            let ratio = g.add_scalar(ratio, -1.0);
            softs.push(g.relu(ratio));
        }
        let hinge = sum_nodes(&mut g, &hinges);
        let soft = if mode == SearchMode::Soft {
            sum_nodes(&mut g, &softs).map(|s| g.scale(s, cfg.soft_lambda))
        } else {
            None
        };

        let weighted = g.scale(cost_node, cfg.lambda_cost);
        let mut global = g.add(sg.loss, weighted);
        let mut v_loss = cost_node;
        if let Some(s) = soft {
            global = g.add(global, s);
            v_loss = g.add(v_loss, s);
        }

        Ok(Self {
            cfg: cfg.clone(),
            mode,
            est,
            task,
            seed,
            supernet,
            alpha: initial_alpha(cfg, seed),
            gen,
            constraints,
            cost,
            adam: Adam::new(cfg.lr_w),
            graph: g,
            nodes: Nodes {
                loss_nas: sg.loss,
                cost: cost_node,
                global,
                v_loss,
                ts,
                hinge,
                soft,
            },
            steps_done: 0,
            epoch: 0,
            shuffle_rng: stream(seed, 1),
        })
    }

    pub fn cost_config(&self) -> &CostConfig {
        &self.cost
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { .. } => Error::Diverged {
                epoch: self.epoch,
                step: self.steps_done,
                detail: e.to_string(),
            },
            other => other,
        }
    }

    /// One alternating update on the training rows `idx`.
    pub fn search_step(&mut self, idx: &[usize]) -> Result<StepOutcome> {
        let (x, y) = self.task.train_batch(idx);
        let alpha_store = self.alpha.to_store();
        let stores = [&self.supernet.weights, &alpha_store, &self.gen.params, self.est.params()];
        let mut feed = vec![("x", &x), ("y", &y)];
        let shift;
        if self.cfg.arch_encoding == ArchEncoding::StraightThrough {
            let hard = one_hot_encoding(&self.alpha.argmax());
            let soft = arch_encoding(&self.alpha);
            let diff = hard.iter().zip(&soft).map(|(h, s)| h - s).collect();
            shift = Tensor::from_parts(vec![1, hard.len()], diff);
            feed.push((ST_SHIFT, &shift));
        }
        let values = self.graph.forward(&stores, &feed).map_err(|e| self.diverged(e))?;
        let n = &self.nodes;
        let ts: Vec<f64> = n.ts.iter().map(|&t| values.get(t).item()).collect();
        let targets: Vec<f64> = self.constraints.iter().map(|c| c.target * self.cfg.margin).collect();
        let violated: Vec<bool> = ts.iter().zip(&targets).map(|(t, tt)| t > tt).collect();
        let any_violated = violated.iter().any(|&v| v);
        let hard = self.mode == SearchMode::Hdx && any_violated;

        let g_global = self.graph.backward(&values, n.global)?;
        let g_v = self.graph.backward(&values, n.v_loss)?;
        let g_hinge = match (hard, n.hinge) {
            (true, Some(h)) => Some(self.graph.backward(&values, h)?),
            _ => None,
        };
        let delta_used: f64 = self
            .constraints
            .iter()
            .zip(&violated)
            .filter(|(_, &v)| v)
            .map(|(c, _)| c.delta)
            .sum();

        let mut row = TrajectoryRow {
            epoch: self.epoch,
            step: self.steps_done,
            loss_nas: values.get(n.loss_nas).item(),
            cost_hw: values.get(n.cost).item(),
            global_loss: values.get(n.global).item(),
            t: ts.clone(),
            target: targets,
            delta: self.constraints.iter().map(|c| c.delta).collect(),
            manipulated: false,
            dot: 0.0,
            soft_term: n.soft.map(|s| values.get(s).item()),
        };

        let step = self.steps_done;
        if step.is_multiple_of(self.cfg.w_every) {
            self.adam.step(&mut self.supernet.weights, &g_global);
        }

        let mut alpha_bundle = None;
        if step.is_multiple_of(self.cfg.alpha_every) {
            let g_loss = g_global.get(ALPHA).map(|t| t.values().to_vec()).unwrap_or_else(|| vec![0.0; self.alpha.logits().len()]);
            let dir = match &g_hinge {
                Some(gh) => {
                    let g_const = gh.get(ALPHA).map(|t| t.values().to_vec()).unwrap_or_else(|| vec![0.0; g_loss.len()]);
                    match correct(&g_loss, &g_const, delta_used, self.cfg.const_grad_floor)? {
                        Some(b) => {
                            row.manipulated = b.manipulated;
                            row.dot = b.dot;
                            let d = b.g();
                            alpha_bundle = Some(b);
                            d
                        }
                        None => g_loss,
                    }
                }
                None => g_loss,
            };
            sgd_step(self.alpha.logits_mut(), &dir, self.cfg.lr_alpha);
        }

        let mut v_bundle = None;
        if step.is_multiple_of(self.cfg.v_every) {
            let names: Vec<String> = self.gen.params.names().cloned().collect();
            let sizes: Vec<usize> = names.iter().map(|nm| self.gen.params.get(nm).expect("own name").len()).collect();
            let g_loss = flatten(&g_v, &names, &sizes);
            let dir = match &g_hinge {
                Some(gh) => {
                    match correct(&g_loss, &flatten(gh, &names, &sizes), delta_used, self.cfg.const_grad_floor)? {
                        Some(b) => {
                            let d = b.g();
                            v_bundle = Some(b);
                            d
                        }
                        None => g_loss,
                    }
                }
                None => g_loss,
            };
            let mut off = 0;
            for (name, len) in names.iter().zip(&sizes) {
                let p = self.gen.params.get_mut(name).expect("own name");
                sgd_step(p, &dir[off..off + len], self.cfg.lr_v);
                off += len;
            }
        }

        for (c, &v) in self.constraints.iter_mut().zip(&violated) {
            *c = c.delta_step(!v);
        }
        self.steps_done += 1;
        Ok(StepOutcome {
            row,
            alpha_bundle,
            v_bundle,
            delta_used,
        })
    }

    /// Batches of one epoch in a seeded shuffled order.
    fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.task.train_y.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let limit = self.cfg.steps_per_epoch.unwrap_or(usize::MAX);
        order.chunks(self.cfg.batch).take(limit).map(<[usize]>::to_vec).collect()
    }

    /// Runs all epochs, returning the trajectory.
    pub fn run(&mut self) -> Result<Trajectory> {
        let mut rows = Vec::new();
        for epoch in 0..self.cfg.epochs {
            self.epoch = epoch;
            for batch in self.epoch_batches() {
                rows.push(self.search_step(&batch)?.row);
            }
        }
        Ok(Trajectory {
            metrics: self.constraints.iter().map(|c| c.metric).collect(),
            soft: self.mode == SearchMode::Soft,
            rows,
        })
    }

    /// Extracts the final design and assembles the solution record.
    pub fn finish(self, trajectory: Trajectory) -> Result<RunOutput> {
        let ex = extract_solution(&self.alpha, &self.gen, self.est)?;
        let (vx, _) = self.task.val_tensors();
        let val_error = self.supernet.mixture_error_rate(&self.alpha, &vx, &self.task.val_y)?;
        let (in_constraint, feasible) = check_constraints(&ex.oracle, &self.cfg.constraints);
        let loss = trajectory.final_loss_nas() + self.cfg.lambda_cost * cost_hw(&ex.oracle, &self.cost);
        let solution = Solution {
            arch: ex.arch,
            hw: ex.hw,
            oracle: ex.oracle,
            estimator: ex.estimator,
            loss,
            seed: self.seed,
            mode: self.mode.to_string(),
            lambda_cost: self.cfg.lambda_cost,
            val_error,
            constraints: self.cfg.constraints.clone(),
            in_constraint,
            feasible,
            trajectory_path: None,
        };
        Ok(RunOutput {
            solution,
            trajectory,
            alpha: self.alpha,
        })
    }
}

/// Full co-exploration run in `mode`, deterministic per `seed`.
pub fn run_search(
    cfg: &SearchConfig,
    mode: SearchMode,
    est: &EstimatorModel,
    task: &TaskDataset,
    seed: u64,
) -> Result<RunOutput> {
    let mut state = SearchState::new(cfg, mode, est, task, seed)?;
    let traj = state.run()?;
    state.finish(traj)
}

/// Human-readable `[kernel, expand]` list of an architecture.
pub fn describe_arch(arch: &[usize]) -> String {
    let parts: Vec<String> = arch.iter().map(|&c| format!("{}x{}", CANDIDATES[c].0, CANDIDATES[c].1)).collect();
    parts.join(",")
}

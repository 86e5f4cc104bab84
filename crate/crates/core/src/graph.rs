//! The trajectory graph: a DAG over exact solver states `(t, h)` covering
//! every step-size trajectory the controlled solver can take from an input
//! region, with states merged whenever time and step size coincide.
//!
//! Construction expands frontier nodes in (smallest time, largest step)
//! order, performs one abstract solver step per node, branches on the
//! error-estimate interval, and merges successor bounds by box hull. The
//! ordering guarantees a node's bounds are final before it is expanded, so
//! construction is single pass.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::sync::Arc;

use num_traits::Zero;

use crate::domains::{abstract_rk_step, AbstractStep, BoundMode, ReluPolicy, StepTransform};
use crate::error::{Error, Result};
use crate::math::{box_hull, Interval, IntervalBox};
use crate::model::{LayerSpec, ModelSpec};
use crate::solver::{
    apply_decision, Decision, ExactConfig, Rat, SolverConfig, StepControl, StepKey,
};

/// Produces abstract solver steps for graph construction. Implemented by
/// the model-backed stepper and by scripted steppers in tests and demos.
pub trait AbstractStepper {
    fn state_dim(&self) -> usize;
    /// Policies of the linear tracks carried on step transforms (empty in
    /// interval mode).
    fn policies(&self) -> Vec<ReluPolicy>;
    fn step(&self, entry: &IntervalBox, t: f64, h: f64) -> Result<AbstractStep>;
}

/// Abstract stepper backed by a model's dynamics layers.
pub struct ModelStepper<'a> {
    pub layers: &'a [LayerSpec],
    pub state_dim: usize,
    pub tau: f64,
    pub tableau: crate::solver::Tableau,
    pub mode: BoundMode,
}

impl<'a> ModelStepper<'a> {
    pub fn new(model: &'a ModelSpec, mode: BoundMode) -> Self {
        ModelStepper {
            layers: &model.dynamics.layers,
            state_dim: model.dynamics.state_dim,
            tau: model.solver_cfg.tau,
            tableau: model.solver_cfg.tableau,
            mode,
        }
    }
}

impl AbstractStepper for ModelStepper<'_> {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn policies(&self) -> Vec<ReluPolicy> {
        self.mode.policies()
    }

    fn step(&self, entry: &IntervalBox, t: f64, h: f64) -> Result<AbstractStep> {
        abstract_rk_step(self.layers, self.tau, entry, t, h, self.tableau, self.mode)
    }
}

/// One node of the trajectory graph.
#[derive(Debug, Clone)]
pub struct GraphNode {
    pub key: StepKey,
    /// Hull of the state bounds over every trajectory reaching this key.
    pub bounds: IntervalBox,
    /// Some incoming transition created this node by clipping.
    pub clipped: bool,
    /// A clipped attempt occurred on some path reaching this node.
    pub clipped_seen: bool,
    /// Maximum clip-rejection count over incoming paths.
    pub rejection_count: u32,
    /// Sticky flag: error control abandoned, only accept branches leave.
    pub forced_accept: bool,
    /// Error-estimate interval of this node's abstract step.
    pub delta: Option<Interval>,
    /// Composite step maps over this node's frame (linear modes).
    pub step: Option<Arc<StepTransform>>,
    pub outgoing: Vec<(Decision, StepKey)>,
    expanded: bool,
}

/// DAG of reachable solver states for an input region.
#[derive(Debug, Clone)]
pub struct TrajectoryGraph {
    pub nodes: BTreeMap<StepKey, GraphNode>,
    pub entry: StepKey,
    pub terminal: StepKey,
    pub policies: Vec<ReluPolicy>,
    edge_count: usize,
}

impl TrajectoryGraph {
    pub fn node(&self, key: &StepKey) -> Option<&GraphNode> {
        self.nodes.get(key)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn has_edge(&self, from: &StepKey, to: &StepKey) -> bool {
        self.nodes
            .get(from)
            .is_some_and(|n| n.outgoing.iter().any(|(_, k)| k == to))
    }

    /// Bounds at the terminal state.
    pub fn terminal_bounds(&self) -> &IntervalBox {
        &self.nodes[&self.terminal].bounds
    }

    /// Checks that a concrete trajectory (a key sequence ending in the
    /// terminal key) is a path of the graph.
    pub fn contains_trajectory(&self, trajectory: &[StepKey]) -> bool {
        if trajectory.is_empty() || trajectory[0] != self.entry {
            return false;
        }
        for w in trajectory.windows(2) {
            if !self.has_edge(&w[0], &w[1]) {
                return false;
            }
        }
        *trajectory.last().unwrap() == self.terminal
    }

    /// All entry-to-terminal paths with the decisions taken, up to `cap`
    /// paths. Only sensible for small graphs.
    pub fn enumerate_paths(&self, cap: usize) -> Vec<Vec<(StepKey, Decision)>> {
        let mut out = Vec::new();
        let mut stack = vec![(self.entry.clone(), Vec::new())];
        while let Some((key, prefix)) = stack.pop() {
            if out.len() >= cap {
                break;
            }
            if key == self.terminal {
                out.push(prefix);
                continue;
            }
            let node = &self.nodes[&key];
            for (decision, succ) in node.outgoing.iter().rev() {
                let mut next = prefix.clone();
                next.push((key.clone(), *decision));
                stack.push((succ.clone(), next));
            }
        }
        out
    }

    /// Upper bound on the node count implied by the step grid: per
    /// step-size row at most `t_end/h_min` states, with grid rows plus the
    /// clipped and terminal rows.
    pub fn node_count_bound(cfg: &SolverConfig) -> f64 {
        let rows = ((cfg.t_end.ln() - cfg.h_min.ln()) / (cfg.alpha as f64).ln()).ceil() + 2.0;
        (cfg.t_end / cfg.h_min) * rows
    }

    /// Deterministic Graphviz rendering: nodes in processing order labeled
    /// `t,h [width=sum(u-l)]`, edges labeled i/a/d.
    pub fn export_dot(&self) -> String {
        use std::fmt::Write;
        let index: BTreeMap<&StepKey, usize> = self
            .nodes
            .keys()
            .enumerate()
            .map(|(i, k)| (k, i))
            .collect();
        let mut out = String::from("digraph trajectory_graph {\n");
        for (key, node) in &self.nodes {
            writeln!(
                out,
                "  n{} [label=\"{} [width={}]\"];",
                index[key],
                key,
                node.bounds.total_width()
            )
            .unwrap();
        }
        for (key, node) in &self.nodes {
            for (decision, succ) in &node.outgoing {
                writeln!(
                    out,
                    "  n{} -> n{} [label=\"{}\"];",
                    index[key],
                    index[succ],
                    decision.short()
                )
                .unwrap();
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Frontier element chosen for expansion: lexicographic minimum by
/// (time ascending, step size descending), via the exact key ordering.
pub fn processing_order(frontier: &BTreeSet<StepKey>) -> Option<&StepKey> {
    frontier.first()
}

/// Branch set of the controller rule over an error-estimate interval:
/// every decision some concrete point in the region could trigger.
pub fn branch_set(delta: &Interval, tau_alpha: f64) -> Vec<Decision> {
    let mut set = Vec::new();
    if delta.lo <= tau_alpha {
        set.push(Decision::Increase);
    }
    if delta.lo <= 1.0 && delta.hi > tau_alpha {
        set.push(Decision::Accept);
    }
    if delta.hi > 1.0 {
        set.push(Decision::Decrease);
    }
    debug_assert!(!set.is_empty());
    set
}

/// Builds the trajectory graph for an input region already expressed in
/// the dynamics state space.
pub fn build_graph(
    stepper: &dyn AbstractStepper,
    input_region: &IntervalBox,
    cfg: &SolverConfig,
) -> Result<TrajectoryGraph> {
    cfg.validate()?;
    if input_region.dim() != stepper.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "build_graph input region",
            expected: stepper.state_dim(),
            got: input_region.dim(),
        });
    }
    let exact = ExactConfig::from_cfg(cfg);
    let tau_alpha = cfg.tau_alpha();
    let policies = stepper.policies();
    let budget = cfg.budget();

    let (entry_h, entry_clipped) = exact.clip(&Rat::zero(), &exact.eta);
    let entry = StepKey::new(Rat::zero(), entry_h);
    let terminal = StepKey::terminal(&exact.t_end);

    let mut nodes: BTreeMap<StepKey, GraphNode> = BTreeMap::new();
    nodes.insert(
        entry.clone(),
        GraphNode {
            key: entry.clone(),
            bounds: input_region.clone(),
            clipped: entry_clipped,
            clipped_seen: false,
            rejection_count: 0,
            forced_accept: false,
            delta: None,
            step: None,
            outgoing: Vec::new(),
            expanded: false,
        },
    );
    let mut frontier: BTreeSet<StepKey> = BTreeSet::new();
    frontier.insert(entry.clone());
    let mut edge_count = 0usize;
    let mut expansions = 0usize;

    while let Some(key) = processing_order(&frontier).cloned() {
        frontier.remove(&key);
        expansions += 1;
        if expansions > budget {
            return Err(Error::StepBudget {
                steps: expansions,
                t: key.t_f64(),
            });
        }

        let (bounds, ctrl, node_clipped) = {
            let node = &nodes[&key];
            (
                node.bounds.clone(),
                StepControl {
                    clipped_seen: node.clipped_seen,
                    rejections_after_clip: node.rejection_count,
                    forced: node.forced_accept,
                },
                node.clipped,
            )
        };

        let step = stepper
            .step(&bounds, key.t_f64(), key.h_f64())
            .map_err(|e| match e {
                Error::SolverDivergence { .. } => Error::SolverDivergence {
                    t: key.t_f64(),
                    h: key.h_f64(),
                },
                other => other,
            })?;

        let decisions = match (ctrl.forced, &step.delta) {
            (true, _) | (false, None) => vec![Decision::Accept],
            (false, Some(delta)) => branch_set(delta, tau_alpha),
        };

        let transform = step.transform.map(Arc::new);
        {
            let node = nodes.get_mut(&key).unwrap();
            node.expanded = true;
            node.delta = step.delta;
            node.step = transform.clone();
        }

        for decision in decisions {
            let tr = apply_decision(&key.t, &key.h, node_clipped, &ctrl, decision, &exact, cfg);
            let succ_bounds = if tr.moves() {
                step.out_box.clone()
            } else {
                bounds.clone()
            };
            let (succ_key, succ_clipped) = if tr.t == exact.t_end {
                (terminal.clone(), false)
            } else {
                let (h_eff, clipped) = exact.clip(&tr.t, &tr.h);
                (StepKey::new(tr.t.clone(), h_eff), clipped)
            };

            let succ = nodes.entry(succ_key.clone()).or_insert_with(|| GraphNode {
                key: succ_key.clone(),
                bounds: succ_bounds.clone(),
                clipped: false,
                clipped_seen: false,
                rejection_count: 0,
                forced_accept: false,
                delta: None,
                step: None,
                outgoing: Vec::new(),
                expanded: false,
            });
            // a successor of the current node can never have been expanded
            // already; this is exactly the frontier-ordering guarantee
            assert!(
                !succ.expanded,
                "processing order violated: edge into expanded node {succ_key}"
            );
            succ.bounds = box_hull(&succ.bounds, &succ_bounds)?;
            succ.clipped |= succ_clipped;
            succ.clipped_seen |= tr.control.clipped_seen;
            succ.rejection_count = succ.rejection_count.max(tr.control.rejections_after_clip);
            succ.forced_accept |= tr.control.forced;

            if !succ_key.is_terminal() {
                frontier.insert(succ_key.clone());
            }
            let node = nodes.get_mut(&key).unwrap();
            if !node
                .outgoing
                .iter()
                .any(|(d, k)| *d == tr.effective && *k == succ_key)
            {
                node.outgoing.push((tr.effective, succ_key));
                edge_count += 1;
            }
        }
    }

    // only the terminal node may lack outgoing edges
    for (key, node) in &nodes {
        if key.is_terminal() {
            assert!(node.outgoing.is_empty());
        } else {
            assert!(
                !node.outgoing.is_empty(),
                "non-terminal node {key} has no outgoing edges"
            );
        }
    }
    let bound = TrajectoryGraph::node_count_bound(cfg);
    assert!(
        nodes.len() as f64 <= bound,
        "node count {} exceeds the structural bound {bound}",
        nodes.len()
    );

    Ok(TrajectoryGraph {
        nodes,
        entry,
        terminal,
        policies,
        edge_count,
    })
}

// ---------------------------------------------------------------------------
// scripted stepper
// ---------------------------------------------------------------------------

/// One scripting rule: states with step size `h` (and time within the
/// window) report the given error-estimate interval.
#[derive(Debug, Clone)]
pub struct DeltaRule {
    pub h: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub delta: Interval,
}

/// A stepper whose error estimates are scripted by step size and time and
/// whose state transformer is the identity. Used to exercise graph
/// construction shapes independently of any dynamics.
pub struct ScriptedStepper {
    pub dim: usize,
    pub rules: Vec<DeltaRule>,
}

impl AbstractStepper for ScriptedStepper {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn policies(&self) -> Vec<ReluPolicy> {
        vec![]
    }

    fn step(&self, entry: &IntervalBox, t: f64, h: f64) -> Result<AbstractStep> {
        let rule = self
            .rules
            .iter()
            .find(|r| (r.h - h).abs() < 1e-12 && t >= r.t_min - 1e-12 && t <= r.t_max + 1e-12)
            .ok_or_else(|| Error::Invariant(format!("no scripted rule for state ({t}, {h})")))?;
        Ok(AbstractStep {
            delta: Some(rule.delta),
            out_box: entry.clone(),
            transform: None,
            stage_boxes: vec![],
        })
    }
}

/// Scripted scenario with `h0 = 1/2`, `alpha = 2`, `t_end = 1` where every
/// state splits except the last two before the terminal: the half-size rows
/// straddle the rejection threshold, the early quarter-size rows straddle
/// the increase threshold, and the late quarter-size rows accept cleanly.
pub fn branching_demo() -> (ScriptedStepper, SolverConfig) {
    let stepper = ScriptedStepper {
        dim: 1,
        rules: vec![
            DeltaRule {
                h: 0.5,
                t_min: 0.0,
                t_max: 1.0,
                delta: Interval::new(0.5, 1.5),
            },
            DeltaRule {
                h: 0.25,
                t_min: 0.0,
                t_max: 0.3,
                delta: Interval::new(0.01, 0.5),
            },
            DeltaRule {
                h: 0.25,
                t_min: 0.45,
                t_max: 1.0,
                delta: Interval::new(0.5, 0.9),
            },
        ],
    };
    let cfg = SolverConfig {
        alpha: 2,
        tau: 0.005,
        h_min: 0.02,
        eta: 0.5,
        beta: 0.1,
        t_end: 1.0,
        order: 5,
        max_rejections_after_clip: 2,
        tableau: crate::solver::Tableau::Dopri5,
        step_budget: None,
    };
    (stepper, cfg)
}

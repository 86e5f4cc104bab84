//! End-to-end robustness verification: linear bounds swept backwards
//! through the trajectory graph with constraint aggregation at fan-ins,
//! interval propagation as the baseline, and the combined method taking
//! the tightest of everything.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domains::{
    abstract_stack, backsubstitute, concretize, substitute, BoundMode, LinearBounds, ReluPolicy,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, ModelStepper, TrajectoryGraph};
use crate::lcap::{curls_merge, ConstraintSense, ConstraintSet};
use crate::math::{AffineMap, IntervalBox, Matrix, Vector};
use crate::model::{ModelSpec, OutputRole};
use crate::solver::StepKey;

/// Robustness property to decide.
#[derive(Debug, Clone, PartialEq)]
pub enum PropertyKind {
    /// The target class logit must dominate all others.
    Classification { target: usize },
    /// Worst-case mean absolute error stays within
    /// `(1 + nu) * reference_mae + delta_tol`.
    Regression {
        nu: f64,
        delta_tol: f64,
        /// Unperturbed mean absolute error; computed from the sample when
        /// absent.
        reference_mae: Option<f64>,
    },
}

/// Full robustness specification.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessSpec {
    pub kind: PropertyKind,
    /// Max-norm perturbation radius.
    pub epsilon: f64,
    /// Optional clamp applied to the perturbed inputs (e.g. pixel range).
    pub clamp: Option<(f64, f64)>,
}

/// A regression sample carries targets for the observed output features.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTargets {
    /// Target value per observed feature index.
    pub observed: Vec<(usize, f64)>,
}

/// Verification method, mirroring the CLI surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Interval bounds only.
    Box,
    /// Linear bounds with the area-minimizing ReLU slopes.
    Linear,
    /// Combination: interval bounds plus all three linear slope policies,
    /// tightest bounds everywhere.
    Gains,
}

impl Method {
    pub fn mode(&self) -> BoundMode {
        match self {
            Method::Box => BoundMode::Ibp,
            Method::Linear => BoundMode::Linear(ReluPolicy::AreaMin),
            Method::Gains => BoundMode::Gains,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Box => "box",
            Method::Linear => "linear",
            Method::Gains => "gains",
        }
    }
}

/// Verification outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Verified,
    Unknown,
    /// A concrete counterexample reproduces the violation (serialized
    /// input vector).
    Falsified(Vec<u8>),
}

/// Result of one verification call.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub status: Status,
    /// Certified box on the model output.
    pub output_bounds: IntervalBox,
    /// Lower bounds on the margins `y_target - y_other` (classification).
    pub margins: Option<Vec<f64>>,
    /// Certified upper bound on the mean absolute error (regression).
    pub mae_bound: Option<f64>,
    pub graph_nodes: usize,
    pub graph_edges: usize,
    pub millis: f64,
    pub diagnostic: Option<String>,
}

impl Verdict {
    /// The concrete witness input, when the property was falsified.
    pub fn witness(&self) -> Option<Vector> {
        match &self.status {
            Status::Falsified(bytes) => serde_json::from_slice::<Vec<f64>>(bytes).ok().map(Vector),
            _ => None,
        }
    }
}

/// Input region of a sample: the clamped max-norm ball.
pub fn input_region(x: &Vector, epsilon: f64, clamp: Option<(f64, f64)>) -> IntervalBox {
    let mut region = IntervalBox::linf_ball(x, epsilon);
    if let Some((lo, hi)) = clamp {
        region = IntervalBox {
            lower: Vector(region.lower.0.iter().map(|v| v.max(lo)).collect()),
            upper: Vector(region.upper.0.iter().map(|v| v.min(hi)).collect()),
        };
    }
    region
}

// ---------------------------------------------------------------------------
// graph backsubstitution
// ---------------------------------------------------------------------------

/// Sweeps a query backwards through the graph: bounds arrive at each node
/// along every outgoing edge, move edges substitute the edge's composite
/// step maps (rejection edges are the identity), and multiple arriving
/// bound sets merge per output row by constraint aggregation over the
/// node's box. Returns the query expressed over the entry frame.
pub fn graph_backsubstitute(
    graph: &TrajectoryGraph,
    policy_index: usize,
    query: &LinearBounds,
) -> Result<LinearBounds> {
    let mut at_node: BTreeMap<StepKey, LinearBounds> = BTreeMap::new();
    at_node.insert(graph.terminal.clone(), query.clone());

    for (key, node) in graph.nodes.iter().rev() {
        if key.is_terminal() {
            continue;
        }
        let mut arriving: Vec<LinearBounds> = Vec::with_capacity(node.outgoing.len());
        for (decision, succ) in &node.outgoing {
            let succ_bounds = at_node
                .get(succ)
                .ok_or_else(|| Error::Invariant(format!("no bounds at successor {succ}")))?;
            let arrived = if *decision == crate::solver::Decision::Decrease {
                // rejected step: the state does not change
                succ_bounds.clone()
            } else {
                let step = node.step.as_ref().ok_or(Error::MissingLinearRecords)?;
                let (_, maps) = step
                    .tracks
                    .get(policy_index)
                    .ok_or(Error::MissingLinearRecords)?;
                substitute(succ_bounds, maps)?
            };
            arriving.push(arrived);
        }
        let merged = merge_bound_sets(&arriving, &node.bounds)?;
        at_node.insert(key.clone(), merged);
    }
    at_node
        .remove(&graph.entry)
        .ok_or_else(|| Error::Invariant("entry node missing from sweep".into()))
}

/// Merges several sound bound sets on the same rows over one frame:
/// uppers aggregate as an upper envelope, lowers as a lower envelope.
fn merge_bound_sets(sets: &[LinearBounds], frame: &IntervalBox) -> Result<LinearBounds> {
    match sets.len() {
        0 => Err(Error::Invariant("empty bound set at merge".into())),
        1 => Ok(sets[0].clone()),
        _ => {
            let rows = sets[0].out_dim();
            let d = sets[0].in_dim();
            let mut upper_c = Matrix::zeros(rows, d);
            let mut upper_o = Vector::zeros(rows);
            let mut lower_c = Matrix::zeros(rows, d);
            let mut lower_o = Vector::zeros(rows);
            for i in 0..rows {
                let upper = merge_rows(sets, frame, i, ConstraintSense::Upper)?;
                let lower = merge_rows(sets, frame, i, ConstraintSense::Lower)?;
                upper_c.data[i * d..(i + 1) * d].copy_from_slice(upper.coeffs.row(0));
                upper_o.0[i] = upper.offset.0[0];
                lower_c.data[i * d..(i + 1) * d].copy_from_slice(lower.coeffs.row(0));
                lower_o.0[i] = lower.offset.0[0];
            }
            Ok(LinearBounds {
                lower: AffineMap::new(lower_c, lower_o)?,
                upper: AffineMap::new(upper_c, upper_o)?,
            })
        }
    }
}

fn merge_rows(
    sets: &[LinearBounds],
    frame: &IntervalBox,
    row: usize,
    sense: ConstraintSense,
) -> Result<AffineMap> {
    let d = sets[0].in_dim();
    let mut coeffs = Matrix::zeros(sets.len(), d);
    let mut offsets = Vector::zeros(sets.len());
    for (k, set) in sets.iter().enumerate() {
        let side = match sense {
            ConstraintSense::Upper => &set.upper,
            ConstraintSense::Lower => &set.lower,
        };
        coeffs.data[k * d..(k + 1) * d].copy_from_slice(side.coeffs.row(row));
        offsets.0[k] = side.offset.0[row];
    }
    curls_merge(&ConstraintSet::new(coeffs, offsets, frame.clone(), sense)?)
}

// ---------------------------------------------------------------------------
// per-method certified bounds
// ---------------------------------------------------------------------------

/// Everything needed to push one query row from the output to the input
/// for one ReLU policy track.
struct TrackPipeline {
    policy_index: usize,
    encoder_records: Vec<LinearBounds>,
    decoder_records: Vec<LinearBounds>,
}

/// Certified analysis of one input region under one propagation mode.
struct Analysis {
    /// Certified box on the final output.
    output: IntervalBox,
    graph: TrajectoryGraph,
    tracks: Vec<TrackPipeline>,
    input_box: IntervalBox,
}

impl Analysis {
    /// Tightest certified lower bound for the scalar query row `q(y)` over
    /// the region, combining the direct interval bound with every linear
    /// track's fully backsubstituted bound.
    fn query_lower(&self, query: &AffineMap) -> Result<f64> {
        let exact = LinearBounds::exact(query.clone());
        let mut best = crate::math::interval_affine(query, &self.output)?.lower.0[0];
        for track in &self.tracks {
            let at_terminal = backsubstitute(&exact, &track.decoder_records)?;
            let at_entry = graph_backsubstitute(&self.graph, track.policy_index, &at_terminal)?;
            let at_input = backsubstitute(&at_entry, &track.encoder_records)?;
            let concrete = concretize(&at_input, &self.input_box)?;
            best = best.max(concrete.lower.0[0]);
        }
        Ok(best)
    }
}

fn analyze(model: &ModelSpec, input_box: &IntervalBox, mode: BoundMode) -> Result<Analysis> {
    let policies = mode.policies();

    // encoder
    let encoder = abstract_stack(&model.encoder, input_box, mode, None)?;
    let z0_box = encoder.out_box.clone();

    // trajectory graph over the encoded region
    let stepper = ModelStepper::new(model, mode);
    let graph = build_graph(&stepper, &z0_box, &model.solver_cfg)?;
    let terminal_box = graph.terminal_bounds().clone();

    // decoder (the forward pass fixes the ReLU relaxations)
    let decoder = abstract_stack(&model.decoder, &terminal_box, mode, None)?;
    let mut output = decoder.out_box.clone();

    // tighten the output with full backsubstitution per linear track
    let tracks: Vec<TrackPipeline> = (0..policies.len())
        .map(|policy_index| TrackPipeline {
            policy_index,
            encoder_records: encoder.tracks[policy_index].records.clone(),
            decoder_records: decoder.tracks[policy_index].records.clone(),
        })
        .collect();
    if !tracks.is_empty() {
        let identity = LinearBounds::identity(output.dim());
        for track in &tracks {
            let at_terminal = backsubstitute(&identity, &track.decoder_records)?;
            let at_entry = graph_backsubstitute(&graph, track.policy_index, &at_terminal)?;
            let at_input = backsubstitute(&at_entry, &track.encoder_records)?;
            let concrete = concretize(&at_input, input_box)?;
            output = output.intersect(&concrete);
        }
    }

    Ok(Analysis {
        output,
        graph,
        tracks,
        input_box: input_box.clone(),
    })
}

// ---------------------------------------------------------------------------
// verification entry points
// ---------------------------------------------------------------------------

/// Margin query `y_target - y_other` as a single-row affine map over the
/// output frame.
fn margin_query(out_dim: usize, target: usize, other: usize) -> AffineMap {
    let mut coeffs = Matrix::zeros(1, out_dim);
    coeffs.set(0, target, 1.0);
    coeffs.set(0, other, -1.0);
    AffineMap::new(coeffs, Vector(vec![0.0])).unwrap()
}

/// Decides the robustness property for one input. The combined method also
/// runs the pure interval and pure linear pipelines and keeps the tightest
/// certified quantities.
pub fn verify(
    model: &ModelSpec,
    input: &Vector,
    targets: Option<&RegressionTargets>,
    spec: &RobustnessSpec,
    method: Method,
) -> Result<Verdict> {
    let start = Instant::now();
    match (&spec.kind, model.output) {
        (PropertyKind::Classification { .. }, OutputRole::Classification) => {}
        (PropertyKind::Regression { .. }, OutputRole::Regression) => {}
        (kind, role) => {
            return Err(Error::SpecMismatch(format!(
                "property {kind:?} does not match model output role {role:?}"
            )))
        }
    }
    if spec.epsilon < 0.0 {
        return Err(Error::SpecMismatch("epsilon must be non-negative".into()));
    }
    let out_dim = model.output_dim()?;
    if let PropertyKind::Classification { target } = spec.kind {
        if target >= out_dim {
            return Err(Error::SpecMismatch(format!(
                "target class {target} out of range for {out_dim} outputs"
            )));
        }
    }

    let region = input_region(input, spec.epsilon, spec.clamp);
    let modes: Vec<BoundMode> = match method {
        Method::Box => vec![BoundMode::Ibp],
        Method::Linear => vec![BoundMode::Linear(ReluPolicy::AreaMin)],
        Method::Gains => vec![
            BoundMode::Gains,
            BoundMode::Ibp,
            BoundMode::Linear(ReluPolicy::AreaMin),
        ],
    };

    let mut analyses = Vec::with_capacity(modes.len());
    for mode in modes {
        match analyze(model, &region, mode) {
            Ok(a) => analyses.push(a),
            Err(Error::SolverDivergence { t, h }) => {
                return Ok(Verdict {
                    status: Status::Unknown,
                    output_bounds: IntervalBox::linf_ball(&Vector::zeros(out_dim), f64::INFINITY),
                    margins: None,
                    mae_bound: None,
                    graph_nodes: 0,
                    graph_edges: 0,
                    millis: start.elapsed().as_secs_f64() * 1e3,
                    diagnostic: Some(format!("abstract solver diverged at t={t}, h={h}")),
                })
            }
            Err(other) => return Err(other),
        }
    }

    let mut output = analyses[0].output.clone();
    for a in &analyses[1..] {
        output = output.intersect(&a.output);
    }
    let query_lower = |q: &AffineMap| -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for a in &analyses {
            best = best.max(a.query_lower(q)?);
        }
        Ok(best)
    };

    let (graph_nodes, graph_edges) = (
        analyses[0].graph.node_count(),
        analyses[0].graph.edge_count(),
    );
    let millis = |start: Instant| start.elapsed().as_secs_f64() * 1e3;

    let verdict = match &spec.kind {
        PropertyKind::Classification { target } => {
            let mut margins = Vec::with_capacity(out_dim - 1);
            let mut verified = true;
            for other in 0..out_dim {
                if other == *target {
                    continue;
                }
                let lower = query_lower(&margin_query(out_dim, *target, other))?;
                verified &= lower > 0.0;
                margins.push(lower);
            }
            Verdict {
                status: if verified {
                    Status::Verified
                } else {
                    Status::Unknown
                },
                output_bounds: output,
                margins: Some(margins),
                mae_bound: None,
                graph_nodes,
                graph_edges,
                millis: millis(start),
                diagnostic: None,
            }
        }
        PropertyKind::Regression {
            nu,
            delta_tol,
            reference_mae,
        } => {
            let targets = targets.ok_or_else(|| {
                Error::SpecMismatch("regression verification needs observed targets".into())
            })?;
            if targets.observed.is_empty() {
                return Err(Error::SpecMismatch("empty observed-feature mask".into()));
            }
            let reference = match reference_mae {
                Some(v) => *v,
                None => {
                    let y = model.forward(input)?;
                    mean_absolute_error(&y, targets)
                }
            };
            // worst-case |y_i - target_i| over an interval is attained at
            // an endpoint
            let mut worst_sum = 0.0;
            for (idx, t) in &targets.observed {
                if *idx >= out_dim {
                    return Err(Error::SpecMismatch(format!(
                        "observed feature {idx} out of range"
                    )));
                }
                let l = output.lower.0[*idx];
                let u = output.upper.0[*idx];
                worst_sum += (l - t).abs().max((u - t).abs());
            }
            let mae_bound = worst_sum / targets.observed.len() as f64;
            let threshold = (1.0 + nu) * reference + delta_tol;
            Verdict {
                status: if mae_bound < threshold {
                    Status::Verified
                } else {
                    Status::Unknown
                },
                output_bounds: output,
                margins: None,
                mae_bound: Some(mae_bound),
                graph_nodes,
                graph_edges,
                millis: millis(start),
                diagnostic: None,
            }
        }
    };
    Ok(verdict)
}

/// Mean absolute error over the observed features.
pub fn mean_absolute_error(prediction: &Vector, targets: &RegressionTargets) -> f64 {
    let sum: f64 = targets
        .observed
        .iter()
        .map(|(idx, t)| (prediction.0[*idx] - t).abs())
        .sum();
    sum / targets.observed.len() as f64
}

// ---------------------------------------------------------------------------
// empirical soundness
// ---------------------------------------------------------------------------

/// Report of the sampling probe: concrete outputs against certified bounds.
#[derive(Debug, Clone)]
pub struct SoundnessReport {
    pub samples: usize,
    /// Worst observed escape beyond the certified bounds (0 when sound).
    pub max_violation: f64,
    /// Tightness statistic: largest distance from a concrete output to the
    /// nearer certified bound.
    pub max_gap: f64,
    /// Serialized witness input when a violation occurred.
    pub witness: Option<Vec<u8>>,
}

/// Samples uniform points in the clamped ball, runs concrete inference,
/// and checks every output against the certified box. Containment uses a
/// small relative slack because bounds are computed without directed
/// rounding.
pub fn empirical_soundness(
    model: &ModelSpec,
    input: &Vector,
    spec: &RobustnessSpec,
    certified: &IntervalBox,
    n_samples: usize,
    seed: u64,
) -> Result<SoundnessReport> {
    assert!(n_samples >= 1);
    let region = input_region(input, spec.epsilon, spec.clamp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_violation = 0.0_f64;
    let mut max_gap = 0.0_f64;
    let mut witness = None;
    for s in 0..n_samples {
        let x = if s == 0 {
            // always probe the unperturbed input itself
            input.clone()
        } else {
            Vector(
                (0..region.dim())
                    .map(|i| rng.random_range(region.lower.0[i]..=region.upper.0[i]))
                    .collect(),
            )
        };
        let y = model.forward(&x)?;
        for i in 0..y.len() {
            let v = y.0[i];
            let slack = 1e-9 * (1.0 + v.abs());
            let below = certified.lower.0[i] - v;
            let above = v - certified.upper.0[i];
            let violation = below.max(above);
            if violation > slack && violation > max_violation {
                max_violation = violation;
                witness = Some(serde_json::to_vec(&x.0)?);
            }
            let gap = (v - certified.lower.0[i]).min(certified.upper.0[i] - v);
            max_gap = max_gap.max(gap);
        }
    }
    Ok(SoundnessReport {
        samples: n_samples,
        max_violation,
        max_gap,
        witness,
    })
}

/// Searches for a concrete counterexample to the property itself: a
/// sampled point that misclassifies or exceeds the error budget. Used to
/// upgrade an inconclusive verdict to a falsification; loose bounds alone
/// never falsify.
pub fn witness_search(
    model: &ModelSpec,
    input: &Vector,
    targets: Option<&RegressionTargets>,
    spec: &RobustnessSpec,
    n_samples: usize,
    seed: u64,
) -> Result<Option<Vector>> {
    let region = input_region(input, spec.epsilon, spec.clamp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = match (&spec.kind, targets) {
        (PropertyKind::Regression { reference_mae, .. }, Some(t)) => match reference_mae {
            Some(v) => Some(*v),
            None => Some(mean_absolute_error(&model.forward(input)?, t)),
        },
        _ => None,
    };
    for _ in 0..n_samples {
        let x = Vector(
            (0..region.dim())
                .map(|i| rng.random_range(region.lower.0[i]..=region.upper.0[i]))
                .collect(),
        );
        let y = model.forward(&x)?;
        let violated = match &spec.kind {
            PropertyKind::Classification { target } => {
                let best = y
                    .0
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                best != *target
            }
            PropertyKind::Regression { nu, delta_tol, .. } => {
                let t = targets.ok_or_else(|| {
                    Error::SpecMismatch("regression witness search needs targets".into())
                })?;
                let mae = mean_absolute_error(&y, t);
                mae >= (1.0 + nu) * reference.unwrap() + delta_tol
            }
        };
        if violated {
            return Ok(Some(x));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_model, LayerSpec, RandomModelShape};

    fn spec_cls(target: usize, epsilon: f64) -> RobustnessSpec {
        RobustnessSpec {
            kind: PropertyKind::Classification { target },
            epsilon,
            clamp: None,
        }
    }

    #[test]
    fn zero_epsilon_matches_concrete_argmax() {
        for seed in 0..8u64 {
            let model = random_model(&RandomModelShape::default(), seed);
            let x = Vector(vec![0.2, -0.1, 0.3]);
            let y = model.forward(&x).unwrap();
            let argmax = y
                .0
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            for method in [Method::Box, Method::Linear, Method::Gains] {
                let v = verify(&model, &x, None, &spec_cls(argmax, 0.0), method).unwrap();
                assert_eq!(v.status, Status::Verified, "seed {seed} {method:?}");
                // degenerate region: output bounds collapse onto the output
                for i in 0..y.len() {
                    assert!((v.output_bounds.lower.0[i] - y.0[i]).abs() < 1e-9);
                    assert!((v.output_bounds.upper.0[i] - y.0[i]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn clear_margins_verify() {
        // logits pushed far apart by a decoder bias: y_t around 2.5, the
        // other logit around 0.5, regardless of the small input region
        let mut model = random_model(&RandomModelShape::default(), 4);
        if let LayerSpec::Linear(map) = &mut model.decoder[0] {
            for v in map.coeffs.data.iter_mut() {
                *v *= 0.01;
            }
            map.offset = Vector(vec![2.5, 0.5]);
        }
        let x = Vector(vec![0.0, 0.0, 0.0]);
        for method in [Method::Box, Method::Linear, Method::Gains] {
            let v = verify(&model, &x, None, &spec_cls(0, 0.05), method).unwrap();
            assert_eq!(v.status, Status::Verified);
            let margins = v.margins.unwrap();
            assert!(margins[0] > 1.0, "margin {}", margins[0]);
        }
    }

    #[test]
    fn regression_threshold_arithmetic() {
        // frozen arithmetic: bound 0.54 against (1 + 0.1) * 0.5 + 0.01
        let threshold: f64 = (1.0 + 0.1) * 0.5 + 0.01;
        assert!((threshold - 0.56).abs() < 1e-12);
        assert!(0.54 < threshold);

        let mut model = random_model(&RandomModelShape::default(), 9);
        model.output = OutputRole::Regression;
        let x = Vector(vec![0.1, 0.0, -0.1]);
        let y = model.forward(&x).unwrap();
        let targets = RegressionTargets {
            observed: vec![(0, y.0[0] + 0.3), (1, y.0[1] - 0.2)],
        };
        let spec = RobustnessSpec {
            kind: PropertyKind::Regression {
                nu: 0.1,
                delta_tol: 0.01,
                reference_mae: None,
            },
            epsilon: 0.01,
            clamp: None,
        };
        let v = verify(&model, &x, Some(&targets), &spec, Method::Gains).unwrap();
        let mae = mean_absolute_error(&y, &targets);
        let bound = v.mae_bound.unwrap();
        assert!(bound >= mae - 1e-9, "bound {bound} below concrete {mae}");
        assert_eq!(
            v.status,
            if bound < 1.1 * mae + 0.01 {
                Status::Verified
            } else {
                Status::Unknown
            }
        );
    }

    #[test]
    fn method_dominance_on_outputs() {
        for seed in 0..12u64 {
            let model = random_model(&RandomModelShape::default(), seed);
            let x = Vector(vec![0.05, -0.2, 0.15]);
            let spec = spec_cls(0, 0.03);
            let vb = verify(&model, &x, None, &spec, Method::Box).unwrap();
            let vl = verify(&model, &x, None, &spec, Method::Linear).unwrap();
            let vg = verify(&model, &x, None, &spec, Method::Gains).unwrap();
            let wb = vb.output_bounds.widths();
            let wl = vl.output_bounds.widths();
            let wg = vg.output_bounds.widths();
            for i in 0..wb.len() {
                assert!(wg[i] <= wb[i] + 1e-12, "seed {seed} neuron {i} vs box");
                assert!(wg[i] <= wl[i] + 1e-12, "seed {seed} neuron {i} vs linear");
            }
        }
    }

    #[test]
    fn epsilon_monotonicity_of_output_boxes() {
        for seed in 0..10u64 {
            let model = random_model(&RandomModelShape::default(), seed);
            let x = Vector(vec![0.1, 0.1, -0.05]);
            for method in [Method::Box, Method::Gains] {
                let small = verify(&model, &x, None, &spec_cls(0, 0.01), method).unwrap();
                let large = verify(&model, &x, None, &spec_cls(0, 0.04), method).unwrap();
                for i in 0..small.output_bounds.dim() {
                    assert!(
                        large.output_bounds.lower.0[i] <= small.output_bounds.lower.0[i] + 1e-9,
                        "seed {seed} {method:?}"
                    );
                    assert!(
                        large.output_bounds.upper.0[i] >= small.output_bounds.upper.0[i] - 1e-9,
                        "seed {seed} {method:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn sampling_respects_certified_bounds() {
        for seed in 0..6u64 {
            let model = random_model(&RandomModelShape::default(), seed);
            let x = Vector(vec![-0.1, 0.25, 0.0]);
            let spec = spec_cls(1, 0.05);
            for method in [Method::Box, Method::Linear, Method::Gains] {
                let v = verify(&model, &x, None, &spec, method).unwrap();
                let report =
                    empirical_soundness(&model, &x, &spec, &v.output_bounds, 400, seed).unwrap();
                assert_eq!(report.max_violation, 0.0, "seed {seed} {method:?}");
                assert!(report.witness.is_none());
            }
        }
    }

    #[test]
    fn fan_in_merge_dominates_pathwise_bounds() {
        // affine-only dynamics: wherever trajectories split and remerge,
        // the aggregated entry bound must dominate every pathwise bound at
        // every input corner. The tolerance ladder is scanned until a
        // genuinely branching graph appears so the check cannot go vacuous.
        use crate::graph::{build_graph, ModelStepper};

        let mut exercised = 0usize;
        'search: for seed in 17..25u64 {
            {
                let mut model = random_model(&RandomModelShape::default(), seed);
                // strip the ReLU to keep the step maps exact
                model.dynamics.layers = vec![
                    model.dynamics.layers[0].clone(),
                    model.dynamics.layers[2].clone(),
                ];
                let region = IntervalBox::linf_ball(&Vector(vec![0.2, -0.1, 0.3]), 0.2);
                // probe the entry step at unit tolerance, then place the
                // tolerance mid-interval so the first step must split
                let probe = crate::domains::abstract_rk_step(
                    &model.dynamics.layers,
                    1.0,
                    &region,
                    0.0,
                    model.solver_cfg.eta,
                    model.solver_cfg.tableau,
                    BoundMode::Linear(ReluPolicy::AreaMin),
                )
                .unwrap();
                let delta = probe.delta.unwrap();
                if delta.hi <= delta.lo * 1.001 {
                    continue;
                }
                model.solver_cfg.tau = 0.5 * (delta.lo + delta.hi);
                let stepper = ModelStepper::new(&model, BoundMode::Linear(ReluPolicy::AreaMin));
                let Ok(graph) = build_graph(&stepper, &region, &model.solver_cfg) else {
                    continue;
                };
                let paths = graph.enumerate_paths(64);
                if paths.len() < 2 {
                    continue;
                }
                let query = LinearBounds::identity(3);
                let merged = graph_backsubstitute(&graph, 0, &query).unwrap();
                for path in paths {
                    let mut bounds = query.clone();
                    for (key, decision) in path.iter().rev() {
                        if *decision != crate::solver::Decision::Decrease {
                            let node = graph.node(key).unwrap();
                            let (_, maps) = &node.step.as_ref().unwrap().tracks[0];
                            bounds = substitute(&bounds, maps).unwrap();
                        }
                    }
                    for corner in region.corners() {
                        let merged_hi = merged.upper.apply(&corner).unwrap();
                        let path_hi = bounds.upper.apply(&corner).unwrap();
                        let merged_lo = merged.lower.apply(&corner).unwrap();
                        let path_lo = bounds.lower.apply(&corner).unwrap();
                        for i in 0..3 {
                            assert!(
                                merged_hi.0[i] >= path_hi.0[i] - 1e-9,
                                "merged upper fails to dominate a pathwise bound"
                            );
                            assert!(
                                merged_lo.0[i] <= path_lo.0[i] + 1e-9,
                                "merged lower fails to dominate a pathwise bound"
                            );
                        }
                    }
                }
                exercised += 1;
                if exercised >= 3 {
                    break 'search;
                }
            }
        }
        assert!(exercised >= 1, "no branching configuration found");
    }

    #[test]
    fn single_path_backsubstitution_matches_concrete() {
        // degenerate region: the entry bounds concretize to the exact
        // concrete output of the integration
        let model = random_model(&RandomModelShape::default(), 5);
        let z0 = Vector(vec![0.2, 0.1, -0.3]);
        let stepper = ModelStepper::new(&model, BoundMode::Linear(ReluPolicy::AreaMin));
        let graph = build_graph(&stepper, &IntervalBox::point(&z0), &model.solver_cfg).unwrap();
        let query = LinearBounds::identity(3);
        let at_entry = graph_backsubstitute(&graph, 0, &query).unwrap();
        let concrete = concretize(&at_entry, &IntervalBox::point(&z0)).unwrap();
        let (z_end, _) =
            crate::solver::cas_integrate(&model.dynamics, &z0, &model.solver_cfg).unwrap();
        for i in 0..3 {
            assert!((concrete.lower.0[i] - z_end.0[i]).abs() < 1e-9);
            assert!((concrete.upper.0[i] - z_end.0[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn falsification_needs_witness() {
        // a model that always misclassifies towards class 1
        let mut model = random_model(&RandomModelShape::default(), 2);
        if let LayerSpec::Linear(map) = &mut model.decoder[0] {
            map.offset = Vector(vec![-5.0, 5.0]);
            for v in map.coeffs.data.iter_mut() {
                *v *= 0.01;
            }
        }
        let x = Vector(vec![0.0, 0.0, 0.0]);
        let spec = spec_cls(0, 0.01);
        let witness = witness_search(&model, &x, None, &spec, 16, 0).unwrap();
        let w = witness.expect("misclassification must be found");
        let y = model.forward(&w).unwrap();
        assert!(y.0[1] > y.0[0], "witness must reproduce the violation");
    }
}

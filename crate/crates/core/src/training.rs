//! Trajectory sampling over the graph and robust-loss bookkeeping used by
//! certified training loops, plus the perturbation and probability
//! schedules. No gradients live here; the training loop itself is out of
//! scope and only the value-level machinery is provided.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::TrajectoryGraph;
use crate::solver::{Decision, StepKey};

/// Sampling configuration.
#[derive(Debug, Clone)]
pub struct SampleConfig {
    /// Maximum number of trajectories to collect.
    pub kappa: usize,
    pub q1: f64,
    pub q2: f64,
    pub seed: u64,
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q1 < 0.0 || self.q2 < 0.0 || self.q1 + self.q2 > 1.0 {
            return Err(Error::Invariant(format!(
                "sampling probabilities q1={}, q2={} invalid",
                self.q1, self.q2
            )));
        }
        if self.kappa == 0 {
            return Err(Error::Invariant("kappa must be positive".into()));
        }
        Ok(())
    }
}

/// A vertex of a walked path with the update taken to leave it.
pub type PathStep = (StepKey, Decision);

fn update_rank(d: Decision) -> i64 {
    match d {
        Decision::Decrease => 0,
        Decision::Accept => 1,
        Decision::Increase => 2,
    }
}

/// Signed count comparing a path's step decisions against the reference
/// trajectory: each path vertex is matched to the reference vertex at
/// minimal l1 distance in `(t, h)`, and the ranks of the taken updates are
/// differenced. Positive means the path has run ahead with larger steps.
pub fn location_index(path: &[PathStep], reference: &[PathStep]) -> i64 {
    assert!(!reference.is_empty(), "reference trajectory is empty");
    let mut n = 0i64;
    for (key, update) in path {
        let (t, h) = (key.t_f64(), key.h_f64());
        let nearest = reference
            .iter()
            .min_by(|a, b| {
                let da = (a.0.t_f64() - t).abs() + (a.0.h_f64() - h).abs();
                let db = (b.0.t_f64() - t).abs() + (b.0.h_f64() - h).abs();
                da.total_cmp(&db)
            })
            .unwrap();
        n += update_rank(*update) - update_rank(nearest.1);
    }
    n
}

/// Sampling distribution over (decrease, accept, increase): the update that
/// pulls the location index toward zero always carries the bulk weight
/// `1 - q1 - q2`, the one pushing it away carries `q1`.
pub fn update_probabilities(
    n: i64,
    ref_update: Decision,
    q1: f64,
    q2: f64,
) -> (f64, f64, f64) {
    let bulk = 1.0 - q1 - q2;
    if n == 0 && ref_update == Decision::Accept {
        ((q1 + q2) / 2.0, bulk, (q1 + q2) / 2.0)
    } else if n > 0 || (n == 0 && ref_update == Decision::Decrease) {
        (bulk, q2, q1)
    } else {
        (q1, q2, bulk)
    }
}

/// A resumable branching point: the prefix walked so far plus the branch
/// decisions already explored from here.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub node: StepKey,
    /// Vertices traversed up to (not including) this node, with updates.
    pub visited: Vec<PathStep>,
    /// Location index of the visited prefix, stored at creation.
    pub location: i64,
    tried: BTreeSet<Decision>,
}

const WALK_BUDGET: usize = 200_000;

/// Samples up to `kappa` distinct trajectories from the graph, walking from
/// the entry and resuming from the most promising branching points. At a
/// split, the update is drawn from the reference-relative distribution
/// restricted to the feasible (untried) branches; each split leaves a
/// checkpoint behind so unexplored branches stay reachable.
pub fn sample_trajectories(
    graph: &TrajectoryGraph,
    reference: &[PathStep],
    cfg: &SampleConfig,
) -> Result<Vec<Vec<PathStep>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stored: BTreeSet<Vec<PathStep>> = BTreeSet::new();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut visits = 0usize;

    // the first walk starts at the entry; later walks resume checkpoints
    let mut resume: Option<(StepKey, Vec<PathStep>, Option<usize>)> =
        Some((graph.entry.clone(), Vec::new(), None));

    while let Some((start, prefix, checkpoint_idx)) = resume.take() {
        let mut key = start;
        let mut path = prefix;
        let mut first_forced: Option<Decision> = None;
        if let Some(idx) = checkpoint_idx {
            // resume: sample among the branches not yet tried here
            let cp = &mut checkpoints[idx];
            let node = &graph.nodes[&cp.node];
            let feasible: Vec<(Decision, StepKey)> = node
                .outgoing
                .iter()
                .filter(|(d, _)| !cp.tried.contains(d))
                .cloned()
                .collect();
            if feasible.is_empty() {
                checkpoints.swap_remove(idx);
                resume = next_start(&checkpoints, &stored, reference, graph);
                continue;
            }
            let pick = sample_update(&feasible, &cp.visited, &cp.node, reference, cfg, &mut rng);
            cp.tried.insert(pick);
            first_forced = Some(pick);
            if cp.tried.len() == node.outgoing.len() {
                checkpoints.swap_remove(idx);
            }
        }

        loop {
            visits += 1;
            if visits > WALK_BUDGET {
                return Err(Error::StepBudget {
                    steps: visits,
                    t: key.t_f64(),
                });
            }
            if key == graph.terminal {
                stored.insert(path);
                break;
            }
            let node = graph
                .node(&key)
                .ok_or_else(|| Error::Invariant(format!("walk left the graph at {key}")))?;
            let (decision, succ) = if let Some(forced) = first_forced.take() {
                node.outgoing
                    .iter()
                    .find(|(d, _)| *d == forced)
                    .cloned()
                    .expect("forced branch exists")
            } else if node.outgoing.len() == 1 {
                node.outgoing[0].clone()
            } else {
                let pick =
                    sample_update(&node.outgoing, &path, &key, reference, cfg, &mut rng);
                checkpoints.push(Checkpoint {
                    node: key.clone(),
                    visited: path.clone(),
                    location: location_index(&path, reference),
                    tried: BTreeSet::from([pick]),
                });
                node.outgoing
                    .iter()
                    .find(|(d, _)| *d == pick)
                    .cloned()
                    .expect("sampled branch exists")
            };
            path.push((key.clone(), decision));
            key = succ;
        }

        if stored.len() >= cfg.kappa {
            break;
        }
        resume = next_start(&checkpoints, &stored, reference, graph);
    }

    Ok(stored.into_iter().collect())
}

/// Checkpoint selection: favors under-explored regions (location index far
/// from the stored average) and early, tight branching points.
fn next_start(
    checkpoints: &[Checkpoint],
    stored: &BTreeSet<Vec<PathStep>>,
    reference: &[PathStep],
    graph: &TrajectoryGraph,
) -> Option<(StepKey, Vec<PathStep>, Option<usize>)> {
    if checkpoints.is_empty() {
        return None;
    }
    let n_stored: f64 = if stored.is_empty() {
        0.0
    } else {
        stored
            .iter()
            .map(|p| location_index(p, reference) as f64)
            .sum::<f64>()
            / stored.len() as f64
    };
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, cp) in checkpoints.iter().enumerate() {
        let width = graph
            .node(&cp.node)
            .map(|n| n.bounds.total_width())
            .unwrap_or(0.0);
        let score = (cp.location as f64 - n_stored).abs() / 2.0 - cp.visited.len() as f64 - width;
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    let cp = &checkpoints[best];
    Some((cp.node.clone(), cp.visited.clone(), Some(best)))
}

fn sample_update(
    feasible: &[(Decision, StepKey)],
    visited: &[PathStep],
    at: &StepKey,
    reference: &[PathStep],
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Decision {
    let n = location_index(visited, reference);
    let (t, h) = (at.t_f64(), at.h_f64());
    let nearest = reference
        .iter()
        .min_by(|a, b| {
            let da = (a.0.t_f64() - t).abs() + (a.0.h_f64() - h).abs();
            let db = (b.0.t_f64() - t).abs() + (b.0.h_f64() - h).abs();
            da.total_cmp(&db)
        })
        .map(|(_, u)| *u)
        .unwrap_or(Decision::Accept);
    let (p_d, p_a, p_i) = update_probabilities(n, nearest, cfg.q1, cfg.q2);
    let weight = |d: Decision| match d {
        Decision::Decrease => p_d,
        Decision::Accept => p_a,
        Decision::Increase => p_i,
    };
    let total: f64 = feasible.iter().map(|(d, _)| weight(*d)).sum();
    if total <= 0.0 {
        // every feasible branch has zero mass: fall back to uniform
        let idx = rng.random_range(0..feasible.len());
        return feasible[idx].0;
    }
    let mut draw = rng.random_range(0.0..total);
    for (d, _) in feasible {
        let w = weight(*d);
        if draw < w {
            return *d;
        }
        draw -= w;
    }
    feasible.last().unwrap().0
}

// ---------------------------------------------------------------------------
// loss value and schedules
// ---------------------------------------------------------------------------

/// Certified-training loss value: the standard and robust losses blended by
/// the annealed perturbation ratio, plus an output-width regularizer.
pub fn robust_loss_value(
    std_loss: f64,
    rob_loss: f64,
    widths: &[f64],
    eps_prime: f64,
    eps_t: f64,
    w1: f64,
    w2: f64,
) -> f64 {
    assert!(eps_t > 0.0, "target perturbation must be positive");
    assert!(
        (0.0..=eps_t).contains(&eps_prime),
        "annealed perturbation out of range"
    );
    let mix = w1 * eps_prime / eps_t;
    let width_norm: f64 = widths.iter().map(|w| w.abs()).sum();
    (1.0 - mix) * std_loss + mix * rob_loss + w2 * width_norm
}

/// Perturbation ramp from 0 to `eps_t` between `e_start` and `e_end`:
/// exponential from `1e-3 * eps_t` up to the knee value `0.25 * eps_t` at
/// fraction `mid` of the ramp, then linear to the target. The exact curve
/// shape is a convention of this implementation; monotonicity and the
/// endpoints are the load-bearing properties.
pub fn smooth_schedule(eps_t: f64, e_start: f64, e_end: f64, mid: f64, epoch: f64) -> f64 {
    assert!(e_start < e_end, "schedule needs e_start < e_end");
    assert!(mid > 0.0 && mid < 1.0, "mid must be a ramp fraction");
    if epoch <= e_start {
        return 0.0;
    }
    if epoch >= e_end {
        return eps_t;
    }
    let s = (epoch - e_start) / (e_end - e_start);
    let floor = 1e-3;
    let knee = 0.25;
    if s <= mid {
        eps_t * floor * (knee / floor).powf(s / mid)
    } else {
        eps_t * (knee + (1.0 - knee) * (s - mid) / (1.0 - mid))
    }
}

/// Sinusoidal ramp of a sampling probability between two epochs.
pub fn sin_schedule(q_start: f64, q_end: f64, e1: f64, e2: f64, epoch: f64) -> f64 {
    assert!(e1 < e2, "schedule needs e1 < e2");
    if epoch <= e1 {
        q_start
    } else if epoch > e2 {
        q_end
    } else {
        let e_mid = (e1 + e2) / 2.0;
        (std::f64::consts::PI * (epoch - e_mid) / (e2 - e1)).sin() * (q_end - q_start) / 2.0
            + (q_end + q_start) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::BoundMode;
    use crate::graph::{branching_demo, build_graph, ModelStepper};
    use crate::math::{IntervalBox, Vector};
    use crate::model::{random_model, RandomModelShape};
    use crate::solver::cas_integrate_traced;

    fn key(t: f64, h: f64) -> StepKey {
        StepKey::from_f64(t, h)
    }

    #[test]
    fn location_index_table_arithmetic() {
        let reference = vec![
            (key(0.0, 0.5), Decision::Accept),
            (key(0.5, 0.5), Decision::Accept),
        ];
        // same keys, different updates: (i, a) against (a, a)
        let path = vec![
            (key(0.0, 0.5), Decision::Increase),
            (key(0.5, 0.5), Decision::Accept),
        ];
        assert_eq!(location_index(&path, &reference), 1);
        assert_eq!(location_index(&reference, &reference), 0);

        let reference = vec![
            (key(0.0, 0.5), Decision::Accept),
            (key(0.5, 0.5), Decision::Increase),
        ];
        let path = vec![
            (key(0.0, 0.5), Decision::Decrease),
            (key(0.5, 0.5), Decision::Decrease),
        ];
        assert_eq!(location_index(&path, &reference), -3);
    }

    #[test]
    fn probabilities_match_the_table() {
        let p = update_probabilities(0, Decision::Accept, 0.15, 0.15);
        assert_eq!(p, (0.15, 0.7, 0.15));
        let p = update_probabilities(2, Decision::Increase, 0.1, 0.2);
        assert!((p.0 - 0.7).abs() < 1e-15 && p.1 == 0.2 && p.2 == 0.1);
        let p = update_probabilities(-1, Decision::Accept, 0.1, 0.2);
        assert!(p.0 == 0.1 && p.1 == 0.2 && (p.2 - 0.7).abs() < 1e-15);
    }

    #[test]
    fn probabilities_sum_to_one() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let q1: f64 = rng.random_range(0.0..0.5);
            let q2: f64 = rng.random_range(0.0..(1.0 - q1).min(0.5));
            for n in [-2i64, -1, 0, 1, 2] {
                for u in [Decision::Decrease, Decision::Accept, Decision::Increase] {
                    let (a, b, c) = update_probabilities(n, u, q1, q2);
                    assert!((a + b + c - 1.0).abs() < 1e-12);
                    assert!(a >= 0.0 && b >= 0.0 && c >= 0.0);
                }
            }
        }
    }

    fn demo_graph_and_reference() -> (TrajectoryGraph, Vec<PathStep>) {
        let (stepper, cfg) = branching_demo();
        let region = IntervalBox::linf_ball(&Vector::zeros(1), 0.1);
        let graph = build_graph(&stepper, &region, &cfg).unwrap();
        // reference: the all-accept path through the demo graph
        let reference = vec![
            (key(0.0, 0.5), Decision::Accept),
            (key(0.5, 0.5), Decision::Accept),
        ];
        (graph, reference)
    }

    #[test]
    fn no_splits_yields_reference_only() {
        let model = random_model(&RandomModelShape::default(), 6);
        let z0 = Vector(vec![0.1, -0.2, 0.3]);
        let stepper = ModelStepper::new(&model, BoundMode::Ibp);
        let graph =
            build_graph(&stepper, &IntervalBox::point(&z0), &model.solver_cfg).unwrap();
        let (_, reference) = cas_integrate_traced(&model.dynamics, &z0, &model.solver_cfg).unwrap();
        let cfg = SampleConfig {
            kappa: 5,
            q1: 0.15,
            q2: 0.15,
            seed: 0,
        };
        let sampled = sample_trajectories(&graph, &reference, &cfg).unwrap();
        assert_eq!(sampled.len(), 1);
        assert_eq!(sampled[0], reference);
    }

    #[test]
    fn zero_probabilities_walk_deterministically() {
        let (graph, reference) = demo_graph_and_reference();
        let cfg = SampleConfig {
            kappa: 1,
            q1: 0.0,
            q2: 0.0,
            seed: 7,
        };
        let sampled = sample_trajectories(&graph, &reference, &cfg).unwrap();
        assert_eq!(sampled.len(), 1);
        // with n = 0 and reference update "accept", all mass sits on accept
        for (k, d) in &sampled[0] {
            if graph.nodes[k].outgoing.len() > 1 {
                assert_eq!(*d, Decision::Accept);
            }
        }
    }

    #[test]
    fn kappa_paths_are_distinct_and_valid() {
        let (graph, reference) = demo_graph_and_reference();
        let total_paths = graph.enumerate_paths(1000).len();
        assert_eq!(total_paths, 9);
        for seed in 0..100u64 {
            let cfg = SampleConfig {
                kappa: 3,
                q1: 0.15,
                q2: 0.15,
                seed,
            };
            let sampled = sample_trajectories(&graph, &reference, &cfg).unwrap();
            assert_eq!(sampled.len(), 3, "seed {seed}");
            for path in &sampled {
                let mut keys: Vec<StepKey> = path.iter().map(|(k, _)| k.clone()).collect();
                keys.push(graph.terminal.clone());
                assert!(graph.contains_trajectory(&keys), "seed {seed}");
            }
        }
    }

    #[test]
    fn kappa_saturates_at_path_count() {
        let (graph, reference) = demo_graph_and_reference();
        let cfg = SampleConfig {
            kappa: 50,
            q1: 0.15,
            q2: 0.15,
            seed: 3,
        };
        let sampled = sample_trajectories(&graph, &reference, &cfg).unwrap();
        assert_eq!(sampled.len(), 9, "all distinct paths found");
    }

    #[test]
    fn loss_value_cases() {
        let widths = vec![0.5, 0.25];
        // no annealing: standard loss plus the width regularizer
        let v = robust_loss_value(2.0, 9.0, &widths, 0.0, 0.1, 0.5, 0.01);
        assert!((v - (2.0 + 0.01 * 0.75)).abs() < 1e-15);
        // plain standard-training configuration
        let v = robust_loss_value(2.0, 9.0, &widths, 0.05, 0.1, 0.0, 0.0);
        assert_eq!(v, 2.0);
        // fully annealed with w1 = 2/3
        let v = robust_loss_value(3.0, 6.0, &widths, 0.1, 0.1, 2.0 / 3.0, 0.01);
        assert!((v - (1.0 + 4.0 + 0.01 * 0.75)).abs() < 1e-12);
    }

    #[test]
    fn sin_schedule_cases() {
        assert_eq!(sin_schedule(0.15, 0.33, 10.0, 80.0, 5.0), 0.15);
        assert_eq!(sin_schedule(0.15, 0.33, 10.0, 80.0, 100.0), 0.33);
        let mid = sin_schedule(0.15, 0.33, 10.0, 80.0, 45.0);
        assert!((mid - 0.24).abs() < 1e-12);
    }

    #[test]
    fn smooth_schedule_shape() {
        let (eps_t, e0, e1, mid) = (0.11, 5.0, 65.0, 0.6);
        assert_eq!(smooth_schedule(eps_t, e0, e1, mid, 0.0), 0.0);
        assert_eq!(smooth_schedule(eps_t, e0, e1, mid, 5.0), 0.0);
        assert_eq!(smooth_schedule(eps_t, e0, e1, mid, 65.0), eps_t);
        assert_eq!(smooth_schedule(eps_t, e0, e1, mid, 100.0), eps_t);
        let mut prev = 0.0;
        for e in 0..=130 {
            let v = smooth_schedule(eps_t, e0, e1, mid, e as f64 / 2.0);
            assert!(v >= prev - 1e-15, "schedule dipped at {e}");
            assert!((0.0..=eps_t + 1e-15).contains(&v));
            prev = v;
        }
    }
}

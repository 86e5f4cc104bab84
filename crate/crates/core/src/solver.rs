//! Concrete Runge-Kutta stepping, standard adaptive step control, and the
//! controlled adaptive step controller restricted to an exponentially
//! spaced step-size grid.
//!
//! Time and step-size bookkeeping for the controlled solver uses exact
//! rational arithmetic so that solver states can be compared and merged
//! without relying on float equality.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::math::Vector;
pub use crate::tableau::Tableau;

/// Right-hand side of an ODE: `dz/dt = eval(t, z)`.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, z: &Vector) -> Result<Vector>;
}

/// A vector field given by a closure, for ad-hoc dynamics.
pub struct FnField<F: Fn(f64, &Vector) -> Vector> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(f64, &Vector) -> Vector> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, z: &Vector) -> Result<Vector> {
        Ok((self.f)(t, z))
    }
}

/// Exact rational scalar used for solver-state bookkeeping.
pub type Rat = BigRational;

pub fn rat_from_f64(x: f64) -> Rat {
    BigRational::from_float(x).expect("finite float")
}

pub fn rat_to_f64(x: &Rat) -> f64 {
    x.to_f64().expect("rational fits in f64 range")
}

/// Exact solver state identifier `(t, h)`. The terminal state of an
/// integration carries `h == 0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StepKey {
    pub t: Rat,
    pub h: Rat,
}

impl StepKey {
    pub fn new(t: Rat, h: Rat) -> Self {
        StepKey { t, h }
    }

    pub fn from_f64(t: f64, h: f64) -> Self {
        StepKey {
            t: rat_from_f64(t),
            h: rat_from_f64(h),
        }
    }

    pub fn terminal(t_end: &Rat) -> Self {
        StepKey {
            t: t_end.clone(),
            h: Rat::zero(),
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.h.is_zero()
    }

    pub fn t_f64(&self) -> f64 {
        rat_to_f64(&self.t)
    }

    pub fn h_f64(&self) -> f64 {
        rat_to_f64(&self.h)
    }
}

/// Frontier processing order: smallest time first, then largest step size.
impl Ord for StepKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.t
            .cmp(&other.t)
            .then_with(|| other.h.cmp(&self.h))
    }
}

impl PartialOrd for StepKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl std::fmt::Display for StepKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{}", self.t_f64(), self.h_f64())
    }
}

/// Step-size update chosen by the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Decision {
    Increase,
    Accept,
    Decrease,
}

impl Decision {
    pub fn short(&self) -> &'static str {
        match self {
            Decision::Increase => "i",
            Decision::Accept => "a",
            Decision::Decrease => "d",
        }
    }
}

/// Solver configuration shared by the adaptive and controlled controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Step-size update factor, an integer >= 2.
    pub alpha: u32,
    /// Absolute error tolerance normalizing the error estimate.
    pub tau: f64,
    /// Minimum allowed step size.
    pub h_min: f64,
    /// Initial step size (tracked externally as an exponential moving average).
    pub eta: f64,
    /// Momentum of the initial-step moving average.
    pub beta: f64,
    /// Final integration time.
    pub t_end: f64,
    /// Order of the stepping method.
    pub order: u32,
    /// Rejections of clipped steps tolerated before error control is
    /// abandoned for the rest of the integration.
    pub max_rejections_after_clip: u32,
    pub tableau: Tableau,
    /// Hard cap on attempted steps; defaults to `10 * t_end / h_min`.
    pub step_budget: Option<usize>,
}

impl SolverConfig {
    /// Decision threshold separating "increase" from "accept".
    pub fn tau_alpha(&self) -> f64 {
        (self.alpha as f64).powi(-(self.order as i32))
    }

    pub fn budget(&self) -> usize {
        self.step_budget
            .unwrap_or_else(|| (10.0 * self.t_end / self.h_min).ceil() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 2 {
            return Err(Error::Invariant(format!(
                "alpha must be an integer >= 2, got {}",
                self.alpha
            )));
        }
        for (name, v) in [
            ("tau", self.tau),
            ("h_min", self.h_min),
            ("eta", self.eta),
            ("t_end", self.t_end),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Invariant(format!(
                    "solver_cfg.{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.h_min > self.t_end {
            return Err(Error::Invariant(format!(
                "h_min {} exceeds t_end {}",
                self.h_min, self.t_end
            )));
        }
        if self.order == 0 {
            return Err(Error::Invariant("order must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Invariant(format!(
                "beta must be in (0,1), got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Exact-rational views of the configuration values used in bookkeeping.
#[derive(Debug, Clone)]
pub struct ExactConfig {
    pub alpha: BigInt,
    pub t_end: Rat,
    pub h_min: Rat,
    pub eta: Rat,
}

impl ExactConfig {
    pub fn from_cfg(cfg: &SolverConfig) -> Self {
        ExactConfig {
            alpha: BigInt::from(cfg.alpha),
            t_end: rat_from_f64(cfg.t_end),
            h_min: rat_from_f64(cfg.h_min),
            eta: rat_from_f64(cfg.eta),
        }
    }

    pub fn scale_up(&self, h: &Rat) -> Rat {
        h * Rat::from_integer(self.alpha.clone())
    }

    pub fn scale_down(&self, h: &Rat) -> Rat {
        h / Rat::from_integer(self.alpha.clone())
    }

    /// Clip a proposed step to the remaining time. Returns the effective
    /// step and whether clipping reduced it.
    pub fn clip(&self, t: &Rat, h: &Rat) -> (Rat, bool) {
        let remaining = &self.t_end - t;
        if *h > remaining {
            (remaining, true)
        } else {
            (h.clone(), false)
        }
    }
}

/// Per-trajectory controller flags: sticky degenerate mode and the clip
/// rejection counter.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepControl {
    /// A clipped step was attempted somewhere on this trajectory.
    pub clipped_seen: bool,
    /// Rejections counted after the first clipped attempt.
    pub rejections_after_clip: u32,
    /// Error control abandoned: every following step is accepted at a
    /// fixed step size.
    pub forced: bool,
}

/// Result of applying one controller decision at state `(t, h_eff)`.
#[derive(Debug, Clone)]
pub struct Transition {
    /// Successor state, not yet clipped.
    pub t: Rat,
    pub h: Rat,
    pub control: StepControl,
    /// The decision after guard handling: a rejection that would drop below
    /// the minimum step size (or overflow the clip-rejection budget) is
    /// converted into a forced acceptance.
    pub effective: Decision,
}

impl Transition {
    pub fn moves(&self) -> bool {
        self.effective != Decision::Decrease
    }
}

/// Shared successor semantics for the controlled solver and the trajectory
/// graph: step-size updates on the exact grid, minimum-step and
/// clip-rejection guards included.
pub fn apply_decision(
    t: &Rat,
    h_eff: &Rat,
    step_clipped: bool,
    ctrl: &StepControl,
    decision: Decision,
    exact: &ExactConfig,
    cfg: &SolverConfig,
) -> Transition {
    let clipped_seen = ctrl.clipped_seen || step_clipped;
    match decision {
        Decision::Increase => Transition {
            t: t + h_eff,
            h: exact.scale_up(h_eff),
            control: StepControl {
                clipped_seen,
                rejections_after_clip: ctrl.rejections_after_clip,
                forced: ctrl.forced,
            },
            effective: Decision::Increase,
        },
        Decision::Accept => Transition {
            t: t + h_eff,
            h: h_eff.clone(),
            control: StepControl {
                clipped_seen,
                rejections_after_clip: ctrl.rejections_after_clip,
                forced: ctrl.forced,
            },
            effective: Decision::Accept,
        },
        Decision::Decrease => {
            let rejections = ctrl.rejections_after_clip + u32::from(clipped_seen);
            let shrunk = exact.scale_down(h_eff);
            let overflow = clipped_seen && rejections > cfg.max_rejections_after_clip;
            if overflow || shrunk < exact.h_min {
                // error control cannot continue: fix the step size and
                // accept this and every following step
                Transition {
                    t: t + h_eff,
                    h: h_eff.clone(),
                    control: StepControl {
                        clipped_seen,
                        rejections_after_clip: rejections,
                        forced: true,
                    },
                    effective: Decision::Accept,
                }
            } else {
                Transition {
                    t: t.clone(),
                    h: shrunk,
                    control: StepControl {
                        clipped_seen,
                        rejections_after_clip: rejections,
                        forced: false,
                    },
                    effective: Decision::Decrease,
                }
            }
        }
    }
}

/// One embedded Runge-Kutta step: returns the propagated higher-order
/// solution and, for embedded pairs, the lower-order comparison solution.
pub fn rk_step(
    dynamics: &dyn VectorField,
    z: &Vector,
    t: f64,
    h: f64,
    tableau: Tableau,
) -> Result<(Vector, Option<Vector>)> {
    assert!(h > 0.0, "step size must be positive");
    let pair = tableau.coefficients();
    let mut stages: Vec<Vector> = Vec::with_capacity(pair.stages);
    for i in 0..pair.stages {
        let mut y = z.clone();
        for (j, &a) in pair.a[i].iter().enumerate() {
            if a != 0.0 {
                y = y.add_scaled(h * a, &stages[j]);
            }
        }
        let k = dynamics.eval(t + pair.c[i] * h, &y)?;
        if !k.is_finite() {
            return Err(Error::SolverDivergence { t, h });
        }
        stages.push(k);
    }
    let mut z1 = z.clone();
    for (i, &b) in pair.b.iter().enumerate() {
        if b != 0.0 {
            z1 = z1.add_scaled(h * b, &stages[i]);
        }
    }
    if !z1.is_finite() {
        return Err(Error::SolverDivergence { t, h });
    }
    let z2 = match &pair.err {
        None => None,
        Some(err) => {
            let mut delta = Vector::zeros(z.len());
            for (i, &e) in err.iter().enumerate() {
                if e != 0.0 {
                    delta = delta.add_scaled(h * e, &stages[i]);
                }
            }
            Some(z1.sub(&delta))
        }
    };
    Ok((z1, z2))
}

/// Normalized error estimate between the pair's two solutions.
pub fn error_estimate(z1: &Vector, z2: &Vector, tau: f64) -> f64 {
    z1.sub(z2).l1_norm() / tau
}

/// Three-way update rule of the controlled solver.
pub fn cas_decide(delta: f64, tau_alpha: f64) -> Decision {
    assert!(delta >= 0.0, "error estimate must be non-negative");
    if delta <= tau_alpha {
        Decision::Increase
    } else if delta <= 1.0 {
        Decision::Accept
    } else {
        Decision::Decrease
    }
}

/// Controlled adaptive integration: step sizes move on the exponential grid
/// `eta * alpha^k`, clipped exactly to the remaining time. Returns the final
/// state and every attempted solver state in order, ending with the
/// terminal `(t_end, 0)` state.
pub fn cas_integrate(
    dynamics: &dyn VectorField,
    z0: &Vector,
    cfg: &SolverConfig,
) -> Result<(Vector, Vec<StepKey>)> {
    let (z, traced) = cas_integrate_traced(dynamics, z0, cfg)?;
    let mut trajectory: Vec<StepKey> = traced.into_iter().map(|(key, _)| key).collect();
    trajectory.push(StepKey::terminal(&rat_from_f64(cfg.t_end)));
    Ok((z, trajectory))
}

/// Like [`cas_integrate`] but pairs every attempted state with the
/// effective update the controller took there (the terminal state is
/// omitted since no update leaves it).
pub fn cas_integrate_traced(
    dynamics: &dyn VectorField,
    z0: &Vector,
    cfg: &SolverConfig,
) -> Result<(Vector, Vec<(StepKey, Decision)>)> {
    cfg.validate()?;
    if z0.len() != dynamics.dim() {
        return Err(Error::DimensionMismatch {
            context: "cas_integrate initial state",
            expected: dynamics.dim(),
            got: z0.len(),
        });
    }
    let exact = ExactConfig::from_cfg(cfg);
    let tau_alpha = cfg.tau_alpha();
    let budget = cfg.budget();

    let mut t = Rat::zero();
    let mut h = exact.eta.clone();
    let mut ctrl = StepControl::default();
    let mut z = z0.clone();
    let mut trajectory = Vec::new();

    while t < exact.t_end {
        let (h_eff, clipped) = exact.clip(&t, &h);
        let key = StepKey::new(t.clone(), h_eff.clone());
        if trajectory.len() >= budget {
            return Err(Error::StepBudget {
                steps: trajectory.len(),
                t: rat_to_f64(&t),
            });
        }
        let tf = rat_to_f64(&t);
        let hf = rat_to_f64(&h_eff);
        let (z1, z2) = rk_step(dynamics, &z, tf, hf, cfg.tableau)?;
        let decision = if ctrl.forced {
            Decision::Accept
        } else {
            match &z2 {
                Some(z2) => cas_decide(error_estimate(&z1, z2, cfg.tau), tau_alpha),
                // single methods carry no error estimate: fixed-step use
                None => Decision::Accept,
            }
        };
        let tr = apply_decision(&t, &h_eff, clipped, &ctrl, decision, &exact, cfg);
        trajectory.push((key, tr.effective));
        if tr.moves() {
            z = z1;
        }
        t = tr.t;
        h = tr.h;
        ctrl = tr.control;
    }
    Ok((z, trajectory))
}

/// Standard adaptive integration with the multiplicative update
/// `h <- h * delta^(-1/p)` (safety factor one) and acceptance iff
/// `delta <= 1`. Returns the final state and the number of attempted steps.
pub fn as_integrate(
    dynamics: &dyn VectorField,
    z0: &Vector,
    cfg: &SolverConfig,
) -> Result<(Vector, usize)> {
    cfg.validate()?;
    if z0.len() != dynamics.dim() {
        return Err(Error::DimensionMismatch {
            context: "as_integrate initial state",
            expected: dynamics.dim(),
            got: z0.len(),
        });
    }
    let budget = cfg.budget();
    let expo = -1.0 / cfg.order as f64;
    let mut t = 0.0_f64;
    let mut h = cfg.eta;
    let mut z = z0.clone();
    let mut attempts = 0usize;
    let mut forced = false;

    while t < cfg.t_end {
        let remaining = cfg.t_end - t;
        let clipped = h > remaining;
        let h_eff = if clipped { remaining } else { h };
        attempts += 1;
        if attempts > budget {
            return Err(Error::StepBudget { steps: attempts, t });
        }
        let (z1, z2) = rk_step(dynamics, &z, t, h_eff, cfg.tableau)?;
        let delta = match &z2 {
            Some(z2) => error_estimate(&z1, z2, cfg.tau),
            None => 0.0,
        };
        let accepted = forced || delta <= 1.0;
        if accepted {
            z = z1;
            t = if clipped { cfg.t_end } else { t + h_eff };
        }
        if !forced {
            let factor = if delta > 0.0 {
                delta.powf(expo)
            } else {
                f64::INFINITY
            };
            let h_next = h_eff * factor;
            if !accepted && h_next < cfg.h_min {
                // same degenerate guard as the controlled solver
                forced = true;
                h = h_eff;
            } else {
                h = h_next.min(cfg.t_end);
            }
        }
    }
    Ok((z, attempts))
}

/// Fixed-step integration (last step clipped), used for order studies and
/// single-method tableaus.
pub fn fixed_step_integrate(
    dynamics: &dyn VectorField,
    z0: &Vector,
    h: f64,
    t_end: f64,
    tableau: Tableau,
) -> Result<Vector> {
    assert!(h > 0.0 && t_end > 0.0);
    let mut z = z0.clone();
    let mut t = 0.0;
    while t < t_end {
        let h_eff = h.min(t_end - t);
        let (z1, _) = rk_step(dynamics, &z, t, h_eff, tableau)?;
        z = z1;
        t = if h_eff < h { t_end } else { t + h };
    }
    Ok(z)
}

/// Two-case initial step estimate from the state and gradient magnitudes,
/// with `gamma = b * tau` for batch size `b`: the magnitude ratio when both
/// are non-negligible, a fixed tiny step otherwise.
pub fn initial_step_estimate(
    dynamics: &dyn VectorField,
    z0: &Vector,
    batch_gamma: f64,
) -> Result<f64> {
    assert!(batch_gamma > 0.0, "gamma must be positive");
    let g0 = dynamics.eval(0.0, z0)?;
    let threshold = 1e-5 * batch_gamma;
    Ok(if z0.l1_norm() >= threshold && g0.l1_norm() >= threshold {
        z0.l1_norm() / (100.0 * g0.l1_norm())
    } else {
        1e-5
    })
}

/// Initial step proposal: the two-case estimate followed by one standard
/// adaptive update on a probe step (applied once, without retrying the
/// probe), capped at the integration horizon.
pub fn initial_step_proposal(
    dynamics: &dyn VectorField,
    z0: &Vector,
    batch_gamma: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    let estimate = initial_step_estimate(dynamics, z0, batch_gamma)?;
    let (z1, z2) = rk_step(dynamics, z0, 0.0, estimate, cfg.tableau)?;
    let h0 = match z2 {
        Some(z2) => {
            let delta = error_estimate(&z1, &z2, cfg.tau);
            if delta > 0.0 {
                estimate * delta.powf(-1.0 / cfg.order as f64)
            } else {
                f64::INFINITY
            }
        }
        None => estimate,
    };
    Ok(h0.min(cfg.t_end))
}

/// Exponential moving average of initial step sizes.
pub fn ema_update(eta: f64, h0: f64, beta: f64) -> f64 {
    (1.0 - beta) * eta + beta * h0
}

/// Checks that a trajectory respects the exact step grid: consecutive keys
/// are related by clip(increase | accept | decrease) transitions and the
/// first step equals the clipped initial step size.
pub fn verify_trajectory_grid(trajectory: &[StepKey], cfg: &SolverConfig) -> Result<()> {
    let exact = ExactConfig::from_cfg(cfg);
    if trajectory.is_empty() {
        return Err(Error::Invariant("empty trajectory".into()));
    }
    let (h0, _) = exact.clip(&Rat::zero(), &exact.eta);
    let first = &trajectory[0];
    if !first.t.is_zero() || first.h != h0 {
        return Err(Error::Invariant(format!(
            "trajectory starts at {first}, expected 0,{}",
            rat_to_f64(&h0)
        )));
    }
    let last = trajectory.last().unwrap();
    if !last.is_terminal() || last.t != exact.t_end {
        return Err(Error::Invariant(format!(
            "trajectory ends at {last}, expected terminal at t_end"
        )));
    }
    for w in trajectory.windows(2) {
        let (cur, next) = (&w[0], &w[1]);
        if next.is_terminal() {
            if &cur.t + &cur.h != exact.t_end {
                return Err(Error::Invariant(format!(
                    "state {cur} cannot reach the terminal in one step"
                )));
            }
            continue;
        }
        let mut matched = false;
        for decision in [Decision::Increase, Decision::Accept, Decision::Decrease] {
            // the stored keys are clipped, so clip the candidate the same way
            let tr = apply_decision(
                &cur.t,
                &cur.h,
                false,
                &StepControl::default(),
                decision,
                &exact,
                cfg,
            );
            let (h_clipped, _) = exact.clip(&tr.t, &tr.h);
            if tr.t == next.t && h_clipped == next.h {
                matched = true;
                break;
            }
        }
        if !matched {
            return Err(Error::Invariant(format!(
                "transition {cur} -> {next} is off the step grid"
            )));
        }
    }
    Ok(())
}

/// True iff `h` equals `eta * alpha^k` for some integer `k`.
pub fn on_step_grid(h: &Rat, cfg: &SolverConfig) -> bool {
    let exact = ExactConfig::from_cfg(cfg);
    if h.is_zero() || exact.eta.is_zero() {
        return false;
    }
    let mut q = h / &exact.eta;
    if q.is_negative() {
        return false;
    }
    let one = Rat::from_integer(BigInt::from(1));
    let alpha = Rat::from_integer(exact.alpha.clone());
    while q > one {
        q /= &alpha;
    }
    while q < one {
        q *= &alpha;
    }
    q == one
}

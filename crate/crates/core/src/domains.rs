//! Interval and linear abstract transformers for layers and for whole
//! Runge-Kutta steps.
//!
//! Linear bounds follow the familiar per-neuron affine bounding scheme: a
//! value `v` reachable from an input region is sandwiched between two
//! affine maps of a reference frame, `lower(x) <= v <= upper(x)`. ReLUs are
//! relaxed by the triangle rule, affine layers substituted exactly, and a
//! whole solver step is composed eagerly into one pair of maps over the
//! step's entry frame so the trajectory graph can backsubstitute through
//! it later.
//!
//! Concrete caches are interval bounds refined by the linear maps: every
//! intermediate box is intersected with the concretization of every active
//! linear track, and the tightened box is what ReLU relaxations see.

use crate::error::{Error, Result};
use crate::math::{
    interval_affine, l1_interval_norm, AffineMap, Interval, IntervalBox, Matrix, Vector,
};
use crate::model::LayerSpec;
use crate::solver::Tableau;

/// Lower-bound slope selection for unstable ReLUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReluPolicy {
    /// Slope minimizing the relaxation area: 1 when `u >= -l`, else 0.
    AreaMin,
    /// Always slope 0.
    AllZero,
    /// Always slope 1.
    AllOne,
}

impl ReluPolicy {
    pub fn lower_slope(&self, l: f64, u: f64) -> f64 {
        match self {
            ReluPolicy::AreaMin => {
                if u >= -l {
                    1.0
                } else {
                    0.0
                }
            }
            ReluPolicy::AllZero => 0.0,
            ReluPolicy::AllOne => 1.0,
        }
    }
}

/// How bounds are propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMode {
    /// Interval bounds only.
    Ibp,
    /// Linear bounds with one ReLU policy (interval-refined caches).
    Linear(ReluPolicy),
    /// Tightest of interval bounds and all three linear policies.
    Gains,
}

impl BoundMode {
    pub fn policies(&self) -> Vec<ReluPolicy> {
        match self {
            BoundMode::Ibp => vec![],
            BoundMode::Linear(p) => vec![*p],
            BoundMode::Gains => vec![ReluPolicy::AreaMin, ReluPolicy::AllZero, ReluPolicy::AllOne],
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, BoundMode::Ibp)
    }
}

/// Elementwise relaxation of one ReLU given pre-activation bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluRelax {
    pub lower_slope: f64,
    pub upper_slope: f64,
    pub upper_offset: f64,
}

/// Triangle relaxation of `max(0, x)` over `[l, u]`: stable sides reduce to
/// the identity or zero map, the unstable case returns the chord upper
/// bound `u/(u-l) (x - l)` and the policy's lower slope.
pub fn relu_relaxation(l: f64, u: f64, policy: ReluPolicy) -> Result<ReluRelax> {
    if l >= u {
        return Err(Error::Invariant(format!(
            "relu relaxation needs l < u, got [{l}, {u}]"
        )));
    }
    Ok(relu_relaxation_cases(l, u, policy))
}

fn relu_relaxation_cases(l: f64, u: f64, policy: ReluPolicy) -> ReluRelax {
    if l >= 0.0 {
        ReluRelax {
            lower_slope: 1.0,
            upper_slope: 1.0,
            upper_offset: 0.0,
        }
    } else if u <= 0.0 {
        ReluRelax {
            lower_slope: 0.0,
            upper_slope: 0.0,
            upper_offset: 0.0,
        }
    } else {
        let slope = u / (u - l);
        ReluRelax {
            lower_slope: policy.lower_slope(l, u),
            upper_slope: slope,
            upper_offset: -l * slope,
        }
    }
}

// ---------------------------------------------------------------------------
// linear bounds
// ---------------------------------------------------------------------------

/// Per-neuron affine lower and upper bounds over a reference frame. The
/// frame itself is positional: whoever holds the bounds knows which box the
/// maps range over.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBounds {
    pub lower: AffineMap,
    pub upper: AffineMap,
}

impl LinearBounds {
    pub fn identity(dim: usize) -> Self {
        LinearBounds {
            lower: AffineMap::identity(dim),
            upper: AffineMap::identity(dim),
        }
    }

    /// Exact bounds (lower == upper) for an affine map.
    pub fn exact(map: AffineMap) -> Self {
        LinearBounds {
            lower: map.clone(),
            upper: map,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.lower.cols()
    }

    /// A single output row as its own bounds pair.
    pub fn row(&self, i: usize) -> LinearBounds {
        let take = |m: &AffineMap| {
            AffineMap::new(
                Matrix::new(1, m.cols(), m.coeffs.row(i).to_vec()).unwrap(),
                Vector(vec![m.offset.0[i]]),
            )
            .unwrap()
        };
        LinearBounds {
            lower: take(&self.lower),
            upper: take(&self.upper),
        }
    }
}

fn split_pos_neg(m: &Matrix) -> (Matrix, Matrix) {
    let mut pos = Matrix::zeros(m.rows, m.cols);
    let mut neg = Matrix::zeros(m.rows, m.cols);
    for (i, &v) in m.data.iter().enumerate() {
        if v >= 0.0 {
            pos.data[i] = v;
        } else {
            neg.data[i] = v;
        }
    }
    (pos, neg)
}

fn add_m(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

/// Substitute variable bounds into a query: `query` bounds `y` in terms of
/// `v`, `through` bounds `v` in terms of `x`; the result bounds `y` in
/// terms of `x`. Positive query coefficients take the upper map of `v`,
/// negative ones the lower map (and symmetrically for the lower bound).
pub fn substitute(query: &LinearBounds, through: &LinearBounds) -> Result<LinearBounds> {
    if query.in_dim() != through.out_dim() {
        return Err(Error::DimensionMismatch {
            context: "substitute frame",
            expected: query.in_dim(),
            got: through.out_dim(),
        });
    }
    let (qu_pos, qu_neg) = split_pos_neg(&query.upper.coeffs);
    let (ql_pos, ql_neg) = split_pos_neg(&query.lower.coeffs);

    let upper_coeffs = add_m(
        &qu_pos.matmul(&through.upper.coeffs)?,
        &qu_neg.matmul(&through.lower.coeffs)?,
    );
    let upper_offset = qu_pos
        .matvec(&through.upper.offset)?
        .add(&qu_neg.matvec(&through.lower.offset)?)
        .add(&query.upper.offset);
    let lower_coeffs = add_m(
        &ql_pos.matmul(&through.lower.coeffs)?,
        &ql_neg.matmul(&through.upper.coeffs)?,
    );
    let lower_offset = ql_pos
        .matvec(&through.lower.offset)?
        .add(&ql_neg.matvec(&through.upper.offset)?)
        .add(&query.lower.offset);

    Ok(LinearBounds {
        lower: AffineMap::new(lower_coeffs, lower_offset)?,
        upper: AffineMap::new(upper_coeffs, upper_offset)?,
    })
}

/// Backsubstitute bounds through a chain of transformers, last applied
/// first, yielding bounds over the chain's input frame.
pub fn backsubstitute(bounds: &LinearBounds, chain: &[LinearBounds]) -> Result<LinearBounds> {
    let mut cur = bounds.clone();
    for record in chain.iter().rev() {
        cur = substitute(&cur, record)?;
    }
    Ok(cur)
}

/// Concrete box implied by linear bounds over the reference frame's box:
/// lower of the lower map, upper of the upper map.
pub fn concretize(bounds: &LinearBounds, input_box: &IntervalBox) -> Result<IntervalBox> {
    let lo = interval_affine(&bounds.lower, input_box)?;
    let hi = interval_affine(&bounds.upper, input_box)?;
    clamp_box(lo.lower, hi.upper)
}

/// Builds a box from independently computed endpoint vectors; tiny
/// floating-point inversions collapse to the midpoint.
fn clamp_box(mut lower: Vector, mut upper: Vector) -> Result<IntervalBox> {
    for i in 0..lower.len() {
        let (l, u) = (lower.0[i], upper.0[i]);
        if l > u {
            let tol = 1e-9 * (1.0 + l.abs().max(u.abs()));
            if l - u > tol {
                return Err(Error::Invariant(format!(
                    "bound inversion {l} > {u} at coordinate {i}"
                )));
            }
            let mid = 0.5 * (l + u);
            lower.0[i] = mid;
            upper.0[i] = mid;
        }
    }
    IntervalBox::new(lower, upper)
}

/// Linear combination of bounds over one shared frame:
/// `base + sum(scale_k * term_k)`. Positive scales pair lower with lower,
/// negative scales swap the maps.
pub fn affine_combination(
    base: Option<&LinearBounds>,
    terms: &[(f64, &LinearBounds)],
    in_dim: usize,
    out_dim: usize,
) -> LinearBounds {
    let mut lower_c = Matrix::zeros(out_dim, in_dim);
    let mut upper_c = Matrix::zeros(out_dim, in_dim);
    let mut lower_o = Vector::zeros(out_dim);
    let mut upper_o = Vector::zeros(out_dim);
    if let Some(b) = base {
        lower_c = b.lower.coeffs.clone();
        upper_c = b.upper.coeffs.clone();
        lower_o = b.lower.offset.clone();
        upper_o = b.upper.offset.clone();
    }
    for (s, term) in terms {
        let (lo_src, hi_src) = if *s >= 0.0 {
            (&term.lower, &term.upper)
        } else {
            (&term.upper, &term.lower)
        };
        for (dst, src) in lower_c.data.iter_mut().zip(&lo_src.coeffs.data) {
            *dst += s * src;
        }
        for (dst, src) in upper_c.data.iter_mut().zip(&hi_src.coeffs.data) {
            *dst += s * src;
        }
        for (dst, src) in lower_o.0.iter_mut().zip(&lo_src.offset.0) {
            *dst += s * src;
        }
        for (dst, src) in upper_o.0.iter_mut().zip(&hi_src.offset.0) {
            *dst += s * src;
        }
    }
    LinearBounds {
        lower: AffineMap::new(lower_c, lower_o).unwrap(),
        upper: AffineMap::new(upper_c, upper_o).unwrap(),
    }
}

fn box_combination(
    base: Option<&IntervalBox>,
    terms: &[(f64, &IntervalBox)],
    dim: usize,
) -> IntervalBox {
    let mut acc = match base {
        Some(b) => b.clone(),
        None => IntervalBox::point(&Vector::zeros(dim)),
    };
    for (s, term) in terms {
        acc = acc.add(&term.scale(*s));
    }
    acc
}

// ---------------------------------------------------------------------------
// layer transformers
// ---------------------------------------------------------------------------

/// Interval transformer for one layer. The time interval is appended as an
/// extra input coordinate for time-concatenated layers.
pub fn ibp_layer(
    layer: &LayerSpec,
    input: &IntervalBox,
    time: Option<Interval>,
) -> Result<IntervalBox> {
    match layer {
        LayerSpec::Linear(m) => interval_affine(m, input),
        LayerSpec::Relu => Ok(IntervalBox {
            lower: Vector(input.lower.0.iter().map(|l| l.max(0.0)).collect()),
            upper: Vector(input.upper.0.iter().map(|u| u.max(0.0)).collect()),
        }),
        LayerSpec::ConcatTimeLinear(m) => {
            let t = time.ok_or(Error::MissingField("time for concat_time_linear"))?;
            let mut lo = input.lower.0.clone();
            let mut hi = input.upper.0.clone();
            lo.push(t.lo);
            hi.push(t.hi);
            interval_affine(m, &IntervalBox::new(Vector(lo), Vector(hi))?)
        }
    }
}

/// Interval transformer for a whole stack.
pub fn ibp_layers(
    layers: &[LayerSpec],
    input: &IntervalBox,
    time: Option<Interval>,
) -> Result<IntervalBox> {
    let mut cur = input.clone();
    for layer in layers {
        cur = ibp_layer(layer, &cur, time)?;
    }
    Ok(cur)
}

/// Time-concatenated affine layer with a concrete time folded into the
/// offset, leaving a plain affine map over the state.
fn bake_time(m: &AffineMap, t: f64) -> AffineMap {
    let d = m.cols() - 1;
    let mut coeffs = Matrix::zeros(m.rows(), d);
    let mut offset = m.offset.clone();
    for i in 0..m.rows() {
        let row = m.coeffs.row(i);
        coeffs.data[i * d..(i + 1) * d].copy_from_slice(&row[..d]);
        offset.0[i] += row[d] * t;
    }
    AffineMap::new(coeffs, offset).unwrap()
}

/// Diagonal relaxation record for a ReLU layer over pre-activation bounds.
fn relu_record(pre: &IntervalBox, policy: ReluPolicy) -> LinearBounds {
    let d = pre.dim();
    let mut lower = Matrix::zeros(d, d);
    let mut upper = Matrix::zeros(d, d);
    let mut upper_off = Vector::zeros(d);
    for i in 0..d {
        let relax = relu_relaxation_cases(pre.lower.0[i], pre.upper.0[i], policy);
        lower.set(i, i, relax.lower_slope);
        upper.set(i, i, relax.upper_slope);
        upper_off.0[i] = relax.upper_offset;
    }
    LinearBounds {
        lower: AffineMap::new(lower, Vector::zeros(d)).unwrap(),
        upper: AffineMap::new(upper, upper_off).unwrap(),
    }
}

/// One linear track walking a layer stack: composite maps over the stack
/// input frame plus the per-layer records needed for query-side
/// backsubstitution.
#[derive(Debug, Clone)]
pub struct StackTrack {
    pub policy: ReluPolicy,
    /// Bounds of the stack output over the stack input frame.
    pub composite: LinearBounds,
    /// One record per layer, each over the previous layer's frame.
    pub records: Vec<LinearBounds>,
}

/// Forward abstraction of a layer stack: interval box refined by every
/// linear track, plus the tracks themselves.
#[derive(Debug, Clone)]
pub struct StackAbstraction {
    pub out_box: IntervalBox,
    pub tracks: Vec<StackTrack>,
}

/// Walks a layer stack in the given mode. `frame_box` is the box of the
/// stack's input frame (the concretization frame for the linear tracks).
pub fn abstract_stack(
    layers: &[LayerSpec],
    frame_box: &IntervalBox,
    mode: BoundMode,
    time: Option<f64>,
) -> Result<StackAbstraction> {
    let policies = mode.policies();
    let dim = frame_box.dim();
    let mut cur_box = frame_box.clone();
    let mut tracks: Vec<StackTrack> = policies
        .iter()
        .map(|p| StackTrack {
            policy: *p,
            composite: LinearBounds::identity(dim),
            records: Vec::new(),
        })
        .collect();

    for layer in layers {
        match layer {
            LayerSpec::Linear(_) | LayerSpec::ConcatTimeLinear(_) => {
                let effective = match layer {
                    LayerSpec::Linear(m) => m.clone(),
                    LayerSpec::ConcatTimeLinear(m) => bake_time(
                        m,
                        time.ok_or(Error::MissingField("time for concat_time_linear"))?,
                    ),
                    LayerSpec::Relu => unreachable!(),
                };
                cur_box = interval_affine(&effective, &cur_box)?;
                for track in &mut tracks {
                    let record = LinearBounds::exact(effective.clone());
                    track.composite = substitute(&record, &track.composite)?;
                    track.records.push(record);
                }
            }
            LayerSpec::Relu => {
                // relaxations see the refined pre-activation bounds
                let pre = cur_box.clone();
                cur_box = ibp_layer(layer, &pre, None)?;
                for track in &mut tracks {
                    let record = relu_record(&pre, track.policy);
                    track.composite = substitute(&record, &track.composite)?;
                    track.records.push(record);
                }
            }
        }
        for track in &tracks {
            cur_box = cur_box.intersect(&concretize(&track.composite, frame_box)?);
        }
    }
    Ok(StackAbstraction {
        out_box: cur_box,
        tracks,
    })
}

// ---------------------------------------------------------------------------
// abstract solver step
// ---------------------------------------------------------------------------

/// Composite transformer of one solver step, one map pair per linear track,
/// all over the step's entry frame.
#[derive(Debug, Clone)]
pub struct StepTransform {
    pub tracks: Vec<(ReluPolicy, LinearBounds)>,
}

impl StepTransform {
    pub fn identity(dim: usize, policies: &[ReluPolicy]) -> Self {
        StepTransform {
            tracks: policies
                .iter()
                .map(|p| (*p, LinearBounds::identity(dim)))
                .collect(),
        }
    }
}

/// Result of abstracting one solver step over an entry region.
#[derive(Debug, Clone)]
pub struct AbstractStep {
    /// Interval bounding the normalized error estimate; `None` for single
    /// methods without an embedded pair (fixed-step use).
    pub delta: Option<Interval>,
    /// Bounds on the propagated solution `z(t + h)`.
    pub out_box: IntervalBox,
    /// Composite step maps, present in linear modes.
    pub transform: Option<StepTransform>,
    /// Refined bounds of every stage evaluation, for diagnostics and
    /// soundness tests.
    pub stage_boxes: Vec<IntervalBox>,
}

struct StageState {
    bx: IntervalBox,
    pairs: Vec<LinearBounds>,
}

fn eval_dynamics_abstract(
    layers: &[LayerSpec],
    t: f64,
    entry: &IntervalBox,
    input_box: &IntervalBox,
    input_pairs: &[LinearBounds],
    policies: &[ReluPolicy],
) -> Result<StageState> {
    let mut cur_box = input_box.clone();
    let mut cur_pairs = input_pairs.to_vec();
    for layer in layers {
        match layer {
            LayerSpec::Linear(_) | LayerSpec::ConcatTimeLinear(_) => {
                let effective = match layer {
                    LayerSpec::Linear(m) => m.clone(),
                    LayerSpec::ConcatTimeLinear(m) => bake_time(m, t),
                    LayerSpec::Relu => unreachable!(),
                };
                cur_box = interval_affine(&effective, &cur_box)?;
                let record = LinearBounds::exact(effective);
                for p in &mut cur_pairs {
                    *p = substitute(&record, p)?;
                }
            }
            LayerSpec::Relu => {
                let pre = cur_box.clone();
                cur_box = ibp_layer(layer, &pre, None)?;
                for (p, policy) in cur_pairs.iter_mut().zip(policies) {
                    let record = relu_record(&pre, *policy);
                    *p = substitute(&record, p)?;
                }
            }
        }
        for p in &cur_pairs {
            cur_box = cur_box.intersect(&concretize(p, entry)?);
        }
    }
    Ok(StageState {
        bx: cur_box,
        pairs: cur_pairs,
    })
}

/// Abstracts one embedded Runge-Kutta step over `entry`: every stage input
/// is an affine combination of already-bounded quantities, the dynamics
/// stack is walked with the layer transformers above, and the propagated
/// solution plus the error-estimate interval fall out of the stage bounds.
pub fn abstract_rk_step(
    layers: &[LayerSpec],
    tau: f64,
    entry: &IntervalBox,
    t: f64,
    h: f64,
    tableau: Tableau,
    mode: BoundMode,
) -> Result<AbstractStep> {
    assert!(h > 0.0, "step size must be positive");
    let pair = tableau.coefficients();
    let policies = mode.policies();
    let dim = entry.dim();
    let identity = LinearBounds::identity(dim);
    let id_pairs: Vec<LinearBounds> = policies.iter().map(|_| identity.clone()).collect();

    let mut stages: Vec<StageState> = Vec::with_capacity(pair.stages);
    for i in 0..pair.stages {
        // y_i = z + h * sum_j a_ij k_j
        let box_terms: Vec<(f64, &IntervalBox)> = pair.a[i]
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(j, &a)| (h * a, &stages[j].bx))
            .collect();
        let mut y_box = box_combination(Some(entry), &box_terms, dim);
        let mut y_pairs = Vec::with_capacity(policies.len());
        for p_idx in 0..policies.len() {
            let terms: Vec<(f64, &LinearBounds)> = pair.a[i]
                .iter()
                .enumerate()
                .filter(|(_, &a)| a != 0.0)
                .map(|(j, &a)| (h * a, &stages[j].pairs[p_idx]))
                .collect();
            let y_pair = affine_combination(Some(&identity), &terms, dim, dim);
            y_box = y_box.intersect(&concretize(&y_pair, entry)?);
            y_pairs.push(y_pair);
        }

        let k = eval_dynamics_abstract(layers, t + pair.c[i] * h, entry, &y_box, &y_pairs, &policies)?;
        if !k.bx.lower.is_finite() || !k.bx.upper.is_finite() {
            return Err(Error::SolverDivergence { t, h });
        }
        stages.push(k);
    }

    let combine = |weights: &[f64], with_base: bool| -> Result<(IntervalBox, Vec<LinearBounds>)> {
        let box_terms: Vec<(f64, &IntervalBox)> = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(i, &w)| (h * w, &stages[i].bx))
            .collect();
        let mut bx = box_combination(if with_base { Some(entry) } else { None }, &box_terms, dim);
        let mut pairs = Vec::with_capacity(policies.len());
        for (p_idx, ident) in id_pairs.iter().enumerate() {
            let terms: Vec<(f64, &LinearBounds)> = weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(i, &w)| (h * w, &stages[i].pairs[p_idx]))
                .collect();
            let base = if with_base { Some(ident) } else { None };
            let p = affine_combination(base, &terms, dim, dim);
            bx = bx.intersect(&concretize(&p, entry)?);
            pairs.push(p);
        }
        Ok((bx, pairs))
    };

    let (out_box, out_pairs) = combine(&pair.b, true)?;
    let delta = match &pair.err {
        None => None,
        Some(err) => {
            let (diff_box, _) = combine(err, false)?;
            Some(l1_interval_norm(&diff_box, tau))
        }
    };

    let transform = if mode.is_linear() {
        Some(StepTransform {
            tracks: policies.iter().copied().zip(out_pairs).collect(),
        })
    } else {
        None
    };

    Ok(AbstractStep {
        delta,
        out_box,
        transform,
        stage_boxes: stages.into_iter().map(|s| s.bx).collect(),
    })
}

/// Elementwise tightest box across several sound bounds of the same
/// quantity: max of lowers, min of uppers.
pub fn combined_bounds(boxes: &[IntervalBox]) -> Result<IntervalBox> {
    let mut iter = boxes.iter();
    let first = iter.next().ok_or(Error::EmptyConstraintSet)?;
    Ok(iter.fold(first.clone(), |acc, b| acc.intersect(b)))
}

//! Linear constraint aggregation: merging several affine bounds on the same
//! scalar quantity into one sound affine bound over a box.
//!
//! The fast path rewrites the pairwise maximum `max(u1, u2)` as
//! `u1 + max(0, u2 - u1)` and relaxes the inner maximum with the triangle
//! rule, folding the constraint set left to right. The exact oracle solves
//! the underlying mean-height minimization over all box corners with a
//! small dense simplex and serves as the optimality reference in low
//! dimension.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domains::{relu_relaxation, ReluPolicy};
use crate::error::{Error, Result};
use crate::math::{interval_affine, AffineMap, IntervalBox, Matrix, Vector};

/// Whether the constraints bound their quantity from above or below.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintSense {
    Upper,
    Lower,
}

/// A set of affine constraints on one scalar over a box region.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    /// One row per constraint.
    pub coeffs: Matrix,
    pub offsets: Vector,
    pub region: IntervalBox,
    pub sense: ConstraintSense,
}

impl ConstraintSet {
    pub fn new(
        coeffs: Matrix,
        offsets: Vector,
        region: IntervalBox,
        sense: ConstraintSense,
    ) -> Result<Self> {
        if coeffs.rows == 0 {
            return Err(Error::EmptyConstraintSet);
        }
        if coeffs.rows != offsets.len() || coeffs.cols != region.dim() {
            return Err(Error::DimensionMismatch {
                context: "constraint set",
                expected: coeffs.cols,
                got: region.dim(),
            });
        }
        Ok(ConstraintSet {
            coeffs,
            offsets,
            region,
            sense,
        })
    }

    pub fn len(&self) -> usize {
        self.coeffs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.coeffs.cols
    }

    /// Constraint `i` as a single-row affine map.
    pub fn constraint(&self, i: usize) -> AffineMap {
        AffineMap::new(
            Matrix::new(1, self.dim(), self.coeffs.row(i).to_vec()).unwrap(),
            Vector(vec![self.offsets.0[i]]),
        )
        .unwrap()
    }

    /// Value of constraint `i` at a point.
    fn value(&self, i: usize, z: &Vector) -> f64 {
        let row = self.coeffs.row(i);
        let mut acc = 0.0;
        for (w, x) in row.iter().zip(&z.0) {
            acc += w * x;
        }
        acc + self.offsets.0[i]
    }

    /// Envelope value at a point: max over constraints for upper sets, min
    /// for lower sets.
    pub fn envelope(&self, z: &Vector) -> f64 {
        let mut best = self.value(0, z);
        for i in 1..self.len() {
            let v = self.value(i, z);
            best = match self.sense {
                ConstraintSense::Upper => best.max(v),
                ConstraintSense::Lower => best.min(v),
            };
        }
        best
    }
}

fn scalar_map(coeffs: Vec<f64>, offset: f64) -> AffineMap {
    let d = coeffs.len();
    AffineMap::new(Matrix::new(1, d, coeffs).unwrap(), Vector(vec![offset])).unwrap()
}

/// Pairwise left fold of the constraint set into one sound bound. Stable
/// cases shortcut exactly: a dominated incoming constraint keeps the
/// accumulator, a dominating one replaces it.
pub fn curls_merge(set: &ConstraintSet) -> Result<AffineMap> {
    if set.is_empty() {
        return Err(Error::EmptyConstraintSet);
    }
    let d = set.dim();
    let mut acc_c = set.coeffs.row(0).to_vec();
    let mut acc_o = set.offsets.0[0];
    let mut w_c = vec![0.0; d];
    for j in 1..set.len() {
        // w is the incoming constraint minus the accumulator for upper
        // bounds, and the accumulator minus the incoming one for lower
        // bounds, so the inner maximum is always relaxed from above
        let row = set.coeffs.row(j);
        let w_o = match set.sense {
            ConstraintSense::Upper => {
                for (dst, (a, b)) in w_c.iter_mut().zip(row.iter().zip(&acc_c)) {
                    *dst = a - b;
                }
                set.offsets.0[j] - acc_o
            }
            ConstraintSense::Lower => {
                for (dst, (a, b)) in w_c.iter_mut().zip(acc_c.iter().zip(row)) {
                    *dst = a - b;
                }
                acc_o - set.offsets.0[j]
            }
        };
        // sign-split range of w over the region, inlined to keep the fold
        // allocation free
        let (mut l_w, mut u_w) = (0.0_f64, 0.0_f64);
        for (k, &w) in w_c.iter().enumerate() {
            if w >= 0.0 {
                l_w += w * set.region.lower.0[k];
                u_w += w * set.region.upper.0[k];
            } else {
                l_w += w * set.region.upper.0[k];
                u_w += w * set.region.lower.0[k];
            }
        }
        l_w += w_o;
        u_w += w_o;
        if u_w <= 0.0 {
            // incoming constraint never beats the accumulator
            continue;
        }
        if l_w >= 0.0 {
            // incoming constraint dominates everywhere
            acc_c = row.to_vec();
            acc_o = set.offsets.0[j];
            continue;
        }
        let relax = relu_relaxation(l_w, u_w, ReluPolicy::AreaMin)?;
        let (s, off) = (relax.upper_slope, relax.upper_offset);
        match set.sense {
            ConstraintSense::Upper => {
                for (a, w) in acc_c.iter_mut().zip(&w_c) {
                    *a += s * w;
                }
                acc_o += s * w_o + off;
            }
            ConstraintSense::Lower => {
                for (a, w) in acc_c.iter_mut().zip(&w_c) {
                    *a -= s * w;
                }
                acc_o -= s * w_o + off;
            }
        }
    }
    Ok(scalar_map(acc_c, acc_o))
}

/// Checks that `merged` dominates every constraint of the set at every box
/// corner (exhaustive up to 20 dimensions, sampled beyond), within `tol`.
pub fn soundness_check(merged: &AffineMap, set: &ConstraintSet, tol: f64) -> bool {
    soundness_witness(merged, set, tol).is_none()
}

/// Like [`soundness_check`] but returns a violating corner if one exists.
pub fn soundness_witness(merged: &AffineMap, set: &ConstraintSet, tol: f64) -> Option<Vector> {
    let dim = set.dim();
    let eval = |z: &Vector| -> bool {
        let m = merged.apply(z).unwrap().0[0];
        let e = set.envelope(z);
        match set.sense {
            ConstraintSense::Upper => m >= e - tol,
            ConstraintSense::Lower => m <= e + tol,
        }
    };
    if dim <= 20 {
        for corner in set.region.corners() {
            if !eval(&corner) {
                return Some(corner);
            }
        }
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..100_000 {
            let corner = Vector(
                (0..dim)
                    .map(|j| {
                        if rng.random_bool(0.5) {
                            set.region.upper.0[j]
                        } else {
                            set.region.lower.0[j]
                        }
                    })
                    .collect(),
            );
            if !eval(&corner) {
                return Some(corner);
            }
        }
        None
    }
}

/// Mean-height ratio of two single-row bounds over the same box: the box
/// volume cancels, leaving the ratio of center heights.
pub fn volume_ratio(merged_a: &AffineMap, merged_b: &AffineMap, region: &IntervalBox) -> f64 {
    let center = region.center();
    let ha = merged_a.apply(&center).unwrap().0[0];
    let hb = merged_b.apply(&center).unwrap().0[0];
    ha / hb
}

pub const ORACLE_DIM_CAP: usize = 12;

/// Exact minimal-mean-height bound dominating the whole set at every box
/// corner. Solves the corner linear program with a dense simplex; the fold
/// result caps the answer from above, which also absorbs simplex roundoff
/// in the center height.
pub fn exact_oracle(set: &ConstraintSet) -> Result<AffineMap> {
    exact_oracle_capped(set, ORACLE_DIM_CAP)
}

pub fn exact_oracle_capped(set: &ConstraintSet, dim_cap: usize) -> Result<AffineMap> {
    if set.is_empty() {
        return Err(Error::EmptyConstraintSet);
    }
    let d = set.dim();
    if d > dim_cap {
        return Err(Error::OracleDimCap { dim: d, cap: dim_cap });
    }
    if set.len() == 1 {
        return Ok(set.constraint(0));
    }
    // mirror lower-bound sets through negation
    if set.sense == ConstraintSense::Lower {
        let neg = ConstraintSet::new(
            Matrix {
                rows: set.coeffs.rows,
                cols: set.coeffs.cols,
                data: set.coeffs.data.iter().map(|v| -v).collect(),
            },
            Vector(set.offsets.0.iter().map(|v| -v).collect()),
            set.region.clone(),
            ConstraintSense::Upper,
        )?;
        let sol = exact_oracle_capped(&neg, dim_cap)?;
        return Ok(scalar_map(
            sol.coeffs.data.iter().map(|v| -v).collect(),
            -sol.offset.0[0],
        ));
    }

    let corners = set.region.corners();
    let heights: Vec<f64> = corners.iter().map(|z| set.envelope(z)).collect();
    let center = set.region.center();

    // dual program: maximize sum(lambda_k * height_k) subject to the
    // barycentric constraints sum(lambda_k * (corner_k, 1)) = (center, 1);
    // its equality multipliers are the wanted (a, c)
    let rows = d + 1;
    let cols = corners.len();
    let mut a_mat = vec![vec![0.0; cols]; rows];
    let mut b_vec = vec![0.0; rows];
    for (k, corner) in corners.iter().enumerate() {
        for (i, &ci) in corner.0.iter().enumerate() {
            a_mat[i][k] = ci;
        }
        a_mat[d][k] = 1.0;
    }
    b_vec[..d].copy_from_slice(&center.0);
    b_vec[d] = 1.0;

    let duals = simplex_max_duals(&a_mat, &b_vec, &heights)?;
    let (a, mut c) = (duals[..d].to_vec(), duals[d]);

    // feasibility repair: lift the offset by the worst corner violation
    let mut worst = 0.0_f64;
    let candidate = scalar_map(a.clone(), c);
    for (corner, height) in corners.iter().zip(&heights) {
        let v = candidate.apply(corner).unwrap().0[0];
        worst = worst.max(height - v);
    }
    if worst > 0.0 {
        c += worst;
    }
    let lp = scalar_map(a, c);

    // the fold result is feasible, so it is an upper bound on the optimum
    let fold = curls_merge(set)?;
    let lp_height = lp.apply(&center).unwrap().0[0];
    let fold_height = fold.apply(&center).unwrap().0[0];
    Ok(if lp_height <= fold_height { lp } else { fold })
}

/// Dense two-phase simplex for `max c^T x  s.t.  A x = b, x >= 0`, returning
/// the equality-constraint multipliers at the optimum. Bland's rule keeps
/// it from cycling.
#[allow(clippy::needless_range_loop, clippy::manual_memcpy)]
fn simplex_max_duals(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    const EPS: f64 = 1e-9;
    let m = a.len();
    let n = c.len();
    let total = n + m; // structural columns then artificial columns

    // tableau rows: m constraint rows plus one objective row; last column rhs
    let mut tab = vec![vec![0.0; total + 1]; m + 1];
    for i in 0..m {
        let flip = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            tab[i][j] = flip * a[i][j];
        }
        tab[i][n + i] = 1.0;
        tab[i][total] = flip * b[i];
    }
    let mut basis: Vec<usize> = (n..total).collect();

    // phase 1: drive the artificial variables to zero
    for j in 0..=total {
        let mut s = 0.0;
        for row in tab.iter().take(m) {
            s += row[j];
        }
        tab[m][j] = s;
    }
    for i in 0..m {
        tab[m][n + i] = 0.0;
    }
    pivot_until_optimal(&mut tab, &mut basis, n, EPS)?;
    if tab[m][total] > 1e-7 {
        return Err(Error::Invariant(
            "corner program infeasible (degenerate region?)".into(),
        ));
    }
    // pivot leftover artificials out of the basis where possible
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| tab[i][j].abs() > EPS) {
                pivot(&mut tab, &mut basis, i, j);
            }
        }
    }

    // phase 2: real objective, artificial columns never re-enter
    for j in 0..=total {
        tab[m][j] = 0.0;
    }
    for j in 0..n {
        tab[m][j] = c[j];
    }
    for i in 0..m {
        if basis[i] < n {
            let coef = c[basis[i]];
            if coef != 0.0 {
                for j in 0..=total {
                    tab[m][j] -= coef * tab[i][j];
                }
                tab[m][basis[i]] = 0.0;
            }
        }
    }
    pivot_until_optimal(&mut tab, &mut basis, n, EPS)?;

    // multipliers appear negated under the artificial identity columns
    Ok((0..m).map(|i| -tab[m][n + i]).collect())
}

fn pivot_until_optimal(
    tab: &mut [Vec<f64>],
    basis: &mut [usize],
    enterable: usize,
    eps: f64,
) -> Result<()> {
    let m = basis.len();
    let total = tab[0].len() - 1;
    let mut iterations = 0usize;
    loop {
        iterations += 1;
        if iterations > 200_000 {
            return Err(Error::Invariant("simplex iteration budget exhausted".into()));
        }
        // Bland: smallest improving column
        let Some(col) = (0..enterable).find(|&j| tab[m][j] > eps) else {
            return Ok(());
        };
        let mut row = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if tab[i][col] > eps {
                let ratio = tab[i][total] / tab[i][col];
                if ratio < best - eps || (ratio < best + eps && row.is_some_and(|r: usize| basis[i] < basis[r]))
                {
                    best = ratio;
                    row = Some(i);
                }
            }
        }
        let Some(row) = row else {
            return Err(Error::Invariant("unbounded corner program".into()));
        };
        pivot(tab, basis, row, col);
    }
}

#[allow(clippy::needless_range_loop)]
fn pivot(tab: &mut [Vec<f64>], basis: &mut [usize], row: usize, col: usize) {
    let cols = tab[0].len();
    let p = tab[row][col];
    for j in 0..cols {
        tab[row][j] /= p;
    }
    for i in 0..tab.len() {
        if i != row {
            let f = tab[i][col];
            if f != 0.0 {
                for j in 0..cols {
                    tab[i][j] -= f * tab[row][j];
                }
                tab[i][col] = 0.0;
            }
        }
    }
    if row < basis.len() {
        basis[row] = col;
    }
}

// ---------------------------------------------------------------------------
// instance generation
// ---------------------------------------------------------------------------

/// Box half-width scale for the generated region.
pub fn region_scale(d: usize) -> f64 {
    let m = (20.0 / (d as f64 + 1.0)).min(1.0);
    5.0 * m * m
}

/// Perturbation scale for generated constraints.
pub fn perturbation_scale(d: usize) -> f64 {
    let beta = 3.0;
    let ceil_term = ((d as f64 + 1.0) / 50.0).ceil();
    beta * (5.0 / (d as f64 + 1.0) * ceil_term).min(1.0)
}

/// A generated aggregation instance: the constraints, the relation they
/// bound, and how many coefficient vectors were sampled.
#[derive(Debug, Clone)]
pub struct LcapInstance {
    pub set: ConstraintSet,
    /// Ground-truth relation every constraint dominates over the region.
    pub relation: AffineMap,
    pub samples_used: usize,
}

const SAMPLE_BUDGET: usize = 35_000;
const COSINE_PER_STEP: f64 = 0.975;
const COSINE_SET_MAX: f64 = 0.99;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Random constraints around a random affine relation over a random box,
/// with similarity between constraints controlled from both sides. The
/// bias of every proposal is lifted until it dominates the relation over
/// the whole region.
pub fn generate_lcap_instance(d: usize, m: usize, seed: u64) -> Result<LcapInstance> {
    assert!(d >= 1, "dimension must be at least 1");
    assert!(m >= 2, "need at least two constraints");
    let beta = 3.0;
    let g1 = region_scale(d);
    let g2 = perturbation_scale(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = 0usize;

    'restart: loop {
        // region
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        for _ in 0..d {
            let z1: f64 = rng.random_range(-g1..g1);
            let z2: f64 = rng.random_range(-g1..g1);
            lo.push(z1.min(z2));
            hi.push(z1.max(z2));
        }
        let region = IntervalBox::new(Vector(lo), Vector(hi))?;

        // ground-truth relation
        let relation: Vec<f64> = (0..=d)
            .map(|_| rng.random_range(-beta / 2.0..beta / 2.0))
            .collect();

        // bias lift making `w` dominate the relation over the region
        let dominate = |w: &mut Vec<f64>, region: &IntervalBox| {
            let diff: Vec<f64> = w[..d]
                .iter()
                .zip(&relation[..d])
                .map(|(a, b)| a - b)
                .collect();
            let gap = scalar_map(diff, w[d] - relation[d]);
            let min_gap = interval_affine(&gap, region).unwrap().lower.0[0];
            if min_gap < 0.0 {
                w[d] -= min_gap;
            }
        };

        // base proposal: coefficients spread around the relation, bias from
        // the full range, then lifted into domination. The spread backs off
        // geometrically when the lifted bias keeps overshooting its cap,
        // which it otherwise would for mid-size dimensions over wide boxes.
        let mut gap = beta;
        let mut failures = 0usize;
        let base = loop {
            samples += 1;
            if samples > SAMPLE_BUDGET {
                return Err(Error::GenerationBudget { seed, samples });
            }
            let mut w: Vec<f64> = (0..d)
                .map(|j| relation[j] + rng.random_range(-gap..gap))
                .collect();
            w.push(rng.random_range(-beta..beta));
            dominate(&mut w, &region);
            if w[d].abs() <= 2.0 * beta {
                break w;
            }
            failures += 1;
            if failures.is_multiple_of(25) {
                gap = (gap * 0.8).max(1e-3 * beta);
            }
        };

        // members are perturbations of the base proposal; the scale is the
        // smaller of the dimension formula and a norm-relative cap chosen
        // so the expected pairwise cosine lands inside the similarity
        // window (the raw formula makes >= 0.975 unreachable for mid-size
        // dimensions, stalling generation)
        let base_norm = base.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = g2.min(0.231 * base_norm / ((d + 1) as f64).sqrt());

        let mut members: Vec<Vec<f64>> = Vec::with_capacity(m);
        while members.len() < m {
            samples += 1;
            if samples > SAMPLE_BUDGET {
                return Err(Error::GenerationBudget { seed, samples });
            }
            let mut w: Vec<f64> = base
                .iter()
                .map(|v| v + rng.random_range(-scale..scale))
                .collect();
            dominate(&mut w, &region);
            if w[d].abs() > 2.0 * beta {
                continue;
            }
            if !members.is_empty() {
                let mean: f64 = members.iter().map(|u| cosine(&w, u)).sum::<f64>()
                    / members.len() as f64;
                if mean < COSINE_PER_STEP {
                    continue;
                }
            }
            members.push(w);
        }

        // set-level similarity gate: the mean pairwise cosine must not
        // exceed the ceiling, so the constraints differ enough to make
        // aggregation nontrivial
        let mut pair_sum = 0.0;
        let mut pair_count = 0usize;
        for i in 0..m {
            for k in i + 1..m {
                pair_sum += cosine(&members[i], &members[k]);
                pair_count += 1;
            }
        }
        let pair_mean = pair_sum / pair_count as f64;
        if pair_mean > COSINE_SET_MAX {
            continue 'restart;
        }
        debug_assert!(pair_mean >= COSINE_PER_STEP - 1e-9);

        let mut coeffs = Matrix::zeros(m, d);
        let mut offsets = Vector::zeros(m);
        for (i, w) in members.iter().enumerate() {
            coeffs.data[i * d..(i + 1) * d].copy_from_slice(&w[..d]);
            offsets.0[i] = w[d];
        }
        return Ok(LcapInstance {
            set: ConstraintSet::new(coeffs, offsets, region, ConstraintSense::Upper)?,
            relation: scalar_map(relation[..d].to_vec(), relation[d]),
            samples_used: samples,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upper_set(rows: &[(Vec<f64>, f64)], lo: Vec<f64>, hi: Vec<f64>) -> ConstraintSet {
        let d = rows[0].0.len();
        let mut coeffs = Matrix::zeros(rows.len(), d);
        let mut offsets = Vector::zeros(rows.len());
        for (i, (c, o)) in rows.iter().enumerate() {
            coeffs.data[i * d..(i + 1) * d].copy_from_slice(c);
            offsets.0[i] = *o;
        }
        ConstraintSet::new(
            coeffs,
            offsets,
            IntervalBox::new(Vector(lo), Vector(hi)).unwrap(),
            ConstraintSense::Upper,
        )
        .unwrap()
    }

    #[test]
    fn merge_single_constraint_unchanged() {
        let set = upper_set(&[(vec![2.0, -1.0], 0.5)], vec![0.0, 0.0], vec![1.0, 1.0]);
        let merged = curls_merge(&set).unwrap();
        assert_eq!(merged, set.constraint(0));
    }

    #[test]
    fn merge_hand_fold() {
        // u1 = 2x, u2 = x + 1 on [0, 2]: w = 1 - x in [-1, 1], relaxed
        // 0.5w + 0.5, merged 1.5x + 1, tight at both endpoints
        let set = upper_set(&[(vec![2.0], 0.0), (vec![1.0], 1.0)], vec![0.0], vec![2.0]);
        let merged = curls_merge(&set).unwrap();
        assert!((merged.coeffs.get(0, 0) - 1.5).abs() < 1e-12);
        assert!((merged.offset.0[0] - 1.0).abs() < 1e-12);
        for x in [0.0, 2.0] {
            let z = Vector(vec![x]);
            assert!((merged.apply(&z).unwrap().0[0] - set.envelope(&z)).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_dominated_keeps_first() {
        // u2 = u1 - 1 is dominated everywhere
        let set = upper_set(
            &[(vec![1.0, 0.5], 0.0), (vec![1.0, 0.5], -1.0)],
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
        );
        let merged = curls_merge(&set).unwrap();
        assert_eq!(merged, set.constraint(0));
    }

    #[test]
    fn merge_dominating_replaces() {
        let set = upper_set(
            &[(vec![1.0], 0.0), (vec![1.0], 2.0)],
            vec![-1.0],
            vec![1.0],
        );
        let merged = curls_merge(&set).unwrap();
        assert_eq!(merged, set.constraint(1));
    }

    #[test]
    fn lower_sense_mirrors() {
        // l1 = 2x, l2 = x + 1 on [0, 2]: min is bounded from below
        let mut set = upper_set(&[(vec![2.0], 0.0), (vec![1.0], 1.0)], vec![0.0], vec![2.0]);
        set.sense = ConstraintSense::Lower;
        let merged = curls_merge(&set).unwrap();
        assert!(soundness_check(&merged, &set, 1e-9));
        // the mirrored fold is tight at the endpoints too
        for x in [0.0, 2.0] {
            let z = Vector(vec![x]);
            assert!((merged.apply(&z).unwrap().0[0] - set.envelope(&z)).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_single_constraint() {
        let set = upper_set(&[(vec![1.0, 2.0], 3.0)], vec![0.0, 0.0], vec![1.0, 1.0]);
        assert_eq!(exact_oracle(&set).unwrap(), set.constraint(0));
    }

    #[test]
    fn oracle_two_lines() {
        let set = upper_set(&[(vec![2.0], 0.0), (vec![1.0], 1.0)], vec![0.0], vec![2.0]);
        let sol = exact_oracle(&set).unwrap();
        assert!((sol.coeffs.get(0, 0) - 1.5).abs() < 1e-7, "{sol:?}");
        assert!((sol.offset.0[0] - 1.0).abs() < 1e-7);
        assert!(soundness_check(&sol, &set, 1e-9));
    }

    #[test]
    fn oracle_sound_and_no_worse_than_fold() {
        for seed in 0..60u64 {
            let d = 1 + (seed as usize) % 5;
            let inst = generate_lcap_instance(d, 4, seed).unwrap();
            let fold = curls_merge(&inst.set).unwrap();
            let oracle = exact_oracle(&inst.set).unwrap();
            assert!(soundness_check(&fold, &inst.set, 1e-9), "seed {seed}");
            assert!(soundness_check(&oracle, &inst.set, 1e-7), "seed {seed}");
            let center = inst.set.region.center();
            let fh = fold.apply(&center).unwrap().0[0];
            let oh = oracle.apply(&center).unwrap().0[0];
            assert!(oh <= fh + 1e-9, "seed {seed}: oracle {oh} above fold {fh}");
        }
    }

    #[test]
    fn soundness_check_finds_witness() {
        let set = upper_set(
            &[(vec![1.0], 0.0), (vec![-1.0], 0.5)],
            vec![-1.0],
            vec![1.0],
        );
        // the first constraint alone misses the second at the left corner
        let first = set.constraint(0);
        let witness = soundness_witness(&first, &set, 1e-12).unwrap();
        assert_eq!(witness.0[0], -1.0);
        let merged = curls_merge(&set).unwrap();
        assert!(soundness_check(&merged, &set, 1e-9));
    }

    #[test]
    fn fold_order_changes_result_not_soundness() {
        let inst = generate_lcap_instance(3, 4, 11).unwrap();
        let m = inst.set.len();
        let mut perms: Vec<Vec<usize>> = Vec::new();
        // all permutations of 4 indices
        fn permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
            if k == items.len() {
                out.push(items.clone());
                return;
            }
            for i in k..items.len() {
                items.swap(k, i);
                permute(items, k + 1, out);
                items.swap(k, i);
            }
        }
        permute(&mut (0..m).collect(), 0, &mut perms);
        assert_eq!(perms.len(), 24);
        for perm in perms {
            let mut coeffs = Matrix::zeros(m, inst.set.dim());
            let mut offsets = Vector::zeros(m);
            for (i, &src) in perm.iter().enumerate() {
                coeffs.data[i * inst.set.dim()..(i + 1) * inst.set.dim()]
                    .copy_from_slice(inst.set.coeffs.row(src));
                offsets.0[i] = inst.set.offsets.0[src];
            }
            let permuted = ConstraintSet::new(
                coeffs,
                offsets,
                inst.set.region.clone(),
                ConstraintSense::Upper,
            )
            .unwrap();
            let merged = curls_merge(&permuted).unwrap();
            assert!(soundness_check(&merged, &inst.set, 1e-9), "perm {perm:?}");
        }
    }

    #[test]
    fn scale_formulas() {
        assert_eq!(region_scale(19), 5.0);
        assert!((region_scale(39) - 5.0 * 0.25).abs() < 1e-12);
        assert_eq!(perturbation_scale(4), 3.0);
        // the ceiling factor keeps the scale from vanishing at larger d
        assert!((perturbation_scale(99) - 3.0 * (5.0 / 100.0 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn generated_instances_dominate_relation() {
        for seed in 0..30u64 {
            let d = 1 + (seed as usize) % 8;
            let inst = generate_lcap_instance(d, 3, seed).unwrap();
            for i in 0..inst.set.len() {
                let c = inst.set.constraint(i);
                for corner in inst.set.region.corners() {
                    let cv = c.apply(&corner).unwrap().0[0];
                    let rv = inst.relation.apply(&corner).unwrap().0[0];
                    assert!(cv >= rv - 1e-9, "seed {seed}, constraint {i}");
                }
            }
            assert!(inst.samples_used <= SAMPLE_BUDGET);
        }
    }

    #[test]
    fn high_dimensional_soundness_is_sampled() {
        // beyond the exhaustive cap the check falls back to random corners
        let inst = generate_lcap_instance(25, 4, 3).unwrap();
        let merged = curls_merge(&inst.set).unwrap();
        assert!(soundness_check(&merged, &inst.set, 1e-9));
    }

    #[test]
    fn volume_ratio_cases() {
        let region = IntervalBox::new(Vector(vec![0.0]), Vector(vec![2.0])).unwrap();
        let a = scalar_map(vec![1.5], 1.0);
        assert_eq!(volume_ratio(&a, &a, &region), 1.0);

        // dominated pair: fold and oracle both return the dominant line
        let set = upper_set(
            &[(vec![1.0], 1.0), (vec![1.0], 0.0)],
            vec![0.0],
            vec![2.0],
        );
        let fold = curls_merge(&set).unwrap();
        let oracle = exact_oracle(&set).unwrap();
        assert!((volume_ratio(&oracle, &fold, &set.region) - 1.0).abs() < 1e-9);
    }
}

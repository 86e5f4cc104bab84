//! Dense vectors, matrices, interval arithmetic, and affine forms.
//!
//! Everything here is an immutable value over `f64`; operations are pure
//! functions. No directed rounding is performed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|x| x.abs()).sum()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * s).collect())
    }

    /// self + s * other, the workhorse of Runge-Kutta stage accumulation.
    pub fn add_scaled(&self, s: f64, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + s * b)
                .collect(),
        )
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Invariant(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Invariant("ragged matrix rows".into()));
            }
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "matvec",
                expected: self.cols,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.rows];
        for (i, slot) in out.iter_mut().enumerate() {
            let row = self.row(i);
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(&x.0) {
                acc += w * v;
            }
            *slot = acc;
        }
        Ok(Vector(out))
    }

    /// self * other (dims: (r x k) * (k x c) -> (r x c)).
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                context: "matmul",
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }
}

/// Closed scalar interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "interval lo {lo} > hi {hi}");
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Interval absolute value: image of `[lo, hi]` under `|x|`.
    pub fn abs(&self) -> Interval {
        if self.lo >= 0.0 {
            *self
        } else if self.hi <= 0.0 {
            Interval::new(-self.hi, -self.lo)
        } else {
            Interval::new(0.0, f64::max(-self.lo, self.hi))
        }
    }

    pub fn add(&self, other: &Interval) -> Interval {
        Interval::new(self.lo + other.lo, self.hi + other.hi)
    }

    pub fn scale(&self, s: f64) -> Interval {
        if s >= 0.0 {
            Interval::new(self.lo * s, self.hi * s)
        } else {
            Interval::new(self.hi * s, self.lo * s)
        }
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.max(other.lo), self.hi.min(other.hi))
    }
}

/// Elementwise lower/upper bounds on a vector-valued state.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBox {
    pub lower: Vector,
    pub upper: Vector,
}

impl IntervalBox {
    pub fn new(lower: Vector, upper: Vector) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                context: "box bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (l, u) in lower.0.iter().zip(&upper.0) {
            if l > u {
                return Err(Error::Invariant(format!("box lower {l} exceeds upper {u}")));
            }
        }
        Ok(IntervalBox { lower, upper })
    }

    /// Degenerate box representing a concrete point.
    pub fn point(v: &Vector) -> Self {
        IntervalBox {
            lower: v.clone(),
            upper: v.clone(),
        }
    }

    /// Ball of radius `eps` around `center` in the max norm.
    pub fn linf_ball(center: &Vector, eps: f64) -> Self {
        IntervalBox {
            lower: Vector(center.0.iter().map(|x| x - eps).collect()),
            upper: Vector(center.0.iter().map(|x| x + eps).collect()),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn coord(&self, i: usize) -> Interval {
        Interval::new(self.lower.0[i], self.upper.0[i])
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower == self.upper
    }

    pub fn contains(&self, v: &Vector) -> bool {
        v.len() == self.dim()
            && v.0
                .iter()
                .enumerate()
                .all(|(i, x)| self.lower.0[i] <= *x && *x <= self.upper.0[i])
    }

    /// Containment with a small slack for floating point noise.
    pub fn contains_with_slack(&self, v: &Vector, slack: f64) -> bool {
        v.len() == self.dim()
            && v.0.iter().enumerate().all(|(i, x)| {
                let tol = slack * (1.0 + x.abs());
                self.lower.0[i] - tol <= *x && *x <= self.upper.0[i] + tol
            })
    }

    pub fn contains_box(&self, inner: &IntervalBox) -> bool {
        inner.dim() == self.dim()
            && (0..self.dim())
                .all(|i| self.lower.0[i] <= inner.lower.0[i] && inner.upper.0[i] <= self.upper.0[i])
    }

    pub fn center(&self) -> Vector {
        Vector(
            self.lower
                .0
                .iter()
                .zip(&self.upper.0)
                .map(|(l, u)| 0.5 * (l + u))
                .collect(),
        )
    }

    /// Per-coordinate widths `u - l`.
    pub fn widths(&self) -> Vec<f64> {
        self.lower
            .0
            .iter()
            .zip(&self.upper.0)
            .map(|(l, u)| u - l)
            .collect()
    }

    pub fn total_width(&self) -> f64 {
        self.widths().iter().sum()
    }

    pub fn add(&self, other: &IntervalBox) -> IntervalBox {
        IntervalBox {
            lower: self.lower.add(&other.lower),
            upper: self.upper.add(&other.upper),
        }
    }

    pub fn sub(&self, other: &IntervalBox) -> IntervalBox {
        IntervalBox {
            lower: self.lower.sub(&other.upper),
            upper: self.upper.sub(&other.lower),
        }
    }

    pub fn scale(&self, s: f64) -> IntervalBox {
        if s >= 0.0 {
            IntervalBox {
                lower: self.lower.scale(s),
                upper: self.upper.scale(s),
            }
        } else {
            IntervalBox {
                lower: self.upper.scale(s),
                upper: self.lower.scale(s),
            }
        }
    }

    /// Elementwise intersection; both inputs must bound the same quantity.
    /// Tiny inversions from rounding noise collapse to the midpoint.
    pub fn intersect(&self, other: &IntervalBox) -> IntervalBox {
        debug_assert_eq!(self.dim(), other.dim());
        let mut lower = Vec::with_capacity(self.dim());
        let mut upper = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let mut l = self.lower.0[i].max(other.lower.0[i]);
            let mut u = self.upper.0[i].min(other.upper.0[i]);
            if l > u {
                let gap = l - u;
                let tol = 1e-9 * (1.0 + l.abs().max(u.abs()));
                assert!(
                    gap <= tol,
                    "intersection of sound bounds inverted by {gap} at coordinate {i}"
                );
                let mid = 0.5 * (l + u);
                l = mid;
                u = mid;
            }
            lower.push(l);
            upper.push(u);
        }
        IntervalBox {
            lower: Vector(lower),
            upper: Vector(upper),
        }
    }

    /// All 2^d corner points. Only sensible for small d.
    pub fn corners(&self) -> Vec<Vector> {
        let d = self.dim();
        assert!(d <= 24, "corner enumeration for dim {d} is not sensible");
        let n = 1usize << d;
        let mut out = Vec::with_capacity(n);
        for mask in 0..n {
            let mut v = Vec::with_capacity(d);
            for (j, (l, u)) in self.lower.0.iter().zip(&self.upper.0).enumerate() {
                v.push(if mask >> j & 1 == 1 { *u } else { *l });
            }
            out.push(Vector(v));
        }
        out
    }
}

/// Affine map `x -> coeffs * x + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub coeffs: Matrix,
    pub offset: Vector,
}

impl AffineMap {
    pub fn new(coeffs: Matrix, offset: Vector) -> Result<Self> {
        if offset.len() != coeffs.rows {
            return Err(Error::DimensionMismatch {
                context: "affine offset",
                expected: coeffs.rows,
                got: offset.len(),
            });
        }
        Ok(AffineMap { coeffs, offset })
    }

    pub fn identity(n: usize) -> Self {
        AffineMap {
            coeffs: Matrix::identity(n),
            offset: Vector::zeros(n),
        }
    }

    pub fn rows(&self) -> usize {
        self.coeffs.rows
    }

    pub fn cols(&self) -> usize {
        self.coeffs.cols
    }

    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        Ok(self.coeffs.matvec(x)?.add(&self.offset))
    }
}

/// Sound interval image of an affine map over a box, via sign-split of the
/// coefficients: positive weights take the matching bound, negative weights
/// the opposite one.
pub fn interval_affine(map: &AffineMap, input: &IntervalBox) -> Result<IntervalBox> {
    if map.cols() != input.dim() {
        return Err(Error::DimensionMismatch {
            context: "interval_affine",
            expected: map.cols(),
            got: input.dim(),
        });
    }
    // accumulation order matches `AffineMap::apply` so a degenerate box
    // reproduces concrete evaluation bit for bit
    let mut lo = Vec::with_capacity(map.rows());
    let mut hi = Vec::with_capacity(map.rows());
    for i in 0..map.rows() {
        let row = map.coeffs.row(i);
        let mut l = 0.0;
        let mut u = 0.0;
        for ((w, lo_j), hi_j) in row.iter().zip(&input.lower.0).zip(&input.upper.0) {
            if *w >= 0.0 {
                l += w * lo_j;
                u += w * hi_j;
            } else {
                l += w * hi_j;
                u += w * lo_j;
            }
        }
        lo.push(l + map.offset.0[i]);
        hi.push(u + map.offset.0[i]);
    }
    IntervalBox::new(Vector(lo), Vector(hi))
}

/// Smallest box containing both arguments: elementwise min of lowers and
/// max of uppers.
pub fn box_hull(a: &IntervalBox, b: &IntervalBox) -> Result<IntervalBox> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "box_hull",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(IntervalBox {
        lower: Vector(
            a.lower
                .0
                .iter()
                .zip(&b.lower.0)
                .map(|(x, y)| x.min(*y))
                .collect(),
        ),
        upper: Vector(
            a.upper
                .0
                .iter()
                .zip(&b.upper.0)
                .map(|(x, y)| x.max(*y))
                .collect(),
        ),
    })
}

/// Interval bounding `||w / tau||_1` over all `w` in `diff`: abs-interval per
/// coordinate, summed, then divided by `tau`.
pub fn l1_interval_norm(diff: &IntervalBox, tau: f64) -> Interval {
    assert!(tau > 0.0, "tau must be positive");
    let mut lo = 0.0;
    let mut hi = 0.0;
    for i in 0..diff.dim() {
        let a = diff.coord(i).abs();
        lo += a.lo;
        hi += a.hi;
    }
    Interval::new(lo / tau, hi / tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(rows: &[Vec<f64>], offset: Vec<f64>) -> AffineMap {
        AffineMap::new(Matrix::from_rows(rows).unwrap(), Vector(offset)).unwrap()
    }

    fn bx(lo: Vec<f64>, hi: Vec<f64>) -> IntervalBox {
        IntervalBox::new(Vector(lo), Vector(hi)).unwrap()
    }

    /// Brute-force oracle: exact affine image over box corners. Valid because
    /// an affine map attains its interval extremes at corners.
    fn corner_range(m: &AffineMap, input: &IntervalBox) -> IntervalBox {
        let mut lo = vec![f64::INFINITY; m.rows()];
        let mut hi = vec![f64::NEG_INFINITY; m.rows()];
        for c in input.corners() {
            let y = m.apply(&c).unwrap();
            for i in 0..y.len() {
                lo[i] = lo[i].min(y.0[i]);
                hi[i] = hi[i].max(y.0[i]);
            }
        }
        bx(lo, hi)
    }

    #[test]
    fn interval_affine_sign_split() {
        let m = map(&[vec![1.0, -1.0]], vec![0.0]);
        let out = interval_affine(&m, &bx(vec![0.0, 0.0], vec![1.0, 1.0])).unwrap();
        assert_eq!(out, bx(vec![-1.0], vec![1.0]));
    }

    #[test]
    fn interval_affine_identity() {
        let m = AffineMap::identity(3);
        let b = bx(vec![-1.0, 0.0, 2.0], vec![0.5, 0.0, 3.0]);
        assert_eq!(interval_affine(&m, &b).unwrap(), b);
    }

    #[test]
    fn interval_affine_corner_enumeration() {
        // expected values frozen from the corner oracle
        let m = map(&[vec![2.0, 3.0]], vec![1.0]);
        let b = bx(vec![0.0, -1.0], vec![1.0, 0.0]);
        let oracle = corner_range(&m, &b);
        assert_eq!(oracle, bx(vec![-2.0], vec![3.0]));
        assert_eq!(interval_affine(&m, &b).unwrap(), oracle);
    }

    #[test]
    fn interval_affine_dimension_mismatch() {
        let m = map(&[vec![1.0, 2.0]], vec![0.0]);
        assert!(interval_affine(&m, &bx(vec![0.0], vec![1.0])).is_err());
    }

    #[test]
    fn interval_affine_contains_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let rows = rng.random_range(1..4);
            let cols = rng.random_range(1..4);
            let m = AffineMap::new(
                Matrix::new(
                    rows,
                    cols,
                    (0..rows * cols)
                        .map(|_| rng.random_range(-3.0..3.0))
                        .collect(),
                )
                .unwrap(),
                Vector((0..rows).map(|_| rng.random_range(-2.0..2.0)).collect()),
            )
            .unwrap();
            let lo: Vec<f64> = (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect();
            let hi: Vec<f64> = lo
                .iter()
                .map(|l| l + rng.random_range(0.0..2.0))
                .collect();
            let b = bx(lo.clone(), hi.clone());
            let sample = Vector(
                (0..cols)
                    .map(|j| rng.random_range(lo[j]..=hi[j]))
                    .collect(),
            );
            let out = interval_affine(&m, &b).unwrap();
            let y = m.apply(&sample).unwrap();
            assert!(
                out.contains_with_slack(&y, 1e-12),
                "sample image {y:?} escapes {out:?}"
            );
        }
    }

    #[test]
    fn box_hull_cases() {
        let a = bx(vec![0.0], vec![1.0]);
        assert_eq!(box_hull(&a, &a).unwrap(), a);
        let b = bx(vec![2.0], vec![3.0]);
        assert_eq!(box_hull(&a, &b).unwrap(), bx(vec![0.0], vec![3.0]));
        let c = bx(vec![-1.0], vec![0.0]);
        let d = bx(vec![-2.0], vec![2.0]);
        assert_eq!(box_hull(&c, &d).unwrap(), d);
    }

    #[test]
    fn box_hull_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let gen = |rng: &mut ChaCha8Rng| {
                let lo: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.0..2.0)).collect();
                bx(lo, hi)
            };
            let (a, b, c) = (gen(&mut rng), gen(&mut rng), gen(&mut rng));
            let ab = box_hull(&a, &b).unwrap();
            assert_eq!(ab, box_hull(&b, &a).unwrap());
            assert_eq!(
                box_hull(&ab, &c).unwrap(),
                box_hull(&a, &box_hull(&b, &c).unwrap()).unwrap()
            );
            assert_eq!(box_hull(&a, &a).unwrap(), a);
            assert!(ab.contains_box(&a) && ab.contains_box(&b));
        }
    }

    #[test]
    fn l1_norm_examples() {
        let zero = bx(vec![0.0], vec![0.0]);
        assert_eq!(l1_interval_norm(&zero, 1.0), Interval::new(0.0, 0.0));

        let crossing = bx(vec![-1.0], vec![2.0]);
        assert_eq!(l1_interval_norm(&crossing, 1.0), Interval::new(0.0, 2.0));

        // per-coordinate abs then sum, divided by tau:
        // |[1,2]| = [1,2], |[-3,-1]| = [1,3], sum [2,5], tau 0.5 -> [4,10]
        let b = bx(vec![1.0, -3.0], vec![2.0, -1.0]);
        assert_eq!(l1_interval_norm(&b, 0.5), Interval::new(4.0, 10.0));
    }

    #[test]
    fn l1_norm_contains_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let d = rng.random_range(1..5);
            let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.0..2.0)).collect();
            let b = bx(lo.clone(), hi.clone());
            let tau = rng.random_range(0.01..2.0);
            let iv = l1_interval_norm(&b, tau);
            let w = Vector(
                (0..d)
                    .map(|j| rng.random_range(lo[j]..=hi[j]))
                    .collect(),
            );
            let norm = w.l1_norm() / tau;
            assert!(iv.lo <= norm + 1e-9 && norm <= iv.hi + 1e-9);
        }
    }

    #[test]
    fn degenerate_box_affine_is_concrete() {
        let m = map(&[vec![0.5, -2.0], vec![1.0, 1.0]], vec![0.3, -0.1]);
        let x = Vector(vec![0.7, -0.4]);
        let out = interval_affine(&m, &IntervalBox::point(&x)).unwrap();
        let y = m.apply(&x).unwrap();
        assert_eq!(out.lower, y);
        assert_eq!(out.upper, y);
    }
}

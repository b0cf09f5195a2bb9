//! Clamped B-spline bases on equally spaced knots, and trapezoid quadrature
//! of sampled curves against them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack allowed when matching sample grids to domain endpoints.
const ENDPOINT_TOL: f64 = 1e-9;

/// Default spline order (cubic).
pub const DEFAULT_ORDER: usize = 4;

/// A closed interval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::Config(format!("degenerate domain [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn unit() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.lo && s <= self.hi
    }

    fn tol(&self) -> f64 {
        ENDPOINT_TOL * self.length().max(1.0)
    }

    /// `n` equally spaced points covering the interval, endpoints included.
    pub fn linspace(&self, n: usize) -> Vec<f64> {
        assert!(n >= 2, "linspace needs at least two points");
        let step = self.length() / (n - 1) as f64;
        let mut out: Vec<f64> = (0..n).map(|i| self.lo + step * i as f64).collect();
        out[n - 1] = self.hi;
        out
    }
}

/// Order-`r` B-spline basis with `M` equally spaced interior knots and
/// `r`-fold boundary knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisSpec", into = "BasisSpec")]
pub struct SplineBasis {
    order: usize,
    n_interior: usize,
    domain: Interval,
    knots: Vec<f64>,
}

/// Serialized form of a basis: the knot vector is always re-derived.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BasisSpec {
    order: usize,
    n_interior: usize,
    domain: Interval,
}

impl TryFrom<BasisSpec> for SplineBasis {
    type Error = Error;
    fn try_from(spec: BasisSpec) -> Result<Self> {
        SplineBasis::new(spec.order, spec.n_interior, spec.domain)
    }
}

impl From<SplineBasis> for BasisSpec {
    fn from(b: SplineBasis) -> Self {
        BasisSpec {
            order: b.order,
            n_interior: b.n_interior,
            domain: b.domain,
        }
    }
}

impl SplineBasis {
    pub fn new(order: usize, n_interior: usize, domain: Interval) -> Result<Self> {
        if order < 2 {
            return Err(Error::Config(format!("spline order must be >= 2, got {order}")));
        }
        let domain = Interval::new(domain.lo, domain.hi)?;
        let mut knots = Vec::with_capacity(n_interior + 2 * order);
        knots.extend(std::iter::repeat_n(domain.lo, order));
        knots.extend(Self::interior(n_interior, domain));
        knots.extend(std::iter::repeat_n(domain.hi, order));
        Ok(Self {
            order,
            n_interior,
            domain,
            knots,
        })
    }

    fn interior(n_interior: usize, domain: Interval) -> impl Iterator<Item = f64> {
        let step = domain.length() / (n_interior + 1) as f64;
        (1..=n_interior).map(move |k| domain.lo + step * k as f64)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    /// Number of basis functions, `M + r`.
    pub fn dim(&self) -> usize {
        self.n_interior + self.order
    }

    /// Full knot vector, boundary knots repeated `order` times.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.order..self.order + self.n_interior]
    }

    /// Index `mu` with `knots[mu] <= s < knots[mu + 1]`, clamped so the right
    /// endpoint falls in the last nonempty span.
    fn span(&self, s: f64) -> usize {
        let r = self.order;
        let last = self.dim() - 1;
        if s >= self.domain.hi {
            return last;
        }
        // knots[r-1 ..= last] are the left ends of the nonempty spans.
        let left = &self.knots[r - 1..=last];
        let idx = left.partition_point(|&k| k <= s);
        r - 1 + idx.saturating_sub(1)
    }

    /// The `order` possibly nonzero basis values at `s`, and the index of the
    /// first of them.
    pub fn eval_nonzero(&self, s: f64) -> Result<(usize, Vec<f64>)> {
        let tol = self.domain.tol();
        if !(s >= self.domain.lo - tol && s <= self.domain.hi + tol) {
            return Err(Error::Domain(format!(
                "abscissa {s} outside basis domain [{}, {}]",
                self.domain.lo, self.domain.hi
            )));
        }
        let s = s.clamp(self.domain.lo, self.domain.hi);
        Ok(self.nonzero_unchecked(s))
    }

    fn nonzero_unchecked(&self, s: f64) -> (usize, Vec<f64>) {
        let r = self.order;
        let mu = self.span(s);
        let t = &self.knots;
        let mut values = vec![0.0; r];
        let mut left = vec![0.0; r];
        let mut right = vec![0.0; r];
        values[0] = 1.0;
        for j in 1..r {
            left[j] = s - t[mu + 1 - j];
            right[j] = t[mu + j] - s;
            let mut saved = 0.0;
            for k in 0..j {
                let denom = right[k + 1] + left[j - k];
                let temp = if denom > 0.0 { values[k] / denom } else { 0.0 };
                values[k] = saved + right[k + 1] * temp;
                saved = left[j - k] * temp;
            }
            values[j] = saved;
        }
        (mu + 1 - r, values)
    }

    /// All `dim()` basis values at `s`.
    pub fn eval(&self, s: f64) -> Result<Vec<f64>> {
        let (start, nz) = self.eval_nonzero(s)?;
        let mut out = vec![0.0; self.dim()];
        out[start..start + nz.len()].copy_from_slice(&nz);
        Ok(out)
    }

    /// `B(s)^T coef`.
    pub fn combine(&self, coef: &[f64], s: f64) -> Result<f64> {
        debug_assert_eq!(coef.len(), self.dim());
        let (start, nz) = self.eval_nonzero(s)?;
        Ok(nz.iter().zip(&coef[start..]).map(|(b, c)| b * c).sum())
    }
}

/// A curve observed on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFunction {
    grid: Arc<[f64]>,
    values: Vec<f64>,
}

impl SampledFunction {
    pub fn new(grid: Arc<[f64]>, values: Vec<f64>) -> Result<Self> {
        validate_grid(&grid)?;
        if grid.len() != values.len() {
            return Err(Error::Domain(format!(
                "grid has {} points but {} values were given",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Arc<[f64]> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::Domain("sampling grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) || grid.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("sampling grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Linear quadrature weights mapping samples on a fixed grid to the inner
/// products `<x, B_l>`.
///
/// The curve is linearly interpolated onto the union of its grid and the
/// basis knots, and the product with each basis function is integrated by
/// the composite trapezoid rule there. The result is linear in the samples,
/// so the whole map is a `grid.len() x dim` matrix computed once per
/// (grid, basis) pair.
#[derive(Debug, Clone)]
pub struct QuadratureMap {
    n_samples: usize,
    dim: usize,
    // row-major [sample][basis]
    weights: Vec<f64>,
}

impl QuadratureMap {
    pub fn new(grid: &[f64], basis: &SplineBasis) -> Result<Self> {
        validate_grid(grid)?;
        let dom = basis.domain();
        let tol = dom.tol();
        let (first, last) = (grid[0], grid[grid.len() - 1]);
        if (first - dom.lo).abs() > tol || (last - dom.hi).abs() > tol {
            return Err(Error::Domain(format!(
                "sampling grid [{first}, {last}] does not cover basis domain [{}, {}]",
                dom.lo, dom.hi
            )));
        }

        // Union of sample points and interior knots, each tagged with its
        // linear interpolation stencil into the samples.
        let mut nodes: Vec<(f64, usize, f64)> = grid
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, i, 1.0))
            .collect();
        for &k in basis.interior_knots() {
            let idx = grid.partition_point(|&g| g < k);
            if idx < grid.len() && (grid[idx] - k).abs() <= tol {
                continue;
            }
            let lo = idx - 1;
            let frac = (k - grid[lo]) / (grid[lo + 1] - grid[lo]);
            nodes.push((k, lo, 1.0 - frac));
        }
        nodes.sort_by(|a, b| a.0.total_cmp(&b.0));

        let dim = basis.dim();
        let mut weights = vec![0.0; grid.len() * dim];
        let n = nodes.len();
        for (k, &(s, lo, wlo)) in nodes.iter().enumerate() {
            let left = if k > 0 { s - nodes[k - 1].0 } else { 0.0 };
            let right = if k + 1 < n { nodes[k + 1].0 - s } else { 0.0 };
            let trap = 0.5 * (left + right);
            let (start, bvals) = basis.nonzero_unchecked(s.clamp(dom.lo, dom.hi));
            let mut scatter = |sample: usize, w: f64| {
                let row = &mut weights[sample * dim..(sample + 1) * dim];
                for (l, b) in bvals.iter().enumerate() {
                    row[start + l] += trap * w * b;
                }
            };
            scatter(lo, wlo);
            if wlo < 1.0 {
                scatter(lo + 1, 1.0 - wlo);
            }
        }
        Ok(Self {
            n_samples: grid.len(),
            dim,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Accumulates `<x, B>` into `out`.
    pub fn apply_into(&self, values: &[f64], out: &mut [f64]) {
        assert_eq!(values.len(), self.n_samples);
        assert_eq!(out.len(), self.dim);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (v, row) in values.iter().zip(self.weights.chunks_exact(self.dim)) {
            if *v != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += v * w;
                }
            }
        }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply_into(values, &mut out);
        out
    }
}

/// `W = <x, B>` for a single sampled curve.
pub fn inner_product(x: &SampledFunction, basis: &SplineBasis) -> Result<Vec<f64>> {
    Ok(QuadratureMap::new(x.grid(), basis)?.apply(x.values()))
}

/// Composite trapezoid weights for a strictly increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let h = 0.5 * (grid[k + 1] - grid[k]);
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_basis(order: usize, m: usize) -> SplineBasis {
        SplineBasis::new(order, m, Interval::unit()).unwrap()
    }

    fn sampled(n: usize, f: impl Fn(f64) -> f64) -> SampledFunction {
        let grid: Arc<[f64]> = Interval::unit().linspace(n).into();
        let values = grid.iter().map(|&s| f(s)).collect();
        SampledFunction::new(grid, values).unwrap()
    }

    #[test]
    fn dimensions_and_knots() {
        assert_eq!(unit_basis(4, 0).dim(), 4);
        let b = unit_basis(4, 3);
        assert_eq!(b.dim(), 7);
        assert_eq!(b.interior_knots(), &[0.25, 0.5, 0.75]);
        let b = SplineBasis::new(2, 1, Interval::new(0.0, 2.0).unwrap()).unwrap();
        assert_eq!(b.dim(), 3);
        assert_eq!(b.interior_knots(), &[1.0]);
        assert!(b.knots().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(matches!(
            SplineBasis::new(1, 2, Interval::unit()),
            Err(Error::Config(_))
        ));
        assert!(matches!(Interval::new(1.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn linear_hats_by_hand() {
        let b = SplineBasis::new(2, 1, Interval::new(0.0, 2.0).unwrap()).unwrap();
        let v = b.eval(0.5).unwrap();
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.5, epsilon = 1e-15);
        assert_eq!(v[2], 0.0);
        assert_eq!(b.eval(2.0).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn clamped_endpoints() {
        for order in 2..=5 {
            let b = unit_basis(order, 4);
            let v = b.eval(0.0).unwrap();
            assert_eq!(v[0], 1.0);
            assert!(v[1..].iter().all(|&x| x == 0.0));
            let v = b.eval(1.0).unwrap();
            assert_eq!(*v.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn outside_domain_is_an_error() {
        let b = unit_basis(4, 2);
        assert!(matches!(b.eval(1.5), Err(Error::Domain(_))));
        assert!(matches!(b.eval(-0.01), Err(Error::Domain(_))));
    }

    #[test]
    fn cubic_matches_closed_form_without_interior_knots() {
        // With no interior knots the cubic B-splines are Bernstein polynomials.
        let b = unit_basis(4, 0);
        for &s in &[0.1, 0.37, 0.5, 0.93] {
            let v = b.eval(s).unwrap();
            let t = 1.0 - s;
            let bern = [t * t * t, 3.0 * s * t * t, 3.0 * s * s * t, s * s * s];
            for (a, e) in v.iter().zip(bern) {
                assert_abs_diff_eq!(*a, e, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn inner_product_constant_and_zero() {
        let b = unit_basis(4, 3);
        let w = inner_product(&sampled(11, |_| 1.0), &b).unwrap();
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-13);
        let w = inner_product(&sampled(11, |_| 0.0), &b).unwrap();
        assert!(w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn inner_product_linear_against_hats() {
        let b = unit_basis(2, 0);
        let w = inner_product(&sampled(2001, |s| s), &b).unwrap();
        assert_abs_diff_eq!(w[0], 1.0 / 6.0, epsilon = 1e-7);
        assert_abs_diff_eq!(w[1], 1.0 / 3.0, epsilon = 1e-7);
    }

    #[test]
    fn grid_must_cover_domain() {
        let b = unit_basis(4, 1);
        let grid: Arc<[f64]> = vec![0.0, 0.5, 0.9].into();
        let x = SampledFunction::new(grid, vec![1.0; 3]).unwrap();
        assert!(matches!(inner_product(&x, &b), Err(Error::Domain(_))));
    }

    #[test]
    fn quadrature_converges_quadratically() {
        // cos(pi s) against the cubic basis with 2 interior knots, compared with
        // a very fine reference.
        let b = unit_basis(4, 2);
        let f = |s: f64| (std::f64::consts::PI * s).cos();
        let reference = inner_product(&sampled(40_001, f), &b).unwrap();
        let err = |n: usize| {
            let w = inner_product(&sampled(n, f), &b).unwrap();
            w.iter()
                .zip(&reference)
                .map(|(a, r)| (a - r).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (err(31), err(61), err(121));
        assert!(e1 / e2 > 3.5, "ratio {}", e1 / e2);
        assert!(e2 / e3 > 3.5, "ratio {}", e2 / e3);

        let b = unit_basis(2, 0);
        let exact = [1.0 / 6.0, 1.0 / 3.0];
        let err = |n: usize| {
            let w = inner_product(&sampled(n, |s| s), &b).unwrap();
            (w[0] - exact[0]).abs().max((w[1] - exact[1]).abs())
        };
        assert!(err(11) / err(21) > 3.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn partition_of_unity_and_support(
                order in 2usize..6,
                m in 0usize..9,
                s in 0.0f64..=1.0,
            ) {
                let b = unit_basis(order, m);
                let v = b.eval(s).unwrap();
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(v.iter().all(|&x| x >= 0.0));
                prop_assert!(v.iter().filter(|&&x| x != 0.0).count() <= order);
            }
        }
    }
}

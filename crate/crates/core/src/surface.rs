//! Coefficient functions `alpha_d(s, tau_j)` and the quantities every
//! estimator shares: linear predictors on a cohort and the sequential
//! censored quantile loss.

use serde::{Deserialize, Serialize};

use crate::basis::{trapezoid_weights, Interval};
use crate::cohort::Cohort;
use crate::cqr::QuantileGrid;
use crate::error::{Error, Result};

/// Anything that can be evaluated as `alpha_d(s, tau_j)` on a quantile grid.
pub trait CoefficientFunction {
    fn q(&self) -> usize;
    fn quantile_grid(&self) -> &QuantileGrid;
    fn domain(&self, d: usize) -> Interval;
    /// Values of predictor `d` at level `j` on the given abscissae.
    fn values_at(&self, d: usize, j: usize, s: &[f64]) -> Result<Vec<f64>>;
}

/// Common dense representation of coefficient functions: values on one
/// equispaced abscissa grid per predictor and level, evaluated elsewhere by
/// linear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSurface {
    domain: Interval,
    abscissa: Vec<f64>,
    grid: QuantileGrid,
    /// `[d][j][k]`, `j` over all levels including `tau_0`.
    values: Vec<Vec<Vec<f64>>>,
}

pub const DEFAULT_DENSE_POINTS: usize = 201;

impl DenseSurface {
    pub fn zeros(q: usize, domain: Interval, points: usize, grid: QuantileGrid) -> Self {
        let abscissa = domain.linspace(points);
        let values = vec![vec![vec![0.0; points]; grid.len() + 1]; q];
        Self {
            domain,
            abscissa,
            grid,
            values,
        }
    }

    /// Samples `f` on a dense grid over the domain of predictor 0.
    pub fn sample(f: &dyn CoefficientFunction, points: usize) -> Result<Self> {
        let domain = f.domain(0);
        for d in 1..f.q() {
            if f.domain(d) != domain {
                return Err(Error::Domain(
                    "dense surfaces need one domain shared by all predictors".into(),
                ));
            }
        }
        let mut out = Self::zeros(f.q(), domain, points, f.quantile_grid().clone());
        for d in 0..f.q() {
            for j in 0..=out.grid.len() {
                out.values[d][j] = f.values_at(d, j, &out.abscissa)?;
            }
        }
        Ok(out)
    }

    pub fn abscissa(&self) -> &[f64] {
        &self.abscissa
    }

    pub fn domain_interval(&self) -> Interval {
        self.domain
    }

    pub fn level(&self, d: usize, j: usize) -> &[f64] {
        &self.values[d][j]
    }

    pub fn level_mut(&mut self, d: usize, j: usize) -> &mut [f64] {
        &mut self.values[d][j]
    }

    /// Pointwise sum with another surface on the same grids.
    pub fn add(&self, other: &DenseSurface) -> Result<DenseSurface> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (od, pd) in out.values.iter_mut().zip(&other.values) {
            for (oj, pj) in od.iter_mut().zip(pd) {
                oj.iter_mut().zip(pj).for_each(|(a, b)| *a += b);
            }
        }
        Ok(out)
    }

    pub fn check_compatible(&self, other: &DenseSurface) -> Result<()> {
        if self.abscissa != other.abscissa
            || self.grid != other.grid
            || self.values.len() != other.values.len()
        {
            return Err(Error::Domain("dense surfaces live on different grids".into()));
        }
        Ok(())
    }

    fn interpolate(&self, row: &[f64], s: f64) -> f64 {
        let a = &self.abscissa;
        let n = a.len();
        let s = s.clamp(a[0], a[n - 1]);
        let k = a.partition_point(|&x| x <= s).clamp(1, n - 1);
        let (x0, x1) = (a[k - 1], a[k]);
        let t = (s - x0) / (x1 - x0);
        row[k - 1] * (1.0 - t) + row[k] * t
    }
}

impl CoefficientFunction for DenseSurface {
    fn q(&self) -> usize {
        self.values.len()
    }

    fn quantile_grid(&self) -> &QuantileGrid {
        &self.grid
    }

    fn domain(&self, _d: usize) -> Interval {
        self.domain
    }

    fn values_at(&self, d: usize, j: usize, s: &[f64]) -> Result<Vec<f64>> {
        let tol = 1e-9 * self.domain.length().max(1.0);
        let row = &self.values[d][j];
        s.iter()
            .map(|&x| {
                if x < self.domain.lo - tol || x > self.domain.hi + tol {
                    Err(Error::Domain(format!("abscissa {x} outside surface domain")))
                } else {
                    Ok(self.interpolate(row, x))
                }
            })
            .collect()
    }
}

/// Linear predictors `sum_d <X_id, alpha_d(., tau_j)>` for every subject and
/// level `j = 1..L`, integrated by the trapezoid rule on the cohort's own
/// sampling grid. Returned as `[j - 1][i]`.
pub fn linear_predictors(f: &dyn CoefficientFunction, cohort: &Cohort) -> Result<Vec<Vec<f64>>> {
    if f.q() != cohort.q() {
        return Err(Error::Domain(format!(
            "surface has {} predictors, cohort `{}` has {}",
            f.q(),
            cohort.label(),
            cohort.q()
        )));
    }
    let grid = cohort.grid();
    let m = grid.len();
    for d in 0..f.q() {
        let dom = f.domain(d);
        let tol = 1e-9 * dom.length().max(1.0);
        if (grid[0] - dom.lo).abs() > tol || (grid[m - 1] - dom.hi).abs() > tol {
            return Err(Error::Domain(format!(
                "cohort `{}` is sampled on [{}, {}] but the surface domain is [{}, {}]",
                cohort.label(),
                grid[0],
                grid[m - 1],
                dom.lo,
                dom.hi
            )));
        }
    }
    let trap = trapezoid_weights(grid);
    let q = f.q();
    // weighted samples, [i][d * m + k]
    let weighted: Vec<Vec<f64>> = cohort
        .subjects()
        .iter()
        .map(|s| {
            s.predictors
                .iter()
                .flat_map(|p| p.values().iter().zip(&trap).map(|(v, w)| v * w))
                .collect()
        })
        .collect();
    let levels = f.quantile_grid().len();
    let mut out = Vec::with_capacity(levels);
    let mut alpha = vec![0.0; q * m];
    for j in 1..=levels {
        for d in 0..q {
            alpha[d * m..(d + 1) * m].copy_from_slice(&f.values_at(d, j, grid)?);
        }
        out.push(
            weighted
                .iter()
                .map(|w| w.iter().zip(&alpha).map(|(a, b)| a * b).sum())
                .collect(),
        );
    }
    Ok(out)
}

/// Per-level sequential loss
/// `sum_i [delta_i max(eta_ij - r_ij, 0) + u_ij (r_ij - eta_ij)]` where
/// `r` are log responses, `eta` linear predictors (`[j - 1][i]`) and the
/// hazard weights `u_ij` are accumulated from the same predictors.
pub fn sequential_loss(
    grid: &QuantileGrid,
    log_y: &[f64],
    delta: &[bool],
    predictors: &[Vec<f64>],
) -> Vec<f64> {
    let n = log_y.len();
    let jumps = grid.h_jumps();
    let mut u = vec![jumps[0]; n];
    let mut losses = Vec::with_capacity(grid.len());
    for (j, eta) in predictors.iter().enumerate() {
        let mut loss = 0.0;
        for i in 0..n {
            let r = log_y[i] - eta[i];
            if delta[i] && r < 0.0 {
                loss -= r;
            }
            loss += u[i] * r;
        }
        losses.push(loss);
        if j + 1 < grid.len() {
            for i in 0..n {
                if log_y[i] >= eta[i] {
                    u[i] += jumps[j + 1];
                }
            }
        }
    }
    losses
}

/// Sequential loss of a surface on a cohort, one value per positive level.
pub fn empirical_loss(f: &dyn CoefficientFunction, cohort: &Cohort) -> Result<Vec<f64>> {
    let eta = linear_predictors(f, cohort)?;
    Ok(sequential_loss(
        f.quantile_grid(),
        &cohort.log_y(),
        &cohort.delta(),
        &eta,
    ))
}

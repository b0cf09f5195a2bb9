//! Sequential censored quantile regression on a single cohort.
//!
//! At each positive level `tau_j` the coefficient vector minimizes the convex
//! piecewise-linear objective
//!
//! ```text
//! G(b) = sum_i [ delta_i max(W_i b - r_i, 0) + u_ij (r_i - W_i b) ]
//! ```
//!
//! where `r_i` is the log response and the hazard weights `u_ij` accumulate
//! `H(tau_{l+1}) - H(tau_l)` over earlier levels whose fitted quantile does not
//! exceed the observation. Up to constants `2 G` equals the weighted L1 loss
//! `sum_i delta_i |r_i - W_i b| + b^T sum_i (delta_i - 2 u_ij) W_i`. The linear
//! part is what a pseudo-observation with an arbitrarily large response would
//! contribute; [`lad`] takes it exactly, as a shift of the dual equality
//! constraint, which avoids the bad scaling of a finite big-M row.

pub mod exchange;
mod grid;
pub mod lad;

use serde::{Deserialize, Serialize};

use crate::basis::{Interval, QuadratureMap, SampledFunction, SplineBasis};
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::surface::CoefficientFunction;

pub use grid::{hazard_transform, QuantileGrid};
pub use lad::IpmOptions;

/// Default interior knot count, `ceil(n^(1/5))`.
pub fn default_knots(n: usize) -> usize {
    integer_root_ceil(n, 5)
}

/// Default interior knot count for the debias basis, `ceil(n^(1/7))`.
pub fn default_eta_knots(n: usize) -> usize {
    integer_root_ceil(n, 7)
}

fn integer_root_ceil(n: usize, k: u32) -> usize {
    let mut m = 0usize;
    while (m as u128).pow(k) < n as u128 {
        m += 1;
    }
    m
}

/// Row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn from_rows(p: usize, data: Vec<f64>) -> Self {
        assert!(p > 0 && data.len().is_multiple_of(p), "design shape");
        Self {
            n: data.len() / p,
            p,
            data,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.p)
    }

    pub fn dot(&self, i: usize, b: &[f64]) -> f64 {
        self.row(i).iter().zip(b).map(|(a, b)| a * b).sum()
    }
}

/// Rows `(W_i1^T, ..., W_iq^T)` with `W_id = <X_id, B_d>`.
pub fn design_matrix(cohort: &Cohort, bases: &[SplineBasis]) -> Result<Design> {
    if bases.len() != cohort.q() {
        return Err(Error::Config(format!(
            "{} bases given for {} predictors",
            bases.len(),
            cohort.q()
        )));
    }
    let maps = bases
        .iter()
        .map(|b| QuadratureMap::new(cohort.grid(), b))
        .collect::<Result<Vec<_>>>()?;
    let p: usize = bases.iter().map(SplineBasis::dim).sum();
    let mut data = vec![0.0; cohort.n() * p];
    for (row, subject) in data.chunks_exact_mut(p).zip(cohort.subjects()) {
        let mut offset = 0;
        for (map, x) in maps.iter().zip(&subject.predictors) {
            map.apply_into(x.values(), &mut row[offset..offset + map.dim()]);
            offset += map.dim();
        }
    }
    Ok(Design::from_rows(p, data))
}

/// `u_ij = sum_{l<j} I{log y_i >= log Q_i(tau_l)} (H(tau_{l+1}) - H(tau_l))`.
///
/// `prior` holds the fitted log quantiles at levels `1..j-1`; the `l = 0` term
/// always counts because `Q(tau_0) = 0`.
pub fn hazard_weight(prior: &[f64], log_y: f64, grid: &QuantileGrid, j: usize) -> f64 {
    assert!(j >= 1 && j <= grid.len(), "level {j} out of range");
    assert_eq!(prior.len(), j - 1, "need fitted quantiles for levels 1..j-1");
    let jumps = grid.h_jumps();
    jumps[0]
        + prior
            .iter()
            .zip(&jumps[1..j])
            .filter(|(q, _)| log_y >= **q)
            .map(|(_, h)| h)
            .sum::<f64>()
}

/// One level of the sequential problem.
#[derive(Debug, Clone, Copy)]
pub struct StepProblem<'a> {
    pub design: &'a Design,
    pub response: &'a [f64],
    pub delta: &'a [bool],
    pub u: &'a [f64],
    /// Per-subject multipliers; `None` means all ones.
    pub multipliers: Option<&'a [f64]>,
}

impl StepProblem<'_> {
    fn weight(&self, i: usize) -> f64 {
        self.multipliers.map_or(1.0, |z| z[i])
    }

    /// `G(b)`, including multipliers when present.
    pub fn objective(&self, b: &[f64]) -> f64 {
        (0..self.design.n())
            .map(|i| {
                let r = self.response[i] - self.design.dot(i, b);
                let hinge = if self.delta[i] { (-r).max(0.0) } else { 0.0 };
                self.weight(i) * (hinge + self.u[i] * r)
            })
            .sum()
    }

    /// The estimating function `sum_i w_i W_i (N_i(b) - u_ij)` with
    /// `N_i(b) = delta_i I(r_i <= W_i b)`; it is the gradient of `G` away
    /// from breakpoints.
    pub fn estimating_function(&self, b: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.design.p()];
        for i in 0..self.design.n() {
            let r = self.response[i] - self.design.dot(i, b);
            let count = if self.delta[i] && r <= 0.0 { 1.0 } else { 0.0 };
            let c = self.weight(i) * (count - self.u[i]);
            g.iter_mut()
                .zip(self.design.row(i))
                .for_each(|(g, w)| *g += c * w);
        }
        g
    }
}

/// Convergence record for one quantile level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub tau: f64,
    pub iterations: usize,
    pub gap: f64,
    pub events: usize,
    /// Fewer informative events than coefficients, or a rank-deficient event
    /// design; the ridge picked the solution.
    pub untrustworthy: bool,
}

#[derive(Debug, Clone)]
pub struct StepSolution {
    pub coef: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub gap: f64,
    pub events: usize,
    pub untrustworthy: bool,
}

/// Minimizes `G` for one level.
pub fn solve_step(problem: &StepProblem<'_>, opts: &IpmOptions) -> Result<StepSolution> {
    let design = problem.design;
    let (n, p) = (design.n(), design.p());
    assert_eq!(problem.response.len(), n);
    assert_eq!(problem.delta.len(), n);
    assert_eq!(problem.u.len(), n);

    let mut rows = Vec::with_capacity((n + 1) * p);
    let mut resp = Vec::with_capacity(n + 1);
    let mut pseudo = vec![0.0; p];
    let mut events = 0;
    for i in 0..n {
        let w = problem.weight(i);
        if w <= 0.0 {
            continue;
        }
        let d = if problem.delta[i] { 1.0 } else { 0.0 };
        let c = w * (2.0 * problem.u[i] - d);
        pseudo
            .iter_mut()
            .zip(design.row(i))
            .for_each(|(s, x)| *s += c * x);
        if problem.delta[i] {
            events += 1;
            rows.extend(design.row(i).iter().map(|x| w * x));
            resp.push(w * problem.response[i]);
        }
    }
    if events == 0 {
        return Err(Error::DegenerateData(
            "no events: the objective is unbounded".into(),
        ));
    }
    let event_condition = lad::design_inverse_condition(&rows, p);
    let sol = lad::lad_ipm(&rows, p, &resp, &pseudo, opts)?;
    let objective = problem.objective(&sol.coef);
    Ok(StepSolution {
        objective,
        iterations: sol.iterations,
        gap: sol.gap,
        events,
        untrustworthy: events < p || event_condition < 1e-12,
        coef: sol.coef,
    })
}

/// Output of [`fit_levels`]: coefficients per level `1..L` and diagnostics.
#[derive(Debug, Clone)]
pub struct LevelFits {
    pub gamma: Vec<Vec<f64>>,
    pub diagnostics: Vec<LevelDiagnostics>,
}

/// The sequential recursion shared by the baseline and debias estimators.
///
/// `response(j)` gives the level-`j` responses (`j >= 1`); the hazard
/// indicator at an earlier level `l` compares `response(l)` with the level-`l`
/// fitted linear predictor.
pub fn fit_levels(
    design: &Design,
    response: &dyn Fn(usize) -> Vec<f64>,
    delta: &[bool],
    multipliers: Option<&[f64]>,
    grid: &QuantileGrid,
    opts: &IpmOptions,
) -> Result<LevelFits> {
    let n = design.n();
    let jumps = grid.h_jumps();
    let mut u = vec![jumps[0]; n];
    let mut gamma = Vec::with_capacity(grid.len());
    let mut diagnostics = Vec::with_capacity(grid.len());
    for j in 1..=grid.len() {
        let r = response(j);
        let problem = StepProblem {
            design,
            response: &r,
            delta,
            u: &u,
            multipliers,
        };
        let sol = solve_step(&problem, opts).map_err(|e| match e {
            Error::Fit(m) => Error::Fit(format!("level tau = {}: {m}", grid.tau(j))),
            Error::DegenerateData(m) => {
                Error::DegenerateData(format!("level tau = {}: {m}", grid.tau(j)))
            }
            other => other,
        })?;
        if j < grid.len() {
            for i in 0..n {
                if r[i] >= design.dot(i, &sol.coef) {
                    u[i] += jumps[j];
                }
            }
        }
        diagnostics.push(LevelDiagnostics {
            tau: grid.tau(j),
            iterations: sol.iterations,
            gap: sol.gap,
            events: sol.events,
            untrustworthy: sol.untrustworthy,
        });
        gamma.push(sol.coef);
    }
    Ok(LevelFits { gamma, diagnostics })
}

/// Identifying information carried with every fitted surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMeta {
    pub label: String,
    pub n: usize,
    pub events: usize,
    pub diagnostics: Vec<LevelDiagnostics>,
}

/// Fitted spline coefficients `gamma_d(tau_j)` for every predictor and level.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSurface {
    bases: Vec<SplineBasis>,
    grid: QuantileGrid,
    /// `[d][j][l]` over all levels including the zero level `tau_0`.
    gamma: Vec<Vec<Vec<f64>>>,
    meta: SurfaceMeta,
}

impl CoefficientSurface {
    pub fn new(
        bases: Vec<SplineBasis>,
        grid: QuantileGrid,
        gamma: Vec<Vec<Vec<f64>>>,
        meta: SurfaceMeta,
    ) -> Result<Self> {
        if gamma.len() != bases.len() {
            return Err(Error::Format("gamma and bases disagree on q".into()));
        }
        for (g, b) in gamma.iter().zip(&bases) {
            if g.len() != grid.len() + 1 || g.iter().any(|v| v.len() != b.dim()) {
                return Err(Error::Format(
                    "gamma dimensions do not match the bases and grid".into(),
                ));
            }
        }
        Ok(Self {
            bases,
            grid,
            gamma,
            meta,
        })
    }

    /// Assembles a surface from stacked per-level coefficient vectors.
    pub fn from_stacked(
        bases: Vec<SplineBasis>,
        grid: QuantileGrid,
        stacked: &[Vec<f64>],
        meta: SurfaceMeta,
    ) -> Result<Self> {
        let mut gamma: Vec<Vec<Vec<f64>>> = bases
            .iter()
            .map(|b| vec![vec![0.0; b.dim()]])
            .collect();
        for coef in stacked {
            let mut offset = 0;
            for (d, b) in bases.iter().enumerate() {
                gamma[d].push(coef[offset..offset + b.dim()].to_vec());
                offset += b.dim();
            }
        }
        Self::new(bases, grid, gamma, meta)
    }

    pub fn bases(&self) -> &[SplineBasis] {
        &self.bases
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    pub fn gamma(&self, d: usize, j: usize) -> &[f64] {
        &self.gamma[d][j]
    }

    pub fn meta(&self) -> &SurfaceMeta {
        &self.meta
    }

    pub fn label(&self) -> &str {
        &self.meta.label
    }

    /// Coefficients stacked across predictors at level `j`.
    pub fn stacked(&self, j: usize) -> Vec<f64> {
        self.gamma.iter().flat_map(|g| g[j].iter().copied()).collect()
    }

    /// `alpha_d(s, tau_j) = B_d(s)^T gamma_d(tau_j)`.
    pub fn alpha(&self, d: usize, j: usize, s: f64) -> Result<f64> {
        self.bases[d].combine(&self.gamma[d][j], s)
    }

    pub(crate) fn into_parts(self) -> (Vec<SplineBasis>, QuantileGrid, Vec<Vec<Vec<f64>>>, SurfaceMeta) {
        (self.bases, self.grid, self.gamma, self.meta)
    }
}

impl CoefficientFunction for CoefficientSurface {
    fn q(&self) -> usize {
        self.bases.len()
    }

    fn quantile_grid(&self) -> &QuantileGrid {
        &self.grid
    }

    fn domain(&self, d: usize) -> Interval {
        self.bases[d].domain()
    }

    fn values_at(&self, d: usize, j: usize, s: &[f64]) -> Result<Vec<f64>> {
        s.iter().map(|&x| self.alpha(d, j, x)).collect()
    }
}

/// Bases with `knots` interior knots and the given order on each predictor's
/// sampling domain.
pub fn bases_for(cohort: &Cohort, order: usize, knots: usize) -> Result<Vec<SplineBasis>> {
    let g = cohort.grid();
    let domain = Interval::new(g[0], g[g.len() - 1])?;
    (0..cohort.q())
        .map(|_| SplineBasis::new(order, knots, domain))
        .collect()
}

/// Baseline estimator: sequential fits at every positive level.
pub fn fit_sequential(
    cohort: &Cohort,
    bases: &[SplineBasis],
    grid: &QuantileGrid,
    opts: &IpmOptions,
) -> Result<CoefficientSurface> {
    let design = design_matrix(cohort, bases)?;
    if cohort.n() < design.p() {
        return Err(Error::InsufficientData(format!(
            "cohort `{}` has {} subjects for {} coefficients",
            cohort.label(),
            cohort.n(),
            design.p()
        )));
    }
    if cohort.events() == 0 {
        return Err(Error::DegenerateData(format!(
            "cohort `{}` has no events",
            cohort.label()
        )));
    }
    let log_y = cohort.log_y();
    let delta = cohort.delta();
    let fits = fit_levels(&design, &|_| log_y.clone(), &delta, None, grid, opts)?;
    for d in fits.diagnostics.iter().filter(|d| d.untrustworthy) {
        log::warn!(
            "cohort `{}`: level tau = {} is untrustworthy ({} events)",
            cohort.label(),
            d.tau,
            d.events
        );
    }
    let meta = SurfaceMeta {
        label: cohort.label().to_string(),
        n: cohort.n(),
        events: cohort.events(),
        diagnostics: fits.diagnostics,
    };
    CoefficientSurface::from_stacked(bases.to_vec(), grid.clone(), &fits.gamma, meta)
}

/// `exp(sum_d <x_d, alpha_d(., tau)>)` via the design-row inner products;
/// zero at `tau_0`.
pub fn predict_quantile(
    fit: &CoefficientSurface,
    predictors: &[SampledFunction],
    tau: f64,
) -> Result<f64> {
    let j = fit.grid().index_of(tau)?;
    if j == 0 {
        return Ok(0.0);
    }
    if predictors.len() != fit.bases().len() {
        return Err(Error::Domain(format!(
            "{} predictors given, surface has {}",
            predictors.len(),
            fit.bases().len()
        )));
    }
    let mut eta = 0.0;
    for (d, (x, basis)) in predictors.iter().zip(fit.bases()).enumerate() {
        let w = QuadratureMap::new(x.grid(), basis)?.apply(x.values());
        eta += w.iter().zip(fit.gamma(d, j)).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(eta.exp())
}

/// Number of adjacent-level decreases in the predicted quantiles of each
/// subject (no rearrangement is applied).
pub fn monotonicity_violations(fit: &CoefficientSurface, cohort: &Cohort) -> Result<usize> {
    let design = design_matrix(cohort, fit.bases())?;
    let mut count = 0;
    for i in 0..design.n() {
        let mut prev = f64::NEG_INFINITY;
        for j in 1..=fit.grid().len() {
            let eta = design.dot(i, &fit.stacked(j));
            if eta < prev {
                count += 1;
            }
            prev = eta;
        }
    }
    Ok(count)
}

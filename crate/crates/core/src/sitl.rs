//! Similarity-informed transfer: held-out loss differences, kernel weights,
//! the weighted transfer surface and the debias refit on the target cohort.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::cohort::{split_half, Cohort};
use crate::cqr::{
    bases_for, default_eta_knots, default_knots, design_matrix, fit_levels, fit_sequential,
    CoefficientSurface, IpmOptions, QuantileGrid, SurfaceMeta,
};
use crate::error::{Error, Result};
use crate::surface::{
    empirical_loss, linear_predictors, CoefficientFunction, DenseSurface, DEFAULT_DENSE_POINTS,
};

/// Weight masses `sum n_k w_k` below this fraction of `sum n_k` are reported
/// as nearly uninformative. Normalization happens in log space, so such
/// sources are still combined; only an exactly zero mass falls back.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Default bandwidth `2 log(5 n0)`.
pub fn default_bandwidth(n0: usize) -> f64 {
    2.0 * (5.0 * n0 as f64).ln()
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("bandwidth must be positive, got {h}")))
    }
}

/// Gaussian kernel weight `(1/h) phi(D/h)`.
pub fn similarity_weight(d: f64, h: f64) -> Result<f64> {
    Ok(log_similarity_weight(d, h)?.exp())
}

/// `log((1/h) phi(D/h))`, finite for every finite `D`.
pub fn log_similarity_weight(d: f64, h: f64) -> Result<f64> {
    check_bandwidth(h)?;
    let u = d / h;
    Ok(-0.5 * u * u - h.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// Uniform kernel: `0.5` for sources within one bandwidth, else `0`.
pub fn hard_threshold_weight(d: f64, h: f64) -> Result<f64> {
    check_bandwidth(h)?;
    Ok(if d.abs() <= h { 0.5 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Gaussian,
    /// Hard thresholding; gives the equal-weight transfer baseline.
    Uniform,
}

impl Kernel {
    pub fn weight(self, d: f64, h: f64) -> Result<f64> {
        match self {
            Kernel::Gaussian => similarity_weight(d, h),
            Kernel::Uniform => hard_threshold_weight(d, h),
        }
    }

    /// Log weight; `-inf` where the kernel vanishes.
    pub fn log_weight(self, d: f64, h: f64) -> Result<f64> {
        match self {
            Kernel::Gaussian => log_similarity_weight(d, h),
            Kernel::Uniform => Ok(hard_threshold_weight(d, h)?.ln()),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Gaussian => "gaussian",
            Kernel::Uniform => "uniform",
        })
    }
}

impl FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Kernel::Gaussian),
            "uniform" => Ok(Kernel::Uniform),
            other => Err(Error::Config(format!("unknown kernel `{other}`"))),
        }
    }
}

/// `D_k = (1/L) sum_j [loss(source, tau_j) - loss(target half, tau_j)]` on
/// the held-out half.
pub fn loss_difference(
    target_half_fit: &dyn CoefficientFunction,
    source_fit: &dyn CoefficientFunction,
    eval: &Cohort,
) -> Result<f64> {
    if target_half_fit.quantile_grid() != source_fit.quantile_grid() {
        return Err(Error::Config(
            "source and target fits use different quantile grids".into(),
        ));
    }
    let target = empirical_loss(target_half_fit, eval)?;
    let source = empirical_loss(source_fit, eval)?;
    let l = target.len() as f64;
    Ok(source.iter().zip(&target).map(|(s, t)| s - t).sum::<f64>() / l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSimilarity {
    pub label: String,
    pub n: usize,
    pub loss_diff: f64,
    pub weight: f64,
    /// `log weight`, kept so that far sources normalize without underflow.
    pub log_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub sources: Vec<SourceSimilarity>,
    pub bandwidth: f64,
    pub kernel: Kernel,
    pub split_seed: u64,
}

impl SimilarityReport {
    /// `sum_k n_k w_k`.
    pub fn weight_mass(&self) -> f64 {
        self.sources.iter().map(|s| s.n as f64 * s.weight).sum()
    }

    /// True when every source has zero kernel weight.
    pub fn is_uninformative(&self) -> bool {
        !self
            .sources
            .iter()
            .any(|s| s.n > 0 && s.log_weight.is_finite())
    }

    /// True when the weight mass is below [`WEIGHT_FLOOR`] of `sum n_k`.
    pub fn below_floor(&self) -> bool {
        let total: f64 = self.sources.iter().map(|s| s.n as f64).sum();
        self.weight_mass() < WEIGHT_FLOOR * total
    }

    /// Normalized transfer weights `n_k w_k / sum_l n_l w_l`, computed in log
    /// space. All zero when the sources are uninformative.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let logs: Vec<f64> = self
            .sources
            .iter()
            .map(|s| (s.n as f64).ln() + s.log_weight)
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return vec![0.0; logs.len()];
        }
        let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        logs.iter().map(|l| (l - max).exp() / total).collect()
    }
}

/// Loss differences and weights for every source (evaluated concurrently).
pub fn similarity_report(
    target_half_fit: &CoefficientSurface,
    sources: &[CoefficientSurface],
    eval: &Cohort,
    kernel: Kernel,
    bandwidth: f64,
    split_seed: u64,
) -> Result<SimilarityReport> {
    check_bandwidth(bandwidth)?;
    let sources = sources
        .par_iter()
        .map(|s| {
            let d = loss_difference(target_half_fit, s, eval)?;
            Ok(SourceSimilarity {
                label: s.label().to_string(),
                n: s.meta().n,
                loss_diff: d,
                weight: kernel.weight(d, bandwidth)?,
                log_weight: kernel.log_weight(d, bandwidth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityReport {
        sources,
        bandwidth,
        kernel,
        split_seed,
    })
}

/// Transfer surface together with the fallback flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub surface: DenseSurface,
    /// All sources were uninformative; the surface is identically zero.
    pub fallback: bool,
}

/// `sum_k n_k w_k alpha_k / sum_k n_k w_k` pointwise on a dense grid.
pub fn aggregate_sources(
    sources: &[&dyn CoefficientFunction],
    report: &SimilarityReport,
    points: usize,
) -> Result<Transfer> {
    let first = *sources
        .first()
        .ok_or_else(|| Error::Config("at least one source is required".into()))?;
    if sources.len() != report.sources.len() {
        return Err(Error::Config(format!(
            "{} source surfaces but {} similarity entries",
            sources.len(),
            report.sources.len()
        )));
    }
    let grid = first.quantile_grid().clone();
    let domain = first.domain(0);
    let mut out = DenseSurface::zeros(first.q(), domain, points, grid.clone());
    if report.is_uninformative() {
        log::warn!("all sources are uninformative; transferring nothing");
        return Ok(Transfer {
            surface: out,
            fallback: true,
        });
    }
    if report.below_floor() {
        log::warn!(
            "source weight mass {:.3e} is below {WEIGHT_FLOOR:e} of the total size; sources are far from the target",
            report.weight_mass()
        );
    }
    let coef = report.normalized_weights();
    for ((src, sim), &c) in sources.iter().zip(&report.sources).zip(&coef) {
        if src.q() != first.q() || src.quantile_grid() != &grid {
            return Err(Error::Config(format!(
                "source `{}` disagrees with the others on predictors or levels",
                sim.label
            )));
        }
        if c == 0.0 {
            continue;
        }
        let dense = DenseSurface::sample(*src, points)?;
        if dense.domain_interval() != domain {
            return Err(Error::Domain(format!(
                "source `{}` lives on a different domain",
                sim.label
            )));
        }
        for d in 0..first.q() {
            for j in 0..=grid.len() {
                out.level_mut(d, j)
                    .iter_mut()
                    .zip(dense.level(d, j))
                    .for_each(|(o, v)| *o += c * v);
            }
        }
    }
    Ok(Transfer {
        surface: out,
        fallback: false,
    })
}

/// Residual responses `log Y_i - <X_i, alpha_S(tau_j)>`, `[j - 1][i]`.
pub fn transfer_residuals(target: &Cohort, transfer: &DenseSurface) -> Result<Vec<Vec<f64>>> {
    let eta = linear_predictors(transfer, target)?;
    let log_y = target.log_y();
    Ok(eta
        .into_iter()
        .map(|e| log_y.iter().zip(e).map(|(y, e)| y - e).collect())
        .collect())
}

/// Sequential fit of the difference surface on residual responses, with
/// optional per-subject multipliers.
pub fn debias_with_multipliers(
    target: &Cohort,
    residuals: &[Vec<f64>],
    grid: &QuantileGrid,
    eta_bases: &[SplineBasis],
    multipliers: Option<&[f64]>,
    opts: &IpmOptions,
) -> Result<CoefficientSurface> {
    let design = design_matrix(target, eta_bases)?;
    if residuals.len() != grid.len() {
        return Err(Error::Config("residuals do not match the quantile grid".into()));
    }
    if let Some(z) = multipliers {
        if z.len() != target.n() {
            return Err(Error::Config(format!(
                "{} multipliers for {} subjects",
                z.len(),
                target.n()
            )));
        }
    }
    let delta = target.delta();
    let fits = fit_levels(
        &design,
        &|j| residuals[j - 1].clone(),
        &delta,
        multipliers,
        grid,
        opts,
    )?;
    for d in fits.diagnostics.iter().filter(|d| d.untrustworthy) {
        log::warn!(
            "debias on `{}`: level tau = {} has {} events for {} coefficients",
            target.label(),
            d.tau,
            d.events,
            design.p()
        );
    }
    let meta = SurfaceMeta {
        label: format!("{}/debias", target.label()),
        n: target.n(),
        events: target.events(),
        diagnostics: fits.diagnostics,
    };
    CoefficientSurface::from_stacked(eta_bases.to_vec(), grid.clone(), &fits.gamma, meta)
}

/// The debias step: sequential fit of the difference surface on residuals.
pub fn debias_fit(
    target: &Cohort,
    transfer: &DenseSurface,
    eta_bases: &[SplineBasis],
    opts: &IpmOptions,
) -> Result<CoefficientSurface> {
    let residuals = transfer_residuals(target, transfer)?;
    debias_with_multipliers(
        target,
        &residuals,
        transfer.quantile_grid(),
        eta_bases,
        None,
        opts,
    )
}

/// Tuning for [`sitl_estimate`]. `None` selects the size-based default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitlConfig {
    pub order: usize,
    pub knots: Option<usize>,
    pub eta_knots: Option<usize>,
    pub bandwidth: Option<f64>,
    pub kernel: Kernel,
    pub dense_points: usize,
    pub split_seed: u64,
}

impl Default for SitlConfig {
    fn default() -> Self {
        Self {
            order: 4,
            knots: None,
            eta_knots: None,
            bandwidth: None,
            kernel: Kernel::Gaussian,
            dense_points: DEFAULT_DENSE_POINTS,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SitlFit {
    pub transfer: DenseSurface,
    pub debias: CoefficientSurface,
    /// `transfer + debias` on the dense grid.
    pub combined: DenseSurface,
    pub report: SimilarityReport,
    /// `[j - 1][i]` residuals of the target on the transfer surface.
    pub residuals: Vec<Vec<f64>>,
    /// Sources were uninformative and the fit is target-only.
    pub fallback: bool,
}

impl SitlFit {
    pub fn eta_bases(&self) -> &[SplineBasis] {
        self.debias.bases()
    }
}

/// Full pipeline: split, half fit, weights, transfer, debias on the whole
/// target cohort.
pub fn sitl_estimate(
    target: &Cohort,
    sources: &[CoefficientSurface],
    config: &SitlConfig,
    opts: &IpmOptions,
) -> Result<SitlFit> {
    let grid = sources
        .first()
        .ok_or_else(|| Error::Config("at least one source estimator is required".into()))?
        .grid()
        .clone();
    for s in sources {
        if s.grid() != &grid {
            return Err(Error::Config(format!(
                "source `{}` uses a different quantile grid",
                s.label()
            )));
        }
        if s.q() != target.q() {
            return Err(Error::Domain(format!(
                "source `{}` has {} predictors, target has {}",
                s.label(),
                s.q(),
                target.q()
            )));
        }
    }
    let (fit_half, eval_half) = split_half(target, config.split_seed)?;
    let half_knots = config.knots.unwrap_or_else(|| default_knots(fit_half.n()));
    let half_bases = bases_for(&fit_half, config.order, half_knots)?;
    for s in sources {
        for (d, b) in s.bases().iter().enumerate() {
            if b.domain() != half_bases[d].domain() {
                return Err(Error::Domain(format!(
                    "source `{}` predictor {} is defined on [{}, {}], the target on [{}, {}]",
                    s.label(),
                    d + 1,
                    b.domain().lo,
                    b.domain().hi,
                    half_bases[d].domain().lo,
                    half_bases[d].domain().hi
                )));
            }
        }
    }
    let half_fit = fit_sequential(&fit_half, &half_bases, &grid, opts)?;
    let bandwidth = config.bandwidth.unwrap_or_else(|| default_bandwidth(target.n()));
    let report = similarity_report(
        &half_fit,
        sources,
        &eval_half,
        config.kernel,
        bandwidth,
        config.split_seed,
    )?;
    let refs: Vec<&dyn CoefficientFunction> =
        sources.iter().map(|s| s as &dyn CoefficientFunction).collect();
    let transfer = aggregate_sources(&refs, &report, config.dense_points)?;

    let eta_knots = config
        .eta_knots
        .unwrap_or_else(|| default_eta_knots(target.n()));
    let eta_bases = bases_for(target, config.order, eta_knots)?;
    let residuals = transfer_residuals(target, &transfer.surface)?;
    let debias = debias_with_multipliers(target, &residuals, &grid, &eta_bases, None, opts)?;
    let combined = transfer
        .surface
        .add(&DenseSurface::sample(&debias, config.dense_points)?)?;
    Ok(SitlFit {
        transfer: transfer.surface,
        debias,
        combined,
        report,
        residuals,
        fallback: transfer.fallback,
    })
}

/// Comparator that fits the concatenation of all cohorts.
pub fn pooled_fit(
    cohorts: &[&Cohort],
    order: usize,
    knots: Option<usize>,
    grid: &QuantileGrid,
    opts: &IpmOptions,
) -> Result<CoefficientSurface> {
    let pooled = Cohort::concat("pooled", cohorts.iter().copied())?;
    let knots = knots.unwrap_or_else(|| default_knots(pooled.n()));
    let bases = bases_for(&pooled, order, knots)?;
    fit_sequential(&pooled, &bases, grid, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Interval;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn gaussian_weights() {
        assert_abs_diff_eq!(similarity_weight(0.0, 1.0).unwrap(), 0.398942, epsilon = 1e-6);
        assert_abs_diff_eq!(similarity_weight(0.0, 2.0).unwrap(), 0.199471, epsilon = 1e-6);
        assert_abs_diff_eq!(similarity_weight(2.0, 1.0).unwrap(), 0.053991, epsilon = 1e-6);
        assert!(matches!(similarity_weight(1.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(hard_threshold_weight(1.0, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_weights() {
        assert_eq!(hard_threshold_weight(0.5, 1.0).unwrap(), 0.5);
        assert_eq!(hard_threshold_weight(1.5, 1.0).unwrap(), 0.0);
        assert_eq!(hard_threshold_weight(-0.3, 1.0).unwrap(), 0.5);
        assert_eq!(Kernel::Uniform.weight(-0.3, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn default_bandwidth_for_hundred() {
        assert_abs_diff_eq!(default_bandwidth(100), 2.0 * 500f64.ln(), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn weight_matches_closed_form(d in -50.0f64..50.0, h in 0.01f64..30.0) {
            let w = similarity_weight(d, h).unwrap();
            let expect = (1.0 / h) * (2.0 * std::f64::consts::PI).powf(-0.5) * (-(d / h).powi(2) / 2.0).exp();
            prop_assert!((w - expect).abs() <= 1e-12);
            prop_assert!(w <= 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt()));
        }

        #[test]
        fn far_to_near_ratio_grows_with_bandwidth(
            near in 0.0f64..2.0, gap in 0.1f64..5.0, h1 in 0.5f64..5.0, dh in 0.0f64..5.0,
        ) {
            let far = near + gap;
            let h2 = h1 + dh;
            let r1 = similarity_weight(far, h1).unwrap() / similarity_weight(near, h1).unwrap();
            let r2 = similarity_weight(far, h2).unwrap() / similarity_weight(near, h2).unwrap();
            prop_assert!(r2 >= r1 * (1.0 - 1e-12));
        }

        #[test]
        fn aggregate_is_a_convex_combination(
            wa in 0.0f64..1.0, wb in 1e-6f64..1.0, na in 1usize..2000, nb in 1usize..2000,
            shift in -3.0f64..3.0,
        ) {
            let a = constant_surface(1.0, "a", na);
            let b = constant_surface(1.0 + shift, "b", nb);
            let report = report_for(&[(na, wa), (nb, wb)]);
            let t = aggregate_sources(&[&a, &b], &report, 21).unwrap();
            let (lo, hi) = if shift < 0.0 { (1.0 + shift, 1.0) } else { (1.0, 1.0 + shift) };
            for j in 1..=2 {
                for v in t.surface.level(0, j) {
                    prop_assert!(*v >= lo * j as f64 - 1e-10 && *v <= hi * j as f64 + 1e-10);
                }
            }
        }
    }

    fn constant_surface(value: f64, label: &str, n: usize) -> CoefficientSurface {
        let grid = QuantileGrid::build(0.4, 0.2).unwrap();
        let bases = vec![SplineBasis::new(2, 1, Interval::unit()).unwrap()];
        // By partition of unity equal coefficients give a constant function.
        let stacked = vec![vec![value; 3], vec![2.0 * value; 3]];
        let meta = SurfaceMeta {
            label: label.into(),
            n,
            events: n,
            diagnostics: vec![],
        };
        CoefficientSurface::from_stacked(bases, grid, &stacked, meta).unwrap()
    }

    fn report_for(entries: &[(usize, f64)]) -> SimilarityReport {
        SimilarityReport {
            sources: entries
                .iter()
                .enumerate()
                .map(|(k, &(n, weight))| SourceSimilarity {
                    label: format!("s{k}"),
                    n,
                    loss_diff: 0.0,
                    weight,
                    log_weight: weight.ln(),
                })
                .collect(),
            bandwidth: 1.0,
            kernel: Kernel::Gaussian,
            split_seed: 0,
        }
    }

    #[test]
    fn two_source_combination_by_hand() {
        let a = constant_surface(2.0, "a", 100);
        let b = constant_surface(-1.0, "b", 100);
        let report = report_for(&[(100, 0.3989), (100, 0.0540)]);
        let t = aggregate_sources(&[&a, &b], &report, 11).unwrap();
        let expect = (0.3989 * 2.0 + 0.0540 * -1.0) / 0.4529;
        for v in t.surface.level(0, 1) {
            assert_abs_diff_eq!(*v, expect, epsilon = 1e-12);
        }
        assert!(!t.fallback);
    }

    #[test]
    fn single_source_is_reproduced() {
        let a = constant_surface(0.7, "a", 10);
        let t = aggregate_sources(&[&a], &report_for(&[(10, 1e-3)]), 11).unwrap();
        let dense = DenseSurface::sample(&a, 11).unwrap();
        assert_eq!(t.surface, dense);
    }

    #[test]
    fn zero_mass_falls_back_to_zero() {
        let a = constant_surface(0.7, "a", 10);
        let t = aggregate_sources(&[&a], &report_for(&[(10, 0.0)]), 11).unwrap();
        assert!(t.fallback);
        assert!(t.surface.level(0, 1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn far_sources_still_combine_without_underflow() {
        let h = default_bandwidth(100);
        let a = constant_surface(2.0, "a", 500);
        let b = constant_surface(-1.0, "b", 1000);
        let mut report = report_for(&[(500, 0.0), (1000, 0.0)]);
        for (s, d) in report.sources.iter_mut().zip([600.0, 601.0]) {
            s.loss_diff = d;
            s.weight = similarity_weight(d, h).unwrap();
            s.log_weight = log_similarity_weight(d, h).unwrap();
        }
        assert_eq!(report.sources[0].weight, 0.0);
        assert!(report.below_floor() && !report.is_uninformative());
        // Ratio n_a w_a / n_b w_b = 0.5 exp((601^2 - 600^2) / (2 h^2)).
        let r = 0.5 * ((601f64.powi(2) - 600f64.powi(2)) / (2.0 * h * h)).exp();
        let wa = r / (1.0 + r);
        let t = aggregate_sources(&[&a, &b], &report, 11).unwrap();
        assert!(!t.fallback);
        for v in t.surface.level(0, 1) {
            assert_abs_diff_eq!(*v, 2.0 * wa - (1.0 - wa), epsilon = 1e-10);
        }
    }

    #[test]
    fn identical_surfaces_have_zero_loss_difference() {
        let c = crate::cohort::tests::toy_cohort(12);
        let grid = QuantileGrid::build(0.4, 0.2).unwrap();
        let bases = vec![SplineBasis::new(2, 0, Interval::unit()).unwrap()];
        let stacked = vec![vec![0.5, 0.2], vec![0.9, 0.1]];
        let meta = SurfaceMeta {
            label: "x".into(),
            n: 12,
            events: 8,
            diagnostics: vec![],
        };
        let f = CoefficientSurface::from_stacked(bases, grid, &stacked, meta).unwrap();
        assert_eq!(loss_difference(&f, &f, &c).unwrap(), 0.0);
    }

    #[test]
    fn no_sources_is_a_configuration_error() {
        let c = crate::cohort::tests::toy_cohort(12);
        assert!(matches!(
            sitl_estimate(&c, &[], &SitlConfig::default(), &IpmOptions::default()),
            Err(Error::Config(_))
        ));
    }
}

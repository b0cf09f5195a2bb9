//! Multiplier resampling of the debias step and pointwise normal bands.
//!
//! Each replicate reweights every target subject by an independent positive
//! multiplier with mean 1 and variance 1 and re-solves the debias sequence;
//! the transfer surface stays fixed, so the bands reflect target-cohort
//! variability only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::SplineBasis;
use crate::cohort::Cohort;
use crate::cqr::{CoefficientSurface, IpmOptions};
use crate::error::{Error, Result};
use crate::sitl::{debias_with_multipliers, transfer_residuals, SitlFit};
use crate::surface::{CoefficientFunction, DenseSurface};

pub const DEFAULT_REPLICATES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    /// Standard exponential.
    #[default]
    Exponential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDraw {
    pub zeta: Vec<f64>,
    pub distribution: Perturbation,
    pub seed: u64,
}

/// `n` i.i.d. standard exponential multipliers.
pub fn draw_perturbations(n: usize, seed: u64) -> PerturbationDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeta = (0..n)
        .map(|_| {
            // Exp1 can return exactly 0 with negligible probability; keep the
            // multipliers strictly positive.
            let z: f64 = Exp1.sample(&mut rng);
            z.max(f64::MIN_POSITIVE)
        })
        .collect();
    PerturbationDraw {
        zeta,
        distribution: Perturbation::Exponential,
        seed,
    }
}

/// The debias step with subject multipliers `zeta`.
pub fn perturbed_debias(
    target: &Cohort,
    transfer: &DenseSurface,
    eta_bases: &[SplineBasis],
    zeta: &[f64],
    opts: &IpmOptions,
) -> Result<CoefficientSurface> {
    let residuals = transfer_residuals(target, transfer)?;
    debias_with_multipliers(
        target,
        &residuals,
        transfer.quantile_grid(),
        eta_bases,
        Some(zeta),
        opts,
    )
}

/// `B` replicates `transfer + debias*_b` on the transfer's dense grid, with
/// replicate `b` seeded by `seed + b`.
pub fn perturbed_replicates(
    target: &Cohort,
    transfer: &DenseSurface,
    eta_bases: &[SplineBasis],
    replicates: usize,
    seed: u64,
    opts: &IpmOptions,
) -> Result<Vec<DenseSurface>> {
    check_replicates(replicates)?;
    let residuals = transfer_residuals(target, transfer)?;
    let points = transfer.abscissa().len();
    (0..replicates)
        .into_par_iter()
        .map(|b| {
            let draw = draw_perturbations(target.n(), seed.wrapping_add(b as u64));
            let fit = debias_with_multipliers(
                target,
                &residuals,
                transfer.quantile_grid(),
                eta_bases,
                Some(&draw.zeta),
                opts,
            )?;
            transfer.add(&DenseSurface::sample(&fit, points)?)
        })
        .collect()
}

/// Replicates for a fitted SITL estimate.
pub fn sitl_replicates(
    fit: &SitlFit,
    target: &Cohort,
    replicates: usize,
    seed: u64,
    opts: &IpmOptions,
) -> Result<Vec<DenseSurface>> {
    perturbed_replicates(target, &fit.transfer, fit.eta_bases(), replicates, seed, opts)
}

fn check_replicates(b: usize) -> Result<()> {
    if b < 2 {
        Err(Error::Config(format!("need at least 2 replicates, got {b}")))
    } else {
        Ok(())
    }
}

/// Upper `a/2` standard normal quantile.
pub fn normal_quantile(a: f64) -> Result<f64> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {a}")));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(1.0 - a / 2.0))
}

/// One band location: predictor index (0-based), abscissa and grid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryPoint {
    pub predictor: usize,
    pub s: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandPoint {
    pub predictor: usize,
    pub s: f64,
    pub tau: f64,
    pub estimate: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CiBand {
    pub confidence: f64,
    pub points: Vec<BandPoint>,
}

impl CiBand {
    pub fn mean_width(&self) -> f64 {
        self.points.iter().map(|p| p.upper - p.lower).sum::<f64>() / self.points.len() as f64
    }
}

/// Pointwise `estimate +- q_{a/2} SD` where SD is the sample standard
/// deviation of the replicates.
pub fn build_ci(
    estimate: &dyn CoefficientFunction,
    replicates: &[DenseSurface],
    a: f64,
    query: &[QueryPoint],
) -> Result<CiBand> {
    check_replicates(replicates.len())?;
    let q = normal_quantile(a)?;
    let grid = estimate.quantile_grid();
    let b = replicates.len() as f64;
    let mut points = Vec::with_capacity(query.len());
    for qp in query {
        let j = grid.index_of(qp.tau)?;
        if qp.predictor >= estimate.q() {
            return Err(Error::Domain(format!(
                "predictor {} out of range",
                qp.predictor + 1
            )));
        }
        let point = estimate.values_at(qp.predictor, j, &[qp.s])?[0];
        let values = replicates
            .iter()
            .map(|r| r.values_at(qp.predictor, j, &[qp.s]).map(|v| v[0]))
            .collect::<Result<Vec<_>>>()?;
        let mean = values.iter().sum::<f64>() / b;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0);
        let sd = var.sqrt();
        points.push(BandPoint {
            predictor: qp.predictor,
            s: qp.s,
            tau: qp.tau,
            estimate: point,
            sd,
            lower: point - q * sd,
            upper: point + q * sd,
        });
    }
    Ok(CiBand {
        confidence: 1.0 - a,
        points,
    })
}

/// Query points on an abscissa list for every predictor at the given levels.
pub fn query_grid(q: usize, abscissa: &[f64], taus: &[f64]) -> Vec<QueryPoint> {
    let mut out = Vec::with_capacity(q * abscissa.len() * taus.len());
    for predictor in 0..q {
        for &tau in taus {
            for &s in abscissa {
                out.push(QueryPoint { predictor, s, tau });
            }
        }
    }
    out
}

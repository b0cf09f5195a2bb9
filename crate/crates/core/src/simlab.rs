//! Simulation design and Monte Carlo driver.
//!
//! Two functional predictors on a 101-point grid over `[0, 1]`:
//! `X1 = |sum_k xi_k U_k phi_k|` with a cosine basis and `X2 = sum_k zeta_k B_k`
//! over 20 cubic B-splines. Survival times follow the location-scale model
//! `log T = <X1, psi11> + <X2, alpha2> + <X1, 1> eps`, so that
//! `alpha1(s, tau) = psi11(s) + F_eps^{-1}(tau)`. Source cohorts rescale or
//! shift the coefficient functions according to the chosen case.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::basis::{trapezoid_weights, Interval, SampledFunction, SplineBasis};
use crate::cohort::{Cohort, Subject};
use crate::cqr::{bases_for, default_knots, fit_sequential, CoefficientSurface, IpmOptions, QuantileGrid};
use crate::error::{Error, Result};
use crate::resample::{build_ci, perturbed_replicates, query_grid, CiBand};
use crate::sitl::{pooled_fit, sitl_estimate, Kernel, SimilarityReport, SitlConfig, SitlFit};
use crate::surface::{empirical_loss, CoefficientFunction, DenseSurface, DEFAULT_DENSE_POINTS};

pub const GRID_POINTS: usize = 101;
const TERMS: usize = 20;

/// `xi_k = (-1)^(k+1) / k`.
pub fn xi(k: usize) -> f64 {
    let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
    sign / k as f64
}

fn cosine_basis(k: usize, s: f64) -> f64 {
    if k == 1 {
        1.0
    } else {
        SQRT_2 * ((k - 1) as f64 * PI * s).cos()
    }
}

/// `4 sum_{k=1}^{20} (-1)^k k^-2 sqrt(2) cos((k-1) pi s)`, taken literally
/// including the `k = 1` term.
pub fn psi11(s: f64) -> f64 {
    (1..=TERMS)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            4.0 * sign / (k * k) as f64 * SQRT_2 * ((k - 1) as f64 * PI * s).cos()
        })
        .sum()
}

/// `4 (cos 3 pi s + sin 3 pi s)`.
pub fn alpha2(s: f64) -> f64 {
    4.0 * ((3.0 * PI * s).cos() + (3.0 * PI * s).sin())
}

/// Source-versus-target disparity scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Case {
    /// Same coefficients as the target.
    Identical,
    /// Second coefficient shifted by `10 exp(s)`.
    Shifted,
    /// Second coefficient tripled.
    Scaled,
    /// Both coefficients tripled and the second also shifted.
    ScaledShifted,
}

impl TryFrom<u8> for Case {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Case::Identical),
            2 => Ok(Case::Shifted),
            3 => Ok(Case::Scaled),
            4 => Ok(Case::ScaledShifted),
            other => Err(Error::Config(format!("case must be 1, 2, 3 or 4, got {other}"))),
        }
    }
}

impl From<Case> for u8 {
    fn from(c: Case) -> u8 {
        match c {
            Case::Identical => 1,
            Case::Shifted => 2,
            Case::Scaled => 3,
            Case::ScaledShifted => 4,
        }
    }
}

/// Closed-form coefficient functions of one cohort:
/// `alpha1 = a * psi11 + F^{-1}(tau)`, `alpha2 = b * alpha2 + c * exp(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coefficients {
    pub psi11_scale: f64,
    pub alpha2_scale: f64,
    pub shift: f64,
    pub sigma_eps: f64,
}

impl Coefficients {
    pub fn target(sigma_eps: f64) -> Self {
        Self {
            psi11_scale: 1.0,
            alpha2_scale: 1.0,
            shift: 0.0,
            sigma_eps,
        }
    }

    pub fn for_case(case: Case, sigma_eps: f64) -> Self {
        let (a, b, c) = match case {
            Case::Identical => (1.0, 1.0, 0.0),
            Case::Shifted => (1.0, 1.0, 10.0),
            Case::Scaled => (1.0, 3.0, 0.0),
            Case::ScaledShifted => (3.0, 3.0, 10.0),
        };
        Self {
            psi11_scale: a,
            alpha2_scale: b,
            shift: c,
            sigma_eps,
        }
    }

    /// Location part of the first coefficient (the `tau`-free term).
    pub fn location1(&self, s: f64) -> f64 {
        self.psi11_scale * psi11(s)
    }

    pub fn coef2(&self, s: f64) -> f64 {
        self.alpha2_scale * alpha2(s) + self.shift * s.exp()
    }

    /// `alpha_d(s, tau)` for `d` in `{0, 1}` and `0 < tau < 1`.
    pub fn alpha(&self, d: usize, s: f64, tau: f64) -> f64 {
        match d {
            0 => self.location1(s) + self.sigma_eps * StdNormal::standard().inverse_cdf(tau),
            1 => self.coef2(s),
            _ => panic!("the simulation has two predictors"),
        }
    }

    fn cache_key(&self) -> [u64; 4] {
        [
            self.psi11_scale.to_bits(),
            self.alpha2_scale.to_bits(),
            self.shift.to_bits(),
            self.sigma_eps.to_bits(),
        ]
    }
}

/// Target and source truths for a case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrueSurfaces {
    pub target: Coefficients,
    pub source: Coefficients,
}

pub fn true_coefficients(case: u8, sigma_eps: f64) -> Result<TrueSurfaces> {
    let case = Case::try_from(case)?;
    Ok(TrueSurfaces {
        target: Coefficients::target(sigma_eps),
        source: Coefficients::for_case(case, sigma_eps),
    })
}

/// Precomputed basis tables on the sampling grid.
struct Tables {
    grid: Arc<[f64]>,
    trap: Vec<f64>,
    cosines: Vec<Vec<f64>>,
    splines: Vec<Vec<f64>>,
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let grid: Vec<f64> = Interval::unit().linspace(GRID_POINTS);
        let basis = SplineBasis::new(4, TERMS - 4, Interval::unit()).expect("valid basis");
        let cosines = (1..=TERMS)
            .map(|k| grid.iter().map(|&s| cosine_basis(k, s)).collect())
            .collect();
        let mut splines = vec![vec![0.0; GRID_POINTS]; TERMS];
        for (g, &s) in grid.iter().enumerate() {
            for (k, v) in basis.eval(s).expect("in domain").into_iter().enumerate() {
                splines[k][g] = v;
            }
        }
        Tables {
            trap: trapezoid_weights(&grid),
            grid: grid.into(),
            cosines,
            splines,
        }
    })
}

/// Predictor curves `(X1, X2)` for `n` subjects on the 101-point grid.
pub fn gen_predictors(n: usize, sigma_zeta: f64, rng: &mut impl Rng) -> Vec<[Vec<f64>; 2]> {
    let t = tables();
    let u = Uniform::new(-(3f64.sqrt()), 3f64.sqrt()).expect("valid range");
    let z = Normal::new(0.0, sigma_zeta).expect("valid sd");
    (0..n)
        .map(|_| {
            let mut x1 = vec![0.0; GRID_POINTS];
            for k in 0..TERMS {
                let c = xi(k + 1) * u.sample(rng);
                x1.iter_mut().zip(&t.cosines[k]).for_each(|(x, b)| *x += c * b);
            }
            x1.iter_mut().for_each(|x| *x = x.abs());
            let mut x2 = vec![0.0; GRID_POINTS];
            for k in 0..TERMS {
                let c = z.sample(rng);
                x2.iter_mut().zip(&t.splines[k]).for_each(|(x, b)| *x += c * b);
            }
            [x1, x2]
        })
        .collect()
}

/// Survival times from the location-scale model, integrals by trapezoid.
pub fn gen_survival(x: &[[Vec<f64>; 2]], truth: &Coefficients, rng: &mut impl Rng) -> Vec<f64> {
    let t = tables();
    let loc: Vec<f64> = t.grid.iter().map(|&s| truth.location1(s)).collect();
    let c2: Vec<f64> = t.grid.iter().map(|&s| truth.coef2(s)).collect();
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(&t.trap).map(|((a, b), w)| a * b * w).sum()
    };
    x.iter()
        .map(|[x1, x2]| {
            let eps: f64 = if truth.sigma_eps > 0.0 {
                truth.sigma_eps * rng.sample::<f64, _>(rand_distr::StandardNormal)
            } else {
                0.0
            };
            let scale: f64 = x1.iter().zip(&t.trap).map(|(a, w)| a * w).sum();
            (dot(x1, &loc) + dot(x2, &c2) + scale * eps).exp()
        })
        .collect()
}

/// Expected censoring rate of `C ~ U(0, c_max)` over a sample of times.
fn expected_rate(times: &[f64], c_max: f64) -> f64 {
    times.iter().map(|t| (t / c_max).min(1.0)).sum::<f64>() / times.len() as f64
}

/// Bisection for the `c_max` giving the target expected censoring rate.
pub fn calibrate_censoring(times: &[f64], rate: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("censoring rate must lie in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(f64::INFINITY);
    }
    let max = times.iter().cloned().fold(0.0, f64::max);
    let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = ((min * 1e-6).ln(), (max * 1e12).ln());
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if expected_rate(times, mid.exp()) > rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = (0.5 * (lo + hi)).exp();
    let achieved = expected_rate(times, c);
    if (achieved - rate).abs() > 1e-6 {
        return Err(Error::Fit(format!(
            "censoring calibration stalled at rate {achieved} for target {rate}"
        )));
    }
    Ok(c)
}

const PILOT_SEED: u64 = 0x5eed_c0de;

/// Calibrated `c_max` for a cohort distribution, computed once per process
/// from a pilot sample.
pub fn censoring_bound(
    truth: &Coefficients,
    sigma_zeta: f64,
    rate: f64,
    pilot_size: usize,
) -> Result<f64> {
    static CACHE: OnceLock<Mutex<HashMap<(Vec<u64>, usize), f64>>> = OnceLock::new();
    if rate == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mut key = truth.cache_key().to_vec();
    key.push(sigma_zeta.to_bits());
    key.push(rate.to_bits());
    let key = (key, pilot_size);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(c) = cache.lock().expect("cache lock").get(&key) {
        return Ok(*c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PILOT_SEED);
    let x = gen_predictors(pilot_size, sigma_zeta, &mut rng);
    let times = gen_survival(&x, truth, &mut rng);
    let c = calibrate_censoring(&times, rate)?;
    cache.lock().expect("cache lock").insert(key, c);
    Ok(c)
}

/// `Y = min(T, C)` and `delta = T <= C` with `C ~ U(0, c_max)`.
pub fn apply_censoring(times: &[f64], c_max: f64, rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    if c_max.is_infinite() {
        return (times.to_vec(), vec![true; times.len()]);
    }
    let u = Uniform::new(0.0, c_max).expect("positive bound");
    times
        .iter()
        .map(|&t| {
            let c = u.sample(rng);
            (t.min(c), t <= c)
        })
        .unzip()
}

/// Simulated cohort of size `n` following `truth`.
pub fn gen_cohort(
    label: &str,
    n: usize,
    truth: &Coefficients,
    sigma_zeta: f64,
    rate: f64,
    pilot_size: usize,
    rng: &mut impl Rng,
) -> Result<Cohort> {
    let c_max = censoring_bound(truth, sigma_zeta, rate, pilot_size)?;
    let x = gen_predictors(n, sigma_zeta, rng);
    let t = gen_survival(&x, truth, rng);
    let (y, delta) = apply_censoring(&t, c_max, rng);
    let grid = tables().grid.clone();
    let subjects = x
        .into_iter()
        .zip(y.into_iter().zip(delta))
        .enumerate()
        .map(|(i, ([x1, x2], (y, delta)))| {
            Ok(Subject {
                id: format!("{label}-{i}"),
                y,
                delta,
                predictors: vec![
                    SampledFunction::new(grid.clone(), x1)?,
                    SampledFunction::new(grid.clone(), x2)?,
                ],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cohort = Cohort::new(label, subjects)?;
    log::debug!(
        "cohort {label}: n = {n}, censoring rate {:.3}",
        cohort.censoring_rate()
    );
    Ok(cohort)
}

/// `sqrt(int (a - b)^2)` by the trapezoid rule on `abscissa`.
pub fn l2_distance(a: &[f64], b: &[f64], abscissa: &[f64]) -> f64 {
    let w = trapezoid_weights(abscissa);
    a.iter()
        .zip(b)
        .zip(&w)
        .map(|((a, b), w)| (a - b).powi(2) * w)
        .sum::<f64>()
        .sqrt()
}

/// RMSE of predictor `d` at level `tau` against the closed-form truth.
pub fn rmse(
    estimate: &dyn CoefficientFunction,
    truth: &Coefficients,
    d: usize,
    tau: f64,
    points: usize,
) -> Result<f64> {
    let j = estimate.quantile_grid().index_of(tau)?;
    let s = estimate.domain(d).linspace(points);
    let est = estimate.values_at(d, j, &s)?;
    let tru: Vec<f64> = s.iter().map(|&s| truth.alpha(d, s, tau)).collect();
    Ok(l2_distance(&est, &tru, &s))
}

/// `sqrt(sum_d int alpha_d(s, tau)^2 ds)` for a surface.
pub fn surface_norm(f: &dyn CoefficientFunction, tau: f64, points: usize) -> Result<f64> {
    let j = f.quantile_grid().index_of(tau)?;
    let mut total = 0.0;
    for d in 0..f.q() {
        let s = f.domain(d).linspace(points);
        let v = f.values_at(d, j, &s)?;
        total += l2_distance(&v, &vec![0.0; v.len()], &s).powi(2);
    }
    Ok(total.sqrt())
}

/// Mean over levels of the sequential loss on a test cohort, per subject.
pub fn prediction_error(fit: &dyn CoefficientFunction, test: &Cohort) -> Result<f64> {
    let losses = empirical_loss(fit, test)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64 / test.n() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Target,
    Pooled,
    TransHt,
    Sitl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Target, Method::Pooled, Method::TransHt, Method::Sitl];

    pub fn name(self) -> &'static str {
        match self {
            Method::Target => "Target",
            Method::Pooled => "Pooled",
            Method::TransHt => "Trans_HT",
            Method::Sitl => "SITL",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "target" => Ok(Method::Target),
            "pooled" => Ok(Method::Pooled),
            "trans_ht" | "transht" | "ht" => Ok(Method::TransHt),
            "sitl" => Ok(Method::Sitl),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Scenario description; every field has a default so config files may be
/// partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n0: usize,
    /// Source sizes, cycled to length `sources`.
    pub source_sizes: Vec<usize>,
    /// Number of source cohorts `K`; defaults to `source_sizes.len()`.
    pub sources: Option<usize>,
    pub case: u8,
    /// Per-source case override (cycled like the sizes).
    pub source_cases: Option<Vec<u8>>,
    pub censor_rate: f64,
    pub tau_max: f64,
    pub tau_step: f64,
    pub sigma_zeta2: f64,
    pub sigma_eps2: f64,
    pub seed: u64,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub eval_taus: Vec<f64>,
    /// Test cohort size; defaults to `n0`.
    pub test_size: Option<usize>,
    pub order: usize,
    pub knots: Option<usize>,
    pub eta_knots: Option<usize>,
    pub bandwidth: Option<f64>,
    pub pilot_size: usize,
    pub dense_points: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n0: 100,
            source_sizes: vec![500, 1000, 500, 1000],
            sources: None,
            case: 2,
            source_cases: None,
            censor_rate: 0.1,
            tau_max: 0.8,
            tau_step: 0.01,
            sigma_zeta2: 1.0,
            sigma_eps2: 0.2,
            seed: 1,
            replications: 20,
            methods: Method::ALL.to_vec(),
            eval_taus: vec![0.3, 0.5, 0.7],
            test_size: None,
            order: 4,
            knots: None,
            eta_knots: None,
            bandwidth: None,
            pilot_size: 100_000,
            dense_points: DEFAULT_DENSE_POINTS,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.n0 < 4 {
            return Err(Error::Config("n0 must be at least 4".into()));
        }
        if self.source_sizes.is_empty() || self.source_sizes.contains(&0) {
            return Err(Error::Config("source sizes must be positive".into()));
        }
        if self.source_count() == 0 {
            return Err(Error::Config("at least one source cohort is required".into()));
        }
        Case::try_from(self.case)?;
        if let Some(cases) = &self.source_cases {
            if cases.is_empty() {
                return Err(Error::Config("source_cases must not be empty".into()));
            }
            for &c in cases {
                Case::try_from(c)?;
            }
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(Error::Config(format!(
                "censor_rate must lie in [0, 1), got {}",
                self.censor_rate
            )));
        }
        if !(self.sigma_zeta2 > 0.0) || !(self.sigma_eps2 >= 0.0) {
            return Err(Error::Config("variances must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        let grid = self.grid()?;
        for &t in &self.eval_taus {
            grid.index_of(t)?;
        }
        if self.pilot_size < 1000 {
            return Err(Error::Config("pilot_size must be at least 1000".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<QuantileGrid> {
        QuantileGrid::build(self.tau_max, self.tau_step)
    }

    pub fn source_count(&self) -> usize {
        self.sources.unwrap_or(self.source_sizes.len())
    }

    pub fn source_size(&self, k: usize) -> usize {
        self.source_sizes[k % self.source_sizes.len()]
    }

    pub fn source_case(&self, k: usize) -> Case {
        let c = match &self.source_cases {
            Some(cases) => cases[k % cases.len()],
            None => self.case,
        };
        Case::try_from(c).expect("validated")
    }

    pub fn sigma_zeta(&self) -> f64 {
        self.sigma_zeta2.sqrt()
    }

    pub fn sigma_eps(&self) -> f64 {
        self.sigma_eps2.sqrt()
    }

    fn wants(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }

    pub fn sitl_config(&self, kernel: Kernel, split_seed: u64) -> SitlConfig {
        SitlConfig {
            order: self.order,
            knots: self.knots,
            eta_knots: self.eta_knots,
            bandwidth: self.bandwidth,
            kernel,
            dense_points: self.dense_points,
            split_seed,
        }
    }
}

/// Cohorts of one replication.
#[derive(Debug, Clone)]
pub struct ReplicationData {
    pub target: Cohort,
    pub test: Cohort,
    pub sources: Vec<Cohort>,
    pub source_cases: Vec<Case>,
    pub seed: u64,
}

fn replication_seed(base: u64, r: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(r as u64)
        .rotate_left(17)
}

/// Generates every cohort of replication `r`.
pub fn generate_replication(cfg: &ScenarioConfig, r: usize) -> Result<ReplicationData> {
    let seed = replication_seed(cfg.seed, r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_truth = Coefficients::target(cfg.sigma_eps());
    let sz = cfg.sigma_zeta();
    let sub = |rng: &mut ChaCha8Rng| ChaCha8Rng::seed_from_u64(rng.random());
    let target = gen_cohort(
        "target",
        cfg.n0,
        &target_truth,
        sz,
        cfg.censor_rate,
        cfg.pilot_size,
        &mut sub(&mut rng),
    )?;
    let test = gen_cohort(
        "test",
        cfg.test_size.unwrap_or(cfg.n0),
        &target_truth,
        sz,
        cfg.censor_rate,
        cfg.pilot_size,
        &mut sub(&mut rng),
    )?;
    let mut sources = Vec::with_capacity(cfg.source_count());
    let mut cases = Vec::with_capacity(cfg.source_count());
    for k in 0..cfg.source_count() {
        let case = cfg.source_case(k);
        let truth = Coefficients::for_case(case, cfg.sigma_eps());
        sources.push(gen_cohort(
            &format!("source-{}", k + 1),
            cfg.source_size(k),
            &truth,
            sz,
            cfg.censor_rate,
            cfg.pilot_size,
            &mut sub(&mut rng),
        )?);
        cases.push(case);
    }
    Ok(ReplicationData {
        target,
        test,
        sources,
        source_cases: cases,
        seed,
    })
}

/// Baseline fits of every source cohort with size-based default knots.
pub fn fit_sources(
    sources: &[Cohort],
    cfg: &ScenarioConfig,
    grid: &QuantileGrid,
    opts: &IpmOptions,
) -> Result<Vec<CoefficientSurface>> {
    sources
        .par_iter()
        .map(|c| {
            let bases = bases_for(c, cfg.order, default_knots(c.n()))?;
            fit_sequential(c, &bases, grid, opts)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub method: Method,
    /// `[tau index][d]`, aligned with `eval_taus`.
    pub rmse: Vec<[f64; 2]>,
    pub prediction_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationOutcome {
    pub index: usize,
    pub seed: u64,
    pub methods: Vec<MethodMetrics>,
    pub sitl_report: Option<SimilarityReport>,
    pub trans_ht_report: Option<SimilarityReport>,
    pub sitl_fallback: bool,
    pub trans_ht_fallback: bool,
    /// `||alpha_eta||` per eval level (SITL only).
    pub debias_norm: Vec<f64>,
    /// `||alpha_target - truth||` per eval level (Target only).
    pub target_error_norm: Vec<f64>,
}

impl ReplicationOutcome {
    pub fn metrics(&self, m: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|x| x.method == m)
    }
}

fn metrics_for(
    method: Method,
    fit: &dyn CoefficientFunction,
    cfg: &ScenarioConfig,
    truth: &Coefficients,
    test: &Cohort,
) -> Result<MethodMetrics> {
    let rmse = cfg
        .eval_taus
        .iter()
        .map(|&tau| {
            Ok([
                rmse(fit, truth, 0, tau, cfg.dense_points)?,
                rmse(fit, truth, 1, tau, cfg.dense_points)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodMetrics {
        method,
        rmse,
        prediction_error: prediction_error(fit, test)?,
    })
}

/// Runs every requested method on replication `r`.
pub fn run_replication(cfg: &ScenarioConfig, r: usize) -> Result<ReplicationOutcome> {
    let opts = IpmOptions::default();
    let grid = cfg.grid()?;
    let data = generate_replication(cfg, r)?;
    let truth = Coefficients::target(cfg.sigma_eps());
    let mut outcome = ReplicationOutcome {
        index: r,
        seed: data.seed,
        methods: Vec::new(),
        sitl_report: None,
        trans_ht_report: None,
        sitl_fallback: false,
        trans_ht_fallback: false,
        debias_norm: Vec::new(),
        target_error_norm: Vec::new(),
    };

    if cfg.wants(Method::Target) {
        let bases = bases_for(
            &data.target,
            cfg.order,
            cfg.knots.unwrap_or_else(|| default_knots(data.target.n())),
        )?;
        let fit = fit_sequential(&data.target, &bases, &grid, &opts)?;
        outcome
            .methods
            .push(metrics_for(Method::Target, &fit, cfg, &truth, &data.test)?);
        outcome.target_error_norm = outcome.methods[0]
            .rmse
            .iter()
            .map(|[a, b]| (a * a + b * b).sqrt())
            .collect();
    }
    if cfg.wants(Method::Pooled) {
        let mut all: Vec<&Cohort> = vec![&data.target];
        all.extend(data.sources.iter());
        let fit = pooled_fit(&all, cfg.order, None, &grid, &opts)?;
        outcome
            .methods
            .push(metrics_for(Method::Pooled, &fit, cfg, &truth, &data.test)?);
    }
    if cfg.wants(Method::TransHt) || cfg.wants(Method::Sitl) {
        let source_fits = fit_sources(&data.sources, cfg, &grid, &opts)?;
        let split_seed = data.seed ^ 0x5b1;
        if cfg.wants(Method::TransHt) {
            let fit = sitl_estimate(
                &data.target,
                &source_fits,
                &cfg.sitl_config(Kernel::Uniform, split_seed),
                &opts,
            )?;
            outcome.methods.push(metrics_for(
                Method::TransHt,
                &fit.combined,
                cfg,
                &truth,
                &data.test,
            )?);
            outcome.trans_ht_fallback = fit.fallback;
            outcome.trans_ht_report = Some(fit.report);
        }
        if cfg.wants(Method::Sitl) {
            let fit = sitl_estimate(
                &data.target,
                &source_fits,
                &cfg.sitl_config(Kernel::Gaussian, split_seed),
                &opts,
            )?;
            outcome.methods.push(metrics_for(
                Method::Sitl,
                &fit.combined,
                cfg,
                &truth,
                &data.test,
            )?);
            outcome.debias_norm = cfg
                .eval_taus
                .iter()
                .map(|&t| surface_norm(&fit.debias, t, cfg.dense_points))
                .collect::<Result<_>>()?;
            outcome.sitl_fallback = fit.fallback;
            outcome.sitl_report = Some(fit.report);
        }
    }
    outcome.methods.sort_by_key(|m| m.method);
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub metric: String,
    pub tau: Option<f64>,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    pub rows: Vec<SummaryRow>,
    pub outcomes: Vec<ReplicationOutcome>,
    /// `(replication, message)` for every failed replication.
    pub failures: Vec<(usize, String)>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl ScenarioResult {
    pub fn row(&self, method: Method, metric: &str, tau: Option<f64>) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| {
            r.method == method
                && r.metric == metric
                && match (r.tau, tau) {
                    (Some(a), Some(b)) => (a - b).abs() < 1e-9,
                    (None, None) => true,
                    _ => false,
                }
        })
    }

    /// Mean RMSE of predictor `d` (0-based) at `tau`.
    pub fn mean_rmse(&self, method: Method, d: usize, tau: f64) -> Option<f64> {
        self.row(method, &format!("rmse_alpha{}", d + 1), Some(tau))
            .map(|r| r.mean)
    }

    pub fn mean_prediction_error(&self, method: Method) -> Option<f64> {
        self.row(method, "prediction_error", None).map(|r| r.mean)
    }

    /// `method,metric,tau,mean,sd,replications` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric,tau,mean,sd,replications\n");
        for r in &self.rows {
            let tau = r.tau.map(|t| format!("{t}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{}\n",
                r.method, r.metric, tau, r.mean, r.sd, r.count
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "case {} n0 = {} K = {} censoring {:.0}%: {} replications, {} failed\n",
            self.config.case,
            self.config.n0,
            self.config.source_count(),
            100.0 * self.config.censor_rate,
            self.outcomes.len() + self.failures.len(),
            self.failures.len()
        );
        for r in &self.rows {
            let tau = r.tau.map(|t| format!(" tau={t}")).unwrap_or_default();
            out.push_str(&format!(
                "  {:<9} {:<17}{:<9} {:.3} ({:.3})\n",
                r.method.name(),
                r.metric,
                tau,
                r.mean,
                r.sd
            ));
        }
        for (i, m) in &self.failures {
            out.push_str(&format!("  replication {i} failed: {m}\n"));
        }
        out
    }
}

/// Runs all replications (concurrently) and aggregates per-method tables.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    let results: Vec<(usize, Result<ReplicationOutcome>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| (r, run_replication(cfg, r)))
        .collect();
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push((r, e.to_string()));
            }
        }
    }
    let mut rows = Vec::new();
    for &m in &Method::ALL {
        if !cfg.wants(m) {
            continue;
        }
        let per: Vec<&MethodMetrics> = outcomes.iter().filter_map(|o| o.metrics(m)).collect();
        if per.is_empty() {
            continue;
        }
        for d in 0..2 {
            for (t, &tau) in cfg.eval_taus.iter().enumerate() {
                let v: Vec<f64> = per.iter().map(|x| x.rmse[t][d]).collect();
                let (mean, sd) = mean_sd(&v);
                rows.push(SummaryRow {
                    method: m,
                    metric: format!("rmse_alpha{}", d + 1),
                    tau: Some(tau),
                    mean,
                    sd,
                    count: v.len(),
                });
            }
        }
        let v: Vec<f64> = per.iter().map(|x| x.prediction_error).collect();
        let (mean, sd) = mean_sd(&v);
        rows.push(SummaryRow {
            method: m,
            metric: "prediction_error".into(),
            tau: None,
            mean,
            sd,
            count: v.len(),
        });
    }
    Ok(ScenarioResult {
        config: cfg.clone(),
        rows,
        outcomes,
        failures,
    })
}

/// Coverage bookkeeping of one confidence-band replication.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageOutcome {
    pub index: usize,
    pub sitl: CiBand,
    pub target: CiBand,
    /// True coefficient values aligned with the band points.
    pub truth: Vec<f64>,
}

impl CoverageOutcome {
    pub fn sitl_covered(&self) -> Vec<bool> {
        covered(&self.sitl, &self.truth)
    }
}

fn covered(band: &CiBand, truth: &[f64]) -> Vec<bool> {
    band.points
        .iter()
        .zip(truth)
        .map(|(p, t)| p.lower <= *t && *t <= p.upper)
        .collect()
}

/// SITL and target-only resampling bands at `(d, s, tau)` for replication `r`.
pub fn run_coverage_replication(
    cfg: &ScenarioConfig,
    r: usize,
    replicates: usize,
    a: f64,
    tau: f64,
    abscissa: &[f64],
) -> Result<CoverageOutcome> {
    let opts = IpmOptions::default();
    let grid = cfg.grid()?;
    let data = generate_replication(cfg, r)?;
    let source_fits = fit_sources(&data.sources, cfg, &grid, &opts)?;
    let fit: SitlFit = sitl_estimate(
        &data.target,
        &source_fits,
        &cfg.sitl_config(Kernel::Gaussian, data.seed ^ 0x5b1),
        &opts,
    )?;
    let query = query_grid(2, abscissa, &[tau]);
    let base_seed = data.seed.wrapping_add(0xb007);
    let reps = perturbed_replicates(
        &data.target,
        &fit.transfer,
        fit.eta_bases(),
        replicates,
        base_seed,
        &opts,
    )?;
    let sitl = build_ci(&fit.combined, &reps, a, &query)?;

    let bases = bases_for(
        &data.target,
        cfg.order,
        cfg.knots.unwrap_or_else(|| default_knots(data.target.n())),
    )?;
    let target_fit = fit_sequential(&data.target, &bases, &grid, &opts)?;
    let zero = DenseSurface::zeros(2, Interval::unit(), cfg.dense_points, grid.clone());
    let target_reps =
        perturbed_replicates(&data.target, &zero, &bases, replicates, base_seed, &opts)?;
    let target = build_ci(&target_fit, &target_reps, a, &query)?;

    let truth = Coefficients::target(cfg.sigma_eps());
    let values = query
        .iter()
        .map(|q| truth.alpha(q.predictor, q.s, q.tau))
        .collect();
    Ok(CoverageOutcome {
        index: r,
        sitl,
        target,
        truth: values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn xi_values() {
        assert_eq!(xi(1), 1.0);
        assert_eq!(xi(2), -0.5);
        assert_abs_diff_eq!(xi(3), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn first_predictor_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for [x1, _] in gen_predictors(50, 1.0, &mut rng) {
            assert!(x1.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn uniform_scores_have_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Uniform::new(-(3f64.sqrt()), 3f64.sqrt()).unwrap();
        let v: Vec<f64> = (0..100_000).map(|_| u.sample(&mut rng)).collect();
        let (_, sd) = mean_sd(&v);
        assert!((0.97..=1.03).contains(&(sd * sd)));
    }

    #[test]
    fn median_coefficient_is_the_location() {
        let t = true_coefficients(1, 0.2f64.sqrt()).unwrap();
        for s in [0.0, 0.3, 0.9] {
            assert_abs_diff_eq!(t.target.alpha(0, s, 0.5), psi11(s), epsilon = 1e-12);
        }
    }

    #[test]
    fn case_variants() {
        let s = 0.37;
        let c2 = true_coefficients(2, 0.4).unwrap();
        assert_abs_diff_eq!(
            c2.source.alpha(1, s, 0.3) - c2.target.alpha(1, s, 0.3),
            10.0 * s.exp(),
            epsilon = 1e-12
        );
        let c3 = true_coefficients(3, 0.4).unwrap();
        assert_abs_diff_eq!(c3.source.alpha(1, s, 0.3), 3.0 * alpha2(s), epsilon = 1e-12);
        let c4 = true_coefficients(4, 0.4).unwrap();
        assert_abs_diff_eq!(
            c4.source.alpha(1, s, 0.3),
            3.0 * alpha2(s) + 10.0 * s.exp(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            c4.source.alpha(0, s, 0.5),
            3.0 * psi11(s),
            epsilon = 1e-12
        );
        let c1 = true_coefficients(1, 0.4).unwrap();
        assert_eq!(c1.source, c1.target);
        assert!(matches!(true_coefficients(5, 0.4), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_times_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gen_predictors(5, 1.0, &mut rng);
        let truth = Coefficients::target(0.0);
        let a = gen_survival(&x, &truth, &mut ChaCha8Rng::seed_from_u64(1));
        let b = gen_survival(&x, &truth, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
    }

    #[test]
    fn conditional_quantiles_follow_the_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x1 = gen_predictors(1, 1.0, &mut rng).pop().unwrap();
        let x: Vec<[Vec<f64>; 2]> = vec![x1.clone(); 5000];
        let truth = Coefficients::target(0.2f64.sqrt());
        let mut t = gen_survival(&x, &truth, &mut rng);
        t.sort_by(f64::total_cmp);
        let tab = tables();
        for tau in [0.3, 0.5, 0.7] {
            let a1: Vec<f64> = tab.grid.iter().map(|&s| truth.alpha(0, s, tau)).collect();
            let a2: Vec<f64> = tab.grid.iter().map(|&s| truth.alpha(1, s, tau)).collect();
            let eta: f64 = (0..GRID_POINTS)
                .map(|g| (x1[0][g] * a1[g] + x1[1][g] * a2[g]) * tab.trap[g])
                .sum();
            let emp = t[(tau * 5000.0) as usize];
            assert!((emp / eta.exp() - 1.0).abs() < 0.02, "tau {tau}: {emp} vs {}", eta.exp());
        }
    }

    #[test]
    fn censoring_calibration_hits_target() {
        let truth = Coefficients::target(0.2f64.sqrt());
        let c = censoring_bound(&truth, 1.0, 0.3, 100_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = gen_predictors(100_000, 1.0, &mut rng);
        let t = gen_survival(&x, &truth, &mut rng);
        let (y, delta) = apply_censoring(&t, c, &mut rng);
        let rate = delta.iter().filter(|d| !**d).count() as f64 / t.len() as f64;
        assert!((0.29..=0.31).contains(&rate), "rate {rate}");
        for ((y, d), t) in y.iter().zip(&delta).zip(&t) {
            assert_eq!(*d, t <= y || *y == *t);
            assert!(y <= t);
        }
        let (y0, d0) = apply_censoring(&t, censoring_bound(&truth, 1.0, 0.0, 1000).unwrap(), &mut rng);
        assert_eq!(y0, t);
        assert!(d0.iter().all(|d| *d));
    }

    #[test]
    fn rmse_closed_forms() {
        let grid = QuantileGrid::build(0.5, 0.25).unwrap();
        let truth = Coefficients::target(0.3);
        let mut exact = DenseSurface::zeros(2, Interval::unit(), 2001, grid.clone());
        let s = exact.abscissa().to_vec();
        for d in 0..2 {
            let v: Vec<f64> = s.iter().map(|&s| truth.alpha(d, s, 0.5)).collect();
            exact.level_mut(d, 2).copy_from_slice(&v);
        }
        assert_abs_diff_eq!(rmse(&exact, &truth, 0, 0.5, 2001).unwrap(), 0.0, epsilon = 1e-12);
        let mut plus_one = exact.clone();
        plus_one.level_mut(1, 2).iter_mut().for_each(|v| *v += 1.0);
        assert_abs_diff_eq!(rmse(&plus_one, &truth, 1, 0.5, 2001).unwrap(), 1.0, epsilon = 1e-12);
        let mut plus_s = exact.clone();
        plus_s
            .level_mut(1, 2)
            .iter_mut()
            .zip(&s)
            .for_each(|(v, s)| *v += s);
        assert_abs_diff_eq!(
            rmse(&plus_s, &truth, 1, 0.5, 2001).unwrap(),
            1.0 / 3f64.sqrt(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ScenarioConfig {
            replications: 0,
            ..ScenarioConfig::default()
        };
        assert!(matches!(run_scenario(&cfg), Err(Error::Config(_))));
        cfg.replications = 1;
        cfg.case = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.case = 1;
        cfg.eval_taus = vec![0.333];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_config_file_parses() {
        let cfg: ScenarioConfig = toml::from_str("n0 = 150\ncase = 4\nmethods = [\"target\", \"sitl\"]\n").unwrap();
        assert_eq!(cfg.n0, 150);
        assert_eq!(cfg.case, 4);
        assert_eq!(cfg.methods, vec![Method::Target, Method::Sitl]);
        assert_eq!(cfg.source_sizes, vec![500, 1000, 500, 1000]);
        assert!(toml::from_str::<ScenarioConfig>("bogus = 1\n").is_err());
    }
}

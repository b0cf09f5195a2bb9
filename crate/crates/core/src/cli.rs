//! Command-line front end: `fit`, `transfer`, `ci` and `simulate`.
//!
//! Every command writes its outputs plus one `manifest.json` into `--out`.
//! All file reads go through [`InputAudit`], and the manifest lists every
//! file read with its role and digest. That is how tests verify that
//! `transfer` and `ci` never touch raw source-cohort rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{parse_cohort, Cohort};
use crate::cqr::exchange::{export_estimator, import_estimator};
use crate::cqr::{bases_for, default_knots, fit_sequential, CoefficientSurface, IpmOptions, QuantileGrid};
use crate::error::{Error, Result};
use crate::resample::{build_ci, query_grid, sitl_replicates, CiBand, DEFAULT_REPLICATES};
use crate::simlab::{run_scenario, Method, ScenarioConfig};
use crate::sitl::{sitl_estimate, Kernel, SitlConfig, SitlFit};
use crate::surface::{CoefficientFunction, DenseSurface, DEFAULT_DENSE_POINTS};

#[derive(Debug, Parser)]
#[command(name = "sitl", version, about = "Similarity-informed transfer learning for censored functional quantile regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the baseline estimator on one cohort and export it.
    Fit(FitArgs),
    /// Combine source estimators with a target cohort.
    Transfer(TransferArgs),
    /// Resampling confidence bands for a transfer fit.
    Ci(CiArgs),
    /// Run a Monte Carlo scenario.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CohortArgs {
    /// Observation table (`subject_id,y,delta`).
    #[arg(long = "obs")]
    pub observations: PathBuf,
    /// Long-form functional table (`subject_id,predictor,s,value`).
    #[arg(long = "fun")]
    pub functional: PathBuf,
    /// Cohort label stored in outputs.
    #[arg(long, default_value = "target")]
    pub label: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GridArgs {
    /// Largest quantile level.
    #[arg(long, default_value_t = 0.8)]
    pub grid_max: f64,
    /// Spacing of the quantile grid.
    #[arg(long, default_value_t = 0.01)]
    pub grid_step: f64,
}

impl GridArgs {
    fn grid(&self) -> Result<QuantileGrid> {
        QuantileGrid::build(self.grid_max, self.grid_step)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    #[serde(skip)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Interior knots per predictor (default `ceil(n^(1/5))`).
    #[arg(long)]
    pub knots: Option<usize>,
    /// Spline order (4 = cubic).
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TransferArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Source estimator file (repeatable).
    #[arg(long = "source")]
    pub sources: Vec<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Interior knots of the target half fit (default `ceil(n^(1/5))`).
    #[arg(long)]
    pub knots: Option<usize>,
    /// Interior knots of the debias basis (default `ceil(n^(1/7))`).
    #[arg(long)]
    pub eta_knots: Option<usize>,
    /// Kernel bandwidth (default `2 log(5 n0)`).
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long, default_value_t = Kernel::Gaussian)]
    pub kernel: Kernel,
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    /// Abscissa points of the dense output surfaces.
    #[arg(long, default_value_t = DEFAULT_DENSE_POINTS)]
    pub dense_points: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CiArgs {
    #[command(flatten)]
    pub transfer: TransferArgs,
    /// Perturbation replicates.
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    pub replicates: usize,
    /// Pointwise level `a` of the `1 - a` bands.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Levels to report (default: every grid level).
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario file (TOML); omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the scenario case.
    #[arg(long)]
    pub case: Option<u8>,
    /// Overrides the replication count.
    #[arg(long)]
    pub replications: Option<usize>,
    /// Overrides the method set (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub threads: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// One file read by a command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub role: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Records every file a command reads.
#[derive(Debug, Default)]
pub struct InputAudit {
    records: Vec<InputRecord>,
}

impl InputAudit {
    pub fn read(&mut self, path: &Path, role: &str) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.records.push(InputRecord {
            path: path.display().to_string(),
            role: role.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(bytes)
    }

    pub fn records(&self) -> &[InputRecord] {
        &self.records
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    /// sha256 of the compact configuration JSON.
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub elapsed_seconds: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn finish(
        self,
        command: &str,
        config: &impl Serialize,
        seeds: BTreeMap<String, u64>,
        audit: InputAudit,
        started: (SystemTime, Instant),
    ) -> Result<()> {
        let config = serde_json::to_value(config).expect("serializable");
        let config_hash = hex::encode(Sha256::digest(config.to_string().as_bytes()));
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            config_hash,
            seeds,
            inputs: audit.records,
            outputs: self.files.clone(),
            started_unix: started
                .0
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            elapsed_seconds: started.1.elapsed().as_secs_f64(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("serializable");
        bytes.push(b'\n');
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

fn now() -> (SystemTime, Instant) {
    (SystemTime::now(), Instant::now())
}

fn load_target(args: &CohortArgs, audit: &mut InputAudit, role: &str) -> Result<Cohort> {
    let obs = audit.read(&args.observations, &format!("{role}-observations"))?;
    let fun = audit.read(&args.functional, &format!("{role}-functional"))?;
    parse_cohort(&obs, &args.observations, &fun, &args.functional, &args.label)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// `s,tau,predictor,value` rows for levels `1..L`; predictors are 1-based.
pub fn surface_csv(surface: &DenseSurface) -> Vec<u8> {
    let grid = surface.quantile_grid();
    let mut rows = Vec::new();
    for d in 0..surface.q() {
        for j in 1..=grid.len() {
            for (s, v) in surface.abscissa().iter().zip(surface.level(d, j)) {
                rows.push(vec![
                    format!("{s}"),
                    format!("{}", grid.tau(j)),
                    format!("{}", d + 1),
                    format!("{v}"),
                ]);
            }
        }
    }
    csv_bytes(&["s", "tau", "predictor", "value"], rows)
}

fn diagnostics_csv(fit: &CoefficientSurface) -> Vec<u8> {
    let rows = fit.meta().diagnostics.iter().map(|d| {
        vec![
            format!("{}", d.tau),
            d.iterations.to_string(),
            format!("{:e}", d.gap),
            d.events.to_string(),
            d.untrustworthy.to_string(),
        ]
    });
    csv_bytes(&["tau", "iterations", "gap", "events", "untrustworthy"], rows)
}

fn weights_csv(fit: &SitlFit) -> Vec<u8> {
    let norm = fit.report.normalized_weights();
    let rows = fit.report.sources.iter().zip(&norm).map(|(s, w)| {
        vec![
            s.label.clone(),
            s.n.to_string(),
            format!("{}", s.loss_diff),
            format!("{:e}", s.weight),
            format!("{w}"),
        ]
    });
    csv_bytes(&["source", "n", "loss_diff", "weight", "normalized_weight"], rows)
}

/// `predictor,s,tau,estimate,sd,lower,upper`.
pub fn ci_csv(band: &CiBand) -> Vec<u8> {
    let rows = band.points.iter().map(|p| {
        vec![
            (p.predictor + 1).to_string(),
            format!("{}", p.s),
            format!("{}", p.tau),
            format!("{}", p.estimate),
            format!("{}", p.sd),
            format!("{}", p.lower),
            format!("{}", p.upper),
        ]
    });
    csv_bytes(&["predictor", "s", "tau", "estimate", "sd", "lower", "upper"], rows)
}

fn weights_table(fit: &SitlFit) -> String {
    let mut out = format!(
        "{:<24} {:>8} {:>14} {:>12} {:>10}\n",
        "source", "n", "loss diff", "weight", "share"
    );
    for (s, w) in fit.report.sources.iter().zip(fit.report.normalized_weights()) {
        out.push_str(&format!(
            "{:<24} {:>8} {:>14.4} {:>12.4e} {:>10.4}\n",
            s.label, s.n, s.loss_diff, s.weight, w
        ));
    }
    if fit.fallback {
        out.push_str("all sources uninformative: target-only fit\n");
    }
    out
}

#[derive(Serialize)]
struct TransferReport<'a> {
    fallback: bool,
    bandwidth: f64,
    kernel: Kernel,
    split_seed: u64,
    weight_mass: f64,
    sources: &'a [crate::sitl::SourceSimilarity],
    normalized_weights: Vec<f64>,
    debias_diagnostics: &'a [crate::cqr::LevelDiagnostics],
}

fn run_transfer_fit(
    args: &TransferArgs,
    audit: &mut InputAudit,
) -> Result<(Cohort, SitlFit)> {
    let grid = args.grid.grid()?;
    let target = load_target(&args.cohort, audit, "target")?;
    if args.sources.is_empty() {
        return Err(Error::Config("at least one --source estimator is required".into()));
    }
    let sources = args
        .sources
        .iter()
        .map(|p| {
            let bytes = audit.read(p, "source-estimator")?;
            import_estimator(&bytes).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for s in &sources {
        if s.grid() != &grid {
            return Err(Error::Domain(format!(
                "source `{}` was fitted on a different quantile grid ({} levels up to {}); pass matching --grid-max/--grid-step",
                s.label(),
                s.grid().len(),
                s.grid().tau_max()
            )));
        }
    }
    let config = SitlConfig {
        order: args.order,
        knots: args.knots,
        eta_knots: args.eta_knots,
        bandwidth: args.bandwidth,
        kernel: args.kernel,
        dense_points: args.dense_points,
        split_seed: args.run.seed,
    };
    let fit = sitl_estimate(&target, &sources, &config, &IpmOptions::default())?;
    Ok((target, fit))
}

fn write_transfer_outputs(out: &mut Output, fit: &SitlFit) -> Result<()> {
    out.write("weights.csv", &weights_csv(fit))?;
    out.write_json(
        "report.json",
        &TransferReport {
            fallback: fit.fallback,
            bandwidth: fit.report.bandwidth,
            kernel: fit.report.kernel,
            split_seed: fit.report.split_seed,
            weight_mass: fit.report.weight_mass(),
            sources: &fit.report.sources,
            normalized_weights: fit.report.normalized_weights(),
            debias_diagnostics: &fit.debias.meta().diagnostics,
        },
    )?;
    out.write("transfer_surface.csv", &surface_csv(&fit.transfer))?;
    out.write(
        "debias_surface.csv",
        &surface_csv(&DenseSurface::sample(&fit.debias, fit.transfer.abscissa().len())?),
    )?;
    out.write("final_surface.csv", &surface_csv(&fit.combined))
}

/// Offset between the split seed and the first perturbation seed, so the two
/// streams never coincide.
const RESAMPLE_SEED_OFFSET: u64 = 0x5eed_0001;

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let started = now();
    let mut audit = InputAudit::default();
    let grid = args.grid.grid()?;
    let cohort = load_target(&args.cohort, &mut audit, "cohort")?;
    let knots = args.knots.unwrap_or_else(|| default_knots(cohort.n()));
    let bases = bases_for(&cohort, args.order, knots)?;
    let fit = fit_sequential(&cohort, &bases, &grid, &IpmOptions::default())?;
    let mut out = Output::create(&args.run.out)?;
    out.write("estimator.json", &export_estimator(&fit))?;
    out.write("diagnostics.csv", &diagnostics_csv(&fit))?;
    let flagged = fit.meta().diagnostics.iter().filter(|d| d.untrustworthy).count();
    println!(
        "fitted `{}`: n = {}, events = {}, {} levels, {} interior knots{}",
        cohort.label(),
        cohort.n(),
        cohort.events(),
        grid.len(),
        knots,
        if flagged > 0 {
            format!(", {flagged} levels flagged")
        } else {
            String::new()
        }
    );
    out.finish("fit", args, BTreeMap::new(), audit, started)
}

pub fn cmd_transfer(args: &TransferArgs) -> Result<()> {
    let started = now();
    let mut audit = InputAudit::default();
    let (_, fit) = run_transfer_fit(args, &mut audit)?;
    let mut out = Output::create(&args.run.out)?;
    write_transfer_outputs(&mut out, &fit)?;
    print!("{}", weights_table(&fit));
    let seeds = BTreeMap::from([("split".to_string(), args.run.seed)]);
    out.finish("transfer", args, seeds, audit, started)
}

pub fn cmd_ci(args: &CiArgs) -> Result<()> {
    let started = now();
    let mut audit = InputAudit::default();
    if args.replicates < 2 {
        return Err(Error::Config(format!(
            "need at least 2 replicates, got {}",
            args.replicates
        )));
    }
    let (target, fit) = run_transfer_fit(&args.transfer, &mut audit)?;
    let seed = args.transfer.run.seed.wrapping_add(RESAMPLE_SEED_OFFSET);
    let reps = sitl_replicates(&fit, &target, args.replicates, seed, &IpmOptions::default())?;
    let grid = fit.combined.quantile_grid();
    let levels = match &args.levels {
        Some(l) => l.clone(),
        None => grid.levels()[1..].to_vec(),
    };
    let query = query_grid(fit.combined.q(), fit.combined.abscissa(), &levels);
    let band = build_ci(&fit.combined, &reps, args.alpha, &query)?;
    let mut out = Output::create(&args.transfer.run.out)?;
    out.write("ci.csv", &ci_csv(&band))?;
    write_transfer_outputs(&mut out, &fit)?;
    println!(
        "{} replicates, {:.0}% pointwise bands at {} points, mean width {:.4}",
        args.replicates,
        100.0 * band.confidence,
        band.points.len(),
        band.mean_width()
    );
    let seeds = BTreeMap::from([
        ("split".to_string(), args.transfer.run.seed),
        ("resample".to_string(), seed),
    ]);
    out.finish("ci", args, seeds, audit, started)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let started = now();
    let mut audit = InputAudit::default();
    let mut cfg = match &args.config {
        Some(path) => {
            let bytes = audit.read(path, "scenario")?;
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
            toml::from_str::<ScenarioConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(c) = args.case {
        cfg.case = c;
    }
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    if let Some(m) = &args.methods {
        cfg.methods = m.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let result = run_scenario(&cfg)?;
    let mut out = Output::create(&args.out)?;
    out.write("summary.csv", result.to_csv().as_bytes())?;
    out.write("summary.txt", result.summary().as_bytes())?;
    out.write_json("replications.json", &result.outcomes)?;
    print!("{}", result.summary());
    let seeds = BTreeMap::from([("scenario".to_string(), cfg.seed)]);
    out.finish("simulate", &cfg, seeds, audit, started)
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let threads = match &cli.command {
        Command::Fit(a) => a.run.threads,
        Command::Transfer(a) => a.run.threads,
        Command::Ci(a) => a.transfer.run.threads,
        Command::Simulate(a) => a.threads,
    };
    thread_pool(threads)?.install(|| match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Ci(a) => cmd_ci(a),
        Command::Simulate(a) => cmd_simulate(a),
    })
}

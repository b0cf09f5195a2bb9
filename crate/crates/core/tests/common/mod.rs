#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sitl::cohort::write_cohort;
use sitl::simlab::{gen_cohort, true_coefficients};

pub const GRID: [&str; 4] = ["--grid-max", "0.5", "--grid-step", "0.05"];

pub struct CohortFiles {
    pub obs: PathBuf,
    pub fun: PathBuf,
}

/// Simulated cohort: the target truth for `case == 0`, else that case's
/// source truth.
pub fn write_sim_cohort(dir: &Path, name: &str, case: u8, n: usize, seed: u64) -> CohortFiles {
    let truth = true_coefficients(case.max(1), 0.2f64.sqrt()).unwrap();
    let coef = if case == 0 { &truth.target } else { &truth.source };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cohort = gen_cohort(name, n, coef, 1.0, 0.1, 20_000, &mut rng).unwrap();
    let files = CohortFiles {
        obs: dir.join(format!("{name}_obs.csv")),
        fun: dir.join(format!("{name}_fun.csv")),
    };
    write_cohort(&cohort, &files.obs, &files.fun).unwrap();
    files
}

pub fn sitl_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sitl"))
}

pub fn run(args: &[&str]) -> Output {
    sitl_bin().args(args).output().expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "sitl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Fits `files` into `out` and returns the estimator path.
pub fn fit(files: &CohortFiles, label: &str, out: &Path) -> PathBuf {
    let mut args = vec!["fit", "--obs", p(&files.obs), "--fun", p(&files.fun), "--label", label];
    args.extend(GRID);
    args.extend(["--out", p(out)]);
    run_ok(&args);
    out.join("estimator.json")
}

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use common::*;
use sitl::cli::RunManifest;
use sitl::cqr::exchange::import_estimator;
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
    target: CohortFiles,
    sources: Vec<PathBuf>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let target = write_sim_cohort(dir.path(), "target", 0, 80, 11);
        let sources = [(1u8, 21u64), (4, 22)]
            .iter()
            .enumerate()
            .map(|(k, &(case, seed))| {
                let name = format!("source{}", k + 1);
                let files = write_sim_cohort(dir.path(), &name, case, 300, seed);
                fit(&files, &name, &dir.path().join(format!("fit_{name}")))
            })
            .collect();
        Fixture {
            dir,
            target,
            sources,
        }
    })
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn transfer_args<'a>(f: &'a Fixture, sources: &'a [PathBuf], out: &'a Path) -> Vec<&'a str> {
    let mut args = vec!["transfer", "--obs", p(&f.target.obs), "--fun", p(&f.target.fun)];
    for s in sources {
        args.extend(["--source", p(s)]);
    }
    args.extend(GRID);
    args.extend(["--out", p(out)]);
    args
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn fit_round_trips_and_is_deterministic() {
    let f = fixture();
    let est = &f.sources[0];
    let surface = import_estimator(&fs::read(est).unwrap()).unwrap();
    assert_eq!(surface.label(), "source1");
    assert_eq!(surface.meta().n, 300);
    assert_eq!(surface.grid().len(), 10);

    let dir = fit_dir(est);
    let m = manifest(&dir);
    assert_eq!(m.command, "fit");
    assert_eq!(m.outputs, ["estimator.json", "diagnostics.csv"]);
    let roles: Vec<_> = m.inputs.iter().map(|i| i.role.as_str()).collect();
    assert_eq!(roles, ["cohort-observations", "cohort-functional"]);
    assert_eq!(csv_rows(&dir.join("diagnostics.csv")).len(), 10);

    let files = CohortFiles {
        obs: f.dir.path().join("source1_obs.csv"),
        fun: f.dir.path().join("source1_fun.csv"),
    };
    let again = TempDir::new().unwrap();
    let est2 = fit(&files, "source1", again.path());
    assert_eq!(fs::read(est).unwrap(), fs::read(est2).unwrap());
    let m2 = manifest(again.path());
    assert_eq!(m.config_hash, m2.config_hash);
    assert_eq!(m.inputs, m2.inputs);
}

fn fit_dir(est: &Path) -> PathBuf {
    est.parent().unwrap().to_path_buf()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const TOY_FUN: &str = "subject_id,predictor,s,value\n\
                       a,1,0,1\na,1,0.5,2\na,1,1,3\n\
                       b,1,0,0\nb,1,0.5,1\nb,1,1,0\n\
                       c,1,0,2\nc,1,0.5,1\nc,1,1,2\n";

#[test]
fn malformed_inputs_exit_with_ingestion_code() {
    let dir = TempDir::new().unwrap();
    let fun = write(dir.path(), "fun.csv", TOY_FUN);
    let bad_y = write(dir.path(), "obs.csv", "subject_id,y,delta\na,2,1\nb,-1,1\nc,3,0\n");
    let out = dir.path().join("out");
    let res = run(&["fit", "--obs", p(&bad_y), "--fun", p(&fun), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("row 3"), "{err}");

    let good = write(dir.path(), "good.csv", "subject_id,y,delta\na,2,1\nb,1,1\nc,3,0\nd,4,1\n");
    let res = run(&["fit", "--obs", p(&good), "--fun", p(&fun), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2), "subject d has no curve");
    assert!(String::from_utf8_lossy(&res.stderr).contains('d'));

    let missing = dir.path().join("nope.csv");
    let res = run(&["fit", "--obs", p(&good), "--fun", p(&missing), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn transfer_reads_only_estimators_from_sources() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    // Private copies of one source so its raw rows can be deleted.
    let raw = write_sim_cohort(dir.path(), "private", 1, 300, 21);
    let est = fit(&raw, "private", &dir.path().join("fit"));
    fs::remove_file(&raw.obs).unwrap();
    fs::remove_file(&raw.fun).unwrap();

    let out = dir.path().join("transfer");
    let sources = vec![est.clone(), f.sources[1].clone()];
    let res = run_ok(&transfer_args(f, &sources, &out));
    let table = String::from_utf8_lossy(&res.stdout);
    assert!(table.contains("private") && table.contains("source2"), "{table}");

    let m = manifest(&out);
    let roles: BTreeSet<_> = m.inputs.iter().map(|i| i.role.as_str()).collect();
    assert_eq!(
        roles,
        BTreeSet::from(["target-observations", "target-functional", "source-estimator"])
    );
    let read: Vec<_> = m.inputs.iter().map(|i| i.path.as_str()).collect();
    assert!(!read.contains(&p(&raw.obs)) && !read.contains(&p(&raw.fun)));
    for name in [
        "weights.csv",
        "report.json",
        "transfer_surface.csv",
        "debias_surface.csv",
        "final_surface.csv",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
    let weights = csv_rows(&out.join("weights.csv"));
    assert_eq!(weights.len(), 2);
    let share: f64 = weights.iter().map(|r| r[4].parse::<f64>().unwrap()).sum();
    assert!((share - 1.0).abs() < 1e-9);
}

#[test]
fn adding_a_source_leaves_existing_estimators_untouched() {
    let f = fixture();
    let before: Vec<_> = f.sources.iter().map(|s| fs::read(s).unwrap()).collect();
    let dir = TempDir::new().unwrap();
    let one = dir.path().join("one");
    run_ok(&transfer_args(f, &f.sources[..1], &one));
    let two = dir.path().join("two");
    run_ok(&transfer_args(f, &f.sources, &two));
    let after: Vec<_> = f.sources.iter().map(|s| fs::read(s).unwrap()).collect();
    assert_eq!(before, after);
    assert_eq!(csv_rows(&one.join("weights.csv")).len(), 1);
    assert_eq!(csv_rows(&two.join("weights.csv")).len(), 2);
}

#[test]
fn identical_source_gives_small_debias() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let est = fit(&f.target, "self", &dir.path().join("fit"));
    let out = dir.path().join("transfer");
    run_ok(&transfer_args(f, std::slice::from_ref(&est), &out));
    let col = |name: &str| -> Vec<f64> {
        csv_rows(&out.join(name))
            .iter()
            .map(|r| r[3].parse().unwrap())
            .collect()
    };
    let (transfer, debias, fin) = (
        col("transfer_surface.csv"),
        col("debias_surface.csv"),
        col("final_surface.csv"),
    );
    for k in 0..fin.len() {
        assert!((fin[k] - transfer[k] - debias[k]).abs() < 1e-9);
    }
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    assert!(
        rms(&debias) < 0.5 * rms(&transfer),
        "debias {} vs transfer {}",
        rms(&debias),
        rms(&transfer)
    );
}

#[test]
fn transfer_configuration_errors_exit_3() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    let res = run(&transfer_args(f, &[], &out));
    assert_eq!(res.status.code(), Some(3));

    // Source fitted on a different quantile grid.
    let mut args = transfer_args(f, &f.sources[..1], &out);
    let i = args.iter().position(|a| *a == "0.05").unwrap();
    args[i] = "0.1";
    assert_eq!(run(&args).status.code(), Some(3));

    let mut args = transfer_args(f, &f.sources[..1], &out);
    args.extend(["--kernel", "triangle"]);
    assert_ne!(run(&args).status.code(), Some(0));
}

#[test]
fn corrupt_estimator_exits_2() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let mut text = fs::read_to_string(&f.sources[0]).unwrap();
    text = text.replacen("\"n\": 300", "\"n\": 301", 1);
    let bad = write(dir.path(), "bad.json", &text);
    let res = run(&transfer_args(f, &[bad], &dir.path().join("o")));
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn transfer_is_independent_of_thread_count() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let mut args = transfer_args(f, &f.sources, &out);
        args.extend(["--threads", threads]);
        run_ok(&args);
        outs.push(out);
    }
    for name in ["final_surface.csv", "weights.csv", "report.json"] {
        assert_eq!(
            fs::read(outs[0].join(name)).unwrap(),
            fs::read(outs[1].join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(manifest(&outs[0]).config_hash, manifest(&outs[1]).config_hash);
}

fn ci_args<'a>(f: &'a Fixture, out: &'a Path, b: &'a str) -> Vec<&'a str> {
    let mut args = transfer_args(f, &f.sources, out);
    args[0] = "ci";
    args.extend(["--replicates", b, "--alpha", "0.05", "--seed", "7", "--levels", "0.3,0.5"]);
    args
}

#[test]
fn ci_bands_are_normal_and_reproducible() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&ci_args(f, &a, "2"));
    run_ok(&ci_args(f, &b, "2"));
    let bytes = fs::read(a.join("ci.csv")).unwrap();
    assert_eq!(bytes, fs::read(b.join("ci.csv")).unwrap());

    let rows = csv_rows(&a.join("ci.csv"));
    // Two predictors, two levels, the default dense abscissa.
    assert_eq!(rows.len(), 2 * 2 * 201);
    for r in &rows {
        let v: Vec<f64> = r.iter().map(|x| x.parse().unwrap()).collect();
        let (est, sd, lo, hi) = (v[3], v[4], v[5], v[6]);
        assert!((hi - est - 1.959964 * sd).abs() < 1e-5 * (1.0 + sd));
        assert!((est - lo - 1.959964 * sd).abs() < 1e-5 * (1.0 + sd));
    }
    let m = manifest(&a);
    assert_eq!(m.seeds["split"], 7);
    assert!(m.seeds.contains_key("resample"));
}

#[test]
fn ci_rejects_single_replicate() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let res = run(&ci_args(f, &dir.path().join("o"), "1"));
    assert_eq!(res.status.code(), Some(3));
}

const SMALL_SCENARIO: &str = "n0 = 40\nsource_sizes = [120]\nreplications = 2\n\
                              tau_max = 0.5\ntau_step = 0.1\neval_taus = [0.3, 0.5]\n\
                              pilot_size = 5000\ndense_points = 51\n";

#[test]
fn simulate_emits_only_requested_methods() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "scenario.toml", SMALL_SCENARIO);
    let out = dir.path().join("sim");
    let args = ["simulate", "--config", p(&cfg), "--methods", "target", "--out", p(&out)];
    run_ok(&args);
    let rows = csv_rows(&out.join("summary.csv"));
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r[0] == "Target"), "{rows:?}");
    for name in ["summary.txt", "replications.json", "manifest.json"] {
        assert!(out.join(name).exists(), "{name}");
    }

    let again = dir.path().join("again");
    run_ok(&["simulate", "--config", p(&cfg), "--methods", "target", "--out", p(&again)]);
    assert_eq!(
        fs::read(out.join("summary.csv")).unwrap(),
        fs::read(again.join("summary.csv")).unwrap()
    );
    let m = manifest(&out);
    assert_eq!(m.inputs[0].role, "scenario");
    assert_eq!(m.config["methods"], serde_json::json!(["target"]));
}

#[test]
fn simulate_configuration_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "scenario.toml", SMALL_SCENARIO);
    let out = dir.path().join("sim");
    let res = run(&["simulate", "--config", p(&cfg), "--case", "5", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3));
    let res = run(&["simulate", "--config", p(&cfg), "--replications", "0", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3));
    let typo = write(dir.path(), "typo.toml", "n_0 = 40\n");
    let res = run(&["simulate", "--config", p(&typo), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3));
}

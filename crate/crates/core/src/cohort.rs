//! Censored cohorts with functional predictors: in-memory model, CSV
//! ingestion and the random half split used for similarity weighting.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::{validate_grid, SampledFunction};
use crate::error::{Error, Result};

pub const OBSERVATIONS_HEADER: [&str; 3] = ["subject_id", "y", "delta"];
pub const FUNCTIONAL_HEADER: [&str; 4] = ["subject_id", "predictor", "s", "value"];

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Observed follow-up `min(T, C)`.
    pub y: f64,
    /// Event indicator `T <= C`.
    pub delta: bool,
    pub predictors: Vec<SampledFunction>,
}

/// Subjects sharing one abscissa grid and predictor count.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    label: String,
    q: usize,
    grid: Arc<[f64]>,
    subjects: Vec<Subject>,
}

impl Cohort {
    pub fn new(label: impl Into<String>, subjects: Vec<Subject>) -> Result<Self> {
        let label = label.into();
        let first = subjects
            .first()
            .ok_or_else(|| Error::InsufficientData(format!("cohort {label} has no subjects")))?;
        let q = first.predictors.len();
        if q == 0 {
            return Err(Error::Domain(format!("cohort {label}: subjects carry no predictors")));
        }
        let grid = first.predictors[0].grid().clone();
        validate_grid(&grid)?;
        for s in &subjects {
            if !(s.y > 0.0 && s.y.is_finite()) {
                return Err(Error::Domain(format!(
                    "subject {}: follow-up time must be positive, got {}",
                    s.id, s.y
                )));
            }
            if s.predictors.len() != q {
                return Err(Error::Domain(format!(
                    "subject {} has {} predictors, expected {q}",
                    s.id,
                    s.predictors.len()
                )));
            }
            if s.predictors.iter().any(|p| p.grid()[..] != grid[..]) {
                return Err(Error::Domain(format!(
                    "subject {}: predictors must share the cohort grid",
                    s.id
                )));
            }
        }
        Ok(Self {
            label,
            q,
            grid,
            subjects,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn grid(&self) -> &Arc<[f64]> {
        &self.grid
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn events(&self) -> usize {
        self.subjects.iter().filter(|s| s.delta).count()
    }

    pub fn censoring_rate(&self) -> f64 {
        1.0 - self.events() as f64 / self.n() as f64
    }

    pub fn log_y(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.y.ln()).collect()
    }

    pub fn delta(&self) -> Vec<bool> {
        self.subjects.iter().map(|s| s.delta).collect()
    }

    /// Subjects at the given positions, in that order.
    pub fn subset(&self, indices: &[usize], label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            q: self.q,
            grid: self.grid.clone(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    /// Rows of several cohorts stacked into one; grids may differ only if the
    /// caller never needs a shared grid, so they are required to match.
    pub fn concat<'a>(
        label: impl Into<String>,
        cohorts: impl IntoIterator<Item = &'a Cohort>,
    ) -> Result<Self> {
        let subjects: Vec<Subject> = cohorts
            .into_iter()
            .flat_map(|c| c.subjects.iter().cloned())
            .collect();
        Cohort::new(label, subjects)
    }
}

/// Random partition into `(I, I^c)` with `|I| = floor(n / 2)`.
pub fn split_half(cohort: &Cohort, seed: u64) -> Result<(Cohort, Cohort)> {
    let n = cohort.n();
    if n < 4 {
        return Err(Error::InsufficientData(format!(
            "need at least 4 subjects to split, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (first, second) = idx.split_at_mut(n / 2);
    first.sort_unstable();
    second.sort_unstable();
    let label = cohort.label();
    Ok((
        cohort.subset(first, format!("{label}/fit-half")),
        cohort.subset(second, format!("{label}/eval-half")),
    ))
}

/// Reads both cohort files from disk. See [`parse_cohort`].
pub fn load_cohort(observations: &Path, functional: &Path, label: &str) -> Result<Cohort> {
    let obs = std::fs::read(observations).map_err(|e| Error::io(observations, e))?;
    let fun = std::fs::read(functional).map_err(|e| Error::io(functional, e))?;
    parse_cohort(&obs, observations, &fun, functional, label)
}

fn check_header(
    rdr: &mut csv::Reader<&[u8]>,
    expected: &[&str],
    file: &Path,
) -> Result<()> {
    let header = rdr
        .headers()
        .map_err(|e| Error::ingestion(file, format!("unreadable header: {e}")))?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::ingestion(
            file,
            format!("header must be `{}`, got `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    col: usize,
    name: &str,
    file: &Path,
    line: u64,
) -> Result<T> {
    let raw = record.get(col).map(str::trim).unwrap_or("");
    raw.parse().map_err(|_| {
        Error::ingestion(file, format!("row {line}: cannot parse {name} from `{raw}`"))
    })
}

/// Parses and validates the observation and long-form functional tables.
///
/// Row numbers in error messages count the header as row 1.
pub fn parse_cohort(
    observations: &[u8],
    obs_path: &Path,
    functional: &[u8],
    fun_path: &Path,
    label: &str,
) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(observations);
    check_header(&mut rdr, &OBSERVATIONS_HEADER, obs_path)?;
    let mut order: Vec<(String, f64, bool)> = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| Error::ingestion(obs_path, format!("row {line}: {e}")))?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::ingestion(obs_path, format!("row {line}: empty subject_id")));
        }
        let y: f64 = parse_field(&rec, 1, "y", obs_path, line)?;
        if !(y > 0.0 && y.is_finite()) {
            return Err(Error::ingestion(
                obs_path,
                format!("row {line}: y must be positive and finite, got {y}"),
            ));
        }
        let delta: u8 = parse_field(&rec, 2, "delta", obs_path, line)?;
        if delta > 1 {
            return Err(Error::ingestion(
                obs_path,
                format!("row {line}: delta must be 0 or 1, got {delta}"),
            ));
        }
        if let Some(prev) = seen.insert(id.clone(), line) {
            return Err(Error::ingestion(
                obs_path,
                format!("row {line}: subject `{id}` already listed on row {prev}"),
            ));
        }
        order.push((id, y, delta == 1));
    }
    if order.is_empty() {
        return Err(Error::ingestion(obs_path, "no subjects"));
    }

    // subject -> predictor -> s -> (value, line)
    type Curves = BTreeMap<usize, BTreeMap<OrderedS, (f64, u64)>>;
    let mut curves: HashMap<String, Curves> = HashMap::new();
    let mut rdr = csv::ReaderBuilder::new().from_reader(functional);
    check_header(&mut rdr, &FUNCTIONAL_HEADER, fun_path)?;
    let mut q = 0usize;
    for (k, rec) in rdr.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| Error::ingestion(fun_path, format!("row {line}: {e}")))?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        if !seen.contains_key(&id) {
            return Err(Error::ingestion(
                fun_path,
                format!("row {line}: subject `{id}` has no observation row"),
            ));
        }
        let d: usize = parse_field(&rec, 1, "predictor", fun_path, line)?;
        if d == 0 {
            return Err(Error::ingestion(
                fun_path,
                format!("row {line}: predictor indices start at 1"),
            ));
        }
        let s: f64 = parse_field(&rec, 2, "s", fun_path, line)?;
        let value: f64 = parse_field(&rec, 3, "value", fun_path, line)?;
        if !s.is_finite() || !value.is_finite() {
            return Err(Error::ingestion(
                fun_path,
                format!("row {line}: non-finite abscissa or value"),
            ));
        }
        q = q.max(d);
        let slot = curves.entry(id.clone()).or_default().entry(d).or_default();
        if let Some((_, prev)) = slot.insert(OrderedS(s), (value, line)) {
            return Err(Error::ingestion(
                fun_path,
                format!("row {line}: duplicate (subject `{id}`, predictor {d}, s {s}); first on row {prev}"),
            ));
        }
    }

    let mut grid: Option<Arc<[f64]>> = None;
    let mut subjects = Vec::with_capacity(order.len());
    for (id, y, delta) in order {
        let per = curves.remove(&id).unwrap_or_default();
        let mut predictors = Vec::with_capacity(q);
        for d in 1..=q {
            let curve = per.get(&d).ok_or_else(|| {
                Error::ingestion(fun_path, format!("subject `{id}` is missing predictor {d}"))
            })?;
            let abscissa: Vec<f64> = curve.keys().map(|s| s.0).collect();
            let values: Vec<f64> = curve.values().map(|v| v.0).collect();
            let g = match &grid {
                Some(g) if g[..] == abscissa[..] => g.clone(),
                Some(_) => {
                    return Err(Error::ingestion(
                        fun_path,
                        format!(
                            "subject `{id}` predictor {d}: abscissa grid differs from the cohort grid (first row {})",
                            curve.values().next().map(|v| v.1).unwrap_or(0)
                        ),
                    ))
                }
                None => {
                    let g: Arc<[f64]> = abscissa.into();
                    validate_grid(&g).map_err(|e| {
                        Error::ingestion(fun_path, format!("subject `{id}` predictor {d}: {e}"))
                    })?;
                    grid = Some(g.clone());
                    g
                }
            };
            predictors.push(SampledFunction::new(g, values)?);
        }
        subjects.push(Subject {
            id,
            y,
            delta,
            predictors,
        });
    }
    let cohort = Cohort::new(label, subjects)?;
    log::info!(
        "loaded cohort `{}`: n = {}, q = {}, censoring rate = {:.4}",
        cohort.label(),
        cohort.n(),
        cohort.q(),
        cohort.censoring_rate()
    );
    Ok(cohort)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedS(f64);

impl Eq for OrderedS {}

impl PartialOrd for OrderedS {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedS {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Writes the two CSV tables; `load_cohort` reads them back bit-exactly.
pub fn write_cohort(cohort: &Cohort, observations: &Path, functional: &Path) -> Result<()> {
    let mut obs = Vec::new();
    writeln!(obs, "{}", OBSERVATIONS_HEADER.join(",")).expect("write to Vec");
    for s in cohort.subjects() {
        writeln!(obs, "{},{:?},{}", s.id, s.y, u8::from(s.delta)).expect("write to Vec");
    }
    let mut fun = Vec::new();
    writeln!(fun, "{}", FUNCTIONAL_HEADER.join(",")).expect("write to Vec");
    for s in cohort.subjects() {
        for (d, p) in s.predictors.iter().enumerate() {
            for (x, v) in p.grid().iter().zip(p.values()) {
                writeln!(fun, "{},{},{:?},{:?}", s.id, d + 1, x, v).expect("write to Vec");
            }
        }
    }
    std::fs::write(observations, obs).map_err(|e| Error::io(observations, e))?;
    std::fs::write(functional, fun).map_err(|e| Error::io(functional, e))?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy_cohort(n: usize) -> Cohort {
        let grid: Arc<[f64]> = vec![0.0, 0.5, 1.0].into();
        let subjects = (0..n)
            .map(|i| Subject {
                id: format!("s{i}"),
                y: 1.0 + i as f64,
                delta: i % 3 != 0,
                predictors: vec![
                    SampledFunction::new(grid.clone(), vec![1.0, i as f64, 0.5]).unwrap(),
                ],
            })
            .collect();
        Cohort::new("toy", subjects).unwrap()
    }

    #[test]
    fn split_sizes_and_partition() {
        let c = toy_cohort(100);
        let (a, b) = split_half(&c, 7).unwrap();
        assert_eq!((a.n(), b.n()), (50, 50));
        let c = toy_cohort(101);
        let (a, b) = split_half(&c, 7).unwrap();
        assert_eq!((a.n(), b.n()), (50, 51));
        let mut ids: Vec<_> = a.subjects().iter().chain(b.subjects()).map(|s| s.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 101);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let c = toy_cohort(30);
        assert_eq!(split_half(&c, 11).unwrap(), split_half(&c, 11).unwrap());
        assert_ne!(split_half(&c, 11).unwrap().0, split_half(&c, 12).unwrap().0);
    }

    #[test]
    fn split_needs_four() {
        assert!(matches!(
            split_half(&toy_cohort(3), 1),
            Err(Error::InsufficientData(_))
        ));
    }

    fn parse(obs: &str, fun: &str) -> Result<Cohort> {
        parse_cohort(
            obs.as_bytes(),
            Path::new("obs.csv"),
            fun.as_bytes(),
            Path::new("fun.csv"),
            "t",
        )
    }

    const FUN2: &str = "subject_id,predictor,s,value\n\
        a,1,0,1\na,1,1,2\na,2,0,3\na,2,1,4\n";

    #[test]
    fn parses_minimal_tables() {
        let c = parse("subject_id,y,delta\na,2.5,1\n", FUN2).unwrap();
        assert_eq!(c.n(), 1);
        assert_eq!(c.q(), 2);
        assert_eq!(c.subjects()[0].predictors[1].values(), &[3.0, 4.0]);
    }

    #[test]
    fn rejects_bad_rows() {
        let e = parse("subject_id,y,delta\na,-1,1\n", FUN2).unwrap_err();
        assert!(e.to_string().contains("row 2"), "{e}");
        assert!(parse("subject_id,y,delta\na,1,2\n", FUN2).is_err());
        assert!(parse("subject_id,time,delta\na,1,1\n", FUN2).is_err());
        let missing = "subject_id,predictor,s,value\na,1,0,1\na,1,1,2\nb,1,0,1\nb,1,1,1\nb,2,0,1\nb,2,1,1\n";
        let e = parse("subject_id,y,delta\na,1,1\nb,1,0\n", missing).unwrap_err();
        assert!(e.to_string().contains("missing predictor 2"), "{e}");
        let dup = "subject_id,predictor,s,value\na,1,0,1\na,1,0,2\n";
        let e = parse("subject_id,y,delta\na,1,1\n", dup).unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
        let grids = "subject_id,predictor,s,value\na,1,0,1\na,1,1,2\nb,1,0,1\nb,1,0.5,1\n";
        assert!(parse("subject_id,y,delta\na,1,1\nb,1,0\n", grids).is_err());
    }
}

//! Configuration, CSV ingestion and report files for the command-line tool.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate_set, EstimateConfig, EstimatorKind};
use crate::simulation::{self, CaseSpec, SimulationOutput};
use crate::solver::{cross_validate_k, default_grid, Block, CvResult};
use crate::types::{CombinedDataset, ModelSpec, OutcomeKind, PenaltyConfig, UnitRecord};
use crate::variance::AteReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Estimate,
    Simulate,
    CvTrace,
}

/// Input column names. An empty covariate list means "every other column".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub i_a: String,
    pub i_b: String,
    pub weight: String,
    pub treatment: String,
    pub outcome: String,
    pub covariates: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            i_a: "i_a".into(),
            i_b: "i_b".into(),
            weight: "weight".into(),
            treatment: "t".into(),
            outcome: "y".into(),
            covariates: Vec::new(),
        }
    }
}

impl ColumnMap {
    fn roles(&self) -> [&str; 5] {
        [&self.i_a, &self.i_b, &self.weight, &self.treatment, &self.outcome]
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: Vec<&str> = Vec::new();
        for name in self.roles().into_iter().chain(self.covariates.iter().map(String::as_str)) {
            if seen.contains(&name) {
                return Err(Error::Config(format!("column '{name}' mapped twice")));
            }
            seen.push(name);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub columns: ColumnMap,
    /// Outcome scale; guessed from the outcome column when absent.
    pub outcome_kind: Option<OutcomeKind>,
    pub pop_size: Option<usize>,
    pub model: Option<ModelSpec>,
    pub penalty: PenaltyConfig,
    pub penalized: bool,
    /// Fixed `[λ_η, λ_μ]`; cross-validation picks them otherwise.
    pub lambdas: Option<[f64; 2]>,
    pub folds: usize,
    /// `None` means the mode's default set.
    pub estimators: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub standardize: bool,
    pub case: Option<String>,
    pub reps: Option<usize>,
    pub jobs: usize,
    pub desk_scale: bool,
    /// Also write each simulated replicate as an input-format CSV.
    pub write_data: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Estimate,
            input: None,
            out: PathBuf::from("drcombine-out"),
            columns: ColumnMap::default(),
            outcome_kind: None,
            pop_size: None,
            model: None,
            penalty: PenaltyConfig::default(),
            penalized: true,
            lambdas: None,
            folds: 5,
            estimators: None,
            seed: None,
            standardize: false,
            case: None,
            reps: None,
            jobs: 1,
            desk_scale: false,
            write_data: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.columns.validate()?;
        self.penalty.validate()?;
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        match self.mode {
            Mode::Simulate => {
                if self.seed.is_none() {
                    return Err(Error::Config("simulate needs a seed".into()));
                }
                if self.case.is_none() {
                    return Err(Error::Config("simulate needs a case id".into()));
                }
            }
            Mode::Estimate | Mode::CvTrace => {
                if self.input.is_none() {
                    return Err(Error::Config("an input CSV is required".into()));
                }
            }
        }
        Ok(())
    }

    fn estimator_kinds(&self, default: &[EstimatorKind]) -> Result<Vec<EstimatorKind>> {
        let kinds = match &self.estimators {
            None => default.to_vec(),
            Some(names) => names.iter().filter(|s| !s.trim().is_empty()).map(|s| s.parse()).collect::<Result<Vec<_>>>()?,
        };
        if kinds.is_empty() {
            return Err(Error::Config("nothing to do".into()));
        }
        Ok(kinds)
    }

    fn estimate_config(&self) -> EstimateConfig {
        EstimateConfig {
            penalized: self.penalized,
            penalty: self.penalty,
            spec: self.model,
            folds: self.folds,
            seed: self.seed.unwrap_or(0),
            lambdas: self.lambdas.map(|l| (l[0], l[1])),
            ..EstimateConfig::default()
        }
    }
}

/// Centering and scaling applied to one covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub dataset: CombinedDataset,
    pub covariates: Vec<String>,
    pub transforms: Vec<ColumnTransform>,
}

fn parse_num(cell: &str, line: u64, col: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| Error::InvalidData(format!("line {line}: column '{col}': non-numeric value '{cell}'")))
}

fn parse_flag(cell: &str, line: u64, col: &str) -> Result<bool> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" | "" => Ok(false),
        _ => Err(Error::InvalidData(format!("line {line}: column '{col}': expected 0/1, got '{cell}'"))),
    }
}

fn opt_num(cell: &str, line: u64, col: &str) -> Result<Option<f64>> {
    if cell.trim().is_empty() {
        Ok(None)
    } else {
        parse_num(cell, line, col).map(Some)
    }
}

/// Reads a combined-sample CSV; the intercept column is prepended.
pub fn ingest_csv(path: &Path, columns: &ColumnMap, standardize: bool, outcome_kind: Option<OutcomeKind>, pop_size: Option<usize>) -> Result<Ingested> {
    columns.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers().map_err(|e| Error::InvalidData(format!("line 1: {e}")))?.iter().map(|s| s.trim().to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::InvalidData(format!("line 1: missing column '{name}'")))
    };
    let [ia, ib, iw, it, iy] = [find(&columns.i_a)?, find(&columns.i_b)?, find(&columns.weight)?, find(&columns.treatment)?, find(&columns.outcome)?];
    let covariates: Vec<String> = if columns.covariates.is_empty() {
        let roles = columns.roles();
        header.iter().filter(|h| !roles.contains(&h.as_str())).cloned().collect()
    } else {
        columns.covariates.clone()
    };
    if covariates.is_empty() {
        return Err(Error::Config("no covariate columns".into()));
    }
    let ix: Vec<usize> = covariates.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::InvalidData(e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != header.len() {
            return Err(Error::InvalidData(format!("line {line}: expected {} fields, found {}", header.len(), row.len())));
        }
        let mut x = Vec::with_capacity(ix.len() + 1);
        x.push(1.0);
        for (&k, name) in ix.iter().zip(&covariates) {
            x.push(parse_num(&row[k], line, name)?);
        }
        let t = if row[it].trim().is_empty() { None } else { Some(parse_flag(&row[it], line, &columns.treatment)?) };
        let y = opt_num(&row[iy], line, &columns.outcome)?;
        ys.extend(y);
        records.push(UnitRecord {
            i_a: parse_flag(&row[ia], line, &columns.i_a)?,
            i_b: parse_flag(&row[ib], line, &columns.i_b)?,
            weight_a: opt_num(&row[iw], line, &columns.weight)?,
            x,
            t,
            y,
        });
    }
    if records.is_empty() {
        return Err(Error::InvalidData(format!("{}: no data rows", path.display())));
    }

    let mut transforms = Vec::new();
    if standardize {
        let n = records.len() as f64;
        for (k, name) in covariates.iter().enumerate() {
            let col: Vec<f64> = records.iter().map(|r| r.x[k + 1]).collect();
            if col.iter().all(|&v| v == 0.0 || v == 1.0) {
                continue;
            }
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if !(sd > 0.0) {
                continue;
            }
            for r in &mut records {
                r.x[k + 1] = (r.x[k + 1] - mean) / sd;
            }
            transforms.push(ColumnTransform { column: name.clone(), mean, sd });
        }
    }

    let kind = outcome_kind.unwrap_or(if !ys.is_empty() && ys.iter().all(|&v| v == 0.0 || v == 1.0) { OutcomeKind::Binary } else { OutcomeKind::Continuous });
    Ok(Ingested { dataset: CombinedDataset::new(records, pop_size, kind), covariates, transforms })
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v}"))
}

/// Writes a dataset in the input layout with default column names; floats
/// use the shortest representation that parses back exactly.
pub fn write_dataset_csv(ds: &CombinedDataset, path: &Path) -> Result<()> {
    let mut out = String::from("i_a,i_b,weight,t,y");
    for k in 1..ds.d {
        write!(out, ",x{k}").unwrap();
    }
    out.push('\n');
    for r in &ds.records {
        write!(out, "{},{},{},{},{}", r.i_a as u8, r.i_b as u8, cell(r.weight_a), r.t.map_or(String::new(), |t| (t as u8).to_string()), cell(r.y)).unwrap();
        for v in &r.x[1..] {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateFailure {
    pub estimator: EstimatorKind,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOutput {
    pub input: String,
    pub n_records: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub d: usize,
    pub covariates: Vec<String>,
    pub standardization: Vec<ColumnTransform>,
    pub seed: u64,
    pub reports: Vec<AteReport>,
    pub failures: Vec<EstimateFailure>,
}

fn summary_csv(reports: &[AteReport]) -> String {
    let mut s = String::from("estimator,penalized,theta_hat,se,ci_low,ci_high,n_used,N,lambda_eta,lambda_mu,support_alpha,support_tau,support_beta,support_gamma\n");
    for r in reports {
        let diag = r.diagnostics.as_ref();
        let lam = diag.and_then(|d| d.lambdas);
        let sup = diag.and_then(|d| d.support.as_ref());
        let sizes = sup.map_or([String::new(), String::new(), String::new(), String::new()], |s| {
            [s.alpha.len().to_string(), s.tau.len().to_string(), s.beta.len().to_string(), s.gamma.len().to_string()]
        });
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.estimator,
            r.penalized,
            r.theta_hat,
            r.se,
            r.ci_low,
            r.ci_high,
            r.n_used,
            r.n_pop,
            cell(lam.map(|l| l.0)),
            cell(lam.map(|l| l.1)),
            sizes.join(",")
        )
        .unwrap();
    }
    s
}

/// Aligned text table of the reports.
pub fn format_reports(reports: &[AteReport]) -> String {
    let mut s = format!("{:<18} {:>12} {:>10} {:>25}\n", "estimator", "estimate", "se", "95% CI");
    for r in reports {
        let ci = format!("({:.4}, {:.4})", r.ci_low, r.ci_high);
        writeln!(s, "{:<18} {:>12.4} {:>10.4} {:>25}", r.estimator.name(), r.theta_hat, r.se, ci).unwrap();
    }
    s
}

/// Fits the requested estimators and writes `report.json` and `summary.csv`.
///
/// Every estimator is attempted; if any fails the files still record the
/// others and the first failure is returned.
pub fn run_estimate(config: &RunConfig) -> Result<EstimateOutput> {
    config.validate()?;
    let kinds = config.estimator_kinds(&[EstimatorKind::DrCombined])?;
    let input = config.input.as_ref().expect("validated");
    let ing = ingest_csv(input, &config.columns, config.standardize, config.outcome_kind, config.pop_size)?;
    let ds = &ing.dataset;
    let results = estimate_set(ds, &kinds, &config.estimate_config());
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut first_err = None;
    for (kind, r) in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => {
                log::warn!("{kind}: {e}");
                failures.push(EstimateFailure { estimator: kind, error: e.to_string() });
                first_err.get_or_insert(e);
            }
        }
    }
    let out = EstimateOutput {
        input: input.display().to_string(),
        n_records: ds.records.len(),
        n_a: ds.n_a(),
        n_b: ds.n_b(),
        d: ds.d,
        covariates: ing.covariates,
        standardization: ing.transforms,
        seed: config.seed.unwrap_or(0),
        reports,
        failures,
    };
    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("report.json"), to_json(&out)? + "\n")?;
    fs::write(config.out.join("summary.csv"), summary_csv(&out.reports))?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))
}

/// Run parameters recorded next to the metrics; excludes anything that
/// varies between otherwise identical runs, such as the thread count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub case_id: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub n_pop: usize,
    pub d: usize,
    #[serde(rename = "R")]
    pub reps: usize,
    pub penalized: bool,
    pub estimators: Vec<EstimatorKind>,
    pub true_theta: f64,
    pub theta_source: String,
    pub build: String,
}

pub fn build_id() -> String {
    format!("drcombine-{}", env!("CARGO_PKG_VERSION"))
}

fn opt(v: Option<f64>) -> String {
    cell(v)
}

/// Selection table (one row per coefficient block) followed by the ATE table
/// (one row per estimator), separated by a blank line.
pub fn metrics_csv(out: &SimulationOutput) -> String {
    let m = &out.metrics;
    let mut s = String::from("case,block,correctly_specified,sensitivity,specificity,mse_nonnull,mse_null\n");
    for b in &m.blocks {
        writeln!(s, "{},{},{},{},{},{},{}", m.case_id, b.block, b.correctly_specified, b.sensitivity, b.specificity, opt(b.mse_nonnull), opt(b.mse_null)).unwrap();
    }
    s.push('\n');
    s.push_str("case,estimator,successes,mean,bias,sd,mse,mean_se,coverage,coverage_low,coverage_high\n");
    for e in &m.estimators {
        writeln!(s, "{},{},{},{},{},{},{},{},{},{},{}", m.case_id, e.estimator, e.successes, e.mean, e.bias, e.sd, e.mse, e.mean_se, e.coverage, e.coverage_low, e.coverage_high).unwrap();
    }
    s
}

/// Runs a simulation case and writes `metrics.csv`, `provenance.json` and
/// `replicates.jsonl`.
pub fn run_simulate(config: &RunConfig) -> Result<SimulationOutput> {
    config.validate()?;
    let mut spec = CaseSpec::from_id(config.case.as_deref().expect("validated"))?;
    if config.desk_scale {
        spec = spec.desk_scale();
    }
    let reps = config.reps.unwrap_or(if config.desk_scale { 100 } else { 500 });
    let kinds = config.estimator_kinds(&spec.default_estimators())?;
    let seed = config.seed.expect("validated");
    log::info!("case {} N={} R={reps} jobs={}", spec.case_id, spec.n_pop, config.jobs);
    let out = simulation::run_replications(&spec, reps, &kinds, seed, config.jobs, &config.estimate_config())?;
    let prov = Provenance {
        case_id: spec.case_id.clone(),
        seed,
        n_pop: spec.n_pop,
        d: spec.d,
        reps,
        penalized: config.penalized,
        estimators: kinds,
        true_theta: spec.true_theta,
        theta_source: spec.theta_source.clone(),
        build: build_id(),
    };
    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("metrics.csv"), metrics_csv(&out))?;
    fs::write(config.out.join("provenance.json"), to_json(&prov)? + "\n")?;
    let mut lines = String::new();
    for r in &out.results {
        lines.push_str(&serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?);
        lines.push('\n');
    }
    fs::write(config.out.join("replicates.jsonl"), lines)?;
    if config.write_data {
        for r in 0..reps {
            let ds = simulation::generate_dataset(&spec, simulation::replicate_seed(seed, r))?;
            write_dataset_csv(&ds, &config.out.join(format!("replicate_{r}.csv")))?;
        }
    }
    Ok(out)
}

pub fn cv_trace_csv(cv: &CvResult) -> String {
    let mut s = String::from("block,lambda,mean_loss");
    for f in 0..cv.folds {
        write!(s, ",fold_{}", f + 1).unwrap();
    }
    s.push_str(",chosen\n");
    let blocks = [("eta", &cv.grid_eta, &cv.losses_eta, &cv.fold_losses_eta, cv.chosen.0), ("mu", &cv.grid_mu, &cv.losses_mu, &cv.fold_losses_mu, cv.chosen.1)];
    for (name, grid, mean, folds, chosen) in blocks {
        for (k, lam) in grid.iter().enumerate() {
            write!(s, "{name},{lam},{}", mean[k]).unwrap();
            for f in folds {
                write!(s, ",{}", f[k]).unwrap();
            }
            writeln!(s, ",{}", *lam == chosen).unwrap();
        }
    }
    s
}

/// Cross-validates both penalty levels over the default grids and writes
/// `cv_trace.csv`.
pub fn run_cv_trace(config: &RunConfig) -> Result<CvResult> {
    config.validate()?;
    let ing = ingest_csv(config.input.as_ref().expect("validated"), &config.columns, config.standardize, config.outcome_kind, config.pop_size)?;
    let ds = &ing.dataset;
    let spec = config.model.unwrap_or_else(|| ModelSpec::for_outcome(ds.outcome_kind));
    let ge = default_grid(ds, &spec, Block::Eta)?;
    let gm = default_grid(ds, &spec, Block::Mu)?;
    let cv = cross_validate_k(ds, &spec, &ge, &gm, &config.penalty, config.seed.unwrap_or(0), config.folds)?;
    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("cv_trace.csv"), cv_trace_csv(&cv))?;
    Ok(cv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    const SMALL: &str = "i_a,i_b,weight,t,y,x1,x2\n1,0,50,,,0.5,1\n0,1,,1,2.5,1.5,0\n0,1,,0,1.0,-1,1\n";

    #[test]
    fn three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", SMALL);
        let ing = ingest_csv(&p, &ColumnMap::default(), false, None, None).unwrap();
        assert_eq!(ing.dataset.records.len(), 3);
        assert_eq!(ing.dataset.d, 3);
        assert_eq!(ing.dataset.records[0].weight_a, Some(50.0));
        assert_eq!(ing.dataset.records[1].t, Some(true));
        assert_eq!(ing.dataset.outcome_kind, OutcomeKind::Continuous);
    }

    #[test]
    fn standardized_moments() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", SMALL);
        let ing = ingest_csv(&p, &ColumnMap::default(), true, None, None).unwrap();
        // x2 is binary and left alone
        assert_eq!(ing.transforms.len(), 1);
        let col: Vec<f64> = ing.dataset.records.iter().map(|r| r.x[1]).collect();
        let m = col.iter().sum::<f64>() / 3.0;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_cell_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "i_a,i_b,weight,t,y,x1\n1,0,50,,,0.5\n0,1,,1,abc,1\n");
        let e = ingest_csv(&p, &ColumnMap::default(), false, None, None).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        assert_eq!(e.exit_code(), 3);
        let p = write(dir.path(), "b.csv", "i_a,i_b,weight,t,y,x1\n1,0,50,,,0.5,9\n");
        assert!(ingest_csv(&p, &ColumnMap::default(), false, None, None).unwrap_err().to_string().contains("line 2"));
        let p = write(dir.path(), "c.csv", "i_a,i_b,w,t,y,x1\n1,0,50,,,0.5\n");
        assert!(ingest_csv(&p, &ColumnMap::default(), false, None, None).unwrap_err().to_string().contains("'weight'"));
    }

    #[test]
    fn outcome_in_sample_a_is_kept() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "i_a,i_b,weight,t,y,x1\n1,0,50,1,3.0,0.5\n0,1,,1,2.5,1.5\n");
        let ing = ingest_csv(&p, &ColumnMap::default(), false, None, None).unwrap();
        assert_eq!(ing.dataset.records[0].y, Some(3.0));
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let x = vec![1.0, 0.1 + 0.2, -1.0 / 3.0, 1e-300, 123456789.12345678];
        let ds = CombinedDataset::new(vec![UnitRecord::sample_a(1.0 / 0.02, x.clone()), UnitRecord::sample_b(x.clone(), true, std::f64::consts::PI)], Some(100), OutcomeKind::Continuous);
        let p = dir.path().join("r.csv");
        write_dataset_csv(&ds, &p).unwrap();
        let back = ingest_csv(&p, &ColumnMap::default(), false, Some(OutcomeKind::Continuous), Some(100)).unwrap().dataset;
        assert_eq!(back, ds);
    }

    #[test]
    fn config_rules() {
        let c = RunConfig::from_toml("mode = \"simulate\"\ncase = \"1\"\n").unwrap();
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = RunConfig::from_toml("[columns]\ni_a = \"x\"\ncovariates = [\"x\"]\n").unwrap();
        assert!(c.validate().is_err());
        c.columns = ColumnMap::default();
        c.input = Some("f.csv".into());
        c.estimators = Some(vec![]);
        assert!(c.validate().is_ok());
        assert_eq!(c.estimator_kinds(&[]).unwrap_err(), Error::Config("nothing to do".into()));
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }
}

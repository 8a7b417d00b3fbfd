//! Seed aggregation, learning-curve convergence, the paired t-test and
//! report emission.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{csv_field, stable_sum, MalorReport};
use crate::templates::Experiment;

/// Significance level for the paired t-test.
pub const ALPHA: f64 = 0.01;
pub const DEFAULT_CONVERGENCE_WINDOW: usize = 10;
/// A curve point is "near the minimum" when within this factor of it.
pub const CONVERGENCE_FACTOR: f64 = 1.1;
/// Run files end with this suffix.
pub const RUN_SUFFIX: &str = ".run.json";

const BETA_TOLERANCE: f64 = 1e-10;
const BETA_MAX_ITER: usize = 500;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("differences have zero variance but mean {mean}")]
    DegenerateVariance { mean: f64 },
    #[error("paired samples need equal lengths >= 2 (before {before}, after {after})")]
    UnpairedSamples { before: usize, after: usize },
    #[error("p_male + p_female must be positive (got {p_male} + {p_female})")]
    ZeroMass { p_male: f64, p_female: f64 },
    #[error("invalid learning curve: {0}")]
    InvalidCurve(String),
    #[error("{path}: {reason}")]
    BadRunFile { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    pub n: usize,
}

pub fn aggregate_seeds(runs: &[SeedRun]) -> Result<SeedSummary, AnalysisError> {
    if runs.len() < 2 {
        return Err(AnalysisError::TooFewRuns(runs.len()));
    }
    let values: Vec<f64> = runs.iter().map(|r| r.value).collect();
    let (mean, std) = mean_std(&values)?;
    Ok(SeedSummary {
        mean,
        std,
        n: runs.len(),
    })
}

/// Mean and sample std of at least two finite values. Equal values give
/// exactly their common value and 0.
fn mean_std(values: &[f64]) -> Result<(f64, f64), AnalysisError> {
    if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite(v));
    }
    let n = values.len() as f64;
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], 0.0));
    }
    let mean = stable_sum(&mut values.to_vec()) / n;
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    Ok((mean, (stable_sum(&mut sq) / (n - 1.0)).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: u32,
    pub malor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CurvePoint>", into = "Vec<CurvePoint>")]
pub struct LearningCurve {
    points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn new(points: Vec<CurvePoint>) -> Result<Self, AnalysisError> {
        if points.is_empty() {
            return Err(AnalysisError::InvalidCurve("empty curve".into()));
        }
        if points.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
            return Err(AnalysisError::InvalidCurve("epochs must strictly increase".into()));
        }
        if let Some(p) = points.iter().find(|p| !(p.malor.is_finite() && p.malor >= 0.0)) {
            return Err(AnalysisError::InvalidCurve(format!(
                "epoch {}: MALoR {} is not a finite non-negative value",
                p.epoch, p.malor
            )));
        }
        Ok(Self { points })
    }

    /// Epochs 0, 1, 2, ...
    pub fn from_values(values: &[f64]) -> Result<Self, AnalysisError> {
        Self::new(
            values
                .iter()
                .enumerate()
                .map(|(i, &malor)| CurvePoint {
                    epoch: i as u32,
                    malor,
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }
}

impl TryFrom<Vec<CurvePoint>> for LearningCurve {
    type Error = AnalysisError;

    fn try_from(points: Vec<CurvePoint>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl From<LearningCurve> for Vec<CurvePoint> {
    fn from(c: LearningCurve) -> Self {
        c.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub first_epoch_within_10pct: Option<u32>,
    pub min: f64,
    pub tail_mean: f64,
    /// Window actually used, after clamping to `1..=len`.
    pub window: usize,
}

/// Converged iff the mean of the last `window` points is within 10% of the
/// curve minimum.
pub fn convergence(curve: &LearningCurve, window: usize) -> Convergence {
    let pts = &curve.points;
    let window = window.clamp(1, pts.len());
    let min = pts.iter().map(|p| p.malor).fold(f64::INFINITY, f64::min);
    let threshold = CONVERGENCE_FACTOR * min;
    let mut tail: Vec<f64> = pts[pts.len() - window..].iter().map(|p| p.malor).collect();
    let tail_mean = stable_sum(&mut tail) / window as f64;
    Convergence {
        converged: tail_mean <= threshold,
        first_epoch_within_10pct: pts.iter().find(|p| p.malor <= threshold).map(|p| p.epoch),
        min,
        tail_mean,
        window,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSamples {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

impl PairedSamples {
    pub fn new(before: Vec<f64>, after: Vec<f64>) -> Result<Self, AnalysisError> {
        if before.len() != after.len() || before.len() < 2 {
            return Err(AnalysisError::UnpairedSamples {
                before: before.len(),
                after: after.len(),
            });
        }
        if let Some(&v) = before.iter().chain(&after).find(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite(v));
        }
        Ok(Self { before, after })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p_two_sided: f64,
}

/// Paired t-test on `before - after`.
pub fn paired_t_test(samples: &PairedSamples) -> Result<TTestResult, AnalysisError> {
    let n = samples.before.len();
    if n < 2 || samples.after.len() != n {
        return Err(AnalysisError::UnpairedSamples {
            before: n,
            after: samples.after.len(),
        });
    }
    let diffs: Vec<f64> = samples
        .before
        .iter()
        .zip(&samples.after)
        .map(|(b, a)| b - a)
        .collect();
    let (mean, sd) = mean_std(&diffs)?;
    let df = n - 1;
    if sd == 0.0 {
        if mean == 0.0 {
            return Ok(TTestResult {
                t: 0.0,
                df,
                p_two_sided: 1.0,
            });
        }
        return Err(AnalysisError::DegenerateVariance { mean });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(TTestResult {
        t,
        df,
        p_two_sided: t_two_sided_p(t, df as f64),
    })
}

pub fn significant(p: f64) -> bool {
    p < ALPHA
}

/// P(|T| >= |t|) for Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// I_x(a, b) via the continued fraction (modified Lentz), accurate to
/// about 1e-10.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < BETA_TOLERANCE {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// p_male / (p_male + p_female); 0.5 is neutral.
pub fn gender_share(p_male: f64, p_female: f64) -> Result<f64, AnalysisError> {
    for v in [p_male, p_female] {
        if !v.is_finite() {
            return Err(AnalysisError::NonFinite(v));
        }
    }
    if p_male < 0.0 || p_female < 0.0 || p_male + p_female <= 0.0 {
        return Err(AnalysisError::ZeroMass { p_male, p_female });
    }
    Ok(p_male / (p_male + p_female))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Before,
    After,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Before => "before",
            Stage::After => "after",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// The experiment cannot be run on this model (multi-token names).
    #[serde(rename = "N/A")]
    NotApplicable,
}

/// Which word was masked when the share was measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Gendered term masked, occupation present.
    Gender,
    /// Occupation masked, gendered term present.
    Occupation,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Gender => "gender",
            Direction::Occupation => "occupation",
        }
    }
}

/// Output of one audit of one model, experiment, stage and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalorRun {
    pub model: String,
    pub experiment: Experiment,
    pub stage: Stage,
    #[serde(default)]
    pub seed: Option<u64>,
    pub status: RunStatus,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub report: Option<MalorReport>,
    /// Male share per occupation, gendered term masked.
    #[serde(default)]
    pub shares: BTreeMap<String, f64>,
    /// Male share per occupation, occupation masked.
    #[serde(default)]
    pub reversed_shares: BTreeMap<String, f64>,
    #[serde(default)]
    pub reversed_excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRun {
    pub model: String,
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: Option<u64>,
    pub points: LearningCurve,
}

/// Downstream accuracies of paired seeds before and after debiasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRun {
    pub model: String,
    pub task: String,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RunFile {
    Malor(MalorRun),
    Curve(CurveRun),
    Accuracy(AccuracyRun),
}

impl RunFile {
    pub fn save(&self, path: &Path) -> Result<(), AnalysisError> {
        write_file(path, &to_pretty_json(self))
    }
}

/// Reads every `*.run.json` below `dir`, in path order.
pub fn load_runs(dir: &Path) -> Result<Vec<RunFile>, AnalysisError> {
    let mut paths = Vec::new();
    collect_run_paths(dir, &mut paths)?;
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let raw = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&raw).map_err(|e| AnalysisError::BadRunFile {
                path: p.clone(),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn collect_run_paths(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), AnalysisError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_run_paths(&path, out)?;
        } else if path.to_string_lossy().ends_with(RUN_SUFFIX) {
            out.push(path);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub n: usize,
    pub mean: f64,
    /// Absent with a single run.
    pub std: Option<f64>,
    pub seeds: Vec<Option<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalorRow {
    pub model: String,
    pub experiment: Experiment,
    pub status: RunStatus,
    pub before: Option<StageSummary>,
    pub after: Option<StageSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub model: String,
    pub experiment: Experiment,
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub convergence: Convergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub model: String,
    pub task: String,
    pub n: usize,
    pub alpha: f64,
    #[serde(flatten)]
    pub outcome: TestOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum TestOutcome {
    Tested {
        t: f64,
        df: usize,
        p_two_sided: f64,
        significant: bool,
    },
    DegenerateVariance {
        mean_difference: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub malor: Vec<MalorRow>,
    pub curves: Vec<CurveRow>,
    pub tests: Vec<TestRow>,
}

pub const REPORT_CSV_HEADER: &str =
    "model,experiment,status,before_mean,before_std,before_n,after_mean,after_std,after_n";

type GroupKey = (String, Experiment);

/// Builds the report from run files. Input order does not matter.
pub fn build_report(runs: &[RunFile], window: usize) -> Result<Report, AnalysisError> {
    let mut malor: BTreeMap<GroupKey, Vec<&MalorRun>> = BTreeMap::new();
    let mut curves = Vec::new();
    let mut tests = Vec::new();
    for run in runs {
        match run {
            RunFile::Malor(m) => malor
                .entry((m.model.clone(), m.experiment))
                .or_default()
                .push(m),
            RunFile::Curve(c) => curves.push(CurveRow {
                model: c.model.clone(),
                experiment: c.experiment,
                seed: c.seed,
                convergence: convergence(&c.points, window),
            }),
            RunFile::Accuracy(a) => tests.push(test_row(a)?),
        }
    }
    curves.sort_by(|a, b| (&a.model, a.experiment, a.seed).cmp(&(&b.model, b.experiment, b.seed)));
    tests.sort_by(|a, b| (&a.model, &a.task).cmp(&(&b.model, &b.task)));

    let malor = malor
        .into_iter()
        .map(|((model, experiment), group)| {
            let na = group.iter().any(|m| m.status == RunStatus::NotApplicable);
            Ok(MalorRow {
                model,
                experiment,
                status: if na { RunStatus::NotApplicable } else { RunStatus::Ok },
                before: stage_summary(&group, Stage::Before)?,
                after: stage_summary(&group, Stage::After)?,
            })
        })
        .collect::<Result<_, AnalysisError>>()?;
    Ok(Report {
        malor,
        curves,
        tests,
    })
}

fn stage_summary(group: &[&MalorRun], stage: Stage) -> Result<Option<StageSummary>, AnalysisError> {
    let mut runs: Vec<(Option<u64>, f64)> = group
        .iter()
        .filter(|m| m.stage == stage && m.status == RunStatus::Ok)
        .filter_map(|m| m.report.as_ref().map(|r| (m.seed, r.malor)))
        .collect();
    if runs.is_empty() {
        return Ok(None);
    }
    runs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let values: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let (mean, std) = if values.len() == 1 {
        (values[0], None)
    } else {
        let (m, s) = mean_std(&values)?;
        (m, Some(s))
    };
    Ok(Some(StageSummary {
        n: values.len(),
        mean,
        std,
        seeds: runs.iter().map(|r| r.0).collect(),
    }))
}

fn test_row(a: &AccuracyRun) -> Result<TestRow, AnalysisError> {
    let samples = PairedSamples::new(a.before.clone(), a.after.clone())?;
    let outcome = match paired_t_test(&samples) {
        Ok(r) => TestOutcome::Tested {
            t: r.t,
            df: r.df,
            p_two_sided: r.p_two_sided,
            significant: significant(r.p_two_sided),
        },
        Err(AnalysisError::DegenerateVariance { mean }) => TestOutcome::DegenerateVariance {
            mean_difference: mean,
        },
        Err(e) => return Err(e),
    };
    Ok(TestRow {
        model: a.model.clone(),
        task: a.task.clone(),
        n: a.before.len(),
        alpha: ALPHA,
        outcome,
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        to_pretty_json(self)
    }

    /// One row per model and experiment, MALoR at 4 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for row in &self.malor {
            let cols = |s: &Option<StageSummary>| match (row.status, s) {
                (RunStatus::NotApplicable, _) => ["N/A".to_string(), String::new(), String::new()],
                (_, Some(s)) => [
                    format!("{:.4}", s.mean),
                    s.std.map(|v| format!("{v:.4}")).unwrap_or_default(),
                    s.n.to_string(),
                ],
                (_, None) => [String::new(), String::new(), "0".to_string()],
            };
            let status = match row.status {
                RunStatus::Ok => "ok",
                RunStatus::NotApplicable => "N/A",
            };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&row.model),
                row.experiment,
                status,
                cols(&row.before).join(","),
                cols(&row.after).join(",")
            ));
        }
        out
    }
}

/// Makes a model name safe for use in a file name.
pub fn file_stem(model: &str) -> String {
    model
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

/// Writes `report.json`, `report.csv`, `curves/*.csv` and `shares/*.csv`
/// under `out`. Returns the written paths relative to `out`, sorted.
pub fn emit_report(runs: &[RunFile], out: &Path, window: usize) -> Result<(Report, Vec<String>), AnalysisError> {
    let report = build_report(runs, window)?;
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    files.insert("report.json".into(), report.to_json());
    files.insert("report.csv".into(), report.to_csv());

    let mut curve_rows: BTreeMap<String, Vec<(Option<u64>, CurvePoint)>> = BTreeMap::new();
    let mut share_rows: BTreeMap<String, BTreeMap<(Direction, String), Vec<f64>>> = BTreeMap::new();
    for run in runs {
        match run {
            RunFile::Curve(c) => {
                let name = format!("curves/{}_{}.csv", file_stem(&c.model), c.experiment);
                let rows = curve_rows.entry(name).or_default();
                rows.extend(c.points.points().iter().map(|p| (c.seed, *p)));
            }
            RunFile::Malor(m) if m.status == RunStatus::Ok => {
                let name = format!(
                    "shares/{}_{}_{}.csv",
                    file_stem(&m.model),
                    m.experiment,
                    m.stage.as_str()
                );
                let acc = share_rows.entry(name).or_default();
                for (dir, shares) in [(Direction::Gender, &m.shares), (Direction::Occupation, &m.reversed_shares)] {
                    for (occ, &s) in shares {
                        acc.entry((dir, occ.clone())).or_default().push(s);
                    }
                }
            }
            _ => {}
        }
    }
    for (name, mut rows) in curve_rows {
        rows.sort_by(|a, b| (a.0, a.1.epoch).cmp(&(b.0, b.1.epoch)));
        let mut csv = String::from("seed,epoch,malor\n");
        for (seed, p) in rows {
            let seed = seed.map(|s| s.to_string()).unwrap_or_default();
            csv.push_str(&format!("{seed},{},{:.4}\n", p.epoch, p.malor));
        }
        files.insert(name, csv);
    }
    for (name, acc) in share_rows {
        let mut csv = String::from("direction,occupation,male_share,n\n");
        for ((dir, occ), mut v) in acc {
            let n = v.len();
            let mean = stable_sum(&mut v) / n as f64;
            csv.push_str(&format!("{},{},{mean:.4},{n}\n", dir.as_str(), csv_field(&occ)));
        }
        files.insert(name, csv);
    }

    for (name, content) in &files {
        write_file(&out.join(name), content)?;
    }
    Ok((report, files.into_keys().collect()))
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    // Serializing plain data with string keys cannot fail.
    let mut s = serde_json::to_string_pretty(value).expect("serializable report data");
    s.push('\n');
    s
}

fn write_file(path: &Path, content: &str) -> Result<(), AnalysisError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, content).map_err(io_err(path))
}

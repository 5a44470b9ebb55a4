//! Benchmark runner: simulate trials, fit every model over its grid, score,
//! and aggregate across trials.
//!
//! Work is split into cells, one per (trial, subject count, model, grid
//! point). A cell's rows are written to `cells/<hash>.csv` under the output
//! directory, where the hash covers everything that determines the cell's
//! result, so an interrupted sweep can be resumed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::MultiSubjectDataset;
use crate::error::{param, Error, Result};
use crate::geometry::{Geometry, Mesh};
use crate::metrics::evaluate;
use crate::rng::mix_seed;
use crate::simulate::{simulate, SimConfig, Simulation};
use crate::solvers::{
    group_lasso_lambda_max, lasso_lambda_max, solve_dirty, solve_group_lasso, solve_lasso_with,
    solve_mtw, solve_mwe, CdOptions, MWEConfig,
};

/// Bumped whenever a change alters cell results, so old cells are not reused.
const CELL_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometrySpec {
    /// Vertices per side of the planar grid mesh.
    pub grid: [usize; 2],
    pub spacing_cm: f64,
    pub n_labels: usize,
    /// OFF mesh to use instead of the grid.
    pub mesh_path: Option<PathBuf>,
    pub label_seed: u64,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            grid: [20, 10],
            spacing_cm: 0.5,
            n_labels: 10,
            mesh_path: None,
            label_seed: 0,
        }
    }
}

impl GeometrySpec {
    pub fn build(&self) -> Result<Geometry> {
        let mesh = match &self.mesh_path {
            Some(path) => Mesh::load_off(path)?,
            None => Mesh::grid(self.grid[0], self.grid[1], self.spacing_cm)?,
        };
        Geometry::new(mesh, self.n_labels, self.label_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Independent Lasso per subject.
    Lasso,
    GroupLasso,
    Dirty,
    Mwe,
    Mtw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadfieldMode {
    Shared,
    Individual,
}

/// A model and its grid. `lambda` and `lambda_specific` are fractions of
/// the model's critical value, `epsilon` and `gamma` fractions of the median
/// off-diagonal cost, `mu` a fraction of `S * lambda_max / gamma`. Empty
/// lists fall back to the defaults of [`ModelSpec::with_defaults`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub kind: ModelKind,
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub lambda_specific: Vec<f64>,
    #[serde(default)]
    pub mu: Vec<f64>,
    #[serde(default)]
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub gamma: Vec<f64>,
}

fn default_lambda() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, kind: ModelKind) -> Self {
        Self {
            name: name.into(),
            kind,
            lambda: Vec::new(),
            lambda_specific: Vec::new(),
            mu: Vec::new(),
            epsilon: Vec::new(),
            gamma: Vec::new(),
        }
    }

    /// Fills empty grids: `lambda` 0.1..0.9, `mu` {0.03, 0.1, 0.3},
    /// `epsilon` {0.1}, `gamma` {1}, `lambda_specific` {0.3, 0.5, 0.7}.
    pub fn with_defaults(&self) -> Self {
        let mut m = self.clone();
        let fill = |v: &mut Vec<f64>, d: Vec<f64>| {
            if v.is_empty() {
                *v = d;
            }
        };
        fill(&mut m.lambda, default_lambda());
        match m.kind {
            ModelKind::Dirty => fill(&mut m.lambda_specific, vec![0.3, 0.5, 0.7]),
            ModelKind::Mwe | ModelKind::Mtw => {
                fill(&mut m.mu, vec![0.03, 0.1, 0.3]);
                fill(&mut m.epsilon, vec![0.1]);
                fill(&mut m.gamma, vec![1.0]);
            }
            _ => {}
        }
        m
    }

    /// Cartesian product of the grids that apply to this model.
    pub fn grid(&self) -> Vec<GridPoint> {
        let m = self.with_defaults();
        let opt = |v: &[f64], used: bool| -> Vec<Option<f64>> {
            if used {
                v.iter().copied().map(Some).collect()
            } else {
                vec![None]
            }
        };
        let ot = matches!(m.kind, ModelKind::Mwe | ModelKind::Mtw);
        let mut out = Vec::new();
        for &lambda in &m.lambda {
            for &lambda_specific in &opt(&m.lambda_specific, m.kind == ModelKind::Dirty) {
                for &mu in &opt(&m.mu, ot) {
                    for &epsilon in &opt(&m.epsilon, ot) {
                        for &gamma in &opt(&m.gamma, ot) {
                            out.push(GridPoint {
                                lambda,
                                lambda_specific,
                                mu,
                                epsilon,
                                gamma,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub lambda_specific: Option<f64>,
    pub mu: Option<f64>,
    pub epsilon: Option<f64>,
    pub gamma: Option<f64>,
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lambda={}", self.lambda)?;
        for (name, v) in [
            ("lambda_specific", self.lambda_specific),
            ("mu", self.mu),
            ("epsilon", self.epsilon),
            ("gamma", self.gamma),
        ] {
            if let Some(v) = v {
                write!(f, ";{name}={v}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub geometry: GeometrySpec,
    /// `n_subjects`, `seed` and `shared_leadfield` are set per cell.
    pub sim: SimConfig,
    pub models: Vec<ModelSpec>,
    pub trials: usize,
    pub subject_counts: Vec<usize>,
    pub leadfield_mode: LeadfieldMode,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    /// Estimate entries below this fraction of the subject's largest
    /// magnitude are zeroed before scoring, for every model.
    pub support_threshold: f64,
    pub cd: CdOptions,
    /// Solver settings for the transport models; the grid fills in the
    /// regularization parameters.
    pub mwe: MWEConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            geometry: GeometrySpec::default(),
            sim: SimConfig::default(),
            models: vec![
                ModelSpec::new("lasso", ModelKind::Lasso),
                ModelSpec::new("mwe", ModelKind::Mwe),
            ],
            trials: 1,
            subject_counts: vec![2],
            leadfield_mode: LeadfieldMode::Individual,
            output_dir: None,
            seed: 0,
            support_threshold: 1e-2,
            cd: CdOptions::default(),
            mwe: MWEConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return param("trials must be at least 1");
        }
        if self.subject_counts.is_empty() || self.subject_counts.contains(&0) {
            return param("subject_counts must be nonempty and positive");
        }
        if self.models.is_empty() {
            return param("no models");
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return param("model names must be unique");
        }
        for m in &self.models {
            let m = m.with_defaults();
            for (grid, what) in [
                (&m.lambda, "lambda"),
                (&m.lambda_specific, "lambda_specific"),
                (&m.mu, "mu"),
                (&m.epsilon, "epsilon"),
                (&m.gamma, "gamma"),
            ] {
                if grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return param(format!("model {}: {what} grid must be finite and nonnegative", m.name));
                }
            }
            if m.epsilon.iter().chain(&m.gamma).any(|&v| v == 0.0) {
                return param(format!("model {}: epsilon and gamma must be positive", m.name));
            }
        }
        if !(0.0..1.0).contains(&self.support_threshold) {
            return param("support_threshold must lie in [0, 1)");
        }
        self.cd.validate()
    }

    fn sim_config(&self, trial: usize, n_subjects: usize) -> SimConfig {
        SimConfig {
            n_subjects,
            seed: trial_seed(self.seed, trial),
            shared_leadfield: self.leadfield_mode == LeadfieldMode::Shared,
            ..self.sim.clone()
        }
    }
}

/// Seed of trial `trial`. Every subject count of a trial shares it, so the
/// first subjects of a larger group reuse the draws of a smaller one.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    mix_seed(seed, trial as u64)
}

/// One row per subject of a fitted cell, or a single row with `error` set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub trial: usize,
    pub n_subjects: usize,
    pub model: String,
    pub point: String,
    pub subject: Option<usize>,
    pub auc: Option<f64>,
    pub emd_cm: Option<f64>,
    pub mse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub point: String,
    pub n_subjects: usize,
    /// Trials that produced scores.
    pub trials: usize,
    pub errors: usize,
    pub auc_mean: f64,
    pub auc_ci_low: f64,
    pub auc_ci_high: f64,
    pub emd_mean: f64,
    pub emd_ci_low: f64,
    pub emd_ci_high: f64,
    pub mse_mean: f64,
    pub mse_ci_low: f64,
    pub mse_ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub spec: ExperimentSpec,
    pub trial_seeds: Vec<u64>,
    pub cells: usize,
    pub computed: usize,
    pub resumed: usize,
    pub errors: usize,
    pub elapsed_s: f64,
    /// Fitting time of the computed cells, per model.
    pub model_seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<CellRow>,
    pub aggregate: Vec<AggregateRow>,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the experiment's output directory.
    pub output_dir: Option<PathBuf>,
    /// Reuse cell files from an earlier run.
    pub resume: bool,
}

struct Cell<'a> {
    trial: usize,
    n_subjects: usize,
    model: &'a ModelSpec,
    point: GridPoint,
}

#[derive(Serialize)]
struct CellKey<'a> {
    format: u32,
    geometry: &'a GeometrySpec,
    sim: &'a SimConfig,
    support_threshold: f64,
    cd: &'a CdOptions,
    mwe: Option<&'a MWEConfig>,
    kind: ModelKind,
    point: GridPoint,
}

impl Cell<'_> {
    fn hash(&self, spec: &ExperimentSpec) -> Result<String> {
        let sim = spec.sim_config(self.trial, self.n_subjects);
        let key = CellKey {
            format: CELL_FORMAT,
            geometry: &spec.geometry,
            sim: &sim,
            support_threshold: spec.support_threshold,
            cd: &spec.cd,
            mwe: matches!(self.model.kind, ModelKind::Mwe | ModelKind::Mtw).then_some(&spec.mwe),
            kind: self.model.kind,
            point: self.point,
        };
        let digest = Sha256::digest(serde_json::to_vec(&key)?);
        // the model name is a label, not an input, but two models with the
        // same settings still get separate files
        let name = Sha256::digest(self.model.name.as_bytes());
        Ok(digest
            .iter()
            .take(12)
            .chain(name.iter().take(4))
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    fn rows(&self, outcome: std::result::Result<Vec<[f64; 3]>, String>) -> Vec<CellRow> {
        let base = CellRow {
            trial: self.trial,
            n_subjects: self.n_subjects,
            model: self.model.name.clone(),
            point: self.point.to_string(),
            subject: None,
            auc: None,
            emd_cm: None,
            mse: None,
            error: None,
        };
        match outcome {
            Ok(scores) => scores
                .into_iter()
                .enumerate()
                .map(|(s, [auc, emd, mse])| CellRow {
                    subject: Some(s),
                    auc: Some(auc),
                    emd_cm: Some(emd),
                    mse: Some(mse),
                    ..base.clone()
                })
                .collect(),
            Err(e) => vec![CellRow {
                error: Some(e),
                ..base
            }],
        }
    }
}

/// Zeroes entries below `threshold * max |x|`.
pub fn threshold_support(x: &mut [f64], threshold: f64) {
    let top = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cut = threshold * top;
    for v in x.iter_mut() {
        if v.abs() < cut {
            *v = 0.0;
        }
    }
}

fn max_ratio(data: &MultiSubjectDataset, scale: impl Fn(&Array1<f64>) -> f64) -> f64 {
    (0..data.n_subjects())
        .map(|s| {
            let y = &data.observations()[s];
            lasso_lambda_max(y.view(), data.leadfield(s)) * scale(y)
        })
        .fold(0.0, f64::max)
}

/// Signed estimates, one per subject, for one grid point.
pub fn fit_model(
    kind: ModelKind,
    point: &GridPoint,
    data: &MultiSubjectDataset,
    geometry: &Geometry,
    spec: &ExperimentSpec,
) -> Result<Vec<Vec<f64>>> {
    let ys = data.observation_views();
    let ls = data.leadfield_views();
    let columns = |x: ndarray::Array2<f64>| -> Vec<Vec<f64>> {
        x.columns().into_iter().map(|c| c.to_vec()).collect()
    };
    match kind {
        ModelKind::Lasso => (0..data.n_subjects())
            .map(|s| {
                let lmax = lasso_lambda_max(ys[s], ls[s]);
                let fit = solve_lasso_with(ys[s], ls[s], point.lambda * lmax, &spec.cd, None)?;
                Ok(fit.x.to_vec())
            })
            .collect(),
        ModelKind::GroupLasso => {
            let lmax = group_lasso_lambda_max(&ys, &ls);
            Ok(columns(solve_group_lasso(&ys, &ls, point.lambda * lmax, &spec.cd)?.x))
        }
        ModelKind::Dirty => {
            let shared = point.lambda * group_lasso_lambda_max(&ys, &ls);
            let specific = point.lambda_specific.unwrap_or(1.0) * max_ratio(data, |_| 1.0);
            Ok(columns(solve_dirty(&ys, &ls, shared, specific, &spec.cd)?.sum()))
        }
        ModelKind::Mwe | ModelKind::Mtw => {
            let n = data.n_sensors() as f64;
            let lmax = if kind == ModelKind::Mwe {
                max_ratio(data, |y| n.sqrt() / y.dot(y).sqrt())
            } else {
                max_ratio(data, |_| 1.0)
            };
            let median = geometry.cost.median_off_diagonal();
            let gamma = point.gamma.unwrap_or(1.0) * median;
            let config = MWEConfig {
                mu: point.mu.unwrap_or(0.0) * data.n_subjects() as f64 * lmax / gamma,
                lambda: point.lambda * lmax,
                epsilon: point.epsilon.unwrap_or(0.1) * median,
                gamma,
                parallel: false,
                ..spec.mwe.clone()
            };
            let sol = if kind == ModelKind::Mwe {
                solve_mwe(data, &geometry.cost, &config)?
            } else {
                solve_mtw(data, &geometry.cost, &config)?
            };
            Ok(sol.sources.iter().map(|x| x.signed().to_vec()).collect())
        }
    }
}

fn score_cell(cell: &Cell, sim: &Simulation, geometry: &Geometry, spec: &ExperimentSpec) -> Result<Vec<[f64; 3]>> {
    let mut estimates = fit_model(cell.model.kind, &cell.point, &sim.dataset, geometry, spec)?;
    for x in &mut estimates {
        threshold_support(x, spec.support_threshold);
    }
    let truths: Vec<Vec<f64>> = sim.truth.sources.iter().map(|x| x.to_vec()).collect();
    let report = evaluate(&estimates, &truths, &geometry.cost)?;
    Ok(report.per_subject.iter().map(|s| [s.auc, s.emd, s.mse]).collect())
}

fn write_rows(path: &Path, rows: &[CellRow]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut out = csv::Writer::from_path(&tmp)?;
        for r in rows {
            out.serialize(r)?;
        }
        out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<CellRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<CellRow>, _>>()?;
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Runs every cell of the sweep. With an output directory, writes
/// `cells/`, `results.csv`, `aggregate.csv` and `manifest.json`.
pub fn run_experiment(spec: &ExperimentSpec, options: &RunOptions) -> Result<ExperimentReport> {
    spec.validate()?;
    let start = Instant::now();
    let geometry = spec.geometry.build()?;
    let output_dir = options.output_dir.clone().or_else(|| spec.output_dir.clone());
    let cell_dir = output_dir.as_ref().map(|d| d.join("cells"));
    if let Some(dir) = &cell_dir {
        fs::create_dir_all(dir)?;
    }

    let mut sims = BTreeMap::new();
    for trial in 0..spec.trials {
        for &s in &spec.subject_counts {
            let config = spec.sim_config(trial, s);
            config.validate(geometry.n_sources())?;
            sims.insert((trial, s), config);
        }
    }
    let mut cells = Vec::new();
    for trial in 0..spec.trials {
        for &n_subjects in &spec.subject_counts {
            for model in &spec.models {
                for point in model.grid() {
                    cells.push(Cell {
                        trial,
                        n_subjects,
                        model,
                        point,
                    });
                }
            }
        }
    }

    // simulations are cheap next to the fits; generate them up front
    let simulations: BTreeMap<(usize, usize), Simulation> = sims
        .into_par_iter()
        .map(|(key, config)| Ok((key, simulate(&config, &geometry)?)))
        .collect::<Result<_>>()?;

    struct Done {
        rows: Vec<CellRow>,
        seconds: Option<f64>,
    }
    let done: Vec<Done> = cells
        .par_iter()
        .map(|cell| -> Result<Done> {
            let path = match &cell_dir {
                Some(dir) => Some(dir.join(format!("{}.csv", cell.hash(spec)?))),
                None => None,
            };
            if let Some(path) = &path {
                if options.resume && path.exists() {
                    return Ok(Done {
                        rows: read_rows(path)?,
                        seconds: None,
                    });
                }
            }
            let t0 = Instant::now();
            let sim = &simulations[&(cell.trial, cell.n_subjects)];
            let outcome = match score_cell(cell, sim, &geometry, spec) {
                Ok(scores) => Ok(scores),
                Err(e @ Error::Io(_)) => return Err(e),
                Err(e) => {
                    log::warn!(
                        "trial {} S={} {} [{}]: {e}",
                        cell.trial,
                        cell.n_subjects,
                        cell.model.name,
                        cell.point
                    );
                    Err(e.to_string())
                }
            };
            let rows = cell.rows(outcome);
            if let Some(path) = &path {
                write_rows(path, &rows)?;
            }
            Ok(Done {
                rows,
                seconds: Some(t0.elapsed().as_secs_f64()),
            })
        })
        .collect::<Result<_>>()?;

    let mut model_seconds = BTreeMap::new();
    let mut computed = 0;
    for (cell, d) in cells.iter().zip(&done) {
        if let Some(t) = d.seconds {
            computed += 1;
            *model_seconds.entry(cell.model.name.clone()).or_insert(0.0) += t;
        }
    }
    let rows: Vec<CellRow> = done.into_iter().flat_map(|d| d.rows).collect();
    let aggregate = aggregate(&rows);
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        spec: spec.clone(),
        trial_seeds: (0..spec.trials).map(|t| trial_seed(spec.seed, t)).collect(),
        cells: cells.len(),
        computed,
        resumed: cells.len() - computed,
        errors: rows.iter().filter(|r| r.error.is_some()).count(),
        elapsed_s: start.elapsed().as_secs_f64(),
        model_seconds,
    };
    if let Some(dir) = &output_dir {
        write_csv(&dir.join("results.csv"), &rows)?;
        write_csv(&dir.join("aggregate.csv"), &aggregate)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(ExperimentReport {
        rows,
        aggregate,
        manifest,
    })
}

/// Mean and two-sided 95% Student-t interval; the bounds are NaN with
/// fewer than two values.
pub fn mean_ci(values: &[f64]) -> (f64, f64, f64) {
    let t = values.len();
    if t == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / t as f64;
    if t < 2 {
        return (mean, f64::NAN, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
    let q = StudentsT::new(0.0, 1.0, (t - 1) as f64)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.975);
    let half = q * (var / t as f64).sqrt();
    (mean, mean - half, mean + half)
}

/// Per (model, grid point, subject count): subject means per trial, then
/// mean and interval across trials. Groups keep their first-seen order.
pub fn aggregate(rows: &[CellRow]) -> Vec<AggregateRow> {
    type Key = (String, String, usize);
    // trial -> (sums, count, failed)
    type Trials = BTreeMap<usize, ([f64; 3], usize, bool)>;
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, Trials> = BTreeMap::new();
    for r in rows {
        let key = (r.model.clone(), r.point.clone(), r.n_subjects);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let trial = groups.entry(key).or_default().entry(r.trial).or_insert(([0.0; 3], 0, false));
        match (r.error.is_some(), r.auc, r.emd_cm, r.mse) {
            (false, Some(a), Some(e), Some(m)) => {
                trial.0[0] += a;
                trial.0[1] += e;
                trial.0[2] += m;
                trial.1 += 1;
            }
            _ => trial.2 = true,
        }
    }
    order
        .into_iter()
        .map(|key| {
            let trials = &groups[&key];
            let mut per_metric: [Vec<f64>; 3] = Default::default();
            let mut errors = 0;
            for (sums, count, failed) in trials.values() {
                if *failed || *count == 0 {
                    errors += 1;
                    continue;
                }
                for k in 0..3 {
                    per_metric[k].push(sums[k] / *count as f64);
                }
            }
            let [auc, emd, mse] = per_metric.map(|v| mean_ci(&v));
            AggregateRow {
                model: key.0,
                point: key.1,
                n_subjects: key.2,
                trials: trials.len() - errors,
                errors,
                auc_mean: auc.0,
                auc_ci_low: auc.1,
                auc_ci_high: auc.2,
                emd_mean: emd.0,
                emd_ci_low: emd.1,
                emd_ci_high: emd.2,
                mse_mean: mse.0,
                mse_ci_low: mse.1,
                mse_ci_high: mse.2,
            }
        })
        .collect()
}

pub fn read_aggregate(path: impl AsRef<Path>) -> Result<Vec<AggregateRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<AggregateRow>, _>>()?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Auc,
    Emd,
    Mse,
}

impl Metric {
    fn higher_is_better(self) -> bool {
        self == Metric::Auc
    }

    fn of(self, row: &AggregateRow) -> (f64, f64, f64) {
        match self {
            Metric::Auc => (row.auc_mean, row.auc_ci_low, row.auc_ci_high),
            Metric::Emd => (row.emd_mean, row.emd_ci_low, row.emd_ci_high),
            Metric::Mse => (row.mse_mean, row.mse_ci_low, row.mse_ci_high),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auc" => Ok(Metric::Auc),
            "emd" => Ok(Metric::Emd),
            "mse" => Ok(Metric::Mse),
            other => param(format!("unknown metric {other:?}; expected auc, emd or mse")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Auc => "auc",
            Metric::Emd => "emd",
            Metric::Mse => "mse",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRow {
    pub model: String,
    pub n_subjects: usize,
    pub metric: String,
    pub point: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Best grid point per (model, subject count): largest mean AUC, smallest
/// mean EMD or MSE. Points without any scored trial are ignored; the first
/// point wins ties.
pub fn best_scores(rows: &[AggregateRow], metric: &str) -> Result<Vec<BestRow>> {
    let metric: Metric = metric.parse()?;
    if rows.is_empty() {
        return param("empty aggregate table");
    }
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut best: BTreeMap<(String, usize), &AggregateRow> = BTreeMap::new();
    for r in rows {
        let key = (r.model.clone(), r.n_subjects);
        if !order.contains(&key) {
            order.push(key.clone());
        }
        let v = metric.of(r).0;
        if v.is_nan() {
            continue;
        }
        let better = match best.get(&key) {
            None => true,
            Some(b) => {
                let bv = metric.of(b).0;
                if metric.higher_is_better() {
                    v > bv
                } else {
                    v < bv
                }
            }
        };
        if better {
            best.insert(key, r);
        }
    }
    Ok(order
        .into_iter()
        .filter_map(|key| {
            best.get(&key).map(|r| {
                let (mean, ci_low, ci_high) = metric.of(r);
                BestRow {
                    model: key.0.clone(),
                    n_subjects: key.1,
                    metric: metric.to_string(),
                    point: r.point.clone(),
                    mean,
                    ci_low,
                    ci_high,
                }
            })
        })
        .collect())
}

pub fn write_best_csv<W: std::io::Write>(w: W, rows: &[BestRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, point: &str, s: usize, auc: f64) -> AggregateRow {
        AggregateRow {
            model: model.into(),
            point: point.into(),
            n_subjects: s,
            trials: 1,
            errors: 0,
            auc_mean: auc,
            auc_ci_low: f64::NAN,
            auc_ci_high: f64::NAN,
            emd_mean: 1.0 - auc,
            emd_ci_low: f64::NAN,
            emd_ci_high: f64::NAN,
            mse_mean: auc,
            mse_ci_low: f64::NAN,
            mse_ci_high: f64::NAN,
        }
    }

    #[test]
    fn best_picks_extremes() {
        let rows = vec![row("m", "a", 2, 0.6), row("m", "b", 2, 0.9)];
        let auc = best_scores(&rows, "auc").unwrap();
        assert_eq!((auc[0].point.as_str(), auc[0].mean), ("b", 0.9));
        let mse = best_scores(&rows, "mse").unwrap();
        assert_eq!(mse[0].point, "a");
        assert!(best_scores(&rows, "f1").is_err());
    }

    #[test]
    fn student_interval() {
        // t_{0.975, 2} = 4.302652729...
        let (m, lo, hi) = mean_ci(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((hi - m - 4.302652729911275 / 3f64.sqrt()).abs() < 1e-9);
        assert!((m - lo - (hi - m)).abs() < 1e-12);
        assert!(mean_ci(&[1.0]).1.is_nan());
    }

    #[test]
    fn grid_covers_product() {
        let mut m = ModelSpec::new("mwe", ModelKind::Mwe);
        m.lambda = vec![0.5, 0.7];
        m.mu = vec![0.1, 0.3, 1.0];
        let g = m.grid();
        assert_eq!(g.len(), 6);
        assert_eq!(g[1].to_string(), "lambda=0.5;mu=0.3;epsilon=0.1;gamma=1");
        assert_eq!(ModelSpec::new("l", ModelKind::Lasso).grid().len(), 9);
    }

    #[test]
    fn threshold_keeps_large_entries() {
        let mut x = vec![10.0, -0.05, 0.2, -3.0];
        threshold_support(&mut x, 0.01);
        assert_eq!(x, vec![10.0, 0.0, 0.2, -3.0]);
    }

    #[test]
    fn aggregate_skips_failed_trials() {
        let ok = |trial, subject, auc| CellRow {
            trial,
            n_subjects: 2,
            model: "m".into(),
            point: "p".into(),
            subject: Some(subject),
            auc: Some(auc),
            emd_cm: Some(1.0),
            mse: Some(2.0),
            error: None,
        };
        let rows = vec![
            ok(0, 0, 0.2),
            ok(0, 1, 0.4),
            CellRow {
                subject: None,
                auc: None,
                emd_cm: None,
                mse: None,
                error: Some("boom".into()),
                ..ok(1, 0, 0.0)
            },
        ];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        assert_eq!((agg[0].trials, agg[0].errors), (1, 1));
        assert!((agg[0].auc_mean - 0.3).abs() < 1e-15);
    }
}

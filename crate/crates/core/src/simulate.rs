//! Synthetic multi-subject benchmark data.
//!
//! Leadfields are spatially smoothed Gaussian fields over the source space
//! (a stand-in for physical forward models): nearby sources produce similar
//! sensor profiles, which is what makes source localization ill-posed.
//! Sources are `q`-sparse, one per active label, with part of the subjects
//! sharing exact locations.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::MultiSubjectDataset;
use crate::error::{param, Error, Result};
use crate::geometry::{CostMatrix, Geometry, LabelPartition};
use crate::io;
use crate::rng::{seeded, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub n_sensors: usize,
    /// Number of active sources, one per active label.
    pub q: usize,
    /// Fraction of subjects whose sources sit on the same vertices.
    pub overlap_fraction: f64,
    /// Absolute amplitude range (nAm).
    pub amp_range: (f64, f64),
    /// Probability that a label's sources are positive.
    pub sign_prob: f64,
    pub snr: f64,
    pub shared_leadfield: bool,
    /// Length scale (cm) of the spatial smoothing of leadfield columns.
    pub smoothing_cm: f64,
    /// Angle (radians) between a subject's columns and the base columns in
    /// individual-leadfield mode.
    pub individual_angle: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_subjects: 2,
            n_sensors: 50,
            q: 3,
            overlap_fraction: 0.5,
            amp_range: (20.0, 30.0),
            sign_prob: 0.5,
            snr: 4.0,
            shared_leadfield: false,
            smoothing_cm: 1.0,
            individual_angle: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Full check used by [`simulate`], including the ill-posed regime n < p.
    pub fn validate(&self, n_sources: usize) -> Result<()> {
        if self.n_sensors >= n_sources {
            return param(format!(
                "expected fewer sensors ({}) than sources ({n_sources})",
                self.n_sensors
            ));
        }
        self.validate_values()
    }

    /// Checks every field on its own; any sensor count is accepted.
    pub fn validate_values(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_sensors == 0 {
            return param("need at least one subject and one sensor");
        }
        if !(self.snr > 0.0) {
            return param(format!("snr must be positive, got {}", self.snr));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) || !(0.0..=1.0).contains(&self.sign_prob) {
            return param("overlap_fraction and sign_prob must lie in [0, 1]");
        }
        let (lo, hi) = self.amp_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return param(format!("invalid amplitude range ({lo}, {hi})"));
        }
        if !(self.smoothing_cm > 0.0) || !self.individual_angle.is_finite() {
            return param("smoothing_cm must be positive and individual_angle finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Signed source vector of every subject.
    #[serde(skip)]
    pub sources: Vec<Array1<f64>>,
    pub active_labels: Vec<usize>,
    /// `active_indices[s][k]` is subject `s`'s source in `active_labels[k]`.
    pub active_indices: Vec<Vec<usize>>,
    /// Sign shared by all sources of each active label.
    pub signs: Vec<f64>,
    /// Standard deviation of the added noise, once known.
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: MultiSubjectDataset,
    pub truth: GroundTruth,
}

fn normalize_columns(m: &mut Array2<f64>) {
    for mut col in m.axis_iter_mut(Axis(1)) {
        let nrm = col.dot(&col).sqrt();
        if nrm > 0.0 {
            col /= nrm;
        }
    }
}

fn smooth_field<R: Rng>(rng: &mut R, n: usize, smoother: &Array2<f64>) -> Array2<f64> {
    let p = smoother.nrows();
    let g = Array2::from_shape_simple_fn((n, p), || StandardNormal.sample(rng));
    let mut l = g.dot(smoother);
    normalize_columns(&mut l);
    l
}

/// Leadfields with unit-norm columns whose correlation decays with the
/// geodesic distance between sources.
///
/// Shared mode returns `S` handles to one matrix. Individual mode rotates
/// every column of the base matrix by `individual_angle` towards an
/// independent smooth field drawn per subject.
pub fn generate_leadfields(config: &SimConfig, cost: &CostMatrix) -> Result<Vec<Arc<Array2<f64>>>> {
    config.validate_values()?;
    let two_l2 = 2.0 * config.smoothing_cm * config.smoothing_cm;
    let smoother = cost.view().mapv(|d| (-d * d / two_l2).exp());
    let mut rng = seeded(config.seed, stream::LEADFIELD);
    let base = Arc::new(smooth_field(&mut rng, config.n_sensors, &smoother));
    if config.shared_leadfield {
        return Ok(vec![base; config.n_subjects]);
    }
    let (c, s) = (config.individual_angle.cos(), config.individual_angle.sin());
    Ok((0..config.n_subjects)
        .map(|_| {
            let other = smooth_field(&mut rng, config.n_sensors, &smoother);
            let mut l = base.as_ref() * c + other * s;
            normalize_columns(&mut l);
            Arc::new(l)
        })
        .collect())
}

/// Signed `q`-sparse sources, one per active label.
///
/// The first `round(overlap_fraction * S)` subjects put each label's source
/// on one common vertex; the others draw a vertex of the same label, avoiding
/// the common one when the label has more than one vertex.
pub fn generate_sources(config: &SimConfig, labels: &LabelPartition) -> Result<GroundTruth> {
    if config.q > labels.n_labels() {
        return param(format!(
            "q = {} exceeds the {} available labels",
            config.q,
            labels.n_labels()
        ));
    }
    let p = labels.labels().len();
    let (lo, hi) = config.amp_range;
    let amplitude = Uniform::new_inclusive(lo, hi).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = seeded(config.seed, stream::SOURCES);
    let mut active_labels = sample(&mut rng, labels.n_labels(), config.q).into_vec();
    active_labels.sort_unstable();
    let signs: Vec<f64> = active_labels
        .iter()
        .map(|_| if rng.random::<f64>() < config.sign_prob { 1.0 } else { -1.0 })
        .collect();
    let members: Vec<Vec<usize>> = active_labels.iter().map(|&l| labels.members(l)).collect();
    let shared: Vec<usize> = members
        .iter()
        .map(|m| m[rng.random_range(0..m.len())])
        .collect();
    let n_shared = (config.overlap_fraction * config.n_subjects as f64).round() as usize;

    let mut sources = Vec::with_capacity(config.n_subjects);
    let mut active_indices = Vec::with_capacity(config.n_subjects);
    for s in 0..config.n_subjects {
        let mut x = Array1::zeros(p);
        let mut idx = Vec::with_capacity(config.q);
        for k in 0..config.q {
            let v = if s < n_shared || members[k].len() == 1 {
                shared[k]
            } else {
                let others: Vec<usize> = members[k].iter().copied().filter(|&v| v != shared[k]).collect();
                others[rng.random_range(0..others.len())]
            };
            x[v] = signs[k] * amplitude.sample(&mut rng);
            idx.push(v);
        }
        sources.push(x);
        active_indices.push(idx);
    }
    Ok(GroundTruth {
        sources,
        active_labels,
        active_indices,
        signs,
        noise_sigma: None,
    })
}

/// Adds white Gaussian noise with `sigma = sum_s ||B_s|| / (S snr)`.
pub fn add_noise(signals: &[Array1<f64>], snr: f64, seed: u64) -> Result<(Vec<Array1<f64>>, f64)> {
    if !(snr > 0.0) {
        return param(format!("snr must be positive, got {snr}"));
    }
    if signals.is_empty() {
        return param("no signals");
    }
    let total: f64 = signals.iter().map(|b| b.dot(b).sqrt()).sum();
    if total == 0.0 {
        return Err(Error::Domain("all signals are zero; SNR is undefined".into()));
    }
    let sigma = total / (signals.len() as f64 * snr);
    let mut rng = seeded(seed, stream::NOISE);
    let noisy = signals
        .iter()
        .map(|b| {
            b.mapv(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v + sigma * e
            })
        })
        .collect();
    Ok((noisy, sigma))
}

/// Leadfields, sources and noisy observations for one trial.
pub fn simulate(config: &SimConfig, geometry: &Geometry) -> Result<Simulation> {
    config.validate(geometry.n_sources())?;
    let leadfields = generate_leadfields(config, &geometry.cost)?;
    let mut truth = generate_sources(config, &geometry.labels)?;
    let signals: Vec<Array1<f64>> = leadfields
        .iter()
        .zip(&truth.sources)
        .map(|(l, x)| l.dot(x))
        .collect();
    let (observations, sigma) = add_noise(&signals, config.snr, config.seed)?;
    truth.noise_sigma = Some(sigma);
    Ok(Simulation {
        dataset: MultiSubjectDataset::new(leadfields, observations)?,
        truth,
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: SimConfig,
    truth: GroundTruth,
}

/// Writes `leadfield_<s>.bin`, `observation_<s>.bin`, `source_<s>.bin` and a
/// `simulation.json` sidecar into `dir`.
pub fn save_simulation(dir: impl AsRef<Path>, config: &SimConfig, sim: &Simulation) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for s in 0..sim.dataset.n_subjects() {
        io::save_matrix(dir.join(format!("leadfield_{s}.bin")), sim.dataset.leadfield(s))?;
        io::save_vector(
            dir.join(format!("observation_{s}.bin")),
            &sim.dataset.observation(s).to_owned(),
        )?;
        io::save_vector(dir.join(format!("source_{s}.bin")), &sim.truth.sources[s])?;
    }
    let sidecar = Sidecar {
        config: config.clone(),
        truth: sim.truth.clone(),
    };
    fs::write(dir.join("simulation.json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_simulation(dir: impl AsRef<Path>) -> Result<(SimConfig, Simulation)> {
    let dir = dir.as_ref();
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(dir.join("simulation.json"))?)?;
    let n_subjects = sidecar.truth.active_indices.len();
    let mut leadfields = Vec::with_capacity(n_subjects);
    let mut observations = Vec::with_capacity(n_subjects);
    let mut sources = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        leadfields.push(Arc::new(io::load_matrix(dir.join(format!("leadfield_{s}.bin")))?));
        observations.push(io::load_vector(dir.join(format!("observation_{s}.bin")))?);
        sources.push(io::load_vector(dir.join(format!("source_{s}.bin")))?);
    }
    let mut truth = sidecar.truth;
    truth.sources = sources;
    Ok((
        sidecar.config,
        Simulation {
            dataset: MultiSubjectDataset::new(leadfields, observations)?,
            truth,
        },
    ))
}

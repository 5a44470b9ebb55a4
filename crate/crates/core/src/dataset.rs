use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{param, Result};

/// Per-subject leadfields `L_s` (`n x p`) and observations `Y_s` (`n`).
///
/// Leadfield columns are aligned across subjects: column `j` of every `L_s`
/// is source `j` of the shared source space. Leadfields are reference
/// counted so that subjects may share one matrix.
#[derive(Debug, Clone)]
pub struct MultiSubjectDataset {
    leadfields: Vec<Arc<Array2<f64>>>,
    observations: Vec<Array1<f64>>,
}

impl MultiSubjectDataset {
    pub fn new(leadfields: Vec<Arc<Array2<f64>>>, observations: Vec<Array1<f64>>) -> Result<Self> {
        if leadfields.is_empty() {
            return param("dataset needs at least one subject");
        }
        if leadfields.len() != observations.len() {
            return param(format!(
                "{} leadfields but {} observation vectors",
                leadfields.len(),
                observations.len()
            ));
        }
        let (n, p) = leadfields[0].dim();
        for (s, (l, y)) in leadfields.iter().zip(&observations).enumerate() {
            if l.dim() != (n, p) {
                return param(format!(
                    "subject {s} leadfield is {:?}, expected {:?}",
                    l.dim(),
                    (n, p)
                ));
            }
            if y.len() != n {
                return param(format!(
                    "subject {s} has {} observations, expected {n}",
                    y.len()
                ));
            }
        }
        Ok(Self {
            leadfields,
            observations,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.leadfields.len()
    }

    pub fn n_sensors(&self) -> usize {
        self.leadfields[0].nrows()
    }

    pub fn n_sources(&self) -> usize {
        self.leadfields[0].ncols()
    }

    pub fn leadfield(&self, s: usize) -> ArrayView2<'_, f64> {
        self.leadfields[s].view()
    }

    pub fn leadfields(&self) -> &[Arc<Array2<f64>>] {
        &self.leadfields
    }

    pub fn observation(&self, s: usize) -> ArrayView1<'_, f64> {
        self.observations[s].view()
    }

    pub fn observations(&self) -> &[Array1<f64>] {
        &self.observations
    }

    pub fn leadfield_views(&self) -> Vec<ArrayView2<'_, f64>> {
        self.leadfields.iter().map(|l| l.view()).collect()
    }

    pub fn observation_views(&self) -> Vec<ArrayView1<'_, f64>> {
        self.observations.iter().map(|y| y.view()).collect()
    }

    /// First `count` subjects.
    pub fn truncate(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.n_subjects() {
            return param(format!(
                "cannot keep {count} of {} subjects",
                self.n_subjects()
            ));
        }
        Ok(Self {
            leadfields: self.leadfields[..count].to_vec(),
            observations: self.observations[..count].to_vec(),
        })
    }
}

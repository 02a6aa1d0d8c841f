//! Cohorts of patient records and the tensors derived from them.

mod batch;
mod clocks;
mod fill;
mod io;
mod split;

pub use batch::{Batch, StepData};
pub use clocks::{compute_clocks, ClockVectors};
pub use fill::forward_fill;
pub use io::{load_cohort, read_cohort, save_cohort, write_cohort, write_tensor_csv};
pub use split::{k_folds, train_test_split, Fold, HeldOut, TrainSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cohort dimensions: baseline `J`, biomarkers `M`, interventions `L`,
/// lines of therapy `K`, maximum sequence length `T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
}

/// Column layout of the intervention matrix: `[line one-hot (K) | clocks | drugs]`.
///
/// The line one-hot always occupies columns `0..K`. Clock columns hold raw
/// step counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ULayout {
    pub global_clock: Option<usize>,
    pub local_clock: Option<usize>,
}

impl ULayout {
    /// `[lines | gc | lc | drugs]`.
    pub fn with_both_clocks(k: usize) -> Self {
        Self {
            global_clock: Some(k),
            local_clock: Some(k + 1),
        }
    }

    /// `[lines | lc | drugs]`, the synthetic-cohort layout.
    pub fn local_clock_only(k: usize) -> Self {
        Self {
            global_clock: None,
            local_clock: Some(k),
        }
    }

    pub fn is_clock(&self, col: usize) -> bool {
        self.global_clock == Some(col) || self.local_clock == Some(col)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub b: Vec<f64>,
    /// `T × M` biomarkers; entries under `m == 0` are never read.
    pub x: Vec<Vec<f64>>,
    /// `T × L` interventions.
    pub u: Vec<Vec<f64>>,
    /// `T × M` observation mask, 1 = observed.
    pub m: Vec<Vec<u8>>,
    pub length: usize,
}

impl PatientRecord {
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let bad = |what: String| Err(Error::invalid(what));
        if self.b.len() != dims.j {
            return bad(format!("b has {} entries, expected J={}", self.b.len(), dims.j));
        }
        if self.length > dims.t || self.length == 0 {
            return bad(format!("length {} outside 1..={}", self.length, dims.t));
        }
        for (name, rows, width) in [("x", self.x.len(), dims.m), ("u", self.u.len(), dims.l), ("m", self.m.len(), dims.m)] {
            if rows != dims.t {
                return bad(format!("{name} has {rows} rows, expected T={}", dims.t));
            }
            let widths: Vec<usize> = match name {
                "x" => self.x.iter().map(Vec::len).collect(),
                "u" => self.u.iter().map(Vec::len).collect(),
                _ => self.m.iter().map(Vec::len).collect(),
            };
            if let Some((t, w)) = widths.iter().enumerate().find(|(_, w)| **w != width) {
                return bad(format!("{name} row {t} has {w} columns, expected {width}"));
            }
        }
        if self.m.iter().flatten().any(|v| *v > 1) {
            return bad("mask entries must be 0 or 1".into());
        }
        for (t, row) in self.u.iter().enumerate() {
            if t >= self.length {
                if row.iter().any(|v| *v != 0.0) {
                    return bad(format!("u row {t} is beyond length {} but nonzero", self.length));
                }
            } else {
                let lines = &row[..dims.k];
                let ones = lines.iter().filter(|v| **v == 1.0).count();
                if ones != 1 || lines.iter().any(|v| *v != 0.0 && *v != 1.0) {
                    return bad(format!("u row {t}: line-of-therapy slice is not one-hot"));
                }
            }
        }
        Ok(())
    }

    /// Forward-filled biomarkers (encoder input).
    pub fn x_filled(&self) -> Vec<Vec<f64>> {
        forward_fill(&self.x, &self.m)
    }

    /// Index of the active line of therapy per step, from the one-hot slice.
    pub fn line_indices(&self, k: usize) -> Vec<i64> {
        self.u
            .iter()
            .map(|row| {
                row[..k]
                    .iter()
                    .position(|v| *v > 0.5)
                    .map(|p| p as i64)
                    .unwrap_or(-1)
            })
            .collect()
    }

    /// Copy restricted to the first `len` steps (rows after are zeroed and masked).
    pub fn truncated(&self, len: usize) -> PatientRecord {
        let mut r = self.clone();
        r.length = len.min(self.length);
        for t in r.length..r.x.len() {
            r.m[t].iter_mut().for_each(|v| *v = 0);
            r.x[t].iter_mut().for_each(|v| *v = 0.0);
            r.u[t].iter_mut().for_each(|v| *v = 0.0);
        }
        r
    }

    pub fn observed_count(&self) -> usize {
        self.m[..self.length].iter().flatten().filter(|v| **v == 1).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub name: String,
    pub dims: Dims,
    pub layout: ULayout,
    patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn new(name: impl Into<String>, dims: Dims, layout: ULayout, patients: Vec<PatientRecord>) -> Result<Self> {
        for (i, p) in patients.iter().enumerate() {
            p.validate(&dims)
                .map_err(|e| Error::invalid(format!("patient {i}: {e}")))?;
        }
        Ok(Self {
            name: name.into(),
            dims,
            layout,
            patients,
        })
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// New cohort with the same dims holding the given patients.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            name: self.name.clone(),
            dims: self.dims,
            layout: self.layout,
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
        }
    }

    pub fn with_patients(&self, patients: Vec<PatientRecord>) -> Result<Cohort> {
        Cohort::new(self.name.clone(), self.dims, self.layout, patients)
    }
}

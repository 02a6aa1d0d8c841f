use super::{Cohort, Dims, PatientRecord, ULayout};
use crate::diffcore::Tensor;

/// Tensors for one time step across a batch, each with the batch as the
/// leading axis.
#[derive(Clone, Debug)]
pub struct StepData {
    /// `[N, M]` biomarkers with unobserved entries set to 0.
    pub x: Tensor,
    /// `[N, M]` observation mask.
    pub m: Tensor,
    /// `[N, M]` forward-filled biomarkers.
    pub xfill: Tensor,
    /// `[N, L]` interventions with clock columns divided by `T`.
    pub u: Tensor,
    /// `[N, K]` line-of-therapy one-hot.
    pub lines: Tensor,
    /// `[N]` raw local clock.
    pub lc: Tensor,
    /// `[N]` 1 where `t < length`.
    pub valid: Tensor,
}

/// Batched, time-major view of a set of patients.
#[derive(Clone, Debug)]
pub struct Batch {
    pub dims: Dims,
    pub layout: ULayout,
    /// `[N, J]` baseline covariates.
    pub b: Tensor,
    pub steps: Vec<StepData>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_cohort(cohort: &Cohort) -> Batch {
        Batch::from_records(cohort.patients(), cohort.dims, cohort.layout)
    }

    pub fn from_records(patients: &[PatientRecord], dims: Dims, layout: ULayout) -> Batch {
        let refs: Vec<&PatientRecord> = patients.iter().collect();
        Batch::from_refs(&refs, dims, layout)
    }

    /// Steps run up to the longest length in the batch.
    pub fn from_refs(patients: &[&PatientRecord], dims: Dims, layout: ULayout) -> Batch {
        let n = patients.len();
        let t_max = patients.iter().map(|p| p.length).max().unwrap_or(0);
        let scale = 1.0 / dims.t as f64;
        let filled: Vec<Vec<Vec<f64>>> = patients.iter().map(|p| p.x_filled()).collect();
        let b = Tensor::new(vec![n, dims.j], patients.iter().flat_map(|p| p.b.iter().copied()).collect())
            .expect("baseline width validated on load");
        let steps = (0..t_max)
            .map(|t| {
                let mut x = Vec::with_capacity(n * dims.m);
                let mut m = Vec::with_capacity(n * dims.m);
                let mut xfill = Vec::with_capacity(n * dims.m);
                let mut u = Vec::with_capacity(n * dims.l);
                let mut lines = Vec::with_capacity(n * dims.k);
                let mut lc = Vec::with_capacity(n);
                let mut valid = Vec::with_capacity(n);
                for (p, fill) in patients.iter().zip(&filled) {
                    let live = t < p.length;
                    for j in 0..dims.m {
                        let obs = live && p.m[t][j] == 1;
                        x.push(if obs { p.x[t][j] } else { 0.0 });
                        m.push(if obs { 1.0 } else { 0.0 });
                        xfill.push(fill[t][j]);
                    }
                    for (c, &v) in p.u[t].iter().enumerate() {
                        u.push(if layout.is_clock(c) { v * scale } else { v });
                    }
                    lines.extend_from_slice(&p.u[t][..dims.k]);
                    lc.push(layout.local_clock.map(|c| p.u[t][c]).unwrap_or(0.0));
                    valid.push(if live { 1.0 } else { 0.0 });
                }
                StepData {
                    x: Tensor::new(vec![n, dims.m], x).unwrap(),
                    m: Tensor::new(vec![n, dims.m], m).unwrap(),
                    xfill: Tensor::new(vec![n, dims.m], xfill).unwrap(),
                    u: Tensor::new(vec![n, dims.l], u).unwrap(),
                    lines: Tensor::new(vec![n, dims.k], lines).unwrap(),
                    lc: Tensor::vector(lc),
                    valid: Tensor::vector(valid),
                }
            })
            .collect();
        Batch {
            dims,
            layout,
            b,
            steps,
            lengths: patients.iter().map(|p| p.length).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn t_max(&self) -> usize {
        self.steps.len()
    }

    /// Same batch with every row repeated `s` times consecutively
    /// (patient `i` occupies rows `i·s .. (i+1)·s`).
    pub fn repeat_rows(&self, s: usize) -> Batch {
        let rep = |t: &Tensor| {
            let lead = t.shape()[0];
            let w = t.len() / lead.max(1);
            let mut data = Vec::with_capacity(t.len() * s);
            for chunk in t.data().chunks_exact(w.max(1)) {
                for _ in 0..s {
                    data.extend_from_slice(chunk);
                }
            }
            let mut shape = t.shape().to_vec();
            shape[0] = lead * s;
            Tensor::new(shape, data).unwrap()
        };
        Batch {
            dims: self.dims,
            layout: self.layout,
            b: rep(&self.b),
            steps: self
                .steps
                .iter()
                .map(|st| StepData {
                    x: rep(&st.x),
                    m: rep(&st.m),
                    xfill: rep(&st.xfill),
                    u: rep(&st.u),
                    lines: rep(&st.lines),
                    lc: rep(&st.lc),
                    valid: rep(&st.valid),
                })
                .collect(),
            lengths: self.lengths.iter().flat_map(|&l| std::iter::repeat_n(l, s)).collect(),
        }
    }
}

//! Synthetic disease-progression cohort with a treatment-exponential
//! response and four baseline-determined subtypes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_clocks, Cohort, Dims, PatientRecord, ULayout};
use crate::diffcore::sigmoid;
use crate::error::{Error, Result};

pub const BASELINE_DIM: usize = 6;
pub const BIOMARKERS: usize = 2;
pub const LINES: usize = 2;
/// `[line0, line1, lc, drug]`.
pub const INTERVENTIONS: usize = 4;
pub const LC_COLUMN: usize = 2;
pub const DRUG_COLUMN: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub noise_var: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub gamma_l: f64,
    pub b_l: f64,
    pub alpha1_by_subtype: [f64; 4],
    pub d_max: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 100,
            t: 20,
            noise_var: 0.25,
            alpha2: 0.6,
            alpha3: 0.6,
            gamma_l: 2.0,
            b_l: 3.0,
            alpha1_by_subtype: [10.0, 5.0, -5.0, -10.0],
            d_max: 18,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_l > 0.0) {
            return Err(Error::Config(format!("gamma_l must be > 0, got {}", self.gamma_l)));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::Config(format!("noise_var must be > 0, got {}", self.noise_var)));
        }
        if self.t == 0 {
            return Err(Error::Config("T must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Small training cohort.
    pub fn train_small(seed: u64) -> Self {
        Self { n_patients: 100, seed, ..Self::default() }
    }

    /// Large training cohort.
    pub fn train_large(seed: u64) -> Self {
        Self { n_patients: 1000, seed, ..Self::default() }
    }

    /// Held-out evaluation cohort.
    pub fn held_out(seed: u64) -> Self {
        Self { n_patients: 50_000, seed, ..Self::default() }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            j: BASELINE_DIM,
            m: BIOMARKERS,
            l: INTERVENTIONS,
            k: LINES,
            t: self.t,
        }
    }
}

/// Closed-form treatment response for one subtype.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthTE {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub gamma_l: f64,
    pub b0: f64,
    pub b_l: f64,
}

impl GroundTruthTE {
    pub fn new(cfg: &SynthConfig, subtype: u8) -> Result<Self> {
        if !(1..=4).contains(&subtype) {
            return Err(Error::invalid(format!("subtype {subtype} outside 1..=4")));
        }
        let alpha1 = cfg.alpha1_by_subtype[subtype as usize - 1];
        // -alpha1 / (1 + exp(alpha2 gamma_l / 2)), through the same sigmoid as the
        // first branch so TE(0) cancels to exactly zero.
        let b0 = -alpha1 * sigmoid(cfg.alpha2 * (0.0 - cfg.gamma_l / 2.0));
        let alpha0 = (alpha1 + 2.0 * b0 - cfg.b_l) / (1.0 + (-cfg.alpha3 * cfg.gamma_l / 2.0).exp());
        Ok(Self {
            alpha0,
            alpha1,
            alpha2: cfg.alpha2,
            alpha3: cfg.alpha3,
            gamma_l: cfg.gamma_l,
            b0,
            b_l: cfg.b_l,
        })
    }

    pub fn eval(&self, lc: f64) -> Result<f64> {
        if !(lc >= 0.0) {
            return Err(Error::invalid(format!("local clock must be ≥ 0, got {lc}")));
        }
        Ok(if lc < self.gamma_l {
            self.b0 + self.alpha1 * sigmoid(self.alpha2 * (lc - self.gamma_l / 2.0))
        } else {
            self.b_l + self.alpha0 * sigmoid(-self.alpha3 * (lc - 1.5 * self.gamma_l))
        })
    }
}

pub fn te_curve(lc: f64, subtype: u8, cfg: &SynthConfig) -> Result<f64> {
    GroundTruthTE::new(cfg, subtype)?.eval(lc)
}

pub fn f_d(t: f64) -> f64 {
    2.0 - 0.05 * t - 0.005 * t * t
}

pub fn f_u(t: f64) -> f64 {
    -1.0 + 0.0001 * t + 0.005 * t * t
}

pub fn sample_baseline<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    (0..BASELINE_DIM).map(|_| rng.sample(StandardNormal)).collect()
}

/// Quadrant of `(b[0], b[1])`; zero counts as nonnegative.
pub fn assign_subtype(b: &[f64]) -> u8 {
    match (b[0] >= 0.0, b[1] >= 0.0) {
        (true, true) => 1,
        (true, false) => 2,
        (false, true) => 3,
        (false, false) => 4,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    /// `T × 4` rows `[line0, line1, lc, drug]`.
    pub u: Vec<Vec<f64>>,
    pub lines: Vec<i64>,
    pub lc: Vec<usize>,
    pub d: usize,
}

/// Drug and second line start at step `d`.
pub fn schedule_for_start(t_len: usize, d: usize) -> Schedule {
    let lines: Vec<i64> = (0..t_len).map(|t| i64::from(t >= d)).collect();
    let lc = compute_clocks(&lines).expect("T ≥ 1").lc;
    let u = (0..t_len)
        .map(|t| {
            let on = if t >= d { 1.0 } else { 0.0 };
            vec![1.0 - on, on, lc[t] as f64, on]
        })
        .collect();
    Schedule { u, lines, lc, d }
}

pub fn treatment_schedule<R: Rng + ?Sized>(rng: &mut R, t_len: usize, d_max: usize) -> Schedule {
    let d = rng.random_range(0..=d_max);
    schedule_for_start(t_len, d)
}

/// Latent facts behind one generated patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub subtype: u8,
    pub d: usize,
    /// `T × 2` biomarker means before noise.
    pub noiseless: Vec<[f64; 2]>,
    /// Treatment response added at each step (0 before `d`).
    pub te: Vec<f64>,
}

/// Noise-free biomarker means for a subtype and treatment start.
pub fn noiseless_trajectory(cfg: &SynthConfig, subtype: u8, d: usize, t_len: usize) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
    let te = GroundTruthTE::new(cfg, subtype)?;
    let (c1, c2): (fn(f64) -> f64, fn(f64) -> f64) = match subtype {
        1 => (f_d, f_d),
        2 => (f_d, f_u),
        3 => (f_u, f_d),
        _ => (f_u, f_u),
    };
    let mut means = Vec::with_capacity(t_len);
    let mut effects = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let e = if t >= d { te.eval((t - d) as f64)? } else { 0.0 };
        let tf = t as f64;
        means.push([c1(tf) + e, c2(tf) + e]);
        effects.push(e);
    }
    Ok((means, effects))
}

pub fn generate_patient<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> Result<(PatientRecord, PatientTruth)> {
    cfg.validate()?;
    let b = sample_baseline(rng);
    let subtype = assign_subtype(&b);
    let sched = treatment_schedule(rng, cfg.t, cfg.d_max);
    let (noiseless, te) = noiseless_trajectory(cfg, subtype, sched.d, cfg.t)?;
    let noise = Normal::new(0.0, cfg.noise_var.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let x = noiseless
        .iter()
        .map(|mu| mu.iter().map(|m| m + noise.sample(rng)).collect())
        .collect();
    let record = PatientRecord {
        b,
        x,
        u: sched.u,
        m: vec![vec![1; BIOMARKERS]; cfg.t],
        length: cfg.t,
    };
    let truth = PatientTruth {
        subtype,
        d: sched.d,
        noiseless,
        te,
    };
    Ok((record, truth))
}

/// Independent generator for patient `i` of a seeded cohort.
pub fn patient_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Generates `cfg.n_patients` patients in parallel; output is identical for
/// a given config regardless of thread count.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<(Cohort, Vec<PatientTruth>)> {
    cfg.validate()?;
    let pairs: Vec<(PatientRecord, PatientTruth)> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(&mut patient_rng(cfg.seed, i), cfg))
        .collect::<Result<_>>()?;
    let (patients, truth) = pairs.into_iter().unzip();
    let cohort = Cohort::new(
        format!("synthetic-n{}-seed{}", cfg.n_patients, cfg.seed),
        cfg.dims(),
        ULayout::local_clock_only(LINES),
        patients,
    )?;
    Ok((cohort, truth))
}

/// One JSON object per patient.
pub fn write_truth<W: Write>(truth: &[PatientTruth], mut w: W) -> Result<()> {
    for t in truth {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Recovers the treatment start from the drug column (`T` if never treated).
pub fn treatment_start(record: &PatientRecord) -> usize {
    record
        .u
        .iter()
        .take(record.length)
        .position(|row| row[DRUG_COLUMN] > 0.5)
        .unwrap_or(record.u.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subtype_quadrants() {
        assert_eq!(assign_subtype(&[0.5, 0.3, 0.0]), 1);
        assert_eq!(assign_subtype(&[0.0, 0.0]), 1);
        assert_eq!(assign_subtype(&[0.1, -0.1]), 2);
        assert_eq!(assign_subtype(&[-0.1, 0.1]), 3);
        assert_eq!(assign_subtype(&[-1.0, -1.0]), 4);
    }

    #[test]
    fn te_starts_at_zero_for_every_subtype() {
        let cfg = SynthConfig::default();
        for s in 1..=4 {
            assert_eq!(te_curve(0.0, s, &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn te_tends_to_b_l() {
        let cfg = SynthConfig::default();
        for s in 1..=4 {
            assert!((te_curve(100.0, s, &cfg).unwrap() - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn te_rejects_negative_clock() {
        assert!(te_curve(-1.0, 1, &SynthConfig::default()).is_err());
    }

    #[test]
    fn te_first_branch_nondecreasing_for_positive_alpha1() {
        let cfg = SynthConfig::default();
        let mut prev = te_curve(0.0, 1, &cfg).unwrap();
        for i in 1..2000 {
            let v = te_curve(i as f64 * 1e-3, 1, &cfg).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn te_hand_values() {
        // alpha1 = 10, alpha2 = alpha3 = 0.6, gamma_l = 2, b_l = 3
        let b0 = -10.0 / (1.0 + 0.6f64.exp());
        let a0 = (10.0 + 2.0 * b0 - 3.0) / (1.0 + (-0.6f64).exp());
        let at1 = b0 + 10.0 / (1.0 + 0.0f64.exp());
        let at4 = 3.0 + a0 / (1.0 + (0.6 * (4.0 - 3.0f64)).exp());
        let cfg = SynthConfig::default();
        assert!((te_curve(1.0, 1, &cfg).unwrap() - at1).abs() < 1e-12);
        assert!((te_curve(4.0, 1, &cfg).unwrap() - at4).abs() < 1e-12);
    }

    #[test]
    fn schedule_edges() {
        let s = schedule_for_start(20, 0);
        assert!(s.u.iter().all(|r| r[DRUG_COLUMN] == 1.0 && r[1] == 1.0));
        assert_eq!(s.lc, (0..20).collect::<Vec<_>>());
        let s = schedule_for_start(20, 18);
        let treated: Vec<usize> = (0..20).filter(|&t| s.u[t][DRUG_COLUMN] == 1.0).collect();
        assert_eq!(treated, vec![18, 19]);
        assert_eq!(s.lc[18], 0);
        assert_eq!(s.lc[19], 1);
    }

    #[test]
    fn noiseless_starting_values() {
        let cfg = SynthConfig::default();
        let (m1, _) = noiseless_trajectory(&cfg, 1, 10, 20).unwrap();
        assert_eq!(m1[0], [2.0, 2.0]);
        let (m4, _) = noiseless_trajectory(&cfg, 4, 10, 20).unwrap();
        assert_eq!(m4[0][0], -1.0);
    }

    #[test]
    fn seeded_cohort_is_reproducible() {
        let cfg = SynthConfig { n_patients: 30, seed: 5, ..Default::default() };
        let (a, ta) = generate_cohort(&cfg).unwrap();
        let (b, tb) = generate_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(treatment_start(&a.patients()[3]).min(cfg.t), ta[3].d.min(cfg.t));
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { gamma_l: 0.0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { noise_var: 0.0, ..Default::default() }.validate().is_err());
    }
}

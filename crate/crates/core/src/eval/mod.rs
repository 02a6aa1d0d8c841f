//! Metrics and analyses: bounds, pairwise comparisons, importance-sampled
//! likelihoods, conditional forecasts, per-feature reports, attention
//! summaries and mechanism ablations.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Cohort, PatientRecord};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::inference::{chunk_seed, cohort_elbo, elbo_graph, ssm_net, Proposal, EVAL_CHUNK};
use crate::mechanisms;
use crate::models::{gaussian_logpdf, BatchInputs, Model, ModelKind, Net, RolloutStart, StepInputs};
use crate::training::{grid_search_candidates, Candidate, TrainConfig};

/// Default number of importance samples.
pub const DEFAULT_IS_SAMPLES: usize = 100;
/// Margin for [`counts_10nats`].
pub const NAT_MARGIN: f64 = 10.0;

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Standard error of the mean.
fn std_err(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NelboReport {
    pub per_patient: Vec<f64>,
    pub mean: f64,
    pub std_err: f64,
    /// Total NELBO divided by the total number of observed entries.
    pub per_observed_entry: f64,
}

/// Per-patient NELBO with both normalizations.
pub fn nelbo_suite(model: &Model, cohort: &Cohort, seed: u64, n_samples: usize) -> Result<NelboReport> {
    let e = cohort_elbo(model, cohort, seed, n_samples)?;
    let per_patient: Vec<f64> = e.per_patient.iter().map(|v| -v).collect();
    let observed: usize = cohort.patients().iter().map(PatientRecord::observed_count).sum();
    Ok(NelboReport {
        mean: mean(&per_patient),
        std_err: std_err(&per_patient),
        per_observed_entry: per_patient.iter().sum::<f64>() / observed.max(1) as f64,
        per_patient,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    /// Share of patients with strictly lower NELBO under the first model.
    pub fraction: f64,
    /// Standard error of `fraction`.
    pub std: f64,
    pub deltas: Vec<u8>,
}

/// Compares per-patient scores (lower is better); ties count against `a`.
pub fn pairwise(a: &[f64], b: &[f64]) -> Result<PairwiseResult> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("pairwise needs equal nonempty lists, got {} and {}", a.len(), b.len())));
    }
    let deltas: Vec<u8> = a.iter().zip(b).map(|(x, y)| u8::from(x < y)).collect();
    let fraction = deltas.iter().map(|&d| d as f64).sum::<f64>() / deltas.len() as f64;
    let std = (fraction * (1.0 - fraction) / deltas.len() as f64).sqrt();
    Ok(PairwiseResult { fraction, std, deltas })
}

/// [`pairwise`] on per-patient NELBOs of two models under common noise.
pub fn pairwise_models(a: &Model, b: &Model, cohort: &Cohort, seed: u64) -> Result<PairwiseResult> {
    let na = nelbo_suite(a, cohort, seed, 1)?;
    let nb = nelbo_suite(b, cohort, seed, 1)?;
    pairwise(&na.per_patient, &nb.per_patient)
}

/// Patients whose NLL is more than [`NAT_MARGIN`] lower under `a`, and
/// the reverse.
pub fn counts_10nats(nll_a: &[f64], nll_b: &[f64]) -> Result<(usize, usize)> {
    if nll_a.len() != nll_b.len() {
        return Err(Error::invalid("counts_10nats needs equal-length lists"));
    }
    let ca = nll_a.iter().zip(nll_b).filter(|(a, b)| **a < **b - NAT_MARGIN).count();
    let cb = nll_a.iter().zip(nll_b).filter(|(a, b)| **b < **a - NAT_MARGIN).count();
    Ok((ca, cb))
}

/// [`counts_10nats`] on importance-sampled NLLs of two models.
pub fn counts_10nats_models(a: &Model, b: &Model, cohort: &Cohort, samples: usize, seed: u64) -> Result<(usize, usize)> {
    let est = |m: &Model| -> Result<Vec<f64>> { Ok(is_nll_cohort(m, cohort, samples, seed)?.iter().map(|e| e.estimate).collect()) };
    counts_10nats(&est(a)?, &est(b)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsEstimate {
    /// `−log p̂(x)`.
    pub estimate: f64,
    /// Delta-method standard error of the estimate.
    pub std_err: f64,
}

/// `−log mean(exp(lw))` and its delta-method standard error.
pub fn log_mean_exp_estimate(lw: &[f64]) -> IsEstimate {
    let s = lw.len() as f64;
    let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|v| (v - mx).exp()).collect();
    let wm = w.iter().sum::<f64>() / s;
    let estimate = -(mx + wm.ln());
    let std_err = if lw.len() < 2 {
        0.0
    } else {
        let var = w.iter().map(|x| (x - wm).powi(2)).sum::<f64>() / (s - 1.0);
        (var / s).sqrt() / wm
    };
    IsEstimate { estimate, std_err }
}

/// Importance-sampled NLL per patient of `batch` with `samples` draws
/// from `proposal`. Models without latents return their exact NLL.
pub fn is_nll(model: &Model, batch: &Batch, samples: usize, seed: u64, proposal: Proposal) -> Result<Vec<IsEstimate>> {
    if samples == 0 {
        return Err(Error::invalid("is_nll needs at least one sample"));
    }
    let n = batch.len();
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = match &model.net {
        Net::Ssm(net) => net,
        _ => {
            let inputs = BatchInputs::new(&mut g, batch);
            let obj = model.objective(&mut g, &inputs, &mut rng)?;
            return Ok(g.value(obj.nll).data().iter().map(|&v| IsEstimate { estimate: v, std_err: 0.0 }).collect());
        }
    };
    let rep = batch.repeat_rows(samples);
    let inputs = BatchInputs::new(&mut g, &rep);
    let e = elbo_graph(&mut g, model, net, &inputs, &mut rng, proposal)?;
    let lw = g.value(e.log_weight).data();
    Ok((0..n).map(|i| log_mean_exp_estimate(&lw[i * samples..(i + 1) * samples])).collect())
}

/// [`is_nll`] over a cohort with the inference network as proposal,
/// chunked to bound memory.
pub fn is_nll_cohort(model: &Model, cohort: &Cohort, samples: usize, seed: u64) -> Result<Vec<IsEstimate>> {
    let per_chunk = (4096 / samples.max(1)).clamp(1, EVAL_CHUNK);
    let mut out = Vec::with_capacity(cohort.len());
    for (c, chunk) in cohort.patients().chunks(per_chunk).enumerate() {
        let batch = Batch::from_records(chunk, cohort.dims, cohort.layout);
        out.extend(is_nll(model, &batch, samples, chunk_seed(seed, c), Proposal::InferenceNet)?);
    }
    Ok(out)
}

/// Conditioning and horizon lengths in time steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastSpec {
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(default = "default_rollouts")]
    pub n_rollouts: usize,
}

fn default_rollouts() -> usize {
    3
}

impl ForecastSpec {
    pub fn new(c: usize, f: usize) -> Self {
        Self { c, f, n_rollouts: 3 }
    }

    /// Named presets at a two-month visit cadence: six months then two
    /// years, one year then one year, and baseline only then two years.
    pub fn presets() -> Vec<(&'static str, ForecastSpec)> {
        vec![
            ("c6m-f2y", ForecastSpec::new(3, 12)),
            ("c1y-f1y", ForecastSpec::new(6, 6)),
            ("c0-f2y", ForecastSpec::new(0, 12)),
        ]
    }
}

/// Source of predicted means for forecast steps `C .. C + F`.
pub trait Forecaster {
    /// One `[N, M]` prediction per forecast step for the patients of `batch`.
    fn predict(&self, batch: &Batch, c: usize, f: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>>;
}

impl Forecaster for Model {
    fn predict(&self, batch: &Batch, c: usize, f: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
        let start = if c == 0 { RolloutStart::Prior } else { RolloutStart::Condition(c) };
        Ok(self.sample_forward(batch, start, f, rng)?.x_mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub spec: ForecastSpec,
    /// Cohort indices of forecast patients.
    pub included: Vec<usize>,
    /// Cohort indices skipped because `C + F` exceeds their length.
    pub skipped: Vec<usize>,
    /// Rollout-averaged predictions, `[included][F][M]`.
    pub trajectories: Vec<Vec<Vec<f64>>>,
    /// Per included patient, L1 over observed targets averaged over rollouts.
    pub l1: Vec<f64>,
    /// Per feature, L1 summed over included patients and steps, averaged
    /// over rollouts.
    pub l1_per_feature: Vec<f64>,
}

impl ForecastResult {
    pub fn mean_l1(&self) -> f64 {
        mean(&self.l1)
    }
}

/// Conditional forecasts for every patient long enough for `spec`.
pub fn forecast<F: Forecaster + ?Sized>(model: &F, cohort: &Cohort, spec: ForecastSpec, seed: u64) -> Result<ForecastResult> {
    if spec.n_rollouts == 0 {
        return Err(Error::invalid("forecast needs at least one rollout"));
    }
    let m = cohort.dims.m;
    let (included, skipped): (Vec<usize>, Vec<usize>) = (0..cohort.len()).partition(|&i| spec.c + spec.f <= cohort.patients()[i].length);
    let mut out = ForecastResult {
        spec,
        included: included.clone(),
        skipped,
        trajectories: vec![vec![vec![0.0; m]; spec.f]; included.len()],
        l1: vec![0.0; included.len()],
        l1_per_feature: vec![0.0; m],
    };
    if spec.f == 0 || included.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<&PatientRecord> = included.iter().map(|&i| &cohort.patients()[i]).collect();
    let batch = Batch::from_refs(&records, cohort.dims, cohort.layout);
    let scale = 1.0 / spec.n_rollouts as f64;
    for _ in 0..spec.n_rollouts {
        let pred = model.predict(&batch, spec.c, spec.f, &mut rng)?;
        for (k, p) in pred.iter().enumerate() {
            let t = spec.c + k;
            for (row, rec) in records.iter().enumerate() {
                let pr = p.row(row);
                for j in 0..m {
                    out.trajectories[row][k][j] += scale * pr[j];
                    if rec.m[t][j] == 1 {
                        let e = (rec.x[t][j] - pr[j]).abs() * scale;
                        out.l1[row] += e;
                        out.l1_per_feature[j] += e;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Writes one row per included patient and step: `patient,t,x0..,xM`.
pub fn write_trajectories_csv<W: Write>(res: &ForecastResult, mut w: W) -> Result<()> {
    let m = res.l1_per_feature.len();
    let cols: Vec<String> = (0..m).map(|j| format!("x{j}")).collect();
    writeln!(w, "patient,t,{}", cols.join(","))?;
    for (row, &pid) in res.included.iter().enumerate() {
        for (k, vals) in res.trajectories[row].iter().enumerate() {
            let v: Vec<String> = vals.iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{pid},{},{}", res.spec.c + k, v.join(","))?;
        }
    }
    Ok(())
}

/// Per-step `(mean, variance)` of each observation under the model: the
/// emission at a posterior-sampled path for latent models and the
/// predictive distribution otherwise. Also returns the summed
/// log-likelihood term `[N]` computed from the same draws.
fn predictive(g: &mut Graph, model: &Model, inputs: &BatchInputs, rng: &mut ChaCha8Rng) -> Result<(Vec<(Var, Var)>, Var)> {
    let ps = &model.params;
    let cfg = &model.config;
    let mut out = Vec::with_capacity(inputs.steps.len());
    match &model.net {
        Net::Ssm(net) => {
            let e = elbo_graph(g, model, net, inputs, rng, Proposal::InferenceNet)?;
            for &z in &e.z {
                out.push(net.emission(g, ps, z)?);
            }
            Ok((out, e.recon))
        }
        Net::Fomm(net) => {
            for t in 0..inputs.steps.len() {
                out.push(if t == 0 {
                    net.prior(g, ps, inputs.b)?
                } else {
                    let prev = inputs.steps[t - 1];
                    net.step(g, ps, cfg, prev.xfill, &prev, inputs.b)?
                });
            }
            let (ll, _) = net.loglik(g, ps, cfg, inputs)?;
            Ok((out, ll))
        }
        Net::Gru(net) => {
            let zero = StepInputs::zeros(g, inputs.n, &cfg.dims);
            let mut h = net.initial_state(g, inputs.n);
            for t in 0..inputs.steps.len() {
                let prev = if t == 0 { zero } else { inputs.steps[t - 1] };
                h = net.advance(g, ps, cfg, prev.xfill, &prev, inputs.b, h)?;
                out.push(net.emit(g, ps, h)?);
            }
            let ll = net.loglik(g, ps, cfg, inputs)?;
            Ok((out, ll))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub feature: usize,
    /// Mean per patient of the feature's negative log-likelihood term.
    pub nll: f64,
    /// Per forecast preset, mean per forecast patient of the feature's L1.
    pub l1: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub rows: Vec<FeatureRow>,
    /// Mean per patient of the total reconstruction term computed from the
    /// same draws.
    pub recon: f64,
}

/// Per-feature NLL under one posterior draw plus per-feature forecast L1
/// for each preset.
pub fn per_feature_report(model: &Model, cohort: &Cohort, seed: u64) -> Result<FeatureReport> {
    let m = cohort.dims.m;
    let mut nll = vec![0.0; m];
    let mut recon = 0.0;
    for (c, chunk) in cohort.patients().chunks(EVAL_CHUNK).enumerate() {
        let batch = Batch::from_records(chunk, cohort.dims, cohort.layout);
        let mut g = Graph::new();
        let inputs = BatchInputs::new(&mut g, &batch);
        let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(seed, c));
        let (pred, ll) = predictive(&mut g, model, &inputs, &mut rng)?;
        recon += g.value(ll).sum();
        for (t, (mu, var)) in pred.into_iter().enumerate() {
            let lp = gaussian_logpdf(&mut g, inputs.steps[t].x, mu, var)?;
            let lp = g.mul(lp, inputs.steps[t].m)?;
            for (i, v) in g.value(lp).data().iter().enumerate() {
                nll[i % m] -= v;
            }
        }
    }
    let n = cohort.len().max(1) as f64;
    let mut rows: Vec<FeatureRow> = (0..m)
        .map(|j| FeatureRow {
            feature: j,
            nll: nll[j] / n,
            l1: BTreeMap::new(),
        })
        .collect();
    for (name, spec) in ForecastSpec::presets() {
        if spec.c + spec.f > cohort.dims.t {
            continue;
        }
        let res = forecast(model, cohort, spec, seed)?;
        let k = res.included.len().max(1) as f64;
        for (j, row) in rows.iter_mut().enumerate() {
            row.l1.insert(name.to_string(), res.l1_per_feature[j] / k);
        }
    }
    Ok(FeatureReport { rows, recon: recon / n })
}

pub fn write_feature_csv<W: Write>(report: &FeatureReport, mut w: W) -> Result<()> {
    let presets: Vec<String> = report.rows.first().map(|r| r.l1.keys().cloned().collect()).unwrap_or_default();
    let l1_cols: Vec<String> = presets.iter().map(|p| format!("l1_{p}")).collect();
    writeln!(w, "feature,nll{}{}", if l1_cols.is_empty() { "" } else { "," }, l1_cols.join(","))?;
    for r in &report.rows {
        let vals: Vec<String> = presets.iter().map(|p| format!("{}", r.l1[p])).collect();
        writeln!(w, "{},{}{}{}", r.feature, r.nll, if vals.is_empty() { "" } else { "," }, vals.join(","))?;
    }
    Ok(())
}

/// Mechanism weights averaged over patients and valid transitions, `[Q, d]`.
pub fn attention_summary(model: &Model, cohort: &Cohort, seed: u64) -> Result<Tensor> {
    let net = ssm_net(model)?;
    if model.mechanism_labels().is_none() {
        return Err(Error::invalid(format!("{} has no mechanism attention", model.kind())));
    }
    let mut kept = Vec::new();
    for (c, chunk) in cohort.patients().chunks(EVAL_CHUNK).enumerate() {
        let batch = Batch::from_records(chunk, cohort.dims, cohort.layout);
        let mut g = Graph::new();
        let inputs = BatchInputs::new(&mut g, &batch);
        let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(seed, c));
        let e = elbo_graph(&mut g, model, net, &inputs, &mut rng, Proposal::InferenceNet)?;
        for (k, w) in e.attention.iter().enumerate() {
            // Weights of the transition into step k + 1.
            let t = g.value(*w);
            let width = t.len() / t.shape()[0];
            let rows: Vec<f64> = (0..chunk.len())
                .filter(|&i| k + 1 < chunk[i].length)
                .flat_map(|i| t.data()[i * width..(i + 1) * width].to_vec())
                .collect();
            if !rows.is_empty() {
                let n = rows.len() / width;
                kept.push(Tensor::new(vec![n, t.shape()[1], t.shape()[2]], rows)?);
            }
        }
    }
    mechanisms::mean_attention(&kept)
}

/// Nested mechanism variants compared by the ablation.
pub const ABLATION_VARIANTS: [(&str, ModelKind); 3] = [
    ("linear", ModelKind::SsmPkpdLinear),
    ("linear+log-cell", ModelKind::SsmPkpdLogcell),
    ("linear+log-cell+te", ModelKind::SsmPkpd),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub fold_nelbo: Vec<f64>,
    pub mean: f64,
}

/// Cross-validated NELBO of the nested mechanism variants, each trained
/// with `base`'s settings.
pub fn ablation_suite(base: &TrainConfig, cohort: &Cohort, folds: usize, jobs: usize) -> Result<Vec<AblationRow>> {
    let candidates = ABLATION_VARIANTS
        .iter()
        .map(|(_, kind)| Candidate::Train(TrainConfig { model: *kind, ..base.clone() }))
        .collect();
    let res = grid_search_candidates(candidates, cohort, folds, base.seed, jobs)?;
    Ok(ABLATION_VARIANTS
        .iter()
        .zip(res.table)
        .map(|((name, _), rec)| AblationRow {
            variant: name.to_string(),
            mean: rec.mean_validation(),
            fold_nelbo: rec.validation_nelbo,
        })
        .collect())
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut w: W) -> Result<()> {
    let k = rows.first().map(|r| r.fold_nelbo.len()).unwrap_or(0);
    let cols: Vec<String> = (1..=k).map(|i| format!("fold{i}")).collect();
    writeln!(w, "variant,{},mean", cols.join(","))?;
    for r in rows {
        let v: Vec<String> = r.fold_nelbo.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{},{},{}", r.variant, v.join(","), r.mean)?;
    }
    Ok(())
}

/// `samples` model rollouts per patient under the recorded interventions,
/// with every entry observed.
pub fn semi_synthetic(model: &Model, cohort: &Cohort, samples: usize, seed: u64) -> Result<Cohort> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cohort.len() * samples);
    for chunk in cohort.patients().chunks(EVAL_CHUNK) {
        let batch = Batch::from_records(chunk, cohort.dims, cohort.layout);
        for _ in 0..samples {
            let roll = model.sample_forward(&batch, RolloutStart::Prior, batch.t_max(), &mut rng)?;
            for (i, rec) in chunk.iter().enumerate() {
                let mut r = rec.clone();
                for t in 0..rec.length {
                    r.x[t] = roll.x[t].row(i).to_vec();
                    r.m[t] = vec![1; cohort.dims.m];
                }
                out.push(r);
            }
        }
    }
    Cohort::new(format!("{}-semi", cohort.name), cohort.dims, cohort.layout, out)
}

/// A scalar with its uncertainty, as written to `metrics.json`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub std: f64,
}

pub type MetricsReport = BTreeMap<String, Metric>;

pub fn write_metrics_json<W: Write>(report: &MetricsReport, w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, report)?;
    Ok(())
}

#[cfg(test)]
mod tests;

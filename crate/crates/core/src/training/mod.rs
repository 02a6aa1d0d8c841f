//! Fitting models: the optimization loop, hyperparameter grids and
//! cross-validated model selection.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{k_folds, Batch, Cohort, Dims, ULayout};
use crate::diffcore::{adam_step, regularization_penalty, AdamState, Graph, ParameterSet, PenaltyMode, PenaltyScope};
use crate::error::{Error, Result};
use crate::inference::cohort_elbo;
use crate::models::{save_checkpoint, BatchInputs, Family, Model, ModelConfig, ModelKind};

/// Latent sizes searched by [`Grid::full`].
pub const GRID_LATENT: [usize; 4] = [16, 48, 64, 128];
/// Penalty strengths searched by [`Grid::full`].
pub const GRID_STRENGTH: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Latent dimension `Q` (state-space kinds).
    pub latent_dim: usize,
    /// Hidden width; the kind's default when absent.
    pub hidden: Option<usize>,
    pub inference_hidden: usize,
    pub penalty: PenaltyMode,
    pub scope: PenaltyScope,
    pub strength: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Patients per update; full batch when absent.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::SsmPkpd,
            latent_dim: 16,
            hidden: None,
            inference_hidden: 32,
            penalty: PenaltyMode::L2,
            scope: PenaltyScope::All,
            strength: 0.01,
            lr: 1e-3,
            epochs: 3000,
            batch_size: None,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Per-kind settings used for synthetic cohorts.
    pub fn preset(kind: ModelKind) -> Self {
        use ModelKind::*;
        use PenaltyMode::*;
        use PenaltyScope::*;
        let (q, hidden, penalty, strength, scope) = match kind {
            SsmLinear => (48, None, L2, 0.01, All),
            SsmNl => (48, Some(300), L2, 0.1, All),
            SsmPkpd | SsmPkpdNotexp | SsmPkpdLinear | SsmPkpdLogcell => (48, None, L1, 0.01, ExcludeAttention),
            SsmMoe => (16, Some(300), L1, 0.01, All),
            SsmAttnhist => (16, None, L1, 0.01, All),
            FommLinear => (16, None, L1, 0.1, All),
            FommNl => (16, Some(200), L1, 0.1, All),
            FommPkpd => (16, None, L1, 0.1, ExcludeAttention),
            Gru => (16, None, L2, 0.1, All),
            GruPkpd => (16, None, L2, 0.01, ExcludeAttention),
        };
        Self {
            model: kind,
            latent_dim: q,
            hidden,
            penalty,
            scope,
            strength,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::Config(format!("strength must be ≥ 0, got {}", self.strength)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, dims: Dims, layout: ULayout) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.model, dims, layout).with_latent(self.latent_dim);
        cfg.inference_hidden = self.inference_hidden;
        if let Some(h) = self.hidden {
            cfg.hidden = h;
        }
        cfg
    }
}

/// Freshly initialized parameters for a kind and data shape.
pub fn init_params(kind: ModelKind, dims: Dims, layout: ULayout, seed: u64) -> Result<ParameterSet> {
    Ok(Model::new(ModelConfig::new(kind, dims, layout), seed)?.params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub config: TrainConfig,
    /// Mean per-patient NELBO on the training cohort after fitting; for
    /// grid entries, averaged over the training portions of the folds.
    pub final_train_nelbo: f64,
    /// Mean per-patient NELBO per validation fold.
    pub validation_nelbo: Vec<f64>,
    /// Mean loss (NELBO plus penalty) per epoch.
    pub loss_trace: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn mean_validation(&self) -> f64 {
        if self.validation_nelbo.is_empty() {
            f64::NAN
        } else {
            self.validation_nelbo.iter().sum::<f64>() / self.validation_nelbo.len() as f64
        }
    }
}

/// Noise seed for the evaluation that follows training.
fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5E_ED0F_E7A1
}

/// One optimization step on `batch`; returns the loss before the update.
fn step(model: &mut Model, adam: &mut AdamState, batch: &Batch, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let inputs = BatchInputs::new(&mut g, batch);
    let obj = model.objective(&mut g, &inputs, rng)?;
    let nll = g.mean(obj.nll)?;
    let pen = regularization_penalty(&mut g, &model.params, cfg.penalty, cfg.strength, cfg.scope)?;
    let loss = g.add(nll, pen)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    model.params.zero_grad();
    g.backward_into(loss, &mut model.params)?;
    if let Some(c) = cfg.clip_norm {
        let n = model.params.grad_norm();
        if n > c {
            model.params.scale_grads(c / n);
        }
    }
    adam_step(&mut model.params, adam);
    Ok(value)
}

/// Continues fitting `model` for `cfg.epochs` epochs on `cohort`, returning
/// the per-epoch mean loss.
pub fn fit(model: &mut Model, cfg: &TrainConfig, cohort: &Cohort) -> Result<Vec<f64>> {
    fit_with(model, cfg, cohort, |_, _, _| {})
}

/// [`fit`] with a hook called after every epoch with the epoch index, its
/// mean loss and the current model.
pub fn fit_with(model: &mut Model, cfg: &TrainConfig, cohort: &Cohort, mut on_epoch: impl FnMut(usize, f64, &Model)) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(Error::invalid("cannot train on an empty cohort"));
    }
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    let bs = cfg.batch_size.unwrap_or(cohort.len()).min(cohort.len());
    let full = (bs == cohort.len()).then(|| Batch::from_cohort(cohort));
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut count = 0;
        if let Some(b) = &full {
            total = step(model, &mut adam, b, cfg, &mut rng)?;
            count = 1;
        } else {
            order.shuffle(&mut rng);
            for idx in order.chunks(bs) {
                let refs: Vec<_> = idx.iter().map(|&i| &cohort.patients()[i]).collect();
                let b = Batch::from_refs(&refs, cohort.dims, cohort.layout);
                total += step(model, &mut adam, &b, cfg, &mut rng)?;
                count += 1;
                if !total.is_finite() {
                    break;
                }
            }
        }
        let mean = total / count as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("loss became {mean} for {}", cfg.model),
            });
        }
        trace.push(mean);
        on_epoch(epoch, mean, model);
    }
    Ok(trace)
}

/// Trains a fresh model on `cohort`.
pub fn train(cfg: &TrainConfig, cohort: &Cohort) -> Result<(Model, RunRecord)> {
    train_with(cfg, cohort, |_, _, _| {})
}

/// [`train`] with the per-epoch hook of [`fit_with`].
pub fn train_with(cfg: &TrainConfig, cohort: &Cohort, on_epoch: impl FnMut(usize, f64, &Model)) -> Result<(Model, RunRecord)> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model_config(cohort.dims, cohort.layout), cfg.seed)?;
    let loss_trace = fit_with(&mut model, cfg, cohort, on_epoch)?;
    let final_train_nelbo = -cohort_elbo(&model, cohort, eval_seed(cfg.seed), 1)?.total;
    let record = RunRecord {
        label: cfg.model.tag(),
        config: cfg.clone(),
        final_train_nelbo,
        validation_nelbo: Vec::new(),
        loss_trace,
        checkpoint: None,
    };
    Ok((model, record))
}

/// Trains and writes the checkpoint under `dir`.
pub fn train_to(cfg: &TrainConfig, cohort: &Cohort, dir: &Path) -> Result<(Model, RunRecord)> {
    let (model, mut record) = train(cfg, cohort)?;
    save_checkpoint(&model, dir)?;
    record.checkpoint = Some(dir.to_path_buf());
    Ok((model, record))
}

/// Axes of a hyperparameter grid for one model kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub latent_dims: Vec<usize>,
    pub penalties: Vec<PenaltyMode>,
    pub scopes: Vec<PenaltyScope>,
    pub strengths: Vec<f64>,
}

impl Grid {
    /// Every combination of the standard search values.
    pub fn full() -> Self {
        Self {
            latent_dims: GRID_LATENT.to_vec(),
            penalties: vec![PenaltyMode::L1, PenaltyMode::L2],
            scopes: vec![PenaltyScope::All, PenaltyScope::ExcludeAttention],
            strengths: GRID_STRENGTH.to_vec(),
        }
    }

    /// The grid containing only `cfg`'s values.
    pub fn singleton(cfg: &TrainConfig) -> Self {
        Self {
            latent_dims: vec![cfg.latent_dim],
            penalties: vec![cfg.penalty],
            scopes: vec![cfg.scope],
            strengths: vec![cfg.strength],
        }
    }

    /// Configurations for `base` with each grid point substituted. The
    /// latent axis collapses for kinds without latents.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let latent: Vec<usize> = if base.model.family() == Family::Ssm {
            self.latent_dims.clone()
        } else {
            vec![base.latent_dim]
        };
        let mut out = Vec::new();
        for &q in &latent {
            for &p in &self.penalties {
                for &s in &self.scopes {
                    for &k in &self.strengths {
                        out.push(TrainConfig {
                            latent_dim: q,
                            penalty: p,
                            scope: s,
                            strength: k,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// A grid entry: a configuration to fit per fold, or a fixed model that is
/// only evaluated.
#[derive(Clone, Debug)]
pub enum Candidate {
    Train(TrainConfig),
    Fixed { label: String, config: TrainConfig, model: Box<Model> },
}

impl Candidate {
    fn config(&self) -> &TrainConfig {
        match self {
            Candidate::Train(c) => c,
            Candidate::Fixed { config, .. } => config,
        }
    }
}

pub struct GridResult {
    pub best: RunRecord,
    /// One record per candidate, in candidate order.
    pub table: Vec<RunRecord>,
}

/// Orders records by mean validation NELBO, then smaller `Q`, then smaller
/// strength.
pub fn selection_order(a: &RunRecord, b: &RunRecord) -> std::cmp::Ordering {
    a.mean_validation()
        .total_cmp(&b.mean_validation())
        .then(a.config.latent_dim.cmp(&b.config.latent_dim))
        .then(a.config.strength.total_cmp(&b.config.strength))
}

/// Cross-validated search over `candidates`; each cell runs as an
/// independent job on a pool of `jobs` threads.
pub fn grid_search_candidates(candidates: Vec<Candidate>, cohort: &Cohort, folds: usize, seed: u64, jobs: usize) -> Result<GridResult> {
    if candidates.is_empty() {
        return Err(Error::invalid("grid has no candidates"));
    }
    let parts = k_folds(cohort, folds, seed)?;
    let cells: Vec<(usize, usize)> = (0..candidates.len()).flat_map(|c| (0..parts.len()).map(move |f| (c, f))).collect();
    let run_cell = |&(c, f): &(usize, usize)| -> Result<(f64, f64, Vec<f64>)> {
        let fold = &parts[f];
        match &candidates[c] {
            Candidate::Train(cfg) => match train(cfg, &fold.train) {
                Ok((model, rec)) => {
                    let v = -cohort_elbo(&model, &fold.validation, eval_seed(cfg.seed), 1)?.total;
                    Ok((v, rec.final_train_nelbo, rec.loss_trace))
                }
                // A diverged cell loses the selection instead of aborting it.
                Err(Error::Divergence { .. }) => Ok((f64::INFINITY, f64::INFINITY, Vec::new())),
                Err(e) => Err(e),
            },
            Candidate::Fixed { model, config, .. } => {
                let v = -cohort_elbo(model, &fold.validation, eval_seed(config.seed), 1)?.total;
                let t = -cohort_elbo(model, &fold.train, eval_seed(config.seed), 1)?.total;
                Ok((v, t, Vec::new()))
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<(f64, f64, Vec<f64>)> = pool.install(|| cells.par_iter().map(run_cell).collect::<Result<_>>())?;

    let mut table = Vec::with_capacity(candidates.len());
    for (c, cand) in candidates.iter().enumerate() {
        let cell = &results[c * parts.len()..(c + 1) * parts.len()];
        let label = match cand {
            Candidate::Train(cfg) => cfg.model.tag(),
            Candidate::Fixed { label, .. } => label.clone(),
        };
        table.push(RunRecord {
            label,
            config: cand.config().clone(),
            final_train_nelbo: cell.iter().map(|r| r.1).sum::<f64>() / cell.len() as f64,
            validation_nelbo: cell.iter().map(|r| r.0).collect(),
            loss_trace: cell[0].2.clone(),
            checkpoint: None,
        });
    }
    let best = table
        .iter()
        .min_by(|a, b| selection_order(a, b))
        .cloned()
        .expect("table is nonempty");
    if !best.mean_validation().is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            detail: "every grid candidate diverged".into(),
        });
    }
    Ok(GridResult { best, table })
}

/// Cross-validated search over `grid` around `base`.
pub fn grid_search(base: &TrainConfig, grid: &Grid, cohort: &Cohort, folds: usize, jobs: usize) -> Result<GridResult> {
    let candidates = grid.configs(base).into_iter().map(Candidate::Train).collect();
    grid_search_candidates(candidates, cohort, folds, base.seed, jobs)
}

/// Writes the run table as CSV.
pub fn write_run_table<W: std::io::Write>(records: &[RunRecord], mut w: W) -> Result<()> {
    writeln!(w, "label,model,latent_dim,penalty,scope,strength,epochs,final_train_nelbo,mean_validation_nelbo,validation_nelbo")?;
    for r in records {
        let folds: Vec<String> = r.validation_nelbo.iter().map(|v| format!("{v}")).collect();
        writeln!(
            w,
            "{},{},{},{:?},{},{},{},{},{},{}",
            r.label,
            r.config.model,
            r.config.latent_dim,
            r.config.penalty,
            serde_json::to_value(r.config.scope)?.as_str().unwrap_or_default(),
            r.config.strength,
            r.config.epochs,
            r.final_train_nelbo,
            r.mean_validation(),
            folds.join(";")
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;

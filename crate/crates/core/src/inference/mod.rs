//! Structured amortized posterior over the latent states and the evidence
//! lower bound it yields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Batch, Cohort};
use crate::diffcore::{Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{
    gaussian_logpdf, masked_loglik, reparameterize, scale_rows, variance_head, Affine, BatchInputs, GruCell, History, Model, ModelConfig, Net,
    ParamBuilder, SsmNet, Transition,
};

const INFERENCE_GROUP: &str = "inference";

/// Bi-directional recurrent encoder over `[x_filled, u, b]` and the
/// combiner that turns `z_{t-1}` and both hidden states into `q(z_t | ·)`.
#[derive(Clone, Debug)]
pub struct InfNet {
    pub fwd: GruCell,
    pub bwd: GruCell,
    /// `tanh(W z_{t-1} + c)`, `[R, Q]`.
    pub comb_z: Affine,
    pub mu: Affine,
    pub var: Affine,
}

impl InfNet {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = &cfg.dims;
        let (q, r) = (cfg.latent_dim, cfg.inference_hidden);
        let inp = d.m + d.l + d.j;
        Ok(Self {
            fwd: GruCell::new(pb, "inference.fwd", INFERENCE_GROUP, Some(inp), r)?,
            bwd: GruCell::new(pb, "inference.bwd", INFERENCE_GROUP, Some(inp), r)?,
            comb_z: Affine::new(pb, "inference.comb_z", INFERENCE_GROUP, r, q)?,
            mu: Affine::new(pb, "inference.mu", INFERENCE_GROUP, q, r)?,
            var: Affine::new(pb, "inference.var", INFERENCE_GROUP, q, r)?,
        })
    }

    /// Forward and backward hidden states per step. The backward pass
    /// restarts from zero at each patient's last valid step.
    pub fn encode(&self, g: &mut Graph, ps: &ParameterSet, inputs: &BatchInputs) -> Result<(Vec<Var>, Vec<Var>)> {
        let n = inputs.n;
        let r = self.fwd.hidden;
        let enc_in: Vec<Var> = inputs
            .steps
            .iter()
            .map(|s| g.concat(&[s.xfill, s.u, inputs.b]))
            .collect::<Result<_>>()?;
        let zero = g.constant(Tensor::zeros(&[n, r]));
        let mut fwd = Vec::with_capacity(enc_in.len());
        let mut h = zero;
        for x in &enc_in {
            let gi = self.fwd.project(g, ps, *x)?;
            h = self.fwd.step(g, ps, &gi, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![zero; enc_in.len()];
        let mut h = zero;
        for t in (0..enc_in.len()).rev() {
            let gi = self.bwd.project(g, ps, enc_in[t])?;
            let next = self.bwd.step(g, ps, &gi, h)?;
            h = scale_rows(g, next, inputs.steps[t].valid)?;
            bwd[t] = h;
        }
        Ok((fwd, bwd))
    }

    /// `q(z_t | z_{t-1}, x, u, b)` from the combined hidden state.
    pub fn combine(&self, g: &mut Graph, ps: &ParameterSet, z_prev: Var, hf: Var, hb: Var) -> Result<(Var, Var)> {
        let a = self.comb_z.apply(g, ps, z_prev)?;
        let a = g.tanh(a)?;
        let s = g.add(a, hf)?;
        let s = g.add(s, hb)?;
        let hc = g.scale(s, 1.0 / 3.0)?;
        let mu = self.mu.apply(g, ps, hc)?;
        let var = variance_head(g, ps, &self.var, hc)?;
        Ok((mu, var))
    }
}

/// Distribution the latent path is sampled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Proposal {
    /// The structured posterior.
    InferenceNet,
    /// The model's own prior and transitions.
    Prior,
}

/// Per-patient (`[N]`) terms of one sampled pass.
pub struct ElboVars {
    pub elbo: Var,
    pub recon: Var,
    pub kl_t1: Var,
    pub kl_rest: Var,
    /// `log p(x, z) − log q(z)` at the sampled path.
    pub log_weight: Var,
    /// Sampled latents per step.
    pub z: Vec<Var>,
    pub attention: Vec<Var>,
}

/// Per-row `KL(N(mu_q, var_q) ‖ N(mu_p, var_p))` summed over the last axis.
pub fn kl_gaussian_graph(g: &mut Graph, mu_q: Var, var_q: Var, mu_p: Var, var_p: Var) -> Result<Var> {
    let lp = g.log(var_p)?;
    let lq = g.log(var_q)?;
    let d = g.sub(mu_q, mu_p)?;
    let d2 = g.square(d)?;
    let num = g.add(var_q, d2)?;
    let ratio = g.div(num, var_p)?;
    let s = g.sub(lp, lq)?;
    let s = g.add(s, ratio)?;
    let s = g.shift(s, -1.0)?;
    let s = g.scale(s, 0.5)?;
    g.sum_last(s)
}

/// Closed-form KL between diagonal Gaussians, summed over dimensions.
pub fn kl_gaussian(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if var_q.len() != n || mu_p.len() != n || var_p.len() != n {
        return Err(Error::invalid("kl_gaussian: length mismatch"));
    }
    let mut kl = 0.0;
    for i in 0..n {
        if !(var_q[i] > 0.0 && var_p[i] > 0.0) {
            return Err(Error::invalid(format!("kl_gaussian: nonpositive variance at {i}")));
        }
        kl += 0.5 * ((var_p[i] / var_q[i]).ln() + (var_q[i] + (mu_q[i] - mu_p[i]).powi(2)) / var_p[i] - 1.0);
    }
    Ok(kl)
}

fn accumulate(g: &mut Graph, acc: Option<Var>, v: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => g.add(a, v)?,
        None => v,
    }))
}

/// One reparameterized pass through a state space model.
pub fn elbo_graph<R: Rng + ?Sized>(g: &mut Graph, model: &Model, net: &SsmNet, inputs: &BatchInputs, rng: &mut R, proposal: Proposal) -> Result<ElboVars> {
    let ps = &model.params;
    let cfg = &model.config;
    let n = inputs.n;
    let (hf, hb) = match proposal {
        Proposal::InferenceNet => net.inference.encode(g, ps, inputs)?,
        Proposal::Prior => (Vec::new(), Vec::new()),
    };
    let mut hist = matches!(net.transition, Transition::AttnHist { .. }).then(History::default);
    let mut z_prev = g.constant(Tensor::zeros(&[n, cfg.latent_dim]));
    let (mut recon, mut kl_t1, mut kl_rest, mut lw) = (None, None, None, None);
    let mut zs = Vec::with_capacity(inputs.steps.len());
    let mut attention = Vec::new();
    for (t, step) in inputs.steps.iter().enumerate() {
        let (mu_p, var_p) = if t == 0 {
            net.prior(g, ps, inputs.b)?
        } else {
            let (mu, var, w) = net.transition(g, ps, cfg, z_prev, &inputs.steps[t - 1], inputs.b, hist.as_mut())?;
            if let Some(w) = w {
                attention.push(w);
            }
            (mu, var)
        };
        let (mu_q, var_q) = match proposal {
            Proposal::InferenceNet => net.inference.combine(g, ps, z_prev, hf[t], hb[t])?,
            Proposal::Prior => (mu_p, var_p),
        };
        let z = reparameterize(g, mu_q, var_q, rng)?;
        if proposal == Proposal::InferenceNet {
            let kl = kl_gaussian_graph(g, mu_q, var_q, mu_p, var_p)?;
            let kl = g.mul(kl, step.valid)?;
            if t == 0 {
                kl_t1 = Some(kl);
            } else {
                kl_rest = accumulate(g, kl_rest, kl)?;
            }
            let lp = gaussian_logpdf(g, z, mu_p, var_p)?;
            let lq = gaussian_logpdf(g, z, mu_q, var_q)?;
            let d = g.sub(lp, lq)?;
            let d = g.sum_last(d)?;
            let d = g.mul(d, step.valid)?;
            lw = accumulate(g, lw, d)?;
        }
        let (mu_x, var_x) = net.emission(g, ps, z)?;
        let ll = masked_loglik(g, step.x, mu_x, var_x, step.m)?;
        recon = accumulate(g, recon, ll)?;
        lw = accumulate(g, lw, ll)?;
        zs.push(z);
        z_prev = z;
    }
    let zero = g.constant(Tensor::zeros(&[n]));
    let recon = recon.unwrap_or(zero);
    let kl_t1 = kl_t1.unwrap_or(zero);
    let kl_rest = kl_rest.unwrap_or(zero);
    let log_weight = lw.unwrap_or(zero);
    let kl = g.add(kl_t1, kl_rest)?;
    let elbo = g.sub(recon, kl)?;
    Ok(ElboVars {
        elbo,
        recon,
        kl_t1,
        kl_rest,
        log_weight,
        z: zs,
        attention,
    })
}

/// Posterior means and variances per step, each `[N, Q]`, with `z_{t-1}`
/// drawn from the posterior of the previous step.
pub struct GaussianSeq {
    pub mu: Vec<Tensor>,
    pub var: Vec<Tensor>,
    pub z: Vec<Tensor>,
}

pub fn posterior_params(model: &Model, batch: &Batch, seed: u64) -> Result<GaussianSeq> {
    let net = ssm_net(model)?;
    let ps = &model.params;
    let mut g = Graph::new();
    let inputs = BatchInputs::new(&mut g, batch);
    let (hf, hb) = net.inference.encode(&mut g, ps, &inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z_prev = g.constant(Tensor::zeros(&[inputs.n, model.config.latent_dim]));
    let mut out = GaussianSeq {
        mu: Vec::new(),
        var: Vec::new(),
        z: Vec::new(),
    };
    for t in 0..inputs.steps.len() {
        let (mu, var) = net.inference.combine(&mut g, ps, z_prev, hf[t], hb[t])?;
        let z = reparameterize(&mut g, mu, var, &mut rng)?;
        out.mu.push(g.value(mu).clone());
        out.var.push(g.value(var).clone());
        out.z.push(g.value(z).clone());
        z_prev = z;
    }
    Ok(out)
}

pub(crate) fn ssm_net(model: &Model) -> Result<&SsmNet> {
    match &model.net {
        Net::Ssm(n) => Ok(n),
        _ => Err(Error::invalid(format!("{} has no latent states", model.kind()))),
    }
}

/// Bound terms averaged over patients, with the per-patient bound.
#[derive(Clone, Debug, PartialEq)]
pub struct ELBOBreakdown {
    pub recon: f64,
    pub kl_t1: f64,
    pub kl_rest: f64,
    /// `recon − kl_t1 − kl_rest`.
    pub total: f64,
    pub per_patient: Vec<f64>,
    pub n_samples: usize,
}

/// Monte Carlo bound with `n_samples` reparameterized paths per patient.
/// For models without latents the exact log-likelihood is returned.
pub fn elbo(model: &Model, batch: &Batch, seed: u64, n_samples: usize) -> Result<ELBOBreakdown> {
    if n_samples == 0 {
        return Err(Error::invalid("elbo needs n_samples ≥ 1"));
    }
    let n = batch.len();
    let rep = if n_samples > 1 { batch.repeat_rows(n_samples) } else { batch.clone() };
    let mut g = Graph::new();
    let inputs = BatchInputs::new(&mut g, &rep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obj = model.objective(&mut g, &inputs, &mut rng)?;
    let avg = |v: Option<Var>| -> Vec<f64> {
        match v {
            None => vec![0.0; n],
            Some(v) => g.value(v).data().chunks_exact(n_samples).map(|c| c.iter().sum::<f64>() / n_samples as f64).collect(),
        }
    };
    let recon = avg(Some(obj.recon));
    let kl_t1 = avg(obj.kl_t1);
    let kl_rest = avg(obj.kl_rest);
    let per_patient: Vec<f64> = (0..n).map(|i| recon[i] - kl_t1[i] - kl_rest[i]).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(ELBOBreakdown {
        recon: mean(&recon),
        kl_t1: mean(&kl_t1),
        kl_rest: mean(&kl_rest),
        total: mean(&per_patient),
        per_patient,
        n_samples,
    })
}

/// Patients evaluated per graph by [`cohort_elbo`].
pub const EVAL_CHUNK: usize = 256;

/// [`elbo`] over a whole cohort, evaluated in chunks of [`EVAL_CHUNK`]
/// patients with chunk-specific noise streams.
pub fn cohort_elbo(model: &Model, cohort: &Cohort, seed: u64, n_samples: usize) -> Result<ELBOBreakdown> {
    if cohort.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty cohort"));
    }
    let mut per_patient = Vec::with_capacity(cohort.len());
    let (mut recon, mut kl_t1, mut kl_rest) = (0.0, 0.0, 0.0);
    for (c, chunk) in cohort.patients().chunks(EVAL_CHUNK).enumerate() {
        let batch = Batch::from_records(chunk, cohort.dims, cohort.layout);
        let e = elbo(model, &batch, chunk_seed(seed, c), n_samples)?;
        let w = chunk.len() as f64;
        recon += e.recon * w;
        kl_t1 += e.kl_t1 * w;
        kl_rest += e.kl_rest * w;
        per_patient.extend(e.per_patient);
    }
    let n = cohort.len() as f64;
    Ok(ELBOBreakdown {
        recon: recon / n,
        kl_t1: kl_t1 / n,
        kl_rest: kl_rest / n,
        total: per_patient.iter().sum::<f64>() / n,
        per_patient,
        n_samples,
    })
}

pub(crate) fn chunk_seed(seed: u64, chunk: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(chunk as u64)
}

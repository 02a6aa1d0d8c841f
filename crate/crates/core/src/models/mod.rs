//! Generative model families: state space models with pluggable
//! transitions, first-order Markov models on the observations, and
//! autoregressive GRUs.

mod checkpoint;
mod layers;
mod net;
mod sample;
mod transition;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_CONFIG, CHECKPOINT_MANIFEST, CHECKPOINT_BLOB};
pub use layers::{
    gaussian_logpdf, masked_loglik, reparameterize, scale_rows, variance_head, Affine, GateInputs, GruCell, Mlp2, ParamBuilder, VAR_FLOOR,
};
pub use net::{FommMean, FommNet, GruNet, Net, PkpdLift, SsmNet};
pub use sample::{Rollout, RolloutStart};
pub use transition::{
    mechanism_param_count, AttnIds, History, MechDims, MechParams, MechStack, Mechanism, Transition, TransitionOut, MOE_EXPERTS,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Dims, StepData, ULayout};
use crate::diffcore::{Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SsmLinear,
    SsmNl,
    SsmMoe,
    SsmAttnhist,
    /// Attention over `g1, g2, g3`.
    SsmPkpd,
    /// Attention over `g1, g2, g1'`.
    SsmPkpdNotexp,
    /// Attention over `g1` alone.
    SsmPkpdLinear,
    /// Attention over `g1, g2`.
    SsmPkpdLogcell,
    FommLinear,
    FommNl,
    FommPkpd,
    Gru,
    GruPkpd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Ssm,
    Fomm,
    Gru,
}

impl ModelKind {
    pub const ALL: [ModelKind; 13] = [
        ModelKind::SsmLinear,
        ModelKind::SsmNl,
        ModelKind::SsmMoe,
        ModelKind::SsmAttnhist,
        ModelKind::SsmPkpd,
        ModelKind::SsmPkpdNotexp,
        ModelKind::SsmPkpdLinear,
        ModelKind::SsmPkpdLogcell,
        ModelKind::FommLinear,
        ModelKind::FommNl,
        ModelKind::FommPkpd,
        ModelKind::Gru,
        ModelKind::GruPkpd,
    ];

    pub fn family(self) -> Family {
        use ModelKind::*;
        match self {
            FommLinear | FommNl | FommPkpd => Family::Fomm,
            Gru | GruPkpd => Family::Gru,
            _ => Family::Ssm,
        }
    }

    /// Mechanisms combined by the transition, if it combines any.
    pub fn mechanisms(self) -> Option<Vec<Mechanism>> {
        use Mechanism::*;
        use ModelKind::*;
        match self {
            SsmPkpd | FommPkpd | GruPkpd => Some(vec![G1, G2, G3]),
            SsmPkpdNotexp => Some(vec![G1, G2, G1]),
            SsmPkpdLinear => Some(vec![G1]),
            SsmPkpdLogcell => Some(vec![G1, G2]),
            _ => None,
        }
    }

    pub fn tag(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    }

    /// Hidden width used when none is configured; 0 for kinds without one.
    pub fn default_hidden(self) -> usize {
        use ModelKind::*;
        match self {
            SsmNl | SsmMoe => 300,
            SsmAttnhist => 32,
            FommNl => 200,
            Gru | GruPkpd => 64,
            _ => 0,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            let known: Vec<String> = ModelKind::ALL.iter().map(|k| k.tag()).collect();
            Error::Config(format!("unknown model tag `{s}` (expected one of {})", known.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dims: Dims,
    pub layout: ULayout,
    /// Latent dimension `Q` (state-space kinds only).
    pub latent_dim: usize,
    /// Hidden width of MLP transitions, the history score network, or the GRU.
    pub hidden: usize,
    /// Hidden width `R` of each direction of the inference encoder.
    pub inference_hidden: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, dims: Dims, layout: ULayout) -> Self {
        Self {
            kind,
            dims,
            layout,
            latent_dim: 16,
            hidden: kind.default_hidden(),
            inference_hidden: 32,
        }
    }

    pub fn with_latent(mut self, q: usize) -> Self {
        self.latent_dim = q;
        self
    }

    pub fn with_hidden(mut self, h: usize) -> Self {
        self.hidden = h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.m == 0 || d.t == 0 || d.k == 0 || d.l < d.k {
            return Err(Error::Config(format!("invalid dims {d:?}")));
        }
        let needs_clock = self.kind.mechanisms().is_some();
        if needs_clock && self.layout.local_clock.is_none() {
            return Err(Error::Config(format!("{} needs a local-clock column", self.kind)));
        }
        if self.kind.family() == Family::Ssm && (self.latent_dim == 0 || self.inference_hidden == 0) {
            return Err(Error::Config("latent_dim and inference_hidden must be positive".into()));
        }
        if self.kind.default_hidden() > 0 && self.hidden == 0 {
            return Err(Error::Config(format!("{} needs a positive hidden width", self.kind)));
        }
        Ok(())
    }

    /// Upper end of the learned `γl` range.
    pub fn gamma_scale(&self) -> f64 {
        self.dims.t as f64 / 2.0
    }
}

/// Per-step batch tensors placed on a graph as constants.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs {
    pub x: Var,
    pub m: Var,
    pub xfill: Var,
    pub u: Var,
    pub lines: Var,
    pub lc: Var,
    pub valid: Var,
}

impl StepInputs {
    pub fn new(g: &mut Graph, s: &StepData) -> Self {
        Self {
            x: g.constant(s.x.clone()),
            m: g.constant(s.m.clone()),
            xfill: g.constant(s.xfill.clone()),
            u: g.constant(s.u.clone()),
            lines: g.constant(s.lines.clone()),
            lc: g.constant(s.lc.clone()),
            valid: g.constant(s.valid.clone()),
        }
    }

    /// All-zero inputs, standing in for the step before the first.
    pub fn zeros(g: &mut Graph, n: usize, dims: &Dims) -> Self {
        let z = |g: &mut Graph, w: usize| g.constant(Tensor::zeros(&[n, w]));
        Self {
            x: z(g, dims.m),
            m: z(g, dims.m),
            xfill: z(g, dims.m),
            u: z(g, dims.l),
            lines: z(g, dims.k),
            lc: g.constant(Tensor::zeros(&[n])),
            valid: g.constant(Tensor::zeros(&[n])),
        }
    }
}

pub struct BatchInputs {
    pub n: usize,
    pub b: Var,
    pub steps: Vec<StepInputs>,
}

impl BatchInputs {
    pub fn new(g: &mut Graph, batch: &Batch) -> Self {
        Self {
            n: batch.len(),
            b: g.constant(batch.b.clone()),
            steps: batch.steps.iter().map(|s| StepInputs::new(g, s)).collect(),
        }
    }
}

/// Per-patient terms of a model's training objective, each `[N]`.
pub struct Objective {
    /// Negative bound (state-space kinds) or exact negative log-likelihood.
    pub nll: Var,
    /// Expected log-likelihood of the observations.
    pub recon: Var,
    pub kl_t1: Option<Var>,
    pub kl_rest: Option<Var>,
    /// `[N, Q, d]` mechanism weights per transition step.
    pub attention: Vec<Var>,
}

/// Model configuration plus learned parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub net: Net,
}

impl Model {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let net = Net::build(&config, &mut params, seed)?;
        Ok(Model { config, params, net })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Per-patient objective on a graph. `rng` drives the reparameterized
    /// latent samples of state-space kinds and is unused otherwise.
    pub fn objective<R: Rng + ?Sized>(&self, g: &mut Graph, inputs: &BatchInputs, rng: &mut R) -> Result<Objective> {
        match &self.net {
            Net::Ssm(net) => {
                let e = crate::inference::elbo_graph(g, self, net, inputs, rng, crate::inference::Proposal::InferenceNet)?;
                let neg = g.neg(e.elbo)?;
                Ok(Objective {
                    nll: neg,
                    recon: e.recon,
                    kl_t1: Some(e.kl_t1),
                    kl_rest: Some(e.kl_rest),
                    attention: e.attention,
                })
            }
            Net::Fomm(net) => {
                let (ll, attention) = net.loglik(g, &self.params, &self.config, inputs)?;
                Ok(Objective {
                    nll: g.neg(ll)?,
                    recon: ll,
                    kl_t1: None,
                    kl_rest: None,
                    attention,
                })
            }
            Net::Gru(net) => {
                let ll = net.loglik(g, &self.params, &self.config, inputs)?;
                Ok(Objective {
                    nll: g.neg(ll)?,
                    recon: ll,
                    kl_t1: None,
                    kl_rest: None,
                    attention: Vec::new(),
                })
            }
        }
    }

    /// Scalars in transition-side groups: transition, attention and the
    /// recurrent cell of autoregressive kinds.
    pub fn transition_param_count(&self) -> usize {
        self.params.num_scalars_where(|g| {
            g == transition::TRANSITION_GROUP || g == crate::diffcore::ATTENTION_GROUP || g == net::RECURRENT_GROUP
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Mechanism column labels, for kinds that combine mechanisms.
    pub fn mechanism_labels(&self) -> Option<Vec<String>> {
        match &self.net {
            Net::Ssm(SsmNet { transition: Transition::Pkpd { mechs, .. }, .. }) => Some(mechs.labels()),
            Net::Fomm(FommNet { mean: FommMean::Pkpd { mechs, .. }, .. }) => Some(mechs.labels()),
            Net::Gru(GruNet { lift: Some(l), .. }) => Some(l.mechs.labels()),
            _ => None,
        }
    }
}

/// Closed-form transition-side scalar count for a configuration.
pub fn expected_transition_params(cfg: &ModelConfig) -> usize {
    let d = &cfg.dims;
    let q = cfg.latent_dim;
    let h = cfg.hidden;
    let zub = q + d.l + d.j;
    let mlp = |inp: usize, hid: usize, out: usize| inp * hid + hid + hid * out + out;
    let mech = |q: usize| MechDims { q, l: d.l, j: d.j, k: d.k };
    let stack = |q: usize| -> usize {
        cfg.kind
            .mechanisms()
            .unwrap_or_default()
            .iter()
            .map(|&m| mechanism_param_count(m, mech(q)))
            .sum()
    };
    let n_mech = cfg.kind.mechanisms().map(|m| m.len()).unwrap_or(0);
    use ModelKind::*;
    match cfg.kind {
        SsmLinear => zub * q + q,
        SsmNl => mlp(zub, h, q),
        SsmMoe => MOE_EXPERTS * mlp(zub, h, q) + MOE_EXPERTS,
        SsmAttnhist => q * q + q + mlp(d.m + d.l, h, q),
        SsmPkpd | SsmPkpdNotexp | SsmPkpdLinear | SsmPkpdLogcell => stack(q) + 4 * q * q,
        FommLinear => (d.m + d.l + d.j) * d.m + d.m,
        FommNl => mlp(d.m + d.l + d.j, h, d.m),
        FommPkpd => stack(d.m) + n_mech,
        Gru => 3 * (d.m + d.l + d.j) * h + 3 * h * h + 3 * h,
        GruPkpd => (d.m + d.l + d.j) * 3 * h + 3 * h + stack(3 * h) + n_mech + 3 * h * h + 3 * h,
    }
}

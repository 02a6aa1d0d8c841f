use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{masked_loglik, variance_head, Affine, GateInputs, GruCell, Mlp2, ParamBuilder};
use super::transition::{AttnIds, History, MechDims, MechStack, Transition, TransitionOut, MOE_EXPERTS, TRANSITION_GROUP};
use super::{BatchInputs, Family, ModelConfig, ModelKind, StepInputs};
use crate::diffcore::{Graph, ParamId, ParameterSet, Var, ATTENTION_GROUP};
use crate::error::Result;
use crate::inference::InfNet;
use crate::mechanisms::{self, MechInputs};

const PRIOR_GROUP: &str = "prior";
const VARIANCE_GROUP: &str = "variance";
const EMISSION_GROUP: &str = "emission";
pub(crate) const RECURRENT_GROUP: &str = "recurrent";

#[derive(Clone, Debug)]
pub enum Net {
    Ssm(SsmNet),
    Fomm(FommNet),
    Gru(GruNet),
}

impl Net {
    pub(crate) fn build(cfg: &ModelConfig, params: &mut ParameterSet, seed: u64) -> Result<Net> {
        let mut pb = ParamBuilder {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        Ok(match cfg.kind.family() {
            Family::Ssm => Net::Ssm(SsmNet::new(&mut pb, cfg)?),
            Family::Fomm => Net::Fomm(FommNet::new(&mut pb, cfg)?),
            Family::Gru => Net::Gru(GruNet::new(&mut pb, cfg)?),
        })
    }
}

fn mech_dims(cfg: &ModelConfig, q: usize) -> MechDims {
    MechDims {
        q,
        l: cfg.dims.l,
        j: cfg.dims.j,
        k: cfg.dims.k,
    }
}

/// State space model: prior, transition, emission and its inference network.
#[derive(Clone, Debug)]
pub struct SsmNet {
    pub prior_mu: Affine,
    pub prior_var: Affine,
    pub transition: Transition,
    pub trans_var: Affine,
    pub emit_mu: Affine,
    pub emit_var: Affine,
    pub inference: InfNet,
}

impl SsmNet {
    fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = &cfg.dims;
        let q = cfg.latent_dim;
        let zub = q + d.l + d.j;
        let h = cfg.hidden;
        let transition = match cfg.kind {
            ModelKind::SsmLinear => Transition::Linear(Affine::new(pb, "transition.linear", TRANSITION_GROUP, q, zub)?),
            ModelKind::SsmNl => Transition::Nl(Mlp2::new(pb, "transition.mlp", TRANSITION_GROUP, zub, h, q)?),
            ModelKind::SsmMoe => Transition::Moe {
                experts: (0..MOE_EXPERTS)
                    .map(|i| Mlp2::new(pb, &format!("transition.expert{i}"), TRANSITION_GROUP, zub, h, q))
                    .collect::<Result<_>>()?,
                delta: pb.bias("transition.moe_delta", ATTENTION_GROUP, MOE_EXPERTS)?,
            },
            ModelKind::SsmAttnhist => Transition::AttnHist {
                w_h: Affine::new(pb, "transition.w_h", TRANSITION_GROUP, q, q)?,
                score: Mlp2::new(pb, "transition.history_score", ATTENTION_GROUP, d.m + d.l, h, q)?,
            },
            kind => {
                let kinds = kind.mechanisms().expect("remaining state-space kinds combine mechanisms");
                Transition::Pkpd {
                    mechs: MechStack::new(pb, "transition", TRANSITION_GROUP, &kinds, mech_dims(cfg, q))?,
                    attn: AttnIds::new(pb, "transition.attn", q)?,
                }
            }
        };
        Ok(Self {
            prior_mu: Affine::new(pb, "prior.mu", PRIOR_GROUP, q, d.j)?,
            prior_var: Affine::new(pb, "prior.var", PRIOR_GROUP, q, d.j)?,
            transition,
            trans_var: Affine::new(pb, "transition_var", VARIANCE_GROUP, q, zub)?,
            emit_mu: Affine::new(pb, "emission.mu", EMISSION_GROUP, d.m, q)?,
            emit_var: Affine::new(pb, "emission.var", EMISSION_GROUP, d.m, q)?,
            inference: InfNet::new(pb, cfg)?,
        })
    }

    /// `p(z_0 | b)`.
    pub fn prior(&self, g: &mut Graph, ps: &ParameterSet, b: Var) -> Result<(Var, Var)> {
        let mu = self.prior_mu.apply(g, ps, b)?;
        let var = variance_head(g, ps, &self.prior_var, b)?;
        Ok((mu, var))
    }

    /// `p(z_t | z_{t-1}, u_{t-1}, b)`; returns mean, variance and any
    /// mechanism weights.
    #[allow(clippy::too_many_arguments)]
    pub fn transition(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        cfg: &ModelConfig,
        z_prev: Var,
        prev: &StepInputs,
        b: Var,
        hist: Option<&mut History>,
    ) -> Result<(Var, Var, Option<Var>)> {
        let TransitionOut { mu, weights } = self.transition.mean(g, ps, z_prev, prev, b, hist, cfg.gamma_scale())?;
        let zub = g.concat(&[z_prev, prev.u, b])?;
        let var = variance_head(g, ps, &self.trans_var, zub)?;
        Ok((mu, var, weights))
    }

    /// `p(x_t | z_t)`.
    pub fn emission(&self, g: &mut Graph, ps: &ParameterSet, z: Var) -> Result<(Var, Var)> {
        let mu = self.emit_mu.apply(g, ps, z)?;
        let var = variance_head(g, ps, &self.emit_var, z)?;
        Ok((mu, var))
    }
}

#[derive(Clone, Debug)]
pub enum FommMean {
    Linear(Affine),
    Nl(Mlp2),
    Pkpd { mechs: MechStack, delta: ParamId },
}

/// First-order Markov model on the observations.
#[derive(Clone, Debug)]
pub struct FommNet {
    pub prior_mu: Affine,
    pub prior_var: Affine,
    pub mean: FommMean,
    pub var: Affine,
}

impl FommNet {
    fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = &cfg.dims;
        let xub = d.m + d.l + d.j;
        let mean = match cfg.kind {
            ModelKind::FommLinear => FommMean::Linear(Affine::new(pb, "transition.linear", TRANSITION_GROUP, d.m, xub)?),
            ModelKind::FommNl => FommMean::Nl(Mlp2::new(pb, "transition.mlp", TRANSITION_GROUP, xub, cfg.hidden, d.m)?),
            _ => {
                let kinds = cfg.kind.mechanisms().expect("pkpd kind");
                FommMean::Pkpd {
                    mechs: MechStack::new(pb, "transition", TRANSITION_GROUP, &kinds, mech_dims(cfg, d.m))?,
                    delta: pb.bias("transition.delta", ATTENTION_GROUP, kinds.len())?,
                }
            }
        };
        Ok(Self {
            prior_mu: Affine::new(pb, "prior.mu", PRIOR_GROUP, d.m, d.j)?,
            prior_var: Affine::new(pb, "prior.var", PRIOR_GROUP, d.m, d.j)?,
            mean,
            var: Affine::new(pb, "transition_var", VARIANCE_GROUP, d.m, xub)?,
        })
    }

    /// `p(x_0 | b)`.
    pub fn prior(&self, g: &mut Graph, ps: &ParameterSet, b: Var) -> Result<(Var, Var)> {
        let mu = self.prior_mu.apply(g, ps, b)?;
        let var = variance_head(g, ps, &self.prior_var, b)?;
        Ok((mu, var))
    }

    /// `p(x_t | x_{t-1}, u_{t-1}, b)` with `x_prev` the (filled) previous
    /// observation.
    pub fn step(&self, g: &mut Graph, ps: &ParameterSet, cfg: &ModelConfig, x_prev: Var, prev: &StepInputs, b: Var) -> Result<(Var, Var)> {
        let xub = g.concat(&[x_prev, prev.u, b])?;
        let mu = match &self.mean {
            FommMean::Linear(a) => a.apply(g, ps, xub)?,
            FommMean::Nl(m) => m.apply(g, ps, xub)?,
            FommMean::Pkpd { mechs, delta } => {
                let inp = MechInputs {
                    z: x_prev,
                    u: prev.u,
                    b,
                    lines: prev.lines,
                    lc: prev.lc,
                };
                let outs = mechs.apply(g, ps, &inp, cfg.gamma_scale())?;
                let dv = g.param(ps, *delta);
                mechanisms::softmax_combine(g, &outs, dv)?
            }
        };
        let var = variance_head(g, ps, &self.var, xub)?;
        Ok((mu, var))
    }

    /// Per-patient `Σ_t log p(x_t | ·)` over observed entries, `[N]`.
    pub fn loglik(&self, g: &mut Graph, ps: &ParameterSet, cfg: &ModelConfig, inputs: &BatchInputs) -> Result<(Var, Vec<Var>)> {
        let mut total: Option<Var> = None;
        for (t, step) in inputs.steps.iter().enumerate() {
            let (mu, var) = if t == 0 {
                self.prior(g, ps, inputs.b)?
            } else {
                let prev = &inputs.steps[t - 1];
                self.step(g, ps, cfg, prev.xfill, prev, inputs.b)?
            };
            let ll = masked_loglik(g, step.x, mu, var, step.m)?;
            total = Some(match total {
                Some(acc) => g.add(acc, ll)?,
                None => ll,
            });
        }
        let total = match total {
            Some(v) => v,
            None => g.constant(crate::diffcore::Tensor::zeros(&[inputs.n])),
        };
        Ok((total, Vec::new()))
    }
}

/// Mechanism lift that replaces the GRU input projections.
#[derive(Clone, Debug)]
pub struct PkpdLift {
    /// `S = W_s [x, u, b] + b_s`, width `3H`.
    pub s: Affine,
    pub mechs: MechStack,
    pub delta: ParamId,
}

#[derive(Clone, Debug)]
pub struct GruNet {
    pub cell: GruCell,
    pub lift: Option<PkpdLift>,
    pub out_mu: Affine,
    pub out_var: Affine,
}

impl GruNet {
    fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = &cfg.dims;
        let h = cfg.hidden;
        let xub = d.m + d.l + d.j;
        let (cell, lift) = if cfg.kind == ModelKind::GruPkpd {
            let kinds = cfg.kind.mechanisms().expect("pkpd kind");
            let lift = PkpdLift {
                s: Affine::new(pb, "transition.lift", TRANSITION_GROUP, 3 * h, xub)?,
                mechs: MechStack::new(pb, "transition", TRANSITION_GROUP, &kinds, mech_dims(cfg, 3 * h))?,
                delta: pb.bias("transition.delta", ATTENTION_GROUP, kinds.len())?,
            };
            (GruCell::new(pb, "gru", RECURRENT_GROUP, None, h)?, Some(lift))
        } else {
            (GruCell::new(pb, "gru", RECURRENT_GROUP, Some(xub), h)?, None)
        };
        Ok(Self {
            cell,
            lift,
            out_mu: Affine::new(pb, "emission.mu", EMISSION_GROUP, d.m, h)?,
            out_var: Affine::new(pb, "emission.var", EMISSION_GROUP, d.m, h)?,
        })
    }

    /// Gate inputs from `[x_prev, u_prev, b]`, either plain projections or
    /// the mechanism combination split into three `H`-wide blocks.
    pub fn gate_inputs(&self, g: &mut Graph, ps: &ParameterSet, cfg: &ModelConfig, x_prev: Var, prev: &StepInputs, b: Var) -> Result<GateInputs> {
        let xub = g.concat(&[x_prev, prev.u, b])?;
        match &self.lift {
            None => self.cell.project(g, ps, xub),
            Some(lift) => {
                let s = lift.s.apply(g, ps, xub)?;
                let inp = MechInputs {
                    z: s,
                    u: prev.u,
                    b,
                    lines: prev.lines,
                    lc: prev.lc,
                };
                let outs = lift.mechs.apply(g, ps, &inp, cfg.gamma_scale())?;
                let dv = g.param(ps, lift.delta);
                let o = mechanisms::softmax_combine(g, &outs, dv)?;
                let h = self.cell.hidden;
                Ok(GateInputs {
                    f: g.slice(o, 0, h)?,
                    r: g.slice(o, h, 2 * h)?,
                    h: g.slice(o, 2 * h, 3 * h)?,
                })
            }
        }
    }

    /// `h_t` from `h_{t-1}` and the previous observation and interventions.
    #[allow(clippy::too_many_arguments)]
    pub fn advance(&self, g: &mut Graph, ps: &ParameterSet, cfg: &ModelConfig, x_prev: Var, prev: &StepInputs, b: Var, h: Var) -> Result<Var> {
        let gi = self.gate_inputs(g, ps, cfg, x_prev, prev, b)?;
        self.cell.step(g, ps, &gi, h)
    }

    pub fn emit(&self, g: &mut Graph, ps: &ParameterSet, h: Var) -> Result<(Var, Var)> {
        let mu = self.out_mu.apply(g, ps, h)?;
        let var = variance_head(g, ps, &self.out_var, h)?;
        Ok((mu, var))
    }

    pub fn initial_state(&self, g: &mut Graph, n: usize) -> Var {
        g.constant(crate::diffcore::Tensor::zeros(&[n, self.cell.hidden]))
    }

    /// Per-patient `Σ_t log p(x_t | x_{<t}, u_{<t}, b)`, `[N]`.
    pub fn loglik(&self, g: &mut Graph, ps: &ParameterSet, cfg: &ModelConfig, inputs: &BatchInputs) -> Result<Var> {
        let n = inputs.n;
        let start = StepInputs::zeros(g, n, &cfg.dims);
        let mut h = self.initial_state(g, n);
        let mut total: Option<Var> = None;
        for (t, step) in inputs.steps.iter().enumerate() {
            let prev = if t == 0 { start } else { inputs.steps[t - 1] };
            h = self.advance(g, ps, cfg, prev.xfill, &prev, inputs.b, h)?;
            let (mu, var) = self.emit(g, ps, h)?;
            let ll = masked_loglik(g, step.x, mu, var, step.m)?;
            total = Some(match total {
                Some(acc) => g.add(acc, ll)?,
                None => ll,
            });
        }
        match total {
            Some(v) => Ok(v),
            None => Ok(g.constant(crate::diffcore::Tensor::zeros(&[n]))),
        }
    }
}


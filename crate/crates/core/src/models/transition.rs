use serde::{Deserialize, Serialize};

use super::layers::{Affine, Mlp2, ParamBuilder};
use super::StepInputs;
use crate::diffcore::{Graph, ParamId, ParameterSet, Var, ATTENTION_GROUP};
use crate::error::{Error, Result};
use crate::mechanisms::{self, AttnVars, G3Vars, MechInputs};

pub(crate) const TRANSITION_GROUP: &str = "transition";

/// One mechanism slot in a combined transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    /// Baseline-gated linear response.
    G1,
    /// Log-cell kill.
    G2,
    /// Treatment exponential.
    G3,
}

/// Learned parameters of one mechanism instance.
#[derive(Clone, Debug)]
pub enum MechParams {
    G1 { w_lin: ParamId, b_lin: ParamId },
    G2 { rho: ParamId, delta: ParamId, w_lc: ParamId, b_lc: ParamId },
    G3 { w_d: ParamId, b_d: ParamId, w_e: ParamId, b_e: ParamId, b0: ParamId, bl: ParamId },
}

/// Sizes a mechanism needs: state width `q`, interventions `l`, baseline
/// `j`, lines `k`.
#[derive(Clone, Copy, Debug)]
pub struct MechDims {
    pub q: usize,
    pub l: usize,
    pub j: usize,
    pub k: usize,
}

impl MechParams {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: &str, mech: Mechanism, d: MechDims) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(match mech {
            Mechanism::G1 => MechParams::G1 {
                w_lin: pb.weight(&n("w_lin"), group, d.q, d.l + d.j)?,
                b_lin: pb.bias(&n("b_lin"), group, d.q)?,
            },
            Mechanism::G2 => MechParams::G2 {
                rho: pb.filled(&n("rho"), group, d.q, 0.01)?,
                delta: pb.filled(&n("delta"), group, d.q, 0.01)?,
                w_lc: pb.weight(&n("w_lc"), group, d.q, d.l)?,
                b_lc: pb.bias(&n("b_lc"), group, d.q)?,
            },
            Mechanism::G3 => MechParams::G3 {
                w_d: pb.weight(&n("w_d"), group, d.q, d.q + d.l + d.j)?,
                b_d: pb.bias(&n("b_d"), group, d.q)?,
                w_e: pb.weight(&n("w_e"), group, 3, d.k)?,
                b_e: pb.bias(&n("b_e"), group, 3)?,
                b0: pb.bias(&n("b0"), group, d.q)?,
                bl: pb.bias(&n("bl"), group, d.q)?,
            },
        })
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParameterSet, inp: &MechInputs, gamma_scale: f64) -> Result<Var> {
        let mut p = |id: &ParamId| g.param(ps, *id);
        match self {
            MechParams::G1 { w_lin, b_lin } => {
                let (w, b) = (p(w_lin), p(b_lin));
                mechanisms::g1(g, inp.z, inp.u, inp.b, w, b)
            }
            MechParams::G2 { rho, delta, w_lc, b_lc } => {
                let (r, d, w, b) = (p(rho), p(delta), p(w_lc), p(b_lc));
                mechanisms::g2(g, inp.z, inp.u, inp.lc, r, d, w, b)
            }
            MechParams::G3 { w_d, b_d, w_e, b_e, b0, bl } => {
                let vars = G3Vars {
                    w_d: p(w_d),
                    b_d: p(b_d),
                    w_e: p(w_e),
                    b_e: p(b_e),
                    b0: p(b0),
                    bl: p(bl),
                };
                mechanisms::g3(g, inp, &vars, gamma_scale)
            }
        }
    }
}

/// Closed-form scalar count of one mechanism instance.
pub fn mechanism_param_count(mech: Mechanism, d: MechDims) -> usize {
    match mech {
        Mechanism::G1 => d.q * (d.l + d.j) + d.q,
        Mechanism::G2 => 3 * d.q + d.q * d.l,
        Mechanism::G3 => d.q * (d.q + d.l + d.j) + d.q + 3 * d.k + 3 + 2 * d.q,
    }
}

/// An ordered list of mechanism instances.
#[derive(Clone, Debug)]
pub struct MechStack {
    pub kinds: Vec<Mechanism>,
    pub params: Vec<MechParams>,
}

impl MechStack {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: &str, kinds: &[Mechanism], d: MechDims) -> Result<Self> {
        let params = kinds
            .iter()
            .enumerate()
            .map(|(i, &m)| MechParams::new(pb, &format!("{name}.m{i}"), group, m, d))
            .collect::<Result<_>>()?;
        Ok(Self {
            kinds: kinds.to_vec(),
            params,
        })
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParameterSet, inp: &MechInputs, gamma_scale: f64) -> Result<Vec<Var>> {
        self.params.iter().map(|p| p.apply(g, ps, inp, gamma_scale)).collect()
    }

    /// Column labels such as `g1, g2, g1'` (primes mark repeated kinds).
    pub fn labels(&self) -> Vec<String> {
        let mut seen = std::collections::HashMap::new();
        self.kinds
            .iter()
            .map(|k| {
                let base = match k {
                    Mechanism::G1 => "g1",
                    Mechanism::G2 => "g2",
                    Mechanism::G3 => "g3",
                };
                let c = seen.entry(*k).or_insert(0usize);
                let label = format!("{base}{}", "'".repeat(*c));
                *c += 1;
                label
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl AttnIds {
    pub fn new(pb: &mut ParamBuilder, name: &str, q: usize) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            w_q: pb.weight(&n("w_q"), ATTENTION_GROUP, q, q)?,
            w_k: pb.weight(&n("w_k"), ATTENTION_GROUP, q, q)?,
            w_v: pb.weight(&n("w_v"), ATTENTION_GROUP, q, q)?,
            w_o: pb.weight(&n("w_o"), ATTENTION_GROUP, q, q)?,
        })
    }

    pub fn vars(&self, g: &mut Graph, ps: &ParameterSet) -> AttnVars {
        AttnVars {
            w_q: g.param(ps, self.w_q),
            w_k: g.param(ps, self.w_k),
            w_v: g.param(ps, self.w_v),
            w_o: g.param(ps, self.w_o),
        }
    }
}

/// Mean function of `p(z_t | z_{t-1}, u_{t-1}, b)`.
#[derive(Clone, Debug)]
pub enum Transition {
    Linear(Affine),
    Nl(Mlp2),
    Moe { experts: Vec<Mlp2>, delta: ParamId },
    AttnHist { w_h: Affine, score: Mlp2 },
    Pkpd { mechs: MechStack, attn: AttnIds },
}

/// Past states and attention scores for history-attending transitions.
#[derive(Default)]
pub struct History {
    z: Vec<Var>,
    scores: Vec<Var>,
}

pub struct TransitionOut {
    pub mu: Var,
    /// `[N, Q, d]` mechanism weights, when the kind has them.
    pub weights: Option<Var>,
}

pub const MOE_EXPERTS: usize = 3;

impl Transition {
    /// The mean at step `t` from `z_{t-1}` and the inputs of step `t-1`.
    #[allow(clippy::too_many_arguments)]
    pub fn mean(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        z_prev: Var,
        prev: &StepInputs,
        b: Var,
        hist: Option<&mut History>,
        gamma_scale: f64,
    ) -> Result<TransitionOut> {
        let plain = |mu| Ok(TransitionOut { mu, weights: None });
        match self {
            Transition::Linear(a) => {
                let zub = g.concat(&[z_prev, prev.u, b])?;
                plain(a.apply(g, ps, zub)?)
            }
            Transition::Nl(m) => {
                let zub = g.concat(&[z_prev, prev.u, b])?;
                plain(m.apply(g, ps, zub)?)
            }
            Transition::Moe { experts, delta } => {
                let zub = g.concat(&[z_prev, prev.u, b])?;
                let outs = experts.iter().map(|e| e.apply(g, ps, zub)).collect::<Result<Vec<_>>>()?;
                let d = g.param(ps, *delta);
                plain(mechanisms::softmax_combine(g, &outs, d)?)
            }
            Transition::AttnHist { w_h, score } => {
                let hist = hist.ok_or_else(|| Error::invalid("history-attention transition needs the state history"))?;
                let xu = g.concat(&[prev.xfill, prev.u])?;
                let s = score.apply(g, ps, xu)?;
                hist.z.push(z_prev);
                hist.scores.push(s);
                let scores = g.stack(&hist.scores)?;
                let alpha = g.softmax_last(scores)?;
                let zs = g.stack(&hist.z)?;
                let mixed = g.mul(alpha, zs)?;
                let mixed = g.sum_last(mixed)?;
                Ok(TransitionOut {
                    mu: w_h.apply(g, ps, mixed)?,
                    weights: Some(alpha),
                })
            }
            Transition::Pkpd { mechs, attn } => {
                let inp = MechInputs {
                    z: z_prev,
                    u: prev.u,
                    b,
                    lines: prev.lines,
                    lc: prev.lc,
                };
                let outs = mechs.apply(g, ps, &inp, gamma_scale)?;
                let vars = attn.vars(g, ps);
                let (mu, w) = mechanisms::attend_combine(g, z_prev, &outs, &vars)?;
                Ok(TransitionOut { mu, weights: Some(w) })
            }
        }
    }
}

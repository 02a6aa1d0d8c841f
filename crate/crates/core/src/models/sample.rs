//! Ancestral sampling and conditional rollouts.

use rand::Rng;

use super::layers::reparameterize;
use super::net::{FommNet, GruNet, Net, SsmNet};
use super::{BatchInputs, History, Model, StepInputs, Transition};
use crate::dataset::Batch;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Where a rollout begins.
#[derive(Clone, Debug)]
pub enum RolloutStart {
    /// Step 0 drawn from the prior given the baseline.
    Prior,
    /// Condition on the first `C` recorded steps (posterior sample for
    /// latent models, observed values otherwise) and roll from step `C`.
    Condition(usize),
    /// Latent state `[N, Q]` at step `step − 1`; the rollout starts at `step`.
    Latent { z: Tensor, step: usize },
}

/// Sampled trajectories for steps `start .. start + horizon`, each `[N, ·]`.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub start: usize,
    /// Latent draws (empty for models without latents).
    pub z: Vec<Tensor>,
    /// Observation draws.
    pub x: Vec<Tensor>,
    /// Emission means of the drawn path.
    pub x_mean: Vec<Tensor>,
}

impl Rollout {
    fn push(&mut self, g: &Graph, z: Option<Var>, x: Var, mu: Var) {
        if let Some(z) = z {
            self.z.push(g.value(z).clone());
        }
        self.x.push(g.value(x).clone());
        self.x_mean.push(g.value(mu).clone());
    }
}

impl Model {
    /// Samples `horizon` steps under the batch's recorded interventions.
    pub fn sample_forward<R: Rng + ?Sized>(&self, batch: &Batch, start: RolloutStart, horizon: usize, rng: &mut R) -> Result<Rollout> {
        if horizon == 0 {
            return Err(Error::invalid("rollout horizon must be positive"));
        }
        let first = match &start {
            RolloutStart::Prior => 0,
            RolloutStart::Condition(c) => *c,
            RolloutStart::Latent { step, .. } => *step,
        };
        if first + horizon > batch.t_max() {
            return Err(Error::invalid(format!(
                "rollout to step {} exceeds the {} recorded steps",
                first + horizon,
                batch.t_max()
            )));
        }
        let mut g = Graph::new();
        let inputs = BatchInputs::new(&mut g, batch);
        let mut out = Rollout {
            start: first,
            ..Default::default()
        };
        match &self.net {
            Net::Ssm(net) => self.roll_ssm(&mut g, net, &inputs, &start, first, horizon, rng, &mut out)?,
            Net::Fomm(net) => {
                if matches!(start, RolloutStart::Latent { .. }) {
                    return Err(Error::invalid(format!("{} has no latent state", self.kind())));
                }
                self.roll_fomm(&mut g, net, &inputs, first, horizon, rng, &mut out)?
            }
            Net::Gru(net) => {
                if matches!(start, RolloutStart::Latent { .. }) {
                    return Err(Error::invalid(format!("{} has no latent state", self.kind())));
                }
                self.roll_gru(&mut g, net, &inputs, first, horizon, rng, &mut out)?
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn roll_ssm<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        net: &SsmNet,
        inputs: &BatchInputs,
        start: &RolloutStart,
        first: usize,
        horizon: usize,
        rng: &mut R,
        out: &mut Rollout,
    ) -> Result<()> {
        let ps = &self.params;
        let cfg = &self.config;
        let mut hist = matches!(net.transition, Transition::AttnHist { .. }).then(History::default);
        let mut z_prev: Option<Var> = None;
        match start {
            RolloutStart::Prior => {}
            RolloutStart::Latent { z, .. } => {
                if z.shape() != [inputs.n, cfg.latent_dim] {
                    return Err(Error::Shape {
                        op: "sample_forward",
                        lhs: z.shape().to_vec(),
                        rhs: vec![inputs.n, cfg.latent_dim],
                    });
                }
                z_prev = Some(g.constant(z.clone()));
            }
            RolloutStart::Condition(c) => {
                if *c > 0 {
                    let cond = BatchInputs {
                        n: inputs.n,
                        b: inputs.b,
                        steps: inputs.steps[..*c].to_vec(),
                    };
                    let (hf, hb) = net.inference.encode(g, ps, &cond)?;
                    let mut zp = g.constant(Tensor::zeros(&[inputs.n, cfg.latent_dim]));
                    for t in 0..*c {
                        if t > 0 {
                            if let Some(h) = hist.as_mut() {
                                net.transition(g, ps, cfg, zp, &inputs.steps[t - 1], inputs.b, Some(h))?;
                            }
                        }
                        let (mu, var) = net.inference.combine(g, ps, zp, hf[t], hb[t])?;
                        zp = reparameterize(g, mu, var, rng)?;
                    }
                    z_prev = Some(zp);
                }
            }
        }
        for t in first..first + horizon {
            let (mu, var) = match z_prev {
                None => net.prior(g, ps, inputs.b)?,
                Some(zp) => {
                    if t == 0 {
                        return Err(Error::invalid("a latent start needs step ≥ 1"));
                    }
                    let (mu, var, _) = net.transition(g, ps, cfg, zp, &inputs.steps[t - 1], inputs.b, hist.as_mut())?;
                    (mu, var)
                }
            };
            let z = reparameterize(g, mu, var, rng)?;
            let (mx, vx) = net.emission(g, ps, z)?;
            let x = reparameterize(g, mx, vx, rng)?;
            out.push(g, Some(z), x, mx);
            z_prev = Some(z);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn roll_fomm<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        net: &FommNet,
        inputs: &BatchInputs,
        first: usize,
        horizon: usize,
        rng: &mut R,
        out: &mut Rollout,
    ) -> Result<()> {
        let ps = &self.params;
        let mut x_prev = (first > 0).then(|| inputs.steps[first - 1].xfill);
        for t in first..first + horizon {
            let (mu, var) = match x_prev {
                None => net.prior(g, ps, inputs.b)?,
                Some(xp) => net.step(g, ps, &self.config, xp, &inputs.steps[t - 1], inputs.b)?,
            };
            let x = reparameterize(g, mu, var, rng)?;
            out.push(g, None, x, mu);
            x_prev = Some(x);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn roll_gru<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        net: &GruNet,
        inputs: &BatchInputs,
        first: usize,
        horizon: usize,
        rng: &mut R,
        out: &mut Rollout,
    ) -> Result<()> {
        let ps = &self.params;
        let cfg = &self.config;
        let zero = StepInputs::zeros(g, inputs.n, &cfg.dims);
        let mut h = net.initial_state(g, inputs.n);
        for t in 0..first {
            let prev = if t == 0 { zero } else { inputs.steps[t - 1] };
            h = net.advance(g, ps, cfg, prev.xfill, &prev, inputs.b, h)?;
        }
        let mut x_prev = if first == 0 { zero.xfill } else { inputs.steps[first - 1].xfill };
        for t in first..first + horizon {
            let prev = if t == 0 { zero } else { inputs.steps[t - 1] };
            h = net.advance(g, ps, cfg, x_prev, &prev, inputs.b, h)?;
            let (mu, var) = net.emit(g, ps, h)?;
            let x = reparameterize(g, mu, var, rng)?;
            out.push(g, None, x, mu);
            x_prev = x;
        }
        Ok(())
    }
}

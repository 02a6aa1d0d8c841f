use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, ParamId, ParameterSet, Tensor, Var};
use crate::error::Result;

/// Added to every softplus variance.
pub const VAR_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Registers parameters with their initial values.
pub struct ParamBuilder<'a> {
    pub params: &'a mut ParameterSet,
    pub rng: ChaCha8Rng,
}

impl ParamBuilder<'_> {
    /// `[out, inp]` matrix, Glorot-uniform.
    pub fn weight(&mut self, name: &str, group: &str, out: usize, inp: usize) -> Result<ParamId> {
        let a = (6.0 / (inp + out) as f64).sqrt();
        let data = (0..out * inp).map(|_| self.rng.random_range(-a..=a)).collect();
        self.params.insert(name, group, Tensor::new(vec![out, inp], data)?)
    }

    pub fn bias(&mut self, name: &str, group: &str, n: usize) -> Result<ParamId> {
        self.params.insert(name, group, Tensor::zeros(&[n]))
    }

    pub fn filled(&mut self, name: &str, group: &str, n: usize, value: f64) -> Result<ParamId> {
        self.params.insert(name, group, Tensor::filled(&[n], value))
    }
}

/// `x Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: &str, out: usize, inp: usize) -> Result<Self> {
        Ok(Self {
            w: pb.weight(&format!("{name}.w"), group, out, inp)?,
            b: pb.bias(&format!("{name}.b"), group, out)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.affine(x, w, b)
    }

    pub fn out_dim(&self, ps: &ParameterSet) -> usize {
        ps.value(self.w).shape()[0]
    }
}

/// Two affine layers with a tanh between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub l1: Affine,
    pub l2: Affine,
}

impl Mlp2 {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: &str, inp: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            l1: Affine::new(pb, &format!("{name}.l1"), group, hidden, inp)?,
            l2: Affine::new(pb, &format!("{name}.l2"), group, out, hidden)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let h = self.l1.apply(g, ps, x)?;
        let h = g.tanh(h)?;
        self.l2.apply(g, ps, h)
    }
}

/// `softplus(affine(x)) + VAR_FLOOR`.
pub fn variance_head(g: &mut Graph, ps: &ParameterSet, head: &Affine, x: Var) -> Result<Var> {
    let pre = head.apply(g, ps, x)?;
    let sp = g.softplus(pre)?;
    g.shift(sp, VAR_FLOOR)
}

/// Gated recurrent cell.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    /// Input projections `W_z, W_r, W_h`; absent when the caller supplies
    /// its own gate inputs.
    pub w: Option<[ParamId; 3]>,
    pub v_z: ParamId,
    pub v_r: ParamId,
    pub v_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub hidden: usize,
}

/// Input contributions to the update, reset and candidate gates.
#[derive(Clone, Copy, Debug)]
pub struct GateInputs {
    pub f: Var,
    pub r: Var,
    pub h: Var,
}

impl GruCell {
    /// `inp = None` builds a cell without input projections.
    pub fn new(pb: &mut ParamBuilder, name: &str, group: &str, inp: Option<usize>, hidden: usize) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        let w = match inp {
            Some(inp) => Some([
                pb.weight(&n("w_z"), group, hidden, inp)?,
                pb.weight(&n("w_r"), group, hidden, inp)?,
                pb.weight(&n("w_h"), group, hidden, inp)?,
            ]),
            None => None,
        };
        Ok(Self {
            w,
            v_z: pb.weight(&n("v_z"), group, hidden, hidden)?,
            v_r: pb.weight(&n("v_r"), group, hidden, hidden)?,
            v_h: pb.weight(&n("v_h"), group, hidden, hidden)?,
            b_z: pb.bias(&n("b_z"), group, hidden)?,
            b_r: pb.bias(&n("b_r"), group, hidden)?,
            b_h: pb.bias(&n("b_h"), group, hidden)?,
            hidden,
        })
    }

    /// Standard input projections `W_z x`, `W_r x`, `W_h x`.
    pub fn project(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<GateInputs> {
        let [wz, wr, wh] = self
            .w
            .ok_or_else(|| crate::error::Error::invalid("recurrent cell has no input projections"))?
            .map(|id| g.param(ps, id));
        Ok(GateInputs {
            f: g.matmul_t(x, wz)?,
            r: g.matmul_t(x, wr)?,
            h: g.matmul_t(x, wh)?,
        })
    }

    /// `F = σ(i_f + V_z h + b_z)`, `R = σ(i_r + V_r h + b_r)`,
    /// `ĥ = tanh(i_h + V_h (R ⊙ h) + b_h)`, `h' = F ⊙ h + (1 − F) ⊙ ĥ`.
    pub fn step(&self, g: &mut Graph, ps: &ParameterSet, inp: &GateInputs, h_prev: Var) -> Result<Var> {
        let (vz, vr, vh) = (g.param(ps, self.v_z), g.param(ps, self.v_r), g.param(ps, self.v_h));
        let (bz, br, bh) = (g.param(ps, self.b_z), g.param(ps, self.b_r), g.param(ps, self.b_h));
        let f = g.matmul_t(h_prev, vz)?;
        let f = g.add(f, inp.f)?;
        let f = g.add(f, bz)?;
        let f = g.sigmoid(f)?;
        let r = g.matmul_t(h_prev, vr)?;
        let r = g.add(r, inp.r)?;
        let r = g.add(r, br)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h_prev)?;
        let c = g.matmul_t(rh, vh)?;
        let c = g.add(c, inp.h)?;
        let c = g.add(c, bh)?;
        let c = g.tanh(c)?;
        // F ⊙ h + (1 − F) ⊙ ĥ = ĥ + F ⊙ (h − ĥ)
        let d = g.sub(h_prev, c)?;
        let d = g.mul(f, d)?;
        g.add(c, d)
    }
}

/// Elementwise `log N(x; mu, var)`.
pub fn gaussian_logpdf(g: &mut Graph, x: Var, mu: Var, var: Var) -> Result<Var> {
    let d = g.sub(x, mu)?;
    let d2 = g.square(d)?;
    let q = g.div(d2, var)?;
    let lv = g.log(var)?;
    let s = g.add(q, lv)?;
    let s = g.shift(s, LN_2PI)?;
    g.scale(s, -0.5)
}

/// Per-row `Σ_j mask_j log N(x_j; mu_j, var_j)`, shape `[N]`.
pub fn masked_loglik(g: &mut Graph, x: Var, mu: Var, var: Var, mask: Var) -> Result<Var> {
    let lp = gaussian_logpdf(g, x, mu, var)?;
    let lp = g.mul(lp, mask)?;
    g.sum_last(lp)
}

/// Scales each row of `[N, D]` by the matching entry of `[N]`.
pub fn scale_rows(g: &mut Graph, x: Var, rows: Var) -> Result<Var> {
    let d = g.shape(x)[g.shape(x).len() - 1];
    let e = g.expand_last(rows, d)?;
    g.mul(x, e)
}

/// Gaussian draw `mu + sqrt(var) ⊙ eps` with fresh standard-normal noise.
pub fn reparameterize<R: Rng + ?Sized>(g: &mut Graph, mu: Var, var: Var, rng: &mut R) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    let n = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let eps = g.constant(Tensor::new(shape, eps)?);
    let sd = g.sqrt(var)?;
    let noise = g.mul(sd, eps)?;
    g.add(mu, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn builder(ps: &mut ParameterSet) -> ParamBuilder<'_> {
        ParamBuilder {
            params: ps,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    #[test]
    fn gru_zero_everything_gives_zero() {
        let mut ps = ParameterSet::new();
        let cell = GruCell::new(&mut builder(&mut ps), "c", "g", Some(3), 4).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            ps.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let h = g.constant(Tensor::zeros(&[2, 4]));
        let inp = cell.project(&mut g, &ps, x).unwrap();
        let out = cell.step(&mut g, &ps, &inp, h).unwrap();
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gru_saturated_update_gate_keeps_state() {
        let mut ps = ParameterSet::new();
        let cell = GruCell::new(&mut builder(&mut ps), "c", "g", Some(3), 4).unwrap();
        ps.value_mut(cell.b_z).data_mut().iter_mut().for_each(|v| *v = 40.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 3], 0.5));
        let hv = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.9, -0.5, 0.0, 0.2, 0.4]).unwrap();
        let h = g.constant(hv.clone());
        let inp = cell.project(&mut g, &ps, x).unwrap();
        let out = cell.step(&mut g, &ps, &inp, h).unwrap();
        for (a, b) in g.value(out).data().iter().zip(hv.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn glorot_variance_matches() {
        let mut ps = ParameterSet::new();
        let id = builder(&mut ps).weight("w", "g", 100, 100).unwrap();
        let a2 = 6.0 / 200.0;
        let v = ps.value(id).data();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - a2 / 3.0).abs() < 0.1 * a2 / 3.0);
    }

    #[test]
    fn logpdf_matches_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -0.5]));
        let mu = g.constant(Tensor::vector(vec![0.0, 0.5]));
        let var = g.constant(Tensor::vector(vec![2.0, 0.25]));
        let lp = gaussian_logpdf(&mut g, x, mu, var).unwrap();
        let want = |x: f64, m: f64, v: f64| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v);
        let got = g.value(lp).data();
        assert!((got[0] - want(1.0, 0.0, 2.0)).abs() < 1e-14);
        assert!((got[1] - want(-0.5, 0.5, 0.25)).abs() < 1e-14);
    }
}

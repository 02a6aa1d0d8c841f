//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient components smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub n_checked: usize,
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against
/// central differences with step `h`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::NonScalarRoot(g.shape(out).to_vec()));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        n_checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, v);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic.data()[i], numeric);
            report.n_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_input = k;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Like [`check_gradients`] but differentiates with respect to the entries
/// of a parameter set. At most `per_entry` evenly spaced scalars of each
/// entry are probed.
pub fn check_param_gradients<F>(f: F, params: &ParameterSet, h: f64, per_entry: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let eval = |ps: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, ps)?;
        if g.value(out).len() != 1 {
            return Err(Error::NonScalarRoot(g.shape(out).to_vec()));
        }
        Ok(g.value(out).item())
    };
    let mut work = params.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let root = f(&mut g, &work)?;
    g.backward_into(root, &mut work)?;
    let analytic: Vec<Tensor> = work.ids().map(|id| work.grad(id).clone()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        n_checked: 0,
    };
    let ids: Vec<ParamId> = work.ids().collect();
    for (k, &id) in ids.iter().enumerate() {
        let len = work.value(id).len();
        let stride = len.div_ceil(per_entry.max(1)).max(1);
        for i in (0..len).step_by(stride) {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[k].data()[i], numeric);
            report.n_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_input = k;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

use super::params::ParameterSet;
use super::tensor::Tensor;

/// Adam optimizer state (bias-corrected moments).
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        let zeros = || params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }
}

/// One Adam update from the accumulated gradients, which are zeroed
/// afterwards.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState) {
    assert_eq!(params.len(), state.m.len(), "AdamState built for a different parameter set");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let grad = params.grad(id).clone();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let value = params.value_mut(id).data_mut();
        for (((w, &g), m), v) in value.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.zero_grad();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Graph;

    fn single(value: f64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("w", "transition", Tensor::scalar(value)).unwrap();
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = single(1.5);
        let mut st = AdamState::new(&ps, 1e-3);
        adam_step(&mut ps, &mut st);
        assert_eq!(ps.value(ps.id("w").unwrap()).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², update = lr·g/(|g|+eps)
        let mut ps = single(0.0);
        let id = ps.id("w").unwrap();
        let mut g = Graph::new();
        let w = g.param(&ps, id);
        let root = g.sum(w).unwrap(); // d/dw = 1
        g.backward_into(root, &mut ps).unwrap();
        let mut st = AdamState::new(&ps, 1e-3);
        adam_step(&mut ps, &mut st);
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((ps.value(id).item() - expected).abs() < 1e-18);
        assert_eq!(ps.grad(id).item(), 0.0, "gradients zeroed after the step");
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let run = || {
            let mut ps = ParameterSet::new();
            let id = ps.insert("w", "g", Tensor::vector(vec![0.3, -0.7, 1.1])).unwrap();
            let mut st = AdamState::new(&ps, 1e-3);
            for _ in 0..5 {
                let mut g = Graph::new();
                let w = g.param(&ps, id);
                let s = g.square(w).unwrap();
                let root = g.sum(s).unwrap();
                g.backward_into(root, &mut ps).unwrap();
                adam_step(&mut ps, &mut st);
            }
            ps.value(id).clone()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

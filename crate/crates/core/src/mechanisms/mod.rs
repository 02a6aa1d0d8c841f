//! Mechanism functions for intervention effects and the two ways of
//! combining them. Every function is batched: row `n` of each input belongs
//! to the same patient.

use std::io::Write;

use crate::dataset::write_tensor_csv;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Stabilizer inside the log of the log-cell-kill term.
pub const LOG_EPS: f64 = 1e-6;

/// Per-step inputs shared by the mechanism functions.
#[derive(Clone, Copy, Debug)]
pub struct MechInputs {
    /// `[N, Q]` previous state.
    pub z: Var,
    /// `[N, L]` previous interventions.
    pub u: Var,
    /// `[N, J]` baseline covariates.
    pub b: Var,
    /// `[N, K]` line-of-therapy one-hot.
    pub lines: Var,
    /// `[N]` raw local clock.
    pub lc: Var,
}

/// Repeats a `[N, 1]` column across `width` columns.
pub fn broadcast_col(g: &mut Graph, col: Var, width: usize) -> Result<Var> {
    let ones = g.constant(Tensor::filled(&[1, width], 1.0));
    g.matmul(col, ones)
}

/// `z ⊙ tanh(b_lin + W_lin [u, b])`, with `w_lin: [Q, L+J]`.
pub fn g1(g: &mut Graph, z: Var, u: Var, b: Var, w_lin: Var, b_lin: Var) -> Result<Var> {
    let ub = g.concat(&[u, b])?;
    let pre = g.affine(ub, w_lin, b_lin)?;
    let gate = g.tanh(pre)?;
    g.mul(z, gate)
}

/// `z ⊙ (1 − ρ log(z² + ε) − β exp(−δ lc))`, `β = tanh(W_lc u + b_lc)`.
#[allow(clippy::too_many_arguments)]
pub fn g2(g: &mut Graph, z: Var, u: Var, lc: Var, rho: Var, delta: Var, w_lc: Var, b_lc: Var) -> Result<Var> {
    let q = g.shape(z)[g.shape(z).len() - 1];
    let z2 = g.square(z)?;
    let z2 = g.shift(z2, LOG_EPS)?;
    let logz = g.log(z2)?;
    let growth = g.mul(logz, rho)?;
    let beta = g.affine(u, w_lc, b_lc)?;
    let beta = g.tanh(beta)?;
    let lcq = g.expand_last(lc, q)?;
    let decay = g.mul(lcq, delta)?;
    let decay = g.neg(decay)?;
    let decay = g.exp(decay)?;
    let kill = g.mul(beta, decay)?;
    let factor = g.add(growth, kill)?;
    let factor = g.neg(factor)?;
    let factor = g.shift(factor, 1.0)?;
    g.mul(z, factor)
}

/// Parameters of the treatment-exponential mechanism as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct G3Vars {
    /// `[Q, Q+L+J]`
    pub w_d: Var,
    pub b_d: Var,
    /// `[3, K]`
    pub w_e: Var,
    /// `[3]`
    pub b_e: Var,
    pub b0: Var,
    pub bl: Var,
}

/// Piecewise sigmoid rise then decay toward `bl`, keyed on the local clock.
///
/// `[α2, α3, γl] = σ(W_e lines + b_e)` with `γl` rescaled by `gamma_scale`;
/// `α1 = W_d [z, u, b] + b_d`; `α0 = (α1 + 2 b0 − bl) σ(α3 γl / 2)`.
pub fn g3(g: &mut Graph, inp: &MechInputs, p: &G3Vars, gamma_scale: f64) -> Result<Var> {
    let q = g.shape(inp.z)[g.shape(inp.z).len() - 1];
    let zub = g.concat(&[inp.z, inp.u, inp.b])?;
    let alpha1 = g.affine(zub, p.w_d, p.b_d)?;
    let e = g.affine(inp.lines, p.w_e, p.b_e)?;
    let e = g.sigmoid(e)?;
    let a2 = g.slice(e, 0, 1)?;
    let a2 = broadcast_col(g, a2, q)?;
    let a3 = g.slice(e, 1, 2)?;
    let a3 = broadcast_col(g, a3, q)?;
    let gl = g.slice(e, 2, 3)?;
    let gl = g.scale(gl, gamma_scale)?;
    let gl = broadcast_col(g, gl, q)?;
    let lc = g.expand_last(inp.lc, q)?;

    // rising branch: b0 + α1 σ(α2 (lc − γl/2))
    let half = g.scale(gl, 0.5)?;
    let arg1 = g.sub(lc, half)?;
    let arg1 = g.mul(a2, arg1)?;
    let s1 = g.sigmoid(arg1)?;
    let br1 = g.mul(alpha1, s1)?;
    let br1 = g.add(br1, p.b0)?;

    // decaying branch: bl + α0 σ(−α3 (lc − 3γl/2))
    let two_b0 = g.scale(p.b0, 2.0)?;
    let amp = g.add(alpha1, two_b0)?;
    let amp = g.sub(amp, p.bl)?;
    let peak = g.mul(a3, half)?;
    let peak = g.sigmoid(peak)?;
    let alpha0 = g.mul(amp, peak)?;
    let three_half = g.scale(gl, 1.5)?;
    let arg2 = g.sub(three_half, lc)?;
    let arg2 = g.mul(a3, arg2)?;
    let s2 = g.sigmoid(arg2)?;
    let br2 = g.mul(alpha0, s2)?;
    let br2 = g.add(br2, p.bl)?;

    let mask = {
        let lcv = g.value(lc).data();
        let glv = g.value(gl).data();
        let m: Vec<f64> = lcv.iter().zip(glv).map(|(l, c)| if l < c { 1.0 } else { 0.0 }).collect();
        Tensor::new(g.shape(lc).to_vec(), m)?
    };
    let inv = mask.map(|v| 1.0 - v);
    let mask = g.constant(mask);
    let inv = g.constant(inv);
    let a = g.mul(mask, br1)?;
    let b = g.mul(inv, br2)?;
    g.add(a, b)
}

/// Attention parameters as graph nodes, all `[Q, Q]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Per-dimension soft attention over mechanism outputs.
///
/// Returns the combined `[N, Q]` mean and `[N, Q, d]` weights that sum to 1
/// over the last axis.
pub fn attend_combine(g: &mut Graph, z: Var, mechs: &[Var], p: &AttnVars) -> Result<(Var, Var)> {
    if mechs.is_empty() {
        return Err(Error::invalid("attend_combine needs at least one mechanism"));
    }
    let q_dim = g.shape(z)[g.shape(z).len() - 1];
    let query = g.matmul(z, p.w_q)?;
    let mut scores = Vec::with_capacity(mechs.len());
    let mut values = Vec::with_capacity(mechs.len());
    for &m in mechs {
        let k = g.matmul(m, p.w_k)?;
        let s = g.mul(query, k)?;
        scores.push(g.scale(s, 1.0 / (q_dim as f64).sqrt())?);
        values.push(g.matmul(m, p.w_v)?);
    }
    let scores = g.stack(&scores)?;
    let weights = g.softmax_last(scores)?;
    let values = g.stack(&values)?;
    let mixed = g.mul(weights, values)?;
    let mixed = g.sum_last(mixed)?;
    let out = g.matmul(mixed, p.w_o)?;
    Ok((out, weights))
}

/// `Σ_i softmax(δ)_i g_i` with a learned, input-independent `δ: [d]`.
pub fn softmax_combine(g: &mut Graph, mechs: &[Var], delta: Var) -> Result<Var> {
    if mechs.is_empty() {
        return Err(Error::invalid("softmax_combine needs at least one mechanism"));
    }
    if g.shape(delta) != [mechs.len()] {
        return Err(Error::Shape {
            op: "softmax_combine",
            lhs: g.shape(delta).to_vec(),
            rhs: vec![mechs.len()],
        });
    }
    if g.shape(mechs[0]).len() != 2 {
        return Err(Error::invalid("softmax_combine expects [N, D] mechanism outputs"));
    }
    let width = g.shape(mechs[0])[1];
    let w = g.softmax_last(delta)?;
    let w = g.broadcast_rows(w, width)?;
    let stacked = g.stack(mechs)?;
    let mixed = g.mul(stacked, w)?;
    g.sum_last(mixed)
}

/// Averages `[N, Q, d]` weight tensors over patients (and any number of
/// steps) into a `[Q, d]` table.
pub fn mean_attention(weights: &[Tensor]) -> Result<Tensor> {
    let first = weights
        .first()
        .ok_or_else(|| Error::invalid("no attention weights to average"))?;
    if first.rank() != 3 {
        return Err(Error::invalid(format!("attention weights must be [N, Q, d], got {:?}", first.shape())));
    }
    let (q, d) = (first.shape()[1], first.shape()[2]);
    let mut acc = vec![0.0; q * d];
    let mut rows = 0usize;
    for w in weights {
        if w.shape()[1..] != [q, d] {
            return Err(Error::Shape {
                op: "mean_attention",
                lhs: first.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        for chunk in w.data().chunks_exact(q * d) {
            acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
            rows += 1;
        }
    }
    acc.iter_mut().for_each(|a| *a /= rows as f64);
    Tensor::new(vec![q, d], acc)
}

/// Writes a `[Q, d]` weight table with one column per mechanism.
pub fn write_attention_csv<W: Write>(table: &Tensor, mechanism_names: &[String], w: W) -> Result<()> {
    write_tensor_csv(table, Some(mechanism_names), w)
}

//! Gumbel relaxations of categorical samples.
//!
//! `z = logits + G(u)` with `G(u) = -ln(-ln u)`, hard sample `b = argmax z`,
//! and `z̃ ~ p(z | b)` built from independent uniforms `v`. Pass normalized
//! logits (log-probabilities) when `z` and `z̃` must share one law: the
//! conditional construction assumes `max_k z_k ~ Gumbel(0)`.

use crate::error::{Error, Result};
use crate::ndgraph::{GraphError, Tape, Tensor, Var};

pub fn gumbel(u: f64) -> std::result::Result<f64, GraphError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(GraphError::Domain { op: "gumbel", detail: format!("uniform draw {} outside (0, 1)", u) });
    }
    Ok(-(-u.ln()).ln())
}

fn gumbel_tensor(u: &Tensor) -> std::result::Result<Tensor, GraphError> {
    let data = u.data().iter().map(|&x| gumbel(x)).collect::<std::result::Result<Vec<_>, _>>()?;
    Tensor::new(u.shape().to_vec(), data)
}

/// Perturbed logits `logits_k + G(u_k)`.
pub fn sample_z(logits: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_len(logits, u)?;
    logits
        .iter()
        .zip(u)
        .map(|(&l, &x)| Ok(l + gumbel(x)?))
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn hard_threshold(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in z.iter().enumerate().skip(1) {
        if x > z[best] {
            best = k;
        }
    }
    best
}

/// Draws `z̃` conditioned on `argmax z̃ = b`.
pub fn sample_z_tilde(logits: &[f64], b: usize, v: &[f64]) -> Result<Vec<f64>> {
    check_len(logits, v)?;
    let n = logits.len();
    if b >= n {
        return Err(Error::TokenOutOfRange { index: b, vocab: n });
    }
    let tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![1, 1, n], logits.to_vec())?);
    let v = Tensor::new(vec![1, 1, n], v.to_vec())?;
    Ok(z_tilde_var(l, &[vec![b]], &v)?.value().into_data())
}

/// `softmax(z / λ)`.
pub fn sigma_lambda(z: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let z = tape.constant(Tensor::vector(z.to_vec()));
    Ok(sigma_lambda_var(z, lambda)?.value().into_data())
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(GraphError::ShapeMismatch { op: "relaxation", lhs: vec![a.len()], rhs: vec![b.len()] }.into());
    }
    Ok(())
}

/// `z = logits + G(u)` on the tape; differentiable in `logits`.
pub fn z_var<'t>(logits: Var<'t>, u: &Tensor) -> Result<Var<'t>> {
    let g = logits.tape().constant(gumbel_tensor(u)?);
    Ok(logits.add(g)?)
}

/// Conditional relaxation on the tape for `[B, T, V]` logits and tokens `B x T`.
///
/// With `p = softmax(logits)`: `z̃_b = G(v_b)` and
/// `z̃_k = -ln(-ln(v_k) / p_k - ln v_b)` for `k != b`.
pub fn z_tilde_var<'t>(logits: Var<'t>, tokens: &[Vec<usize>], v: &Tensor) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 3 || v.shape() != shape.as_slice() {
        return Err(GraphError::ShapeMismatch { op: "z_tilde", lhs: shape, rhs: v.shape().to_vec() }.into());
    }
    let (b, t, n) = (shape[0], shape[1], shape[2]);
    if tokens.len() != b || tokens.iter().any(|s| s.len() != t) {
        return Err(Error::MismatchedRandomness(format!("tokens do not cover a {}x{} batch", b, t)));
    }
    let gv = gumbel_tensor(v)?;
    let neg_log_v: Vec<f64> = v.data().iter().map(|&x| -x.ln()).collect();
    let mut chosen_neg_log = vec![0.0; b * t * n];
    let mut mask = vec![0.0; b * t * n];
    let mut fixed = vec![0.0; b * t * n];
    for (bi, seq) in tokens.iter().enumerate() {
        for (ti, &tok) in seq.iter().enumerate() {
            if tok >= n {
                return Err(Error::TokenOutOfRange { index: tok, vocab: n });
            }
            let row = (bi * t + ti) * n;
            chosen_neg_log[row..row + n].fill(neg_log_v[row + tok]);
            mask[row + tok] = 1.0;
            fixed[row + tok] = gv.data()[row + tok];
        }
    }
    let tape = logits.tape();
    let full = |data: Vec<f64>| Tensor::new(shape.clone(), data);
    let inv_p = logits.log_softmax()?.neg()?.exp()?;
    let others = inv_p
        .mul(tape.constant(full(neg_log_v)?))?
        .add(tape.constant(full(chosen_neg_log)?))?
        .log()?
        .neg()?;
    let keep = tape.constant(full(mask.iter().map(|m| 1.0 - m).collect())?);
    Ok(others.mul(keep)?.add(tape.constant(full(fixed)?))?)
}

pub fn sigma_lambda_var(z: Var<'_>, lambda: f64) -> Result<Var<'_>> {
    if !(lambda > 0.0) {
        return Err(GraphError::Domain { op: "sigma_lambda", detail: format!("temperature {} must be positive", lambda) }
            .into());
    }
    Ok(z.scale(1.0 / lambda)?.softmax()?)
}

/// Relaxations `z` and `z̃` of a sampled batch, both `[B, T, V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedPair {
    pub z: Tensor,
    pub z_tilde: Tensor,
    pub lambda: f64,
}

impl RelaxedPair {
    /// Builds both relaxations from per-step log-probabilities and the
    /// uniforms that produced `tokens`. Fails if `argmax z` disagrees with a token.
    pub fn new(log_probs: &Tensor, tokens: &[Vec<usize>], u: &Tensor, v: &Tensor, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", lambda)));
        }
        let tape = Tape::new();
        let logp = tape.constant(log_probs.clone());
        let z = z_var(logp, u)?.value();
        let z_tilde = z_tilde_var(logp, tokens, v)?.value();
        let pair = RelaxedPair { z, z_tilde, lambda };
        pair.check_tokens(tokens)?;
        Ok(pair)
    }

    pub fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<()> {
        let n = *self.z.shape().last().unwrap_or(&0);
        let rows = self.z.data().chunks(n.max(1));
        for (row, tok) in rows.zip(tokens.iter().flatten()) {
            if hard_threshold(row) != *tok {
                return Err(Error::MismatchedRandomness("argmax of z differs from the sampled token".into()));
            }
        }
        Ok(())
    }
}

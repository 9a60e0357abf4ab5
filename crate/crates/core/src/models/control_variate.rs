use rand::Rng;

use super::{Critic, ParamSet};
use crate::error::Result;
use crate::ndgraph::{GraphError, Tape, Tensor, Var};
use crate::relaxation::sigma_lambda_var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ControlVariateConfig {
    pub vocab: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl ControlVariateConfig {
    pub fn new(vocab: usize) -> Self {
        ControlVariateConfig { vocab, channels: 16, kernel: 3 }
    }
}

/// Which relaxation the learned control variate sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CvInput {
    /// Raw perturbed logits `z`.
    #[default]
    Raw,
    /// Tempered softmax `σ_λ(z)`.
    Relaxed,
}

/// Conv1d over the sequence axis, tanh, mean-pool, linear to a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlVariateParams {
    pub kernel: Tensor,
    pub conv_bias: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl ControlVariateParams {
    /// Random convolution with a zero output layer, so the network starts at 0.
    pub fn init<R: Rng + ?Sized>(cfg: ControlVariateConfig, rng: &mut R) -> Self {
        let mut p = Self::init_random(cfg, rng);
        p.w_out = Tensor::zeros(p.w_out.shape());
        p.b_out = Tensor::zeros(p.b_out.shape());
        p
    }

    pub fn init_random<R: Rng + ?Sized>(cfg: ControlVariateConfig, rng: &mut R) -> Self {
        let fan_in = (cfg.kernel * cfg.vocab) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let out_bound = 1.0 / (cfg.channels as f64).sqrt();
        ControlVariateParams {
            kernel: Tensor::uniform(&[cfg.kernel, cfg.vocab, cfg.channels], -bound, bound, rng),
            conv_bias: Tensor::uniform(&[cfg.channels], -bound, bound, rng),
            w_out: Tensor::uniform(&[cfg.channels, 1], -out_bound, out_bound, rng),
            b_out: Tensor::uniform(&[1], -out_bound, out_bound, rng),
        }
    }

    pub fn config(&self) -> ControlVariateConfig {
        let s = self.kernel.shape();
        ControlVariateConfig { vocab: s[1], channels: s[2], kernel: s[0] }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, tracked: bool) -> ControlVariateVars<'t> {
        let v = ParamSet::bind(self, tape, tracked);
        ControlVariateVars { kernel: v[0], conv_bias: v[1], w_out: v[2], b_out: v[3] }
    }

    /// `ĉ_φ` for each of the `B` relaxed inputs `[B, T, V]`.
    pub fn eval(&self, input: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let c = self.bind(&tape, false);
        Ok(c.eval(tape.constant(input.clone()))?.value().into_data())
    }
}

impl ParamSet for ControlVariateParams {
    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("kernel", &self.kernel),
            ("conv_bias", &self.conv_bias),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.conv_bias, &mut self.w_out, &mut self.b_out]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ControlVariateVars<'t> {
    pub kernel: Var<'t>,
    pub conv_bias: Var<'t>,
    pub w_out: Var<'t>,
    pub b_out: Var<'t>,
}

impl<'t> ControlVariateVars<'t> {
    pub fn all(&self) -> Vec<Var<'t>> {
        vec![self.kernel, self.conv_bias, self.w_out, self.b_out]
    }

    pub fn eval(&self, input: Var<'t>) -> Result<Var<'t>> {
        let shape = input.shape();
        let ks = self.kernel.shape();
        if shape.len() != 3 || shape[2] != ks[1] {
            return Err(GraphError::ShapeMismatch { op: "control_variate", lhs: shape, rhs: ks }.into());
        }
        let pad = (ks[0] - 1) / 2;
        let tape = input.tape();
        let features = tape.conv1d(input, self.kernel, self.conv_bias, pad)?.tanh()?.mean_axis(1)?;
        Ok(features.matmul(self.w_out)?.add_row(self.b_out)?.reshape(&[shape[0]])?)
    }
}

/// `c(z) = D(σ_λ(z)) + ĉ_φ(z)` per batch element on the tape.
pub fn c_combined_var<'t, C: Critic + ?Sized>(
    z: Var<'t>,
    cv: Option<&ControlVariateVars<'t>>,
    critic: &C,
    lambda: f64,
    cv_input: CvInput,
) -> Result<Var<'t>> {
    let relaxed = sigma_lambda_var(z, lambda)?;
    let d = critic.score_relaxed(relaxed)?;
    match cv {
        None => Ok(d),
        Some(cv) => {
            let c_in = match cv_input {
                CvInput::Raw => z,
                CvInput::Relaxed => relaxed,
            };
            Ok(d.add(cv.eval(c_in)?)?)
        }
    }
}

/// Value form of [`c_combined_var`] with `ĉ_φ` fed the raw `z`.
pub fn c_combined<C: Critic + ?Sized>(
    z: &Tensor,
    cv: &ControlVariateParams,
    critic: &C,
    lambda: f64,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let c = cv.bind(&tape, false);
    let out = c_combined_var(tape.constant(z.clone()), Some(&c), critic, lambda, CvInput::Raw)?;
    Ok(out.value().into_data())
}

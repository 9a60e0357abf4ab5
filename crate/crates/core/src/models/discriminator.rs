use rand::Rng;

use super::generator::batch_dims;
use super::lstm::{LstmParams, LstmVars};
use super::optim::Adam;
use super::{Critic, ParamSet};
use crate::error::{Error, Result};
use crate::ndgraph::{GraphError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl DiscriminatorConfig {
    pub fn new(vocab: usize) -> Self {
        DiscriminatorConfig { vocab, embed: 32, hidden: 64 }
    }
}

/// Many-to-one LSTM classifier; the score is `sigmoid(w · h_T + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub embedding: Tensor,
    pub lstm: LstmParams,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Discriminator input: hard tokens or relaxed `[B, T, V]` rows.
#[derive(Clone, Copy, Debug)]
pub enum DiscInput<'a> {
    Tokens(&'a [Vec<usize>]),
    Relaxed(&'a Tensor),
}

impl DiscriminatorParams {
    pub fn init<R: Rng + ?Sized>(cfg: DiscriminatorConfig, rng: &mut R) -> Self {
        let bound = 1.0 / (cfg.hidden as f64).sqrt();
        DiscriminatorParams {
            embedding: Tensor::uniform(&[cfg.vocab, cfg.embed], -0.5, 0.5, rng),
            lstm: LstmParams::init(cfg.embed, cfg.hidden, rng),
            w_out: Tensor::uniform(&[cfg.hidden, 1], -bound, bound, rng),
            b_out: Tensor::uniform(&[1], -bound, bound, rng),
        }
    }

    pub fn config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            vocab: self.embedding.shape()[0],
            embed: self.embedding.shape()[1],
            hidden: self.lstm.hidden_size(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, tracked: bool) -> DiscriminatorVars<'t> {
        let v = ParamSet::bind(self, tape, tracked);
        DiscriminatorVars { embedding: v[0], lstm: LstmVars::new(v[1], v[2], v[3]), w_out: v[4], b_out: v[5] }
    }

    /// Scores in `(0, 1)`, one per sequence.
    pub fn score(&self, input: DiscInput<'_>) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let d = self.bind(&tape, false);
        let logits = match input {
            DiscInput::Tokens(tokens) => d.logits_tokens(tokens)?,
            DiscInput::Relaxed(rows) => d.logits_relaxed(tape.constant(rows.clone()))?,
        };
        Ok(logits.sigmoid()?.value().into_data())
    }
}

impl ParamSet for DiscriminatorParams {
    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("embedding", &self.embedding),
            ("lstm.w_input", &self.lstm.w_input),
            ("lstm.w_hidden", &self.lstm.w_hidden),
            ("lstm.bias", &self.lstm.bias),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.embedding,
            &mut self.lstm.w_input,
            &mut self.lstm.w_hidden,
            &mut self.lstm.bias,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

impl Critic for DiscriminatorParams {
    fn score_tokens(&self, tokens: &[Vec<usize>]) -> Result<Vec<f64>> {
        self.score(DiscInput::Tokens(tokens))
    }

    fn score_relaxed<'t>(&self, rows: Var<'t>) -> Result<Var<'t>> {
        let d = self.bind(rows.tape(), false);
        Ok(d.logits_relaxed(rows)?.sigmoid()?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars<'t> {
    pub embedding: Var<'t>,
    pub lstm: LstmVars<'t>,
    pub w_out: Var<'t>,
    pub b_out: Var<'t>,
}

impl<'t> DiscriminatorVars<'t> {
    pub fn all(&self) -> Vec<Var<'t>> {
        vec![self.embedding, self.lstm.w_input, self.lstm.w_hidden, self.lstm.bias, self.w_out, self.b_out]
    }

    fn run(&self, batch: usize, len: usize, input: impl Fn(usize) -> Result<Var<'t>>) -> Result<Var<'t>> {
        let mut state = self.lstm.zero_state(self.embedding.tape(), batch);
        for t in 0..len {
            state = self.lstm.step(input(t)?, state)?;
        }
        Ok(state.h.matmul(self.w_out)?.add_row(self.b_out)?.reshape(&[batch])?)
    }

    /// Pre-sigmoid scores `[B]` for hard tokens.
    pub fn logits_tokens(&self, tokens: &[Vec<usize>]) -> Result<Var<'t>> {
        let (batch, len) = batch_dims(tokens)?;
        let vocab = self.embedding.shape()[0];
        if let Some(&bad) = tokens.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { index: bad, vocab });
        }
        self.run(batch, len, |t| {
            let column: Vec<usize> = tokens.iter().map(|s| s[t]).collect();
            Ok(self.embedding.gather_rows(&column)?)
        })
    }

    /// Pre-sigmoid scores `[B]` for relaxed rows `[B, T, V]`, embedded by
    /// probability-weighted lookup.
    pub fn logits_relaxed(&self, rows: Var<'t>) -> Result<Var<'t>> {
        let shape = rows.shape();
        let vocab = self.embedding.shape()[0];
        if shape.len() != 3 || shape[2] != vocab {
            return Err(GraphError::ShapeMismatch { op: "discriminator", lhs: shape, rhs: vec![vocab] }.into());
        }
        let (batch, len) = (shape[0], shape[1]);
        self.run(batch, len, |t| {
            Ok(rows.slice(1, t, 1)?.reshape(&[batch, vocab])?.row_lookup_weighted(self.embedding)?)
        })
    }
}

/// Binary cross-entropy with real -> 1 and fake -> 0, averaged over both halves.
fn bce<'t>(d: &DiscriminatorVars<'t>, real: &[Vec<usize>], fake: &[Vec<usize>]) -> Result<Var<'t>> {
    let real_loss = d.logits_tokens(real)?.neg()?.softplus()?.mean()?;
    let fake_loss = d.logits_tokens(fake)?.softplus()?.mean()?;
    Ok(real_loss.add(fake_loss)?.scale(0.5)?)
}

pub fn discriminator_loss(params: &DiscriminatorParams, real: &[Vec<usize>], fake: &[Vec<usize>]) -> Result<f64> {
    let tape = Tape::new();
    Ok(bce(&params.bind(&tape, false), real, fake)?.item())
}

/// One optimizer step on the cross-entropy loss; returns the loss before the step.
pub fn discriminator_train_step(
    params: &mut DiscriminatorParams,
    adam: &mut Adam,
    real: &[Vec<usize>],
    fake: &[Vec<usize>],
) -> Result<f64> {
    let (loss, grads) = {
        let tape = Tape::new();
        let d = params.bind(&tape, true);
        let loss = bce(&d, real, fake)?;
        let grads = tape.backward(loss, false)?;
        (loss.item(), d.all().into_iter().map(|v| grads.tensor(v)).collect::<Vec<_>>())
    };
    adam.step(params, &grads);
    Ok(loss)
}

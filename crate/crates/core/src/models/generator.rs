use rand::distributions::Open01;
use rand::seq::SliceRandom;
use rand::Rng;

use super::lstm::{LstmParams, LstmState, LstmVars};
use super::optim::{Adam, AdamConfig};
use super::ParamSet;
use crate::error::{Error, Result};
use crate::ndgraph::{Tape, Tensor, Var};
use crate::relaxation::{hard_threshold, sample_z, RelaxedPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl GeneratorConfig {
    pub fn new(vocab: usize) -> Self {
        GeneratorConfig { vocab, embed: 32, hidden: 64 }
    }
}

/// Autoregressive LSTM generator. Step 1 consumes a learned start embedding,
/// step `i > 1` the embedding of token `i - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub embedding: Tensor,
    pub start: Tensor,
    pub lstm: LstmParams,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl GeneratorParams {
    pub fn init<R: Rng + ?Sized>(cfg: GeneratorConfig, rng: &mut R) -> Self {
        let bound = 1.0 / (cfg.hidden as f64).sqrt();
        GeneratorParams {
            embedding: Tensor::uniform(&[cfg.vocab, cfg.embed], -0.5, 0.5, rng),
            start: Tensor::uniform(&[cfg.embed], -0.5, 0.5, rng),
            lstm: LstmParams::init(cfg.embed, cfg.hidden, rng),
            w_out: Tensor::uniform(&[cfg.hidden, cfg.vocab], -bound, bound, rng),
            b_out: Tensor::uniform(&[cfg.vocab], -bound, bound, rng),
        }
    }

    pub fn config(&self) -> GeneratorConfig {
        GeneratorConfig {
            vocab: self.embedding.shape()[0],
            embed: self.embedding.shape()[1],
            hidden: self.lstm.hidden_size(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, tracked: bool) -> GeneratorVars<'t> {
        let v = ParamSet::bind(self, tape, tracked);
        GeneratorVars {
            embedding: v[0],
            start: v[1],
            lstm: LstmVars::new(v[2], v[3], v[4]),
            w_out: v[5],
            b_out: v[6],
        }
    }
}

impl ParamSet for GeneratorParams {
    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("embedding", &self.embedding),
            ("start", &self.start),
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
            &mut self.start,
            &mut self.lstm.w_input,
            &mut self.lstm.w_hidden,
            &mut self.lstm.bias,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars<'t> {
    pub embedding: Var<'t>,
    pub start: Var<'t>,
    pub lstm: LstmVars<'t>,
    pub w_out: Var<'t>,
    pub b_out: Var<'t>,
}

impl<'t> GeneratorVars<'t> {
    pub fn all(&self) -> Vec<Var<'t>> {
        vec![
            self.embedding,
            self.start,
            self.lstm.w_input,
            self.lstm.w_hidden,
            self.lstm.bias,
            self.w_out,
            self.b_out,
        ]
    }

    fn input(&self, batch: usize, prev: Option<&[usize]>) -> Result<Var<'t>> {
        Ok(match prev {
            None => self.start.expand_axis(0, batch)?,
            Some(tokens) => self.embedding.gather_rows(tokens)?,
        })
    }

    fn step(&self, x: Var<'t>, state: LstmState<'t>) -> Result<(Var<'t>, LstmState<'t>)> {
        let state = self.lstm.step(x, state)?;
        let logits = state.h.matmul(self.w_out)?.add_row(self.b_out)?;
        Ok((logits, state))
    }

    /// Teacher-forced pass over `tokens` (`B x T`).
    pub fn teacher_forced(&self, tokens: &[Vec<usize>]) -> Result<GeneratorTrace<'t>> {
        let (batch, len) = batch_dims(tokens)?;
        let vocab = self.embedding.shape()[0];
        if let Some(&bad) = tokens.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { index: bad, vocab });
        }
        let tape = self.embedding.tape();
        let mut state = self.lstm.zero_state(tape, batch);
        let mut logits = Vec::with_capacity(len);
        let mut hidden = Vec::with_capacity(len);
        let mut prev: Vec<usize> = Vec::new();
        for t in 0..len {
            let x = self.input(batch, if t == 0 { None } else { Some(&prev) })?;
            let (l, s) = self.step(x, state)?;
            state = s;
            let h = state.h.shape()[1];
            logits.push(l.reshape(&[batch, 1, vocab])?);
            hidden.push(state.h.reshape(&[batch, 1, h])?);
            prev = tokens.iter().map(|s| s[t]).collect();
        }
        Ok(GeneratorTrace { logits: tape.concat(&logits, 1)?, hidden: tape.concat(&hidden, 1)? })
    }

    /// Per-sequence log-probabilities `[B]` of `tokens`.
    pub fn sequence_log_probs(&self, tokens: &[Vec<usize>]) -> Result<(Var<'t>, GeneratorTrace<'t>)> {
        let trace = self.teacher_forced(tokens)?;
        let logp = trace.logits.log_softmax()?;
        Ok((pick_tokens(logp, tokens)?, trace))
    }
}

/// Recorded logits `[B, T, V]` and hidden states `[B, T, H]`.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTrace<'t> {
    pub logits: Var<'t>,
    pub hidden: Var<'t>,
}

/// Sums `logp[b, t, tokens[b][t]]` over `t`, giving `[B]`.
pub(crate) fn pick_tokens<'t>(logp: Var<'t>, tokens: &[Vec<usize>]) -> Result<Var<'t>> {
    let shape = logp.shape();
    let (batch, len, vocab) = (shape[0], shape[1], shape[2]);
    let idx: Vec<usize> = tokens
        .iter()
        .enumerate()
        .flat_map(|(b, seq)| seq.iter().enumerate().map(move |(t, &s)| (b * len + t) * vocab + s))
        .collect();
    Ok(logp.gather_flat(&idx)?.reshape(&[batch, len])?.sum_axis(1)?)
}

pub(crate) fn batch_dims(tokens: &[Vec<usize>]) -> Result<(usize, usize)> {
    let first = tokens.first().ok_or(Error::EmptyBatch("sequence batch"))?;
    if first.is_empty() {
        return Err(Error::InvalidLength { len: 0, reason: "sequences must be non-empty" });
    }
    if tokens.iter().any(|s| s.len() != first.len()) {
        return Err(Error::InvalidLength { len: first.len(), reason: "batch sequences must share one length" });
    }
    Ok((tokens.len(), first.len()))
}

/// Sequences drawn from the generator with the uniforms that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    /// `B x T` token indices.
    pub tokens: Vec<Vec<usize>>,
    /// Raw per-step logits `[B, T, V]`.
    pub logits: Tensor,
    /// `log P(S)` per sequence.
    pub log_probs: Vec<f64>,
    /// Gumbel-max uniforms `[B, T, V]`.
    pub u: Tensor,
    /// Uniforms for the conditional relaxation `[B, T, V]`.
    pub v: Tensor,
}

impl SampleBatch {
    pub fn batch_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn seq_len(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Per-step log-probabilities `[B, T, V]`.
    pub fn step_log_probs(&self) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(tape.constant(self.logits.clone()).log_softmax()?.value())
    }

    pub fn relax(&self, lambda: f64) -> Result<RelaxedPair> {
        RelaxedPair::new(&self.step_log_probs()?, &self.tokens, &self.u, &self.v, lambda)
    }
}

fn uniforms<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(Open01)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform shape")
}

/// Samples `batch` sequences of length `len` by the Gumbel-max rule.
///
/// All of `u` is drawn before `v`; token `s_t` is
/// `argmax(log_softmax(logits_t) + G(u_t))`.
pub fn generator_sample<R: Rng + ?Sized>(
    params: &GeneratorParams,
    batch: usize,
    len: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    if batch == 0 || len == 0 {
        return Err(Error::EmptyBatch("generator_sample"));
    }
    let vocab = params.vocab();
    let u = uniforms(&[batch, len, vocab], rng);
    let v = uniforms(&[batch, len, vocab], rng);

    let tape = Tape::new();
    let g = params.bind(&tape, false);
    let mut state = g.lstm.zero_state(&tape, batch);
    let mut tokens = vec![Vec::with_capacity(len); batch];
    let mut logits = Vec::with_capacity(len);
    let mut log_probs = vec![0.0; batch];
    let mut prev: Vec<usize> = Vec::new();
    for t in 0..len {
        let x = g.input(batch, if t == 0 { None } else { Some(&prev) })?;
        let (l, s) = g.step(x, state)?;
        state = s;
        let logp = l.log_softmax()?.value();
        for b in 0..batch {
            let row = &logp.data()[b * vocab..(b + 1) * vocab];
            let off = (b * len + t) * vocab;
            let z = sample_z(row, &u.data()[off..off + vocab])?;
            let tok = hard_threshold(&z);
            tokens[b].push(tok);
            log_probs[b] += row[tok];
        }
        logits.push(l.reshape(&[batch, 1, vocab])?);
        prev = tokens.iter().map(|s| s[t]).collect();
    }
    let logits = tape.concat(&logits, 1)?.value();
    Ok(SampleBatch { tokens, logits, log_probs, u, v })
}

/// Mean per-token negative log-likelihood under teacher forcing.
pub fn generator_nll(params: &GeneratorParams, batch: &[Vec<usize>]) -> Result<f64> {
    let tape = Tape::new();
    let g = params.bind(&tape, false);
    Ok(nll_var(&g, batch)?.item())
}

fn nll_var<'t>(g: &GeneratorVars<'t>, batch: &[Vec<usize>]) -> Result<Var<'t>> {
    let (b, t) = batch_dims(batch)?;
    let (logp, _) = g.sequence_log_probs(batch)?;
    Ok(logp.sum()?.scale(-1.0 / (b * t) as f64)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MleConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
}

/// Maximum-likelihood pretraining; returns the mean mini-batch NLL of each epoch.
pub fn pretrain_mle<R: Rng + ?Sized>(
    params: &mut GeneratorParams,
    data: &[Vec<usize>],
    epochs: usize,
    cfg: &MleConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch("pretrain_mle"));
    }
    let mut adam = Adam::new(cfg.adam, params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let grads = {
                let tape = Tape::new();
                let g = params.bind(&tape, true);
                let loss = nll_var(&g, &batch)?;
                total += loss.item();
                let grads = tape.backward(loss, false)?;
                g.all().into_iter().map(|v| grads.tensor(v)).collect::<Vec<_>>()
            };
            adam.step(params, &grads);
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok(history)
}

//! Score-function and relaxation-based gradient estimators for the generator.
//!
//! Every estimator differentiates a per-batch surrogate
//!
//! ```text
//! L = (1/B) Σ_j [ stop(R_j - η c(z̃_j)) log P(S_j) + η (c(z_j) - c(z̃_j)) ]
//! ```
//!
//! where `c = D∘σ_λ` for REBAR and `c = D∘σ_λ + ĉ_φ` for RELAX. REINFORCE
//! keeps only the score term with coefficient `R_j`. Gradients are ascent
//! directions of `J(θ) = E[D(S)]`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{
    c_combined_var, generator_sample, pick_tokens, ControlVariateParams, ControlVariateVars, Critic, CvInput,
    GeneratorParams, ParamSet, SampleBatch,
};
use crate::ndgraph::{Tape, Tensor, Var};
use crate::relaxation::{z_tilde_var, z_var, RelaxedPair};

/// Largest `V^T` the enumeration oracle accepts.
pub const MAX_ENUMERATION: usize = 1_000_000;

/// Reported in place of `ln 0`.
pub const LOG_VARIANCE_FLOOR: f64 = -745.0;

const RANDOMNESS_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Reinforce,
    Rebar,
    Relax,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Reinforce, EstimatorKind::Rebar, EstimatorKind::Relax];

    /// Short id: `RF`, `RB` or `RX`.
    pub fn id(self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "RF",
            EstimatorKind::Rebar => "RB",
            EstimatorKind::Relax => "RX",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::Rebar => "rebar",
            EstimatorKind::Relax => "relax",
        }
    }

    pub fn uses_relaxation(self) -> bool {
        self != EstimatorKind::Reinforce
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reinforce" | "rf" => Ok(EstimatorKind::Reinforce),
            "rebar" | "rb" => Ok(EstimatorKind::Rebar),
            "relax" | "rx" => Ok(EstimatorKind::Relax),
            _ => Err(Error::Config(format!("unknown estimator {:?} (expected reinforce, rebar or relax)", s))),
        }
    }
}

/// Generator parameters that get per-sample gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ParamSubset {
    /// Output projection weights then bias, both row-major.
    #[default]
    OutputLayer,
    OutputWeight,
    OutputBias,
}

impl ParamSubset {
    pub fn size(self, params: &GeneratorParams) -> usize {
        match self {
            ParamSubset::OutputLayer => params.w_out.len() + params.b_out.len(),
            ParamSubset::OutputWeight => params.w_out.len(),
            ParamSubset::OutputBias => params.b_out.len(),
        }
    }

    /// The subset's entries of a gradient container, flattened.
    pub fn extract(self, grads: &GeneratorParams) -> Vec<f64> {
        let (w, b) = (grads.w_out.data(), grads.b_out.data());
        match self {
            ParamSubset::OutputLayer => w.iter().chain(b).copied().collect(),
            ParamSubset::OutputWeight => w.to_vec(),
            ParamSubset::OutputBias => b.to_vec(),
        }
    }
}

/// The scalar whose gradient variance is logged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackedParam {
    /// One entry of the per-sample subset.
    Index(usize),
    /// Mean of the per-entry variances over the whole subset.
    SubsetMean,
}

impl Default for TrackedParam {
    fn default() -> Self {
        TrackedParam::Index(0)
    }
}

impl fmt::Display for TrackedParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrackedParam::Index(i) => write!(f, "{}", i),
            TrackedParam::SubsetMean => f.write_str("mean"),
        }
    }
}

impl FromStr for TrackedParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mean" {
            return Ok(TrackedParam::SubsetMean);
        }
        s.parse()
            .map(TrackedParam::Index)
            .map_err(|_| Error::Config(format!("tracked parameter must be an index or \"mean\", got {:?}", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorOptions {
    pub eta: f64,
    pub subset: ParamSubset,
    pub cv_input: CvInput,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions { eta: 1.0, subset: ParamSubset::OutputLayer, cv_input: CvInput::Raw }
    }
}

/// A batch gradient estimate of `∇J`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEstimate {
    pub kind: EstimatorKind,
    /// Gradient for every generator tensor, in the generator's own layout.
    pub grads: GeneratorParams,
    /// Per-sample gradients `[B, subset size]`.
    pub per_sample: Tensor,
    pub subset: ParamSubset,
    pub mean_reward: f64,
    /// Temperature used; `None` for REINFORCE.
    pub lambda: Option<f64>,
}

impl GradEstimate {
    pub fn batch_size(&self) -> usize {
        self.per_sample.shape()[0]
    }

    /// Column `index` of the per-sample gradients.
    pub fn per_sample_column(&self, index: usize) -> Result<Vec<f64>> {
        let width = self.per_sample.shape()[1];
        if index >= width {
            return Err(Error::Estimator(format!(
                "tracked index {} outside a parameter subset of size {}",
                index, width
            )));
        }
        Ok(self.per_sample.data().iter().skip(index).step_by(width).copied().collect())
    }
}

/// An estimate still on its tape, for second-order work.
pub struct TapedEstimate<'t> {
    pub kind: EstimatorKind,
    /// Gradients in generator `ParamSet` order.
    pub grads: Vec<Var<'t>>,
    /// Per-sample subset gradients `[B, S]`. Differentiable when requested.
    pub per_sample: Var<'t>,
    pub cv: Option<ControlVariateVars<'t>>,
    pub mean_reward: f64,
    pub lambda: Option<f64>,
}

impl TapedEstimate<'_> {
    pub fn to_estimate(&self, template: &GeneratorParams, subset: ParamSubset) -> Result<GradEstimate> {
        let mut grads = template.clone();
        for (slot, g) in grads.params_mut().into_iter().zip(&self.grads) {
            *slot = g.value();
        }
        Ok(GradEstimate {
            kind: self.kind,
            grads,
            per_sample: self.per_sample.value(),
            subset,
            mean_reward: self.mean_reward,
            lambda: self.lambda,
        })
    }
}

/// Everything an estimator reads.
pub struct EstimatorInputs<'a, C: Critic + ?Sized> {
    pub theta: &'a GeneratorParams,
    pub critic: &'a C,
    pub cv: Option<&'a ControlVariateParams>,
    pub batch: &'a SampleBatch,
    pub pair: Option<&'a RelaxedPair>,
}

impl<C: Critic + ?Sized> Clone for EstimatorInputs<'_, C> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<C: Critic + ?Sized> Copy for EstimatorInputs<'_, C> {}

/// Builds the estimator on `tape`.
///
/// With `differentiable`, the per-sample gradients stay connected to the
/// graph so a function of them can be differentiated again (for example
/// with respect to the control-variate parameters in `cv`).
pub fn estimate_on_tape<'t, C: Critic + ?Sized>(
    tape: &'t Tape,
    kind: EstimatorKind,
    inputs: EstimatorInputs<'_, C>,
    opts: &EstimatorOptions,
    differentiable: bool,
) -> Result<TapedEstimate<'t>> {
    let EstimatorInputs { theta, critic, cv, batch, pair } = inputs;
    let tokens = &batch.tokens;
    let (b, len, vocab) = (batch.batch_size(), batch.seq_len(), theta.vocab());
    if b == 0 {
        return Err(Error::EmptyBatch("estimator"));
    }
    if kind == EstimatorKind::Relax && cv.is_none() {
        return Err(Error::Estimator("relax needs control-variate parameters".into()));
    }

    let g = theta.bind(tape, true);
    let trace = g.teacher_forced(tokens)?;
    let step_logp = trace.logits.log_softmax()?;
    let logp = pick_tokens(step_logp, tokens)?;
    let rewards = critic.score_tokens(tokens)?;
    let mean_reward = rewards.iter().sum::<f64>() / b as f64;
    let reward = tape.constant(Tensor::vector(rewards));

    let cv_vars = match kind {
        EstimatorKind::Relax => cv.map(|p| p.bind(tape, true)),
        _ => None,
    };
    let (coef, relax_term, lambda) = if kind.uses_relaxation() {
        let pair = pair.ok_or_else(|| Error::Estimator(format!("{} needs a relaxed pair", kind)))?;
        let z = z_var(step_logp, &batch.u)?;
        let z_tilde = z_tilde_var(trace.logits, tokens, &batch.v)?;
        check_randomness(pair, tokens, &z.value(), &z_tilde.value())?;
        let both = tape.concat(&[z, z_tilde], 0)?;
        let c = c_combined_var(both, cv_vars.as_ref(), critic, pair.lambda, opts.cv_input)?;
        let c_z = c.slice(0, 0, b)?;
        let c_zt = c.slice(0, b, b)?;
        let coef = reward.sub(c_zt.scale(opts.eta)?)?;
        let relax_term = c_z.sub(c_zt)?.scale(opts.eta)?;
        (coef, Some(relax_term), Some(pair.lambda))
    } else {
        (reward, None, None)
    };

    let mut per_sample_loss = coef.detach().mul(logp)?;
    if let Some(r) = relax_term {
        per_sample_loss = per_sample_loss.add(r)?;
    }
    let surrogate = per_sample_loss.mean()?;
    let grads = tape.grad(surrogate, &g.all(), differentiable)?;

    // Each sample's surrogate touches only its own logits row, so the
    // per-sample subset gradient is h_jᵀ δ_j with δ_j = ∂L_j/∂logits_j.
    let d_logp = tape.grad(logp.sum()?, &[trace.logits], differentiable)?[0];
    let coef_rows = coef.expand_axis(1, len * vocab)?.reshape(&[b, len, vocab])?;
    let mut delta = coef_rows.mul(d_logp)?;
    if let Some(r) = relax_term {
        let d_c = tape.grad(r.sum()?, &[trace.logits], differentiable)?[0];
        delta = delta.add(d_c)?;
    }
    if !differentiable {
        delta = delta.detach();
    }
    let hidden = trace.hidden.shape()[2];
    let g_w = trace.hidden.transpose()?.matmul(delta)?.reshape(&[b, hidden * vocab])?;
    let g_b = delta.sum_axis(1)?;
    let per_sample = match opts.subset {
        ParamSubset::OutputLayer => tape.concat(&[g_w, g_b], 1)?,
        ParamSubset::OutputWeight => g_w,
        ParamSubset::OutputBias => g_b,
    };

    Ok(TapedEstimate { kind, grads, per_sample, cv: cv_vars, mean_reward, lambda })
}

fn check_randomness(pair: &RelaxedPair, tokens: &[Vec<usize>], z: &Tensor, z_tilde: &Tensor) -> Result<()> {
    if pair.z.shape() != z.shape() || pair.z_tilde.shape() != z_tilde.shape() {
        return Err(Error::MismatchedRandomness(format!(
            "relaxed pair has shape {:?}, batch has {:?}",
            pair.z.shape(),
            z.shape()
        )));
    }
    pair.check_tokens(tokens)?;
    if pair.z.max_abs_diff(z) > RANDOMNESS_TOLERANCE || pair.z_tilde.max_abs_diff(z_tilde) > RANDOMNESS_TOLERANCE {
        return Err(Error::MismatchedRandomness("relaxed pair was not built from this batch's uniforms".into()));
    }
    Ok(())
}

/// Runs one estimator and reads the results off the tape.
pub fn estimate<C: Critic + ?Sized>(
    kind: EstimatorKind,
    inputs: EstimatorInputs<'_, C>,
    opts: &EstimatorOptions,
) -> Result<GradEstimate> {
    let tape = Tape::new();
    estimate_on_tape(&tape, kind, inputs, opts, false)?.to_estimate(inputs.theta, opts.subset)
}

pub fn reinforce_grad<C: Critic + ?Sized>(
    theta: &GeneratorParams,
    critic: &C,
    batch: &SampleBatch,
    opts: &EstimatorOptions,
) -> Result<GradEstimate> {
    let inputs = EstimatorInputs { theta, critic, cv: None, batch, pair: None };
    estimate(EstimatorKind::Reinforce, inputs, opts)
}

pub fn rebar_grad<C: Critic + ?Sized>(
    theta: &GeneratorParams,
    critic: &C,
    batch: &SampleBatch,
    pair: &RelaxedPair,
    opts: &EstimatorOptions,
) -> Result<GradEstimate> {
    let inputs = EstimatorInputs { theta, critic, cv: None, batch, pair: Some(pair) };
    estimate(EstimatorKind::Rebar, inputs, opts)
}

pub fn relax_grad<C: Critic + ?Sized>(
    theta: &GeneratorParams,
    cv: &ControlVariateParams,
    critic: &C,
    batch: &SampleBatch,
    pair: &RelaxedPair,
    opts: &EstimatorOptions,
) -> Result<GradEstimate> {
    let inputs = EstimatorInputs { theta, critic, cv: Some(cv), batch, pair: Some(pair) };
    estimate(EstimatorKind::Relax, inputs, opts)
}

/// `(1/B) Σ_j ‖g_j‖²` over per-sample gradients `[B, S]`.
///
/// Fails when the gradients are detached from the graph, since the result
/// could not then be differentiated with respect to anything.
pub fn cv_variance_objective(per_sample: Var<'_>) -> Result<Var<'_>> {
    if !per_sample.requires_grad() {
        return Err(Error::Estimator("per-sample gradients are not on a differentiable graph".into()));
    }
    let b = per_sample.shape()[0];
    Ok(per_sample.square()?.sum()?.scale(1.0 / b as f64)?)
}

/// Objective value and its gradient in control-variate `ParamSet` order.
pub fn cv_objective_with_grad<C: Critic + ?Sized>(
    inputs: EstimatorInputs<'_, C>,
    opts: &EstimatorOptions,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let est = estimate_on_tape(&tape, EstimatorKind::Relax, inputs, opts, true)?;
    let objective = cv_variance_objective(est.per_sample)?;
    let cv = est.cv.expect("relax binds the control variate");
    let grads = tape.grad(objective, &cv.all(), false)?;
    Ok((objective.item(), grads.iter().map(|g| g.value()).collect()))
}

/// Exact `J` and `∇J` by summing over every sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleGradient {
    pub j: f64,
    pub grads: GeneratorParams,
}

/// Every sequence of length `len` over `vocab` tokens, in lexicographic order.
pub fn enumerate_sequences(vocab: usize, len: usize) -> Result<Vec<Vec<usize>>> {
    let total = checked_count(vocab, len)?;
    Ok((0..total)
        .map(|mut i| {
            let mut seq = vec![0; len];
            for slot in seq.iter_mut().rev() {
                *slot = i % vocab;
                i /= vocab;
            }
            seq
        })
        .collect())
}

fn checked_count(vocab: usize, len: usize) -> Result<usize> {
    let mut total: usize = 1;
    for _ in 0..len {
        total = total.checked_mul(vocab).filter(|&t| t <= MAX_ENUMERATION).ok_or(Error::NotEnumerable { vocab, len })?;
    }
    Ok(total)
}

pub fn exact_gradient_oracle<C: Critic + ?Sized>(theta: &GeneratorParams, f: &C, len: usize) -> Result<OracleGradient> {
    const CHUNK: usize = 4096;
    if len == 0 {
        return Err(Error::InvalidLength { len, reason: "sequence length must be positive" });
    }
    let all = enumerate_sequences(theta.vocab(), len)?;
    let mut j = 0.0;
    let mut grads: Vec<Tensor> = theta.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for chunk in all.chunks(CHUNK) {
        let tape = Tape::new();
        let g = theta.bind(&tape, true);
        let (logp, _) = g.sequence_log_probs(chunk)?;
        let reward = tape.constant(Tensor::vector(f.score_tokens(chunk)?));
        let part = logp.exp()?.mul(reward)?.sum()?;
        j += part.item();
        let chunk_grads = tape.backward(part, false)?;
        for (acc, v) in grads.iter_mut().zip(g.all()) {
            for (a, x) in acc.data_mut().iter_mut().zip(chunk_grads.tensor(v).data()) {
                *a += x;
            }
        }
    }
    let mut out = theta.clone();
    for (slot, g) in out.params_mut().into_iter().zip(grads) {
        *slot = g;
    }
    Ok(OracleGradient { j, grads: out })
}

/// Reward `1` when `token` sits at `position`; relaxed form reads that probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenIndicator {
    pub position: usize,
    pub token: usize,
}

impl Critic for TokenIndicator {
    fn score_tokens(&self, tokens: &[Vec<usize>]) -> Result<Vec<f64>> {
        tokens
            .iter()
            .map(|s| match s.get(self.position) {
                Some(&t) => Ok(if t == self.token { 1.0 } else { 0.0 }),
                None => Err(Error::InvalidLength { len: s.len(), reason: "sequence shorter than indicator position" }),
            })
            .collect()
    }

    fn score_relaxed<'t>(&self, rows: Var<'t>) -> Result<Var<'t>> {
        let shape = rows.shape();
        let (b, len, vocab) = (shape[0], shape[1], shape[2]);
        if self.position >= len || self.token >= vocab {
            return Err(Error::Estimator(format!("indicator ({}, {}) outside rows {:?}", self.position, self.token, shape)));
        }
        let idx: Vec<usize> = (0..b).map(|j| (j * len + self.position) * vocab + self.token).collect();
        Ok(rows.gather_flat(&idx)?)
    }
}

/// The same reward for every sequence, hard or relaxed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantReward(pub f64);

impl Critic for ConstantReward {
    fn score_tokens(&self, tokens: &[Vec<usize>]) -> Result<Vec<f64>> {
        Ok(vec![self.0; tokens.len()])
    }

    fn score_relaxed<'t>(&self, rows: Var<'t>) -> Result<Var<'t>> {
        Ok(rows.tape().constant(Tensor::filled(&[rows.shape()[0]], self.0)))
    }
}

/// One parameter's line in a bias test.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasRow {
    pub name: String,
    pub mean: f64,
    pub std_error: f64,
    pub oracle: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    pub kind: EstimatorKind,
    pub trials: usize,
    pub rows: Vec<BiasRow>,
}

impl BiasReport {
    /// Share of rows with `|z| < threshold`.
    pub fn fraction_within(&self, threshold: f64) -> f64 {
        let ok = self.rows.iter().filter(|r| r.z.abs() < threshold).count();
        ok as f64 / self.rows.len().max(1) as f64
    }

    pub fn max_abs_z(&self) -> f64 {
        self.rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "estimator {} trials {}\n{:<22} {:>14} {:>12} {:>14} {:>8}\n",
            self.kind.id(),
            self.trials,
            "parameter",
            "mean",
            "std_error",
            "oracle",
            "z"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>14.6e} {:>12.4e} {:>14.6e} {:>8.3}\n",
                r.name, r.mean, r.std_error, r.oracle, r.z
            ));
        }
        out.push_str(&format!(
            "within |z|<3: {:.2}%  max |z|: {:.3}\n",
            100.0 * self.fraction_within(3.0),
            self.max_abs_z()
        ));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasTestConfig {
    pub trials: usize,
    /// Samples per estimator call; the standard error comes from the spread of batch means.
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
}

/// Compares the estimator's sample mean of `∇J` with the enumeration oracle,
/// for every generator parameter.
pub fn estimator_bias_test<C: Critic + ?Sized>(
    kind: EstimatorKind,
    theta: &GeneratorParams,
    f: &C,
    cv: Option<&ControlVariateParams>,
    len: usize,
    cfg: &BiasTestConfig,
    opts: &EstimatorOptions,
) -> Result<BiasReport> {
    let BiasTestConfig { trials, batch_size, lambda, seed } = *cfg;
    if batch_size == 0 || trials % batch_size != 0 || trials / batch_size < 2 {
        return Err(Error::Config(format!(
            "trials {} must be a multiple of batch size {} covering at least two batches",
            trials, batch_size
        )));
    }
    let oracle = exact_gradient_oracle(theta, f, len)?;
    let names: Vec<String> = theta
        .params()
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| format!("{}[{}]", name, i)))
        .collect();
    let mut stats = vec![Welford::default(); names.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials / batch_size {
        let batch = generator_sample(theta, batch_size, len, &mut rng)?;
        let pair = if kind.uses_relaxation() { Some(batch.relax(lambda)?) } else { None };
        let inputs = EstimatorInputs { theta, critic: f, cv, batch: &batch, pair: pair.as_ref() };
        let est = estimate(kind, inputs, opts)?;
        for (s, x) in stats.iter_mut().zip(est.grads.flatten()) {
            s.push(x);
        }
    }
    let rows = names
        .into_iter()
        .zip(stats)
        .zip(oracle.grads.flatten())
        .map(|((name, s), oracle)| {
            let std_error = (s.sample_variance() / s.count as f64).sqrt();
            let diff = s.mean - oracle;
            let z = if std_error > 0.0 {
                diff / std_error
            } else if diff.abs() <= 1e-12 * oracle.abs().max(1.0) {
                0.0
            } else {
                f64::INFINITY.copysign(diff)
            };
            BiasRow { name, mean: s.mean, std_error, oracle, z }
        })
        .collect();
    Ok(BiasReport { kind, trials, rows })
}

/// Natural log of the sample variance of the tracked per-sample gradient,
/// pooled over every sample in `window`.
pub fn tracked_param_variance(window: &[GradEstimate], tracked: TrackedParam) -> Result<f64> {
    if window.len() < 2 {
        return Err(Error::Estimator(format!("variance window needs at least 2 estimates, got {}", window.len())));
    }
    let width = window[0].per_sample.shape()[1];
    if window.iter().any(|e| e.per_sample.shape()[1] != width) {
        return Err(Error::Estimator("estimates in the window track different parameter subsets".into()));
    }
    let variance = match tracked {
        TrackedParam::Index(i) => column_variance(window, i)?,
        TrackedParam::SubsetMean => {
            let mut total = 0.0;
            for i in 0..width {
                total += column_variance(window, i)?;
            }
            total / width as f64
        }
    };
    Ok(log_or_floor(variance))
}

fn column_variance(window: &[GradEstimate], index: usize) -> Result<f64> {
    let mut w = Welford::default();
    for e in window {
        for x in e.per_sample_column(index)? {
            w.push(x);
        }
    }
    Ok(w.sample_variance())
}

pub fn log_or_floor(variance: f64) -> f64 {
    if variance > 0.0 {
        variance.ln().max(LOG_VARIANCE_FLOOR)
    } else {
        LOG_VARIANCE_FLOOR
    }
}

/// Streaming mean and variance.
#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    fn sample_variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        ControlVariateConfig, DiscriminatorConfig, DiscriminatorParams, GeneratorConfig,
    };

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn generator(vocab: usize, seed: u64) -> GeneratorParams {
        GeneratorParams::init(GeneratorConfig { vocab, embed: 3, hidden: 4 }, &mut rng(seed))
    }

    /// Random recurrent weights, zero output layer: uniform logits.
    fn tiny_generator(seed: u64) -> GeneratorParams {
        let mut g = generator(2, seed);
        g.w_out.data_mut().fill(0.0);
        g.b_out.data_mut().fill(0.0);
        g
    }

    fn discriminator(vocab: usize, seed: u64) -> DiscriminatorParams {
        DiscriminatorParams::init(DiscriminatorConfig { vocab, embed: 3, hidden: 4 }, &mut rng(seed))
    }

    fn cv(vocab: usize, seed: u64) -> ControlVariateParams {
        ControlVariateParams::init_random(ControlVariateConfig { vocab, channels: 3, kernel: 3 }, &mut rng(seed))
    }

    const INDICATOR: TokenIndicator = TokenIndicator { position: 0, token: 0 };

    #[test]
    fn kind_names_parse() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
            assert_eq!(k.id().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("gumbel".parse::<EstimatorKind>().is_err());
        assert_eq!("mean".parse::<TrackedParam>().unwrap(), TrackedParam::SubsetMean);
        assert_eq!("7".parse::<TrackedParam>().unwrap(), TrackedParam::Index(7));
    }

    #[test]
    fn enumeration_order_and_limit() {
        assert_eq!(enumerate_sequences(2, 2).unwrap(), vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert!(matches!(enumerate_sequences(5, 9), Err(Error::NotEnumerable { .. })));
        assert_eq!(enumerate_sequences(10, 6).unwrap().len(), 1_000_000);
    }

    #[test]
    fn oracle_on_two_token_indicator() {
        let g = tiny_generator(1);
        let o = exact_gradient_oracle(&g, &INDICATOR, 1).unwrap();
        assert!((o.j - 0.5).abs() < 1e-15);
        assert!((o.grads.b_out.data()[0] - 0.25).abs() < 1e-15);
        assert!((o.grads.b_out.data()[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn oracle_of_constant_is_zero() {
        let g = generator(3, 2);
        let o = exact_gradient_oracle(&g, &ConstantReward(0.7), 3).unwrap();
        assert!((o.j - 0.7).abs() < 1e-12);
        assert!(o.grads.flatten().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn oracle_matches_finite_differences() {
        let g = generator(3, 3);
        let d = discriminator(3, 4);
        let o = exact_gradient_oracle(&g, &d, 2).unwrap();
        assert!(o.j > 0.0 && o.j < 1.0);
        let eps = 1e-5;
        let flat = o.grads.flatten();
        for probe in [0, 5, 17, flat.len() - 1] {
            let shifted = |delta: f64| {
                let mut p = g.clone();
                let mut k = probe;
                for t in p.params_mut() {
                    if k < t.len() {
                        t.data_mut()[k] += delta;
                        break;
                    }
                    k -= t.len();
                }
                exact_gradient_oracle(&p, &d, 2).unwrap().j
            };
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            assert!((fd - flat[probe]).abs() < 1e-8, "{} vs {}", fd, flat[probe]);
        }
    }

    fn sample(theta: &GeneratorParams, b: usize, len: usize, seed: u64) -> (SampleBatch, RelaxedPair) {
        let batch = generator_sample(theta, b, len, &mut rng(seed)).unwrap();
        let pair = batch.relax(1.0).unwrap();
        (batch, pair)
    }

    #[test]
    fn per_sample_mean_matches_gradient_map() {
        let g = generator(5, 5);
        let d = discriminator(5, 6);
        let c = cv(5, 7);
        let (batch, pair) = sample(&g, 6, 3, 8);
        let opts = EstimatorOptions::default();
        for kind in EstimatorKind::ALL {
            let inputs = EstimatorInputs { theta: &g, critic: &d, cv: Some(&c), batch: &batch, pair: Some(&pair) };
            let est = estimate(kind, inputs, &opts).unwrap();
            let subset = opts.subset.extract(&est.grads);
            let width = subset.len();
            assert_eq!(est.per_sample.shape(), &[6, width]);
            for (k, want) in subset.iter().enumerate() {
                let mean = est.per_sample_column(k).unwrap().iter().sum::<f64>() / 6.0;
                assert!((mean - want).abs() < 1e-9, "{} entry {}", kind, k);
            }
        }
    }

    #[test]
    fn relax_with_zero_output_cv_equals_rebar() {
        let g = generator(5, 9);
        let d = discriminator(5, 10);
        let zero_cv = ControlVariateParams::init(ControlVariateConfig::new(5), &mut rng(11));
        let (batch, pair) = sample(&g, 8, 3, 12);
        let opts = EstimatorOptions::default();
        let rb = rebar_grad(&g, &d, &batch, &pair, &opts).unwrap();
        let rx = relax_grad(&g, &zero_cv, &d, &batch, &pair, &opts).unwrap();
        assert_eq!(rb.grads, rx.grads);
        assert_eq!(rb.per_sample, rx.per_sample);
    }

    #[test]
    fn constant_reward_cancels_exactly() {
        let g = generator(5, 13);
        let (batch, pair) = sample(&g, 5, 3, 14);
        let opts = EstimatorOptions::default();
        let zero_cv = ControlVariateParams::init(ControlVariateConfig::new(5), &mut rng(15));
        let rb = rebar_grad(&g, &ConstantReward(0.3), &batch, &pair, &opts).unwrap();
        let rx = relax_grad(&g, &zero_cv, &ConstantReward(0.3), &batch, &pair, &opts).unwrap();
        for est in [rb, rx] {
            assert!(est.per_sample.data().iter().all(|&x| x == 0.0));
            assert!(est.grads.flatten().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let g = generator(5, 16);
        let d = discriminator(5, 17);
        let (batch, _) = sample(&g, 4, 3, 18);
        let (_, other) = sample(&g, 4, 3, 19);
        let err = rebar_grad(&g, &d, &batch, &other, &EstimatorOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MismatchedRandomness(_)), "{err}");
        let short = sample(&g, 3, 3, 18).1;
        assert!(matches!(
            rebar_grad(&g, &d, &batch, &short, &EstimatorOptions::default()),
            Err(Error::MismatchedRandomness(_))
        ));
    }

    #[test]
    fn reinforce_on_tiny_instance_matches_closed_form() {
        let g = tiny_generator(20);
        let (batch, _) = sample(&g, 4, 1, 21);
        let est = reinforce_grad(&g, &INDICATOR, &batch, &EstimatorOptions::default()).unwrap();
        // R (onehot(b) - p) on the bias, with p = (0.5, 0.5).
        let width = est.per_sample.shape()[1];
        for (j, seq) in batch.tokens.iter().enumerate() {
            let r = if seq[0] == 0 { 1.0 } else { 0.0 };
            let row = &est.per_sample.data()[j * width..(j + 1) * width];
            let bias = &row[width - 2..];
            let want0 = r * (if seq[0] == 0 { 0.5 } else { -0.5 });
            assert!((bias[0] - want0).abs() < 1e-15);
            assert!((bias[1] + want0).abs() < 1e-15);
        }
    }

    #[test]
    fn cv_objective_needs_a_graph() {
        let tape = Tape::new();
        let detached = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(cv_variance_objective(detached).is_err());
        let tracked = tape.param(Tensor::zeros(&[2, 3]));
        let obj = cv_variance_objective(tracked).unwrap();
        assert_eq!(obj.item(), 0.0);
        assert_eq!(tape.grad(obj, &[tracked], false).unwrap()[0].value(), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn reinforce_per_sample_has_no_cv_dependence() {
        let g = generator(3, 22);
        let d = discriminator(3, 23);
        let c = cv(3, 24);
        let (batch, _) = sample(&g, 4, 2, 25);
        let tape = Tape::new();
        let inputs = EstimatorInputs { theta: &g, critic: &d, cv: None, batch: &batch, pair: None };
        let est = estimate_on_tape(&tape, EstimatorKind::Reinforce, inputs, &EstimatorOptions::default(), true).unwrap();
        let phi = c.bind(&tape, true);
        let obj = cv_variance_objective(est.per_sample).unwrap();
        assert!(obj.item() > 0.0);
        for grad in tape.grad(obj, &phi.all(), false).unwrap() {
            assert!(grad.value().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn cv_objective_gradient_matches_finite_differences() {
        let g = generator(3, 26);
        let d = discriminator(3, 27);
        let c = cv(3, 28);
        let (batch, pair) = sample(&g, 5, 2, 29);
        let opts = EstimatorOptions::default();
        let objective = |c: &ControlVariateParams| {
            let inputs = EstimatorInputs { theta: &g, critic: &d, cv: Some(c), batch: &batch, pair: Some(&pair) };
            cv_objective_with_grad(inputs, &opts).unwrap()
        };
        let (_, grads) = objective(&c);
        let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for probe in (0..analytic.len()).step_by(analytic.len() / 10).take(10) {
            let value = |delta: f64| {
                let mut p = c.clone();
                let mut k = probe;
                for t in p.params_mut() {
                    if k < t.len() {
                        t.data_mut()[k] += delta;
                        break;
                    }
                    k -= t.len();
                }
                objective(&p).0
            };
            let fd = (value(eps) - value(-eps)) / (2.0 * eps);
            worst = worst.max((fd - analytic[probe]).abs() / analytic[probe].abs().max(1.0));
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn variance_window_rules() {
        let g = tiny_generator(30);
        let make = |data: Vec<f64>| GradEstimate {
            kind: EstimatorKind::Reinforce,
            grads: g.clone(),
            per_sample: Tensor::new(vec![data.len(), 1], data).unwrap(),
            subset: ParamSubset::OutputBias,
            mean_reward: 0.0,
            lambda: None,
        };
        let flat = [make(vec![0.5; 3]), make(vec![0.5; 3])];
        assert_eq!(tracked_param_variance(&flat, TrackedParam::Index(0)).unwrap(), LOG_VARIANCE_FLOOR);
        assert!(tracked_param_variance(&flat[..1], TrackedParam::Index(0)).is_err());
        assert!(tracked_param_variance(&flat, TrackedParam::Index(1)).is_err());

        let a = [make(vec![1.0, 2.0]), make(vec![4.0, 7.0])];
        let scaled = [make(vec![3.0, 6.0]), make(vec![12.0, 21.0])];
        // Sample variance of {1, 2, 4, 7} is 7.
        let base = tracked_param_variance(&a, TrackedParam::Index(0)).unwrap();
        assert!((base - 7f64.ln()).abs() < 1e-14);
        let shifted = tracked_param_variance(&scaled, TrackedParam::Index(0)).unwrap();
        assert!((shifted - base - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bias_report_flags_a_wrong_oracle() {
        let report = BiasReport {
            kind: EstimatorKind::Rebar,
            trials: 10,
            rows: vec![
                BiasRow { name: "a".into(), mean: 1.0, std_error: 0.1, oracle: 1.05, z: -0.5 },
                BiasRow { name: "b".into(), mean: 1.0, std_error: 0.1, oracle: 2.0, z: -10.0 },
            ],
        };
        assert_eq!(report.fraction_within(3.0), 0.5);
        assert_eq!(report.max_abs_z(), 10.0);
        assert!(report.render().contains("within |z|<3: 50.00%"));
    }

    #[test]
    fn bias_test_on_tiny_instance() {
        let g = tiny_generator(31);
        let c = cv(2, 32);
        let cfg = BiasTestConfig { trials: 20_000, batch_size: 1000, lambda: 1.0, seed: 33 };
        for kind in EstimatorKind::ALL {
            let report =
                estimator_bias_test(kind, &g, &INDICATOR, Some(&c), 1, &cfg, &EstimatorOptions::default()).unwrap();
            let bias = report.rows.iter().find(|r| r.name == "b_out[0]").unwrap();
            assert!((bias.oracle - 0.25).abs() < 1e-15);
            assert!(bias.z.abs() < 4.0, "{}: {}", kind, report.render());
        }
        let bad = BiasTestConfig { trials: 1500, ..cfg };
        assert!(estimator_bias_test(EstimatorKind::Reinforce, &g, &INDICATOR, None, 1, &bad, &EstimatorOptions::default()).is_err());
    }
}

//! Pretraining followed by alternating generator and discriminator updates.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::metrics::MetricsRecord;
use crate::error::Result;
use crate::estimators::{
    cv_variance_objective, estimate, estimate_on_tape, tracked_param_variance, EstimatorInputs, EstimatorKind,
    EstimatorOptions, GradEstimate,
};
use crate::grammar::{self, GrammarDataset, VOCAB_SIZE};
use crate::models::{
    discriminator_loss, discriminator_train_step, generator_nll, generator_sample, pretrain_mle, Adam, AdamConfig,
    Checkpoint, ControlVariateConfig, ControlVariateParams, DiscriminatorConfig, DiscriminatorParams,
    GeneratorConfig, GeneratorParams, MleConfig, ParamSet,
};
use crate::ndgraph::{Tape, Tensor};

const HELDOUT_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
/// Estimator batches drawn when a variance window would otherwise be too small.
const VARIANCE_BATCHES: usize = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Networks and optimizer state of one run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub control_variate: ControlVariateParams,
    adam_g: Adam,
    adam_d: Adam,
    adam_cv: Adam,
}

impl TrainState {
    pub fn init<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Self {
        let generator = GeneratorParams::init(
            GeneratorConfig { vocab: VOCAB_SIZE, embed: cfg.gen_embed, hidden: cfg.gen_hidden },
            rng,
        );
        let discriminator = DiscriminatorParams::init(
            DiscriminatorConfig { vocab: VOCAB_SIZE, embed: cfg.disc_embed, hidden: cfg.disc_hidden },
            rng,
        );
        let control_variate = ControlVariateParams::init(
            ControlVariateConfig { vocab: VOCAB_SIZE, channels: cfg.cv_channels, kernel: cfg.cv_kernel },
            rng,
        );
        TrainState::from_params(cfg, generator, discriminator, control_variate)
    }

    pub fn from_params(
        cfg: &TrainConfig,
        generator: GeneratorParams,
        discriminator: DiscriminatorParams,
        control_variate: ControlVariateParams,
    ) -> Self {
        TrainState {
            adam_g: Adam::new(AdamConfig::with_lr(cfg.lr_generator), &generator),
            adam_d: Adam::new(AdamConfig::with_lr(cfg.lr_discriminator), &discriminator),
            adam_cv: Adam::new(AdamConfig::with_lr(cfg.lr_control_variate), &control_variate),
            generator,
            discriminator,
            control_variate,
        }
    }
}

pub fn estimator_options(cfg: &TrainConfig) -> EstimatorOptions {
    EstimatorOptions { eta: cfg.eta, subset: cfg.param_subset, cv_input: cfg.cv_input }
}

/// One generator update with the configured estimator and, for RELAX, one
/// control-variate step on the per-sample variance objective.
pub fn g_step<R: Rng + ?Sized>(state: &mut TrainState, cfg: &TrainConfig, rng: &mut R) -> Result<GradEstimate> {
    let batch = generator_sample(&state.generator, cfg.batch_size, cfg.seq_len, rng)?;
    let pair = if cfg.estimator.uses_relaxation() { Some(batch.relax(cfg.lambda)?) } else { None };
    let opts = estimator_options(cfg);
    let inputs = EstimatorInputs {
        theta: &state.generator,
        critic: &state.discriminator,
        cv: Some(&state.control_variate),
        batch: &batch,
        pair: pair.as_ref(),
    };
    let (est, cv_grads) = if cfg.estimator == EstimatorKind::Relax {
        let tape = Tape::new();
        let taped = estimate_on_tape(&tape, EstimatorKind::Relax, inputs, &opts, true)?;
        let objective = cv_variance_objective(taped.per_sample)?;
        let cv = taped.cv.expect("relax binds the control variate");
        let grads = tape.grad(objective, &cv.all(), false)?;
        let est = taped.to_estimate(&state.generator, opts.subset)?;
        (est, Some(grads.iter().map(|g| g.value()).collect::<Vec<Tensor>>()))
    } else {
        (estimate(cfg.estimator, inputs, &opts)?, None)
    };
    // Estimates are ascent directions of J; the optimizer descends.
    let descent: Vec<Tensor> = est.grads.params().iter().map(|(_, t)| t.map(|x| -x)).collect();
    state.adam_g.step(&mut state.generator, &descent);
    if let Some(grads) = cv_grads {
        state.adam_cv.step(&mut state.control_variate, &grads);
    }
    Ok(est)
}

/// One discriminator update against a fresh generated batch of the same size as `real`.
pub fn d_step<R: Rng + ?Sized>(state: &mut TrainState, real: &[Vec<usize>], cfg: &TrainConfig, rng: &mut R) -> Result<f64> {
    let fake = generator_sample(&state.generator, real.len(), cfg.seq_len, rng)?.tokens;
    discriminator_train_step(&mut state.discriminator, &mut state.adam_d, real, &fake)
}

/// Estimates drawn only to measure variance; parameters are untouched.
fn measurement_window<R: Rng + ?Sized>(state: &TrainState, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<GradEstimate>> {
    let opts = estimator_options(cfg);
    (0..VARIANCE_BATCHES)
        .map(|_| {
            let batch = generator_sample(&state.generator, cfg.batch_size, cfg.seq_len, rng)?;
            let pair = if cfg.estimator.uses_relaxation() { Some(batch.relax(cfg.lambda)?) } else { None };
            let inputs = EstimatorInputs {
                theta: &state.generator,
                critic: &state.discriminator,
                cv: Some(&state.control_variate),
                batch: &batch,
                pair: pair.as_ref(),
            };
            estimate(cfg.estimator, inputs, &opts)
        })
        .collect()
}

struct Evaluator {
    heldout: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
    start: Instant,
}

impl Evaluator {
    fn record(
        &mut self,
        epoch: usize,
        state: &TrainState,
        window: &[GradEstimate],
        cfg: &TrainConfig,
    ) -> Result<MetricsRecord> {
        let measured;
        let window = if window.len() >= 2 {
            window
        } else {
            measured = measurement_window(state, cfg, &mut self.rng)?;
            &measured
        };
        let log_variance = tracked_param_variance(window, cfg.tracked_param)?;
        let sample = generator_sample(&state.generator, cfg.eval_batch_size, cfg.seq_len, &mut self.rng)?.tokens;
        Ok(MetricsRecord {
            epoch,
            goodness: grammar::batch_goodness(&sample)?,
            log_variance,
            nll: generator_nll(&state.generator, &self.heldout)?,
            d_loss: discriminator_loss(&state.discriminator, &self.heldout, &sample)?,
            unigram: grammar::unigram_stats(&sample)?,
            seconds: if cfg.record_seconds { self.start.elapsed().as_secs_f64() } else { 0.0 },
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Baseline record after pretraining, then one per adversarial epoch.
    pub history: Vec<MetricsRecord>,
    /// Mean NLL of each generator pretraining epoch.
    pub pretrain_nll: Vec<f64>,
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("seq_len", cfg.seq_len);
        ck.set_meta("estimator", cfg.estimator.name());
        ck.set_meta("seed", cfg.seed);
        ck.add_params("generator", &self.state.generator);
        ck.add_params("discriminator", &self.state.discriminator);
        ck.add_params("control_variate", &self.state.control_variate);
        ck
    }
}

pub fn load_or_generate(cfg: &TrainConfig) -> Result<GrammarDataset> {
    if cfg.data.is_empty() {
        grammar::generate_dataset(cfg.dataset_size, cfg.seq_len, cfg.seed)
    } else {
        let data = grammar::load_dataset(std::path::Path::new(&cfg.data))?;
        if data.seq_len != cfg.seq_len {
            return Err(crate::Error::Config(format!(
                "dataset {} has length {}, config asks for {}",
                cfg.data, data.seq_len, cfg.seq_len
            )));
        }
        Ok(data)
    }
}

/// Full run: pretraining, then `adversarial_epochs` epochs of g-steps and
/// d-steps over the dataset in mini-batches.
pub fn adversarial_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let data = load_or_generate(cfg)?.sequences;
    let heldout = grammar::generate_dataset(cfg.heldout_size, cfg.seq_len, cfg.seed.wrapping_add(HELDOUT_SEED_OFFSET))?
        .sequences;
    let mut train_rng = stream(cfg.seed, TRAIN_STREAM);
    let mut state = TrainState::init(cfg, &mut stream(cfg.seed, INIT_STREAM));
    let untrained = state.generator.clone();

    let mle = MleConfig { batch_size: cfg.batch_size, adam: AdamConfig::with_lr(cfg.lr_pretrain) };
    let pretrain_nll = pretrain_mle(&mut state.generator, &data, cfg.pretrain_epochs, &mle, &mut train_rng)?;

    if cfg.pretrain_discriminator {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut train_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let real: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let fake = generator_sample(&untrained, real.len(), cfg.seq_len, &mut train_rng)?.tokens;
            discriminator_train_step(&mut state.discriminator, &mut state.adam_d, &real, &fake)?;
        }
    }

    let mut eval = Evaluator { heldout, rng: stream(cfg.seed, EVAL_STREAM), start };
    let mut history = vec![eval.record(0, &state, &[], cfg)?];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.adversarial_epochs {
        order.shuffle(&mut train_rng);
        let mut window = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            for _ in 0..cfg.g_steps {
                window.push(g_step(&mut state, cfg, &mut train_rng)?);
            }
            let real: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].clone()).collect();
            for _ in 0..cfg.d_steps {
                d_step(&mut state, &real, cfg, &mut train_rng)?;
            }
        }
        history.push(eval.record(epoch, &state, &window, cfg)?);
    }
    Ok(TrainOutcome { history, pretrain_nll, state })
}

#[cfg(test)]
mod tests {
    use super::*;


    fn small(estimator: EstimatorKind) -> TrainConfig {
        TrainConfig {
            dataset_size: 64,
            heldout_size: 32,
            batch_size: 16,
            eval_batch_size: 64,
            adversarial_epochs: 2,
            estimator,
            gen_embed: 4,
            gen_hidden: 6,
            disc_embed: 4,
            disc_hidden: 6,
            cv_channels: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_adversarial_epochs_is_pretraining_alone() {
        let cfg = TrainConfig { adversarial_epochs: 0, ..small(EstimatorKind::Relax) };
        let out = adversarial_train(&cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].epoch, 0);

        let data = grammar::generate_dataset(cfg.dataset_size, cfg.seq_len, cfg.seed).unwrap().sequences;
        let mut rng = stream(cfg.seed, TRAIN_STREAM);
        let mut g = TrainState::init(&cfg, &mut stream(cfg.seed, INIT_STREAM)).generator;
        let mle = MleConfig { batch_size: cfg.batch_size, adam: AdamConfig::with_lr(cfg.lr_pretrain) };
        pretrain_mle(&mut g, &data, cfg.pretrain_epochs, &mle, &mut rng).unwrap();
        assert_eq!(out.state.generator, g);
    }

    #[test]
    fn history_has_one_row_per_epoch_and_is_finite() {
        for kind in EstimatorKind::ALL {
            let out = adversarial_train(&small(kind)).unwrap();
            assert_eq!(out.history.len(), 3);
            for (i, r) in out.history.iter().enumerate() {
                assert_eq!(r.epoch, i);
                assert!(r.is_finite(), "{:?}", r);
                assert!(r.goodness >= 0.0 && r.goodness <= 1.0);
                assert!((r.unigram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small(EstimatorKind::Relax);
        let a = adversarial_train(&cfg).unwrap();
        let b = adversarial_train(&cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoint(&cfg), b.checkpoint(&cfg));
    }

    #[test]
    fn invalid_config_fails_before_training() {
        let cfg = TrainConfig { lambda: -1.0, ..small(EstimatorKind::Rebar) };
        assert!(adversarial_train(&cfg).is_err());
    }

    fn prepared(kind: EstimatorKind) -> (TrainState, TrainConfig) {
        let cfg = small(kind);
        let state = TrainState::init(&cfg, &mut stream(5, INIT_STREAM));
        (state, cfg)
    }

    #[test]
    fn reinforce_leaves_control_variate_alone() {
        let (mut state, cfg) = prepared(EstimatorKind::Reinforce);
        let before = state.control_variate.clone();
        let theta = state.generator.clone();
        g_step(&mut state, &cfg, &mut stream(6, 0)).unwrap();
        assert_eq!(state.control_variate, before);
        assert_ne!(state.generator, theta);
    }

    #[test]
    fn first_relax_step_matches_rebar() {
        let (rb_state, rb_cfg) = prepared(EstimatorKind::Rebar);
        let rx_cfg = TrainConfig { estimator: EstimatorKind::Relax, ..rb_cfg.clone() };
        let (mut rb, mut rx) = (rb_state.clone(), rb_state);
        let e_rb = g_step(&mut rb, &rb_cfg, &mut stream(7, 0)).unwrap();
        let e_rx = g_step(&mut rx, &rx_cfg, &mut stream(7, 0)).unwrap();
        assert_eq!(e_rb.grads, e_rx.grads);
        assert_eq!(rb.generator, rx.generator);
        assert_ne!(rx.control_variate, rb.control_variate);
    }

    #[test]
    fn symmetric_critic_update_comes_from_relaxation_terms() {
        // A discriminator with a zero output layer scores every input 0.5, so
        // the score term has coefficient R - D(σ(z̃)) = 0 and both relaxation
        // terms have zero gradient: nothing moves.
        let (mut state, cfg) = prepared(EstimatorKind::Rebar);
        for t in [&mut state.discriminator.w_out, &mut state.discriminator.b_out] {
            t.data_mut().fill(0.0);
        }
        let est = g_step(&mut state, &cfg, &mut stream(8, 0)).unwrap();
        assert_eq!(est.mean_reward, 0.5);
        assert!(est.grads.flatten().iter().all(|&x| x == 0.0));

        // With only the bias zeroed, rewards vary but the score term still
        // carries R - D(σ(z̃)), and relaxation terms add the pathwise part.
        let (mut state, cfg) = prepared(EstimatorKind::Rebar);
        state.discriminator.b_out.data_mut().fill(0.0);
        let est = g_step(&mut state, &cfg, &mut stream(8, 0)).unwrap();
        assert!(est.grads.flatten().iter().any(|&x| x != 0.0));
    }
}

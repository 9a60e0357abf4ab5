//! Generator, discriminator and control-variate networks.

mod checkpoint;
mod control_variate;
mod discriminator;
mod generator;
mod lstm;
mod optim;

pub use checkpoint::{manifest_path, Checkpoint};
pub use control_variate::{c_combined, c_combined_var, ControlVariateConfig, ControlVariateParams, ControlVariateVars, CvInput};
pub use discriminator::{
    discriminator_loss, discriminator_train_step, DiscInput, DiscriminatorConfig, DiscriminatorParams,
    DiscriminatorVars,
};
pub use generator::{
    generator_nll, generator_sample, pretrain_mle, GeneratorConfig, GeneratorParams, GeneratorTrace, GeneratorVars,
    MleConfig, SampleBatch,
};
pub use lstm::{LstmParams, LstmState, LstmVars};
pub use optim::{Adam, AdamConfig};

pub(crate) use generator::pick_tokens;

use crate::error::Result;
use crate::ndgraph::{Tape, Tensor, Var};

/// Named parameter tensors in a fixed order.
pub trait ParamSet {
    fn params(&self) -> Vec<(&'static str, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor on `tape`, as tracked leaves or constants.
    fn bind<'t>(&self, tape: &'t Tape, tracked: bool) -> Vec<Var<'t>> {
        self.params().into_iter().map(|(_, t)| tape.leaf(t.clone(), tracked)).collect()
    }

    /// Every parameter flattened into one vector, in `params()` order.
    fn flatten(&self) -> Vec<f64> {
        self.params().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }
}

/// A sequence reward that can also score relaxed one-hot rows.
pub trait Critic {
    /// Rewards for hard token sequences.
    fn score_tokens(&self, tokens: &[Vec<usize>]) -> Result<Vec<f64>>;
    /// Rewards `[B]` for relaxed rows `[B, T, V]`, differentiable in `rows`.
    fn score_relaxed<'t>(&self, rows: Var<'t>) -> Result<Var<'t>>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar;
    use crate::ndgraph::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_gen(vocab: usize, seed: u64) -> GeneratorParams {
        GeneratorParams::init(GeneratorConfig { vocab, embed: 4, hidden: 6 }, &mut rng(seed))
    }

    fn small_disc(vocab: usize, seed: u64) -> DiscriminatorParams {
        DiscriminatorParams::init(DiscriminatorConfig { vocab, embed: 4, hidden: 5 }, &mut rng(seed))
    }

    fn zeroed(mut g: GeneratorParams) -> GeneratorParams {
        for t in g.params_mut() {
            t.data_mut().fill(0.0);
        }
        g
    }

    #[test]
    fn zero_generator_has_uniform_logits_and_ln5_log_prob() {
        let g = zeroed(small_gen(5, 1));
        let batch = generator_sample(&g, 8, 3, &mut rng(2)).unwrap();
        assert!(batch.logits.data().iter().all(|&x| x == 0.0));
        for lp in &batch.log_probs {
            assert!((lp - 3.0 * (0.2f64).ln()).abs() < 1e-12);
            assert!((lp + 4.828313737302301).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let g = small_gen(5, 3);
        let a = generator_sample(&g, 16, 7, &mut rng(9)).unwrap();
        let b = generator_sample(&g, 16, 7, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stored_log_probs_match_teacher_forcing() {
        let g = small_gen(5, 4);
        let batch = generator_sample(&g, 32, 6, &mut rng(5)).unwrap();
        let tape = Tape::new();
        let (lp, trace) = g.bind(&tape, false).sequence_log_probs(&batch.tokens).unwrap();
        for (a, b) in lp.value().data().iter().zip(&batch.log_probs) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert_eq!(trace.logits.value(), batch.logits);
    }

    #[test]
    fn tokens_are_argmax_of_relaxed_z() {
        let g = small_gen(5, 6);
        let batch = generator_sample(&g, 64, 5, &mut rng(7)).unwrap();
        let pair = batch.relax(1.0).unwrap();
        pair.check_tokens(&batch.tokens).unwrap();
    }

    #[test]
    fn nll_of_zero_output_layer_is_ln5() {
        let mut g = small_gen(5, 8);
        g.w_out.data_mut().fill(0.0);
        g.b_out.data_mut().fill(0.0);
        let data = grammar::generate_dataset(50, 3, 1).unwrap();
        let nll = generator_nll(&g, &data.sequences).unwrap();
        assert!((nll - 5f64.ln()).abs() < 1e-12);
        assert!(generator_nll(&g, &[]).is_err());
    }

    #[test]
    fn pretrain_zero_epochs_is_noop() {
        let mut g = small_gen(5, 10);
        let before = g.clone();
        let cfg = MleConfig { batch_size: 8, adam: AdamConfig::with_lr(1e-2) };
        let hist = pretrain_mle(&mut g, &[vec![0, 1, 0]], 0, &cfg, &mut rng(0)).unwrap();
        assert!(hist.is_empty());
        assert_eq!(g, before);
    }

    #[test]
    fn one_hot_rows_score_like_tokens() {
        let d = small_disc(5, 11);
        let tokens = vec![vec![0, 3, 0], vec![4, 4, 1]];
        let mut rows = Tensor::zeros(&[2, 3, 5]);
        for (b, seq) in tokens.iter().enumerate() {
            for (t, &s) in seq.iter().enumerate() {
                rows.data_mut()[(b * 3 + t) * 5 + s] = 1.0;
            }
        }
        let hard = d.score(DiscInput::Tokens(&tokens)).unwrap();
        let soft = d.score(DiscInput::Relaxed(&rows)).unwrap();
        for (a, b) in hard.iter().zip(&soft) {
            assert!((a - b).abs() <= 1e-12);
            assert!(*a > 0.0 && *a < 1.0);
        }
    }

    #[test]
    fn uniform_rows_score_like_mean_embedding() {
        let d = small_disc(5, 12);
        let rows = Tensor::filled(&[1, 3, 5], 0.2);
        let soft = d.score(DiscInput::Relaxed(&rows)).unwrap()[0];
        // A one-token vocabulary whose embedding is the mean embedding.
        let mut mean = d.clone();
        let e = d.embedding.shape()[1];
        let avg: Vec<f64> = (0..e).map(|j| (0..5).map(|i| d.embedding.data()[i * e + j]).sum::<f64>() / 5.0).collect();
        mean.embedding = Tensor::new(vec![1, e], avg).unwrap();
        let hard = mean.score(DiscInput::Tokens(&[vec![0, 0, 0]])).unwrap()[0];
        assert!((soft - hard).abs() < 1e-12);
    }

    #[test]
    fn discriminator_rejects_bad_shapes() {
        let d = small_disc(5, 13);
        let rows = Tensor::zeros(&[2, 3, 4]);
        assert!(d.score(DiscInput::Relaxed(&rows)).is_err());
        assert!(d.score(DiscInput::Tokens(&[vec![0, 7]])).is_err());
    }

    #[test]
    fn identical_batches_push_loss_toward_ln2() {
        let mut d = small_disc(5, 14);
        let batch = grammar::generate_dataset(32, 3, 2).unwrap().sequences;
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2), &d);
        let first = discriminator_train_step(&mut d, &mut adam, &batch, &batch).unwrap();
        assert!(first > 0.0);
        for _ in 0..30 {
            discriminator_train_step(&mut d, &mut adam, &batch, &batch).unwrap();
        }
        let last = discriminator_loss(&d, &batch, &batch).unwrap();
        assert!((last - 2f64.ln()).abs() <= (first - 2f64.ln()).abs() + 1e-12);
        assert!((last - 2f64.ln()).abs() < 1e-3, "{last}");
    }

    #[test]
    fn separable_batches_reduce_loss() {
        let mut d = small_disc(5, 15);
        let real = vec![vec![0, 1, 0]; 16];
        let fake = vec![vec![2, 2, 2]; 16];
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2), &d);
        let first = discriminator_train_step(&mut d, &mut adam, &real, &fake).unwrap();
        for _ in 0..50 {
            discriminator_train_step(&mut d, &mut adam, &real, &fake).unwrap();
        }
        assert!(discriminator_loss(&d, &real, &fake).unwrap() < first);
    }

    #[test]
    fn zero_output_control_variate_is_zero() {
        let cv = ControlVariateParams::init(ControlVariateConfig { vocab: 5, channels: 4, kernel: 3 }, &mut rng(16));
        let z = Tensor::uniform(&[3, 4, 5], -3.0, 3.0, &mut rng(17));
        assert_eq!(cv.eval(&z).unwrap(), vec![0.0; 3]);
        let d = small_disc(5, 18);
        let c = c_combined(&z, &cv, &d, 1.0).unwrap();
        let relaxed = {
            let tape = Tape::new();
            crate::relaxation::sigma_lambda_var(tape.constant(z.clone()), 1.0).unwrap().value()
        };
        assert_eq!(c, d.score(DiscInput::Relaxed(&relaxed)).unwrap());
    }

    #[test]
    fn c_combined_is_sum_of_terms() {
        let cv = ControlVariateParams::init_random(ControlVariateConfig { vocab: 5, channels: 4, kernel: 3 }, &mut rng(19));
        let d = small_disc(5, 20);
        let z = Tensor::uniform(&[4, 3, 5], -2.0, 2.0, &mut rng(21));
        let relaxed = {
            let tape = Tape::new();
            crate::relaxation::sigma_lambda_var(tape.constant(z.clone()), 0.5).unwrap().value()
        };
        let sep: Vec<f64> = d
            .score(DiscInput::Relaxed(&relaxed))
            .unwrap()
            .iter()
            .zip(cv.eval(&z).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        let comb = c_combined(&z, &cv, &d, 0.5).unwrap();
        for (a, b) in sep.iter().zip(&comb) {
            assert!((a - b).abs() <= 1e-12);
            assert!(b.is_finite());
        }
    }

    #[test]
    fn control_variate_is_per_element() {
        let cv = ControlVariateParams::init_random(ControlVariateConfig { vocab: 3, channels: 4, kernel: 3 }, &mut rng(22));
        let z = Tensor::uniform(&[3, 2, 3], -2.0, 2.0, &mut rng(23));
        let out = cv.eval(&z).unwrap();
        let mut perm = Tensor::zeros(&[3, 2, 3]);
        let order = [2, 0, 1];
        for (dst, &src) in order.iter().enumerate() {
            perm.data_mut()[dst * 6..dst * 6 + 6].copy_from_slice(&z.data()[src * 6..src * 6 + 6]);
        }
        let permuted = cv.eval(&perm).unwrap();
        for (dst, &src) in order.iter().enumerate() {
            assert_eq!(permuted[dst], out[src]);
        }
    }

    #[test]
    fn control_variate_input_gradcheck() {
        let cv = ControlVariateParams::init_random(ControlVariateConfig { vocab: 3, channels: 4, kernel: 3 }, &mut rng(24));
        let point = Tensor::uniform(&[2, 4, 3], -2.0, 2.0, &mut rng(25));
        let err = grad_check(
            |tape, x| {
                let c = cv.bind(tape, false);
                c.eval(x).map_err(graph_err)?.sum()
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    fn graph_err(e: crate::Error) -> crate::ndgraph::GraphError {
        match e {
            crate::Error::Graph(g) => g,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let g = small_gen(5, 30);
        let d = small_disc(5, 31);
        let cv = ControlVariateParams::init_random(ControlVariateConfig::new(5), &mut rng(32));
        let mut ck = Checkpoint::new();
        ck.set_meta("seq_len", 3);
        ck.add_params("gen", &g);
        ck.add_params("disc", &d);
        ck.add_params("cv", &cv);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.generator("gen").unwrap(), g);
        assert_eq!(back.discriminator("disc").unwrap(), d);
        assert_eq!(back.control_variate("cv").unwrap(), cv);
        let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(manifest.starts_with("seqrelax-checkpoint 1\nmeta seq_len 3\ntensor gen.embedding 5x4 0 20\n"));
    }
}

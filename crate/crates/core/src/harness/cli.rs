//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::metrics::write_metrics_csv;
use super::train::adversarial_train;
use crate::error::{Error, Result};
use crate::estimators::{estimator_bias_test, BiasTestConfig, EstimatorKind, EstimatorOptions};
use crate::grammar::{self, TOKENS};
use crate::models::{
    generator_sample, pretrain_mle, AdamConfig, Checkpoint, ControlVariateConfig, ControlVariateParams,
    DiscriminatorConfig, DiscriminatorParams, GeneratorConfig, GeneratorParams, MleConfig,
};

/// Temperatures tried by `train --lambda-sweep` when none are listed.
pub const DEFAULT_LAMBDA_SWEEP: [f64; 3] = [0.1, 1.0, 10.0];

#[derive(Parser, Debug)]
#[command(name = "seqrelax", version, about = "Discrete-sequence GAN gradient-estimator laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EstimatorArg {
    Reinforce,
    Rebar,
    Relax,
}

impl From<EstimatorArg> for EstimatorKind {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Reinforce => EstimatorKind::Reinforce,
            EstimatorArg::Rebar => EstimatorKind::Rebar,
            EstimatorArg::Relax => EstimatorKind::Relax,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a grammar dataset, one sequence per line.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Maximum-likelihood pretraining of a fresh generator.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        embed: usize,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
    },
    /// Adversarial training; writes config.txt, metrics.csv and model.ckpt.
    Train {
        #[arg(long, value_enum)]
        estimator: EstimatorArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Run once per temperature, each in its own subdirectory.
        #[arg(long, num_args = 0.., value_delimiter = ',')]
        lambda_sweep: Option<Vec<f64>>,
    },
    /// Sample from a checkpoint and print goodness and unigram statistics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        batches: usize,
        #[arg(long, default_value_t = 1000)]
        batch_size: usize,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare an estimator against exact enumeration on random networks.
    OracleCheck {
        #[arg(long, value_enum)]
        estimator: EstimatorArg,
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        seq_len: usize,
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        batch_size: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        embed: usize,
        #[arg(long, default_value_t = 6)]
        hidden: usize,
    },
}

/// Parses `argv` (program name first) and runs the subcommand.
/// Returns 0 on success, 2 on a usage error, 1 on a runtime error.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { n, seq_len, seed, out } => {
            let data = grammar::generate_dataset(n, seq_len, seed)?;
            grammar::save_dataset(&data, &out)?;
            println!("wrote {} sequences of length {} to {}", n, seq_len, out.display());
            Ok(())
        }
        Command::Pretrain { data, epochs, out_ckpt, seed, batch_size, lr, embed, hidden } => {
            let data = grammar::load_dataset(&data)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = GeneratorParams::init(GeneratorConfig { vocab: TOKENS.len(), embed, hidden }, &mut rng);
            let cfg = MleConfig { batch_size, adam: AdamConfig::with_lr(lr) };
            let history = pretrain_mle(&mut g, &data.sequences, epochs, &cfg, &mut rng)?;
            for (i, nll) in history.iter().enumerate() {
                println!("epoch {} nll {:.6}", i + 1, nll);
            }
            let mut ck = Checkpoint::new();
            ck.set_meta("seq_len", data.seq_len);
            ck.add_params("generator", &g);
            ck.save(&out_ckpt)?;
            println!("wrote {}", out_ckpt.display());
            Ok(())
        }
        Command::Train { estimator, config, out_dir, lambda_sweep } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            cfg.estimator = estimator.into();
            let out_dir = out_dir.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            match lambda_sweep {
                None => train_one(&cfg, &out_dir),
                Some(list) => {
                    let lambdas = if list.is_empty() { DEFAULT_LAMBDA_SWEEP.to_vec() } else { list };
                    for lambda in lambdas {
                        let run_cfg = TrainConfig { lambda, ..cfg.clone() };
                        train_one(&run_cfg, &out_dir.join(format!("lambda_{}", lambda)))?;
                    }
                    Ok(())
                }
            }
        }
        Command::Eval { ckpt, batches, batch_size, seq_len, seed } => {
            let ck = Checkpoint::load(&ckpt)?;
            let g = ck.generator("generator")?;
            let seq_len = match seq_len.or_else(|| ck.meta.get("seq_len").and_then(|s| s.parse().ok())) {
                Some(t) => t,
                None => return Err(Error::Config("checkpoint has no seq_len; pass --seq-len".into())),
            };
            if batches == 0 {
                return Err(Error::Config("--batches must be at least 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tokens = Vec::with_capacity(batches * batch_size);
            for _ in 0..batches {
                tokens.extend(generator_sample(&g, batch_size, seq_len, &mut rng)?.tokens);
            }
            let goodness = grammar::batch_goodness(&tokens)?;
            let unigram = grammar::unigram_stats(&tokens)?;
            println!("sequences {}", tokens.len());
            println!("goodness {:.6} (max {})", goodness, seq_len.saturating_sub(2));
            let stats: Vec<String> = TOKENS.iter().zip(unigram).map(|(t, p)| format!("p({})={:.6}", t, p)).collect();
            println!("unigram {}", stats.join(" "));
            Ok(())
        }
        Command::OracleCheck { estimator, vocab, seq_len, trials, batch_size, lambda, seed, embed, hidden } => {
            let kind: EstimatorKind = estimator.into();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GeneratorParams::init(GeneratorConfig { vocab, embed, hidden }, &mut rng);
            let d = DiscriminatorParams::init(DiscriminatorConfig { vocab, embed, hidden }, &mut rng);
            let cv = ControlVariateParams::init_random(ControlVariateConfig::new(vocab), &mut rng);
            let cfg = BiasTestConfig { trials, batch_size, lambda, seed: seed.wrapping_add(1) };
            let report = estimator_bias_test(kind, &g, &d, Some(&cv), seq_len, &cfg, &EstimatorOptions::default())?;
            print!("{}", report.render());
            Ok(())
        }
    }
}

fn train_one(cfg: &TrainConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let outcome = adversarial_train(cfg)?;
    for r in &outcome.history {
        println!(
            "epoch {} goodness {:.4} log_variance {:.4} nll {:.4} d_loss {:.4}",
            r.epoch, r.goodness, r.log_variance, r.nll, r.d_loss
        );
    }
    cfg.save(&out_dir.join("config.txt"))?;
    write_metrics_csv(&outcome.history, &out_dir.join("metrics.csv"))?;
    outcome.checkpoint(cfg).save(&out_dir.join("model.ckpt"))?;
    println!("wrote {}", out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(cli_main(["seqrelax", "bogus"]), 2);
        assert_eq!(cli_main(["seqrelax", "train", "--estimator", "gumbel"]), 2);
        assert_eq!(cli_main(["seqrelax", "gen-data", "--n", "3"]), 2);
        assert_eq!(cli_main(["seqrelax", "gen-data", "--n", "3", "--seq-len", "3", "--out", "x", "--nope"]), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(cli_main(["seqrelax", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d.txt");
        let out = out.to_str().unwrap();
        assert_eq!(cli_main(["seqrelax", "gen-data", "--n", "3", "--seq-len", "4", "--out", out]), 1);
        assert_eq!(cli_main(["seqrelax", "eval", "--ckpt", "/nonexistent/model.ckpt"]), 1);
    }

    #[test]
    fn gen_data_then_pretrain_then_eval() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.txt");
        let ckpt = dir.path().join("g.ckpt");
        let (data_s, ckpt_s) = (data.to_str().unwrap(), ckpt.to_str().unwrap());
        assert_eq!(cli_main(["seqrelax", "gen-data", "--n", "40", "--seq-len", "3", "--seed", "7", "--out", data_s]), 0);
        assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 40);
        let args = [
            "seqrelax", "pretrain", "--data", data_s, "--epochs", "1", "--out-ckpt", ckpt_s, "--embed", "4", "--hidden",
            "6",
        ];
        assert_eq!(cli_main(args), 0);
        assert_eq!(cli_main(["seqrelax", "eval", "--ckpt", ckpt_s, "--batches", "2", "--batch-size", "10"]), 0);
    }
}

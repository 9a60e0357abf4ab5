//! Training configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, ParamSubset, TrackedParam};
use crate::models::CvInput;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub dataset_size: usize,
    /// Dataset file to load; empty means generate from `seed`.
    pub data: String,
    pub heldout_size: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_discriminator: bool,
    pub adversarial_epochs: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    pub estimator: EstimatorKind,
    pub lambda: f64,
    pub eta: f64,
    pub lr_pretrain: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_control_variate: f64,
    pub tracked_param: TrackedParam,
    pub param_subset: ParamSubset,
    pub cv_input: CvInput,
    pub gen_embed: usize,
    pub gen_hidden: usize,
    pub disc_embed: usize,
    pub disc_hidden: usize,
    pub cv_channels: usize,
    pub cv_kernel: usize,
    pub record_seconds: bool,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_length(3)
    }
}

impl TrainConfig {
    /// Defaults for sequences of length `seq_len`: one pretraining epoch
    /// for short sequences, three from length 15 up.
    pub fn for_length(seq_len: usize) -> Self {
        TrainConfig {
            seq_len,
            dataset_size: 10_000,
            data: String::new(),
            heldout_size: 1000,
            batch_size: 64,
            eval_batch_size: 1000,
            pretrain_epochs: if seq_len >= 15 { 3 } else { 1 },
            pretrain_discriminator: true,
            adversarial_epochs: 10,
            g_steps: 1,
            d_steps: 1,
            estimator: EstimatorKind::Relax,
            lambda: 1.0,
            eta: 1.0,
            lr_pretrain: 1e-3,
            lr_generator: 1e-4,
            lr_discriminator: 1e-3,
            lr_control_variate: 1e-4,
            tracked_param: TrackedParam::Index(0),
            param_subset: ParamSubset::OutputLayer,
            cv_input: CvInput::Raw,
            gen_embed: 32,
            gen_hidden: 64,
            disc_embed: 32,
            disc_hidden: 64,
            cv_channels: 16,
            cv_kernel: 3,
            record_seconds: false,
            seed: 0,
            out_dir: "runs".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seq_len < 3 || self.seq_len % 2 == 0 {
            return fail(format!("seq_len must be odd and at least 3, got {}", self.seq_len));
        }
        for (name, v) in [
            ("dataset_size", self.dataset_size),
            ("heldout_size", self.heldout_size),
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("gen_embed", self.gen_embed),
            ("gen_hidden", self.gen_hidden),
            ("disc_embed", self.disc_embed),
            ("disc_hidden", self.disc_hidden),
            ("cv_channels", self.cv_channels),
        ] {
            if v == 0 {
                return fail(format!("{} must be at least 1", name));
            }
        }
        if self.cv_kernel % 2 == 0 {
            return fail(format!("cv_kernel must be odd for same-length padding, got {}", self.cv_kernel));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be positive, got {}", self.lambda));
        }
        if !self.eta.is_finite() {
            return fail(format!("eta must be finite, got {}", self.eta));
        }
        for (name, v) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_control_variate", self.lr_control_variate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{} must be positive, got {}", name, v));
            }
        }
        if let TrackedParam::Index(i) = self.tracked_param {
            let size = match self.param_subset {
                ParamSubset::OutputLayer => (self.gen_hidden + 1) * crate::grammar::VOCAB_SIZE,
                ParamSubset::OutputWeight => self.gen_hidden * crate::grammar::VOCAB_SIZE,
                ParamSubset::OutputBias => crate::grammar::VOCAB_SIZE,
            };
            if i >= size {
                return fail(format!("tracked_param {} outside a subset of {} entries", i, size));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.entries() {
            writeln!(out, "{} = {}", key, value).expect("writing to a String");
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seq_len", self.seq_len.to_string()),
            ("dataset_size", self.dataset_size.to_string()),
            ("data", self.data.clone()),
            ("heldout_size", self.heldout_size.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_discriminator", self.pretrain_discriminator.to_string()),
            ("adversarial_epochs", self.adversarial_epochs.to_string()),
            ("g_steps", self.g_steps.to_string()),
            ("d_steps", self.d_steps.to_string()),
            ("estimator", self.estimator.name().to_string()),
            ("lambda", self.lambda.to_string()),
            ("eta", self.eta.to_string()),
            ("lr_pretrain", self.lr_pretrain.to_string()),
            ("lr_generator", self.lr_generator.to_string()),
            ("lr_discriminator", self.lr_discriminator.to_string()),
            ("lr_control_variate", self.lr_control_variate.to_string()),
            ("tracked_param", self.tracked_param.to_string()),
            ("param_subset", subset_name(self.param_subset).to_string()),
            ("cv_input", cv_input_name(self.cv_input).to_string()),
            ("gen_embed", self.gen_embed.to_string()),
            ("gen_hidden", self.gen_hidden.to_string()),
            ("disc_embed", self.disc_embed.to_string()),
            ("disc_hidden", self.disc_hidden.to_string()),
            ("cv_channels", self.cv_channels.to_string()),
            ("cv_kernel", self.cv_kernel.to_string()),
            ("record_seconds", self.record_seconds.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.clone()),
        ]
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("invalid value {:?} for {}", value, key)))
        }
        match key {
            "seq_len" => self.seq_len = num(key, value)?,
            "dataset_size" => self.dataset_size = num(key, value)?,
            "data" => self.data = value.to_string(),
            "heldout_size" => self.heldout_size = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "eval_batch_size" => self.eval_batch_size = num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            "pretrain_discriminator" => self.pretrain_discriminator = num(key, value)?,
            "adversarial_epochs" => self.adversarial_epochs = num(key, value)?,
            "g_steps" => self.g_steps = num(key, value)?,
            "d_steps" => self.d_steps = num(key, value)?,
            "estimator" => self.estimator = value.parse()?,
            "lambda" => self.lambda = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "lr_pretrain" => self.lr_pretrain = num(key, value)?,
            "lr_generator" => self.lr_generator = num(key, value)?,
            "lr_discriminator" => self.lr_discriminator = num(key, value)?,
            "lr_control_variate" => self.lr_control_variate = num(key, value)?,
            "tracked_param" => self.tracked_param = value.parse()?,
            "param_subset" => self.param_subset = parse_subset(value)?,
            "cv_input" => self.cv_input = parse_cv_input(value)?,
            "gen_embed" => self.gen_embed = num(key, value)?,
            "gen_hidden" => self.gen_hidden = num(key, value)?,
            "disc_embed" => self.disc_embed = num(key, value)?,
            "disc_hidden" => self.disc_hidden = num(key, value)?,
            "cv_channels" => self.cv_channels = num(key, value)?,
            "cv_kernel" => self.cv_kernel = num(key, value)?,
            "record_seconds" => self.record_seconds = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {:?}", key))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults for the file's
    /// `seq_len`. Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {:?}", i + 1, raw)))?;
            pairs.push((i + 1, key.trim(), value.trim()));
        }
        let mut cfg = TrainConfig::default();
        if let Some(&(_, key, value)) = pairs.iter().find(|(_, k, _)| *k == "seq_len") {
            cfg.set(key, value)?;
            cfg = TrainConfig::for_length(cfg.seq_len);
        }
        for (line, key, value) in pairs {
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {}", line, e)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        TrainConfig::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

fn subset_name(s: ParamSubset) -> &'static str {
    match s {
        ParamSubset::OutputLayer => "output_layer",
        ParamSubset::OutputWeight => "output_weight",
        ParamSubset::OutputBias => "output_bias",
    }
}

fn parse_subset(s: &str) -> Result<ParamSubset> {
    match s {
        "output_layer" => Ok(ParamSubset::OutputLayer),
        "output_weight" => Ok(ParamSubset::OutputWeight),
        "output_bias" => Ok(ParamSubset::OutputBias),
        _ => Err(Error::Config(format!("unknown param_subset {:?}", s))),
    }
}

fn cv_input_name(c: CvInput) -> &'static str {
    match c {
        CvInput::Raw => "raw",
        CvInput::Relaxed => "relaxed",
    }
}

fn parse_cv_input(s: &str) -> Result<CvInput> {
    match s {
        "raw" => Ok(CvInput::Raw),
        "relaxed" => Ok(CvInput::Relaxed),
        _ => Err(Error::Config(format!("unknown cv_input {:?}", s))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pretraining_defaults_follow_length() {
        assert_eq!(TrainConfig::for_length(3).pretrain_epochs, 1);
        assert_eq!(TrainConfig::for_length(15).pretrain_epochs, 3);
        let cfg = TrainConfig::parse("seq_len = 15\n").unwrap();
        assert_eq!(cfg.pretrain_epochs, 3);
        let cfg = TrainConfig::parse("pretrain_epochs = 2\nseq_len = 15\n").unwrap();
        assert_eq!(cfg.pretrain_epochs, 2);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = TrainConfig::parse("# run\n\n  estimator = rebar  \nlambda=0.5\n").unwrap();
        assert_eq!(cfg.estimator, EstimatorKind::Rebar);
        assert_eq!(cfg.lambda, 0.5);
    }

    #[test]
    fn bad_lines_are_reported() {
        let err = TrainConfig::parse("seed = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        assert!(TrainConfig::parse("seed 1\n").is_err());
        assert!(TrainConfig::parse("estimator = gumbel\n").is_err());
        assert!(TrainConfig::parse("lambda = fast\n").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lambda: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { seq_len: 4, ..TrainConfig::default() },
            TrainConfig { cv_kernel: 2, ..TrainConfig::default() },
            TrainConfig { tracked_param: TrackedParam::Index(10_000), ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{:?}", cfg);
        }
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            seq in prop::sample::select(vec![3usize, 5, 15]),
            epochs in 0usize..100,
            lambda in 1e-3f64..1e3,
            lr in 1e-6f64..1.0,
            seed: u64,
            est in prop::sample::select(EstimatorKind::ALL.to_vec()),
            tracked in prop::option::of(0usize..300),
            relaxed: bool,
            flag: bool,
        ) {
            let cfg = TrainConfig {
                seq_len: seq,
                adversarial_epochs: epochs,
                lambda,
                lr_generator: lr,
                seed,
                estimator: est,
                tracked_param: tracked.map_or(TrackedParam::SubsetMean, TrackedParam::Index),
                cv_input: if relaxed { CvInput::Relaxed } else { CvInput::Raw },
                record_seconds: flag,
                out_dir: format!("out/{}", seed),
                ..TrainConfig::for_length(seq)
            };
            prop_assert_eq!(TrainConfig::parse(&cfg.render()).unwrap(), cfg);
        }
    }
}

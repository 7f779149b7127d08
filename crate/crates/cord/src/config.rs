//! Flat key=value run configuration. Files use one `key = value` pair per
//! line with `#` comments; unknown keys are rejected so typos fail loudly.
//! Command-line overrides are applied after the file and take precedence.

use crate::error::{CordError, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Training arm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Weighted on-policy token alignment plus group-relative sequence loss.
    Cord,
    /// Unweighted on-policy token alignment only.
    Opd,
    /// Group-relative sequence loss only.
    Grpo,
    /// Likelihood training on teacher rollouts.
    Sft,
    /// Forward-KL distillation along teacher rollouts.
    Fkl,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "cord" => Ok(Method::Cord),
            "opd" => Ok(Method::Opd),
            "grpo" => Ok(Method::Grpo),
            "sft" => Ok(Method::Sft),
            "fkl" => Ok(Method::Fkl),
            other => Err(CordError::Config(format!(
                "unknown method '{}' (expected cord|opd|grpo|sft|fkl)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Cord => "cord",
            Method::Opd => "opd",
            Method::Grpo => "grpo",
            Method::Sft => "sft",
            Method::Fkl => "fkl",
        }
    }

    pub const ALL: [Method; 5] = [
        Method::Cord,
        Method::Opd,
        Method::Grpo,
        Method::Sft,
        Method::Fkl,
    ];
}

/// Every tunable of the pipeline, resolved from defaults, an optional config
/// file, and command-line overrides (in that precedence order).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // reproducibility
    pub seed: u64,

    // dataset
    pub n_examples: usize,
    pub aux_examples: usize,
    pub modulus: u32,
    pub min_program_len: usize,
    pub max_program_len: usize,
    /// Per-frame probability of substituting an audio frame by a confusable.
    pub noise_sub: f64,
    /// Per-symbol probability of emitting a duplicate audio frame.
    pub noise_dup: f64,

    // model
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context: usize,

    // pretraining (gap induction)
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Fraction of pretraining examples presented with audio conditioning.
    pub audio_fraction: f64,
    /// Fraction of pretraining steps spent on the auxiliary audio task.
    pub aux_fraction: f64,

    // alignment training
    pub method: Method,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub checkpoints: Vec<usize>,
    pub group_size: usize,
    pub temp_token: f64,
    pub temp_seq: f64,
    pub seq_weight: f64,
    pub top_k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub weighting_enabled: bool,
    pub length_normalized: bool,
    pub max_rollout_len: usize,
    /// Regenerate teacher rollouts from the current snapshot every step;
    /// when false they are sampled once from the starting checkpoint.
    pub teacher_refresh: bool,

    // evaluation
    pub eval_examples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            n_examples: 4000,
            aux_examples: 600,
            modulus: 7,
            min_program_len: 1,
            max_program_len: 3,
            noise_sub: 0.02,
            noise_dup: 0.0,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            context: 64,
            pretrain_steps: 3500,
            pretrain_batch: 8,
            pretrain_lr: 1e-3,
            audio_fraction: 0.05,
            aux_fraction: 0.1,
            method: Method::Cord,
            lr: 8e-6,
            batch_size: 8,
            max_steps: 3000,
            checkpoints: vec![500, 1000, 3000],
            group_size: 4,
            temp_token: 0.7,
            temp_seq: 1.5,
            seq_weight: 1.0,
            top_k: 20,
            alpha: 2.0,
            beta: 2.0,
            weighting_enabled: true,
            length_normalized: false,
            max_rollout_len: 24,
            teacher_refresh: true,
            eval_examples: 300,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| CordError::Config(format!("invalid value '{}' for key '{}'", value, key)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(CordError::Config(format!(
            "invalid boolean '{}' for key '{}'",
            value, key
        ))),
    }
}

impl RunConfig {
    /// Apply a single `key = value` assignment. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as(key, value)?,
            "n_examples" => self.n_examples = parse_as(key, value)?,
            "aux_examples" => self.aux_examples = parse_as(key, value)?,
            "modulus" => self.modulus = parse_as(key, value)?,
            "min_program_len" => self.min_program_len = parse_as(key, value)?,
            "max_program_len" => self.max_program_len = parse_as(key, value)?,
            "noise_sub" => self.noise_sub = parse_as(key, value)?,
            "noise_dup" => self.noise_dup = parse_as(key, value)?,
            "d_model" => self.d_model = parse_as(key, value)?,
            "n_layers" => self.n_layers = parse_as(key, value)?,
            "n_heads" => self.n_heads = parse_as(key, value)?,
            "d_ff" => self.d_ff = parse_as(key, value)?,
            "context" => self.context = parse_as(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse_as(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse_as(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse_as(key, value)?,
            "audio_fraction" => self.audio_fraction = parse_as(key, value)?,
            "aux_fraction" => self.aux_fraction = parse_as(key, value)?,
            "method" => self.method = Method::parse(value)?,
            "lr" => self.lr = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "max_steps" => self.max_steps = parse_as(key, value)?,
            "checkpoints" => {
                self.checkpoints = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_as::<usize>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "group_size" => self.group_size = parse_as(key, value)?,
            "temp_token" => self.temp_token = parse_as(key, value)?,
            "temp_seq" => self.temp_seq = parse_as(key, value)?,
            "seq_weight" => self.seq_weight = parse_as(key, value)?,
            "top_k" => self.top_k = parse_as(key, value)?,
            "alpha" => self.alpha = parse_as(key, value)?,
            "beta" => self.beta = parse_as(key, value)?,
            "weighting_enabled" => self.weighting_enabled = parse_bool(key, value)?,
            "length_normalized" => self.length_normalized = parse_bool(key, value)?,
            "max_rollout_len" => self.max_rollout_len = parse_as(key, value)?,
            "teacher_refresh" => self.teacher_refresh = parse_bool(key, value)?,
            "eval_examples" => self.eval_examples = parse_as(key, value)?,
            other => {
                return Err(CordError::Config(format!("unknown config key '{}'", other)))
            }
        }
        Ok(())
    }

    /// Parse the `key = value` file body on top of the current values.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CordError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| CordError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_file_text(&text)
    }

    /// Apply repeatable `k=v` override strings (after any file).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for ov in overrides {
            let (key, value) = ov.split_once('=').ok_or_else(|| {
                CordError::Config(format!("override '{}' is not key=value", ov))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Cross-field validation, called once after all sources are applied.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: &str| Err(CordError::Config(msg.to_string()));
        if self.max_steps == 0 || self.pretrain_steps == 0 {
            return err("step counts must be positive");
        }
        if self.batch_size == 0 || self.pretrain_batch == 0 {
            return err("batch sizes must be positive");
        }
        if self.group_size < 2 {
            return err("group_size must be at least 2");
        }
        if self.temp_token <= 0.0 || self.temp_seq <= 0.0 {
            return err("temperatures must be positive");
        }
        if !(0.0..=1.0).contains(&self.audio_fraction)
            || !(0.0..=1.0).contains(&self.aux_fraction)
        {
            return err("fractions must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.noise_sub) || !(0.0..=1.0).contains(&self.noise_dup) {
            return err("noise probabilities must lie in [0, 1]");
        }
        if self.min_program_len == 0 || self.min_program_len > self.max_program_len {
            return err("program length bounds must satisfy 1 <= min <= max");
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return err("checkpoints must be strictly increasing");
        }
        if self.alpha < 1.0 || self.beta < 1.0 {
            return err("alpha and beta must be at least 1");
        }
        Ok(())
    }

    /// Canonical snapshot written next to every run's outputs; re-parsing it
    /// reproduces this config exactly.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{} = {}", k, v);
        };
        kv("seed", self.seed.to_string());
        kv("n_examples", self.n_examples.to_string());
        kv("aux_examples", self.aux_examples.to_string());
        kv("modulus", self.modulus.to_string());
        kv("min_program_len", self.min_program_len.to_string());
        kv("max_program_len", self.max_program_len.to_string());
        kv("noise_sub", self.noise_sub.to_string());
        kv("noise_dup", self.noise_dup.to_string());
        kv("d_model", self.d_model.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("context", self.context.to_string());
        kv("pretrain_steps", self.pretrain_steps.to_string());
        kv("pretrain_batch", self.pretrain_batch.to_string());
        kv("pretrain_lr", format!("{:e}", self.pretrain_lr));
        kv("audio_fraction", self.audio_fraction.to_string());
        kv("aux_fraction", self.aux_fraction.to_string());
        kv("method", self.method.name().to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv(
            "checkpoints",
            self.checkpoints
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("group_size", self.group_size.to_string());
        kv("temp_token", self.temp_token.to_string());
        kv("temp_seq", self.temp_seq.to_string());
        kv("seq_weight", self.seq_weight.to_string());
        kv("top_k", self.top_k.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("weighting_enabled", self.weighting_enabled.to_string());
        kv("length_normalized", self.length_normalized.to_string());
        kv("max_rollout_len", self.max_rollout_len.to_string());
        kv("teacher_refresh", self.teacher_refresh.to_string());
        kv("eval_examples", self.eval_examples.to_string());
        s
    }

    pub fn model_config(&self) -> crate::model::ModelConfig {
        crate::model::ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            context: self.context,
            ..crate::model::ModelConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("not_a_key", "1").is_err());
        assert!(c.apply_file_text("alpha = 2.0\nbogus = 3\n").is_err());
    }

    #[test]
    fn file_parsing_with_comments_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_file_text("# comment\nmethod = sft\nlr = 1e-4  # inline\n\nalpha=2.5\n")
            .unwrap();
        assert_eq!(c.method, Method::Sft);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.alpha, 2.5);
        // overrides win over file values
        c.apply_overrides(&["method=grpo".to_string(), "alpha=1.5".to_string()])
            .unwrap();
        assert_eq!(c.method, Method::Grpo);
        assert_eq!(c.alpha, 1.5);
        assert!(c.apply_overrides(&["oops".to_string()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.set("method", "fkl").unwrap();
        c.set("checkpoints", "100,200").unwrap();
        c.set("lr", "5e-5").unwrap();
        let snap = c.snapshot();
        let mut back = RunConfig::default();
        back.apply_file_text(&snap).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn validation_catches_bad_combinations() {
        let mut c = RunConfig::default();
        c.group_size = 1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.checkpoints = vec![500, 500];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.min_program_len = 4;
        c.max_program_len = 2;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.temp_seq = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("ppo").is_err());
    }
}

//! On-policy trajectory sampling.
//!
//! Trajectories are sampled from the policy under one conditioning; for
//! alignment the text-conditioned distributions are recorded for the very
//! same prefixes, so every supervised state lies on the sampled trajectory.

use crate::data::TOK_EOS;
use crate::error::{CordError, Result};
use crate::model::{step_distributions, Condition, Modality, ModelParams};
use crate::scalar::Scalar;
use crate::seeding::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Hard cap on generated sequence length.
pub const MAX_ROLLOUT_LEN: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Eos,
    MaxLen,
}

/// One sampled trajectory with its per-step dual log-distributions.
/// A terminating EOS is not included in `tokens`; an immediate EOS yields a
/// valid zero-length trajectory whose loss contributions are all zero.
#[derive(Debug, Clone)]
pub struct Trajectory<F: Scalar> {
    pub tokens: Vec<usize>,
    /// Log-distribution at each sampled state, under the sampling condition.
    pub step_logdists: Vec<Vec<F>>,
    /// Text-conditioned log-distributions for the same prefixes, when recorded.
    pub teacher_logdists: Option<Vec<Vec<F>>>,
    /// Unscaled log-probability of each sampled token.
    pub token_logprobs: Vec<F>,
    /// Per-step reverse KL, filled by the token-alignment module.
    pub d_t: Vec<F>,
    pub condition_modality: Modality,
    pub mode: DecodeMode,
    pub terminated_by: Termination,
}

impl<F: Scalar> Trajectory<F> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Draw one token index from an unscaled log-distribution row. Greedy mode
/// is the temperature -> 0 limit and consumes no randomness.
pub fn sample_token<F: Scalar>(
    row: &[F],
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    match mode {
        DecodeMode::Greedy => {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        DecodeMode::Temperature(tau) => {
            if tau <= 0.0 {
                return Err(CordError::InvalidArgument(
                    "sampling temperature must be positive".into(),
                ));
            }
            let probs = scaled_probs(row, tau);
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                cum += p;
                if u < cum {
                    return Ok(i);
                }
            }
            Ok(probs.len() - 1)
        }
    }
}

/// Temperature-scaled probabilities of an unscaled log-distribution row.
pub fn scaled_probs<F: Scalar>(row: &[F], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&v| v.to_f64_() / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Sample one on-policy rollout under `condition`. With `record_teacher`,
/// text-conditioned distributions are recorded for the same prefixes (the
/// teacher side is used as constants; gradients are stopped where the loss
/// graph consumes them).
pub fn sample_rollout<F: Scalar>(
    params: &ModelParams<F>,
    condition: &Condition,
    teacher_condition: Option<&Condition>,
    mode: DecodeMode,
    max_len: usize,
    seed: u64,
) -> Result<Trajectory<F>> {
    let max_len = max_len.min(MAX_ROLLOUT_LEN);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<usize> = Vec::new();
    let mut terminated_by = Termination::MaxLen;
    while tokens.len() < max_len {
        let dists = step_distributions(params, condition, &tokens)?;
        let row = dists.row(dists.rows() - 1);
        let tok = sample_token(row, mode, &mut rng)?;
        if tok == TOK_EOS {
            terminated_by = Termination::Eos;
            break;
        }
        tokens.push(tok);
    }

    let t = tokens.len();
    let (step_logdists, token_logprobs) = if t > 0 {
        // causal trunk: one full pass reproduces every sampling state exactly
        let full = step_distributions(params, condition, &tokens)?;
        let rows: Vec<Vec<F>> = (0..t).map(|i| full.row(i).to_vec()).collect();
        let lps = (0..t).map(|i| rows[i][tokens[i]]).collect();
        (rows, lps)
    } else {
        (Vec::new(), Vec::new())
    };

    let teacher_logdists = match teacher_condition {
        Some(tc) if t > 0 => {
            let full = step_distributions(params, tc, &tokens)?;
            Some((0..t).map(|i| full.row(i).to_vec()).collect())
        }
        Some(_) => Some(Vec::new()),
        None => None,
    };

    Ok(Trajectory {
        tokens,
        step_logdists,
        teacher_logdists,
        token_logprobs,
        d_t: Vec::new(),
        condition_modality: condition.modality,
        mode,
        terminated_by,
    })
}

/// Sample a group of N independent trajectories with derived seeds.
pub fn sample_group<F: Scalar>(
    params: &ModelParams<F>,
    condition: &Condition,
    n: usize,
    mode: DecodeMode,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Trajectory<F>>> {
    if n < 2 {
        return Err(CordError::InvalidArgument(
            "group-relative advantage needs at least 2 trajectories".into(),
        ));
    }
    (0..n)
        .map(|i| {
            sample_rollout(
                params,
                condition,
                None,
                mode,
                max_len,
                derive_seed(seed, &format!("group-{}", i)),
            )
        })
        .collect()
}

/// Text-conditioned reference rollout (the in-model teacher's own decoding).
pub fn teacher_reference<F: Scalar>(
    params: &ModelParams<F>,
    text_condition: &Condition,
    mode: DecodeMode,
    max_len: usize,
    seed: u64,
) -> Result<Trajectory<F>> {
    debug_assert!(text_condition.modality == Modality::Text);
    sample_rollout(params, text_condition, None, mode, max_len, seed)
}

/// Line format for optional trajectory dumps consumed by the analysis module.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryDump {
    pub prompt_id: u64,
    pub tokens: Vec<usize>,
    pub d_t: Vec<f64>,
    pub reward: f64,
}

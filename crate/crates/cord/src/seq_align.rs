//! Sequence-level alignment: binary answer-agreement rewards, group-relative
//! advantages, and the resulting policy-gradient loss (no critic, no KL
//! penalty term).

use crate::data::TOK_ANSWER;
use crate::error::{CordError, Result};
use crate::model::{sequence_logprob, Condition, ModelParams, ModelVars};
use crate::rollout::Trajectory;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing one rollout against the reference rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JudgeVerdict {
    pub answer: Option<usize>,
    pub reference_answer: Option<usize>,
    pub reward: u8,
}

/// The token immediately after the first ANSWER marker, if any.
pub fn extract_answer(tokens: &[usize]) -> Option<usize> {
    let pos = tokens.iter().position(|&t| t == TOK_ANSWER)?;
    tokens.get(pos + 1).copied()
}

/// Binary reward: 1 iff both sequences contain an extractable answer and the
/// answers agree. Missing or unparseable answers score 0.
pub fn judge_reward(y: &[usize], y_ref: &[usize]) -> JudgeVerdict {
    let answer = extract_answer(y);
    let reference_answer = extract_answer(y_ref);
    let reward = match (answer, reference_answer) {
        (Some(a), Some(b)) if a == b => 1,
        _ => 0,
    };
    JudgeVerdict {
        answer,
        reference_answer,
        reward,
    }
}

/// Group-relative advantages: reward minus the group mean, no variance
/// normalization. Needs at least two group members.
pub fn advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(CordError::InvalidArgument(
            "group-relative advantage needs at least 2 rewards".into(),
        ));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|&r| r - mean).collect())
}

/// A group of rollouts for one prompt with rewards and advantages attached.
#[derive(Debug)]
pub struct RolloutGroup<F: Scalar> {
    pub trajectories: Vec<Trajectory<F>>,
    pub reference_tokens: Vec<usize>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl<F: Scalar> RolloutGroup<F> {
    /// Judge every trajectory against the reference and compute advantages.
    pub fn new(trajectories: Vec<Trajectory<F>>, reference_tokens: Vec<usize>) -> Result<Self> {
        let rewards: Vec<f64> = trajectories
            .iter()
            .map(|t| judge_reward(&t.tokens, &reference_tokens).reward as f64)
            .collect();
        let adv = advantages(&rewards)?;
        Ok(RolloutGroup {
            trajectories,
            reference_tokens,
            rewards,
            advantages: adv,
        })
    }

    /// True when all rewards are equal, so the group carries no gradient.
    pub fn is_zero_advantage(&self) -> bool {
        self.advantages.iter().all(|&a| a.abs() < 1e-12)
    }
}

/// Policy-gradient loss for one group under its sampling condition:
/// −(1/N)·Σ_i A_i·log p(y_i | x). Advantages are plain constants. With
/// `length_normalized`, each log-prob is divided by its sequence length.
/// Empty trajectories have log-prob 0 by convention and contribute nothing.
pub fn sequence_loss<F: Scalar>(
    params: &ModelParams<F>,
    tape: &mut Tape<F>,
    vars: &ModelVars,
    condition: &Condition,
    group: &RolloutGroup<F>,
    length_normalized: bool,
) -> Result<Var> {
    let n = group.trajectories.len();
    let mut total: Option<Var> = None;
    for (traj, &a) in group.trajectories.iter().zip(&group.advantages) {
        if traj.is_empty() || a == 0.0 {
            continue;
        }
        let lp = sequence_logprob(params, tape, vars, condition, &traj.tokens)?;
        let norm = if length_normalized {
            traj.len() as f64
        } else {
            1.0
        };
        let term = tape.scale(lp, F::from_f64_(-a / (n as f64 * norm)))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(acc) => Ok(acc),
        None => tape.constant(Tensor::scalar(F::zero())),
    }
}

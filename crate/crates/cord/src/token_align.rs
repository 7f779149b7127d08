//! Token-level alignment loss: weighted per-step reverse KL between the
//! audio-conditioned policy and the text-conditioned branch of the same
//! model, evaluated on states from on-policy audio rollouts.
//!
//! Weights are treated as constants (no gradient flows through them): a
//! top-K multiplier concentrates updates on the most divergent steps, and a
//! linearly decaying positional multiplier emphasizes early tokens, whose
//! errors compound during decoding.

use crate::error::{CordError, Result};
use crate::model::{forward, Condition, Modality, ModelParams, ModelVars};
use crate::rollout::Trajectory;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weighting hyperparameters for the token-level loss.
#[derive(Debug, Clone, Copy)]
pub struct TokenWeightConfig {
    /// Number of steps per trajectory that receive the boosted weight.
    pub top_k: usize,
    /// Multiplier applied to the top-K most divergent steps.
    pub alpha: f64,
    /// Positional weight at the first step; decays linearly to 1 at the last.
    pub beta: f64,
    /// When false every weight is exactly 1, recovering the unweighted
    /// on-policy distillation objective.
    pub enabled: bool,
}

impl Default for TokenWeightConfig {
    fn default() -> Self {
        TokenWeightConfig {
            top_k: 20,
            alpha: 2.0,
            beta: 2.0,
            enabled: true,
        }
    }
}

/// Uniform average of per-step divergences; an empty trajectory averages
/// to zero by convention.
pub fn uniform_kl<F: Scalar>(divergences: &[F]) -> F {
    if divergences.is_empty() {
        return F::zero();
    }
    let s: F = divergences.iter().cloned().sum();
    s / F::from_f64_(divergences.len() as f64)
}

/// Reverse KL of one step: KL(student || teacher) over log-distributions.
pub fn reverse_kl_step<F: Scalar>(student_log: &[F], teacher_log: &[F]) -> F {
    debug_assert_eq!(student_log.len(), teacher_log.len());
    student_log
        .iter()
        .zip(teacher_log)
        .map(|(&s, &t)| s.exp() * (s - t))
        .sum()
}

/// Divergence-based weights: the K steps with the largest divergence get
/// `alpha`, everything else gets 1. Ties resolve toward earlier positions.
pub fn topk_weights<F: Scalar>(divergences: &[F], k: usize, alpha: f64) -> Vec<F> {
    let t = divergences.len();
    let mut idx: Vec<usize> = (0..t).collect();
    // stable sort by descending divergence keeps earlier positions first on ties
    idx.sort_by(|&a, &b| {
        divergences[b]
            .partial_cmp(&divergences[a])
            .expect("finite divergences")
    });
    let mut w = vec![F::one(); t];
    for &i in idx.iter().take(k) {
        w[i] = F::from_f64_(alpha);
    }
    w
}

/// Positional weights decaying linearly from `beta` at the first step to 1
/// at the last. A single-step trajectory gets weight 1.
pub fn positional_weights<F: Scalar>(t_len: usize, beta: f64) -> Vec<F> {
    if t_len == 0 {
        return Vec::new();
    }
    if t_len == 1 {
        return vec![F::one()];
    }
    (0..t_len)
        .map(|t| {
            let frac = t as f64 / (t_len - 1) as f64;
            F::from_f64_(beta + (1.0 - beta) * frac)
        })
        .collect()
}

/// Elementwise product of the divergence and positional weights.
pub fn combine_weights<F: Scalar>(w_div: &[F], w_pos: &[F]) -> Result<Vec<F>> {
    if w_div.len() != w_pos.len() {
        return Err(CordError::ShapeMismatch(format!(
            "weight lengths {} vs {}",
            w_div.len(),
            w_pos.len()
        )));
    }
    Ok(w_div.iter().zip(w_pos).map(|(&a, &b)| a * b).collect())
}

/// Numeric (non-differentiable) per-step reverse KL of a recorded trajectory.
/// Requires teacher distributions to have been recorded during sampling.
pub fn step_divergences<F: Scalar>(traj: &Trajectory<F>) -> Result<Vec<F>> {
    let teacher = traj.teacher_logdists.as_ref().ok_or_else(|| {
        CordError::InvalidArgument("trajectory has no recorded teacher distributions".into())
    })?;
    Ok(traj
        .step_logdists
        .iter()
        .zip(teacher)
        .map(|(s, t)| reverse_kl_step(s, t))
        .collect())
}

/// Fill `d_t` on a trajectory in place for downstream analysis.
pub fn fill_divergences<F: Scalar>(traj: &mut Trajectory<F>) -> Result<()> {
    traj.d_t = step_divergences(traj)?;
    Ok(())
}

/// Build the differentiable token-alignment loss for a batch of on-policy
/// trajectories: mean over trajectories of the weighted sum of per-step
/// reverse KL. Zero-length trajectories contribute zero. The text-conditioned
/// branch is gradient-stopped, so updates move only the audio-conditioned
/// behavior toward the text-conditioned reference.
pub fn token_loss<F: Scalar>(
    params: &ModelParams<F>,
    tape: &mut Tape<F>,
    vars: &ModelVars,
    batch: &[(Condition, Condition, Trajectory<F>)],
    weights: &TokenWeightConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(CordError::InvalidArgument(
            "token loss needs at least one trajectory".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for (audio_cond, text_cond, traj) in batch {
        if audio_cond.modality != Modality::Audio || text_cond.modality != Modality::Text {
            return Err(CordError::InvalidArgument(
                "token loss expects (audio, text) condition pairs".into(),
            ));
        }
        let t = traj.len();
        if t == 0 {
            continue; // an immediate EOS contributes exactly zero
        }
        // fresh forward under current parameters for both branches
        let student_full = forward(params, tape, vars, audio_cond, &traj.tokens)?;
        let student = tape.slice_rows(student_full, 0, t)?;
        let teacher_full = forward(params, tape, vars, text_cond, &traj.tokens)?;
        let teacher_rows = tape.slice_rows(teacher_full, 0, t)?;
        let teacher = tape.stop_grad(teacher_rows)?;
        let kl = tape.kl_rows(student, teacher, true)?;

        // weights are derived from the current divergence values but carry
        // no gradient themselves
        let w = if weights.enabled {
            let d_now = tape.value(kl).data.clone();
            let w_div = topk_weights(&d_now, weights.top_k, weights.alpha);
            let w_pos = positional_weights(t, weights.beta);
            combine_weights(&w_div, &w_pos)?
        } else {
            vec![F::one(); t]
        };
        let traj_loss = tape.weighted_sum(kl, &w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, traj_loss)?,
            None => traj_loss,
        });
    }
    let inv_b = F::from_f64_(1.0 / batch.len() as f64);
    match total {
        Some(acc) => tape.scale(acc, inv_b),
        None => tape.constant(Tensor::scalar(F::zero())),
    }
}

//! Off-policy baselines built on teacher rollouts: negative log-likelihood
//! training on teacher tokens (SFT) and forward-KL distillation along
//! teacher-generated prefixes. Both supervise states from text-conditioned
//! decoding, in contrast to the on-policy token-alignment loss.

use crate::error::{CordError, Result};
use crate::model::{forward, sequence_logprob, Condition, Modality, ModelParams, ModelVars};
use crate::rollout::Trajectory;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One teacher example: the paired conditions plus a rollout sampled under
/// the text condition (off-policy with respect to audio-conditioned decoding).
pub struct TeacherExample<F: Scalar> {
    pub audio: Condition,
    pub text: Condition,
    pub rollout: Trajectory<F>,
}

impl<F: Scalar> TeacherExample<F> {
    pub fn new(audio: Condition, text: Condition, rollout: Trajectory<F>) -> Result<Self> {
        if audio.modality != Modality::Audio || text.modality != Modality::Text {
            return Err(CordError::InvalidArgument(
                "teacher example expects (audio, text) condition pair".into(),
            ));
        }
        if rollout.condition_modality != Modality::Text {
            return Err(CordError::InvalidArgument(
                "teacher rollout must be sampled under the text condition".into(),
            ));
        }
        Ok(TeacherExample {
            audio,
            text,
            rollout,
        })
    }
}

/// Negative audio-conditioned log-likelihood of the teacher tokens: mean
/// over examples, sum over steps. Empty rollouts contribute zero.
pub fn sft_loss<F: Scalar>(
    params: &ModelParams<F>,
    tape: &mut Tape<F>,
    vars: &ModelVars,
    batch: &[TeacherExample<F>],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(CordError::InvalidArgument(
            "sft loss needs at least one example".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for ex in batch {
        if ex.rollout.is_empty() {
            continue;
        }
        let lp = sequence_logprob(params, tape, vars, &ex.audio, &ex.rollout.tokens)?;
        let term = tape.scale(lp, F::from_f64_(-1.0))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let inv = F::from_f64_(1.0 / batch.len() as f64);
    match total {
        Some(acc) => tape.scale(acc, inv),
        None => tape.constant(Tensor::scalar(F::zero())),
    }
}

/// Forward-KL distillation: KL(text-conditioned || audio-conditioned) at
/// every step along the teacher rollout, averaged over all steps in the
/// batch. The text-conditioned side is gradient-stopped.
pub fn fkl_loss<F: Scalar>(
    params: &ModelParams<F>,
    tape: &mut Tape<F>,
    vars: &ModelVars,
    batch: &[TeacherExample<F>],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(CordError::InvalidArgument(
            "forward-KL loss needs at least one example".into(),
        ));
    }
    let mut total: Option<Var> = None;
    let mut steps = 0usize;
    for ex in batch {
        let t = ex.rollout.len();
        if t == 0 {
            continue;
        }
        let student_full = forward(params, tape, vars, &ex.audio, &ex.rollout.tokens)?;
        let student = tape.slice_rows(student_full, 0, t)?;
        let teacher_full = forward(params, tape, vars, &ex.text, &ex.rollout.tokens)?;
        let teacher_rows = tape.slice_rows(teacher_full, 0, t)?;
        let teacher = tape.stop_grad(teacher_rows)?;
        let kl = tape.kl_rows(student, teacher, false)?;
        let s = tape.sum_all(kl)?;
        steps += t;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    match total {
        Some(acc) => tape.scale(acc, F::from_f64_(1.0 / steps as f64)),
        None => tape.constant(Tensor::scalar(F::zero())),
    }
}

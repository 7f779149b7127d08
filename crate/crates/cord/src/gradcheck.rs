//! Central finite-difference gradient checking.

use crate::error::{CordError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-parameter worst-case scaled gradient error.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Scaled error between analytic and numeric gradients. The denominator is
/// floored at 1 so that finite-difference noise on near-zero gradients does
/// not dominate; a real backward bug shows up as an O(|grad|) discrepancy
/// either way.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compare analytic gradients of `loss_builder` against central finite
/// differences at the given point. The builder must be deterministic: it is
/// evaluated twice at the same point and any value drift is an error.
pub fn grad_check<F: Scalar>(
    params: &[(String, Tensor<F>)],
    eps: f64,
    mut loss_builder: impl FnMut(&mut Tape<F>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |tensors: &[(String, Tensor<F>)],
                builder: &mut dyn FnMut(&mut Tape<F>, &[Var]) -> Result<Var>|
     -> Result<(f64, Vec<Tensor<F>>)> {
        let mut tape: Tape<F> = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let root = builder(&mut tape, &vars)?;
        let loss = tape.value(root).scalar_value().to_f64_();
        let grads = tape.backward(root)?;
        let g = vars.iter().map(|&v| grads.get(v, &tape)).collect();
        Ok((loss, g))
    };

    let (loss_a, analytic) = eval(params, &mut loss_builder)?;
    let (loss_b, _) = eval(params, &mut loss_builder)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(CordError::InvalidArgument(
            "loss builder is not deterministic across evaluations".into(),
        ));
    }

    let mut point: Vec<(String, Tensor<F>)> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_err: f64 = 0.0;
    for pi in 0..params.len() {
        let mut worst: f64 = 0.0;
        for i in 0..params[pi].1.data.len() {
            let orig = point[pi].1.data[i];
            point[pi].1.data[i] = orig + F::from_f64_(eps);
            let (lp, _) = eval(&point, &mut loss_builder)?;
            point[pi].1.data[i] = orig - F::from_f64_(eps);
            let (lm, _) = eval(&point, &mut loss_builder)?;
            point[pi].1.data[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[pi].data[i].to_f64_();
            worst = worst.max(rel_err(a, numeric));
        }
        per_param.push((params[pi].0.clone(), worst));
        max_err = max_err.max(worst);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_err,
    })
}

/// Finite-difference check of all four training losses on a small model,
/// differentiating every parameter. Teacher-side distributions and
/// divergence-based weights are frozen at the base point because the losses
/// stop gradients there by design; finite differences would otherwise see
/// those branches move.
pub fn check_model_losses<F: Scalar>(eps: f64) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::baseline::TeacherExample;
    use crate::data::{encode_audio, encode_text, generate_instance, NoiseSpec};
    use crate::model::{forward, step_distributions, Condition, ModelConfig, ModelParams, ModelVars};
    use crate::rollout::{sample_group, sample_rollout, DecodeMode};
    use crate::seq_align::{advantages, sequence_loss, RolloutGroup};
    use crate::token_align::{
        combine_weights, positional_weights, step_divergences, topk_weights,
    };

    let config = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        context: 64,
        ..ModelConfig::default()
    };
    let base: ModelParams<F> = ModelParams::init(config.clone(), 7)?;
    let inst = generate_instance(1, 7, 5)?;
    let audio = Condition::audio(encode_audio(&inst, &NoiseSpec::default())?);
    let text = Condition::text(encode_text(&inst));

    let named: Vec<(String, Tensor<F>)> = base
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();

    // rebuild the model inside a builder so that every leaf is differentiable
    let wire = |tape: &mut Tape<F>, vars: &[Var]| -> Result<(ModelParams<F>, ModelVars)> {
        let mut tensors = named.clone();
        for (i, slot) in tensors.iter_mut().enumerate() {
            slot.1 = tape.value(vars[i]).clone();
        }
        let p = ModelParams::from_named(config.clone(), tensors)?;
        Ok((
            p,
            ModelVars {
                leaves: vars.to_vec(),
            },
        ))
    };

    let mut reports = Vec::new();

    // token-level loss with frozen teacher rows and weights
    {
        let traj = sample_rollout(
            &base,
            &audio,
            Some(&text),
            DecodeMode::Temperature(1.0),
            4,
            11,
        )?;
        if traj.is_empty() {
            return Err(CordError::InvalidArgument(
                "token-loss check sampled an empty rollout; change the seed".into(),
            ));
        }
        let d = step_divergences(&traj)?;
        let w = combine_weights(
            &topk_weights(&d, 2, 2.0),
            &positional_weights(d.len(), 2.0),
        )?;
        let teacher_full = step_distributions(&base, &text, &traj.tokens)?;
        let t = traj.len();
        let frozen = Tensor::from_slice(
            vec![t, teacher_full.cols()],
            &teacher_full.data[..t * teacher_full.cols()],
        )?;
        let report = grad_check(&named, eps, |tape, vars| {
            let (p, mv) = wire(tape, vars)?;
            let student_full = forward(&p, tape, &mv, &audio, &traj.tokens)?;
            let student = tape.slice_rows(student_full, 0, t)?;
            let teacher = tape.constant(frozen.clone())?;
            let kl = tape.kl_rows(student, teacher, true)?;
            tape.weighted_sum(kl, &w)
        })?;
        reports.push(("token_alignment".to_string(), report));
    }

    // sequence-level policy-gradient loss
    {
        let trajs = sample_group(&base, &audio, 4, DecodeMode::Temperature(1.5), 4, 13)?;
        let mut group = RolloutGroup::new(trajs, Vec::new())?;
        group.rewards = vec![1.0, 0.0, 0.0, 1.0];
        group.advantages = advantages(&group.rewards)?;
        let report = grad_check(&named, eps, |tape, vars| {
            let (p, mv) = wire(tape, vars)?;
            sequence_loss(&p, tape, &mv, &audio, &group, false)
        })?;
        reports.push(("sequence_alignment".to_string(), report));
    }

    // teacher-rollout baselines
    let teacher_traj = sample_rollout(&base, &text, None, DecodeMode::Temperature(1.0), 4, 17)?;
    if teacher_traj.is_empty() {
        return Err(CordError::InvalidArgument(
            "baseline check sampled an empty teacher rollout; change the seed".into(),
        ));
    }
    {
        let ex = TeacherExample::new(audio.clone(), text.clone(), teacher_traj.clone())?;
        let tokens = ex.rollout.tokens.clone();
        let report = grad_check(&named, eps, |tape, vars| {
            let (p, mv) = wire(tape, vars)?;
            let ex2 = TeacherExample::new(
                audio.clone(),
                text.clone(),
                Trajectory {
                    tokens: tokens.clone(),
                    ..empty_text_trajectory()
                },
            )?;
            crate::baseline::sft_loss(&p, tape, &mv, &[ex2])
        })?;
        reports.push(("sft".to_string(), report));
    }
    {
        let tokens = teacher_traj.tokens.clone();
        let t = tokens.len();
        let teacher_full = step_distributions(&base, &text, &tokens)?;
        let frozen = Tensor::from_slice(
            vec![t, teacher_full.cols()],
            &teacher_full.data[..t * teacher_full.cols()],
        )?;
        let report = grad_check(&named, eps, |tape, vars| {
            let (p, mv) = wire(tape, vars)?;
            let student_full = forward(&p, tape, &mv, &audio, &tokens)?;
            let student = tape.slice_rows(student_full, 0, t)?;
            let teacher = tape.constant(frozen.clone())?;
            let kl = tape.kl_rows(student, teacher, false)?;
            let s = tape.sum_all(kl)?;
            tape.scale(s, F::from_f64_(1.0 / t as f64))
        })?;
        reports.push(("forward_kl".to_string(), report));
    }

    Ok(reports)
}

fn empty_text_trajectory<F: Scalar>() -> crate::rollout::Trajectory<F> {
    crate::rollout::Trajectory {
        tokens: Vec::new(),
        step_logdists: Vec::new(),
        teacher_logdists: None,
        token_logprobs: Vec::new(),
        d_t: Vec::new(),
        condition_modality: crate::model::Modality::Text,
        mode: crate::rollout::DecodeMode::Temperature(1.0),
        terminated_by: crate::rollout::Termination::Eos,
    }
}

use crate::rollout::Trajectory;

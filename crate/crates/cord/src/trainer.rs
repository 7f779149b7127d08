//! Training orchestration: cross-entropy pretraining that induces the
//! text/audio accuracy gap, and alignment training for the five arms
//! (cord, opd, grpo, sft, fkl) with checkpointing and metric logging.
//!
//! Determinism contract: every random choice flows from the master seed
//! through named substreams, and no wall-clock quantity enters the metric
//! files, so reruns are byte-identical.

use crate::analysis::{evaluate, evaluate_aux, MethodEval};
use crate::baseline::{fkl_loss, sft_loss, TeacherExample};
use crate::checkpoint;
use crate::config::{Method, RunConfig};
use crate::data::{
    aux_label_token, generate_aux, generate_records, AuxRecord, DataGenConfig, DataRecord,
    NoiseSpec, TOK_EOS,
};
use crate::error::{CordError, Result};
use crate::model::{sequence_logprob, Condition, ModelParams};
use crate::optim::{AdamWConfig, OptimState};
use crate::rollout::{sample_group, sample_rollout, DecodeMode, Trajectory};
use crate::scalar::Scalar;
use crate::seeding::derive_seed;
use crate::seq_align::{sequence_loss, RolloutGroup};
use crate::tape::Tape;
use crate::token_align::{step_divergences, token_loss, TokenWeightConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// The three problem splits plus the auxiliary audio-only task.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<DataRecord>,
    pub val: Vec<DataRecord>,
    pub eval: Vec<DataRecord>,
    pub aux: Vec<AuxRecord>,
}

/// Generate all splits from the config's master seed.
pub fn build_datasets(config: &RunConfig) -> Result<Datasets> {
    let gen = DataGenConfig {
        n: config.n_examples,
        modulus: config.modulus,
        min_len: config.min_program_len,
        max_len: config.max_program_len,
        noise: NoiseSpec {
            p_sub: config.noise_sub,
            p_dup: config.noise_dup,
            ..NoiseSpec::default()
        },
        seed: derive_seed(config.seed, "data"),
        ..DataGenConfig::default()
    };
    let records = generate_records(&gen)?;
    let mut by_split: HashMap<&str, Vec<DataRecord>> = HashMap::new();
    for r in records {
        by_split
            .entry(match r.split.as_str() {
                "train" => "train",
                "val" => "val",
                _ => "eval",
            })
            .or_default()
            .push(r);
    }
    let aux = generate_aux(config.aux_examples, derive_seed(config.seed, "aux"))?;
    Ok(Datasets {
        train: by_split.remove("train").unwrap_or_default(),
        val: by_split.remove("val").unwrap_or_default(),
        eval: by_split.remove("eval").unwrap_or_default(),
        aux,
    })
}

/// Per-step bookkeeping. Wall time is tracked for the operator but is kept
/// out of the deterministic metrics file.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: usize,
    pub l_tok: f64,
    pub l_seq: f64,
    pub total: f64,
    pub mean_d: f64,
    pub mean_reward: f64,
    pub zero_adv_frac: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str =
    "step,l_tok,l_seq,total,mean_d,mean_reward,zero_adv_frac,grad_norm";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.6},{:.6},{:.10e}",
            self.step,
            self.l_tok,
            self.l_seq,
            self.total,
            self.mean_d,
            self.mean_reward,
            self.zero_adv_frac,
            self.grad_norm
        )
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| CordError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn l2_norm<F: Scalar>(grads: &[crate::tensor::Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|&v| {
            let x = v.to_f64_();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Run one optimizer update from a built loss graph. Returns the gradient
/// norm. Non-finite losses abort with a divergence error.
fn optimize<F: Scalar>(
    params: &mut ModelParams<F>,
    opt: &mut OptimState<F>,
    tape: Tape<F>,
    loss: crate::tape::Var,
    vars: &crate::model::ModelVars,
    context: &str,
) -> Result<f64> {
    let loss_value = tape.value(loss).scalar_value().to_f64_();
    if !loss_value.is_finite() {
        return Err(CordError::Diverged(format!(
            "{}: loss became non-finite",
            context
        )));
    }
    let grads = tape.backward(loss)?;
    let grad_tensors: Vec<crate::tensor::Tensor<F>> = vars
        .leaves
        .iter()
        .map(|&v| grads.get(v, &tape))
        .collect();
    let norm = l2_norm(&grad_tensors);
    let mut tensors = params.tensors_mut();
    let mut owned: Vec<crate::tensor::Tensor<F>> =
        tensors.iter().map(|t| (**t).clone()).collect();
    opt.step(&mut owned, &grad_tensors)?;
    for (slot, new) in tensors.iter_mut().zip(owned) {
        **slot = new;
    }
    Ok(norm)
}

/// Cross-entropy pretraining: text conditioning on the full task, audio
/// conditioning on a small subsample, and the auxiliary audio labeling task.
/// The imbalance induces the text-over-audio accuracy gap that alignment
/// training is then asked to close.
pub fn pretrain<F: Scalar>(
    config: &RunConfig,
    data: &Datasets,
    out_dir: &Path,
) -> Result<ModelParams<F>> {
    if data.train.is_empty() || data.aux.is_empty() {
        return Err(CordError::InvalidArgument(
            "pretraining needs non-empty train and aux sets".into(),
        ));
    }
    let mut params: ModelParams<F> =
        ModelParams::init(config.model_config(), derive_seed(config.seed, "init"))?;
    let adamw = AdamWConfig {
        lr: config.pretrain_lr,
        ..AdamWConfig::default()
    };
    let mut opt = OptimState::new(adamw, &params.tensors_mut().iter().map(|t| (**t).clone()).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pretrain"));
    let mut metrics = String::from("step,loss\n");

    for step in 1..=config.pretrain_steps {
        let mut tape: Tape<F> = Tape::new();
        let vars = params.vars(&mut tape)?;
        let mut total: Option<crate::tape::Var> = None;
        for _ in 0..config.pretrain_batch {
            let (cond, target) = if rng.gen::<f64>() < config.aux_fraction {
                let rec = &data.aux[rng.gen_range(0..data.aux.len())];
                (
                    Condition::audio(rec.x_audio.clone()),
                    vec![aux_label_token(&rec.label)?, TOK_EOS],
                )
            } else {
                let rec = &data.train[rng.gen_range(0..data.train.len())];
                let cond = if rng.gen::<f64>() < config.audio_fraction {
                    Condition::audio(rec.x_audio.clone())
                } else {
                    Condition::text(rec.x_text.clone())
                };
                (cond, rec.target.clone())
            };
            let lp = sequence_logprob(&params, &mut tape, &vars, &cond, &target)?;
            let term = tape.scale(lp, F::from_f64_(-1.0))?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let summed = total.expect("non-empty batch");
        let loss = tape.scale(summed, F::from_f64_(1.0 / config.pretrain_batch as f64))?;
        let loss_value = tape.value(loss).scalar_value().to_f64_();
        optimize(&mut params, &mut opt, tape, loss, &vars, "pretrain")?;
        let _ = writeln!(metrics, "{},{:.10e}", step, loss_value);
    }

    write_file(&out_dir.join("pretrain_metrics.csv"), &metrics)?;
    checkpoint::save(&params, &out_dir.join("base.ckpt"))?;
    Ok(params)
}

/// Everything produced by one alignment run, kept in memory for the caller
/// in addition to the files written under the output directory.
#[derive(Debug)]
pub struct ExperimentResult {
    pub base: MethodEval,
    /// (checkpoint step, eval at that step)
    pub checkpoints: Vec<(usize, MethodEval)>,
    pub metrics: Vec<StepMetrics>,
}

fn eval_snapshot<F: Scalar>(
    params: &ModelParams<F>,
    data: &Datasets,
    config: &RunConfig,
    label: &str,
) -> Result<MethodEval> {
    let n = config.eval_examples.min(data.eval.len());
    let eval_slice = &data.eval[..n];
    let aux_n = config.eval_examples.min(data.aux.len());
    Ok(MethodEval {
        method: label.to_string(),
        acc_text: evaluate(params, eval_slice, false, config.max_rollout_len)?,
        acc_audio: evaluate(params, eval_slice, true, config.max_rollout_len)?,
        acc_aux: evaluate_aux(params, &data.aux[..aux_n], aux_label_token)?,
    })
}

/// Train one arm from a base checkpoint, evaluating and checkpointing at the
/// configured steps and writing metrics.csv / rewards.csv / eval.csv.
pub fn run_experiment<F: Scalar>(
    config: &RunConfig,
    data: &Datasets,
    base: &ModelParams<F>,
    out_dir: &Path,
) -> Result<ExperimentResult> {
    if data.train.is_empty() || data.eval.is_empty() {
        return Err(CordError::InvalidArgument(
            "alignment training needs non-empty train and eval sets".into(),
        ));
    }
    let method = config.method;
    let mut params = base.clone();
    let adamw = AdamWConfig {
        lr: config.lr,
        ..AdamWConfig::default()
    };
    let mut opt = OptimState::new(
        adamw,
        &params
            .tensors_mut()
            .iter()
            .map(|t| (**t).clone())
            .collect::<Vec<_>>(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train"));
    let base_eval = eval_snapshot(base, data, config, "base")?;

    let weight_config = TokenWeightConfig {
        top_k: config.top_k,
        alpha: config.alpha,
        beta: config.beta,
        enabled: config.weighting_enabled && method == Method::Cord,
    };
    // token caches for the fixed-teacher mode
    let mut teacher_cache: HashMap<u64, Vec<usize>> = HashMap::new();

    let mut metrics_csv = String::from(METRICS_HEADER);
    metrics_csv.push('\n');
    let mut timing_csv = String::from("step,wall_ms\n");
    let mut rewards_csv = String::from("step,prompt_id,rewards,advantages,zero_advantage\n");
    let mut eval_csv = String::from("step,method,acc_text,acc_audio,acc_aux\n");
    let _ = writeln!(
        eval_csv,
        "0,base,{:.4},{:.4},{:.4}",
        base_eval.acc_text, base_eval.acc_audio, base_eval.acc_aux
    );

    let mut all_metrics = Vec::with_capacity(config.max_steps);
    let mut checkpoints = Vec::new();

    for step in 1..=config.max_steps {
        let start = std::time::Instant::now();
        let batch: Vec<&DataRecord> = (0..config.batch_size)
            .map(|_| &data.train[rng.gen_range(0..data.train.len())])
            .collect();

        let mut tape: Tape<F> = Tape::new();
        let vars = params.vars(&mut tape)?;
        let mut l_tok_var = None;
        let mut l_seq_var = None;
        let mut mean_d = 0.0;
        let mut mean_reward = 0.0;
        let mut zero_adv = 0.0;

        // token-level alignment path (cord, opd)
        if matches!(method, Method::Cord | Method::Opd) {
            let mut tok_batch = Vec::with_capacity(batch.len());
            let mut d_sum = 0.0;
            let mut d_count = 0usize;
            for (i, rec) in batch.iter().enumerate() {
                let audio = Condition::audio(rec.x_audio.clone());
                let text = Condition::text(rec.x_text.clone());
                let traj: Trajectory<F> = sample_rollout(
                    &params,
                    &audio,
                    Some(&text),
                    DecodeMode::Temperature(config.temp_token),
                    config.max_rollout_len,
                    derive_seed(config.seed, &format!("tok-{}-{}", step, i)),
                )?;
                if !traj.is_empty() {
                    for d in step_divergences(&traj)? {
                        d_sum += d.to_f64_();
                        d_count += 1;
                    }
                }
                tok_batch.push((audio, text, traj));
            }
            if d_count > 0 {
                mean_d = d_sum / d_count as f64;
            }
            l_tok_var = Some(token_loss(
                &params,
                &mut tape,
                &vars,
                &tok_batch,
                &weight_config,
            )?);
        }

        // sequence-level alignment path (cord, grpo)
        if matches!(method, Method::Cord | Method::Grpo) {
            let mut seq_total = None;
            let mut reward_sum = 0.0;
            let mut reward_count = 0usize;
            let mut zero_groups = 0usize;
            for (i, rec) in batch.iter().enumerate() {
                let audio = Condition::audio(rec.x_audio.clone());
                let text = Condition::text(rec.x_text.clone());
                let group_trajs = sample_group(
                    &params,
                    &audio,
                    config.group_size,
                    DecodeMode::Temperature(config.temp_seq),
                    config.max_rollout_len,
                    derive_seed(config.seed, &format!("grp-{}-{}", step, i)),
                )?;
                // deterministic text-conditioned reference decoding
                let reference = sample_rollout(
                    &params,
                    &text,
                    None,
                    DecodeMode::Greedy,
                    config.max_rollout_len,
                    0,
                )?;
                let group = RolloutGroup::new(group_trajs, reference.tokens)?;
                reward_sum += group.rewards.iter().sum::<f64>();
                reward_count += group.rewards.len();
                if group.is_zero_advantage() {
                    zero_groups += 1;
                }
                let _ = writeln!(
                    rewards_csv,
                    "{},{},{},{},{}",
                    step,
                    rec.id,
                    join_f64(&group.rewards),
                    join_f64(&group.advantages),
                    group.is_zero_advantage()
                );
                let l = sequence_loss(
                    &params,
                    &mut tape,
                    &vars,
                    &audio,
                    &group,
                    config.length_normalized,
                )?;
                seq_total = Some(match seq_total {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
            let summed = seq_total.expect("non-empty batch");
            l_seq_var = Some(tape.scale(summed, F::from_f64_(1.0 / batch.len() as f64))?);
            mean_reward = reward_sum / reward_count as f64;
            zero_adv = zero_groups as f64 / batch.len() as f64;
        }

        // off-policy teacher baselines (sft, fkl)
        if matches!(method, Method::Sft | Method::Fkl) {
            let mut examples = Vec::with_capacity(batch.len());
            for (i, rec) in batch.iter().enumerate() {
                let audio = Condition::audio(rec.x_audio.clone());
                let text = Condition::text(rec.x_text.clone());
                let tokens = if config.teacher_refresh {
                    sample_rollout(
                        &params,
                        &text,
                        None,
                        DecodeMode::Temperature(1.0),
                        config.max_rollout_len,
                        derive_seed(config.seed, &format!("teacher-{}-{}", step, i)),
                    )?
                    .tokens
                } else {
                    teacher_cache
                        .entry(rec.id)
                        .or_insert_with(|| {
                            sample_rollout(
                                base,
                                &text,
                                None,
                                DecodeMode::Temperature(1.0),
                                config.max_rollout_len,
                                derive_seed(config.seed, &format!("teacher-fixed-{}", rec.id)),
                            )
                            .map(|t| t.tokens)
                            .unwrap_or_default()
                        })
                        .clone()
                };
                // re-wrap tokens as a text-provenance trajectory record
                let rollout = Trajectory {
                    tokens,
                    step_logdists: Vec::new(),
                    teacher_logdists: None,
                    token_logprobs: Vec::new(),
                    d_t: Vec::new(),
                    condition_modality: crate::model::Modality::Text,
                    mode: DecodeMode::Temperature(1.0),
                    terminated_by: crate::rollout::Termination::Eos,
                };
                examples.push(TeacherExample::new(audio, text, rollout)?);
            }
            let l = match method {
                Method::Sft => sft_loss(&params, &mut tape, &vars, &examples)?,
                _ => fkl_loss(&params, &mut tape, &vars, &examples)?,
            };
            l_tok_var = Some(l);
        }

        // combined objective: token term plus weighted sequence term
        let loss = match (l_tok_var, l_seq_var) {
            (Some(t), Some(s)) => {
                let ws = tape.scale(s, F::from_f64_(config.seq_weight))?;
                tape.add(t, ws)?
            }
            (Some(t), None) => t,
            (None, Some(s)) => tape.scale(s, F::from_f64_(config.seq_weight))?,
            (None, None) => unreachable!("every method builds at least one term"),
        };
        let l_tok = l_tok_var
            .map(|v| tape.value(v).scalar_value().to_f64_())
            .unwrap_or(0.0);
        let l_seq = l_seq_var
            .map(|v| tape.value(v).scalar_value().to_f64_())
            .unwrap_or(0.0);
        let total = tape.value(loss).scalar_value().to_f64_();
        let grad_norm = optimize(
            &mut params,
            &mut opt,
            tape,
            loss,
            &vars,
            &format!("{} step {}", method.name(), step),
        )?;

        let m = StepMetrics {
            step,
            l_tok,
            l_seq,
            total,
            mean_d,
            mean_reward,
            zero_adv_frac: zero_adv,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        metrics_csv.push_str(&m.csv_row());
        metrics_csv.push('\n');
        let _ = writeln!(timing_csv, "{},{:.3}", m.step, m.wall_ms);
        all_metrics.push(m);

        if config.checkpoints.contains(&step) {
            let snap = eval_snapshot(&params, data, config, method.name())?;
            let _ = writeln!(
                eval_csv,
                "{},{},{:.4},{:.4},{:.4}",
                step, snap.method, snap.acc_text, snap.acc_audio, snap.acc_aux
            );
            checkpoint::save(
                &params,
                &out_dir.join(format!("{}_step{}.ckpt", method.name(), step)),
            )?;
            checkpoints.push((step, snap));
        }
    }

    write_file(&out_dir.join("metrics.csv"), &metrics_csv)?;
    write_file(&out_dir.join("timing.csv"), &timing_csv)?;
    write_file(&out_dir.join("eval.csv"), &eval_csv)?;
    if matches!(method, Method::Cord | Method::Grpo) {
        write_file(&out_dir.join("rewards.csv"), &rewards_csv)?;
    }
    Ok(ExperimentResult {
        base: base_eval,
        checkpoints,
        metrics: all_metrics,
    })
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{}", x))
        .collect::<Vec<_>>()
        .join(";")
}

/// Weighting-intensity sweep: run the combined arm once per value with
/// alpha = beta = value, reporting the final audio accuracy and the relative
/// gap change against the base checkpoint.
pub fn sweep<F: Scalar>(
    config: &RunConfig,
    data: &Datasets,
    base: &ModelParams<F>,
    values: &[f64],
    out_dir: &Path,
) -> Result<String> {
    let mut csv = String::from("alpha_beta,acc_audio,gap,relative_reduction_pct\n");
    let base_eval = eval_snapshot(base, data, config, "base")?;
    let base_gap = base_eval.acc_text - base_eval.acc_audio;
    for &v in values {
        let mut c = config.clone();
        c.method = Method::Cord;
        c.alpha = v;
        c.beta = v;
        c.validate()?;
        let sub = out_dir.join(format!("sweep_{}", v));
        std::fs::create_dir_all(&sub).map_err(|source| CordError::Io {
            path: sub.display().to_string(),
            source,
        })?;
        let result = run_experiment(&c, data, base, &sub)?;
        let last = result
            .checkpoints
            .last()
            .map(|(_, e)| e.acc_audio)
            .unwrap_or(base_eval.acc_audio);
        let gap = base_eval.acc_text - last;
        let reduction = if base_gap.abs() > 0.0 {
            100.0 * (base_gap - gap) / base_gap
        } else {
            0.0
        };
        let _ = writeln!(csv, "{},{:.4},{:.4},{:.4}", v, last, gap, reduction);
    }
    write_file(&out_dir.join("sweep.csv"), &csv)?;
    Ok(csv)
}

//! Command-line front end for the full pipeline: data generation,
//! pretraining, alignment training, evaluation, divergence analysis,
//! gradient checking, and the weighting-intensity sweep.
//!
//! Exit codes: 0 success, 1 usage/config errors, 2 training divergence,
//! 3 I/O failure.

use clap::{Parser, Subcommand};
use cord::analysis::{
    collect_kl_records, gap_report, histogram, percentile, position_correlation, skew_summary,
    token_frequency_by_kl, MethodEval,
};
use cord::checkpoint;
use cord::config::RunConfig;
use cord::data::write_jsonl;
use cord::error::{CordError, Result};
use cord::gradcheck::check_model_losses;
use cord::model::ModelParams;
use cord::trainer::{build_datasets, pretrain, run_experiment, sweep, Datasets};
use cord::{CheckScalar, Scalar, TrainScalar};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cord",
    about = "Weighted on-policy cross-modal self-distillation at desk scale"
)]
struct Cli {
    /// Plain-text key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts (created if absent).
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,

    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Training method (overrides the config file).
    #[arg(long, global = true)]
    method: Option<String>,

    /// Maximum alignment steps (overrides the config file).
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Repeatable key=value config override; wins over the file.
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired dataset and auxiliary task as JSONL files.
    GenerateData,
    /// Pretrain the base model (induces the modality gap) and checkpoint it.
    Pretrain,
    /// Run one alignment arm from a base checkpoint.
    Train {
        /// Base checkpoint; if absent, pretraining runs first into --out.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on both modalities and the auxiliary task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Divergence statistics along on-policy rollouts of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Percentile rank for the high/low divergence split.
        #[arg(long, default_value_t = 80.0)]
        percentile: f64,
        /// Histogram bin count.
        #[arg(long, default_value_t = 32)]
        bins: usize,
    },
    /// Finite-difference gradient check of all four losses (f64 and f32).
    GradCheck,
    /// Weighting-intensity sweep: run the combined arm per value.
    Sweep {
        /// Only alpha_beta is supported: sets alpha = beta per value.
        #[arg(long, default_value = "alpha_beta")]
        param: String,
        /// Comma-separated values.
        #[arg(long, default_value = "1.0,1.5,2.0,2.5")]
        values: String,
    },
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CordError + '_ {
    move |source| CordError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        config.apply_file(path)?;
    }
    config.apply_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(method) = &cli.method {
        config.method = cord::config::Method::parse(method)?;
    }
    if let Some(steps) = cli.steps {
        config.max_steps = steps;
    }
    config.validate()?;
    Ok(config)
}

fn prepare_out(cli: &Cli, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let snap_path = cli.out.join("config_resolved.cfg");
    std::fs::write(&snap_path, config.snapshot()).map_err(io_err(&snap_path))?;
    Ok(())
}

fn load_or_pretrain(
    config: &RunConfig,
    data: &Datasets,
    out: &Path,
    base: &Option<PathBuf>,
) -> Result<ModelParams<TrainScalar>> {
    match base {
        Some(path) => checkpoint::load(config.model_config(), path),
        None => {
            println!("no --base checkpoint given; pretraining first");
            pretrain(config, data, out)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    // Worker-parallelism cap. The implementation is single-threaded; the
    // variable is validated so scripted callers get early feedback.
    if let Ok(v) = std::env::var("CORD_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CordError::Config(format!("CORD_THREADS must be a number, got '{}'", v)))?;
        if n == 0 {
            return Err(CordError::Config("CORD_THREADS must be positive".into()));
        }
    }

    let config = resolve_config(&cli)?;
    prepare_out(&cli, &config)?;
    let out = cli.out.clone();

    match &cli.command {
        Command::GenerateData => {
            let data = build_datasets(&config)?;
            write_jsonl(&out.join("train.jsonl"), &data.train)?;
            write_jsonl(&out.join("val.jsonl"), &data.val)?;
            write_jsonl(&out.join("eval.jsonl"), &data.eval)?;
            write_jsonl(&out.join("aux.jsonl"), &data.aux)?;
            println!(
                "wrote {} train / {} val / {} eval / {} aux records to {}",
                data.train.len(),
                data.val.len(),
                data.eval.len(),
                data.aux.len(),
                out.display()
            );
        }
        Command::Pretrain => {
            let data = build_datasets(&config)?;
            let params: ModelParams<TrainScalar> = pretrain(&config, &data, &out)?;
            let eval_n = config.eval_examples.min(data.eval.len());
            let text = cord::analysis::evaluate(
                &params,
                &data.eval[..eval_n],
                false,
                config.max_rollout_len,
            )?;
            let audio = cord::analysis::evaluate(
                &params,
                &data.eval[..eval_n],
                true,
                config.max_rollout_len,
            )?;
            println!(
                "pretrained {} steps; text acc {:.1}, audio acc {:.1}, gap {:.1}; checkpoint at {}",
                config.pretrain_steps,
                text,
                audio,
                text - audio,
                out.join("base.ckpt").display()
            );
        }
        Command::Train { base } => {
            let data = build_datasets(&config)?;
            let params = load_or_pretrain(&config, &data, &out, base)?;
            let result = run_experiment(&config, &data, &params, &out)?;
            let last = result.checkpoints.last();
            let report = gap_report(
                &result.base,
                &last
                    .map(|(_, e)| vec![e.clone()])
                    .unwrap_or_default(),
            )?;
            std::fs::write(out.join("gap_report.csv"), report.to_csv())
                .map_err(io_err(&out.join("gap_report.csv")))?;
            match last {
                Some((step, e)) => println!(
                    "{} finished at step {}: audio acc {:.1} (base {:.1}), gap {:.1} (base {:.1})",
                    config.method.name(),
                    step,
                    e.acc_audio,
                    result.base.acc_audio,
                    result.base.acc_text - e.acc_audio,
                    report.base_gap
                ),
                None => println!(
                    "{} finished {} steps (no checkpoint steps within budget)",
                    config.method.name(),
                    config.max_steps
                ),
            }
        }
        Command::Eval { checkpoint: ckpt } => {
            let data = build_datasets(&config)?;
            let params: ModelParams<TrainScalar> =
                checkpoint::load(config.model_config(), ckpt)?;
            let eval_n = config.eval_examples.min(data.eval.len());
            let aux_n = config.eval_examples.min(data.aux.len());
            let eval = MethodEval {
                method: config.method.name().to_string(),
                acc_text: cord::analysis::evaluate(
                    &params,
                    &data.eval[..eval_n],
                    false,
                    config.max_rollout_len,
                )?,
                acc_audio: cord::analysis::evaluate(
                    &params,
                    &data.eval[..eval_n],
                    true,
                    config.max_rollout_len,
                )?,
                acc_aux: cord::analysis::evaluate_aux(
                    &params,
                    &data.aux[..aux_n],
                    cord::data::aux_label_token,
                )?,
            };
            let csv = format!(
                "method,acc_text,acc_audio,acc_aux\n{},{:.4},{:.4},{:.4}\n",
                eval.method, eval.acc_text, eval.acc_audio, eval.acc_aux
            );
            std::fs::write(out.join("eval.csv"), &csv).map_err(io_err(&out.join("eval.csv")))?;
            println!(
                "text acc {:.1}, audio acc {:.1}, aux acc {:.1}",
                eval.acc_text, eval.acc_audio, eval.acc_aux
            );
        }
        Command::Analyze {
            checkpoint: ckpt,
            percentile: q,
            bins,
        } => {
            let data = build_datasets(&config)?;
            let params: ModelParams<TrainScalar> =
                checkpoint::load(config.model_config(), ckpt)?;
            let n = config.eval_examples.min(data.eval.len());
            let records = collect_kl_records(&params, &data.eval[..n], &config)?;
            if records.is_empty() {
                return Err(CordError::InvalidArgument(
                    "no divergence records collected (all rollouts empty)".into(),
                ));
            }
            write_jsonl(&out.join("kl_records.jsonl"), &records)?;
            let values: Vec<f64> = records.iter().map(|r| r.d).collect();
            let hist = histogram(&values, *bins)?;
            let mut hist_csv = String::from("bin_edge,count\n");
            for (edge, count) in &hist {
                hist_csv.push_str(&format!("{:.6e},{}\n", edge, count));
            }
            std::fs::write(out.join("kl_histogram.csv"), &hist_csv)
                .map_err(io_err(&out.join("kl_histogram.csv")))?;
            let p = percentile(&values, *q)?;
            let r = position_correlation(&records)?;
            let (mean, median) = skew_summary(&values)?;
            let (high, low) = token_frequency_by_kl(&records, *q)?;
            let mut tok_csv = String::from("region,token,count\n");
            for (t, c) in &high {
                tok_csv.push_str(&format!("high,{},{}\n", t, c));
            }
            for (t, c) in &low {
                tok_csv.push_str(&format!("low,{},{}\n", t, c));
            }
            std::fs::write(out.join("token_frequency.csv"), &tok_csv)
                .map_err(io_err(&out.join("token_frequency.csv")))?;
            let stats = format!(
                "records,{}\npercentile_rank,{}\npercentile_value,{:.6}\nposition_pearson_r,{:.6}\nmean_d,{:.6}\nmedian_d,{:.6}\nright_skewed,{}\n",
                records.len(),
                q,
                p,
                r,
                mean,
                median,
                mean > median
            );
            std::fs::write(out.join("kl_stats.csv"), &stats)
                .map_err(io_err(&out.join("kl_stats.csv")))?;
            println!(
                "{} records; {}th-percentile divergence {:.4}; position r {:.3}; mean {:.4} vs median {:.4}",
                records.len(),
                q,
                p,
                r,
                mean,
                median
            );
        }
        Command::GradCheck => {
            let mut all_ok = true;
            let mut lines = String::from("precision,loss,max_rel_err,tolerance,pass\n");
            for (precision, reports, tol) in [
                ("f64", check_model_losses::<CheckScalar>(1e-4)?, CheckScalar::GRAD_TOL),
                ("f32", check_model_losses::<TrainScalar>(3e-3)?, TrainScalar::GRAD_TOL),
            ] {
                for (name, report) in reports {
                    let ok = report.passes(tol);
                    all_ok &= ok;
                    println!(
                        "{} {}: max rel err {:.3e} (tol {:.0e}) {}",
                        precision,
                        name,
                        report.max_rel_err,
                        tol,
                        if ok { "PASS" } else { "FAIL" }
                    );
                    lines.push_str(&format!(
                        "{},{},{:.6e},{:.0e},{}\n",
                        precision, name, report.max_rel_err, tol, ok
                    ));
                }
            }
            std::fs::write(out.join("grad_check.csv"), &lines)
                .map_err(io_err(&out.join("grad_check.csv")))?;
            if !all_ok {
                return Err(CordError::InvalidArgument(
                    "gradient check failed; see grad_check.csv".into(),
                ));
            }
        }
        Command::Sweep { param, values } => {
            if param != "alpha_beta" {
                return Err(CordError::Config(format!(
                    "unsupported sweep parameter '{}' (only alpha_beta)",
                    param
                )));
            }
            let vals: Vec<f64> = values
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| {
                        CordError::Config(format!("invalid sweep value '{}'", s))
                    })
                })
                .collect::<Result<_>>()?;
            let data = build_datasets(&config)?;
            let params = load_or_pretrain(&config, &data, &out, &None)?;
            let csv = sweep(&config, &data, &params, &vals, &out)?;
            println!("sweep complete:\n{}", csv);
        }
    }
    Ok(())
}

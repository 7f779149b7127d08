//! End-to-end acceptance suite. Each numbered criterion prints exactly one
//! PASS/FAIL line; the test fails if any criterion fails. Criteria 5-8 run
//! the full pipeline (pretraining plus four alignment arms) over three seeds
//! and dominate the runtime. Run with `--nocapture` to stream the lines.

use cord::analysis::{
    collect_kl_records, evaluate, evaluate_aux, histogram, pearson, percentile, skew_summary,
    token_frequency_by_kl, KlRecord, MethodEval,
};
use cord::config::{Method, RunConfig};
use cord::data::aux_label_token;
use cord::gradcheck::check_model_losses;
use cord::model::{Condition, ModelParams};
use cord::rollout::{sample_group, DecodeMode};
use cord::seq_align::{advantages, sequence_loss, RolloutGroup};
use cord::token_align::{combine_weights, positional_weights, topk_weights, uniform_kl};
use cord::trainer::{build_datasets, pretrain, run_experiment, Datasets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const SEEDS: [u64; 3] = [11, 23, 37];

fn report(results: &mut Vec<bool>, n: usize, name: &str, ok: bool, detail: String) {
    println!(
        "[{}] criterion {} ({}): {}",
        if ok { "PASS" } else { "FAIL" },
        n,
        name,
        detail
    );
    results.push(ok);
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    logits.iter().map(|&l| l - m - z.ln()).collect()
}

fn criterion_1(results: &mut Vec<bool>) {
    let t0 = Instant::now();
    let r64 = check_model_losses::<f64>(1e-4).expect("f64 grad check");
    let r32 = check_model_losses::<f32>(3e-3).expect("f32 grad check");
    let worst64 = r64.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let worst32 = r32.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    let ok = worst64 <= 1e-5 && worst32 <= 1e-3 && secs < 120.0;
    report(
        results,
        1,
        "gradient fidelity",
        ok,
        format!(
            "max rel err f64 {:.2e} (tol 1e-5), f32 {:.2e} (tol 1e-3), {:.1}s (< 120s)",
            worst64, worst32, secs
        ),
    );
}

fn criterion_2(results: &mut Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut nonneg = true;
    for _ in 0..1000 {
        let v = rng.gen_range(2..=64usize);
        let s_logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let t_logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let s = log_softmax(&s_logits);
        let t = log_softmax(&t_logits);
        // naive double-loop oracle over the vocabulary
        let mut oracle = 0.0;
        for i in 0..v {
            oracle += s[i].exp() * (s[i] - t[i]);
        }
        let got: f64 = cord::token_align::reverse_kl_step(&s, &t);
        worst = worst.max((got - oracle).abs());
        nonneg &= got >= -1e-12;
        // zero iff equal
        let self_kl: f64 = cord::token_align::reverse_kl_step(&s, &s);
        nonneg &= self_kl.abs() <= 1e-12;
        nonneg &= got > 1e-12 || s == t;
    }
    let ok = worst <= 1e-12 && nonneg;
    report(
        results,
        2,
        "divergence oracles",
        ok,
        format!(
            "1000 pairs, max |kl - oracle| {:.2e} (tol 1e-12), non-negativity and zero-iff-equal {}",
            worst,
            if nonneg { "hold" } else { "VIOLATED" }
        ),
    );
}

fn criterion_3(results: &mut Vec<bool>) {
    // enumerated positional example
    let pos: Vec<f64> = positional_weights(5, 2.0);
    let pos_ok = pos == vec![2.0, 1.75, 1.5, 1.25, 1.0];
    // enumerated combined example: D = [1, 2], K = 1, alpha = beta = 2
    let d = [1.0f64, 2.0];
    let w = combine_weights(&topk_weights(&d, 1, 2.0), &positional_weights(2, 2.0)).unwrap();
    let hand_ok = w == vec![2.0, 2.0]
        && w.iter().zip(&d).map(|(w, d)| w * d).sum::<f64>() == 6.0;
    // alpha = beta = 1 reduces to the uniform mean bit-for-bit
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut uniform_ok = true;
    for _ in 0..500 {
        let t = rng.gen_range(1..=40usize);
        let d: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..5.0)).collect();
        let k = rng.gen_range(0..=t);
        let w = combine_weights(&topk_weights(&d, k, 1.0), &positional_weights(t, 1.0)).unwrap();
        let weighted: f64 = w.iter().zip(&d).map(|(&w, &d)| w * d).sum::<f64>() / t as f64;
        let uniform: f64 = uniform_kl(&d);
        uniform_ok &= weighted.to_bits() == uniform.to_bits();
    }
    let ok = pos_ok && hand_ok && uniform_ok;
    report(
        results,
        3,
        "weighting exactness",
        ok,
        format!(
            "beta=2,T=5 example {}, D=[1,2] hand example {}, alpha=beta=1 bit-identical to uniform on 500 random D {}",
            pos_ok, hand_ok, uniform_ok
        ),
    );
}

fn criterion_4(results: &mut Vec<bool>) {
    // advantages sum to zero for every binary reward pattern
    let mut sum_ok = true;
    let mut worst_sum = 0.0f64;
    for n in [2usize, 4, 8] {
        for pattern in 0..(1u32 << n) {
            let rewards: Vec<f64> = (0..n).map(|i| ((pattern >> i) & 1) as f64).collect();
            let s: f64 = advantages(&rewards).unwrap().iter().sum();
            worst_sum = worst_sum.max(s.abs());
            sum_ok &= s.abs() <= 1e-12;
        }
    }

    // all-equal rewards give exactly zero loss and zero gradients
    let mut c = RunConfig::default();
    c.n_examples = 60;
    c.aux_examples = 10;
    c.pretrain_steps = 1;
    let data = build_datasets(&c).unwrap();
    let params: ModelParams<f64> =
        ModelParams::init(c.model_config(), 99).expect("model init");
    let rec = &data.train[0];
    let cond = Condition::audio(rec.x_audio.clone());
    let trajs = sample_group(&params, &cond, 4, DecodeMode::Temperature(1.0), 12, 5).unwrap();
    let mut group = RolloutGroup::new(trajs, rec.target.clone()).unwrap();
    group.rewards = vec![1.0; 4];
    group.advantages = vec![0.0; 4];
    let mut tape = cord::tape::Tape::new();
    let vars = params.vars(&mut tape).unwrap();
    let loss = sequence_loss(&params, &mut tape, &vars, &cond, &group, false).unwrap();
    let loss_val = tape.value(loss).scalar_value();
    let grads = tape.backward(loss).unwrap();
    let grad_zero = vars
        .leaves
        .iter()
        .all(|&v| grads.get(v, &tape).data.iter().all(|&g| g == 0.0));
    let equal_ok = loss_val == 0.0 && grad_zero;

    // reward-shift invariance of the loss value
    let trajs2 = sample_group(&params, &cond, 4, DecodeMode::Temperature(1.0), 12, 6).unwrap();
    let mut g1 = RolloutGroup::new(trajs2, rec.target.clone()).unwrap();
    g1.rewards = vec![1.0, 0.0, 0.0, 1.0];
    g1.advantages = advantages(&g1.rewards).unwrap();
    let mut tape1 = cord::tape::Tape::new();
    let vars1 = params.vars(&mut tape1).unwrap();
    let l1 = sequence_loss(&params, &mut tape1, &vars1, &cond, &g1, false).unwrap();
    let v1 = tape1.value(l1).scalar_value();
    let shifted: Vec<f64> = g1.rewards.iter().map(|r| r + 7.5).collect();
    g1.advantages = advantages(&shifted).unwrap();
    let mut tape2 = cord::tape::Tape::new();
    let vars2 = params.vars(&mut tape2).unwrap();
    let l2 = sequence_loss(&params, &mut tape2, &vars2, &cond, &g1, false).unwrap();
    let v2 = tape2.value(l2).scalar_value();
    let shift_ok = (v1 - v2).abs() <= 1e-10;

    let ok = sum_ok && equal_ok && shift_ok;
    report(
        results,
        4,
        "group-relative advantage algebra",
        ok,
        format!(
            "advantage sums |max| {:.1e} over all patterns N in {{2,4,8}} (tol 1e-12), all-equal rewards zero loss+grad {}, shift invariance |dL| {:.1e} (tol 1e-10)",
            worst_sum, equal_ok, (v1 - v2).abs()
        ),
    );
}

struct SeedOutcome {
    base: MethodEval,
    // method name -> final eval
    finals: Vec<(String, MethodEval)>,
    cord_checkpoints: Vec<(usize, MethodEval)>,
    grpo_checkpoints: Vec<(usize, MethodEval)>,
    cord_aux_final: f64,
}

fn run_seed(seed: u64, dir: &std::path::Path) -> SeedOutcome {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.validate().unwrap();
    let data: Datasets = build_datasets(&c).unwrap();
    let base: ModelParams<f32> = pretrain(&c, &data, dir).unwrap();
    let eval_n = c.eval_examples.min(data.eval.len());
    let base_eval = MethodEval {
        method: "base".into(),
        acc_text: evaluate(&base, &data.eval[..eval_n], false, c.max_rollout_len).unwrap(),
        acc_audio: evaluate(&base, &data.eval[..eval_n], true, c.max_rollout_len).unwrap(),
        acc_aux: evaluate_aux(&base, &data.aux, aux_label_token).unwrap(),
    };
    let mut finals = Vec::new();
    let mut cord_ckpts = Vec::new();
    let mut grpo_ckpts = Vec::new();
    let mut cord_aux_final = 0.0;
    for method in [Method::Cord, Method::Fkl, Method::Sft, Method::Grpo] {
        c.method = method;
        let sub = dir.join(method.name());
        std::fs::create_dir_all(&sub).unwrap();
        let r = run_experiment(&c, &data, &base, &sub).unwrap();
        let last = r.checkpoints.last().expect("checkpoint evals").1.clone();
        if method == Method::Cord {
            cord_ckpts = r.checkpoints.clone();
            cord_aux_final = last.acc_aux;
        }
        if method == Method::Grpo {
            grpo_ckpts = r.checkpoints.clone();
        }
        finals.push((method.name().to_string(), last));
    }
    SeedOutcome {
        base: base_eval,
        finals,
        cord_checkpoints: cord_ckpts,
        grpo_checkpoints: grpo_ckpts,
        cord_aux_final,
    }
}

fn criteria_5_to_8(results: &mut Vec<bool>) {
    let tmp = tempfile::TempDir::new().unwrap();
    let mut outcomes = Vec::new();
    for &seed in &SEEDS {
        let dir = tmp.path().join(format!("seed{}", seed));
        std::fs::create_dir_all(&dir).unwrap();
        let o = run_seed(seed, &dir);
        println!(
            "  seed {}: base text {:.1} audio {:.1} aux {:.1}; finals: {}",
            seed,
            o.base.acc_text,
            o.base.acc_audio,
            o.base.acc_aux,
            o.finals
                .iter()
                .map(|(m, e)| format!("{} audio {:.1}", m, e.acc_audio))
                .collect::<Vec<_>>()
                .join(", ")
        );
        outcomes.push(o);
    }

    // 5: median base gap >= 15
    let gaps: Vec<f64> = outcomes
        .iter()
        .map(|o| o.base.acc_text - o.base.acc_audio)
        .collect();
    let med_gap = median(&mut gaps.clone());
    report(
        results,
        5,
        "gap induction",
        med_gap >= 15.0,
        format!(
            "median base text-audio gap {:.1} points over seeds {:?} (need >= 15)",
            med_gap, SEEDS
        ),
    );

    // 6: cord median relative reduction >= 30% and >= fkl, sft
    let reduction = |o: &SeedOutcome, name: &str| -> f64 {
        let base_gap = o.base.acc_text - o.base.acc_audio;
        let m = &o.finals.iter().find(|(n, _)| n == name).unwrap().1;
        let gap = o.base.acc_text - m.acc_audio;
        100.0 * (base_gap - gap) / base_gap
    };
    let med = |name: &str| -> f64 {
        let mut v: Vec<f64> = outcomes.iter().map(|o| reduction(o, name)).collect();
        median(&mut v)
    };
    let (rc, rf, rs) = (med("cord"), med("fkl"), med("sft"));
    report(
        results,
        6,
        "gap reduction",
        rc >= 30.0 && rc >= rf && rc >= rs,
        format!(
            "median relative gap reduction: cord {:.1}% (need >= 30%), fkl {:.1}%, sft {:.1}%",
            rc, rf, rs
        ),
    );

    // 7: cord audio at checkpoints after step 500 never > 2 points below base
    let mut stable = true;
    let mut worst_drop = f64::NEG_INFINITY;
    for o in &outcomes {
        for (step, e) in &o.cord_checkpoints {
            if *step <= 500 {
                continue;
            }
            let drop = o.base.acc_audio - e.acc_audio;
            worst_drop = worst_drop.max(drop);
            stable &= drop <= 2.0;
        }
    }
    for (i, o) in outcomes.iter().enumerate() {
        let traj: Vec<String> = o
            .grpo_checkpoints
            .iter()
            .map(|(s, e)| format!("step {} audio {:.1}", s, e.acc_audio))
            .collect();
        println!("  grpo trajectory seed {}: {}", SEEDS[i], traj.join(", "));
    }
    report(
        results,
        7,
        "stability",
        stable,
        format!(
            "cord audio worst drop below base after step 500: {:.1} points (tol 2.0); grpo trajectories logged above",
            worst_drop
        ),
    );

    // 8: cord auxiliary accuracy within 2 points of base (median)
    let mut aux_drops: Vec<f64> = outcomes
        .iter()
        .map(|o| o.base.acc_aux - o.cord_aux_final)
        .collect();
    let med_drop = median(&mut aux_drops);
    report(
        results,
        8,
        "auxiliary retention",
        med_drop <= 2.0,
        format!(
            "median auxiliary accuracy drop under cord {:.1} points (tol 2.0)",
            med_drop
        ),
    );

    // criterion 9's skew check needs a pretrained model; reuse the last seed
    let skew_ok = {
        let mut c = RunConfig::default();
        c.seed = *SEEDS.last().unwrap();
        let data = build_datasets(&c).unwrap();
        let dir = tmp.path().join("skew");
        std::fs::create_dir_all(&dir).unwrap();
        let base: ModelParams<f32> =
            cord::checkpoint::load(c.model_config(), &tmp.path().join(format!("seed{}", c.seed)).join("base.ckpt"))
                .unwrap();
        let n = 150.min(data.eval.len());
        let recs = collect_kl_records(&base, &data.eval[..n], &c).unwrap();
        let d: Vec<f64> = recs.iter().map(|r| r.d).collect();
        let (mean, median_v) = skew_summary(&d).unwrap();
        println!(
            "  post-pretraining divergence: mean {:.4}, median {:.4} over {} records",
            mean,
            median_v,
            d.len()
        );
        mean > median_v
    };
    // stash for criterion 9
    SKEW_OK.with(|s| s.set(Some(skew_ok)));
}

thread_local! {
    static SKEW_OK: std::cell::Cell<Option<bool>> = const { std::cell::Cell::new(None) };
}

fn criterion_9(results: &mut Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let records: Vec<KlRecord> = (0..10_000)
        .map(|i| {
            let traj_len = rng.gen_range(1..=24usize);
            KlRecord {
                prompt_id: i as u64 / 8,
                position: rng.gen_range(1..=traj_len),
                traj_len,
                d: (rng.gen_range(-2.0..2.0f64)).exp(),
                token: rng.gen_range(0..37usize),
                correct: rng.gen_bool(0.5),
            }
        })
        .collect();
    let d: Vec<f64> = records.iter().map(|r| r.d).collect();

    // percentile vs full-sort nearest-rank oracle
    let mut sorted = d.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut pct_ok = true;
    for q in [1.0, 5.0, 25.0, 50.0, 80.0, 95.0, 100.0] {
        let rank = ((q / 100.0 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        pct_ok &= percentile(&d, q).unwrap() == sorted[rank - 1];
    }

    // histogram vs brute-force counts
    let bins = 32;
    let hist = histogram(&d, bins).unwrap();
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let width = (hi - lo) / bins as f64;
    let mut oracle = vec![0usize; bins];
    for &v in &d {
        let mut b = ((v - lo) / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        oracle[b] += 1;
    }
    let hist_ok = hist.iter().map(|(_, c)| *c).eq(oracle.iter().copied())
        && hist.iter().map(|(_, c)| c).sum::<usize>() == d.len();

    // Pearson vs direct two-pass formula
    let x: Vec<f64> = records.iter().map(|r| r.position as f64).collect();
    let mx = x.iter().sum::<f64>() / x.len() as f64;
    let md = d.iter().sum::<f64>() / d.len() as f64;
    let (mut sxy, mut sxx, mut sdd) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (d[i] - md);
        sxx += (x[i] - mx) * (x[i] - mx);
        sdd += (d[i] - md) * (d[i] - md);
    }
    let r_oracle = sxy / (sxx * sdd).sqrt();
    let r = pearson(&x, &d).unwrap();
    let pearson_ok = (r - r_oracle).abs() <= 1e-12;

    // token tallies vs hash-map oracle
    let q = 80.0;
    let threshold = percentile(&d, q).unwrap();
    let mut high_oracle: std::collections::HashMap<usize, usize> = Default::default();
    let mut low_oracle: std::collections::HashMap<usize, usize> = Default::default();
    for rec in &records {
        *if rec.d > threshold {
            high_oracle.entry(rec.token)
        } else {
            low_oracle.entry(rec.token)
        }
        .or_insert(0) += 1;
    }
    let (high, low) = token_frequency_by_kl(&records, q).unwrap();
    let tally_matches = |got: &[(usize, usize)], want: &std::collections::HashMap<usize, usize>| {
        got.len() == want.len() && got.iter().all(|(t, c)| want.get(t) == Some(c))
    };
    let tally_ok = tally_matches(&high, &high_oracle) && tally_matches(&low, &low_oracle);

    let skew_ok = SKEW_OK.with(|s| s.get()).expect("skew computed in criteria 5-8 block");
    let ok = pct_ok && hist_ok && pearson_ok && tally_ok && skew_ok;
    report(
        results,
        9,
        "analysis pipeline",
        ok,
        format!(
            "10k records: percentile {}, histogram {}, pearson {}, token tallies {}, post-pretraining right-skew {}",
            pct_ok, hist_ok, pearson_ok, tally_ok, skew_ok
        ),
    );
}

fn criterion_10(results: &mut Vec<bool>) {
    let bin = env!("CARGO_BIN_EXE_cord");
    let tmp = tempfile::TempDir::new().unwrap();
    let overrides = [
        "n_examples=200",
        "aux_examples=40",
        "pretrain_steps=80",
        "max_steps=30",
        "checkpoints=10,30",
        "eval_examples=40",
        "method=cord",
    ];
    let run = |out: &std::path::Path| {
        let mut cmd = std::process::Command::new(bin);
        cmd.arg("--out").arg(out).arg("--seed").arg("5");
        for o in &overrides {
            cmd.arg("--override").arg(o);
        }
        cmd.arg("train");
        let st = cmd.output().expect("cli run");
        assert!(
            st.status.success(),
            "cli train failed: {}",
            String::from_utf8_lossy(&st.stderr)
        );
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);
    let mut identical = true;
    let mut compared = 0usize;
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "timing.csv" {
            continue; // wall time is explicitly outside the determinism contract
        }
        let fa = std::fs::read(a.join(&name)).unwrap();
        let fb = std::fs::read(b.join(&name)).unwrap();
        identical &= fa == fb;
        compared += 1;
    }
    let ok = identical && compared >= 5;
    report(
        results,
        10,
        "determinism",
        ok,
        format!(
            "two identical CLI train runs: {} artifacts byte-compared, identical: {}",
            compared, identical
        ),
    );
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    criterion_1(&mut results);
    criterion_2(&mut results);
    criterion_3(&mut results);
    criterion_4(&mut results);
    criteria_5_to_8(&mut results);
    criterion_9(&mut results);
    criterion_10(&mut results);
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, &ok)| !ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {:?}", failed);
}

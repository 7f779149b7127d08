//! Evaluation and divergence statistics: per-modality exact-match accuracy,
//! the modality-gap report, and the descriptive statistics pipeline over
//! per-step divergence records (histogram, nearest-rank percentiles, Pearson
//! position correlation, token-frequency tallies).

use crate::config::RunConfig;
use crate::data::{AuxRecord, DataRecord};
use crate::error::{CordError, Result};
use crate::model::{Condition, ModelParams};
use crate::rollout::{sample_rollout, DecodeMode};
use crate::scalar::Scalar;
use crate::seq_align::extract_answer;

/// Exact-match accuracy (percentage) of greedy decoding under the given
/// conditioning. The predicted answer is the token after the ANSWER marker.
pub fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    records: &[DataRecord],
    use_audio: bool,
    max_len: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Err(CordError::InvalidArgument(
            "evaluation needs at least one example".into(),
        ));
    }
    let mut correct = 0usize;
    for rec in records {
        let cond = if use_audio {
            Condition::audio(rec.x_audio.clone())
        } else {
            Condition::text(rec.x_text.clone())
        };
        let traj = sample_rollout(params, &cond, None, DecodeMode::Greedy, max_len, 0)?;
        if extract_answer(&traj.tokens) == Some(rec.answer as usize) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / records.len() as f64)
}

/// Accuracy (percentage) on the auxiliary audio-only labeling task: greedy
/// decode one token and compare against the label token.
pub fn evaluate_aux<F: Scalar>(
    params: &ModelParams<F>,
    records: &[AuxRecord],
    label_token: impl Fn(&str) -> Result<usize>,
) -> Result<f64> {
    if records.is_empty() {
        return Err(CordError::InvalidArgument(
            "auxiliary evaluation needs at least one example".into(),
        ));
    }
    let mut correct = 0usize;
    for rec in records {
        let cond = Condition::audio(rec.x_audio.clone());
        let traj = sample_rollout(params, &cond, None, DecodeMode::Greedy, 1, 0)?;
        if traj.tokens.first().copied() == Some(label_token(&rec.label)?) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / records.len() as f64)
}

/// One method's evaluation snapshot.
#[derive(Debug, Clone)]
pub struct MethodEval {
    pub method: String,
    pub acc_text: f64,
    pub acc_audio: f64,
    pub acc_aux: f64,
}

/// Gap table: per-method audio gap relative to the base model's frozen
/// text accuracy, plus the relative gap reduction against the base gap.
#[derive(Debug, Clone)]
pub struct GapReport {
    pub base_text: f64,
    pub base_gap: f64,
    /// (method, gap, relative reduction in percent)
    pub rows: Vec<(String, f64, f64)>,
}

pub fn gap_report(base: &MethodEval, methods: &[MethodEval]) -> Result<GapReport> {
    let base_gap = base.acc_text - base.acc_audio;
    let rows = methods
        .iter()
        .map(|m| {
            let gap = base.acc_text - m.acc_audio;
            let reduction = if base_gap.abs() > 0.0 {
                100.0 * (base_gap - gap) / base_gap
            } else {
                0.0
            };
            (m.method.clone(), gap, reduction)
        })
        .collect();
    Ok(GapReport {
        base_text: base.acc_text,
        base_gap,
        rows,
    })
}

impl GapReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,acc_text_base,gap,relative_reduction_pct\n");
        for (m, gap, red) in &self.rows {
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4}\n",
                m, self.base_text, gap, red
            ));
        }
        s
    }
}

/// One per-step divergence observation used by the statistics pipeline.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct KlRecord {
    pub prompt_id: u64,
    /// 1-based step position within the trajectory.
    pub position: usize,
    pub traj_len: usize,
    pub d: f64,
    pub token: usize,
    pub correct: bool,
}

/// Nearest-rank percentile: the smallest value such that at least q percent
/// of the data is <= it.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CordError::InvalidArgument("percentile of empty data".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(CordError::InvalidArgument(format!(
            "percentile rank {} outside [0, 100]",
            q
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let rank = ((q / 100.0 * n as f64).ceil() as usize).max(1).min(n);
    Ok(sorted[rank - 1])
}

/// Equal-width histogram over [min, max]; the top edge is inclusive so every
/// value lands in exactly one bin.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<(f64, usize)>> {
    if values.is_empty() || bins == 0 {
        return Err(CordError::InvalidArgument(
            "histogram needs data and at least one bin".into(),
        ));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let mut b = ((v - lo) / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, c))
        .collect())
}

/// Pearson correlation between step position and divergence.
pub fn position_correlation(records: &[KlRecord]) -> Result<f64> {
    pearson(
        &records.iter().map(|r| r.position as f64).collect::<Vec<_>>(),
        &records.iter().map(|r| r.d).collect::<Vec<_>>(),
    )
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(CordError::InvalidArgument(
            "correlation needs two same-length series of length >= 2".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CordError::InvalidArgument(
            "correlation undefined under zero variance".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Frequency-ranked token tallies for records above (high) and at-or-below
/// (low) the divergence threshold at the given percentile.
pub fn token_frequency_by_kl(
    records: &[KlRecord],
    q: f64,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let values: Vec<f64> = records.iter().map(|r| r.d).collect();
    let threshold = percentile(&values, q)?;
    let mut high: std::collections::BTreeMap<usize, usize> = Default::default();
    let mut low: std::collections::BTreeMap<usize, usize> = Default::default();
    for r in records {
        let bucket = if r.d > threshold { &mut high } else { &mut low };
        *bucket.entry(r.token).or_insert(0) += 1;
    }
    let rank = |m: std::collections::BTreeMap<usize, usize>| {
        let mut v: Vec<(usize, usize)> = m.into_iter().collect();
        // sort by count descending, token id ascending for determinism
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    };
    Ok((rank(high), rank(low)))
}

/// Mean and median of the divergence values; right skew is mean > median.
pub fn skew_summary(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(CordError::InvalidArgument("skew of empty data".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let median = percentile(values, 50.0)?;
    Ok((mean, median))
}

/// Collect divergence records by rolling out the policy on eval prompts.
pub fn collect_kl_records<F: Scalar>(
    params: &ModelParams<F>,
    records: &[DataRecord],
    config: &RunConfig,
) -> Result<Vec<KlRecord>> {
    let mut out = Vec::new();
    for rec in records {
        let audio = Condition::audio(rec.x_audio.clone());
        let text = Condition::text(rec.x_text.clone());
        let traj = sample_rollout(
            params,
            &audio,
            Some(&text),
            DecodeMode::Temperature(config.temp_token),
            config.max_rollout_len,
            crate::seeding::derive_seed(config.seed, &format!("kl-record-{}", rec.id)),
        )?;
        let d = crate::token_align::step_divergences(&traj)?;
        let correct = extract_answer(&traj.tokens) == Some(rec.answer as usize);
        let t_len = traj.len();
        for (i, (&tok, &dv)) in traj.tokens.iter().zip(&d).enumerate() {
            out.push(KlRecord {
                prompt_id: rec.id,
                position: i + 1,
                traj_len: t_len,
                d: dv.to_f64_(),
                token: tok,
                correct,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(position: usize, d: f64, token: usize) -> KlRecord {
        KlRecord {
            prompt_id: 0,
            position,
            traj_len: position,
            d,
            token,
            correct: false,
        }
    }

    #[test]
    fn nearest_rank_percentile_definition() {
        let vals: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(percentile(&vals, 80.0).unwrap(), 80.0);
        assert_eq!(percentile(&vals, 100.0).unwrap(), 100.0);
        assert_eq!(percentile(&vals, 0.0).unwrap(), 1.0);
        let same = vec![7.0; 10];
        for q in [0.0, 25.0, 50.0, 99.0] {
            assert_eq!(percentile(&same, q).unwrap(), 7.0);
        }
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 101.0).is_err());
    }

    #[test]
    fn percentile_matches_sort_oracle_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>() * 50.0).collect();
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prev = f64::NEG_INFINITY;
        for q in (0..=100).map(|v| v as f64) {
            let p = percentile(&vals, q).unwrap();
            let rank = ((q / 100.0 * sorted.len() as f64).ceil() as usize)
                .max(1)
                .min(sorted.len());
            assert_eq!(p, sorted[rank - 1]);
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn histogram_counts_sum_to_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>() * 3.0 - 1.0).collect();
        let h = histogram(&vals, 32).unwrap();
        assert_eq!(h.len(), 32);
        assert_eq!(h.iter().map(|(_, c)| c).sum::<usize>(), vals.len());
        // brute-force oracle for one bin
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / 32.0;
        let oracle = vals
            .iter()
            .filter(|&&v| v >= lo + 3.0 * width && v < lo + 4.0 * width)
            .count();
        assert_eq!(h[3].1, oracle);
        assert!(histogram(&[], 4).is_err());
        // constant data lands entirely in the first bin
        let flat = histogram(&[2.0; 5], 4).unwrap();
        assert_eq!(flat[0].1, 5);
    }

    #[test]
    fn pearson_known_cases() {
        // strictly decreasing divergence over position -> exactly -1
        let x: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 5.0 - 0.5 * v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y2).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&x, &vec![3.0; 10]).is_err());
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn pearson_matches_direct_formula_and_permutation_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let r = pearson(&x, &y).unwrap();
        assert!(r.abs() < 0.05, "independent series: r = {}", r);
        // naive direct-formula oracle
        let nf = n as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        let oracle = (nf * sxy - sx * sy)
            / ((nf * sxx - sx * sx).sqrt() * (nf * syy - sy * sy).sqrt());
        assert!((r - oracle).abs() < 1e-10);
    }

    #[test]
    fn position_correlation_uses_position_and_d() {
        let records: Vec<KlRecord> =
            (1..=20).map(|p| rec(p, 10.0 / p as f64, 0)).collect();
        let r = position_correlation(&records).unwrap();
        assert!(r < -0.5);
    }

    #[test]
    fn token_tallies_match_oracle() {
        // one dominant token everywhere: it tops both regions
        let mut records: Vec<KlRecord> = (0..100).map(|i| rec(1, i as f64, 9)).collect();
        records.push(rec(1, 1000.0, 3));
        let (high, low) = token_frequency_by_kl(&records, 50.0).unwrap();
        assert_eq!(low[0].0, 9);
        assert!(high.iter().any(|&(t, _)| t == 3));
        let total: usize = high.iter().chain(&low).map(|&(_, c)| c).sum();
        assert_eq!(total, records.len());
        // 100th percentile: nothing lies strictly above the maximum
        let (high, low) = token_frequency_by_kl(&records, 100.0).unwrap();
        assert!(high.is_empty());
        assert_eq!(low.iter().map(|&(_, c)| c).sum::<usize>(), records.len());
    }

    #[test]
    fn token_tallies_match_hashmap_oracle_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let records: Vec<KlRecord> = (0..10_000)
            .map(|_| rec(1 + rng.gen_range(0..30), rng.gen::<f64>(), rng.gen_range(0..37)))
            .collect();
        let q = 80.0;
        let thr = percentile(&records.iter().map(|r| r.d).collect::<Vec<_>>(), q).unwrap();
        let (high, low) = token_frequency_by_kl(&records, q).unwrap();
        let mut oracle_high = std::collections::HashMap::new();
        let mut oracle_low = std::collections::HashMap::new();
        for r in &records {
            let m = if r.d > thr { &mut oracle_high } else { &mut oracle_low };
            *m.entry(r.token).or_insert(0usize) += 1;
        }
        for (t, c) in &high {
            assert_eq!(oracle_high[t], *c);
        }
        for (t, c) in &low {
            assert_eq!(oracle_low[t], *c);
        }
        assert_eq!(high.len(), oracle_high.len());
        assert_eq!(low.len(), oracle_low.len());
        // ranked by count descending
        for w in high.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn gap_report_worked_examples() {
        let base = MethodEval {
            method: "base".into(),
            acc_text: 44.46,
            acc_audio: 29.21,
            acc_aux: 0.0,
        };
        let cord = MethodEval {
            method: "cord".into(),
            acc_text: 0.0,
            acc_audio: 38.06,
            acc_aux: 0.0,
        };
        let report = gap_report(&base, &[cord]).unwrap();
        assert!((report.rows[0].1 - 6.40).abs() < 1e-9);
        // parity: method audio accuracy equal to base text accuracy -> gap 0
        let parity = MethodEval {
            method: "m".into(),
            acc_text: 0.0,
            acc_audio: 44.46,
            acc_aux: 0.0,
        };
        let report = gap_report(&base, &[parity]).unwrap();
        assert!(report.rows[0].1.abs() < 1e-9);
    }

    #[test]
    fn relative_reduction_matches_published_arithmetic() {
        // base gap 15.25 shrinking to 8.90 is a 41.6% relative reduction
        let base = MethodEval {
            method: "base".into(),
            acc_text: 50.0,
            acc_audio: 50.0 - 15.25,
            acc_aux: 0.0,
        };
        let method = MethodEval {
            method: "m".into(),
            acc_text: 0.0,
            acc_audio: 50.0 - 8.90,
            acc_aux: 0.0,
        };
        let report = gap_report(&base, &[method]).unwrap();
        let red = report.rows[0].2;
        assert!((red - 41.639344262295083).abs() < 1e-9);
        assert_eq!(format!("{:.1}", red), "41.6");
    }

    #[test]
    fn skew_summary_flags_right_skew() {
        let values = vec![0.01, 0.02, 0.02, 0.03, 0.05, 5.0];
        let (mean, median) = skew_summary(&values).unwrap();
        assert!(mean > median);
    }
}

//! Synthetic paired-modality tasks: modular-arithmetic trace prediction.
//!
//! Each instance is a short arithmetic program over Z_m. The "text" encoding
//! is a lossless token stream; the "audio" encoding re-alphabets the same
//! symbols into frame tokens with seeded substitution/duplication noise and a
//! variable frames-per-symbol expansion, standing in for acoustic variability.

use crate::error::{CordError, Result};
use crate::seeding::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

/// Values 0..=31 cover every modulus the generator accepts.
pub const MAX_VALUE: usize = 32;

/// Text alphabet: 32 value symbols, three operators, one modulus marker.
pub const TEXT_VOCAB: usize = MAX_VALUE + 4;
pub const TOK_OP_ADD: usize = MAX_VALUE;
pub const TOK_OP_SUB: usize = MAX_VALUE + 1;
pub const TOK_OP_MUL: usize = MAX_VALUE + 2;
pub const TOK_MOD: usize = MAX_VALUE + 3;

/// Audio alphabet: one frame class per text symbol.
pub const AUDIO_VOCAB: usize = TEXT_VOCAB + 1;

/// Clean leading frame that marks an auxiliary-task input. It is appended
/// after noise, so a main-task audio stream can never start with it (the
/// main stream starts with the modulus marker or one of its confusables).
pub const TOK_AUX_MARKER: usize = TEXT_VOCAB;

/// Output vocabulary: value tokens, answer marker, EOS, three aux labels.
pub const OUT_VOCAB: usize = MAX_VALUE + 5;
pub const TOK_ANSWER: usize = MAX_VALUE;
pub const TOK_EOS: usize = MAX_VALUE + 1;
pub const TOK_AUX_LOW: usize = MAX_VALUE + 2;
pub const TOK_AUX_MID: usize = MAX_VALUE + 3;
pub const TOK_AUX_HIGH: usize = MAX_VALUE + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
}

impl OpKind {
    fn token(self) -> usize {
        match self {
            OpKind::Add => TOK_OP_ADD,
            OpKind::Sub => TOK_OP_SUB,
            OpKind::Mul => TOK_OP_MUL,
        }
    }

    fn from_token(t: usize) -> Option<Self> {
        match t {
            TOK_OP_ADD => Some(OpKind::Add),
            TOK_OP_SUB => Some(OpKind::Sub),
            TOK_OP_MUL => Some(OpKind::Mul),
            _ => None,
        }
    }

    fn apply(self, a: u32, b: u32, m: u32) -> u32 {
        match self {
            OpKind::Add => (a + b) % m,
            // keep subtraction in Z_m
            OpKind::Sub => (a + m - b % m) % m,
            OpKind::Mul => (a * b) % m,
        }
    }

    fn symbol(self) -> char {
        match self {
            OpKind::Add => '+',
            OpKind::Sub => '-',
            OpKind::Mul => '*',
        }
    }
}

/// A deterministic arithmetic program over Z_m with its evaluation trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticInstance {
    pub modulus: u32,
    pub first: u32,
    pub steps: Vec<(OpKind, u32)>,
    pub trace: Vec<u32>,
    pub answer: u32,
}

impl SemanticInstance {
    pub fn new(modulus: u32, first: u32, steps: Vec<(OpKind, u32)>) -> Result<Self> {
        if !(5..=31).contains(&modulus) {
            return Err(CordError::InvalidArgument(format!(
                "modulus {} outside [5, 31]",
                modulus
            )));
        }
        if steps.is_empty() || steps.len() > 8 {
            return Err(CordError::InvalidArgument(format!(
                "program length {} outside [1, 8]",
                steps.len()
            )));
        }
        let mut acc = first % modulus;
        let mut trace = Vec::with_capacity(steps.len());
        for &(op, operand) in &steps {
            acc = op.apply(acc, operand % modulus, modulus);
            trace.push(acc);
        }
        let answer = *trace.last().expect("non-empty trace");
        Ok(SemanticInstance {
            modulus,
            first,
            steps,
            trace,
            answer,
        })
    }

    /// Canonical human-readable form, also used as the split-disjointness key.
    pub fn program_string(&self) -> String {
        let mut s = format!("{}", self.first);
        for &(op, operand) in &self.steps {
            s.push_str(&format!(" {} {}", op.symbol(), operand));
        }
        s.push_str(&format!(" mod {}", self.modulus));
        s
    }
}

/// Parameters of the audio-like noisy encoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub p_sub: f64,
    pub p_dup: f64,
    pub frames_min: usize,
    pub frames_max: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_sub) || !(0.0..=1.0).contains(&self.p_dup) {
            return Err(CordError::InvalidArgument(
                "noise probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.frames_min < 1 || self.frames_max > 3 || self.frames_min > self.frames_max {
            return Err(CordError::InvalidArgument(
                "frames-per-symbol range must sit within [1, 3]".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            seed,
            ..self.clone()
        }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            p_sub: 0.08,
            p_dup: 0.1,
            frames_min: 1,
            frames_max: 1,
            seed: 0,
        }
    }
}

/// The two designated confusables of a frame class.
pub fn confusables(class: usize) -> [usize; 2] {
    [(class + 1) % TEXT_VOCAB, (class + 2) % TEXT_VOCAB]
}

pub fn generate_instance(length: usize, modulus: u32, seed: u64) -> Result<SemanticInstance> {
    if !(1..=8).contains(&length) {
        return Err(CordError::InvalidArgument(format!(
            "length {} outside [1, 8]",
            length
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..modulus);
    let steps = (0..length)
        .map(|_| {
            let op = match rng.gen_range(0..3u32) {
                0 => OpKind::Add,
                1 => OpKind::Sub,
                _ => OpKind::Mul,
            };
            (op, rng.gen_range(0..modulus))
        })
        .collect();
    SemanticInstance::new(modulus, first, steps)
}

/// Canonical text encoding: `MOD m v0 op1 v1 op2 v2 ...`.
pub fn encode_text(instance: &SemanticInstance) -> Vec<usize> {
    let mut out = Vec::with_capacity(text_token_count(instance.steps.len()));
    out.push(TOK_MOD);
    out.push(instance.modulus as usize);
    out.push(instance.first as usize);
    for &(op, operand) in &instance.steps {
        out.push(op.token());
        out.push(operand as usize);
    }
    out
}

/// Token count of the text encoding for a program with `len` steps.
pub fn text_token_count(len: usize) -> usize {
    3 + 2 * len
}

pub fn decode_text(tokens: &[usize]) -> Result<SemanticInstance> {
    let bad = |msg: &str| CordError::InvalidArgument(format!("decode_text: {}", msg));
    if tokens.len() < 3 || tokens[0] != TOK_MOD {
        return Err(bad("missing modulus marker"));
    }
    let modulus = tokens[1] as u32;
    let first = tokens[2] as u32;
    if tokens.len() % 2 == 0 {
        return Err(bad("truncated step list"));
    }
    let mut steps = Vec::new();
    let mut i = 3;
    while i < tokens.len() {
        let op = OpKind::from_token(tokens[i]).ok_or_else(|| bad("expected operator"))?;
        let operand = tokens[i + 1];
        if operand >= MAX_VALUE {
            return Err(bad("expected value token"));
        }
        steps.push((op, operand as u32));
        i += 2;
    }
    SemanticInstance::new(modulus, first, steps)
}

/// Noisy audio-like encoding of the same symbol stream.
pub fn encode_audio(instance: &SemanticInstance, noise: &NoiseSpec) -> Result<Vec<usize>> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut out = Vec::new();
    for &symbol in &encode_text(instance) {
        let frames = rng.gen_range(noise.frames_min..=noise.frames_max);
        for _ in 0..frames {
            let frame = if rng.gen_bool(noise.p_sub) {
                let pair = confusables(symbol);
                pair[rng.gen_range(0..2usize)]
            } else {
                symbol
            };
            out.push(frame);
            if rng.gen_bool(noise.p_dup) {
                out.push(frame);
            }
        }
    }
    Ok(out)
}

/// Target sequence: the evaluation trace, then `ANSWER a EOS`.
pub fn render_target(instance: &SemanticInstance) -> Vec<usize> {
    let mut out: Vec<usize> = instance.trace.iter().map(|&t| t as usize).collect();
    out.push(TOK_ANSWER);
    out.push(instance.answer as usize);
    out.push(TOK_EOS);
    out
}

/// Inverse of `render_target` minus the trailing EOS; used as a round-trip
/// oracle in tests.
pub fn parse_target(tokens: &[usize]) -> Result<(Vec<u32>, u32)> {
    let bad = |msg: &str| CordError::InvalidArgument(format!("parse_target: {}", msg));
    let pos = tokens
        .iter()
        .position(|&t| t == TOK_ANSWER)
        .ok_or_else(|| bad("missing ANSWER marker"))?;
    let trace = tokens[..pos]
        .iter()
        .map(|&t| {
            if t < MAX_VALUE {
                Ok(t as u32)
            } else {
                Err(bad("non-value token in trace"))
            }
        })
        .collect::<Result<Vec<u32>>>()?;
    let answer = *tokens.get(pos + 1).ok_or_else(|| bad("no answer token"))?;
    if answer >= MAX_VALUE {
        return Err(bad("answer is not a value token"));
    }
    Ok((trace, answer as u32))
}

/// One line of the line-delimited dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataRecord {
    pub id: u64,
    pub program: String,
    pub answer: u32,
    pub x_text: Vec<usize>,
    pub x_audio: Vec<usize>,
    pub target: Vec<usize>,
    pub split: String,
}

/// One line of the auxiliary audio-only dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxRecord {
    pub id: u64,
    pub x_audio: Vec<usize>,
    pub label: String,
}

pub const AUX_LABELS: [&str; 3] = ["low", "mid", "high"];

pub fn aux_label_token(label: &str) -> Result<usize> {
    match label {
        "low" => Ok(TOK_AUX_LOW),
        "mid" => Ok(TOK_AUX_MID),
        "high" => Ok(TOK_AUX_HIGH),
        other => Err(CordError::InvalidArgument(format!(
            "unknown aux label {}",
            other
        ))),
    }
}

/// Noise levels that define the three aux classes. Both the substitution
/// rate and the duplication rate carry class information.
pub fn aux_noise_for(label: &str, seed: u64) -> NoiseSpec {
    let (p_sub, p_dup) = match label {
        "low" => (0.02, 0.05),
        "mid" => (0.18, 0.25),
        _ => (0.45, 0.5),
    };
    NoiseSpec {
        p_sub,
        p_dup,
        frames_min: 1,
        frames_max: 2,
        seed,
    }
}

#[derive(Debug, Clone)]
pub struct DataGenConfig {
    pub n: usize,
    pub ratios: (f64, f64, f64),
    pub modulus: u32,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            n: 20_000,
            ratios: (0.8, 0.1, 0.1),
            modulus: 7,
            min_len: 1,
            max_len: 3,
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "eval"];

/// Deterministic paired dataset with split-disjoint programs.
pub fn generate_records(config: &DataGenConfig) -> Result<Vec<DataRecord>> {
    let (a, b, c) = config.ratios;
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(CordError::InvalidArgument(
            "split ratios must sum to 1".into(),
        ));
    }
    config.noise.validate()?;
    if config.min_len < 1 || config.max_len > 8 || config.min_len > config.max_len {
        return Err(CordError::InvalidArgument(
            "program length range must sit within [1, 8]".into(),
        ));
    }
    let n_train = (config.n as f64 * a).round() as usize;
    let n_val = (config.n as f64 * b).round() as usize;

    let mut seen: HashSet<String> = HashSet::new();
    let mut records = Vec::with_capacity(config.n);
    let mut attempt: u64 = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "data-lengths"));
    while records.len() < config.n {
        let id = records.len() as u64;
        let inst_seed = derive_seed(config.seed, &format!("instance-{}-{}", id, attempt));
        let length = rng.gen_range(config.min_len..=config.max_len);
        let instance = generate_instance(length, config.modulus, inst_seed)?;
        let key = instance.program_string();
        if !seen.insert(key.clone()) {
            attempt += 1;
            if attempt > 200 * config.n as u64 {
                return Err(CordError::InvalidArgument(
                    "could not generate enough distinct programs; widen the task space".into(),
                ));
            }
            continue;
        }
        let noise = config
            .noise
            .with_seed(derive_seed(config.seed, &format!("noise-{}", id)));
        let split = if records.len() < n_train {
            "train"
        } else if records.len() < n_train + n_val {
            "val"
        } else {
            "eval"
        };
        records.push(DataRecord {
            id,
            program: key,
            answer: instance.answer,
            x_text: encode_text(&instance),
            x_audio: encode_audio(&instance, &noise)?,
            target: render_target(&instance),
            split: split.to_string(),
        });
    }
    Ok(records)
}

/// Balanced, deterministic aux dataset (noise-level classification).
pub fn generate_aux(n: usize, seed: u64) -> Result<Vec<AuxRecord>> {
    let mut records = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let label = AUX_LABELS[(id % 3) as usize];
        let inst_seed = derive_seed(seed, &format!("aux-instance-{}", id));
        let instance = generate_instance(1 + (id % 3) as usize, 7, inst_seed)?;
        let noise = aux_noise_for(label, derive_seed(seed, &format!("aux-noise-{}", id)));
        let mut x_audio = vec![TOK_AUX_MARKER];
        x_audio.extend(encode_audio(&instance, &noise)?);
        records.push(AuxRecord {
            id,
            x_audio,
            label: label.to_string(),
        });
    }
    Ok(records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let as_str = |p: &Path| p.display().to_string();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CordError::io(as_str(parent), e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| CordError::io(as_str(path), e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| CordError::InvalidArgument(format!("serialize record: {}", e)))?;
        writeln!(w, "{}", line).map_err(|e| CordError::io(as_str(path), e))?;
    }
    w.flush().map_err(|e| CordError::io(as_str(path), e))?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let as_str = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| CordError::io(as_str.clone(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| CordError::io(as_str.clone(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CordError::InvalidArgument(format!("parse record: {}", e)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_instance_evaluates() {
        // 3 + 4 mod 7 = 0
        let inst = SemanticInstance::new(7, 3, vec![(OpKind::Add, 4)]).unwrap();
        assert_eq!(inst.answer, 0);
        assert_eq!(inst.trace, vec![0]);
    }


    #[test]
    fn aux_marker_is_unambiguous() {
        // aux inputs always start with the marker; main-task audio never can,
        // because its first frame is the modulus marker or a confusable of it
        let aux = generate_aux(30, 5).unwrap();
        for r in &aux {
            assert_eq!(r.x_audio[0], TOK_AUX_MARKER);
        }
        let firsts = confusables(TOK_MOD);
        for seed in 0..50u64 {
            let inst = generate_instance(2, 7, seed).unwrap();
            let noisy = NoiseSpec { p_sub: 0.9, seed, ..NoiseSpec::default() };
            let audio = encode_audio(&inst, &noisy).unwrap();
            assert!(audio[0] == TOK_MOD || firsts.contains(&audio[0]));
            assert_ne!(audio[0], TOK_AUX_MARKER);
        }
    }

    #[test]
    fn two_step_trace() {
        // 2 * 3 mod 5 = 1; 1 + 4 mod 5 = 0
        let inst =
            SemanticInstance::new(5, 2, vec![(OpKind::Mul, 3), (OpKind::Add, 4)]).unwrap();
        assert_eq!(inst.trace, vec![1, 0]);
        assert_eq!(inst.answer, 0);
    }

    #[test]
    fn generate_instance_is_deterministic() {
        let a = generate_instance(3, 11, 42).unwrap();
        let b = generate_instance(3, 11, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generate_instance_rejects_out_of_range() {
        assert!(generate_instance(0, 7, 1).is_err());
        assert!(generate_instance(9, 7, 1).is_err());
        assert!(generate_instance(2, 4, 1).is_err());
        assert!(generate_instance(2, 32, 1).is_err());
    }

    #[test]
    fn text_round_trip() {
        let inst = generate_instance(4, 13, 9).unwrap();
        let tokens = encode_text(&inst);
        assert_eq!(tokens.len(), text_token_count(4));
        assert_eq!(decode_text(&tokens).unwrap(), inst);
    }

    #[test]
    fn distinct_programs_encode_distinctly() {
        let a = SemanticInstance::new(7, 3, vec![(OpKind::Add, 4)]).unwrap();
        let b = SemanticInstance::new(7, 4, vec![(OpKind::Add, 3)]).unwrap();
        assert_ne!(encode_text(&a), encode_text(&b));
    }

    #[test]
    fn noiseless_audio_is_a_realphabeting() {
        let inst = generate_instance(3, 7, 5).unwrap();
        let noise = NoiseSpec {
            p_sub: 0.0,
            p_dup: 0.0,
            frames_min: 1,
            frames_max: 1,
            seed: 11,
        };
        assert_eq!(encode_audio(&inst, &noise).unwrap(), encode_text(&inst));
    }

    #[test]
    fn full_substitution_replaces_every_frame() {
        let inst = generate_instance(3, 7, 5).unwrap();
        let noise = NoiseSpec {
            p_sub: 1.0,
            p_dup: 0.0,
            frames_min: 1,
            frames_max: 1,
            seed: 11,
        };
        let audio = encode_audio(&inst, &noise).unwrap();
        let text = encode_text(&inst);
        for (a, t) in audio.iter().zip(&text) {
            assert_ne!(a, t);
            assert!(confusables(*t).contains(a));
        }
    }

    #[test]
    fn empirical_substitution_rate() {
        // Monte-Carlo: over ~10k frames at p_sub = 0.1, rate within 0.1 +/- 0.01
        let mut subs = 0usize;
        let mut frames = 0usize;
        let mut id = 0u64;
        while frames < 10_000 {
            let inst = generate_instance(8, 31, derive_seed(77, &format!("i{}", id))).unwrap();
            let noise = NoiseSpec {
                p_sub: 0.1,
                p_dup: 0.0,
                frames_min: 1,
                frames_max: 1,
                seed: derive_seed(77, &format!("n{}", id)),
            };
            let audio = encode_audio(&inst, &noise).unwrap();
            for (a, t) in audio.iter().zip(encode_text(&inst)) {
                frames += 1;
                if *a != t {
                    subs += 1;
                }
            }
            id += 1;
        }
        let rate = subs as f64 / frames as f64;
        assert!((rate - 0.1).abs() < 0.01, "rate = {}", rate);
    }

    #[test]
    fn target_shape_and_round_trip() {
        let inst = SemanticInstance::new(7, 3, vec![(OpKind::Add, 4)]).unwrap();
        let target = render_target(&inst);
        assert_eq!(
            target,
            vec![0, TOK_ANSWER, 0, TOK_EOS],
            "t_1 ANSWER a EOS shape"
        );
        let pos = target.iter().position(|&t| t == TOK_ANSWER).unwrap();
        assert!(target[pos + 1] < MAX_VALUE);

        let inst2 = generate_instance(5, 11, 3).unwrap();
        let (trace, answer) = parse_target(&render_target(&inst2)).unwrap();
        assert_eq!(trace, inst2.trace);
        assert_eq!(answer, inst2.answer);
    }

    #[test]
    fn dataset_split_sizes_and_determinism() {
        let config = DataGenConfig {
            n: 10,
            ratios: (0.8, 0.1, 0.1),
            ..DataGenConfig::default()
        };
        let records = generate_records(&config).unwrap();
        let count = |s: &str| records.iter().filter(|r| r.split == s).count();
        assert_eq!(count("train"), 8);
        assert_eq!(count("val"), 1);
        assert_eq!(count("eval"), 1);
        assert_eq!(records.len(), 10);

        let again = generate_records(&config).unwrap();
        assert_eq!(
            serde_json::to_string(&records).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn splits_are_program_disjoint() {
        let config = DataGenConfig {
            n: 300,
            max_len: 4,
            ..DataGenConfig::default()
        };
        let records = generate_records(&config).unwrap();
        let mut seen = HashSet::new();
        for r in &records {
            assert!(seen.insert(r.program.clone()), "duplicate {}", r.program);
        }
    }

    #[test]
    fn aux_labels_balanced_and_consistent() {
        let records = generate_aux(300, 5).unwrap();
        for label in AUX_LABELS {
            let count = records.iter().filter(|r| r.label == label).count();
            assert!((count as f64 - 100.0).abs() <= 10.0);
        }
        let again = generate_aux(300, 5).unwrap();
        assert_eq!(records.len(), again.len());
        for (a, b) in records.iter().zip(&again) {
            assert_eq!(a.x_audio, b.x_audio);
            assert_eq!(a.label, b.label);
        }
    }
}

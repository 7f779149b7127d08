//! Decoder-only dual-modality policy model.
//!
//! One parameter set serves both conditioning modalities: the condition is
//! embedded through a modality-specific input table, prefixed with a modality
//! tag and followed by a separator, then the shared causal trunk produces
//! next-token distributions over the output vocabulary. The text-conditioned
//! side doubles as the in-model teacher.

use crate::data::{AUDIO_VOCAB, OUT_VOCAB, TEXT_VOCAB};
use crate::error::{CordError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Audio,
}

impl Modality {
    pub fn tag_index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
        }
    }
}

/// A conditioning input: which modality plus its token stream.
#[derive(Debug, Clone)]
pub struct Condition {
    pub modality: Modality,
    pub tokens: Vec<usize>,
}

impl Condition {
    pub fn text(tokens: Vec<usize>) -> Self {
        Condition {
            modality: Modality::Text,
            tokens,
        }
    }

    pub fn audio(tokens: Vec<usize>) -> Self {
        Condition {
            modality: Modality::Audio,
            tokens,
        }
    }

    fn alphabet_size(&self) -> usize {
        match self.modality {
            Modality::Text => TEXT_VOCAB,
            Modality::Audio => AUDIO_VOCAB,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub text_vocab: usize,
    pub audio_vocab: usize,
    pub out_vocab: usize,
    pub context: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            text_vocab: TEXT_VOCAB,
            audio_vocab: AUDIO_VOCAB,
            out_vocab: OUT_VOCAB,
            context: 256,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.d_model % self.n_heads != 0
        {
            return Err(CordError::InvalidArgument(
                "model dims must be positive and d_model divisible by n_heads".into(),
            ));
        }
        if self.context < max_seq_len {
            return Err(CordError::InvalidArgument(format!(
                "context budget {} smaller than max sequence length {}",
                self.context, max_seq_len
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count; checked against the actual tensors.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embeddings = (self.text_vocab + self.audio_vocab + self.out_vocab + 2 + 1) * d
            + self.context * d;
        let per_block = 4 * d * d          // wq wk wv wo
            + 4 * d                        // ln1/ln2 gain+bias
            + d * self.d_ff + self.d_ff    // mlp in
            + self.d_ff * d + d; // mlp out
        let head = 2 * d + d * self.out_vocab + self.out_vocab; // final ln + projection
        embeddings + self.n_layers * per_block + head
    }
}

#[derive(Debug, Clone)]
pub struct Block<F: Scalar> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub mlp_w1: Tensor<F>,
    pub mlp_b1: Tensor<F>,
    pub mlp_w2: Tensor<F>,
    pub mlp_b2: Tensor<F>,
}

/// All learnable tensors of the policy.
#[derive(Debug, Clone)]
pub struct ModelParams<F: Scalar> {
    pub config: ModelConfig,
    pub text_embed: Tensor<F>,
    pub audio_embed: Tensor<F>,
    pub out_embed: Tensor<F>,
    pub tag_embed: Tensor<F>,
    pub sep_embed: Tensor<F>,
    pub pos_embed: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub ln_f_g: Tensor<F>,
    pub ln_f_b: Tensor<F>,
    pub out_proj: Tensor<F>,
    pub out_bias: Tensor<F>,
}

impl<F: Scalar> ModelParams<F> {
    /// Deterministic initialization: scaled Gaussian weights, unit layer-norm
    /// gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate(0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = F::from_f64_(config.init_std);
        let mut rnd = |shape: Vec<usize>| Tensor::randn(shape, std, &mut rng);
        let text_embed = rnd(vec![config.text_vocab, d]);
        let audio_embed = rnd(vec![config.audio_vocab, d]);
        let out_embed = rnd(vec![config.out_vocab, d]);
        let tag_embed = rnd(vec![2, d]);
        let sep_embed = rnd(vec![1, d]);
        let pos_embed = rnd(vec![config.context, d]);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                wq: rnd(vec![d, d]),
                wk: rnd(vec![d, d]),
                wv: rnd(vec![d, d]),
                wo: rnd(vec![d, d]),
                ln1_g: Tensor::full(vec![d], F::one()),
                ln1_b: Tensor::zeros(vec![d]),
                ln2_g: Tensor::full(vec![d], F::one()),
                ln2_b: Tensor::zeros(vec![d]),
                mlp_w1: rnd(vec![d, config.d_ff]),
                mlp_b1: Tensor::zeros(vec![config.d_ff]),
                mlp_w2: rnd(vec![config.d_ff, d]),
                mlp_b2: Tensor::zeros(vec![d]),
            })
            .collect();
        let out_proj = rnd(vec![d, config.out_vocab]);
        Ok(ModelParams {
            config,
            text_embed,
            audio_embed,
            out_embed,
            tag_embed,
            sep_embed,
            pos_embed,
            blocks,
            ln_f_g: Tensor::full(vec![d], F::one()),
            ln_f_b: Tensor::zeros(vec![d]),
            out_proj,
            out_bias: Tensor::zeros(vec![config.out_vocab]),
        })
    }

    /// Tensors in a fixed, checkpoint-stable order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("text_embed".into(), &self.text_embed),
            ("audio_embed".into(), &self.audio_embed),
            ("out_embed".into(), &self.out_embed),
            ("tag_embed".into(), &self.tag_embed),
            ("sep_embed".into(), &self.sep_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("mlp_w1", &b.mlp_w1),
                ("mlp_b1", &b.mlp_b1),
                ("mlp_w2", &b.mlp_w2),
                ("mlp_b2", &b.mlp_b2),
            ] {
                out.push((format!("block{}.{}", i, name), t));
            }
        }
        out.push(("ln_f_g".into(), &self.ln_f_g));
        out.push(("ln_f_b".into(), &self.ln_f_b));
        out.push(("out_proj".into(), &self.out_proj));
        out.push(("out_bias".into(), &self.out_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = vec![
            &mut self.text_embed,
            &mut self.audio_embed,
            &mut self.out_embed,
            &mut self.tag_embed,
            &mut self.sep_embed,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.ln1_g);
            out.push(&mut b.ln1_b);
            out.push(&mut b.ln2_g);
            out.push(&mut b.ln2_b);
            out.push(&mut b.mlp_w1);
            out.push(&mut b.mlp_b1);
            out.push(&mut b.mlp_w2);
            out.push(&mut b.mlp_b2);
        }
        out.push(&mut self.ln_f_g);
        out.push(&mut self.ln_f_b);
        out.push(&mut self.out_proj);
        out.push(&mut self.out_bias);
        out
    }

    /// Rebuild from named tensors (checkpoint load); every expected tensor
    /// must be present with the exact shape.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let mut skeleton = ModelParams::init(config, 0)?;
        let expected: Vec<String> = skeleton
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        if expected.len() != tensors.len() {
            return Err(CordError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        let shapes: Vec<Vec<usize>> = skeleton
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape.clone())
            .collect();
        for (slot, ((name, tensor), (exp_name, exp_shape))) in skeleton
            .tensors_mut()
            .into_iter()
            .zip(tensors.into_iter().zip(expected.iter().zip(shapes.iter())))
        {
            if &name != exp_name {
                return Err(CordError::Checkpoint(format!(
                    "tensor name mismatch: expected {}, found {}",
                    exp_name, name
                )));
            }
            if &tensor.shape != exp_shape {
                return Err(CordError::Checkpoint(format!(
                    "tensor {} shape mismatch: expected {:?}, found {:?}",
                    name, exp_shape, tensor.shape
                )));
            }
            *slot = tensor;
        }
        Ok(skeleton)
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Register every parameter as a differentiable tape leaf.
    pub fn vars(&self, tape: &mut Tape<F>) -> Result<ModelVars> {
        let mut leaves = Vec::new();
        for (_, t) in self.named_tensors() {
            leaves.push(tape.leaf(t.clone())?);
        }
        Ok(ModelVars { leaves })
    }
}

/// Tape handles for the parameters, in `named_tensors` order.
pub struct ModelVars {
    pub leaves: Vec<Var>,
}

impl ModelVars {
    fn embed_tables(&self) -> (Var, Var, Var, Var, Var, Var) {
        (
            self.leaves[0], // text
            self.leaves[1], // audio
            self.leaves[2], // out
            self.leaves[3], // tag
            self.leaves[4], // sep
            self.leaves[5], // pos
        )
    }

    fn block(&self, i: usize) -> &[Var] {
        &self.leaves[6 + 12 * i..6 + 12 * (i + 1)]
    }

    fn head(&self, n_layers: usize) -> (Var, Var, Var, Var) {
        let base = 6 + 12 * n_layers;
        (
            self.leaves[base],
            self.leaves[base + 1],
            self.leaves[base + 2],
            self.leaves[base + 3],
        )
    }
}

/// Full forward pass. Returns a `[T+1, out_vocab]` matrix of log-probability
/// rows: the distribution for the first output token (given the empty prefix)
/// and one distribution after each prefix token.
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    tape: &mut Tape<F>,
    vars: &ModelVars,
    condition: &Condition,
    prefix: &[usize],
) -> Result<Var> {
    let config = &params.config;
    let alphabet = condition.alphabet_size();
    if let Some(&bad) = condition.tokens.iter().find(|&&t| t >= alphabet) {
        return Err(CordError::InvalidArgument(format!(
            "condition token {} outside alphabet of size {}",
            bad, alphabet
        )));
    }
    if let Some(&bad) = prefix.iter().find(|&&t| t >= config.out_vocab) {
        return Err(CordError::InvalidArgument(format!(
            "prefix token {} outside output vocabulary of size {}",
            bad, config.out_vocab
        )));
    }
    let c_len = condition.tokens.len();
    let total = 1 + c_len + 1 + prefix.len();
    if total > config.context {
        return Err(CordError::InvalidArgument(format!(
            "sequence length {} exceeds context budget {}",
            total, config.context
        )));
    }

    let (text_t, audio_t, out_t, tag_t, sep_t, pos_t) = vars.embed_tables();
    let cond_table = match condition.modality {
        Modality::Text => text_t,
        Modality::Audio => audio_t,
    };
    let tag = tape.embed_gather(tag_t, &[condition.modality.tag_index()])?;
    let cond = tape.embed_gather(cond_table, &condition.tokens)?;
    let mut segments = vec![tag, cond, sep_t];
    if !prefix.is_empty() {
        segments.push(tape.embed_gather(out_t, prefix)?);
    }
    let tok_emb = tape.concat_rows(&segments)?;
    let pos = tape.slice_rows(pos_t, 0, total)?;
    let mut x = tape.add(tok_emb, pos)?;

    let n_heads = config.n_heads;
    let dh = config.d_model / n_heads;
    let scale = F::from_f64_(1.0 / (dh as f64).sqrt());
    for i in 0..config.n_layers {
        let b = vars.block(i);
        let (wq, wk, wv, wo) = (b[0], b[1], b[2], b[3]);
        let (ln1_g, ln1_b, ln2_g, ln2_b) = (b[4], b[5], b[6], b[7]);
        let (mlp_w1, mlp_b1, mlp_w2, mlp_b2) = (b[8], b[9], b[10], b[11]);

        let normed = tape.layer_norm(x, ln1_g, ln1_b)?;
        let q = tape.matmul(normed, wq)?;
        let k = tape.matmul(normed, wk)?;
        let v = tape.matmul(normed, wv)?;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, scale)?;
            let probs = tape.causal_softmax(scaled)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn_out = tape.matmul(ctx, wo)?;
        x = tape.add(x, attn_out)?;

        let normed2 = tape.layer_norm(x, ln2_g, ln2_b)?;
        let h1 = tape.matmul(normed2, mlp_w1)?;
        let h1b = tape.add_bias(h1, mlp_b1)?;
        let act = tape.gelu(h1b)?;
        let h2 = tape.matmul(act, mlp_w2)?;
        let h2b = tape.add_bias(h2, mlp_b2)?;
        x = tape.add(x, h2b)?;
    }

    let (ln_f_g, ln_f_b, out_proj, out_bias) = vars.head(config.n_layers);
    let final_norm = tape.layer_norm(x, ln_f_g, ln_f_b)?;
    // predictive positions: separator plus every prefix token
    let sep_pos = 1 + c_len;
    let hidden = tape.slice_rows(final_norm, sep_pos, total)?;
    let logits = tape.matmul(hidden, out_proj)?;
    let logits_b = tape.add_bias(logits, out_bias)?;
    tape.log_softmax_rows(logits_b)
}

/// Log-probability of an output sequence under the given conditioning,
/// as a differentiable scalar.
pub fn sequence_logprob<F: Scalar>(
    params: &ModelParams<F>,
    tape: &mut Tape<F>,
    vars: &ModelVars,
    condition: &Condition,
    y: &[usize],
) -> Result<Var> {
    if y.is_empty() {
        return Err(CordError::InvalidArgument(
            "sequence_logprob needs a non-empty sequence".into(),
        ));
    }
    let dists = forward(params, tape, vars, condition, y)?;
    let steps = tape.slice_rows(dists, 0, y.len())?;
    let picked = tape.gather_index(steps, y)?;
    tape.sum_all(picked)
}

/// Per-step log-distributions without gradient tracking: `[T+1, out_vocab]`.
pub fn step_distributions<F: Scalar>(
    params: &ModelParams<F>,
    condition: &Condition,
    prefix: &[usize],
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let vars = params.vars(&mut tape)?;
    let dists = forward(params, &mut tape, &vars, condition, prefix)?;
    Ok(tape.value(dists).clone())
}

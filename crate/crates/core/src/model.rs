//! Decoder-only transformer: pre-LayerNorm blocks, rotary positions, ReLU
//! MLPs, no biases, and a readout tied to the token embedding.
//!
//! A sequence `x_1 y_1 z_1 ...` is fed whole. The label `z_i` sitting at
//! position `3i + 2` is predicted by the logits at position `3i + 1`, i.e. the
//! usual next-token shift.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TokenSequence;
use crate::numerics::{gemm, rope_rotate, rope_tables, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds the model's {max}")]
    TooLong { len: usize, max: usize },
    #[error("batch sequences must share one length")]
    RaggedBatch,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

fn default_widening() -> usize {
    4
}
fn default_theta() -> f64 {
    10_000.0
}
fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of transformer blocks.
    pub depth: usize,
    pub heads: usize,
    pub d_embed: usize,
    /// Vocabulary size, equal to `p`.
    pub vocab: usize,
    /// Longest accepted sequence, `3 * n_ctx`.
    pub max_tokens: usize,
    #[serde(default = "default_widening")]
    pub mlp_widening: usize,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn new(depth: usize, heads: usize, d_embed: usize, vocab: usize, n_ctx: usize) -> Self {
        Self {
            depth,
            heads,
            d_embed,
            vocab,
            max_tokens: 3 * n_ctx,
            mlp_widening: default_widening(),
            rope_theta: default_theta(),
            ln_eps: default_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.heads.max(1)
    }

    pub fn hidden(&self) -> usize {
        self.d_embed * self.mlp_widening
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.depth == 0 || self.heads == 0 || self.d_embed == 0 || self.vocab == 0 || self.mlp_widening == 0 {
            return bad("depth, heads, d_embed, vocab and mlp_widening must be positive");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.d_embed % self.heads != 0 {
            return bad("d_embed must be divisible by heads");
        }
        if self.head_dim() % 2 != 0 {
            return bad("head dimension must be even for rotary embeddings");
        }
        if !(self.rope_theta > 0.0 && self.ln_eps > 0.0) {
            return bad("rope_theta and ln_eps must be positive");
        }
        Ok(())
    }
}

/// Optimizer treatment of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Embedding,
    Linear,
    LayerNormGain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2: Tensor<T>,
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
}

/// All weights. Linear maps are stored `[in, out]` and applied as `x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub config: ModelConfig,
    /// `[vocab, d_embed]`; also the readout, applied transposed.
    pub embedding: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_final: Tensor<T>,
}

const BLOCK_FIELDS: [(&str, ParamKind); 8] = [
    ("ln1", ParamKind::LayerNormGain),
    ("attn.wq", ParamKind::Linear),
    ("attn.wk", ParamKind::Linear),
    ("attn.wv", ParamKind::Linear),
    ("attn.wo", ParamKind::Linear),
    ("ln2", ParamKind::LayerNormGain),
    ("mlp.w_in", ParamKind::Linear),
    ("mlp.w_out", ParamKind::Linear),
];

impl<T> BlockParams<T> {
    fn fields(&self) -> [&Tensor<T>; 8] {
        [&self.ln1, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2, &self.w_in, &self.w_out]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.ln1,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2,
            &mut self.w_in,
            &mut self.w_out,
        ]
    }
}

/// Tape handles for one registered parameter set.
pub struct ParamVars {
    pub all: Vec<Var>,
}

impl ParamVars {
    fn embedding(&self) -> Var {
        self.all[0]
    }
    fn block(&self, l: usize, field: usize) -> Var {
        self.all[1 + l * 8 + field]
    }
    fn ln_final(&self) -> Var {
        *self.all.last().unwrap()
    }
}

/// Handles to the interesting intermediate values of one forward pass.
pub struct ForwardVars {
    /// `[B*T, vocab]`.
    pub logits: Var,
    /// Residual stream after each block, `[B*T, D]`.
    pub block_outputs: Vec<Var>,
    /// Attention probabilities per block, `[B*H, T, T]`.
    pub attention: Vec<Var>,
    /// Post-ReLU MLP activations per block, `[B*T, hidden]`.
    pub mlp_hidden: Vec<Var>,
    /// Concatenated head outputs before the output projection, `[B*T, D]`.
    pub head_mix: Vec<Var>,
    pub batch: usize,
    pub seq_len: usize,
}

/// Activations recorded during a capture-enabled forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCapture<T> {
    /// Per block, `[B, T, D]`.
    pub block_outputs: Vec<Tensor<T>>,
    /// Per block, `[B, H, T, T]`; rows are causal probability vectors.
    pub attention: Vec<Tensor<T>>,
    /// Per block, `[B, T, hidden]`.
    pub mlp_hidden: Vec<Tensor<T>>,
    /// Per block, `[B, H, T, D]`: each head's contribution after its slice of
    /// the output projection.
    pub head_outputs: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[B, T, vocab]`.
    pub logits: Tensor<T>,
    pub capture: Option<ActivationCapture<T>>,
}

/// Loss, gradients and per-shot correctness for one batch.
pub struct StepOutput<T> {
    pub loss: f64,
    /// In [`ParameterSet::named_params`] order.
    pub grads: Vec<Tensor<T>>,
    /// `[sequence][shot]`.
    pub correct: Vec<Vec<bool>>,
}

pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 0.02;
    let out_std = 0.02 / ((2 * config.depth) as f64).sqrt();
    let mut gaussian = |shape: &[usize], sd: f64| -> Tensor<T> {
        let dist = Normal::new(0.0, sd).expect("positive std");
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()).unwrap()
    };
    let (d, h) = (config.d_embed, config.hidden());
    let embedding = gaussian(&[config.vocab, d], std);
    let blocks = (0..config.depth)
        .map(|_| BlockParams {
            ln1: Tensor::full(&[d], T::one()),
            wq: gaussian(&[d, d], std),
            wk: gaussian(&[d, d], std),
            wv: gaussian(&[d, d], std),
            wo: gaussian(&[d, d], std),
            ln2: Tensor::full(&[d], T::one()),
            w_in: gaussian(&[d, h], std),
            w_out: gaussian(&[h, d], out_std),
        })
        .collect();
    Ok(ParameterSet { config: config.clone(), embedding, blocks, ln_final: Tensor::full(&[d], T::one()) })
}

/// Applies rotary embeddings to `[.., T, head_dim]` vectors whose rows sit at
/// `positions`.
pub fn rope_apply<T: Scalar>(vectors: &Tensor<T>, positions: &[usize], theta: f64) -> Result<Tensor<T>> {
    let s = vectors.shape();
    if s.len() < 2 || s[s.len() - 2] != positions.len() {
        return Err(TensorError::ShapeMismatch { op: "rope", lhs: s.to_vec(), rhs: vec![positions.len()] }.into());
    }
    let hd = vectors.cols();
    if hd % 2 != 0 {
        return Err(TensorError::Invalid { op: "rope", msg: format!("head dimension {hd} is odd") }.into());
    }
    let (cos, sin) = rope_tables::<T>(positions, hd, theta);
    let mut out = vectors.clone();
    rope_rotate(out.data_mut(), positions.len(), hd, &cos, &sin, false);
    Ok(out)
}

impl<T: Scalar> ParameterSet<T> {
    /// Every parameter with its name and optimizer group, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), ParamKind::Embedding, &self.embedding)];
        for (l, b) in self.blocks.iter().enumerate() {
            for ((name, kind), t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{l}.{name}"), *kind, t));
            }
        }
        out.push(("ln_final".to_string(), ParamKind::LayerNormGain, &self.ln_final));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for b in self.blocks.iter_mut() {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.ln_final);
        out
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        self.named_params().into_iter().map(|(_, k, _)| k).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// The readout matrix. It is the embedding itself, used as `h E^T`.
    pub fn readout(&self) -> &Tensor<T> {
        &self.embedding
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: b.ln1.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    ln2: b.ln2.cast(),
                    w_in: b.w_in.cast(),
                    w_out: b.w_out.cast(),
                })
                .collect(),
            ln_final: self.ln_final.cast(),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> ParamVars {
        let all = self.named_params().into_iter().map(|(_, _, t)| tape.leaf(t.clone(), requires_grad)).collect();
        ParamVars { all }
    }

    fn check_tokens(&self, seqs: &[&[u32]]) -> Result<(usize, usize, Vec<usize>)> {
        let first = seqs.first().ok_or(ModelError::EmptyBatch)?;
        let t = first.len();
        if t == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if t > self.config.max_tokens {
            return Err(ModelError::TooLong { len: t, max: self.config.max_tokens });
        }
        let mut flat = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            if s.len() != t {
                return Err(ModelError::RaggedBatch);
            }
            for &tok in s.iter() {
                if tok as usize >= self.config.vocab {
                    return Err(ModelError::TokenOutOfVocab { token: tok, vocab: self.config.vocab });
                }
                flat.push(tok as usize);
            }
        }
        Ok((seqs.len(), t, flat))
    }

    /// Records the forward pass of a batch of equal-length sequences.
    pub fn forward_tape(&self, tape: &mut Tape<T>, vars: &ParamVars, seqs: &[&[u32]]) -> Result<ForwardVars> {
        self.forward_gated(tape, vars, seqs, None)
    }

    // With `gates`, each MLP multiplies its pre-activation by a fixed 0/1
    // mask (shaped like `ActivationCapture::mlp_hidden`) instead of taking
    // the ReLU.
    fn forward_gated(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        seqs: &[&[u32]],
        gates: Option<&[Tensor<T>]>,
    ) -> Result<ForwardVars> {
        let (b, t, flat) = self.check_tokens(seqs)?;
        let cfg = &self.config;
        let (d, heads, hd) = (cfg.d_embed, cfg.heads, cfg.head_dim());
        let positions: Vec<usize> = (0..t).collect();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = tape.embed(vars.embedding(), &flat)?;
        let mut fv = ForwardVars {
            logits: x,
            block_outputs: Vec::new(),
            attention: Vec::new(),
            mlp_hidden: Vec::new(),
            head_mix: Vec::new(),
            batch: b,
            seq_len: t,
        };
        let split_heads = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[b, t, heads, hd])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            Ok(tape.reshape(v, &[b * heads, t, hd])?)
        };
        for l in 0..cfg.depth {
            let h = tape.layer_norm(x, vars.block(l, 0), cfg.ln_eps)?;
            let q = tape.matmul(h, vars.block(l, 1))?;
            let k = tape.matmul(h, vars.block(l, 2))?;
            let v = tape.matmul(h, vars.block(l, 3))?;
            let q = split_heads(tape, q)?;
            let k = split_heads(tape, k)?;
            let v = split_heads(tape, v)?;
            let q = tape.rope(q, &positions, cfg.rope_theta)?;
            let k = tape.rope(k, &positions, cfg.rope_theta)?;
            let scores = tape.batched_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.causal_softmax(scores)?;
            let mixed = tape.batched_matmul(attn, v, false)?;
            let mixed = tape.reshape(mixed, &[b, heads, t, hd])?;
            let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
            let mixed = tape.reshape(mixed, &[b * t, d])?;
            let proj = tape.matmul(mixed, vars.block(l, 4))?;
            x = tape.add(x, proj)?;

            let h2 = tape.layer_norm(x, vars.block(l, 5), cfg.ln_eps)?;
            let pre = tape.matmul(h2, vars.block(l, 6))?;
            let hidden = match gates {
                Some(g) => {
                    let gate = g[l].clone().reshaped(&[b * t, cfg.hidden()])?;
                    let gate = tape.leaf(gate, false);
                    tape.mul(pre, gate)?
                }
                None => tape.relu(pre),
            };
            let out = tape.matmul(hidden, vars.block(l, 7))?;
            x = tape.add(x, out)?;

            fv.block_outputs.push(x);
            fv.attention.push(attn);
            fv.mlp_hidden.push(hidden);
            fv.head_mix.push(mixed);
        }
        let xf = tape.layer_norm(x, vars.ln_final(), cfg.ln_eps)?;
        let readout = tape.transpose(vars.embedding())?;
        fv.logits = tape.matmul(xf, readout)?;
        Ok(fv)
    }

    pub fn forward(&self, seqs: &[&[u32]], capture: bool) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let fv = self.forward_tape(&mut tape, &vars, seqs)?;
        let (b, t) = (fv.batch, fv.seq_len);
        let logits = tape.value(fv.logits).clone().reshaped(&[b, t, self.config.vocab])?;
        let capture = if capture { Some(self.collect_capture(&tape, &fv)?) } else { None };
        Ok(ForwardOutput { logits, capture })
    }

    fn collect_capture(&self, tape: &Tape<T>, fv: &ForwardVars) -> Result<ActivationCapture<T>> {
        let cfg = &self.config;
        let (b, t, d, heads, hd) = (fv.batch, fv.seq_len, cfg.d_embed, cfg.heads, cfg.head_dim());
        let mut cap = ActivationCapture {
            block_outputs: Vec::new(),
            attention: Vec::new(),
            mlp_hidden: Vec::new(),
            head_outputs: Vec::new(),
        };
        for l in 0..cfg.depth {
            cap.block_outputs.push(tape.value(fv.block_outputs[l]).clone().reshaped(&[b, t, d])?);
            cap.attention.push(tape.value(fv.attention[l]).clone().reshaped(&[b, heads, t, t])?);
            cap.mlp_hidden.push(tape.value(fv.mlp_hidden[l]).clone().reshaped(&[b, t, cfg.hidden()])?);

            let mixed = tape.value(fv.head_mix[l]);
            let wo = self.blocks[l].wo.data();
            let rows = b * t;
            let mut out = vec![T::zero(); b * heads * t * d];
            let mut slice = vec![T::zero(); rows * hd];
            let mut prod = vec![T::zero(); rows * d];
            for h in 0..heads {
                for r in 0..rows {
                    slice[r * hd..(r + 1) * hd].copy_from_slice(&mixed.row(r)[h * hd..(h + 1) * hd]);
                }
                gemm(false, false, rows, hd, d, T::one(), &slice, &wo[h * hd * d..], T::zero(), &mut prod);
                for bi in 0..b {
                    for ti in 0..t {
                        let dst = ((bi * heads + h) * t + ti) * d;
                        let src = (bi * t + ti) * d;
                        out[dst..dst + d].copy_from_slice(&prod[src..src + d]);
                    }
                }
            }
            cap.head_outputs.push(Tensor::from_vec(&[b, heads, t, d], out)?);
        }
        Ok(cap)
    }

    /// Mean cross-entropy over label positions, gradients for every
    /// parameter, and per-shot argmax correctness.
    pub fn loss_and_grads(&self, seqs: &[TokenSequence]) -> Result<StepOutput<T>> {
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, true);
        let fv = self.forward_tape(&mut tape, &vars, &refs)?;
        let (targets, mask) = label_rows(&refs, fv.seq_len);
        let loss = tape.masked_cross_entropy(fv.logits, &targets, &mask)?;
        let correct = shot_correctness(tape.value(fv.logits), &refs);
        let mut g = tape.backward(loss)?;
        let grads = vars
            .all
            .iter()
            .zip(self.named_params())
            .map(|(v, (_, _, t))| g.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok(StepOutput { loss: tape.value(loss).item().as_f64(), grads, correct })
    }

    /// Loss and per-shot correctness without gradients.
    pub fn sequence_loss(&self, seqs: &[TokenSequence]) -> Result<(f64, Vec<Vec<bool>>)> {
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let fv = self.forward_tape(&mut tape, &vars, &refs)?;
        let (targets, mask) = label_rows(&refs, fv.seq_len);
        let loss = tape.masked_cross_entropy(fv.logits, &targets, &mask)?;
        let correct = shot_correctness(tape.value(fv.logits), &refs);
        Ok((tape.value(loss).item().as_f64(), correct))
    }

    /// Training loss with every ReLU replaced by a fixed gate. With the gates
    /// taken from a forward pass at these parameters it equals the loss, and
    /// it stays smooth where the loss itself has kinks.
    pub fn gated_loss(&self, seqs: &[TokenSequence], gates: &[Tensor<T>]) -> Result<f64> {
        if gates.len() != self.config.depth {
            return Err(ModelError::Config(format!("{} gates for {} layers", gates.len(), self.config.depth)));
        }
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let fv = self.forward_gated(&mut tape, &vars, &refs, Some(gates))?;
        let (targets, mask) = label_rows(&refs, fv.seq_len);
        let loss = tape.masked_cross_entropy(fv.logits, &targets, &mask)?;
        Ok(tape.value(loss).item().as_f64())
    }

    /// Per-sequence, per-shot negative log-likelihood and correctness.
    pub fn shot_scores(&self, seqs: &[&[u32]]) -> Result<(Vec<Vec<f64>>, Vec<Vec<bool>>)> {
        let out = self.forward(seqs, false)?;
        let logits = out.logits;
        let (t, v) = (logits.shape()[1], logits.shape()[2]);
        let mut nll = Vec::with_capacity(seqs.len());
        let mut correct = Vec::with_capacity(seqs.len());
        for (s, toks) in seqs.iter().enumerate() {
            let mut ln = Vec::new();
            let mut cr = Vec::new();
            for i in 0..t / 3 {
                let row = &logits.data()[(s * t + 3 * i + 1) * v..(s * t + 3 * i + 2) * v];
                let target = toks[3 * i + 2] as usize;
                let (lp, arg) = log_softmax_at(row, target);
                ln.push(-lp);
                cr.push(arg == target);
            }
            nll.push(ln);
            correct.push(cr);
        }
        Ok((nll, correct))
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64, extra: serde_json::Value) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        write_checkpoint(self, seed, step, extra, &mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Rows whose logits predict a label, and the target for every row.
fn label_rows(seqs: &[&[u32]], t: usize) -> (Vec<usize>, Vec<usize>) {
    let mut targets = vec![0usize; seqs.len() * t];
    let mut mask = Vec::with_capacity(seqs.len() * t / 3);
    for (s, toks) in seqs.iter().enumerate() {
        for i in 0..t / 3 {
            let row = s * t + 3 * i + 1;
            targets[row] = toks[3 * i + 2] as usize;
            mask.push(row);
        }
    }
    (targets, mask)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn log_softmax_at<T: Scalar>(row: &[T], target: usize) -> (f64, usize) {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    (row[target].as_f64() - max - z.ln(), argmax(row))
}

fn shot_correctness<T: Scalar>(logits: &Tensor<T>, seqs: &[&[u32]]) -> Vec<Vec<bool>> {
    let v = logits.cols();
    let t = seqs[0].len();
    seqs.iter()
        .enumerate()
        .map(|(s, toks)| {
            (0..t / 3)
                .map(|i| {
                    let r = s * t + 3 * i + 1;
                    argmax(&logits.data()[r * v..(r + 1) * v]) == toks[3 * i + 2] as usize
                })
                .collect()
        })
        .collect()
}

const MAGIC: &[u8; 8] = b"MODICLv1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub step: u64,
    pub extra: serde_json::Value,
}

/// Layout: 8-byte magic, u64 LE header length, JSON header (config, seed,
/// step, tensor names and shapes), then each tensor as LE f32 in header order.
pub fn write_checkpoint<T: Scalar, W: Write>(
    params: &ParameterSet<T>,
    seed: u64,
    step: u64,
    extra: serde_json::Value,
    w: &mut W,
) -> Result<()> {
    let named = params.named_params();
    let header = CheckpointHeader {
        config: params.config.clone(),
        seed,
        step,
        tensors: named.iter().map(|(n, _, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        extra,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, t) in named {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ParameterSet<f32>, CheckpointInfo)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    header.config.validate()?;
    let mut params = init_params::<f32>(&header.config, 0)?;
    let expected: Vec<(String, Vec<usize>)> =
        params.named_params().into_iter().map(|(n, _, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != header.tensors.len() {
        return Err(ModelError::Checkpoint("tensor count does not match config".into()));
    }
    for ((name, shape), (entry, slot)) in expected.iter().zip(header.tensors.iter().zip(params.params_mut())) {
        if &entry.name != name || &entry.shape != shape {
            return Err(ModelError::Checkpoint(format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
        }
        let mut buf = vec![0u8; slot.len() * 4];
        r.read_exact(&mut buf)?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(buf.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok((params, CheckpointInfo { seed: header.seed, step: header.step, extra: header.extra }))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet<f32>, CheckpointInfo)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(&mut std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;

    fn tiny(depth: usize) -> ModelConfig {
        ModelConfig::new(depth, 2, 16, 7, 4)
    }

    #[test]
    fn config_validation() {
        assert!(tiny(2).validate().is_ok());
        assert!(ModelConfig::new(2, 3, 16, 7, 4).validate().is_err());
        assert!(ModelConfig::new(2, 8, 8, 7, 4).validate().is_err(), "odd head dimension");
        assert!(ModelConfig::new(0, 2, 16, 7, 4).validate().is_err());
    }

    #[test]
    fn init_statistics() {
        let cfg = ModelConfig::new(2, 4, 512, 29, 32);
        let p = init_params::<f32>(&cfg, 0).unwrap();
        let std = |t: &Tensor<f32>| {
            let n = t.len() as f64;
            let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            (t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
        };
        assert!((std(&p.embedding) / 0.02 - 1.0).abs() < 0.05);
        let expected_out = 0.02 / 2.0; // sqrt(2 * depth) = 2
        assert!((std(&p.blocks[0].w_out) / expected_out - 1.0).abs() < 0.05);
        assert!((std(&p.blocks[1].wq) / 0.02 - 1.0).abs() < 0.05);
        assert!(p.blocks[0].ln1.data().iter().all(|&g| g == 1.0));
        assert_eq!(p, init_params::<f32>(&cfg, 0).unwrap());
        assert_ne!(p, init_params::<f32>(&cfg, 1).unwrap());
    }

    #[test]
    fn parameter_groups() {
        let p = init_params::<f32>(&tiny(2), 0).unwrap();
        let named = p.named_params();
        assert_eq!(named.len(), 1 + 2 * 8 + 1);
        let gains: Vec<&str> = named
            .iter()
            .filter(|(_, k, _)| *k == ParamKind::LayerNormGain)
            .map(|(n, _, _)| n.as_str())
            .collect();
        assert_eq!(gains, ["blocks.0.ln1", "blocks.0.ln2", "blocks.1.ln1", "blocks.1.ln2", "ln_final"]);
        assert!(named.iter().all(|(_, k, t)| (*k == ParamKind::LayerNormGain) == (t.shape().len() == 1)));
    }

    #[test]
    fn rope_properties() {
        let q = Tensor::<f64>::from_vec(&[1, 8], (0..8).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let k = Tensor::<f64>::from_vec(&[1, 8], (0..8).map(|v| (v as f64 * 0.91).cos()).collect()).unwrap();
        let at = |v: &Tensor<f64>, pos: usize| rope_apply(v, &[pos], 10_000.0).unwrap();
        assert_eq!(at(&q, 0), q);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        for (m, n, s) in [(3, 1, 5), (0, 7, 11), (9, 9, 40)] {
            let base = dot(&at(&q, m), &at(&k, n));
            let shifted = dot(&at(&q, m + s), &at(&k, n + s));
            assert!((base - shifted).abs() < 1e-6);
        }
        let norm = |a: &Tensor<f64>| dot(a, a).sqrt();
        assert!((norm(&at(&q, 13)) - norm(&q)).abs() < 1e-6);
        let odd = Tensor::<f64>::zeros(&[1, 3]);
        assert!(rope_apply(&odd, &[0], 10_000.0).is_err());
    }

    #[test]
    fn attention_is_causal_and_stochastic() {
        let p = init_params::<f64>(&tiny(2), 3).unwrap();
        let seq: Vec<u32> = vec![1, 2, 3, 4, 5, 6, 0, 1, 2];
        let out = p.forward(&[&seq], true).unwrap();
        let cap = out.capture.unwrap();
        for a in &cap.attention {
            let t = 9;
            for r in 0..a.rows() {
                let row = a.row(r);
                let i = r % t;
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(cap.block_outputs[1].shape(), &[1, 9, 16]);
        assert_eq!(cap.mlp_hidden[0].shape(), &[1, 9, 64]);
        assert!(cap.mlp_hidden[0].data().iter().all(|&v| v >= 0.0));
        assert_eq!(cap.head_outputs[0].shape(), &[1, 2, 9, 16]);
    }

    #[test]
    fn head_outputs_sum_to_attention_projection() {
        let p = init_params::<f64>(&tiny(1), 4).unwrap();
        let seq: Vec<u32> = vec![1, 2, 3, 4, 5, 6];
        let cap = p.forward(&[&seq], true).unwrap().capture.unwrap();
        // block output = x + sum_h head_h + mlp; recompute x + sum_h head_h via the residual
        let heads = &cap.head_outputs[0];
        let t = 6;
        let d = 16;
        let mut attn_sum = vec![0.0; t * d];
        for h in 0..2 {
            for i in 0..t * d {
                attn_sum[i] += heads.data()[h * t * d + i];
            }
        }
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let fv = p.forward_tape(&mut tape, &vars, &[&seq]).unwrap();
        let mixed = tape.value(fv.head_mix[0]).clone();
        let mut proj = vec![0.0; t * d];
        gemm(false, false, t, d, d, 1.0, mixed.data(), p.blocks[0].wo.data(), 0.0, &mut proj);
        for i in 0..t * d {
            assert!((proj[i] - attn_sum[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbing_a_token_never_changes_earlier_logits() {
        let p = init_params::<f64>(&tiny(2), 5).unwrap();
        let base: Vec<u32> = vec![3, 1, 4, 1, 5, 2, 6, 5, 3, 5, 0, 2];
        let ref_logits = p.forward(&[&base], false).unwrap().logits;
        for pos in 0..base.len() {
            let mut s = base.clone();
            s[pos] = (s[pos] + 1) % 7;
            let l = p.forward(&[&s], false).unwrap().logits;
            let v = 7;
            for q in 0..pos {
                assert_eq!(&l.data()[q * v..(q + 1) * v], &ref_logits.data()[q * v..(q + 1) * v]);
            }
            assert_ne!(&l.data()[pos * v..(pos + 1) * v], &ref_logits.data()[pos * v..(pos + 1) * v]);
        }
    }

    #[test]
    fn readout_is_tied_to_embedding() {
        let mut p = init_params::<f64>(&tiny(1), 6).unwrap();
        assert!(std::ptr::eq(p.readout(), &p.embedding));
        let seq: Vec<u32> = vec![1, 2, 3];
        let before = p.forward(&[&seq], false).unwrap().logits;
        // Changing only the embedding row of a token that never appears as
        // input moves exactly that token's logit.
        let v = 7;
        for j in 0..16 {
            p.embedding.data_mut()[6 * 16 + j] += 0.5;
        }
        let after = p.forward(&[&seq], false).unwrap().logits;
        for r in 0..3 {
            for c in 0..v {
                let changed = before.data()[r * v + c] != after.data()[r * v + c];
                assert_eq!(changed, c == 6);
            }
        }
    }

    #[test]
    fn forward_errors() {
        let p = init_params::<f32>(&tiny(1), 0).unwrap();
        assert!(matches!(p.forward(&[&[7u32][..]], false), Err(ModelError::TokenOutOfVocab { .. })));
        let long = vec![0u32; 13];
        assert!(matches!(p.forward(&[&long], false), Err(ModelError::TooLong { .. })));
        assert!(matches!(p.forward(&[&[1u32, 2][..], &[1u32][..]], false), Err(ModelError::RaggedBatch)));
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        use crate::dataset::{build_sequence, TaskVector};
        use crate::gfp::PrimeField;
        let field = PrimeField::new(7).unwrap();
        let p = init_params::<f32>(&tiny(2), 9).unwrap();
        let seqs: Vec<TokenSequence> = (0..32)
            .map(|i| {
                let inputs: Vec<(u32, u32)> = (0..4).map(|k| ((i + k) % 7, (3 * i + 2 * k) % 7)).collect();
                build_sequence(&field, TaskVector::new(i % 7, (i / 7) % 7), &inputs).unwrap()
            })
            .collect();
        let (loss, correct) = p.sequence_loss(&seqs).unwrap();
        assert!((loss / 7f64.ln() - 1.0).abs() < 0.02, "loss {loss}");
        assert!(correct.iter().all(|c| c.len() == 4));
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        use crate::dataset::{build_sequence, TaskVector};
        use crate::gfp::PrimeField;
        let field = PrimeField::new(7).unwrap();
        let cfg = ModelConfig::new(2, 2, 8, 7, 3);
        let mut p = init_params::<f64>(&cfg, 11).unwrap();
        // Larger weights give the check non-trivial curvature to see.
        for t in p.params_mut() {
            for v in t.data_mut() {
                *v *= 10.0;
            }
        }
        let seqs: Vec<TokenSequence> = [(1, 2), (3, 5)]
            .iter()
            .map(|&(a, b)| build_sequence(&field, TaskVector::new(a, b), &[(1, 2), (4, 0), (6, 3)]).unwrap())
            .collect();
        let step = p.loss_and_grads(&seqs).unwrap();
        let n = p.params_mut().len();
        for idx in 0..n {
            let x: Vec<f64> = p.params_mut()[idx].data().to_vec();
            let g: Vec<f64> = step.grads[idx].data().to_vec();
            let mut probe = p.clone();
            let err = finite_difference_check(&x, &g, 1e-5, 1e-6, |v| {
                probe.params_mut()[idx].data_mut().copy_from_slice(v);
                probe.sequence_loss(&seqs).unwrap().0
            });
            assert!(err < 1e-4, "parameter {idx}: relative error {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params::<f32>(&tiny(2), 7).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, 7, 123, serde_json::json!({"note": "x"}), &mut buf).unwrap();
        let (q, info) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(info.step, 123);
        assert_eq!(info.extra["note"], "x");
        let seq: Vec<u32> = vec![1, 2, 3, 4, 5, 6];
        let a = p.forward(&[&seq], false).unwrap().logits;
        let b = q.forward(&[&seq], false).unwrap().logits;
        assert_eq!(a, b);
        buf[0] = b'X';
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}

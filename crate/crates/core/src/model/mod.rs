//! Pre-norm transformer encoder-decoder with shared embeddings.
//!
//! Sequence conventions: the encoder reads `prefix tokens EOS`, the decoder
//! reads `BOS prefix tokens` and predicts `prefix tokens EOS`.

mod batch;
mod checkpoint;
mod config;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{AttentionSpec, Graph, NumericsError, Real, Tensor, Var};
use crate::tokenizer::{BOS, EOS, PAD};

pub use batch::{token_budget_batches, Batch, Example};
pub use checkpoint::{load_checkpoint, load_checkpoint_into, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::TransformerConfig;
pub use train::{train_step, Optimizer};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug)]
struct LnIdx {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncLayerIdx {
    ln1: LnIdx,
    attn: AttnIdx,
    ln2: LnIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Copy, Debug)]
struct DecLayerIdx {
    ln1: LnIdx,
    self_attn: AttnIdx,
    ln2: LnIdx,
    cross: AttnIdx,
    ln3: LnIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// Parameter indices in declaration order.
#[derive(Clone, Debug)]
struct Layout {
    src_embed: usize,
    tgt_embed: usize,
    out_proj: usize,
    enc: Vec<EncLayerIdx>,
    enc_ln: LnIdx,
    dec: Vec<DecLayerIdx>,
    dec_ln: LnIdx,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Layout {
    fn new(cfg: &TransformerConfig) -> Self {
        let mut l = Layout {
            src_embed: 0,
            tgt_embed: 0,
            out_proj: 0,
            enc: Vec::new(),
            enc_ln: LnIdx { g: 0, b: 0 },
            dec: Vec::new(),
            dec_ln: LnIdx { g: 0, b: 0 },
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let (d, f, v) = (cfg.d_model, cfg.ffn_dim, cfg.vocab_size);
        if cfg.share_embeddings {
            let e = l.add("embed".into(), vec![v, d], Init::Xavier);
            (l.src_embed, l.tgt_embed, l.out_proj) = (e, e, e);
        } else {
            l.src_embed = l.add("src_embed".into(), vec![v, d], Init::Xavier);
            l.tgt_embed = l.add("tgt_embed".into(), vec![v, d], Init::Xavier);
            l.out_proj = l.add("out_proj".into(), vec![v, d], Init::Xavier);
        }
        for i in 0..cfg.enc_layers {
            let p = format!("enc.{i}");
            let ln1 = l.ln(&format!("{p}.ln1"), d);
            let attn = l.attn(&format!("{p}.self"), d);
            let ln2 = l.ln(&format!("{p}.ln2"), d);
            let ffn = l.ffn(&format!("{p}.ffn"), d, f);
            l.enc.push(EncLayerIdx { ln1, attn, ln2, ffn });
        }
        l.enc_ln = l.ln("enc.ln", d);
        for i in 0..cfg.dec_layers {
            let p = format!("dec.{i}");
            let ln1 = l.ln(&format!("{p}.ln1"), d);
            let self_attn = l.attn(&format!("{p}.self"), d);
            let ln2 = l.ln(&format!("{p}.ln2"), d);
            let cross = l.attn(&format!("{p}.cross"), d);
            let ln3 = l.ln(&format!("{p}.ln3"), d);
            let ffn = l.ffn(&format!("{p}.ffn"), d, f);
            l.dec.push(DecLayerIdx { ln1, self_attn, ln2, cross, ln3, ffn });
        }
        l.dec_ln = l.ln("dec.ln", d);
        l
    }

    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn ln(&mut self, p: &str, d: usize) -> LnIdx {
        LnIdx {
            g: self.add(format!("{p}.g"), vec![d], Init::Ones),
            b: self.add(format!("{p}.b"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnIdx {
        let mut lin = |n: &str| {
            (
                self.add(format!("{p}.w{n}"), vec![d, d], Init::Xavier),
                self.add(format!("{p}.b{n}"), vec![d], Init::Zeros),
            )
        };
        let (wq, bq) = lin("q");
        let (wk, bk) = lin("k");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("o");
        AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, p: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{p}.w1"), vec![d, f], Init::Xavier),
            b1: self.add(format!("{p}.b1"), vec![f], Init::Zeros),
            w2: self.add(format!("{p}.w2"), vec![f, d], Init::Xavier),
            b2: self.add(format!("{p}.b2"), vec![d], Init::Zeros),
        }
    }
}

/// Sinusoidal position table `[max_positions, d_model]`.
fn sinusoids<T: Real>(max_positions: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[max_positions, d], |i| {
        let (pos, c) = (i / d, i % d);
        let freq = 1.0 / 10000f64.powf((c - c % 2) as f64 / d as f64);
        let angle = pos as f64 * freq;
        T::from_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Parameters plus the fixed position table.
#[derive(Clone, Debug)]
pub struct ModelState<T: Real = f32> {
    config: TransformerConfig,
    params: Vec<Tensor<T>>,
    layout: Layout,
    positions: Tensor<T>,
}

/// Per-layer activations and attention maps of one forward pass.
///
/// Layer outputs are residual-stream values `[batch, len, d_model]`;
/// attention maps are `[batch, heads, q_len, k_len]`.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Real = f32> {
    pub enc_layer_outputs: Vec<Tensor<T>>,
    pub dec_layer_outputs: Vec<Tensor<T>>,
    pub enc_self_attn: Vec<Tensor<T>>,
    pub dec_self_attn: Vec<Tensor<T>>,
    pub dec_cross_attn: Vec<Tensor<T>>,
    /// Encoder input ids `[batch, src_len]` (key labels of encoder attention).
    pub src_ids: Vec<u32>,
    /// Decoder input ids `[batch, tgt_len]`.
    pub tgt_in_ids: Vec<u32>,
}

/// Final encoder states for one source sentence.
#[derive(Clone, Debug)]
pub struct EncoderMemory<T: Real = f32> {
    pub states: Tensor<T>,
    pub src_ids: Vec<u32>,
}

struct Encoded {
    memory: Var,
    layer_outputs: Vec<Var>,
    attn: Vec<Var>,
}

struct Decoded {
    hidden: Var,
    layer_outputs: Vec<Var>,
    self_attn: Vec<Var>,
    cross_attn: Vec<Var>,
}

/// One forward recording over a parameter list.
struct Ctx<'a, T: Real> {
    g: Graph<T>,
    p: Vec<Var>,
    cfg: &'a TransformerConfig,
    layout: &'a Layout,
    positions: &'a Tensor<T>,
    dropout: f64,
}

impl<'a, T: Real> Ctx<'a, T> {
    fn new(state: &'a ModelState<T>, params: &[Tensor<T>], trainable: bool, dropout_seed: Option<u64>) -> Self {
        let mut g = match dropout_seed {
            Some(s) => Graph::with_dropout_seed(s),
            None => Graph::new(),
        };
        let p = params.iter().map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) }).collect();
        let dropout = if dropout_seed.is_some() { state.config.dropout } else { 0.0 };
        Ctx { g, p, cfg: &state.config, layout: &state.layout, positions: &state.positions, dropout }
    }

    fn embed(&mut self, table: usize, ids: &[u32], len: usize) -> Result<Var, ModelError> {
        let d = self.cfg.d_model;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = self.g.gather_rows(self.p[table], &idx)?;
        let x = self.g.scale(x, T::from_f64((d as f64).sqrt()))?;
        let pos = Tensor::from_fn(&[ids.len(), d], |i| self.positions.data()[((i / d) % len) * d + i % d]);
        let pos = self.g.input(pos);
        let x = self.g.add(x, pos)?;
        Ok(self.g.dropout(x, self.dropout)?)
    }

    fn ln(&mut self, x: Var, p: LnIdx) -> Result<Var, ModelError> {
        Ok(self.g.layer_norm(x, self.p[p.g], self.p[p.b], T::from_f64(LN_EPS))?)
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Result<Var, ModelError> {
        let y = self.g.matmul(x, self.p[w])?;
        Ok(self.g.add_row(y, self.p[b])?)
    }

    /// Returns the projected output and the attention node.
    fn mha(&mut self, xq: Var, xkv: Var, a: AttnIdx, spec: AttentionSpec) -> Result<(Var, Var), ModelError> {
        let q = self.linear(xq, a.wq, a.bq)?;
        let k = self.linear(xkv, a.wk, a.bk)?;
        let v = self.linear(xkv, a.wv, a.bv)?;
        let att = self.g.attention(q, k, v, spec)?;
        Ok((self.linear(att, a.wo, a.bo)?, att))
    }

    fn residual(&mut self, x: Var, sub: Var) -> Result<Var, ModelError> {
        let sub = self.g.dropout(sub, self.dropout)?;
        Ok(self.g.add(x, sub)?)
    }

    fn ffn(&mut self, x: Var, f: FfnIdx) -> Result<Var, ModelError> {
        let h = self.linear(x, f.w1, f.b1)?;
        let h = self.g.relu(h)?;
        let h = self.g.dropout(h, self.dropout)?;
        self.linear(h, f.w2, f.b2)
    }

    fn encode(&mut self, src: &[u32], batch: usize, len: usize) -> Result<Encoded, ModelError> {
        let pad: Vec<bool> = src.iter().map(|&t| t == PAD).collect();
        let mut x = self.embed(self.layout.src_embed, src, len)?;
        let (mut layer_outputs, mut attn) = (Vec::new(), Vec::new());
        for l in self.layout.enc.clone() {
            let h = self.ln(x, l.ln1)?;
            let spec = AttentionSpec {
                batch,
                q_len: len,
                k_len: len,
                heads: self.cfg.heads,
                causal: false,
                key_padding: pad.clone(),
            };
            let (a, w) = self.mha(h, h, l.attn, spec)?;
            x = self.residual(x, a)?;
            let h = self.ln(x, l.ln2)?;
            let f = self.ffn(h, l.ffn)?;
            x = self.residual(x, f)?;
            layer_outputs.push(x);
            attn.push(w);
        }
        let memory = self.ln(x, self.layout.enc_ln)?;
        Ok(Encoded { memory, layer_outputs, attn })
    }

    fn decode(
        &mut self,
        memory: Var,
        src_pad: &[bool],
        src_len: usize,
        tgt_in: &[u32],
        batch: usize,
        len: usize,
    ) -> Result<Decoded, ModelError> {
        let tgt_pad: Vec<bool> = tgt_in.iter().map(|&t| t == PAD).collect();
        let mut x = self.embed(self.layout.tgt_embed, tgt_in, len)?;
        let mut out = Decoded { hidden: x, layer_outputs: Vec::new(), self_attn: Vec::new(), cross_attn: Vec::new() };
        for l in self.layout.dec.clone() {
            let h = self.ln(x, l.ln1)?;
            let spec = AttentionSpec {
                batch,
                q_len: len,
                k_len: len,
                heads: self.cfg.heads,
                causal: true,
                key_padding: tgt_pad.clone(),
            };
            let (a, w) = self.mha(h, h, l.self_attn, spec)?;
            x = self.residual(x, a)?;
            out.self_attn.push(w);
            let h = self.ln(x, l.ln2)?;
            let spec = AttentionSpec {
                batch,
                q_len: len,
                k_len: src_len,
                heads: self.cfg.heads,
                causal: false,
                key_padding: src_pad.to_vec(),
            };
            let (a, w) = self.mha(h, memory, l.cross, spec)?;
            x = self.residual(x, a)?;
            out.cross_attn.push(w);
            let h = self.ln(x, l.ln3)?;
            let f = self.ffn(h, l.ffn)?;
            x = self.residual(x, f)?;
            out.layer_outputs.push(x);
        }
        out.hidden = self.ln(x, self.layout.dec_ln)?;
        Ok(out)
    }

    fn logits(&mut self, hidden: Var) -> Result<Var, ModelError> {
        Ok(self.g.matmul_t(hidden, self.p[self.layout.out_proj], false, true)?)
    }

    fn attn_tensor(&self, var: Var) -> Tensor<T> {
        let (spec, probs) = self.g.attention_weights(var).expect("attention node");
        Tensor::new(vec![spec.batch, spec.heads, spec.q_len, spec.k_len], probs.to_vec()).expect("attention shape")
    }

    fn layer_tensor(&self, var: Var, batch: usize, len: usize) -> Tensor<T> {
        self.g.value(var).clone().reshape(&[batch, len, self.cfg.d_model]).expect("layer shape")
    }
}

impl<T: Real> ModelState<T> {
    /// Xavier-uniform matrices, unit gains, zero biases; deterministic in `seed`.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(shape, init)| match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
                Init::Xavier => {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
                }
            })
            .collect();
        Ok(Self::from_params(config, params))
    }

    fn from_params(config: TransformerConfig, params: Vec<Tensor<T>>) -> Self {
        let layout = Layout::new(&config);
        let positions = sinusoids(config.max_positions, config.d_model);
        ModelState { config, params, layout, positions }
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Output-projection / target embedding table `[vocab, d_model]`.
    pub fn embedding_table(&self) -> &Tensor<T> {
        &self.params[self.layout.src_embed]
    }

    /// Order-sensitive FNV-1a checksum over parameter bytes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = Vec::new();
        for p in &self.params {
            buf.clear();
            for &x in p.data() {
                x.write_le(&mut buf);
            }
            for &b in &buf {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState::from_params(self.config.clone(), self.params.iter().map(Tensor::cast).collect())
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.size == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let max = self.config.max_positions;
        for len in [batch.src_len, batch.tgt_len] {
            if len > max {
                return Err(ModelError::TooLong { len, max });
            }
        }
        let vocab = self.config.vocab_size;
        for &id in batch.src_ids.iter().chain(&batch.tgt_in_ids).chain(&batch.tgt_out_ids) {
            if id as usize >= vocab {
                return Err(ModelError::BadToken { id, vocab });
            }
        }
        Ok(())
    }

    /// Inference-mode forward: logits `[batch, tgt_len, vocab]`.
    pub fn forward(
        &self,
        batch: &Batch,
        capture_trace: bool,
    ) -> Result<(Tensor<T>, Option<ForwardTrace<T>>), ModelError> {
        self.check_batch(batch)?;
        let mut cx = Ctx::new(self, &self.params, false, None);
        let (b, s, t) = (batch.size, batch.src_len, batch.tgt_len);
        let enc = cx.encode(&batch.src_ids, b, s)?;
        let src_pad = batch.src_padding();
        let dec = cx.decode(enc.memory, &src_pad, s, &batch.tgt_in_ids, b, t)?;
        let logits = cx.logits(dec.hidden)?;
        let out = cx.g.value(logits).clone().reshape(&[b, t, self.config.vocab_size])?;
        let trace = capture_trace.then(|| ForwardTrace {
            enc_layer_outputs: enc.layer_outputs.iter().map(|&v| cx.layer_tensor(v, b, s)).collect(),
            dec_layer_outputs: dec.layer_outputs.iter().map(|&v| cx.layer_tensor(v, b, t)).collect(),
            enc_self_attn: enc.attn.iter().map(|&v| cx.attn_tensor(v)).collect(),
            dec_self_attn: dec.self_attn.iter().map(|&v| cx.attn_tensor(v)).collect(),
            dec_cross_attn: dec.cross_attn.iter().map(|&v| cx.attn_tensor(v)).collect(),
            src_ids: batch.src_ids.clone(),
            tgt_in_ids: batch.tgt_in_ids.clone(),
        });
        Ok((out, trace))
    }

    /// Label-smoothed loss over non-PAD targets, evaluated at `params`.
    /// With `dropout_seed` the pass runs in training mode.
    pub fn loss_at(
        &self,
        params: &[Tensor<T>],
        batch: &Batch,
        smoothing: f64,
        dropout_seed: Option<u64>,
    ) -> Result<f64, ModelError> {
        self.check_batch(batch)?;
        let mut cx = Ctx::new(self, params, false, dropout_seed);
        let loss = Self::loss_graph(&mut cx, batch, smoothing)?;
        Ok(cx.g.loss_f64(loss).expect("cross-entropy node"))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        smoothing: f64,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<Tensor<T>>), ModelError> {
        self.check_batch(batch)?;
        let mut cx = Ctx::new(self, &self.params, true, dropout_seed);
        let loss = Self::loss_graph(&mut cx, batch, smoothing)?;
        let value = cx.g.loss_f64(loss).expect("cross-entropy node");
        let mut grads = cx.g.backward(loss)?;
        let out = cx.p.iter().zip(&self.params).map(|(&v, p)| grads.take_or_zeros(v, p.shape())).collect();
        Ok((value, out))
    }

    fn loss_graph(cx: &mut Ctx<'_, T>, batch: &Batch, smoothing: f64) -> Result<Var, ModelError> {
        let (b, s, t) = (batch.size, batch.src_len, batch.tgt_len);
        let enc = cx.encode(&batch.src_ids, b, s)?;
        let dec = cx.decode(enc.memory, &batch.src_padding(), s, &batch.tgt_in_ids, b, t)?;
        let logits = cx.logits(dec.hidden)?;
        Ok(cx.g.cross_entropy(logits, &batch.tgt_out_ids, smoothing, Some(PAD))?)
    }

    /// Runs the encoder on `src` (which must already end in EOS).
    pub fn encode(&self, src: &[u32]) -> Result<EncoderMemory<T>, ModelError> {
        let batch = Batch::from_sequences(&[(src.to_vec(), vec![BOS])])?;
        self.check_batch(&batch)?;
        let mut cx = Ctx::new(self, &self.params, false, None);
        let enc = cx.encode(src, 1, src.len())?;
        Ok(EncoderMemory { states: cx.g.value(enc.memory).clone(), src_ids: src.to_vec() })
    }

    /// Log-probabilities of the next token after each equal-length prefix.
    pub fn next_token_logprobs(
        &self,
        memory: &EncoderMemory<T>,
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let Some(first) = prefixes.first() else { return Err(ModelError::EmptyBatch) };
        let (n, t) = (prefixes.len(), first.len());
        if prefixes.iter().any(|p| p.len() != t) || t == 0 {
            return Err(ModelError::InvalidConfig("prefixes must be nonempty and of equal length".into()));
        }
        if t > self.config.max_positions {
            return Err(ModelError::TooLong { len: t, max: self.config.max_positions });
        }
        let vocab = self.config.vocab_size;
        if let Some(&id) = prefixes.iter().flatten().find(|&&id| id as usize >= vocab) {
            return Err(ModelError::BadToken { id, vocab });
        }
        let s = memory.src_ids.len();
        let d = self.config.d_model;
        let mut cx = Ctx::new(self, &self.params, false, None);
        let mem = Tensor::from_fn(&[n * s, d], |i| memory.states.data()[i % (s * d)]);
        let mem = cx.g.input(mem);
        let src_pad: Vec<bool> = (0..n).flat_map(|_| memory.src_ids.iter().map(|&x| x == PAD)).collect();
        let tgt: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let dec = cx.decode(mem, &src_pad, s, &tgt, n, t)?;
        let last: Vec<usize> = (0..n).map(|i| i * t + t - 1).collect();
        let h = cx.g.gather_rows(dec.hidden, &last)?;
        let logits = cx.logits(h)?;
        let z = cx.g.value(logits);
        Ok((0..n).map(|i| log_softmax(z.row(i))).collect())
    }
}

fn log_softmax<T: Real>(z: &[T]) -> Vec<f64> {
    let max = z.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x.as_f64() - lse).collect()
}

/// Appends EOS to a source id sequence.
pub fn source_sequence(ids: &[u32]) -> Vec<u32> {
    let mut v = ids.to_vec();
    v.push(EOS);
    v
}

#[cfg(test)]
mod tests;

//! A small decoder-only causal transformer whose attention accepts
//! prepended per-layer key/value prefixes, plus the sequence encoder used by
//! the unsupervised and semi-supervised regimes.
//!
//! Two forward implementations exist on purpose: a batched full-context
//! forward and an incremental cached decode. They are checked against each
//! other (and against a loop-written reference) in the integration tests.

pub mod build;
pub mod cache;

use crate::error::{Error, Result};
use crate::graph::gelu_scalar;
use crate::rng::SeededRng;
use crate::sampling::{sample_token, SamplingParams};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, Tensor};

pub use cache::KvCache;

/// Architecture of a decoder. The activation dim is derived: one key and one
/// value vector per layer, so D = 2 * num_layers * hidden_size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

/// Reserved token ids, fixed across the repo.
pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;

impl ModelConfig {
    /// Desk-scale base decoder: trains in minutes on two cores.
    pub fn desk() -> Self {
        Self { num_layers: 4, hidden_size: 128, num_heads: 4, vocab_size: 64, max_positions: 128 }
    }

    /// Larger decoder used only to score perplexity of generations.
    pub fn eval_lm() -> Self {
        Self { num_layers: 6, hidden_size: 256, num_heads: 8, vocab_size: 64, max_positions: 128 }
    }

    pub fn activation_dim(&self) -> usize {
        2 * self.num_layers * self.hidden_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_size == 0 || self.num_heads == 0 {
            return Err(Error::Config("layers, hidden size and heads must be positive".into()));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads {} must divide hidden_size {}",
                self.num_heads, self.hidden_size
            )));
        }
        if self.vocab_size <= BOS_ID as usize {
            return Err(Error::Config("vocab must include PAD, MASK and BOS ids".into()));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        Ok(())
    }

    /// Exact number of parameters a decoder with this config carries.
    pub fn param_count(&self) -> usize {
        let e = self.hidden_size;
        let v = self.vocab_size;
        let per_layer = 2 * (2 * e) // ln1, ln2 gain+bias
            + 3 * (e * e + e)       // q, k, v projections with bias
            + (e * e + e)           // attention output projection
            + (e * 4 * e + 4 * e)   // ffn in
            + (4 * e * e + e); // ffn out
        v * e                        // wte
            + self.max_positions * e // wpe
            + self.num_layers * per_layer
            + 2 * e                  // final layer norm
            + e * v // untied output head
    }
}

/// Ordered, named parameter tensors. Order is fixed at construction and is
/// the serialization order.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, t: Tensor<T>) {
        debug_assert!(self.index_of(name).is_none(), "duplicate param {name}");
        self.entries.push((name.to_string(), t));
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        let i = self.index_of(name).unwrap_or_else(|| panic!("missing param {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.index_of(name).unwrap_or_else(|| panic!("missing param {name}"));
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), &mut *t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Content digest over the f32 little-endian image of every tensor.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.to_f32_vec() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-layer key/value activations prepended before real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixKv<T> {
    /// One (key block, value block) per layer, each `m_total x hidden_size`.
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> PrefixKv<T> {
    /// Split a flat `m x d` prefix block into per-layer key/value blocks.
    /// Column layout is layer-major, key before value within each layer.
    pub fn from_rows(rows: &Tensor<T>, config: &ModelConfig) -> Result<Self> {
        let e = config.hidden_size;
        if rows.cols() != config.activation_dim() {
            return Err(Error::Shape(format!(
                "prefix width {} does not match activation dim {}",
                rows.cols(),
                config.activation_dim()
            )));
        }
        if !rows.is_finite() {
            return Err(Error::NonFinite("prefix rows".into()));
        }
        let m = rows.rows();
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut k = Tensor::zeros(m, e);
            let mut v = Tensor::zeros(m, e);
            for j in 0..m {
                let row = rows.row(j);
                k.row_mut(j).copy_from_slice(&row[2 * l * e..(2 * l + 1) * e]);
                v.row_mut(j).copy_from_slice(&row[(2 * l + 1) * e..(2 * l + 2) * e]);
            }
            layers.push((k, v));
        }
        Ok(Self { layers })
    }

    pub fn empty(config: &ModelConfig) -> Self {
        let e = config.hidden_size;
        Self {
            layers: (0..config.num_layers)
                .map(|_| (Tensor::zeros(0, e), Tensor::zeros(0, e)))
                .collect(),
        }
    }

    pub fn m_total(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.rows())
    }

    /// Concatenate along the position axis, in argument order.
    pub fn concat(parts: &[&PrefixKv<T>]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat of zero prefixes".into()));
        }
        let num_layers = parts[0].layers.len();
        let e = parts[0].layers[0].0.cols();
        for p in parts {
            if p.layers.len() != num_layers || p.layers[0].0.cols() != e {
                return Err(Error::Shape("prefix parts disagree on layer count or width".into()));
            }
        }
        let m_total: usize = parts.iter().map(|p| p.m_total()).sum();
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mut k = Tensor::zeros(m_total, e);
            let mut v = Tensor::zeros(m_total, e);
            let mut at = 0;
            for p in parts {
                let (pk, pv) = &p.layers[l];
                for j in 0..pk.rows() {
                    k.row_mut(at + j).copy_from_slice(pk.row(j));
                    v.row_mut(at + j).copy_from_slice(pv.row(j));
                }
                at += pk.rows();
            }
            layers.push((k, v));
        }
        Ok(Self { layers })
    }
}

pub(crate) fn init_body<T: Scalar>(
    params: &mut ParamSet<T>,
    config: &ModelConfig,
    rng: &mut SeededRng,
) {
    let e = config.hidden_size;
    params.push("wte", Tensor::randn(config.vocab_size, e, 0.02, rng));
    params.push("wpe", Tensor::randn(config.max_positions, e, 0.01, rng));
    for l in 0..config.num_layers {
        params.push(&format!("l{l}.ln1.g"), Tensor::full(1, e, T::one()));
        params.push(&format!("l{l}.ln1.b"), Tensor::zeros(1, e));
        params.push(&format!("l{l}.wq"), Tensor::randn(e, e, 0.02, rng));
        params.push(&format!("l{l}.bq"), Tensor::zeros(1, e));
        params.push(&format!("l{l}.wk"), Tensor::randn(e, e, 0.02, rng));
        params.push(&format!("l{l}.bk"), Tensor::zeros(1, e));
        params.push(&format!("l{l}.wv"), Tensor::randn(e, e, 0.02, rng));
        params.push(&format!("l{l}.bv"), Tensor::zeros(1, e));
        params.push(&format!("l{l}.wo"), Tensor::randn(e, e, 0.02, rng));
        params.push(&format!("l{l}.bo"), Tensor::zeros(1, e));
        params.push(&format!("l{l}.ln2.g"), Tensor::full(1, e, T::one()));
        params.push(&format!("l{l}.ln2.b"), Tensor::zeros(1, e));
        params.push(&format!("l{l}.w1"), Tensor::randn(e, 4 * e, 0.02, rng));
        params.push(&format!("l{l}.b1"), Tensor::zeros(1, 4 * e));
        params.push(&format!("l{l}.w2"), Tensor::randn(4 * e, e, 0.02, rng));
        params.push(&format!("l{l}.b2"), Tensor::zeros(1, e));
    }
    params.push("lnf.g", Tensor::full(1, e, T::one()));
    params.push("lnf.b", Tensor::zeros(1, e));
}

/// Transformer body shared by decoder and encoder: embeddings, pre-norm
/// blocks, final layer norm. Returns hidden states, one row per input token.
fn body_forward<T: Scalar>(
    params: &ParamSet<T>,
    config: &ModelConfig,
    tokens: &[u32],
    prefix: Option<&PrefixKv<T>>,
) -> Tensor<T> {
    let m_total = prefix.map_or(0, PrefixKv::m_total);
    let t = tokens.len();
    let e = config.hidden_size;
    let wte = params.get("wte");
    let wpe = params.get("wpe");
    let mut x = Tensor::zeros(t, e);
    for (i, &tok) in tokens.iter().enumerate() {
        let xr = x.row_mut(i);
        xr.copy_from_slice(wte.row(tok as usize));
        for (a, b) in xr.iter_mut().zip(wpe.row(m_total + i)) {
            *a += *b;
        }
    }
    for l in 0..config.num_layers {
        let ln1 =
            layer_norm_rows(&x, params.get(&format!("l{l}.ln1.g")), params.get(&format!("l{l}.ln1.b")));
        let q = linear(&ln1, params.get(&format!("l{l}.wq")), params.get(&format!("l{l}.bq")));
        let k = linear(&ln1, params.get(&format!("l{l}.wk")), params.get(&format!("l{l}.bk")));
        let v = linear(&ln1, params.get(&format!("l{l}.wv")), params.get(&format!("l{l}.bv")));
        let att = match prefix {
            Some(p) => {
                let (pk, pv) = &p.layers[l];
                let kc = vstack(pk, &k);
                let vc = vstack(pv, &v);
                attention_forward(&q, &kc, &vc, config.num_heads, m_total)
            }
            None => attention_forward(&q, &k, &v, config.num_heads, 0),
        };
        let proj = linear(&att, params.get(&format!("l{l}.wo")), params.get(&format!("l{l}.bo")));
        x.add_assign(&proj);
        let ln2 =
            layer_norm_rows(&x, params.get(&format!("l{l}.ln2.g")), params.get(&format!("l{l}.ln2.b")));
        let mut h = linear(&ln2, params.get(&format!("l{l}.w1")), params.get(&format!("l{l}.b1")));
        for v in h.as_mut_slice() {
            *v = gelu_scalar(*v);
        }
        let ff = linear(&h, params.get(&format!("l{l}.w2")), params.get(&format!("l{l}.b2")));
        x.add_assign(&ff);
    }
    layer_norm_rows(&x, params.get("lnf.g"), params.get("lnf.b"))
}

/// The decoder. Weights are plain tensors; training happens through the
/// graph builders in [`build`], inference through the methods here.
#[derive(Clone, Debug)]
pub struct TransformerLm<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> TransformerLm<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(seed, "model-init", &[]);
        let mut params = ParamSet::new();
        init_body(&mut params, &config, &mut rng);
        params.push("head", Tensor::randn(config.hidden_size, config.vocab_size, 0.02, &mut rng));
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Test knob: disable absolute positions, making prefix order an exact
    /// symmetry of attention.
    pub fn zero_position_embeddings(&mut self) {
        let wpe = self.params.get_mut("wpe");
        *wpe = Tensor::zeros(wpe.rows(), wpe.cols());
    }

    fn check_input(&self, tokens: &[u32], m_total: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if m_total + tokens.len() > self.config.max_positions {
            return Err(Error::LengthOverflow {
                len: tokens.len(),
                prefix: m_total,
                max: self.config.max_positions,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocab")));
        }
        Ok(())
    }

    fn check_prefix(&self, prefix: Option<&PrefixKv<T>>) -> Result<()> {
        if let Some(p) = prefix {
            if p.layers.len() != self.config.num_layers {
                return Err(Error::Shape("prefix layer count mismatch".into()));
            }
            for (k, v) in &p.layers {
                if !k.is_finite() || !v.is_finite() {
                    return Err(Error::NonFinite("prefix activations".into()));
                }
            }
        }
        Ok(())
    }

    /// Full-context forward. Returns logits for every input position; real
    /// tokens occupy absolute positions `m_total .. m_total + T`.
    pub fn forward_full(&self, tokens: &[u32], prefix: Option<&PrefixKv<T>>) -> Result<Tensor<T>> {
        let m_total = prefix.map_or(0, PrefixKv::m_total);
        self.check_input(tokens, m_total)?;
        self.check_prefix(prefix)?;
        let hidden = body_forward(&self.params, &self.config, tokens, prefix);
        let logits = matmul_nn(&hidden, self.params.get("head"));
        if !logits.is_finite() {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        Ok(logits)
    }

    /// Teacher-forced per-token log-probabilities of `seq` and their sum.
    /// Internally the decoder reads [BOS, seq[..T-1]] and scores `seq`.
    pub fn sequence_log_prob(&self, seq: &[u32], prefix: Option<&PrefixKv<T>>) -> Result<(Vec<T>, T)> {
        self.sequence_log_prob_masked(seq, seq, prefix)
    }

    /// Same, with a separate (possibly masked) input stream; targets stay
    /// unmasked.
    pub fn sequence_log_prob_masked(
        &self,
        inputs: &[u32],
        targets: &[u32],
        prefix: Option<&PrefixKv<T>>,
    ) -> Result<(Vec<T>, T)> {
        if inputs.len() != targets.len() {
            return Err(Error::InvalidInput("input/target length mismatch".into()));
        }
        if targets.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        let shifted = shift_right_with_bos(inputs);
        let logits = self.forward_full(&shifted, prefix)?;
        let mut per_token = Vec::with_capacity(targets.len());
        let mut total = T::zero();
        for (i, &target) in targets.iter().enumerate() {
            let lp = log_softmax_pick(logits.row(i), target as usize);
            per_token.push(lp);
            total += lp;
        }
        Ok((per_token, total))
    }

    /// Autoregressive sampling with incremental key/value caching: the
    /// context is consumed once and each new token costs a single-row pass.
    pub fn generate(
        &self,
        prompt: &[u32],
        prefix: Option<&PrefixKv<T>>,
        sp: &SamplingParams,
    ) -> Result<Vec<u32>> {
        sp.validate()?;
        let mut out = prompt.to_vec();
        if sp.max_new == 0 {
            return Ok(out);
        }
        let m_total = prefix.map_or(0, PrefixKv::m_total);
        self.check_prefix(prefix)?;
        let context = gen_context(prompt);
        self.check_input(&context, m_total)?;
        let fed0 = context.len();
        let mut cache = KvCache::new(self, prefix)?;
        let mut rng = SeededRng::derive(sp.seed, "generate", &[]);
        let mut logits_row = Vec::new();
        for &tok in &context {
            logits_row = cache.step(self, tok)?;
        }
        for k in 0..sp.max_new {
            let next = sample_token(&logits_row, sp, &mut rng);
            out.push(next);
            if k + 1 == sp.max_new || m_total + fed0 + k + 1 > self.config.max_positions {
                break;
            }
            logits_row = cache.step(self, next)?;
        }
        Ok(out)
    }

    /// Reference decoding path: re-runs the full forward for every token.
    pub fn generate_uncached(
        &self,
        prompt: &[u32],
        prefix: Option<&PrefixKv<T>>,
        sp: &SamplingParams,
    ) -> Result<Vec<u32>> {
        sp.validate()?;
        let mut out = prompt.to_vec();
        if sp.max_new == 0 {
            return Ok(out);
        }
        let m_total = prefix.map_or(0, PrefixKv::m_total);
        let fed0 = prompt.len() + 1;
        let mut rng = SeededRng::derive(sp.seed, "generate", &[]);
        for k in 0..sp.max_new {
            if m_total + fed0 + k > self.config.max_positions {
                break;
            }
            let context = gen_context(&out);
            let logits = self.forward_full(&context, prefix)?;
            let next = sample_token(logits.row(logits.rows() - 1), sp, &mut rng);
            out.push(next);
        }
        Ok(out)
    }
}

/// The sequence encoder: a transformer body of the decoder's architecture
/// plus a linear head mapping the pooled final hidden state to a
/// prefix-shaped embedding of dimension m * d.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub config: ModelConfig,
    pub prefix_len: usize,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Body weights start from the frozen decoder; the head starts small.
    pub fn from_decoder(decoder: &TransformerLm<T>, prefix_len: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        for (name, t) in decoder.params.iter() {
            if name != "head" {
                params.push(name, t.clone());
            }
        }
        let mut rng = SeededRng::derive(seed, "encoder-init", &[]);
        let e = decoder.config.hidden_size;
        let out_dim = prefix_len * decoder.config.activation_dim();
        params.push("enc_head.w", Tensor::randn(e, out_dim, 0.02, &mut rng));
        params.push("enc_head.b", Tensor::zeros(1, out_dim));
        Self { config: decoder.config.clone(), prefix_len, params }
    }

    pub fn output_dim(&self) -> usize {
        self.prefix_len * self.config.activation_dim()
    }

    /// Deterministic sequence embedding: hidden state at the last non-PAD
    /// position, mapped by the linear head. Returns a [1 x m*d] tensor.
    pub fn encode(&self, seq: &[u32]) -> Result<Tensor<T>> {
        if seq.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if seq.len() > self.config.max_positions {
            return Err(Error::LengthOverflow {
                len: seq.len(),
                prefix: 0,
                max: self.config.max_positions,
            });
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocab")));
        }
        let hidden = body_forward(&self.params, &self.config, seq, None);
        let pool = last_non_pad(seq);
        let pooled = Tensor::from_vec(1, hidden.cols(), hidden.row(pool).to_vec());
        let mut out = matmul_nn(&pooled, self.params.get("enc_head.w"));
        for (o, b) in out.as_mut_slice().iter_mut().zip(self.params.get("enc_head.b").row(0)) {
            *o += *b;
        }
        if !out.is_finite() {
            return Err(Error::NonFinite("encoder embedding".into()));
        }
        Ok(out)
    }
}

/// Decoder input for scoring: BOS then all but the last token.
pub fn shift_right_with_bos(seq: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(seq.len().max(1));
    v.push(BOS_ID);
    if !seq.is_empty() {
        v.extend_from_slice(&seq[..seq.len() - 1]);
    }
    v
}

/// Decoder input for generation: BOS then the whole context; the last row's
/// logits predict the next token.
pub fn gen_context(seq: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(seq.len() + 1);
    v.push(BOS_ID);
    v.extend_from_slice(seq);
    v
}

pub fn last_non_pad(seq: &[u32]) -> usize {
    seq.iter().rposition(|&t| t != PAD_ID).unwrap_or(0)
}

pub(crate) fn vstack<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.cols(), b.cols());
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    Tensor::from_vec(a.rows() + b.rows(), a.cols(), data)
}

pub(crate) fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = matmul_nn(x, w);
    for r in 0..out.rows() {
        for (o, bv) in out.row_mut(r).iter_mut().zip(b.row(0)) {
            *o += *bv;
        }
    }
    out
}

pub(crate) fn layer_norm_rows<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let n = x.cols();
    let eps = T::from_f64(1e-5);
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut out = Tensor::zeros(x.rows(), n);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut mean = T::zero();
        for v in row {
            mean += *v;
        }
        mean *= inv_n;
        let mut var = T::zero();
        for v in row {
            let d = *v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv_std = (var + eps).sqrt().recip();
        let orow = out.row_mut(r);
        for j in 0..n {
            orow[j] = (row[j] - mean) * inv_std * gain.row(0)[j] + bias.row(0)[j];
        }
    }
    out
}

/// Causal multi-head attention; query i attends keys 0..=key_offset+i.
/// Loop order matches the graph op and the incremental cache exactly, so the
/// three paths agree to the last bit.
pub(crate) fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    key_offset: usize,
) -> Tensor<T> {
    let t = q.rows();
    let e = q.cols();
    let hd = e / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut out = Tensor::zeros(t, e);
    let mut weights = vec![T::zero(); key_offset + t];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t {
            let limit = key_offset + i + 1;
            let qrow = &q.row(i)[off..off + hd];
            let mut maxv = T::neg_infinity();
            for (j, w) in weights.iter_mut().enumerate().take(limit) {
                let krow = &k.row(j)[off..off + hd];
                let mut dot = T::zero();
                for (a, b) in qrow.iter().zip(krow) {
                    dot += *a * *b;
                }
                *w = dot * scale;
                if *w > maxv {
                    maxv = *w;
                }
            }
            let mut denom = T::zero();
            for w in weights.iter_mut().take(limit) {
                *w = (*w - maxv).exp();
                denom += *w;
            }
            let inv = denom.recip();
            let orow = &mut out.row_mut(i)[off..off + hd];
            for (j, w) in weights.iter().enumerate().take(limit) {
                let wv = *w * inv;
                let vrow = &v.row(j)[off..off + hd];
                for (o, val) in orow.iter_mut().zip(vrow) {
                    *o += wv * *val;
                }
            }
        }
    }
    out
}

pub(crate) fn log_softmax_pick<T: Scalar>(row: &[T], target: usize) -> T {
    let mut maxv = T::neg_infinity();
    for v in row {
        if *v > maxv {
            maxv = *v;
        }
    }
    let mut denom = T::zero();
    for v in row {
        denom += (*v - maxv).exp();
    }
    row[target] - maxv - denom.ln()
}

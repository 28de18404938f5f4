//! Loss terms and stochastic relaxations: language-model loss, the
//! discriminative loss over per-prefix sequence scores, KL to the uniform
//! prior, the margin hinge between decoder posteriors, the encoder
//! cross-entropy, Gumbel-Softmax posteriors, token masking, and the
//! kl-weight/temperature schedules.
//!
//! Each operation exists twice where training needs gradients: a value-level
//! form here (used by evaluation and as the contract surface) and a graph
//! builder (used by the trainer). Tests pin the two to each other.

use crate::bank::PrefixBank;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PrefixKv, TransformerLm, MASK_ID};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the hinge distance between attract and repel posterior gathers is
/// taken: over the per-index weighted posterior vectors, or between the two
/// scalar gathered masses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastNorm {
    Vector,
    Scalar,
}

impl std::str::FromStr for ContrastNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(Self::Vector),
            "scalar" => Ok(Self::Scalar),
            _ => Err(Error::Config(format!("contrast norm `{s}` not one of vector|scalar"))),
        }
    }
}

impl std::fmt::Display for ContrastNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vector => "vector",
            Self::Scalar => "scalar",
        })
    }
}

/// Loss weights, margin, mask rate and schedule endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub margin: f64,
    pub mask_rate: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub kl_start: f64,
    pub kl_end: f64,
    pub schedule_steps: usize,
    pub contrast_norm: ContrastNorm,
    /// Score per-token mean instead of raw sums in the discriminative loss.
    pub length_norm_scores: bool,
}

impl ObjectiveConfig {
    pub fn supervised() -> Self {
        Self {
            omega1: 0.8,
            omega2: 0.2,
            omega3: 0.0,
            margin: 1.0,
            mask_rate: 0.0,
            tau_start: 1.0,
            tau_end: 0.5,
            kl_start: 0.001,
            kl_end: 0.1,
            schedule_steps: 1,
            contrast_norm: ContrastNorm::Vector,
            length_norm_scores: false,
        }
    }

    pub fn unsupervised() -> Self {
        Self { omega1: 0.8, omega2: 0.0, omega3: 2.0, mask_rate: 0.5, ..Self::supervised() }
    }

    /// Joint-phase weights; the warm phase trains the encoder alone.
    pub fn semi_supervised() -> Self {
        Self { omega1: 0.8, omega2: 0.2, omega3: 0.4, ..Self::supervised() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("omega1", self.omega1), ("omega2", self.omega2), ("omega3", self.omega3)]
        {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative real")));
            }
        }
        if self.margin <= 0.0 {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask_rate {} outside [0, 1]", self.mask_rate)));
        }
        for (name, v) in [
            ("tau_start", self.tau_start),
            ("tau_end", self.tau_end),
            ("kl_start", self.kl_start),
            ("kl_end", self.kl_end),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("schedule endpoint {name} must be positive")));
            }
        }
        Ok(())
    }

    /// (kl_weight, tau) at a step: linear interpolation, clamped at the ends.
    pub fn schedule(&self, step: usize) -> (f64, f64) {
        if self.schedule_steps == 0 {
            return (self.kl_start, self.tau_start);
        }
        let frac = (step as f64 / self.schedule_steps as f64).clamp(0.0, 1.0);
        (
            self.kl_start + (self.kl_end - self.kl_start) * frac,
            self.tau_start + (self.tau_end - self.tau_start) * frac,
        )
    }
}

/// A categorical posterior: non-negative, sums to one within 1e-9.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorVector(Vec<f64>);

impl PosteriorVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty posterior".into()));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidInput("posterior entries must be non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("posterior sums to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut v = vec![0.0; n];
        v[index] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// highest-mass index, lowest index on ties
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.0.len() {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best
    }
}

pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|v| v / z).collect()
}

pub fn log_sum_exp_f64(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// softmax((logits + noise) / tau) with explicit noise, the deterministic
/// core of the relaxation.
pub fn gumbel_softmax_with_noise(logits: &[f64], noise: &[f64], tau: f64) -> Result<PosteriorVector> {
    if tau <= 0.0 {
        return Err(Error::InvalidInput(format!("gumbel temperature {tau} must be positive")));
    }
    if logits.len() != noise.len() {
        return Err(Error::Shape("noise length mismatch".into()));
    }
    let scaled: Vec<f64> =
        logits.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
    PosteriorVector::new(softmax_f64(&scaled))
}

pub fn gumbel_noise(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.gumbel()).collect()
}

pub fn gumbel_softmax(logits: &[f64], tau: f64, rng: &mut SeededRng) -> Result<PosteriorVector> {
    let noise = gumbel_noise(logits.len(), rng);
    gumbel_softmax_with_noise(logits, &noise, tau)
}

/// Which side of the latent pairing a posterior selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosteriorSign {
    /// logits = -distance: mass on the nearest prefix
    Attract,
    /// logits = +distance: mass on the farthest prefix
    Repel,
}

/// Euclidean distances between an embedding and every flattened prefix row.
pub fn embedding_distances<T: Scalar>(enc_out: &Tensor<T>, bank: &PrefixBank<T>) -> Result<Vec<f64>> {
    let dim = bank.prefix_len * bank.activation_dim;
    if enc_out.len() != dim {
        return Err(Error::Shape(format!(
            "embedding dim {} does not match bank m*d {dim}",
            enc_out.len()
        )));
    }
    Ok((0..bank.n())
        .map(|i| {
            let flat = bank.flat_row(i);
            let mut acc = 0.0f64;
            for (a, b) in enc_out.as_slice().iter().zip(flat.as_slice()) {
                let d = a.as_f64() - b.as_f64();
                acc += d * d;
            }
            acc.sqrt()
        })
        .collect())
}

pub fn encoder_posterior<T: Scalar>(
    enc_out: &Tensor<T>,
    bank: &PrefixBank<T>,
    tau: f64,
    rng: &mut SeededRng,
    sign: PosteriorSign,
) -> Result<PosteriorVector> {
    let d = embedding_distances(enc_out, bank)?;
    let logits: Vec<f64> = match sign {
        PosteriorSign::Attract => d.iter().map(|x| -x).collect(),
        PosteriorSign::Repel => d,
    };
    gumbel_softmax(&logits, tau, rng)
}

/// Noise-free softmax posterior over negated distances, the form the
/// encoder cross-entropy trains against.
pub fn plain_encoder_posterior<T: Scalar>(
    enc_out: &Tensor<T>,
    bank: &PrefixBank<T>,
) -> Result<PosteriorVector> {
    let d = embedding_distances(enc_out, bank)?;
    let logits: Vec<f64> = d.iter().map(|x| -x).collect();
    PosteriorVector::new(softmax_f64(&logits))
}

/// KL(q || uniform) = sum q_i ln(q_i N), with 0 ln 0 = 0.
pub fn kl_loss(q: &PosteriorVector) -> f64 {
    let n = q.len() as f64;
    q.probs()
        .iter()
        .map(|&p| if p > 0.0 { p * (p * n).ln() } else { 0.0 })
        .sum()
}

/// Decoder posterior over prefixes: softmax over z of the full-sequence
/// scores, computed in log space with max subtraction. Uniform priors
/// cancel.
pub fn exact_posterior<T: Scalar>(
    model: &TransformerLm<T>,
    bank: &PrefixBank<T>,
    seq: &[u32],
) -> Result<PosteriorVector> {
    let scores = sequence_scores(model, bank, seq)?;
    PosteriorVector::new(softmax_f64(&scores))
}

/// Per-prefix full-sequence log-likelihood scores s_z.
pub fn sequence_scores<T: Scalar>(
    model: &TransformerLm<T>,
    bank: &PrefixBank<T>,
    seq: &[u32],
) -> Result<Vec<f64>> {
    (0..bank.n())
        .map(|z| {
            let kv = bank.materialize(z, &model.config)?;
            let (_, total) = model.sequence_log_prob(seq, Some(&kv))?;
            Ok(total.as_f64())
        })
        .collect()
}

/// Margin hinge between two posteriors: max(m - ||p - p_bar||_2, 0)^2.
pub fn contrastive_loss(p: &PosteriorVector, p_bar: &PosteriorVector, margin: f64) -> Result<f64> {
    if p.len() != p_bar.len() {
        return Err(Error::Shape("posterior length mismatch".into()));
    }
    if margin <= 0.0 {
        return Err(Error::InvalidInput("margin must be positive".into()));
    }
    let dist = p
        .probs()
        .iter()
        .zip(p_bar.probs())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok((margin - dist).max(0.0).powi(2))
}

/// Encoder cross-entropy -log q[y].
pub fn encoder_loss(q_sup: &PosteriorVector, y: usize) -> Result<f64> {
    if y >= q_sup.len() {
        return Err(Error::InvalidInput(format!("label {y} out of range")));
    }
    Ok(-q_sup.probs()[y].ln())
}

/// Cross-entropy over attributes of per-prefix scores:
/// -log softmax(s)[y] = logsumexp(s) - s_y.
pub fn discriminative_loss_from_scores(scores: &[f64], y: usize) -> Result<f64> {
    if y >= scores.len() {
        return Err(Error::InvalidInput(format!("label {y} out of range")));
    }
    Ok(log_sum_exp_f64(scores) - scores[y])
}

/// Mean discriminative loss over a labeled batch; one decoder pass per
/// prefix per example.
pub fn discriminative_loss<T: Scalar>(
    model: &TransformerLm<T>,
    bank: &PrefixBank<T>,
    batch: &[(Vec<u32>, usize)],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut total = 0.0;
    for (seq, y) in batch {
        let scores = sequence_scores(model, bank, seq)?;
        total += discriminative_loss_from_scores(&scores, *y)?;
    }
    Ok(total / batch.len() as f64)
}

/// Prefix choice for the language-model loss: a hard index or a convex
/// mixture over the bank rows.
#[derive(Clone, Debug)]
pub enum PrefixSelection {
    Hard(usize),
    Soft(Vec<f64>),
}

/// Mean over examples of -sum_t log p(x_t | x_<t, prefix). The soft case
/// mixes materialized prefixes before the decoder pass.
pub fn lm_loss<T: Scalar>(
    model: &TransformerLm<T>,
    bank: &PrefixBank<T>,
    batch: &[(Vec<u32>, PrefixSelection)],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut total = 0.0;
    for (seq, sel) in batch {
        let kv = match sel {
            PrefixSelection::Hard(i) => bank.materialize(*i, &model.config)?,
            PrefixSelection::Soft(w) => {
                if w.len() != bank.n() {
                    return Err(Error::Shape("mixing weight length mismatch".into()));
                }
                let mut mixed = Tensor::zeros(bank.prefix_len, bank.activation_dim);
                for (z, &wz) in w.iter().enumerate() {
                    let row = bank.row(z);
                    for (o, v) in mixed.as_mut_slice().iter_mut().zip(row.as_slice()) {
                        *o += T::from_f64(wz) * *v;
                    }
                }
                PrefixKv::from_rows(&mixed, &model.config)?
            }
        };
        let (_, sum) = model.sequence_log_prob(seq, Some(&kv))?;
        total -= sum.as_f64();
    }
    Ok(total / batch.len() as f64)
}

/// Replace each position independently by MASK with probability mask_rate.
pub fn mask_tokens(seq: &[u32], mask_rate: f64, rng: &mut SeededRng) -> Result<Vec<u32>> {
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::InvalidInput(format!("mask_rate {mask_rate} outside [0, 1]")));
    }
    Ok(seq
        .iter()
        .map(|&t| if rng.uniform() < mask_rate { MASK_ID } else { t })
        .collect())
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

use crate::bank::{BankParam, TrainingBank};
use crate::graph::{Graph, Node};
use crate::model::build::{self, BoundParams};

/// A training bank registered on a graph: per-prefix dense [M x D] blocks
/// plus the underlying parameter nodes (for gradient extraction).
pub struct BankNodes {
    pub mats: Vec<Node>,
    pub params: Vec<(String, Node)>,
}

pub fn bind_bank<T: Scalar>(g: &mut Graph<T>, bank: &TrainingBank<T>, trainable: bool) -> BankNodes {
    let mut params = Vec::new();
    let mats = match &bank.param {
        BankParam::Reparam { bottleneck, proj } => bottleneck
            .iter()
            .zip(proj)
            .enumerate()
            .map(|(i, (h, w))| {
                let hn = if trainable { g.param(h.clone()) } else { g.constant(h.clone()) };
                let wn = if trainable { g.param(w.clone()) } else { g.constant(w.clone()) };
                params.push((format!("p{i}.h"), hn));
                params.push((format!("p{i}.w"), wn));
                g.matmul(hn, wn)
            })
            .collect(),
        BankParam::Dense { rows } => rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let n = if trainable { g.param(r.clone()) } else { g.constant(r.clone()) };
                params.push((format!("p{i}.rows"), n));
                n
            })
            .collect(),
    };
    BankNodes { mats, params }
}

/// Scalar node: the full-sequence score sum_t log p under one prefix block.
pub fn score_node<T: Scalar>(
    g: &mut Graph<T>,
    dec: &BoundParams,
    config: &ModelConfig,
    inputs: &[u32],
    targets: &[u32],
    prefix_mats: &[Node],
    length_norm: bool,
) -> Node {
    let layers = build::prefix_layer_nodes(g, prefix_mats, config);
    let lps = build::decoder_log_probs_graph(g, dec, config, inputs, targets, Some(&layers));
    let s = g.sum_all(lps);
    if length_norm {
        g.scale(s, T::from_f64(1.0 / targets.len() as f64))
    } else {
        s
    }
}

/// Pieces of the supervised loss, exposed for loss curves.
pub struct SupervisedParts {
    pub loss: Node,
    /// unweighted -log p(x | y)
    pub lm: Node,
    /// unweighted discriminative term, absent when omega2 = 0
    pub discriminative: Option<Node>,
}

/// Supervised per-example loss: omega1 * L_LM + omega2 * L_d on the graph.
/// With omega2 = 0 only the labeled prefix's pass is built, which reproduces
/// independent prefix training exactly.
pub fn supervised_example_loss<T: Scalar>(
    g: &mut Graph<T>,
    dec: &BoundParams,
    config: &ModelConfig,
    bank: &BankNodes,
    seq: &[u32],
    label: usize,
    ocfg: &ObjectiveConfig,
) -> SupervisedParts {
    let n = bank.mats.len();
    let w1 = T::from_f64(ocfg.omega1);
    let w2 = T::from_f64(ocfg.omega2);
    if ocfg.omega2 == 0.0 {
        let s_y = score_node(g, dec, config, seq, seq, &[bank.mats[label]], false);
        let lm = g.scale(s_y, -T::one());
        let loss = g.scale(lm, w1);
        return SupervisedParts { loss, lm, discriminative: None };
    }
    let scores: Vec<Node> = (0..n)
        .map(|z| score_node(g, dec, config, seq, seq, &[bank.mats[z]], ocfg.length_norm_scores))
        .collect();
    // L_LM uses the raw (unnormalized) score of the labeled prefix
    let s_label_raw = if ocfg.length_norm_scores {
        score_node(g, dec, config, seq, seq, &[bank.mats[label]], false)
    } else {
        scores[label]
    };
    let lm = g.scale(s_label_raw, -T::one());
    let stacked = g.stack_scalars(scores);
    let lse = g.log_sum_exp_vec(stacked);
    let picked = g.pick(stacked, label);
    let neg = g.scale(picked, -T::one());
    let ld = g.add(lse, neg);
    let lm_w = g.scale(lm, w1);
    let ld_w = g.scale(ld, w2);
    let loss = g.add(lm_w, ld_w);
    SupervisedParts { loss, lm, discriminative: Some(ld) }
}

/// Pieces of the unsupervised loss, exposed for monitoring.
pub struct UnsupervisedParts {
    pub loss: Node,
    pub lm: Node,
    pub kl: Node,
    pub contrast: Node,
    pub q_attract: Node,
}

/// Unsupervised per-example loss on the graph:
/// omega1 * L_LM(soft-mixed prefix on masked inputs)
///   + kl_weight * KL(q(z|x) || uniform)
///   + omega3 * hinge(margin - || attract/repel posterior gathers ||).
#[allow(clippy::too_many_arguments)]
pub fn unsupervised_example_loss<T: Scalar>(
    g: &mut Graph<T>,
    dec: &BoundParams,
    enc: &BoundParams,
    config: &ModelConfig,
    bank: &BankNodes,
    seq: &[u32],
    masked: &[u32],
    tau: f64,
    kl_weight: f64,
    ocfg: &ObjectiveConfig,
    rng: &mut SeededRng,
) -> UnsupervisedParts {
    let n = bank.mats.len();
    let md = {
        let v = g.value(bank.mats[0]);
        v.rows() * v.cols()
    };
    let emb = build::encoder_embed_graph(g, enc, config, seq);
    // distances to each prefix, flattened
    let dists: Vec<Node> = (0..n)
        .map(|z| {
            let flat = g.reshape(bank.mats[z], 1, md);
            let diff = g.sub(emb, flat);
            let d2 = g.square_sum(diff);
            g.sqrt_scalar(d2)
        })
        .collect();
    let neg_dists: Vec<Node> = dists.iter().map(|&d| g.scale(d, -T::one())).collect();
    let att_logits = g.stack_scalars(neg_dists);
    let rep_logits = g.stack_scalars(dists);
    let inv_tau = T::from_f64(1.0 / tau);
    let noise_a = Tensor::from_vec(1, n, gumbel_noise(n, rng).iter().map(|&x| T::from_f64(x)).collect());
    let noise_r = Tensor::from_vec(1, n, gumbel_noise(n, rng).iter().map(|&x| T::from_f64(x)).collect());
    let a_noisy = g.add_const(att_logits, &noise_a);
    let a_scaled = g.scale(a_noisy, inv_tau);
    let q_att = g.softmax_vec(a_scaled);
    let r_noisy = g.add_const(rep_logits, &noise_r);
    let r_scaled = g.scale(r_noisy, inv_tau);
    let q_rep = g.softmax_vec(r_scaled);

    // KL(q || uniform) = sum q ln q + ln N
    let ent = g.sum_q_log_q(q_att);
    let ln_n = Tensor::from_vec(1, 1, vec![T::from_f64((n as f64).ln())]);
    let kl = g.add_const(ent, &ln_n);

    // reconstruction under the relaxed sample: soft prefix mixture on
    // masked inputs, unmasked targets
    let mixed = g.mix(q_att, bank.mats.clone());
    let layers = build::prefix_layer_nodes(g, &[mixed], config);
    let lps = build::decoder_log_probs_graph(g, dec, config, masked, seq, Some(&layers));
    let s = g.sum_all(lps);
    let lm = g.scale(s, -T::one());

    // exact decoder posterior over prefixes, on unmasked inputs
    let scores: Vec<Node> =
        (0..n).map(|z| score_node(g, dec, config, seq, seq, &[bank.mats[z]], false)).collect();
    let stacked = g.stack_scalars(scores);
    let posterior = g.softmax_vec(stacked);

    // hinge between attract- and repel-weighted posterior gathers
    let dist = match ocfg.contrast_norm {
        ContrastNorm::Vector => {
            let ga = g.mul_elem(q_att, posterior);
            let gr = g.mul_elem(q_rep, posterior);
            let diff = g.sub(ga, gr);
            let d2 = g.square_sum(diff);
            g.sqrt_scalar(d2)
        }
        ContrastNorm::Scalar => {
            let ga = g.dot(q_att, posterior);
            let gr = g.dot(q_rep, posterior);
            let diff = g.sub(ga, gr);
            let d2 = g.square_sum(diff);
            g.sqrt_scalar(d2)
        }
    };
    let contrast = g.hinge_sq(dist, T::from_f64(ocfg.margin));

    let lm_w = g.scale(lm, T::from_f64(ocfg.omega1));
    let kl_w = g.scale(kl, T::from_f64(kl_weight));
    let c_w = g.scale(contrast, T::from_f64(ocfg.omega3));
    let partial = g.add(lm_w, kl_w);
    let loss = g.add(partial, c_w);
    UnsupervisedParts { loss, lm, kl, contrast, q_attract: q_att }
}

/// Encoder cross-entropy on the graph for one labeled aspect: the bank side
/// enters as constants, so only the encoder learns from this term.
pub fn encoder_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    emb: Node,
    const_mats: &[Node],
    label: usize,
) -> Node {
    let n = const_mats.len();
    let md = {
        let v = g.value(const_mats[0]);
        v.rows() * v.cols()
    };
    let dists: Vec<Node> = (0..n)
        .map(|z| {
            let flat = g.reshape(const_mats[z], 1, md);
            let diff = g.sub(emb, flat);
            let d2 = g.square_sum(diff);
            g.sqrt_scalar(d2)
        })
        .collect();
    let neg: Vec<Node> = dists.iter().map(|&d| g.scale(d, -T::one())).collect();
    let logits = g.stack_scalars(neg);
    let q = g.softmax_vec(logits);
    let picked = g.pick(q, label);
    let lp = g.ln_scalar(picked);
    g.scale(lp, -T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{AspectSchema, BankProvenance, TrainingBank};

    fn uni(v: Vec<f64>) -> PosteriorVector {
        PosteriorVector::new(v).unwrap()
    }

    #[test]
    fn posterior_invariants() {
        assert!(PosteriorVector::new(vec![0.5, 0.5]).is_ok());
        assert!(PosteriorVector::new(vec![0.6, 0.5]).is_err());
        assert!(PosteriorVector::new(vec![-0.1, 1.1]).is_err());
        let q = PosteriorVector::uniform(4);
        assert!((q.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discriminative_closed_forms() {
        // single class: certain
        assert!(discriminative_loss_from_scores(&[-3.0], 0).unwrap().abs() < 1e-12);
        // symmetric scores: ln 2
        let l = discriminative_loss_from_scores(&[-5.0, -5.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // wide gap: ln(1 + e^-20)
        let l = discriminative_loss_from_scores(&[-10.0, -30.0], 0).unwrap();
        let want = (1.0 + (-20.0f64).exp()).ln();
        assert!((l - want).abs() < 1e-15);
        assert!((l - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn discriminative_is_shift_invariant() {
        let s = [-12.0, -40.0, -17.5];
        let a = discriminative_loss_from_scores(&s, 2).unwrap();
        let shifted: Vec<f64> = s.iter().map(|x| x + 123.456).collect();
        let b = discriminative_loss_from_scores(&shifted, 2).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn gumbel_zero_noise_small_tau_is_argmax() {
        let logits = [0.1, 0.7, 0.3];
        let noise = [0.0, 0.0, 0.0];
        let q = gumbel_softmax_with_noise(&logits, &noise, 0.01).unwrap();
        assert!(q.probs()[1] > 0.999);
        assert_eq!(q.argmax(), 1);
        assert!(gumbel_softmax_with_noise(&logits, &noise, 0.0).is_err());
    }

    #[test]
    fn gumbel_equal_logits_mean_is_uniform() {
        let mut rng = SeededRng::new(11);
        let logits = [2.0, 2.0, 2.0];
        let n = 100_000;
        let mut mean = [0.0f64; 3];
        for _ in 0..n {
            let q = gumbel_softmax(&logits, 0.8, &mut rng).unwrap();
            for (m, p) in mean.iter_mut().zip(q.probs()) {
                *m += p;
            }
        }
        for m in &mean {
            assert!((m / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn gumbel_argmax_frequencies_follow_softmax() {
        // the Gumbel-max property: P(argmax = i) = softmax(logits)_i
        let logits = [0.2, 1.0, -0.5];
        let want = softmax_f64(&logits);
        let mut rng = SeededRng::new(12);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let q = gumbel_softmax(&logits, 0.3, &mut rng).unwrap();
            counts[q.argmax()] += 1;
        }
        for (c, w) in counts.iter().zip(&want) {
            assert!((*c as f64 / n as f64 - w).abs() < 0.01);
        }
    }

    #[test]
    fn gumbel_is_bit_reproducible() {
        let logits = [0.4, -0.2, 0.9];
        let a = gumbel_softmax(&logits, 0.7, &mut SeededRng::new(5)).unwrap();
        let b = gumbel_softmax(&logits, 0.7, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a.probs(), b.probs());
    }

    #[test]
    fn kl_closed_forms() {
        assert!(kl_loss(&PosteriorVector::uniform(5)).abs() < 1e-12);
        let l = kl_loss(&PosteriorVector::one_hot(2, 0));
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = kl_loss(&uni(vec![0.9, 0.1]));
        let want = 0.9 * (1.8f64).ln() + 0.1 * (0.2f64).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.368064).abs() < 1e-6);
    }

    #[test]
    fn contrastive_closed_forms() {
        let p = uni(vec![1.0, 0.0]);
        let q = uni(vec![0.0, 1.0]);
        // saturated hinge
        assert_eq!(contrastive_loss(&p, &q, 1.0).unwrap(), 0.0);
        // identical posteriors: m^2
        assert!((contrastive_loss(&p, &p, 1.5).unwrap() - 2.25).abs() < 1e-12);
        // ||(1,0)-(0,1)|| = sqrt 2, margin 2
        let l = contrastive_loss(&p, &q, 2.0).unwrap();
        let want = (2.0 - 2.0f64.sqrt()).powi(2);
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.343146).abs() < 1e-6);
    }

    #[test]
    fn encoder_loss_closed_forms() {
        assert_eq!(encoder_loss(&PosteriorVector::one_hot(3, 1), 1).unwrap(), 0.0);
        let l = encoder_loss(&PosteriorVector::uniform(2), 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = encoder_loss(&uni(vec![0.25, 0.75]), 1).unwrap();
        assert!((l + 0.75f64.ln()).abs() < 1e-12);
        assert!((l - 0.287682).abs() < 1e-6);
        assert!(encoder_loss(&PosteriorVector::uniform(2), 5).is_err());
    }

    #[test]
    fn mask_rate_edges_and_concentration() {
        let seq: Vec<u32> = (3..23).collect();
        let mut rng = SeededRng::new(7);
        assert_eq!(mask_tokens(&seq, 0.0, &mut rng).unwrap(), seq);
        let all = mask_tokens(&seq, 1.0, &mut rng).unwrap();
        assert!(all.iter().all(|&t| t == MASK_ID));

        let long: Vec<u32> = (0..10_000).map(|i| 3 + (i % 26) as u32).collect();
        let masked = mask_tokens(&long, 0.5, &mut SeededRng::new(42)).unwrap();
        let frac = masked.iter().filter(|&&t| t == MASK_ID).count() as f64 / long.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "masked fraction {frac}");
        assert!(mask_tokens(&seq, 1.5, &mut rng).is_err());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = ObjectiveConfig { schedule_steps: 100, ..ObjectiveConfig::unsupervised() };
        assert_eq!(cfg.schedule(0), (0.001, 1.0));
        assert_eq!(cfg.schedule(100), (0.1, 0.5));
        assert_eq!(cfg.schedule(1000), (0.1, 0.5));
        let (kl, tau) = cfg.schedule(50);
        assert!((kl - 0.0505).abs() < 1e-12);
        assert!((tau - 0.75).abs() < 1e-12);
    }

    #[test]
    fn encoder_posterior_attract_repel_and_loop_oracle() {
        use crate::bank::PrefixBank;
        // prefix 0 at the embedding, prefix 1 far away
        let schema2 = AspectSchema::new("a", vec!["x".into(), "y".into()]).unwrap();
        let rows = vec![Tensor::full(2, 6, 0.5f64), Tensor::full(2, 6, -4.0f64)];
        let bank2 =
            PrefixBank::from_rows(schema2, rows, true, BankProvenance::default()).unwrap();
        let enc_out = bank2.flat_row(0);
        let zero = vec![0.0; 2];
        let d = embedding_distances(&enc_out, &bank2).unwrap();
        assert!(d[0].abs() < 1e-12);
        let att = gumbel_softmax_with_noise(&d.iter().map(|x| -x).collect::<Vec<_>>(), &zero, 0.1)
            .unwrap();
        assert!(att.probs()[0] > 0.99, "attract mass {:?}", att.probs());
        let rep = gumbel_softmax_with_noise(&d, &zero, 0.1).unwrap();
        assert!(rep.probs()[1] > 0.99, "repel mass {:?}", rep.probs());

        // random case, N = 3: distances match an explicit coordinate loop
        let schema3 = AspectSchema::new("b", vec!["x".into(), "y".into(), "z".into()]).unwrap();
        let bank3 = TrainingBank::<f64>::new_reparam(schema3, 2, 6, 3, 3)
            .export(BankProvenance::default())
            .unwrap();
        let mut rng = SeededRng::new(9);
        let q: Tensor<f64> = Tensor::randn(1, 12, 1.0, &mut rng);
        let d = embedding_distances(&q, &bank3).unwrap();
        for i in 0..3 {
            let flat = bank3.flat_row(i);
            let mut acc = 0.0;
            for c in 0..12 {
                let diff = q.at(0, c) - flat.at(0, c);
                acc += diff * diff;
            }
            assert!((d[i] - acc.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn graph_losses_match_value_level() {
        // kl, contrastive and encoder loss: graph vs closed-form values
        let mut g: Graph<f64> = Graph::new();
        let q_raw = Tensor::from_vec(1, 3, vec![0.2, 0.5, 0.3]);
        let qn = g.constant(q_raw);
        let ent = g.sum_q_log_q(qn);
        let want: f64 = [0.2, 0.5, 0.3].iter().map(|p: &f64| p * p.ln()).sum();
        assert!((g.value(ent).scalar() - want).abs() < 1e-12);

        let kl_value = kl_loss(&uni(vec![0.2, 0.5, 0.3]));
        assert!((g.value(ent).scalar() + (3.0f64).ln() - kl_value).abs() < 1e-12);
    }
}

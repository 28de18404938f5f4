//! Incremental decoding state: per-layer key/value buffers that grow one row
//! per fed token. The arithmetic mirrors the full-context forward row for
//! row, so cached and uncached decoding emit identical logits.

use crate::error::{Error, Result};
use crate::graph::gelu_scalar;
use crate::model::{layer_norm_rows, linear, PrefixKv, TransformerLm};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, Tensor};

pub struct KvCache<T> {
    /// Per layer: key and value buffers of capacity max_positions rows.
    k: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    prefix_len: usize,
    fed: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(model: &TransformerLm<T>, prefix: Option<&PrefixKv<T>>) -> Result<Self> {
        let cfg = &model.config;
        let e = cfg.hidden_size;
        let prefix_len = prefix.map_or(0, PrefixKv::m_total);
        if prefix_len >= cfg.max_positions {
            return Err(Error::LengthOverflow { len: 0, prefix: prefix_len, max: cfg.max_positions });
        }
        let mut k = Vec::with_capacity(cfg.num_layers);
        let mut v = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let mut kl = Tensor::zeros(cfg.max_positions, e);
            let mut vl = Tensor::zeros(cfg.max_positions, e);
            if let Some(p) = prefix {
                let (pk, pv) = &p.layers[l];
                for j in 0..prefix_len {
                    kl.row_mut(j).copy_from_slice(pk.row(j));
                    vl.row_mut(j).copy_from_slice(pv.row(j));
                }
            }
            k.push(kl);
            v.push(vl);
        }
        Ok(Self { k, v, prefix_len, fed: 0 })
    }

    pub fn len(&self) -> usize {
        self.prefix_len + self.fed
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feed one token; returns the logits row predicting the next token.
    pub fn step(&mut self, model: &TransformerLm<T>, token: u32) -> Result<Vec<T>> {
        let cfg = &model.config;
        let e = cfg.hidden_size;
        let pos = self.prefix_len + self.fed;
        if pos >= cfg.max_positions {
            return Err(Error::LengthOverflow {
                len: self.fed + 1,
                prefix: self.prefix_len,
                max: cfg.max_positions,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::InvalidInput(format!("token id {token} outside vocab")));
        }
        let params = &model.params;
        let wte = params.get("wte");
        let wpe = params.get("wpe");
        let mut x = Tensor::zeros(1, e);
        x.row_mut(0).copy_from_slice(wte.row(token as usize));
        for (a, b) in x.row_mut(0).iter_mut().zip(wpe.row(pos)) {
            *a += *b;
        }
        let heads = cfg.num_heads;
        let hd = cfg.head_dim();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        for l in 0..cfg.num_layers {
            let ln1 = layer_norm_rows(
                &x,
                params.get(&format!("l{l}.ln1.g")),
                params.get(&format!("l{l}.ln1.b")),
            );
            let q = linear(&ln1, params.get(&format!("l{l}.wq")), params.get(&format!("l{l}.bq")));
            let k = linear(&ln1, params.get(&format!("l{l}.wk")), params.get(&format!("l{l}.bk")));
            let v = linear(&ln1, params.get(&format!("l{l}.wv")), params.get(&format!("l{l}.bv")));
            self.k[l].row_mut(pos).copy_from_slice(k.row(0));
            self.v[l].row_mut(pos).copy_from_slice(v.row(0));
            // single-row causal attention over rows 0..=pos, same loop order
            // as the batched attention kernel
            let limit = pos + 1;
            let mut att = Tensor::zeros(1, e);
            let mut weights = vec![T::zero(); limit];
            for h in 0..heads {
                let off = h * hd;
                let qrow = &q.row(0)[off..off + hd];
                let mut maxv = T::neg_infinity();
                for (j, w) in weights.iter_mut().enumerate() {
                    let krow = &self.k[l].row(j)[off..off + hd];
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
                for w in weights.iter_mut() {
                    *w = (*w - maxv).exp();
                    denom += *w;
                }
                let inv = denom.recip();
                let orow = &mut att.row_mut(0)[off..off + hd];
                for (j, w) in weights.iter().enumerate() {
                    let wv = *w * inv;
                    let vrow = &self.v[l].row(j)[off..off + hd];
                    for (o, val) in orow.iter_mut().zip(vrow) {
                        *o += wv * *val;
                    }
                }
            }
            let proj = linear(&att, params.get(&format!("l{l}.wo")), params.get(&format!("l{l}.bo")));
            x.add_assign(&proj);
            let ln2 = layer_norm_rows(
                &x,
                params.get(&format!("l{l}.ln2.g")),
                params.get(&format!("l{l}.ln2.b")),
            );
            let mut h = linear(&ln2, params.get(&format!("l{l}.w1")), params.get(&format!("l{l}.b1")));
            for v in h.as_mut_slice() {
                *v = gelu_scalar(*v);
            }
            let ff = linear(&h, params.get(&format!("l{l}.w2")), params.get(&format!("l{l}.b2")));
            x.add_assign(&ff);
        }
        let hidden = layer_norm_rows(&x, params.get("lnf.g"), params.get("lnf.b"));
        let logits = matmul_nn(&hidden, params.get("head"));
        self.fed += 1;
        if !logits.is_finite() {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        Ok(logits.row(0).to_vec())
    }
}

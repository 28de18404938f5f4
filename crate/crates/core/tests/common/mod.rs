//! Shared test oracles, written independently of the library's tensor and
//! graph paths: explicit nested loops over scalars only.

#![allow(dead_code)]

use prefix_core::model::{ModelConfig, PrefixKv, TransformerLm};
use prefix_core::tensor::Tensor;

fn ln_ref(row: &[f64], gain: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
    let n = row.len();
    let mean = row.iter().sum::<f64>() / n as f64;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let inv = 1.0 / (var + 1e-5).sqrt();
    (0..n).map(|j| (row[j] - mean) * inv * gain.at(0, j) + bias.at(0, j)).collect()
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
}

fn lin_ref(row: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (inp, out) = (w.rows(), w.cols());
    assert_eq!(row.len(), inp);
    (0..out)
        .map(|o| (0..inp).map(|i| row[i] * w.at(i, o)).sum::<f64>() + b.at(0, o))
        .collect()
}

/// Forward pass written as plain loops, per position, per head, per element.
/// Returns logits rows. Supports an optional key/value prefix.
pub fn reference_forward(
    model: &TransformerLm<f64>,
    tokens: &[u32],
    prefix: Option<&PrefixKv<f64>>,
) -> Vec<Vec<f64>> {
    let cfg: &ModelConfig = &model.config;
    let e = cfg.hidden_size;
    let heads = cfg.num_heads;
    let hd = e / heads;
    let p = prefix.map_or(0, PrefixKv::m_total);
    let t = tokens.len();
    let get = |n: &str| model.params.get(n);

    let mut xs: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            (0..e)
                .map(|j| get("wte").at(tokens[i] as usize, j) + get("wpe").at(p + i, j))
                .collect()
        })
        .collect();

    for l in 0..cfg.num_layers {
        let ln1: Vec<Vec<f64>> = xs
            .iter()
            .map(|r| ln_ref(r, get(&format!("l{l}.ln1.g")), get(&format!("l{l}.ln1.b"))))
            .collect();
        let q: Vec<Vec<f64>> =
            ln1.iter().map(|r| lin_ref(r, get(&format!("l{l}.wq")), get(&format!("l{l}.bq")))).collect();
        let k: Vec<Vec<f64>> =
            ln1.iter().map(|r| lin_ref(r, get(&format!("l{l}.wk")), get(&format!("l{l}.bk")))).collect();
        let v: Vec<Vec<f64>> =
            ln1.iter().map(|r| lin_ref(r, get(&format!("l{l}.wv")), get(&format!("l{l}.bv")))).collect();

        // keys/values with the prefix block in front
        let key_at = |j: usize, c: usize| -> f64 {
            if j < p {
                prefix.unwrap().layers[l].0.at(j, c)
            } else {
                k[j - p][c]
            }
        };
        let val_at = |j: usize, c: usize| -> f64 {
            if j < p {
                prefix.unwrap().layers[l].1.at(j, c)
            } else {
                v[j - p][c]
            }
        };

        let mut att_out = vec![vec![0.0; e]; t];
        for i in 0..t {
            for h in 0..heads {
                let off = h * hd;
                let limit = p + i + 1;
                let mut logits = vec![0.0; limit];
                for (j, lg) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += q[i][off + c] * key_at(j, off + c);
                    }
                    *lg = dot / (hd as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..hd {
                    let mut acc = 0.0;
                    for (j, ex) in exps.iter().enumerate() {
                        acc += ex / z * val_at(j, off + c);
                    }
                    att_out[i][off + c] = acc;
                }
            }
        }
        for i in 0..t {
            let proj = lin_ref(&att_out[i], get(&format!("l{l}.wo")), get(&format!("l{l}.bo")));
            for j in 0..e {
                xs[i][j] += proj[j];
            }
            let ln2 = ln_ref(&xs[i], get(&format!("l{l}.ln2.g")), get(&format!("l{l}.ln2.b")));
            let mut f1 = lin_ref(&ln2, get(&format!("l{l}.w1")), get(&format!("l{l}.b1")));
            for x in f1.iter_mut() {
                *x = gelu_ref(*x);
            }
            let f2 = lin_ref(&f1, get(&format!("l{l}.w2")), get(&format!("l{l}.b2")));
            for j in 0..e {
                xs[i][j] += f2[j];
            }
        }
    }

    xs.iter()
        .map(|r| {
            let h = ln_ref(r, get("lnf.g"), get("lnf.b"));
            let head = get("head");
            (0..cfg.vocab_size)
                .map(|vv| (0..e).map(|j| h[j] * head.at(j, vv)).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Chain-rule sequence probability from reference logits: softmax each row
/// in probability space, multiply the picked entries.
pub fn reference_sequence_prob(
    model: &TransformerLm<f64>,
    seq: &[u32],
    prefix: Option<&PrefixKv<f64>>,
) -> f64 {
    let shifted = prefix_core::model::shift_right_with_bos(seq);
    let logits = reference_forward(model, &shifted, prefix);
    let mut prob = 1.0;
    for (i, &target) in seq.iter().enumerate() {
        let row = &logits[i];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        prob *= exps[target as usize] / z;
    }
    prob
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

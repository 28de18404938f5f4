//! Graph builders: the same transformer forward as the inference path, but
//! expressed on the autodiff tape so losses can differentiate through it.

use crate::graph::{Graph, Node};
use crate::model::{ModelConfig, ParamSet};
use crate::scalar::Scalar;

/// Parameter tensors registered on a graph, addressable by name. Binding as
/// constants freezes them (no gradients, no dW matmuls in backward).
pub struct BoundParams {
    names: Vec<String>,
    nodes: Vec<Node>,
}

impl BoundParams {
    pub fn node(&self, name: &str) -> Node {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unbound param {name}"));
        self.nodes[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Node)> {
        self.names.iter().map(String::as_str).zip(self.nodes.iter().copied())
    }
}

pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> BoundParams {
    let mut names = Vec::with_capacity(params.len());
    let mut nodes = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        names.push(name.to_string());
        nodes.push(if trainable { g.param(t.clone()) } else { g.constant(t.clone()) });
    }
    BoundParams { names, nodes }
}

/// Per-layer (key, value) prefix nodes, each `m_total x hidden`, sliced out
/// of flat `m x d` prefix blocks and concatenated along the position axis in
/// the order given.
pub fn prefix_layer_nodes<T: Scalar>(
    g: &mut Graph<T>,
    mats: &[Node],
    config: &ModelConfig,
) -> Vec<(Node, Node)> {
    let e = config.hidden_size;
    (0..config.num_layers)
        .map(|l| {
            let mut k: Option<Node> = None;
            let mut v: Option<Node> = None;
            for m in mats {
                let ks = g.slice_cols(*m, 2 * l * e, e);
                let vs = g.slice_cols(*m, (2 * l + 1) * e, e);
                k = Some(match k {
                    Some(prev) => g.concat_rows(prev, ks),
                    None => ks,
                });
                v = Some(match v {
                    Some(prev) => g.concat_rows(prev, vs),
                    None => vs,
                });
            }
            (k.unwrap(), v.unwrap())
        })
        .collect()
}

/// Transformer body on the tape. Returns the hidden states after the final
/// layer norm, one row per input token.
pub fn body_hidden_graph<T: Scalar>(
    g: &mut Graph<T>,
    bp: &BoundParams,
    config: &ModelConfig,
    tokens: &[u32],
    prefix: Option<&[(Node, Node)]>,
) -> Node {
    let m_total = prefix.map_or(0, |p| {
        p.first().map_or(0, |(k, _)| g.value(*k).rows())
    });
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let wte = bp.node("wte");
    let wpe = bp.node("wpe");
    let tok_emb = g.gather_rows(wte, idx);
    let pos_idx: Vec<usize> = (0..tokens.len()).map(|i| m_total + i).collect();
    let pos_emb = g.gather_rows(wpe, pos_idx);
    let mut x = g.add(tok_emb, pos_emb);
    for l in 0..config.num_layers {
        let ln1g = bp.node(&format!("l{l}.ln1.g"));
        let ln1b = bp.node(&format!("l{l}.ln1.b"));
        let h = g.layer_norm(x, ln1g, ln1b);
        let q = linear_graph(g, bp, h, &format!("l{l}.wq"), &format!("l{l}.bq"));
        let k = linear_graph(g, bp, h, &format!("l{l}.wk"), &format!("l{l}.bk"));
        let v = linear_graph(g, bp, h, &format!("l{l}.wv"), &format!("l{l}.bv"));
        let (kc, vc) = match prefix {
            Some(p) => {
                let (pk, pv) = p[l];
                (g.concat_rows(pk, k), g.concat_rows(pv, v))
            }
            None => (k, v),
        };
        let att = g.causal_attention(q, kc, vc, config.num_heads, m_total);
        let proj = linear_graph(g, bp, att, &format!("l{l}.wo"), &format!("l{l}.bo"));
        x = g.add(x, proj);
        let ln2g = bp.node(&format!("l{l}.ln2.g"));
        let ln2b = bp.node(&format!("l{l}.ln2.b"));
        let h2 = g.layer_norm(x, ln2g, ln2b);
        let f1 = linear_graph(g, bp, h2, &format!("l{l}.w1"), &format!("l{l}.b1"));
        let act = g.gelu(f1);
        let f2 = linear_graph(g, bp, act, &format!("l{l}.w2"), &format!("l{l}.b2"));
        x = g.add(x, f2);
    }
    let lnfg = bp.node("lnf.g");
    let lnfb = bp.node("lnf.b");
    g.layer_norm(x, lnfg, lnfb)
}

fn linear_graph<T: Scalar>(g: &mut Graph<T>, bp: &BoundParams, x: Node, w: &str, b: &str) -> Node {
    let wn = bp.node(w);
    let bn = bp.node(b);
    let y = g.matmul(x, wn);
    g.add_row(y, bn)
}

/// Per-token log p(target_t | inputs_<t, prefix) as a [1 x T] node.
/// Decoder input is [BOS, inputs[..T-1]].
pub fn decoder_log_probs_graph<T: Scalar>(
    g: &mut Graph<T>,
    bp: &BoundParams,
    config: &ModelConfig,
    inputs: &[u32],
    targets: &[u32],
    prefix: Option<&[(Node, Node)]>,
) -> Node {
    assert_eq!(inputs.len(), targets.len());
    let shifted = crate::model::shift_right_with_bos(inputs);
    let hidden = body_hidden_graph(g, bp, config, &shifted, prefix);
    let head = bp.node("head");
    let logits = g.matmul(hidden, head);
    let logp = g.log_softmax_rows(logits);
    let cols: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    g.pick_per_row(logp, cols)
}

/// Encoder embedding on the tape: pooled last non-PAD hidden state through
/// the linear head. Returns a [1 x m*d] node.
pub fn encoder_embed_graph<T: Scalar>(
    g: &mut Graph<T>,
    bp: &BoundParams,
    config: &ModelConfig,
    seq: &[u32],
) -> Node {
    let hidden = body_hidden_graph(g, bp, config, seq, None);
    let pool = crate::model::last_non_pad(seq);
    let pooled = g.gather_rows(hidden, vec![pool]);
    let w = bp.node("enc_head.w");
    let b = bp.node("enc_head.b");
    let y = g.matmul(pooled, w);
    g.add_row(y, b)
}

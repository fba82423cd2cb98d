//! Decoder-only language model used by the detector and the comprehension
//! module of the locator.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::{AdapterConfig, Init, LayerNorm, Linear};
use super::params::{Graph, ParamId, ParamStore};
use crate::autograd::Var;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Init scale of the absolute position table.
    #[serde(default = "default_position_std")]
    pub position_std: f64,
}

fn default_position_std() -> f64 {
    0.1
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_mlp: LayerNorm,
    up: Linear,
    down: Linear,
}

/// Slope of head `h`'s linear distance penalty: `2^(-8 (h + 1) / heads)`,
/// steepest for head 0.
pub fn alibi_slope(head: usize, heads: usize) -> f64 {
    2f64.powf(-8.0 * (head + 1) as f64 / heads as f64)
}

/// `-slope * (i - j)` below the diagonal; the causal mask handles `j > i`.
/// Keys before `global` carry no penalty.
fn distance_bias<F: Scalar>(len: usize, slope: f64, global: usize) -> Array2<F> {
    Array2::from_shape_fn((len, len), |(i, j)| if j <= i && j >= global { F::of(-slope * (i - j) as f64) } else { F::zero() })
}

/// Pre-norm causal transformer with learned absolute positions and a fixed
/// per-head linear distance penalty on attention scores, which gives even a
/// frozen random backbone local-context features.
///
/// The backbone (embeddings, blocks, head) is created with `base` init;
/// linear layers named by `adapter` get low-rank adapters.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    head: Linear,
}

/// Keys and values of every position processed so far, per layer.
#[derive(Clone, Debug)]
pub struct KvCache<F> {
    keys: Vec<Array2<F>>,
    values: Vec<Array2<F>>,
    len: usize,
    global: usize,
}

impl<F: Scalar> KvCache<F> {
    /// `global` as in [`LanguageModel::forward_with_prefix`].
    pub fn new(global: usize) -> Self {
        Self { keys: Vec::new(), values: Vec::new(), len: 0, global }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Output of one forward pass.
pub struct LmOutput {
    /// Final-layer hidden states, `len x d_model`.
    pub hidden: Var,
    /// Next-token logits, `len x vocab`.
    pub logits: Var,
}

impl LanguageModel {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, config: LmConfig, base: Init, adapter: &AdapterConfig) -> Self {
        assert_eq!(config.d_model % config.heads, 0, "d_model must split evenly across heads");
        let d = config.d_model;
        let token_embedding = store.normal(format!("{prefix}tok_emb"), (config.vocab, d), 1.0, base.role, base.trainable);
        let position_embedding = store.normal(format!("{prefix}pos_emb"), (config.max_len, d), config.position_std, base.role, base.trainable);
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{prefix}blocks.{i}");
            let lin = |store: &mut ParamStore<F>, name: &str, i: usize, o: usize| {
                Linear::new(store, &format!("{p}.{name}"), i, o, true, base).adapt(store, adapter)
            };
            blocks.push(Block {
                ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d, base),
                q: lin(store, "attn.q", d, d),
                k: lin(store, "attn.k", d, d),
                v: lin(store, "attn.v", d, d),
                o: lin(store, "attn.o", d, d),
                ln_mlp: LayerNorm::new(store, &format!("{p}.ln_mlp"), d, base),
                up: lin(store, "mlp.up", d, config.d_ff),
                down: lin(store, "mlp.down", config.d_ff, d),
            });
        }
        let ln_final = LayerNorm::new(store, &format!("{prefix}ln_final"), d, base);
        let head = Linear::new(store, &format!("{prefix}head"), d, config.vocab, false, base).adapt(store, adapter);
        Self { config, token_embedding, position_embedding, blocks, ln_final, head }
    }

    pub fn embed_tokens<F: Scalar>(&self, g: &mut Graph<'_, F>, ids: &[u32]) -> Var {
        let table = g.param(self.token_embedding);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.tape.gather(table, &ids)
    }

    /// Runs the model over an already-embedded sequence.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, embeddings: Var) -> LmOutput {
        self.forward_with_prefix(g, embeddings, 0)
    }

    /// Like [`forward`](Self::forward), with the first `global` positions
    /// (typically BOS and image tokens) exempt from the distance penalty in
    /// the long-range half of the heads.
    pub fn forward_with_prefix<F: Scalar>(&self, g: &mut Graph<'_, F>, embeddings: Var, global: usize) -> LmOutput {
        let (len, width) = g.tape.shape(embeddings);
        assert_eq!(width, self.config.d_model, "embedding width");
        assert!(len <= self.config.max_len, "sequence of {len} exceeds max_len {}", self.config.max_len);
        let positions: Vec<usize> = (0..len).collect();
        let table = g.param(self.position_embedding);
        let pos = g.tape.gather(table, &positions);
        let mut x = g.tape.add(embeddings, pos);

        let heads = self.config.heads;
        let head_dim = self.config.d_model / heads;
        let scale = F::one() / F::of_usize(head_dim).sqrt();
        let biases: Vec<Var> = (0..heads).map(|h| g.constant(distance_bias(len, alibi_slope(h, heads), if 2 * h >= heads { global } else { 0 }))).collect();
        for block in &self.blocks {
            let h = block.ln_attn.forward(g, x);
            let q = block.q.forward(g, h);
            let k = block.k.forward(g, h);
            let v = block.v.forward(g, h);
            let mut outputs = Vec::with_capacity(heads);
            for head in 0..heads {
                let start = head * head_dim;
                let qh = g.tape.slice_cols(q, start, head_dim);
                let kh = g.tape.slice_cols(k, start, head_dim);
                let vh = g.tape.slice_cols(v, start, head_dim);
                let kt = g.tape.transpose(kh);
                let scores = g.tape.matmul(qh, kt);
                let scores = g.tape.scale(scores, scale);
                let scores = g.tape.add(scores, biases[head]);
                let attn = g.tape.softmax(scores, true);
                outputs.push(g.tape.matmul(attn, vh));
            }
            let merged = if heads == 1 { outputs[0] } else { g.tape.concat_cols(&outputs) };
            let attn_out = block.o.forward(g, merged);
            x = g.tape.add(x, attn_out);

            let h = block.ln_mlp.forward(g, x);
            let up = block.up.forward(g, h);
            let up = g.tape.relu(up);
            let down = block.down.forward(g, up);
            x = g.tape.add(x, down);
        }
        let hidden = self.ln_final.forward(g, x);
        let logits = self.head.forward(g, hidden);
        LmOutput { hidden, logits }
    }

    /// Continues the sequence held by `cache` with `embeddings`, returning
    /// outputs for the new positions only. Prefilling an empty cache with a
    /// whole sequence computes the same values as
    /// [`forward_with_prefix`](Self::forward_with_prefix).
    pub fn forward_cached<F: Scalar>(&self, g: &mut Graph<'_, F>, embeddings: Var, cache: &mut KvCache<F>) -> LmOutput {
        let (n, width) = g.tape.shape(embeddings);
        assert_eq!(width, self.config.d_model, "embedding width");
        let start = cache.len;
        let total = start + n;
        assert!(total <= self.config.max_len, "sequence of {total} exceeds max_len {}", self.config.max_len);
        let positions: Vec<usize> = (start..total).collect();
        let table = g.param(self.position_embedding);
        let pos = g.tape.gather(table, &positions);
        let mut x = g.tape.add(embeddings, pos);

        let heads = self.config.heads;
        let head_dim = self.config.d_model / heads;
        let scale = F::one() / F::of_usize(head_dim).sqrt();
        let biases: Vec<Var> = (0..heads)
            .map(|h| {
                let slope = alibi_slope(h, heads);
                let global = if 2 * h >= heads { cache.global } else { 0 };
                let i0 = start;
                g.constant(Array2::from_shape_fn((n, total), |(r, j)| {
                    let i = i0 + r;
                    if j <= i && j >= global { F::of(-slope * (i - j) as f64) } else { F::zero() }
                }))
            })
            .collect();
        for (b, block) in self.blocks.iter().enumerate() {
            let h = block.ln_attn.forward(g, x);
            let q = block.q.forward(g, h);
            let mut k = block.k.forward(g, h);
            let mut v = block.v.forward(g, h);
            if start > 0 {
                let (pk, pv) = (g.constant(cache.keys[b].clone()), g.constant(cache.values[b].clone()));
                k = g.tape.concat_rows(&[pk, k]);
                v = g.tape.concat_rows(&[pv, v]);
            }
            let (kv, vv) = (g.value(k).clone(), g.value(v).clone());
            if b < cache.keys.len() {
                (cache.keys[b], cache.values[b]) = (kv, vv);
            } else {
                cache.keys.push(kv);
                cache.values.push(vv);
            }
            let mut outputs = Vec::with_capacity(heads);
            for head in 0..heads {
                let s0 = head * head_dim;
                let qh = g.tape.slice_cols(q, s0, head_dim);
                let kh = g.tape.slice_cols(k, s0, head_dim);
                let vh = g.tape.slice_cols(v, s0, head_dim);
                let kt = g.tape.transpose(kh);
                let scores = g.tape.matmul(qh, kt);
                let scores = g.tape.scale(scores, scale);
                let scores = g.tape.add(scores, biases[head]);
                let attn = g.tape.softmax_causal_from(scores, start);
                outputs.push(g.tape.matmul(attn, vh));
            }
            let merged = if heads == 1 { outputs[0] } else { g.tape.concat_cols(&outputs) };
            let attn_out = block.o.forward(g, merged);
            x = g.tape.add(x, attn_out);

            let h = block.ln_mlp.forward(g, x);
            let up = block.up.forward(g, h);
            let up = g.tape.relu(up);
            let down = block.down.forward(g, up);
            x = g.tape.add(x, down);
        }
        cache.len = total;
        let hidden = self.ln_final.forward(g, x);
        let logits = self.head.forward(g, hidden);
        LmOutput { hidden, logits }
    }
}

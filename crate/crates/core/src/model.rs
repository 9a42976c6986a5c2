//! Bidirectional Transformer encoder with an MLM head. Every attention
//! head's post-softmax matrix can be captured for guidance and probing.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub attn_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale default: trainable on a laptop CPU in minutes.
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 128,
            max_seq_len: 64,
            vocab_size: 8192,
            attn_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("all model sizes must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::Config(format!("attn_dropout {} outside [0,1)", self.attn_dropout)));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<F: Scalar> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<F>) {
        assert!(!self.index.contains_key(name), "duplicate parameter name {}", name);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor.requires_grad(true)));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        &self.entries[self.index[name]].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), &mut *t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        let mut out = ParameterStore::new();
        for (name, t) in &self.entries {
            out.insert(name, t.cast());
        }
        out
    }
}

/// Weights from a truncated normal (sigma = 0.02, clipped to 2 sigma by
/// resampling), biases zero, layer-norm gains one. Fully seed-determined.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ParameterStore<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let d = config.d_model;
    let v = config.vocab_size;
    let ff = config.d_ff();

    let mut trunc_normal = |shape: Vec<usize>| -> Tensor<f32> {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel)
            .map(|_| loop {
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                if z.abs() <= 2.0 {
                    break (z * 0.02) as f32;
                }
            })
            .collect();
        Tensor { shape, data, requires_grad: false }
    };

    store.insert("emb.tok", trunc_normal(vec![v, d]));
    store.insert("emb.pos", trunc_normal(vec![config.max_seq_len, d]));
    store.insert("emb.ln.gain", ones(d));
    store.insert("emb.ln.bias", zeros(d));
    for l in 0..config.layers {
        for proj in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("layer{}.attn.{}", l, proj), trunc_normal(vec![d, d]));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("layer{}.attn.{}", l, bias), zeros(d));
        }
        store.insert(&format!("layer{}.ln1.gain", l), ones(d));
        store.insert(&format!("layer{}.ln1.bias", l), zeros(d));
        store.insert(&format!("layer{}.ff.w1", l), trunc_normal(vec![d, ff]));
        store.insert(&format!("layer{}.ff.b1", l), zeros(ff));
        store.insert(&format!("layer{}.ff.w2", l), trunc_normal(vec![ff, d]));
        store.insert(&format!("layer{}.ff.b2", l), zeros(d));
        store.insert(&format!("layer{}.ln2.gain", l), ones(d));
        store.insert(&format!("layer{}.ln2.bias", l), zeros(d));
    }
    store.insert("mlm.bias", zeros(v));
    Ok(store)
}

fn zeros(n: usize) -> Tensor<f32> {
    Tensor::zeros(vec![n])
}

fn ones(n: usize) -> Tensor<f32> {
    Tensor { shape: vec![n], data: vec![1.0; n], requires_grad: false }
}

/// Parameter tensors staged on a tape as gradient-bearing leaves.
pub struct TapedParams {
    map: HashMap<String, NodeId>,
    order: Vec<(String, NodeId)>,
}

impl TapedParams {
    pub fn stage<F: Scalar>(tape: &mut Tape<F>, store: &ParameterStore<F>) -> TapedParams {
        let mut map = HashMap::new();
        let mut order = Vec::new();
        for (name, tensor) in store.iter() {
            let id = tape.leaf(tensor.clone());
            map.insert(name.to_string(), id);
            order.push((name.to_string(), id));
        }
        TapedParams { map, order }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {}", name))
    }

    pub fn ordered(&self) -> &[(String, NodeId)] {
        &self.order
    }
}

/// Forward-pass handles: per-sequence hidden states plus (optionally) every
/// head's post-softmax attention node, indexed [layer][head][sequence].
pub struct EncodeOutput {
    pub hidden: Vec<NodeId>,
    pub attention: Option<Vec<Vec<Vec<NodeId>>>>,
}

/// Per-layer, per-head, per-sequence post-softmax attention matrices,
/// captured before attention dropout.
#[derive(Debug, Clone)]
pub struct AttentionTrace<F: Scalar> {
    pub layers: usize,
    pub heads: usize,
    /// h[layer][head][sequence] is an n x n row-stochastic matrix.
    pub h: Vec<Vec<Vec<Tensor<F>>>>,
}

impl EncodeOutput {
    pub fn extract_trace<F: Scalar>(&self, tape: &Tape<F>) -> Option<AttentionTrace<F>> {
        self.attention.as_ref().map(|att| AttentionTrace {
            layers: att.len(),
            heads: att.first().map_or(0, |l| l.len()),
            h: att
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|head| head.iter().map(|&id| tape.value(id).clone()).collect())
                        .collect()
                })
                .collect(),
        })
    }
}

/// Encoder forward pass over a batch of (already masked) token id sequences.
/// Attention over pad positions is masked to exactly zero. The captured trace
/// is taken before attention dropout.
pub fn encode<F: Scalar>(
    tape: &mut Tape<F>,
    params: &TapedParams,
    config: &ModelConfig,
    input_ids: &[Vec<usize>],
    valid_len: &[usize],
    capture_attention: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodeOutput> {
    let n = input_ids.first().map_or(0, |s| s.len());
    let dk = config.d_k();
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();
    for (seq, &vl) in input_ids.iter().zip(valid_len) {
        if seq.len() != n {
            return Err(Error::ShapeMismatch {
                op: "encode",
                detail: "ragged batch".into(),
            });
        }
        if vl > n {
            return Err(Error::Config(format!("valid_len {} exceeds sequence length {}", vl, n)));
        }
    }

    let ln_eps = 1e-5;
    let pos_ids: Vec<usize> = (0..n).collect();
    let mut hidden = Vec::with_capacity(input_ids.len());
    let mut attention = if capture_attention {
        Some(vec![vec![Vec::with_capacity(input_ids.len()); config.heads]; config.layers])
    } else {
        None
    };

    for (s, seq) in input_ids.iter().enumerate() {
        let vl = valid_len[s];
        // column mask: attention may only land on valid (non-pad) positions
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..vl {
                mask[i * n + j] = true;
            }
        }

        let emb = tape.gather(params.id("emb.tok"), seq)?;
        let pos = tape.gather(params.id("emb.pos"), &pos_ids)?;
        let mut x = tape.add(emb, pos)?;
        x = tape.layer_norm(x, params.id("emb.ln.gain"), params.id("emb.ln.bias"), ln_eps)?;

        for l in 0..config.layers {
            let p = |name: &str| params.id(&format!("layer{}.{}", l, name));
            let q = tape.matmul(x, p("attn.wq"))?;
            let q = tape.add_row_broadcast(q, p("attn.bq"))?;
            let k = tape.matmul(x, p("attn.wk"))?;
            let k = tape.add_row_broadcast(k, p("attn.bk"))?;
            let v = tape.matmul(x, p("attn.wv"))?;
            let v = tape.add_row_broadcast(v, p("attn.bv"))?;

            let mut head_ctx = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let qh = tape.slice_cols(q, h * dk, dk)?;
                let kh = tape.slice_cols(k, h * dk, dk)?;
                let vh = tape.slice_cols(v, h * dk, dk)?;
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt_dk);
                let att = tape.softmax_rows(scores, Some(&mask))?;
                if let Some(trace) = attention.as_mut() {
                    trace[l][h].push(att);
                }
                let att_used = match (&mut dropout_rng, config.attn_dropout > 0.0) {
                    (Some(rng), true) => {
                        let keep_prob = 1.0 - config.attn_dropout;
                        let scale = F::from_f64(1.0 / keep_prob);
                        let keep: Vec<F> = (0..n * n)
                            .map(|_| if rng.gen::<f64>() < keep_prob { scale } else { F::zero() })
                            .collect();
                        tape.dropout(att, keep)
                    }
                    _ => att,
                };
                head_ctx.push(tape.matmul(att_used, vh)?);
            }
            let ctx = tape.concat_cols(&head_ctx)?;
            let ao = tape.matmul(ctx, p("attn.wo"))?;
            let ao = tape.add_row_broadcast(ao, p("attn.bo"))?;
            let res = tape.add(x, ao)?;
            x = tape.layer_norm(res, p("ln1.gain"), p("ln1.bias"), ln_eps)?;

            let f = tape.matmul(x, p("ff.w1"))?;
            let f = tape.add_row_broadcast(f, p("ff.b1"))?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, p("ff.w2"))?;
            let f = tape.add_row_broadcast(f, p("ff.b2"))?;
            let res = tape.add(x, f)?;
            x = tape.layer_norm(res, p("ln2.gain"), p("ln2.bias"), ln_eps)?;
        }
        hidden.push(x);
    }

    Ok(EncodeOutput { hidden, attention })
}

/// Vocabulary logits via the transposed input embedding (weight tying) plus a
/// learned output bias. One logits node per sequence.
pub fn mlm_logits<F: Scalar>(
    tape: &mut Tape<F>,
    params: &TapedParams,
    hidden: &[NodeId],
) -> Result<Vec<NodeId>> {
    let tied = tape.transpose(params.id("emb.tok"));
    hidden
        .iter()
        .map(|&h| {
            let logits = tape.matmul(h, tied)?;
            tape.add_row_broadcast(logits, params.id("mlm.bias"))
        })
        .collect()
}

//! Incremental decoding with a key/value cache.
//!
//! [`Decoder::step`] performs exactly the floating-point operations of the
//! graph forward for the newest position, in the same order, so its logits
//! are bit-identical to [`super::forward_logits`] at that position.

use rand::Rng;

use super::batch::EncodedPair;
use super::model::{AdapterWeights, Model, Projection};
use super::vocab::{Vocab, BOS, EOS, SEP};
use crate::arabic_text::normalize;
use crate::autodiff::kernels::{self, axpy, dot, layer_norm_row, matmul_acc};
use crate::autodiff::LAYER_NORM_EPS;
use crate::error::{Error, Result};
use crate::seed::component_rng;

/// Anything that yields next-token logits one position at a time.
pub trait StepModel {
    type Cache;
    fn vocab_size(&self) -> usize;
    fn context_len(&self) -> usize;
    fn new_cache(&self) -> Self::Cache;
    /// Consumes `token` at the next free position and returns the logits
    /// predicting the position after it.
    fn step(&self, cache: &mut Self::Cache, token: u32) -> Result<Vec<f64>>;
}

struct LowRank {
    a_t: Vec<f64>, // [d_in, r]
    b_t: Vec<f64>, // [r, d_out]
    rank: usize,
}

/// Read-only inference view of a model and optional adapters.
pub struct Decoder<'a> {
    model: &'a Model,
    scaling: f64,
    low_rank: Vec<Option<LowRank>>,
}

pub struct KvCache {
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a Model, adapters: Option<&'a AdapterWeights>) -> Decoder<'a> {
        let n = model.layers.len() * 4;
        let mut low_rank = Vec::with_capacity(n);
        for slot in 0..n {
            let lr = adapters
                .and_then(|a| a.slots.get(slot).and_then(Option::as_ref))
                .map(|(a, b)| {
                    let (rank, d_in) = (a.shape()[0], a.shape()[1]);
                    let d_out = b.shape()[0];
                    LowRank {
                        a_t: kernels::transpose(a.data(), rank, d_in),
                        b_t: kernels::transpose(b.data(), d_out, rank),
                        rank,
                    }
                });
            low_rank.push(lr);
        }
        Decoder {
            model,
            scaling: adapters.map_or(0.0, |a| a.scaling),
            low_rank,
        }
    }

    fn project(&self, layer: usize, p: Projection, x: &[f64]) -> Vec<f64> {
        let w = self.model.layers[layer].projection(p);
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0; d_out];
        matmul_acc(x, w.data(), &mut out, 1, d_in, d_out);
        if let Some(lr) = &self.low_rank[layer * 4 + p.index()] {
            let mut low = vec![0.0; lr.rank];
            matmul_acc(x, &lr.a_t, &mut low, 1, d_in, lr.rank);
            let mut delta = vec![0.0; d_out];
            matmul_acc(&low, &lr.b_t, &mut delta, 1, lr.rank, d_out);
            for (o, dv) in out.iter_mut().zip(&delta) {
                *o += dv * self.scaling;
            }
        }
        out
    }
}

fn affine(x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = bias.len();
    let mut out = vec![0.0; n];
    matmul_acc(x, w, &mut out, 1, x.len(), n);
    for (o, b) in out.iter_mut().zip(bias) {
        *o += b;
    }
    out
}

impl StepModel for Decoder<'_> {
    type Cache = KvCache;

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn context_len(&self) -> usize {
        self.model.config.context_len
    }

    fn new_cache(&self) -> KvCache {
        let n = self.model.layers.len();
        KvCache {
            len: 0,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    fn step(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        let pos = cache.len;
        if pos >= cfg.context_len {
            return Err(Error::ContextOverflow {
                len: pos + 1,
                max: cfg.context_len,
            });
        }
        let tok = token as usize;
        if tok >= cfg.vocab_size {
            return Err(Error::ShapeMismatch {
                op: "step",
                left: vec![cfg.vocab_size],
                right: vec![tok],
            });
        }
        let d = cfg.embed_dim;
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let attn_scale = 1.0 / (dh as f64).sqrt();
        let t = pos + 1;

        let m = self.model;
        let mut x: Vec<f64> = m.tok_emb.data()[tok * d..(tok + 1) * d].to_vec();
        for (xv, p) in x.iter_mut().zip(&m.pos_emb.data()[pos * d..(pos + 1) * d]) {
            *xv += p;
        }
        let mut h = vec![0.0; d];
        for (li, layer) in m.layers.iter().enumerate() {
            layer_norm_row(&x, layer.ln1_gain.data(), layer.ln1_bias.data(), LAYER_NORM_EPS, &mut h);
            let q = self.project(li, Projection::Q, &h);
            let k = self.project(li, Projection::K, &h);
            let v = self.project(li, Projection::V, &h);
            cache.keys[li].extend_from_slice(&k);
            cache.values[li].extend_from_slice(&v);
            let keys = &cache.keys[li];
            let values = &cache.values[li];

            let mut ctx = vec![0.0; d];
            let mut scores = vec![0.0; t];
            for hd in 0..heads {
                let qh = &q[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                    *s = dot(qh, kj) * attn_scale;
                }
                kernels::softmax_in_place(&mut scores);
                let out = &mut ctx[hd * dh..(hd + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    axpy(p, &values[j * d + hd * dh..j * d + (hd + 1) * dh], out);
                }
            }
            let attn = self.project(li, Projection::O, &ctx);
            for (xv, a) in x.iter_mut().zip(&attn) {
                *xv += a;
            }

            layer_norm_row(&x, layer.ln2_gain.data(), layer.ln2_bias.data(), LAYER_NORM_EPS, &mut h);
            let mut u = affine(&h, layer.mlp_in.data(), layer.mlp_in_bias.data());
            for uv in u.iter_mut() {
                *uv = kernels::gelu(*uv);
            }
            let mo = affine(&u, layer.mlp_out.data(), layer.mlp_out_bias.data());
            for (xv, a) in x.iter_mut().zip(&mo) {
                *xv += a;
            }
        }
        layer_norm_row(&x, m.lnf_gain.data(), m.lnf_bias.data(), LAYER_NORM_EPS, &mut h);
        let mut logits = vec![0.0; cfg.vocab_size];
        matmul_acc(&h, m.head.data(), &mut logits, 1, d, cfg.vocab_size);
        cache.len = t;
        Ok(logits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    TopK { k: usize, temperature: f64, seed: u64 },
}

/// First index of the maximum; NaN entries never win.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] || logits[best].is_nan() {
            best = i;
        }
    }
    best
}

fn sample_top_k<R: Rng>(logits: &[f64], k: usize, temperature: f64, rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable: ties keep the lower id first
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k.max(1));
    let mut weights: Vec<f64> = order.iter().map(|&i| logits[i] / temperature).collect();
    kernels::softmax_in_place(&mut weights);
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (&id, w) in order.iter().zip(&weights) {
        acc += w;
        if r < acc {
            return id;
        }
    }
    *order.last().unwrap()
}

/// Answer ids for a prompt of already-encoded question ids.
pub fn generate_ids<M: StepModel>(
    model: &M,
    question: &[u32],
    max_new_tokens: usize,
    mode: DecodeMode,
) -> Result<Vec<u32>> {
    if max_new_tokens == 0 {
        return Err(Error::InvalidConfig("max_new_tokens must be at least 1".into()));
    }
    if let DecodeMode::TopK { k, temperature, .. } = mode {
        if k == 0 || !(temperature > 0.0) {
            return Err(Error::InvalidConfig("top-k decoding needs k ≥ 1 and temperature > 0".into()));
        }
    }
    let ctx = model.context_len();
    if question.len() + 2 > ctx {
        return Err(Error::ContextOverflow {
            len: question.len() + 2,
            max: ctx,
        });
    }
    let mut rng = match mode {
        DecodeMode::TopK { seed, .. } => Some(component_rng(seed, "decode")),
        DecodeMode::Greedy => None,
    };
    let mut cache = model.new_cache();
    model.step(&mut cache, BOS)?;
    for &id in question {
        model.step(&mut cache, id)?;
    }
    let mut logits = model.step(&mut cache, SEP)?;
    let mut fed = question.len() + 2;
    let mut out = Vec::new();
    loop {
        let next = match (mode, rng.as_mut()) {
            (DecodeMode::TopK { k, temperature, .. }, Some(r)) => sample_top_k(&logits, k, temperature, r),
            _ => argmax(&logits),
        } as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() >= max_new_tokens || fed >= ctx {
            break;
        }
        logits = model.step(&mut cache, next)?;
        fed += 1;
    }
    Ok(out)
}

/// Normalizes and encodes `question`, decodes greedily or by top-k
/// sampling, and returns the answer text without special tokens.
pub fn generate<M: StepModel>(
    model: &M,
    question: &str,
    vocab: &Vocab,
    max_new_tokens: usize,
    mode: DecodeMode,
) -> Result<String> {
    let q = vocab.encode(normalize(question).as_str());
    let ids = generate_ids(model, &q, max_new_tokens, mode)?;
    Ok(vocab.decode(&ids))
}

/// `(Σ masked NLL, number of masked positions)` of one encoded pair.
pub fn pair_nll<M: StepModel>(model: &M, pair: &EncodedPair) -> Result<(f64, usize)> {
    let mut cache = model.new_cache();
    let mut total = 0.0;
    let mut count = 0;
    for t in 0..pair.ids.len().saturating_sub(1) {
        let logits = model.step(&mut cache, pair.ids[t])?;
        if pair.loss_mask[t] == 0 {
            continue;
        }
        let target = pair.ids[t + 1] as usize;
        total += kernels::log_sum_exp(&logits) - logits[target];
        count += 1;
    }
    Ok((total, count))
}

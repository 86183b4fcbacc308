use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use crate::autodiff::{Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::seed::component_rng;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 2,
            context_len: 128,
            mlp_ratio: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.n_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.context_len < 8 {
            return Err(Error::InvalidConfig(format!(
                "context_len must be at least 8, got {}",
                self.context_len
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Attention projection a LoRA adapter can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }

    pub fn parse(s: &str) -> Result<Projection> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Ok(Projection::Q),
            "k" => Ok(Projection::K),
            "v" => Ok(Projection::V),
            "o" => Ok(Projection::O),
            _ => Err(Error::UnknownTarget(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// `[d_in, d_out]`; the layer computes `x · W`.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_in: Tensor,
    pub mlp_in_bias: Tensor,
    pub mlp_out: Tensor,
    pub mlp_out_bias: Tensor,
}

impl Layer {
    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
            Projection::O => &self.wo,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Tensor {
        match p {
            Projection::Q => &mut self.wq,
            Projection::K => &mut self.wk,
            Projection::V => &mut self.wv,
            Projection::O => &mut self.wo,
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.q", &self.wq),
            ("attn.k", &self.wk),
            ("attn.v", &self.wv),
            ("attn.o", &self.wo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.in", &self.mlp_in),
            ("mlp.in_bias", &self.mlp_in_bias),
            ("mlp.out", &self.mlp_out),
            ("mlp.out_bias", &self.mlp_out_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.mlp_in,
            &mut self.mlp_in_bias,
            &mut self.mlp_out,
            &mut self.mlp_out_bias,
        ]
    }
}

/// Pre-LN decoder-only transformer with learned positions and an untied
/// output projection.
///
/// Canonical parameter order (used by checkpoints and optimizers):
/// `tok_emb, pos_emb`, then per layer `ln1.gain, ln1.bias, attn.q, attn.k,
/// attn.v, attn.o, ln2.gain, ln2.bias, mlp.in, mlp.in_bias, mlp.out,
/// mlp.out_bias`, then `ln_f.gain, ln_f.bias, head`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<Layer>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub head: Tensor,
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = dist.sample(rng);
    }
    t
}

impl Model {
    /// Weights ~ N(0, 0.02²), biases 0, layer-norm gains 1. Seeded from
    /// `config.seed` through the `model-init` stream.
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = component_rng(config.seed, "model-init");
        let d = config.embed_dim;
        let hdim = config.hidden_dim();
        let v = config.vocab_size;
        let tok_emb = normal_tensor(&mut rng, &[v, d], INIT_STD);
        let pos_emb = normal_tensor(&mut rng, &[config.context_len, d], INIT_STD);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(Layer {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: normal_tensor(&mut rng, &[d, d], INIT_STD),
                wk: normal_tensor(&mut rng, &[d, d], INIT_STD),
                wv: normal_tensor(&mut rng, &[d, d], INIT_STD),
                wo: normal_tensor(&mut rng, &[d, d], INIT_STD),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                mlp_in: normal_tensor(&mut rng, &[d, hdim], INIT_STD),
                mlp_in_bias: Tensor::zeros(&[hdim]),
                mlp_out: normal_tensor(&mut rng, &[hdim, d], INIT_STD),
                mlp_out_bias: Tensor::zeros(&[d]),
            });
        }
        let head = normal_tensor(&mut rng, &[d, v], INIT_STD);
        Ok(Model {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: Tensor::full(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
            head,
        })
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("ln_f.gain".to_string(), &self.lnf_gain));
        out.push(("ln_f.bias".to_string(), &self.lnf_bias));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Same order as [`Model::named_parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.head);
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.named_parameters().into_iter().map(|(n, _)| n).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_parameters().iter().all(|(_, t)| t.all_finite())
    }

    /// Registers every tensor in `g`, as gradient-receiving leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut reg = |t: &Tensor| if trainable { g.param(t) } else { g.constant(t.clone()) };
        let tok_emb = reg(&self.tok_emb);
        let pos_emb = reg(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                ln1_gain: reg(&l.ln1_gain),
                ln1_bias: reg(&l.ln1_bias),
                proj: [reg(&l.wq), reg(&l.wk), reg(&l.wv), reg(&l.wo)],
                ln2_gain: reg(&l.ln2_gain),
                ln2_bias: reg(&l.ln2_bias),
                mlp_in: reg(&l.mlp_in),
                mlp_in_bias: reg(&l.mlp_in_bias),
                mlp_out: reg(&l.mlp_out),
                mlp_out_bias: reg(&l.mlp_out_bias),
            })
            .collect();
        let lnf_gain = reg(&self.lnf_gain);
        let lnf_bias = reg(&self.lnf_bias);
        let head = reg(&self.head);
        BoundModel {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain,
            lnf_bias,
            head,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    /// indexed by [`Projection::index`]
    pub proj: [Var; 4],
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub mlp_in: Var,
    pub mlp_in_bias: Var,
    pub mlp_out: Var,
    pub mlp_out_bias: Var,
}

/// Graph handles for a [`Model`]'s tensors.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
    pub head: Var,
}

impl BoundModel {
    /// Inverse of [`BoundModel::vars`]; `vars` must hold `5 + 12·n_layers` handles.
    pub fn from_vars(vars: &[Var]) -> Result<BoundModel> {
        let n = vars.len();
        if n < 5 || (n - 5) % 12 != 0 {
            return Err(Error::ShapeMismatch {
                op: "bound_model",
                left: vec![n],
                right: vec![],
            });
        }
        let layers = vars[2..n - 3]
            .chunks_exact(12)
            .map(|c| BoundLayer {
                ln1_gain: c[0],
                ln1_bias: c[1],
                proj: [c[2], c[3], c[4], c[5]],
                ln2_gain: c[6],
                ln2_bias: c[7],
                mlp_in: c[8],
                mlp_in_bias: c[9],
                mlp_out: c[10],
                mlp_out_bias: c[11],
            })
            .collect();
        Ok(BoundModel {
            tok_emb: vars[0],
            pos_emb: vars[1],
            layers,
            lnf_gain: vars[n - 3],
            lnf_bias: vars[n - 2],
            head: vars[n - 1],
        })
    }

    /// Handles in canonical parameter order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.ln1_gain,
                l.ln1_bias,
                l.proj[0],
                l.proj[1],
                l.proj[2],
                l.proj[3],
                l.ln2_gain,
                l.ln2_bias,
                l.mlp_in,
                l.mlp_in_bias,
                l.mlp_out,
                l.mlp_out_bias,
            ]);
        }
        out.extend([self.lnf_gain, self.lnf_bias, self.head]);
        out
    }
}

/// Low-rank adapter tensors: `slots[layer * 4 + projection]` holds
/// `(A [r × d_in], B [d_out × r])`. The adapted projection computes
/// `x·W + scaling · (x·Aᵀ)·Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub scaling: f64,
    pub slots: Vec<Option<(Tensor, Tensor)>>,
}

impl AdapterWeights {
    pub fn slot(&self, layer: usize, p: Projection) -> Option<&(Tensor, Tensor)> {
        self.slots.get(layer * 4 + p.index()).and_then(Option::as_ref)
    }

    /// Registers every adapter tensor in `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> AdapterBinding {
        AdapterBinding {
            scaling: self.scaling,
            slots: self
                .slots
                .iter()
                .map(|s| s.as_ref().map(|(a, b)| (g.param(a), g.param(b))))
                .collect(),
        }
    }
}

/// Low-rank adapters bound into a graph: `slots[layer * 4 + projection]`
/// holds `(A [r × d_in], B [d_out × r])`.
#[derive(Debug, Clone)]
pub struct AdapterBinding {
    pub scaling: f64,
    pub slots: Vec<Option<(Var, Var)>>,
}

fn project(
    g: &mut Graph,
    x: Var,
    w: Var,
    adapter: Option<(Var, Var)>,
    scaling: f64,
) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let Some((a, b)) = adapter else {
        return Ok(base);
    };
    let at = g.transpose(a)?;
    let bt = g.transpose(b)?;
    let low = g.matmul(x, at)?;
    let delta = g.matmul(low, bt)?;
    let delta = g.scale(delta, scaling);
    g.add(base, delta)
}

/// `[T,T]` additive mask: 0 on and below the diagonal, `-inf` above.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            m.data_mut()[i * t + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Logits of shape `[B·T, V]` for a right-padded batch.
pub fn forward_logits(
    g: &mut Graph,
    model: &BoundModel,
    config: &ModelConfig,
    adapters: Option<&AdapterBinding>,
    batch: &Batch,
) -> Result<Var> {
    let (b, t) = (batch.batch_size, batch.seq_len);
    if t > config.context_len {
        return Err(Error::ContextOverflow {
            len: t,
            max: config.context_len,
        });
    }
    if t == 0 || b == 0 {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: vec![b, t],
            right: vec![],
        });
    }
    if let Some(&bad) = batch.inputs.iter().find(|&&i| i >= config.vocab_size) {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: vec![config.vocab_size],
            right: vec![bad],
        });
    }
    let d = config.embed_dim;
    let heads = config.n_heads;
    let attn_scale = 1.0 / (config.head_dim() as f64).sqrt();

    let tok = g.embedding_gather(model.tok_emb, &batch.inputs)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = g.embedding_gather(model.pos_emb, &positions)?;
    let tok = g.reshape(tok, &[b, t, d])?;
    let x = g.add(tok, pos)?;
    let mut x = g.reshape(x, &[b * t, d])?;
    let mask = g.constant(causal_mask(t));

    for (li, layer) in model.layers.iter().enumerate() {
        let slot = |p: Projection| {
            adapters.and_then(|a| a.slots.get(li * 4 + p.index()).copied().flatten())
        };
        let scaling = adapters.map_or(0.0, |a| a.scaling);

        let h = g.layer_norm_rows(x, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
        let q = project(g, h, layer.proj[0], slot(Projection::Q), scaling)?;
        let k = project(g, h, layer.proj[1], slot(Projection::K), scaling)?;
        let v = project(g, h, layer.proj[2], slot(Projection::V), scaling)?;
        let q = g.reshape(q, &[b, t, d])?;
        let k = g.reshape(k, &[b, t, d])?;
        let v = g.reshape(v, &[b, t, d])?;
        let q = g.split_heads(q, heads)?;
        let k = g.split_heads(k, heads)?;
        let v = g.split_heads(v, heads)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, attn_scale);
        let scores = g.add(scores, mask)?;
        let probs = g.softmax_rows(scores)?;
        let ctx = g.matmul(probs, v)?;
        let ctx = g.merge_heads(ctx, heads)?;
        let ctx = g.reshape(ctx, &[b * t, d])?;
        let attn_out = project(g, ctx, layer.proj[3], slot(Projection::O), scaling)?;
        x = g.add(x, attn_out)?;

        let h = g.layer_norm_rows(x, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
        let u = g.matmul(h, layer.mlp_in)?;
        let u = g.add(u, layer.mlp_in_bias)?;
        let u = g.gelu(u);
        let m = g.matmul(u, layer.mlp_out)?;
        let m = g.add(m, layer.mlp_out_bias)?;
        x = g.add(x, m)?;
    }
    let h = g.layer_norm_rows(x, model.lnf_gain, model.lnf_bias, LAYER_NORM_EPS)?;
    g.matmul(h, model.head)
}

/// Masked mean NLL of a batch (position `t` predicts the id at `t + 1`).
pub fn batch_loss(
    g: &mut Graph,
    model: &BoundModel,
    config: &ModelConfig,
    adapters: Option<&AdapterBinding>,
    batch: &Batch,
) -> Result<Var> {
    let logits = forward_logits(g, model, config, adapters, batch)?;
    g.cross_entropy_masked(logits, &batch.targets, &batch.mask)
}

/// Logits `[B·T·V]` as plain numbers, computed through the graph.
pub fn graph_logits(model: &Model, adapters: Option<&AdapterWeights>, batch: &Batch) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let ab = adapters.map(|a| a.bind(&mut g));
    let out = forward_logits(&mut g, &bound, &model.config, ab.as_ref(), batch)?;
    Ok(g.value(out).data().to_vec())
}

pub fn graph_loss(model: &Model, adapters: Option<&AdapterWeights>, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let ab = adapters.map(|a| a.bind(&mut g));
    let out = batch_loss(&mut g, &bound, &model.config, ab.as_ref(), batch)?;
    Ok(g.value(out).item())
}

impl Model {
    pub fn logits(&self, batch: &Batch) -> Result<Vec<f64>> {
        graph_logits(self, None, batch)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        graph_loss(self, None, batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_graph;
    use crate::tiny_lm::batch::EncodedPair;
    use rand::Rng;

    fn config(vocab: usize, d: usize, ctx: usize, seed: u64) -> ModelConfig {
        let mut c = ModelConfig::new(vocab);
        c.embed_dim = d;
        c.context_len = ctx;
        c.seed = seed;
        c
    }

    fn random_pairs(seed: u64, n: usize, vocab: u32, len: usize) -> Vec<EncodedPair> {
        let mut rng = component_rng(seed, "test-data");
        (0..n)
            .map(|_| {
                let q: Vec<u32> = (0..len / 2).map(|_| rng.gen_range(5..vocab)).collect();
                let a: Vec<u32> = (0..len / 2).map(|_| rng.gen_range(5..vocab)).collect();
                EncodedPair::from_ids(&q, &a, 128).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(10).validate().is_ok());
        let mut c = ModelConfig::new(10);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = ModelConfig::new(10);
        c.context_len = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_statistics() {
        let m = Model::init(ModelConfig::new(50)).unwrap();
        let w = m.layers[0].mlp_in.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.002, "{mean}");
        assert!((var.sqrt() - INIT_STD).abs() < 0.001, "{}", var.sqrt());
        assert!(m.layers[1].mlp_out_bias.data().iter().all(|&b| b == 0.0));
        assert!(m.lnf_gain.data().iter().all(|&g| g == 1.0));
        assert_eq!(Model::init(ModelConfig::new(50)).unwrap(), m);
        let names = m.parameter_names();
        assert_eq!(names.len(), 5 + 12 * 2);
        assert_eq!(names[2], "layers.0.ln1.gain");
        assert_eq!(names.last().unwrap(), "head");
    }

    #[test]
    fn logits_are_causal_bitwise() {
        let m = Model::init(config(20, 16, 16, 4)).unwrap();
        let base: Vec<u32> = vec![1, 7, 8, 9, 2, 10, 11, 12, 3];
        let v = 20;
        for t in 0..base.len() - 2 {
            let mut changed = base.clone();
            changed[t + 1] = if changed[t + 1] == 15 { 16 } else { 15 };
            let p0 = EncodedPair { ids: base.clone(), loss_mask: vec![1; base.len()] };
            let p1 = EncodedPair { ids: changed, loss_mask: vec![1; base.len()] };
            let l0 = m.logits(&Batch::from_pairs(&[&p0])).unwrap();
            let l1 = m.logits(&Batch::from_pairs(&[&p1])).unwrap();
            assert_eq!(l0[..(t + 1) * v], l1[..(t + 1) * v], "prefix through {t}");
            assert_ne!(l0[(t + 1) * v..], l1[(t + 1) * v..]);
        }
    }

    #[test]
    fn identical_rows_in_a_batch_agree() {
        let m = Model::init(config(20, 16, 16, 1)).unwrap();
        let p = random_pairs(1, 1, 20, 8).remove(0);
        let logits = m.logits(&Batch::from_pairs(&[&p, &p, &p])).unwrap();
        let row = logits.len() / 3;
        assert_eq!(logits[..row], logits[row..2 * row]);
        assert_eq!(logits[..row], logits[2 * row..]);
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let v = 60;
        let m = Model::init(config(v, 64, 128, 2)).unwrap();
        let pairs = random_pairs(2, 8, v as u32, 40);
        let refs: Vec<&EncodedPair> = pairs.iter().collect();
        let loss = m.loss(&Batch::from_pairs(&refs)).unwrap();
        let ln_v = (v as f64).ln();
        assert!((loss - ln_v).abs() / ln_v < 0.15, "{loss} vs {ln_v}");
    }

    #[test]
    fn loss_matches_per_token_oracle() {
        let v = 25;
        let m = Model::init(config(v, 16, 32, 6)).unwrap();
        let mut pairs = random_pairs(6, 3, v as u32, 10);
        pairs[1] = EncodedPair::from_ids(&[7, 8], &[9], 32).unwrap();
        let refs: Vec<&EncodedPair> = pairs.iter().collect();
        let batch = Batch::from_pairs(&refs);
        let logits = m.logits(&batch).unwrap();
        let (mut total, mut count) = (0.0, 0.0);
        for (r, (&t, &mk)) in batch.targets.iter().zip(&batch.mask).enumerate() {
            if mk == 0.0 {
                continue;
            }
            let row = &logits[r * v..(r + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total += z.ln() - row[t];
            count += 1.0;
        }
        assert!((m.loss(&batch).unwrap() - total / count).abs() < 1e-10);
    }

    #[test]
    fn question_targets_do_not_affect_loss() {
        let m = Model::init(config(20, 16, 32, 8)).unwrap();
        let p = EncodedPair::from_ids(&[7, 8, 9], &[10, 11], 32).unwrap();
        let mut batch = Batch::from_pairs(&[&p]);
        let before = m.loss(&batch).unwrap();
        batch.targets[1] = 19;
        batch.targets[2] = 5;
        assert_eq!(m.loss(&batch).unwrap().to_bits(), before.to_bits());
    }

    #[test]
    fn overlong_batch_overflows_context() {
        let m = Model::init(config(20, 16, 8, 0)).unwrap();
        let p = EncodedPair { ids: vec![5; 10], loss_mask: vec![1; 10] };
        assert!(matches!(
            m.loss(&Batch::from_pairs(&[&p])),
            Err(Error::ContextOverflow { len: 9, max: 8 })
        ));
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut cfg = config(12, 8, 8, 5);
        cfg.n_layers = 1;
        cfg.mlp_ratio = 2;
        let m = Model::init(cfg.clone()).unwrap();
        let mut rng = component_rng(5, "perturb");
        let mut params: Vec<Tensor> = m.named_parameters().into_iter().map(|(_, t)| t.clone()).collect();
        // larger weights so gradients are not dominated by rounding
        for t in &mut params {
            for x in t.data_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
        let pairs = [
            EncodedPair::from_ids(&[5, 6], &[7, 8], 8).unwrap(),
            EncodedPair::from_ids(&[9], &[10, 11, 6], 8).unwrap(),
        ];
        let batch = Batch::from_pairs(&[&pairs[0], &pairs[1]]);
        let rep = check_graph(
            |g, vars| batch_loss(g, &BoundModel::from_vars(vars)?, &cfg, None, &batch),
            &params,
            1e-5,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(rep.passes(0.99, 1e-3), "{rep:?}");
    }
}

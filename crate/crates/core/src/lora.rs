//! Low-rank adapters on the attention projections of a frozen base model.
//!
//! An adapted projection computes `x·W + (alpha/r)·(x·Aᵀ)·Bᵀ` with
//! `A: r × d_in` and `B: d_out × r`. Weights are stored `[d_in, d_out]`, so
//! the effective weight is `W + (alpha/r)·(B·A)ᵀ`.

use std::collections::BTreeSet;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::seed::component_rng;
use crate::tiny_lm::{graph_logits, graph_loss, AdapterWeights, Batch, Decoder, Model, Projection, INIT_STD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<Projection>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            targets: [Projection::Q, Projection::V].into_iter().collect(),
            seed: 0,
        }
    }
}

impl LoraConfig {
    /// Parses target names such as `q`, `v`.
    pub fn parse_targets<S: AsRef<str>>(names: &[S]) -> Result<BTreeSet<Projection>> {
        names.iter().map(|n| Projection::parse(n.as_ref().trim())).collect()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("lora rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("lora alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// A frozen base model with one adapter pair per (layer, target).
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub base: Model,
    pub config: LoraConfig,
    pub adapters: AdapterWeights,
}

/// `A ~ N(0, 0.02²)` from the `lora-init` stream, `B = 0`, so the adapted
/// model computes exactly what the base does.
pub fn attach(model: Model, config: LoraConfig) -> Result<AdaptedModel> {
    config.validate()?;
    if config.targets.is_empty() {
        return Err(Error::InvalidConfig("lora needs at least one target".into()));
    }
    let mut rng = component_rng(config.seed, "lora-init");
    let dist = Normal::new(0.0, INIT_STD).expect("positive std");
    let mut slots = Vec::with_capacity(model.layers.len() * 4);
    for layer in &model.layers {
        for p in Projection::ALL {
            if !config.targets.contains(&p) {
                slots.push(None);
                continue;
            }
            let w = layer.projection(p);
            let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
            let mut a = Tensor::zeros(&[config.rank, d_in]);
            for x in a.data_mut() {
                *x = dist.sample(&mut rng);
            }
            slots.push(Some((a, Tensor::zeros(&[d_out, config.rank]))));
        }
    }
    let adapters = AdapterWeights {
        scaling: config.scaling(),
        slots,
    };
    Ok(AdaptedModel {
        base: model,
        config,
        adapters,
    })
}

/// Bakes the adapters into a copy of the base weights.
pub fn merge(adapted: &AdaptedModel) -> Model {
    let mut out = adapted.base.clone();
    let s = adapted.adapters.scaling;
    for (li, layer) in out.layers.iter_mut().enumerate() {
        for p in Projection::ALL {
            let Some((a, b)) = adapted.adapters.slot(li, p) else {
                continue;
            };
            let (rank, d_in) = (a.shape()[0], a.shape()[1]);
            let d_out = b.shape()[0];
            // (B·A)ᵀ = Aᵀ·Bᵀ, shaped [d_in, d_out] like W
            let a_t = kernels::transpose(a.data(), rank, d_in);
            let b_t = kernels::transpose(b.data(), d_out, rank);
            let mut delta = vec![0.0; d_in * d_out];
            kernels::matmul_acc(&a_t, &b_t, &mut delta, d_in, rank, d_out);
            kernels::axpy(s, &delta, layer.projection_mut(p).data_mut());
        }
    }
    out
}

impl AdaptedModel {
    /// The A and B tensors, named `layers.{l}.attn.{target}.lora_a|lora_b`,
    /// in layer-then-projection order.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, slot) in self.adapters.slots.iter().enumerate() {
            if let Some((a, b)) = slot {
                let (l, p) = (i / 4, Projection::ALL[i % 4].name());
                out.push((format!("layers.{l}.attn.{p}.lora_a"), a));
                out.push((format!("layers.{l}.attn.{p}.lora_b"), b));
            }
        }
        out
    }

    /// Same order as [`AdaptedModel::trainable_parameters`].
    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (a, b) in self.adapters.slots.iter_mut().flatten() {
            out.push(a);
            out.push(b);
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder::new(&self.base, Some(&self.adapters))
    }

    pub fn logits(&self, batch: &Batch) -> Result<Vec<f64>> {
        graph_logits(&self.base, Some(&self.adapters), batch)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        graph_loss(&self.base, Some(&self.adapters), batch)
    }

    pub fn all_finite(&self) -> bool {
        self.trainable_parameters().iter().all(|(_, t)| t.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_graph;
    use crate::autodiff::Graph;
    use crate::tiny_lm::{batch_loss, AdapterBinding, EncodedPair, ModelConfig, StepModel};
    use rand::Rng;

    fn model(d: usize, seed: u64) -> Model {
        let mut c = ModelConfig::new(16);
        c.embed_dim = d;
        c.context_len = 16;
        c.seed = seed;
        Model::init(c).unwrap()
    }

    fn batch() -> Batch {
        let p0 = EncodedPair::from_ids(&[5, 6, 7], &[8, 9], 16).unwrap();
        let p1 = EncodedPair::from_ids(&[10], &[11, 12, 13, 14], 16).unwrap();
        Batch::from_pairs(&[&p0, &p1])
    }

    fn randomize_b(adapted: &mut AdaptedModel, seed: u64) {
        let mut rng = component_rng(seed, "test-b");
        for (_, b) in adapted.adapters.slots.iter_mut().flatten() {
            for x in b.data_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn attach_is_transparent() {
        let base = model(16, 1);
        let adapted = attach(base.clone(), LoraConfig::default()).unwrap();
        let b = batch();
        assert_eq!(adapted.logits(&b).unwrap(), base.logits(&b).unwrap());
        assert_eq!(merge(&adapted), base);
    }

    #[test]
    fn default_trainable_count() {
        let adapted = attach(model(64, 0), LoraConfig::default()).unwrap();
        assert_eq!(adapted.trainable_count(), 2048);
        assert!(adapted.trainable_count() < adapted.base.parameter_count());
        let names: Vec<String> = adapted.trainable_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "layers.0.attn.q.lora_a");
        assert_eq!(names[3], "layers.0.attn.v.lora_b");
    }

    #[test]
    fn unknown_target_is_rejected() {
        assert!(matches!(LoraConfig::parse_targets(&["q", "mlp"]), Err(Error::UnknownTarget(t)) if t == "mlp"));
        let t = LoraConfig::parse_targets(&["V", " q"]).unwrap();
        assert_eq!(t, LoraConfig::default().targets);
    }

    #[test]
    fn full_rank_effective_weight() {
        // r = d_in = d_out: W_eff = W + s·(B·A)ᵀ entry by entry
        let d = 4;
        let mut cfg = ModelConfig::new(10);
        cfg.embed_dim = d;
        cfg.n_heads = 1;
        cfg.context_len = 8;
        let base = Model::init(cfg).unwrap();
        let lc = LoraConfig {
            rank: d,
            alpha: 3.0,
            targets: [Projection::K].into_iter().collect(),
            seed: 2,
        };
        let mut adapted = attach(base, lc).unwrap();
        randomize_b(&mut adapted, 2);
        let merged = merge(&adapted);
        let (a, b) = adapted.adapters.slot(1, Projection::K).unwrap();
        let s = 3.0 / d as f64;
        let w = adapted.base.layers[1].wk.data();
        for i in 0..d {
            for j in 0..d {
                let mut ba = 0.0;
                for r in 0..d {
                    ba += b.data()[j * d + r] * a.data()[r * d + i];
                }
                let expect = w[i * d + j] + s * ba;
                assert!((merged.layers[1].wk.data()[i * d + j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn merge_matches_adapted_forward() {
        let mut adapted = attach(model(16, 3), LoraConfig::default()).unwrap();
        randomize_b(&mut adapted, 3);
        let merged = merge(&adapted);
        let b = batch();
        let lhs = adapted.logits(&b).unwrap();
        let rhs = merged.logits(&b).unwrap();
        let worst = lhs.iter().zip(&rhs).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "{worst}");
        assert!(lhs != base_logits(&adapted, &b));
        assert_eq!(merge(&adapted), merged);
    }

    fn base_logits(adapted: &AdaptedModel, b: &Batch) -> Vec<f64> {
        adapted.base.logits(b).unwrap()
    }

    #[test]
    fn cached_decoder_matches_graph_with_adapters() {
        let mut adapted = attach(model(16, 4), LoraConfig::default()).unwrap();
        randomize_b(&mut adapted, 4);
        let ids = [1u32, 5, 6, 2, 8, 9];
        let p = EncodedPair { ids: ids.to_vec(), loss_mask: vec![1; 6] };
        let full = adapted.logits(&Batch::from_pairs(&[&p])).unwrap();
        let dec = adapted.decoder();
        let mut cache = dec.new_cache();
        for t in 0..5 {
            assert_eq!(dec.step(&mut cache, ids[t]).unwrap(), full[t * 16..(t + 1) * 16].to_vec());
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut adapted = attach(model(8, 5), LoraConfig { rank: 2, ..LoraConfig::default() }).unwrap();
        randomize_b(&mut adapted, 5);
        let params: Vec<Tensor> = adapted.trainable_parameters().into_iter().map(|(_, t)| t.clone()).collect();
        let b = batch();
        let base = adapted.base.clone();
        let template = adapted.adapters.clone();
        let rep = check_graph(
            |g: &mut Graph, vars| {
                let bound = base.bind(g, false);
                let mut it = vars.chunks_exact(2);
                let slots = template
                    .slots
                    .iter()
                    .map(|s| s.as_ref().map(|_| {
                        let c = it.next().unwrap();
                        (c[0], c[1])
                    }))
                    .collect();
                let ab = AdapterBinding { scaling: template.scaling, slots };
                batch_loss(g, &bound, &base.config, Some(&ab), &b)
            },
            &params,
            1e-5,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(rep.passes(0.99, 1e-3), "{rep:?}");
    }
}

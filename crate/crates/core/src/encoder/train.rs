use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mlm_loss_and_grad, ModelParams};
use crate::autodiff::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::world::{scan_novel_leaks, CompositionalPair, Instance, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 3e-3, batch_size: 16 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("encoder.batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("encoder.lr", "must be > 0"));
        }
        Ok(())
    }
}

/// Model inputs for one MLM step. Concept slots are always masked; nothing
/// else is.
#[derive(Clone, Debug)]
pub struct MlmBatch {
    pub instances: Vec<Instance>,
    pub targets: Vec<(TokenId, TokenId)>,
}

impl MlmBatch {
    pub fn build(source: &[&Instance], mask: TokenId) -> Self {
        let mut instances = Vec::with_capacity(source.len());
        let mut targets = Vec::with_capacity(source.len());
        for inst in source {
            let mut i = (*inst).clone();
            i.caption[i.mask_slots.0] = mask;
            i.caption[i.mask_slots.1] = mask;
            targets.push((i.gold.attr, i.gold.obj));
            instances.push(i);
        }
        Self { instances, targets }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskAudit {
    pub concept_slots: usize,
    pub concept_masked: usize,
    pub context_tokens: usize,
    pub context_masked: usize,
}

impl MaskAudit {
    pub fn concept_rate(&self) -> f64 {
        self.concept_masked as f64 / self.concept_slots.max(1) as f64
    }

    pub fn context_rate(&self) -> f64 {
        self.context_masked as f64 / self.context_tokens.max(1) as f64
    }
}

/// Count masked concept slots and masked (or leaked gold) context positions.
pub fn mask_audit(batch: &MlmBatch, mask: TokenId, cls: TokenId) -> MaskAudit {
    let mut a = MaskAudit { concept_slots: 0, concept_masked: 0, context_tokens: 0, context_masked: 0 };
    for inst in &batch.instances {
        for (p, &t) in inst.caption.iter().enumerate() {
            if p == inst.mask_slots.0 || p == inst.mask_slots.1 {
                a.concept_slots += 1;
                a.concept_masked += usize::from(t == mask);
            } else if t != cls {
                a.context_tokens += 1;
                a.context_masked += usize::from(t == mask || t == inst.gold.attr || t == inst.gold.obj);
            }
        }
    }
    a
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ModelParams,
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
    pub audit: MaskAudit,
}

/// Plain masked-concept training with Adam. Refuses a train split that
/// contains any novel composition.
pub fn train_retriever_encoder(
    params: &ModelParams,
    train: &[Instance],
    novel: &BTreeSet<CompositionalPair>,
    mask: TokenId,
    cls: TokenId,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty train split".into()));
    }
    let leaks = scan_novel_leaks(train, novel);
    if let Some(l) = leaks.first() {
        return Err(Error::Invalid(format!("train split leaks novel pair {} at instance {}", l.pair, l.index)));
    }
    let mut p = params.clone();
    let adam = AdamConfig::with_lr(config.lr);
    let mut state = AdamState::new(p.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    let mut audit = MaskAudit { concept_slots: 0, concept_masked: 0, context_tokens: 0, context_masked: 0 };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let src: Vec<&Instance> = idx.iter().map(|&i| &train[i]).collect();
            let batch = MlmBatch::build(&src, mask);
            let a = mask_audit(&batch, mask, cls);
            audit.concept_slots += a.concept_slots;
            audit.concept_masked += a.concept_masked;
            audit.context_tokens += a.context_tokens;
            audit.context_masked += a.context_masked;
            let refs: Vec<&Instance> = batch.instances.iter().collect();
            let (loss, grad) = match mlm_loss_and_grad(&p, &refs) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { epoch, step }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            state.step(&adam, &mut p.theta, &grad);
            losses.push(loss);
        }
    }
    Ok(TrainReport { params: p, losses, audit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{argmax, batch_logits, init_params, EncoderConfig};
    use crate::world::{generate_world, WorldConfig};

    fn separable() -> (crate::world::World, WorldConfig) {
        let cfg = WorldConfig {
            attributes: 5,
            verbs: 1,
            objects: 5,
            context_tokens: 8,
            pairs: 20,
            novel_pairs: 0,
            instances_per_pair: 3,
            feature_dim: 8,
            noise: 0.0,
            ..WorldConfig::default()
        };
        (generate_world(&cfg, 1).unwrap(), cfg)
    }

    #[test]
    fn tiny_world_is_learned_and_audited() {
        let (w, wc) = separable();
        let ec = EncoderConfig { d: 16, layers: 1, heads: 2, ..EncoderConfig::new(w.vocab.size(), wc.region_dim()) };
        let p0 = init_params(&ec, 0).unwrap();
        let tc = TrainConfig { epochs: 30, lr: 1e-2, batch_size: 12 };
        let r = train_retriever_encoder(&p0, &w.instances, &BTreeSet::new(), w.vocab.mask, w.vocab.cls, &tc, 0)
            .unwrap();
        assert_eq!(r.audit.concept_rate(), 1.0);
        assert_eq!(r.audit.context_rate(), 0.0);
        assert!(r.losses.last().unwrap() < &r.losses[0]);
        let views: Vec<_> = w.instances.iter().map(|i| i.masked()).collect();
        let logits = batch_logits(&r.params, &views).unwrap();
        let correct = w
            .instances
            .iter()
            .enumerate()
            .filter(|(b, i)| {
                argmax(&logits[2 * b]) == i.gold.attr as usize && argmax(&logits[2 * b + 1]) == i.gold.obj as usize
            })
            .count();
        assert!(correct as f64 / w.instances.len() as f64 > 0.9, "accuracy {correct}/{}", w.instances.len());

        let again = train_retriever_encoder(&p0, &w.instances, &BTreeSet::new(), w.vocab.mask, w.vocab.cls, &tc, 0)
            .unwrap();
        assert!(r.losses.iter().zip(&again.losses).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn leaking_train_split_is_refused() {
        let (w, wc) = separable();
        let ec = EncoderConfig { d: 8, layers: 1, heads: 2, ..EncoderConfig::new(w.vocab.size(), wc.region_dim()) };
        let p0 = init_params(&ec, 0).unwrap();
        let novel: BTreeSet<_> = [w.pairs[0]].into_iter().collect();
        let r = train_retriever_encoder(&p0, &w.instances, &novel, 2, 1, &TrainConfig::default(), 0);
        assert!(r.is_err());
    }
}

//! Restrict slot predictions to concepts present in the support set.

use std::collections::BTreeSet;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::encoder::argmax_among;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::world::{SlotRole, TokenId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportVocab {
    pub attr: BTreeSet<TokenId>,
    pub obj: BTreeSet<TokenId>,
}

impl SupportVocab {
    pub fn for_role(&self, role: SlotRole) -> &BTreeSet<TokenId> {
        match role {
            SlotRole::Attr => &self.attr,
            SlotRole::Obj => &self.obj,
        }
    }
}

/// Gold element concepts of the support items, split by slot role.
pub fn support_vocab(episode: &Episode) -> Result<SupportVocab> {
    if episode.support.is_empty() {
        return Err(Error::EmptySupport);
    }
    Ok(SupportVocab {
        attr: episode.support.iter().map(|s| s.gold.attr).collect(),
        obj: episode.support.iter().map(|s| s.gold.obj).collect(),
    })
}

/// Logits outside `candidates` become negative infinity.
pub fn mask_logits(logits: &[f64], candidates: &BTreeSet<TokenId>) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if candidates.contains(&(i as TokenId)) { v } else { f64::NEG_INFINITY })
        .collect()
}

/// Softmax of masked logits: zero mass outside the candidates.
pub fn restricted_softmax(logits: &[f64], candidates: &BTreeSet<TokenId>) -> Vec<f64> {
    let masked = mask_logits(logits, candidates);
    let m = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = masked.iter().map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { (v - m).exp() }).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Verbalized argmax; ties go to the smallest token id.
pub fn predict(logits: &[f64], candidates: &BTreeSet<TokenId>) -> Result<TokenId> {
    let c: Vec<TokenId> = candidates.iter().copied().collect();
    argmax_among(logits, &c).ok_or(Error::EmptySupport)
}

/// Mean restricted cross-entropy over the rows of `logits`.
///
/// Row `r` is scored over `candidates[r]` only. Rows whose target is not a
/// candidate contribute nothing; if every row is skipped the result is `None`.
pub fn restricted_cross_entropy(
    g: &mut Graph,
    logits: NodeId,
    candidates: &[&BTreeSet<TokenId>],
    targets: &[TokenId],
) -> Result<Option<NodeId>> {
    let mut terms = Vec::new();
    for (r, (cands, &t)) in candidates.iter().zip(targets).enumerate() {
        let ids: Vec<usize> = cands.iter().map(|&c| c as usize).collect();
        let Some(pos) = ids.iter().position(|&c| c == t as usize) else { continue };
        let row = g.slice_rows(logits, r, 1)?;
        let sel = g.index_select(row, &ids)?;
        let logp = g.log_softmax(sel)?;
        let mut w = Tensor::zeros(1, ids.len());
        w.set(0, pos, -1.0);
        let w = g.constant(w);
        let picked = g.mul(logp, w)?;
        terms.push(g.sum(picked)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let n = terms.len();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(Some(g.scale(total, 1.0 / n as f64)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::SupportMode;
    use crate::retriever::RetrievalResult;
    use crate::world::{CompositionalPair, Instance, PairKind};
    use proptest::prelude::*;

    fn inst(attr: TokenId, obj: TokenId) -> Instance {
        Instance {
            caption: vec![1, 2, 2],
            regions: vec![],
            mask_slots: (1, 2),
            gold: CompositionalPair { attr, obj, kind: PairKind::AdjNoun },
        }
    }

    fn episode(support: Vec<Instance>) -> Episode {
        Episode {
            support_refs: (0..support.len()).collect(),
            support,
            query: inst(3, 4),
            mode: SupportMode::DivK,
            k: 4,
            retrieval: RetrievalResult::default(),
        }
    }

    #[test]
    fn candidates_come_from_support_labels() {
        let v = support_vocab(&episode(vec![inst(5, 8), inst(6, 9)])).unwrap();
        assert_eq!(v.attr, [5, 6].into_iter().collect());
        assert_eq!(v.obj, [8, 9].into_iter().collect());
        let v = support_vocab(&episode(vec![inst(5, 8)])).unwrap();
        assert_eq!((v.attr.len(), v.obj.len()), (1, 1));
        assert!(matches!(support_vocab(&episode(vec![])), Err(Error::EmptySupport)));
    }

    #[test]
    fn full_candidate_set_is_identity() {
        let l = vec![0.3, -1.0, 2.0, 0.0];
        let all: BTreeSet<TokenId> = (0..4).collect();
        assert_eq!(mask_logits(&l, &all), l);
    }

    #[test]
    fn graph_loss_matches_restricted_softmax() {
        let l = vec![0.5, 1.5, -0.2, 0.9, 0.1];
        let c: BTreeSet<TokenId> = [1, 3, 4].into_iter().collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&l));
        let loss = restricted_cross_entropy(&mut g, x, &[&c], &[3]).unwrap().unwrap();
        let p = restricted_softmax(&l, &c);
        assert!((g.value(loss).item() + p[3].ln()).abs() < 1e-12);
        assert!(restricted_cross_entropy(&mut g, x, &[&c], &[0]).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn restricted_softmax_matches_brute_force(
            l in prop::collection::vec(-10.0f64..10.0, 8),
            mask in prop::collection::vec(any::<bool>(), 8),
        ) {
            let mut c: BTreeSet<TokenId> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i as TokenId).collect();
            if c.is_empty() { c.insert(0); }
            let p = restricted_softmax(&l, &c);
            let z: f64 = c.iter().map(|&i| l[i as usize].exp()).sum();
            for i in 0..8 {
                let expect = if c.contains(&(i as TokenId)) { l[i].exp() / z } else { 0.0 };
                prop_assert!((p[i] - expect).abs() < 1e-12);
            }
            let pred = predict(&l, &c).unwrap();
            prop_assert!(c.contains(&pred));
            let masked = mask_logits(&l, &c);
            for &a in &c { for &b in &c {
                prop_assert_eq!(l[a as usize] < l[b as usize], masked[a as usize] < masked[b as usize]);
            }}
        }
    }
}

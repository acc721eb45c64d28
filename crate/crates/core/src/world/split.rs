use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{CompositionalPair, Instance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    TestSeen,
    TestNovel,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [SplitName::Train, SplitName::Val, SplitName::TestSeen, SplitName::TestNovel];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::TestSeen => "test_seen",
            SplitName::TestNovel => "test_novel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test_seen: Vec<Instance>,
    pub test_novel: Vec<Instance>,
    pub novel_pairs: BTreeSet<CompositionalPair>,
}

impl DatasetSplits {
    pub fn get(&self, name: SplitName) -> &[Instance] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::TestSeen => &self.test_seen,
            SplitName::TestNovel => &self.test_novel,
        }
    }

    pub fn get_mut(&mut self, name: SplitName) -> &mut Vec<Instance> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::TestSeen => &mut self.test_seen,
            SplitName::TestNovel => &mut self.test_novel,
        }
    }

    pub fn is_novel(&self, pair: &CompositionalPair) -> bool {
        self.novel_pairs.contains(pair)
    }

    pub fn len(&self) -> usize {
        SplitName::ALL.iter().map(|&s| self.get(s).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stratified split. For each seen pair the first `val_fraction` of its
/// instances go to validation, the next `val_fraction` to test-seen and the
/// rest to train. Novel pair instances are divided between validation and
/// test-novel; every novel pair keeps at least one test-novel instance.
pub fn split_novel(
    instances: &[Instance],
    novel: &BTreeSet<CompositionalPair>,
    val_fraction: f64,
) -> Result<DatasetSplits> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config("val_fraction", "must be in (0, 1)"));
    }
    let mut by_pair: BTreeMap<CompositionalPair, Vec<&Instance>> = BTreeMap::new();
    for inst in instances {
        by_pair.entry(inst.gold).or_default().push(inst);
    }
    for p in novel {
        if !by_pair.contains_key(p) {
            return Err(Error::EmptyNovelPair { attr: p.attr, obj: p.obj });
        }
    }
    let mut splits = DatasetSplits { novel_pairs: novel.clone(), ..Default::default() };
    // Walk instances in input order so each split preserves generation order.
    let mut rank: BTreeMap<CompositionalPair, usize> = BTreeMap::new();
    for inst in instances {
        let n = by_pair[&inst.gold].len();
        let r = rank.entry(inst.gold).or_default();
        let n_val = (n as f64 * val_fraction).round() as usize;
        let target = if novel.contains(&inst.gold) {
            if *r < n_val.min(n - 1) {
                SplitName::Val
            } else {
                SplitName::TestNovel
            }
        } else if *r < n_val {
            SplitName::Val
        } else if *r < 2 * n_val {
            SplitName::TestSeen
        } else {
            SplitName::Train
        };
        *r += 1;
        splits.get_mut(target).push(inst.clone());
    }
    Ok(splits)
}

/// A place where a novel composition shows up somewhere it must not.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Leak {
    pub index: usize,
    pub pair: CompositionalPair,
    pub in_caption: bool,
}

/// Exhaustively scan `instances` for novel pairs, either as the gold pair or
/// with both tokens present anywhere in the caption.
pub fn scan_novel_leaks(instances: &[Instance], novel: &BTreeSet<CompositionalPair>) -> Vec<Leak> {
    let mut leaks = Vec::new();
    for (index, inst) in instances.iter().enumerate() {
        for pair in novel {
            if inst.gold.attr == pair.attr && inst.gold.obj == pair.obj {
                leaks.push(Leak { index, pair: *pair, in_caption: false });
            } else if inst.caption.contains(&pair.attr) && inst.caption.contains(&pair.obj) {
                leaks.push(Leak { index, pair: *pair, in_caption: true });
            }
        }
    }
    leaks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{choose_novel_pairs, generate_world, WorldConfig};

    fn world_and_novel() -> (crate::world::World, BTreeSet<CompositionalPair>) {
        let cfg = WorldConfig::default();
        let w = generate_world(&cfg, 5).unwrap();
        let novel = choose_novel_pairs(&w, cfg.novel_pairs, 5).unwrap();
        (w, novel)
    }

    #[test]
    fn empty_novel_set_gives_empty_novel_test() {
        let (w, _) = world_and_novel();
        let s = split_novel(&w.instances, &BTreeSet::new(), 0.15).unwrap();
        assert!(s.test_novel.is_empty());
        assert_eq!(s.len(), w.instances.len());
    }

    #[test]
    fn train_is_free_of_novel_pairs_by_scan() {
        let (w, novel) = world_and_novel();
        let s = split_novel(&w.instances, &novel, 0.15).unwrap();
        assert!(scan_novel_leaks(&s.train, &novel).is_empty());
        assert!(!scan_novel_leaks(&s.test_novel, &novel).is_empty());
        let novel_gold: BTreeSet<_> = s.test_novel.iter().map(|i| i.gold).collect();
        assert_eq!(novel_gold, novel);
        assert_eq!(novel_gold.len(), 24);
        assert!(s.val.iter().any(|i| novel.contains(&i.gold)));
        assert!(s.val.iter().any(|i| !novel.contains(&i.gold)));
        assert!(s.test_seen.iter().all(|i| !novel.contains(&i.gold)));
    }

    #[test]
    fn scan_catches_planted_caption_leak() {
        let (w, novel) = world_and_novel();
        let s = split_novel(&w.instances, &novel, 0.15).unwrap();
        let p = *novel.iter().next().unwrap();
        let mut train = s.train.clone();
        train[3].caption.push(p.attr);
        train[3].caption.push(p.obj);
        let leaks = scan_novel_leaks(&train, &novel);
        assert_eq!(leaks, vec![Leak { index: 3, pair: p, in_caption: true }]);
    }

    #[test]
    fn missing_novel_pair_is_reported() {
        let (w, _) = world_and_novel();
        let ghost = CompositionalPair { attr: 9999, obj: 9998, kind: crate::world::PairKind::AdjNoun };
        let err = split_novel(&w.instances, &[ghost].into_iter().collect(), 0.15).unwrap_err();
        assert!(matches!(err, Error::EmptyNovelPair { attr: 9999, obj: 9998 }));
    }
}

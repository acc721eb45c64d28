//! Grounded compositional data: vocabulary, instances, generation and splits.

mod generate;
mod io;
mod split;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use generate::{choose_novel_pairs, generate_world, World, WorldConfig};
pub use io::{export_jsonl, import_jsonl, read_vocab, write_vocab, VocabFile, SCHEMA_VERSION};
pub use split::{scan_novel_leaks, split_novel, DatasetSplits, Leak, SplitName};

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    AdjNoun,
    VerbNoun,
}

impl PairKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::AdjNoun => "adj_noun",
            PairKind::VerbNoun => "verb_noun",
        }
    }
}

/// An (attribute, object) or (verb, noun) token pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CompositionalPair {
    pub attr: TokenId,
    pub obj: TokenId,
    pub kind: PairKind,
}

impl fmt::Display for CompositionalPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.attr, self.obj)
    }
}

/// Which half of a pair a mask slot holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotRole {
    Attr,
    Obj,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub feat: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// One grounded example. The caption carries `MASK` at both slot positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub caption: Vec<TokenId>,
    pub regions: Vec<Region>,
    pub mask_slots: (usize, usize),
    pub gold: CompositionalPair,
}

/// An instance with its gold pair withheld.
#[derive(Clone, Copy, Debug)]
pub struct MaskedView<'a> {
    pub caption: &'a [TokenId],
    pub regions: &'a [Region],
    pub mask_slots: (usize, usize),
}

impl Instance {
    pub fn masked(&self) -> MaskedView<'_> {
        MaskedView { caption: &self.caption, regions: &self.regions, mask_slots: self.mask_slots }
    }

    pub fn label(&self, role: SlotRole) -> TokenId {
        match role {
            SlotRole::Attr => self.gold.attr,
            SlotRole::Obj => self.gold.obj,
        }
    }
}

/// Disjoint token inventories with integer ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    pub tokens: Vec<String>,
    pub pad: TokenId,
    pub cls: TokenId,
    pub mask: TokenId,
    pub attributes: Vec<TokenId>,
    /// Kind of pair each attribute forms (parallel to `attributes`).
    pub attribute_kinds: Vec<PairKind>,
    pub objects: Vec<TokenId>,
    pub context: Vec<TokenId>,
}

const ADJECTIVES: &[&str] = &[
    "white", "black", "brown", "red", "blue", "small", "big", "green", "yellow", "old", "young", "wooden", "striped",
    "colored", "orange", "gray",
];
const VERBS: &[&str] = &["eat", "stand", "hold", "ride", "fly", "lie", "sit", "run", "carry", "watch"];
const OBJECTS: &[&str] = &[
    "dog", "cat", "bird", "horse", "truck", "bus", "boat", "plane", "table", "child", "man", "woman", "car", "van",
    "chair", "sheep",
];
const CONTEXT: &[&str] = &[
    "a", "the", "on", "in", "of", "near", "with", "next", "to", "street", "park", "front", "sky", "grass", "water",
    "road", "field", "building", "two", "some", "is", "are", "sitting", "top", "side", "by", "day", "city", "over",
    "under",
];

fn name_from(list: &[&str], prefix: &str, i: usize) -> String {
    match list.get(i) {
        Some(s) => s.to_string(),
        None => format!("{prefix}{i}"),
    }
}

impl ConceptVocabulary {
    /// Build a vocabulary with `n_verbs` of the `n_attributes` attributes acting as verbs.
    pub fn new(n_attributes: usize, n_verbs: usize, n_objects: usize, n_context: usize) -> Self {
        let mut tokens: Vec<String> = vec!["[PAD]".into(), "[CLS]".into(), "[MASK]".into()];
        let n_adj = n_attributes - n_verbs.min(n_attributes);
        let mut attributes = Vec::new();
        let mut attribute_kinds = Vec::new();
        for i in 0..n_attributes {
            attributes.push(tokens.len() as TokenId);
            if i < n_adj {
                tokens.push(name_from(ADJECTIVES, "adj", i));
                attribute_kinds.push(PairKind::AdjNoun);
            } else {
                tokens.push(name_from(VERBS, "verb", i - n_adj));
                attribute_kinds.push(PairKind::VerbNoun);
            }
        }
        let mut objects = Vec::new();
        for i in 0..n_objects {
            objects.push(tokens.len() as TokenId);
            tokens.push(name_from(OBJECTS, "obj", i));
        }
        let mut context = Vec::new();
        for i in 0..n_context {
            context.push(tokens.len() as TokenId);
            tokens.push(name_from(CONTEXT, "w", i));
        }
        Self { tokens, pad: 0, cls: 1, mask: 2, attributes, attribute_kinds, objects, context }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn is_attribute(&self, id: TokenId) -> bool {
        self.attributes.contains(&id)
    }

    pub fn is_object(&self, id: TokenId) -> bool {
        self.objects.contains(&id)
    }

    pub fn kind_of(&self, attr: TokenId) -> Option<PairKind> {
        self.attributes.iter().position(|&a| a == attr).map(|i| self.attribute_kinds[i])
    }

    pub fn pair_name(&self, pair: &CompositionalPair) -> String {
        format!("{} {}", self.token(pair.attr), self.token(pair.obj))
    }

    /// Checks that every inventory is disjoint and every id is in range.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        let specials = [self.pad, self.cls, self.mask];
        for &id in specials.iter().chain(&self.attributes).chain(&self.objects).chain(&self.context) {
            if id as usize >= self.tokens.len() {
                return Err(format!("token id {id} out of range"));
            }
            if !seen.insert(id) {
                return Err(format!("token id {id} appears in more than one inventory"));
            }
        }
        if self.attribute_kinds.len() != self.attributes.len() {
            return Err("attribute kinds do not match attributes".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_inventories_are_disjoint() {
        let v = ConceptVocabulary::new(12, 3, 20, 40);
        v.validate().unwrap();
        assert_eq!(v.size(), 3 + 12 + 20 + 40);
        assert_eq!(v.token(v.attributes[0]), "white");
        assert_eq!(v.kind_of(v.attributes[11]), Some(PairKind::VerbNoun));
        assert_eq!(v.token(v.objects[19]), "obj19");
    }
}

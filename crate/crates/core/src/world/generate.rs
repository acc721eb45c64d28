use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CompositionalPair, ConceptVocabulary, Instance, Region, TokenId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub attributes: usize,
    /// How many of the attributes are verbs (forming verb-noun pairs).
    pub verbs: usize,
    pub objects: usize,
    pub context_tokens: usize,
    /// Number of distinct (attribute, object) pairs that occur in the world.
    pub pairs: usize,
    pub novel_pairs: usize,
    pub instances_per_pair: usize,
    pub feature_dim: usize,
    /// Standard deviation of attribute offsets relative to unit object prototypes.
    pub attr_scale: f64,
    /// Per-instance Gaussian noise on region features.
    pub noise: f64,
    pub distractor_regions: usize,
    pub min_context: usize,
    pub max_context: usize,
    pub val_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            attributes: 12,
            verbs: 3,
            objects: 12,
            context_tokens: 30,
            pairs: 72,
            novel_pairs: 24,
            instances_per_pair: 16,
            feature_dim: 16,
            attr_scale: 0.6,
            noise: 0.35,
            distractor_regions: 1,
            min_context: 3,
            max_context: 8,
            val_fraction: 0.15,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attributes < 2 {
            return Err(Error::config("world.attributes", "must be >= 2"));
        }
        if self.objects < 2 {
            return Err(Error::config("world.objects", "must be >= 2"));
        }
        if self.verbs > self.attributes {
            return Err(Error::config("world.verbs", "cannot exceed world.attributes"));
        }
        if self.context_tokens < 1 {
            return Err(Error::config("world.context_tokens", "must be >= 1"));
        }
        if self.pairs == 0 || self.pairs > self.attributes * self.objects {
            return Err(Error::config(
                "world.pairs",
                format!("must be in 1..={} (attributes x objects)", self.attributes * self.objects),
            ));
        }
        if self.novel_pairs >= self.pairs {
            return Err(Error::config("world.novel_pairs", "must be smaller than world.pairs"));
        }
        if self.instances_per_pair == 0 {
            return Err(Error::config("world.instances_per_pair", "must be >= 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("world.feature_dim", "must be >= 1"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("world.noise", "must be >= 0"));
        }
        if !(self.attr_scale >= 0.0) {
            return Err(Error::config("world.attr_scale", "must be >= 0"));
        }
        if self.min_context > self.max_context {
            return Err(Error::config("world.min_context", "must not exceed world.max_context"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::config("world.val_fraction", "must be in (0, 0.5)"));
        }
        Ok(())
    }

    /// Width of a region's input vector: features plus the four box coordinates.
    pub fn region_dim(&self) -> usize {
        self.feature_dim + 4
    }
}

/// A generated world: vocabulary, the pairs that occur, and their instances.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub vocab: ConceptVocabulary,
    pub pairs: Vec<CompositionalPair>,
    pub instances: Vec<Instance>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Pick `count` pairs from the attribute x object grid.
///
/// Pairs are drawn in rounds; each round pairs every attribute with a distinct
/// object through a fresh permutation, which keeps per-attribute pair counts
/// balanced.
fn choose_pairs(rng: &mut ChaCha8Rng, vocab: &ConceptVocabulary, count: usize) -> Vec<CompositionalPair> {
    let n_attr = vocab.attributes.len();
    let n_obj = vocab.objects.len();
    let mut chosen: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut order = Vec::with_capacity(count);
    while order.len() < count {
        let mut objs: Vec<usize> = (0..n_obj).collect();
        objs.shuffle(rng);
        let mut attrs: Vec<usize> = (0..n_attr).collect();
        attrs.shuffle(rng);
        for (i, &a) in attrs.iter().enumerate() {
            // Walk the permutation until an unused object for this attribute turns up.
            let hit = (0..n_obj).map(|k| objs[(i + k) % n_obj]).find(|&o| !chosen.contains(&(a, o)));
            if let Some(o) = hit {
                chosen.insert((a, o));
                order.push((a, o));
                if order.len() == count {
                    break;
                }
            }
        }
    }
    order
        .into_iter()
        .map(|(a, o)| CompositionalPair {
            attr: vocab.attributes[a],
            obj: vocab.objects[o],
            kind: vocab.attribute_kinds[a],
        })
        .collect()
}

/// Generate a synthetic grounded world. Pure function of `(config, seed)`.
///
/// Each pair's visual prototype is its object prototype plus its attribute's
/// offset vector; instances add isotropic noise. Captions are
/// `[CLS] ctx* MASK MASK ctx*` with the context drawn from filler tokens only.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = ConceptVocabulary::new(config.attributes, config.verbs, config.objects, config.context_tokens);

    let obj_proto: BTreeMap<TokenId, Vec<f64>> =
        vocab.objects.iter().map(|&o| (o, gaussian_vec(&mut rng, config.feature_dim, 1.0))).collect();
    let attr_offset: BTreeMap<TokenId, Vec<f64>> = vocab
        .attributes
        .iter()
        .map(|&a| (a, gaussian_vec(&mut rng, config.feature_dim, config.attr_scale)))
        .collect();

    let pairs = choose_pairs(&mut rng, &vocab, config.pairs);
    let mut instances = Vec::with_capacity(pairs.len() * config.instances_per_pair);
    for pair in &pairs {
        let proto: Vec<f64> =
            obj_proto[&pair.obj].iter().zip(&attr_offset[&pair.attr]).map(|(o, a)| o + a).collect();
        for _ in 0..config.instances_per_pair {
            instances.push(sample_instance(&mut rng, config, &vocab, pair, &proto));
        }
    }
    Ok(World { vocab, pairs, instances })
}

fn sample_instance(
    rng: &mut ChaCha8Rng,
    config: &WorldConfig,
    vocab: &ConceptVocabulary,
    pair: &CompositionalPair,
    proto: &[f64],
) -> Instance {
    let feat: Vec<f64> = proto.iter().map(|p| p + config.noise * rng.sample::<f64, _>(StandardNormal)).collect();
    let target = Region { feat, bbox: random_box(rng, 0.4, 0.8) };
    let mut regions = vec![target];
    for _ in 0..config.distractor_regions {
        regions.push(Region { feat: gaussian_vec(rng, config.feature_dim, 0.5), bbox: random_box(rng, 0.1, 0.3) });
    }
    regions.shuffle(rng);

    let n_ctx = rng.gen_range(config.min_context..=config.max_context);
    let n_pre = rng.gen_range(0..=n_ctx);
    let mut caption = Vec::with_capacity(n_ctx + 3);
    caption.push(vocab.cls);
    for _ in 0..n_pre {
        caption.push(*vocab.context.choose(rng).expect("non-empty context vocabulary"));
    }
    let attr_pos = caption.len();
    caption.push(vocab.mask);
    caption.push(vocab.mask);
    for _ in n_pre..n_ctx {
        caption.push(*vocab.context.choose(rng).expect("non-empty context vocabulary"));
    }
    Instance { caption, regions, mask_slots: (attr_pos, attr_pos + 1), gold: *pair }
}

fn random_box(rng: &mut ChaCha8Rng, min_side: f64, max_side: f64) -> [f64; 4] {
    let w = rng.gen_range(min_side..max_side);
    let h = rng.gen_range(min_side..max_side);
    let x = rng.gen_range(0.0..(1.0 - w));
    let y = rng.gen_range(0.0..(1.0 - h));
    [x, y, x + w, y + h]
}

/// Choose `count` held-out pairs such that every attribute and object still
/// occurs in at least two seen pairs.
pub fn choose_novel_pairs(world: &World, count: usize, seed: u64) -> Result<BTreeSet<CompositionalPair>> {
    const MIN_SEEN: usize = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f76656c);
    let mut attr_seen: BTreeMap<TokenId, usize> = BTreeMap::new();
    let mut obj_seen: BTreeMap<TokenId, usize> = BTreeMap::new();
    for p in &world.pairs {
        *attr_seen.entry(p.attr).or_default() += 1;
        *obj_seen.entry(p.obj).or_default() += 1;
    }
    let mut candidates = world.pairs.clone();
    candidates.shuffle(&mut rng);
    let mut novel = BTreeSet::new();
    for p in candidates {
        if novel.len() == count {
            break;
        }
        if attr_seen[&p.attr] > MIN_SEEN && obj_seen[&p.obj] > MIN_SEEN {
            *attr_seen.get_mut(&p.attr).unwrap() -= 1;
            *obj_seen.get_mut(&p.obj).unwrap() -= 1;
            novel.insert(p);
        }
    }
    if novel.len() < count {
        return Err(Error::config(
            "world.novel_pairs",
            format!("only {} pairs can be held out while keeping every element seen", novel.len()),
        ));
    }
    Ok(novel)
}

//! Support/query tasks built by retrieval.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, ModelParams};
use crate::error::{Error, Result};
use crate::retriever::{
    query_div_k_excluding, query_oracle, query_topk_excluding, ConceptDb, QueryKey, RetrievalResult,
};
use crate::world::{CompositionalPair, ConceptVocabulary, Instance, MaskedView};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    TopK,
    DivK,
    Oracle,
    NoRetrieval,
}

impl SupportMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SupportMode::TopK => "top_k",
            SupportMode::DivK => "div_k",
            SupportMode::Oracle => "oracle",
            SupportMode::NoRetrieval => "no_retrieval",
        }
    }

    pub fn retrieves(self) -> bool {
        self != SupportMode::NoRetrieval
    }
}

/// Query key construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyKind {
    #[default]
    Pair,
    Slots,
}

/// What retrieval needs: the database, the encoder snapshot it was built
/// with, and the train split its entries point into.
#[derive(Clone, Copy)]
pub struct RetrievalContext<'a> {
    pub db: &'a ConceptDb,
    pub encoder: &'a ModelParams,
    pub train: &'a [Instance],
    pub key_kind: KeyKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Support items, gold labels exposed, deduplicated by train index.
    pub support: Vec<Instance>,
    pub support_refs: Vec<usize>,
    /// The single query. Its gold is for the outer loss and the evaluator only.
    pub query: Instance,
    pub mode: SupportMode,
    pub k: usize,
    pub retrieval: RetrievalResult,
}

fn make_key(kind: KeyKind, slots: &(Vec<f64>, Vec<f64>)) -> Result<QueryKey> {
    match kind {
        KeyKind::Pair => QueryKey::pair(&slots.0, &slots.1),
        KeyKind::Slots => QueryKey::slots(&slots.0, &slots.1),
    }
}

/// Retrieve support for one masked query. The gold pair is only consulted
/// in oracle mode, where it has to be passed in explicitly.
pub fn retrieve_support(
    ctx: &RetrievalContext<'_>,
    slots: &(Vec<f64>, Vec<f64>),
    mode: SupportMode,
    k: usize,
    exclude: &[usize],
    oracle_gold: Option<&CompositionalPair>,
) -> Result<(Vec<usize>, RetrievalResult)> {
    if !mode.retrieves() {
        return Ok((Vec::new(), RetrievalResult::default()));
    }
    if ctx.db.is_empty() {
        return Err(Error::EmptyDb);
    }
    let key = make_key(ctx.key_kind, slots)?;
    let result = match mode {
        SupportMode::TopK => query_topk_excluding(ctx.db, &key, k, exclude)?,
        SupportMode::DivK => query_div_k_excluding(ctx.db, &key, k, exclude)?,
        SupportMode::Oracle => {
            let gold = oracle_gold.ok_or_else(|| Error::Invalid("oracle retrieval needs the gold pair".into()))?;
            query_oracle(ctx.db, &key, gold, k, exclude)?
        }
        SupportMode::NoRetrieval => unreachable!(),
    };
    let mut refs = Vec::with_capacity(result.hits.len());
    for e in result.entries(ctx.db) {
        if !refs.contains(&e.instance) {
            refs.push(e.instance);
        }
    }
    Ok((refs, result))
}

fn encode_views(ctx: &RetrievalContext<'_>, views: &[MaskedView<'_>]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if views.is_empty() {
        return Ok(Vec::new());
    }
    encode_batch(ctx.encoder, views)
}

/// One episode for `query`. `exclude` lists train indices that may not be
/// retrieved (sorted); meta-training uses it to hide the query itself.
pub fn build_episode(
    ctx: &RetrievalContext<'_>,
    query: &Instance,
    mode: SupportMode,
    k: usize,
    exclude: &[usize],
) -> Result<Episode> {
    let slots = if mode.retrieves() {
        encode_views(ctx, &[query.masked()])?.pop().expect("one query")
    } else {
        (Vec::new(), Vec::new())
    };
    assemble(ctx, query, &slots, mode, k, exclude)
}

fn assemble(
    ctx: &RetrievalContext<'_>,
    query: &Instance,
    slots: &(Vec<f64>, Vec<f64>),
    mode: SupportMode,
    k: usize,
    exclude: &[usize],
) -> Result<Episode> {
    let oracle_gold = (mode == SupportMode::Oracle).then_some(&query.gold);
    let (support_refs, retrieval) = retrieve_support(ctx, slots, mode, k, exclude, oracle_gold)?;
    let support = support_refs.iter().map(|&i| ctx.train[i].clone()).collect();
    Ok(Episode { support, support_refs, query: query.clone(), mode, k, retrieval })
}

/// Exclusion list for a query: sorted, deduplicated train indices.
pub type ExcludeFn<'a> = dyn Fn(usize) -> Vec<usize> + Sync + 'a;

/// One episode per instance of `split`, shuffled by `seed`. `exclude(i)`
/// gives the train indices hidden from query `i` (by position in `split`).
pub fn episode_stream(
    ctx: &RetrievalContext<'_>,
    split: &[Instance],
    mode: SupportMode,
    k: usize,
    seed: u64,
    exclude: &ExcludeFn<'_>,
) -> Result<Vec<Episode>> {
    if split.is_empty() {
        return Err(Error::Invalid("episode stream over an empty split".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let slots = if mode.retrieves() {
        let views: Vec<_> = split.iter().map(|i| i.masked()).collect();
        encode_views(ctx, &views)?
    } else {
        vec![(Vec::new(), Vec::new()); split.len()]
    };
    order.into_iter().map(|i| assemble(ctx, &split[i], &slots[i], mode, k, &exclude(i))).collect()
}

/// No exclusions.
pub fn no_exclusion(_: usize) -> Vec<usize> {
    Vec::new()
}

#[derive(Serialize)]
struct DumpLine<'a> {
    mode: &'a str,
    target_context: String,
    target_concepts: String,
    retrieved_contexts: Vec<String>,
    retrieved_concepts: Vec<String>,
    scores: Vec<f64>,
}

fn render_caption(vocab: &ConceptVocabulary, inst: &Instance) -> String {
    inst.caption.iter().map(|&t| vocab.token(t)).collect::<Vec<_>>().join(" ")
}

/// Human-readable dump: query context and concepts beside what was retrieved.
pub fn dump_episodes(episodes: &[Episode], vocab: &ConceptVocabulary, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for ep in episodes {
        let line = DumpLine {
            mode: ep.mode.as_str(),
            target_context: render_caption(vocab, &ep.query),
            target_concepts: vocab.pair_name(&ep.query.gold),
            retrieved_contexts: ep.support.iter().map(|s| render_caption(vocab, s)).collect(),
            retrieved_concepts: ep.support.iter().map(|s| vocab.pair_name(&s.gold)).collect(),
            scores: ep.retrieval.hits.iter().map(|h| h.score).collect(),
        };
        let text = serde_json::to_string(&line).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(out, "{text}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};
    use crate::retriever::build_db;
    use crate::world::{generate_world, World, WorldConfig};

    fn setup() -> (World, ModelParams) {
        let cfg = WorldConfig { pairs: 30, novel_pairs: 4, instances_per_pair: 2, ..WorldConfig::default() };
        let w = generate_world(&cfg, 4).unwrap();
        let ec = EncoderConfig { d: 16, layers: 1, heads: 2, ..EncoderConfig::new(w.vocab.size(), cfg.region_dim()) };
        (w, init_params(&ec, 1).unwrap())
    }

    #[test]
    fn no_retrieval_has_empty_support() {
        let (w, p) = setup();
        let db = build_db(&p, &w.instances).unwrap();
        let ctx = RetrievalContext { db: &db, encoder: &p, train: &w.instances, key_kind: KeyKind::Pair };
        let ep = build_episode(&ctx, &w.instances[0], SupportMode::NoRetrieval, 4, &[]).unwrap();
        assert!(ep.support.is_empty());
    }

    #[test]
    fn div_k_support_has_distinct_labels() {
        let (w, p) = setup();
        let db = build_db(&p, &w.instances).unwrap();
        let ctx = RetrievalContext { db: &db, encoder: &p, train: &w.instances, key_kind: KeyKind::Pair };
        let ep = build_episode(&ctx, &w.instances[5], SupportMode::DivK, 4, &[5]).unwrap();
        assert_eq!(ep.retrieval.hits.len(), 4);
        assert_eq!(ep.retrieval.labels(&db).len(), 4);
        assert!(!ep.support_refs.contains(&5));
        let mut sorted = ep.support_refs.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), ep.support_refs.len());
    }

    #[test]
    fn stream_covers_split_deterministically() {
        let (w, p) = setup();
        let db = build_db(&p, &w.instances).unwrap();
        let ctx = RetrievalContext { db: &db, encoder: &p, train: &w.instances, key_kind: KeyKind::Slots };
        let split = &w.instances[..12];
        let a = episode_stream(&ctx, split, SupportMode::TopK, 4, 9, &no_exclusion).unwrap();
        let b = episode_stream(&ctx, split, SupportMode::TopK, 4, 9, &no_exclusion).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        let mut queries: Vec<_> = a.iter().map(|e| e.query.caption.clone()).collect();
        queries.sort();
        let mut expected: Vec<_> = split.iter().map(|i| i.caption.clone()).collect();
        expected.sort();
        assert_eq!(queries, expected);
        for ep in &a {
            let single = build_episode(&ctx, &ep.query, SupportMode::TopK, 4, &[]).unwrap();
            assert_eq!(single.support_refs, ep.support_refs);
        }
    }

    #[test]
    fn dump_writes_one_line_per_episode() {
        let (w, p) = setup();
        let db = build_db(&p, &w.instances).unwrap();
        let ctx = RetrievalContext { db: &db, encoder: &p, train: &w.instances, key_kind: KeyKind::Pair };
        let eps = episode_stream(&ctx, &w.instances[..3], SupportMode::DivK, 4, 0, &no_exclusion).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.jsonl");
        dump_episodes(&eps, &w.vocab, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("retrieved_concepts"));
    }
}

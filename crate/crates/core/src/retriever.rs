//! Element concept database with exact cosine search.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, ModelParams};
use crate::error::{Error, Result};
use crate::world::{CompositionalPair, Instance, SlotRole, TokenId};

pub const DB_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CMDB";

#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub key: Vec<f64>,
    /// Index into the train split the database was built from.
    pub instance: usize,
    pub label: TokenId,
    pub role: SlotRole,
}

/// Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDb {
    d: usize,
    entries: Vec<DbEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub entry: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    /// Fewer than K hits were available.
    pub truncated: bool,
}

impl RetrievalResult {
    pub fn entries<'a>(&'a self, db: &'a ConceptDb) -> impl Iterator<Item = &'a DbEntry> + 'a {
        self.hits.iter().map(move |h| db.entry(h.entry))
    }

    pub fn labels(&self, db: &ConceptDb) -> BTreeSet<TokenId> {
        self.entries(db).map(|e| e.label).collect()
    }
}

/// Query side of a search.
#[derive(Clone, Debug, PartialEq)]
pub enum QueryKey {
    /// One unit vector for the whole pair.
    Pair(Vec<f64>),
    /// Separate attr-slot and obj-slot vectors. Each entry is scored against
    /// the vector of its own slot role, so the two per-slot rankings merge
    /// into one list.
    Slots(Vec<f64>, Vec<f64>),
}

impl QueryKey {
    /// Mean of the two slot encodings, renormalized.
    pub fn pair(attr: &[f64], obj: &[f64]) -> Result<Self> {
        let mean: Vec<f64> = attr.iter().zip(obj).map(|(a, o)| 0.5 * (a + o)).collect();
        Ok(QueryKey::Pair(unit(&mean).ok_or_else(|| Error::Invalid("zero-norm query key".into()))?))
    }

    pub fn slots(attr: &[f64], obj: &[f64]) -> Result<Self> {
        let zero = || Error::Invalid("zero-norm query key".into());
        Ok(QueryKey::Slots(unit(attr).ok_or_else(zero)?, unit(obj).ok_or_else(zero)?))
    }

    fn dim(&self) -> usize {
        match self {
            QueryKey::Pair(k) => k.len(),
            QueryKey::Slots(a, _) => a.len(),
        }
    }

    fn score(&self, entry: &DbEntry) -> f64 {
        match (self, entry.role) {
            (QueryKey::Pair(k), _) => dot(k, &entry.key),
            (QueryKey::Slots(a, _), SlotRole::Attr) => dot(a, &entry.key),
            (QueryKey::Slots(_, o), SlotRole::Obj) => dot(o, &entry.key),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n > 1e-12 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Scores clamped into [-1, 1] to absorb rounding.
fn clamp(s: f64) -> f64 {
    s.clamp(-1.0, 1.0)
}

impl ConceptDb {
    pub fn from_entries(d: usize, entries: Vec<DbEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.key.len() != d {
                return Err(Error::Shape { op: "concept_db", detail: format!("entry {i} has width {}", e.key.len()) });
            }
            if (dot(&e.key, &e.key).sqrt() - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("entry {i} key is not unit-norm")));
            }
        }
        Ok(Self { d, entries })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &DbEntry {
        &self.entries[i]
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    /// Distinct train instances the database points at.
    pub fn source_instances(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.instance).collect()
    }

    pub fn labels(&self) -> BTreeSet<TokenId> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Every entry, best first; ties broken by lower entry index. Entries whose
    /// instance is in the sorted slice `exclude` are skipped.
    pub fn ranking(&self, key: &QueryKey, exclude: &[usize]) -> Result<Vec<Hit>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyDb);
        }
        if key.dim() != self.d {
            return Err(Error::Shape { op: "query", detail: format!("key of {} vs d {}", key.dim(), self.d) });
        }
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| exclude.binary_search(&e.instance).is_err())
            .map(|(i, e)| Hit { entry: i, score: clamp(key.score(e)) })
            .collect();
        hits.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.entry.cmp(&b.entry)));
        Ok(hits)
    }
}

/// Encode every train instance and store both slot keys, unit-normalized.
pub fn build_db(params: &ModelParams, train: &[Instance]) -> Result<ConceptDb> {
    let views: Vec<_> = train.iter().map(|i| i.masked()).collect();
    let encoded = encode_batch(params, &views)?;
    let mut entries = Vec::with_capacity(2 * train.len());
    for (i, ((a, o), inst)) in encoded.iter().zip(train).enumerate() {
        for (v, role, label) in [(a, SlotRole::Attr, inst.gold.attr), (o, SlotRole::Obj, inst.gold.obj)] {
            let key = unit(v).ok_or(Error::ZeroNormKey(i))?;
            entries.push(DbEntry { key, instance: i, label, role });
        }
    }
    Ok(ConceptDb { d: params.config.d, entries })
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("retrieval.k", "must be >= 1"));
    }
    Ok(())
}

pub fn query_topk(db: &ConceptDb, key: &QueryKey, k: usize) -> Result<RetrievalResult> {
    query_topk_excluding(db, key, k, &[])
}

pub fn query_topk_excluding(db: &ConceptDb, key: &QueryKey, k: usize, exclude: &[usize]) -> Result<RetrievalResult> {
    check_k(k)?;
    let mut hits = db.ranking(key, exclude)?;
    let truncated = hits.len() < k;
    hits.truncate(k);
    Ok(RetrievalResult { hits, truncated })
}

pub fn query_div_k(db: &ConceptDb, key: &QueryKey, k: usize) -> Result<RetrievalResult> {
    query_div_k_excluding(db, key, k, &[])
}

/// Scan in similarity order and keep the first entry of every label.
pub fn query_div_k_excluding(
    db: &ConceptDb,
    key: &QueryKey,
    k: usize,
    exclude: &[usize],
) -> Result<RetrievalResult> {
    check_k(k)?;
    let ranking = db.ranking(key, exclude)?;
    Ok(distinct_fill(db, &ranking, Vec::new(), k))
}

fn distinct_fill(db: &ConceptDb, ranking: &[Hit], mut hits: Vec<Hit>, k: usize) -> RetrievalResult {
    let mut seen: BTreeSet<TokenId> = hits.iter().map(|h| db.entry(h.entry).label).collect();
    for h in ranking {
        if hits.len() >= k {
            break;
        }
        if seen.insert(db.entry(h.entry).label) {
            hits.push(*h);
        }
    }
    let truncated = hits.len() < k;
    RetrievalResult { hits, truncated }
}

/// The best entry of each gold element concept, then Div-K fill.
pub fn query_oracle(
    db: &ConceptDb,
    key: &QueryKey,
    gold: &CompositionalPair,
    k: usize,
    exclude: &[usize],
) -> Result<RetrievalResult> {
    check_k(k)?;
    let ranking = db.ranking(key, exclude)?;
    let mut forced = Vec::with_capacity(2);
    for label in [gold.attr, gold.obj] {
        let h = ranking.iter().find(|h| db.entry(h.entry).label == label).ok_or(Error::MissingConcept(label))?;
        forced.push(*h);
    }
    if k == 1 {
        forced.truncate(1);
    }
    let mut r = distinct_fill(db, &ranking, forced, k);
    r.hits.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.entry.cmp(&b.entry)));
    Ok(r)
}

/// Serializable header used by the CLI to describe a saved database.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbHeader {
    pub d: usize,
    pub entries: usize,
}

pub fn write_db(w: &mut impl Write, db: &ConceptDb, meta: &str) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(DB_VERSION)?;
    w.write_u32::<LittleEndian>(db.d as u32)?;
    w.write_u32::<LittleEndian>(db.entries.len() as u32)?;
    w.write_u32::<LittleEndian>(meta.len() as u32)?;
    w.write_all(meta.as_bytes())?;
    for e in &db.entries {
        for &x in &e.key {
            w.write_f64::<LittleEndian>(x)?;
        }
        w.write_u32::<LittleEndian>(e.instance as u32)?;
        w.write_u32::<LittleEndian>(e.label)?;
        w.write_u8(match e.role {
            SlotRole::Attr => 0,
            SlotRole::Obj => 1,
        })?;
    }
    Ok(())
}

pub fn read_db(r: &mut impl Read, what: &Path) -> Result<(ConceptDb, String)> {
    let io = |e| Error::io(what, e);
    let bad = |reason: String| Error::Parse { path: what.to_path_buf(), line: 0, reason };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a concept database file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != DB_VERSION {
        return Err(Error::Version { what: "concept database", expected: DB_VERSION, found: version });
    }
    let d = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mlen = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut mbuf = vec![0u8; mlen];
    r.read_exact(&mut mbuf).map_err(io)?;
    let meta = String::from_utf8(mbuf).map_err(|e| bad(e.to_string()))?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let mut key = vec![0.0; d];
        r.read_f64_into::<LittleEndian>(&mut key).map_err(io)?;
        let instance = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let label = r.read_u32::<LittleEndian>().map_err(io)?;
        let role = match r.read_u8().map_err(io)? {
            0 => SlotRole::Attr,
            1 => SlotRole::Obj,
            x => return Err(bad(format!("bad slot role {x}"))),
        };
        entries.push(DbEntry { key, instance, label, role });
    }
    Ok((ConceptDb::from_entries(d, entries)?, meta))
}

pub fn save_db(db: &ConceptDb, meta: &str, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_db(&mut buf, db, meta).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_db(path: &Path) -> Result<(ConceptDb, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_db(&mut bytes.as_slice(), path)
}

/// Reference implementations by full scan, used as test oracles.
pub mod brute {
    use super::*;

    fn scored(db: &ConceptDb, key: &QueryKey) -> Vec<(f64, usize)> {
        let mut all: Vec<(f64, usize)> =
            db.entries().iter().enumerate().map(|(i, e)| (clamp(key.score(e)), i)).collect();
        // Selection sort: deliberately unlike the production sort.
        for i in 0..all.len() {
            let mut best = i;
            for j in i + 1..all.len() {
                if all[j].0 > all[best].0 || (all[j].0 == all[best].0 && all[j].1 < all[best].1) {
                    best = j;
                }
            }
            all.swap(i, best);
        }
        all
    }

    pub fn topk(db: &ConceptDb, key: &QueryKey, k: usize) -> Vec<usize> {
        scored(db, key).into_iter().take(k).map(|(_, i)| i).collect()
    }

    pub fn div_k(db: &ConceptDb, key: &QueryKey, k: usize) -> Vec<usize> {
        let mut labels = Vec::new();
        let mut out = Vec::new();
        for (_, i) in scored(db, key) {
            let l = db.entry(i).label;
            if !labels.contains(&l) {
                labels.push(l);
                out.push(i);
            }
            if out.len() == k {
                break;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::PairKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_db(rng: &mut ChaCha8Rng, n: usize, d: usize, labels: u32) -> ConceptDb {
        let entries = (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                DbEntry {
                    key: unit(&v).unwrap(),
                    instance: i / 2,
                    label: rng.gen_range(0..labels),
                    role: if i % 2 == 0 { SlotRole::Attr } else { SlotRole::Obj },
                }
            })
            .collect();
        ConceptDb::from_entries(d, entries).unwrap()
    }

    fn ids(r: &RetrievalResult) -> Vec<usize> {
        r.hits.iter().map(|h| h.entry).collect()
    }

    #[test]
    fn self_query_returns_entry_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let db = random_db(&mut rng, 50, 6, 10);
        let key = QueryKey::Pair(db.entry(17).key.clone());
        let r = query_topk(&db, &key, 3).unwrap();
        assert_eq!(r.hits[0].entry, 17);
        assert!((r.hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_k_returns_everything_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let db = random_db(&mut rng, 30, 4, 5);
        let key = QueryKey::Pair(unit(&[1.0, 0.0, 0.0, 0.0]).unwrap());
        let r = query_topk(&db, &key, 30).unwrap();
        assert_eq!(r.hits.len(), 30);
        assert!(!r.truncated);
        assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
        let r = query_topk(&db, &key, 31).unwrap();
        assert!(r.truncated);
        assert_eq!(r.hits.len(), 30);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let e = |label| DbEntry { key: vec![1.0, 0.0], instance: 0, label, role: SlotRole::Attr };
        let db = ConceptDb::from_entries(2, vec![e(1), e(2), e(3)]).unwrap();
        let r = query_topk(&db, &QueryKey::Pair(vec![1.0, 0.0]), 2).unwrap();
        assert_eq!(ids(&r), vec![0, 1]);
    }

    #[test]
    fn div_k_one_hit_per_label() {
        let labels = [10, 10, 11, 11, 12];
        let entries = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| DbEntry {
                key: unit(&[1.0, i as f64 * 0.1]).unwrap(),
                instance: i,
                label: l,
                role: SlotRole::Obj,
            })
            .collect();
        let db = ConceptDb::from_entries(2, entries).unwrap();
        let key = QueryKey::Pair(vec![1.0, 0.0]);
        let r = query_div_k(&db, &key, 3).unwrap();
        assert_eq!(r.labels(&db), [10, 11, 12].into_iter().collect());
        assert_eq!(ids(&r), vec![0, 2, 4]);
        let r = query_div_k(&db, &key, 4).unwrap();
        assert!(r.truncated);
        assert_eq!(ids(&query_div_k(&db, &key, 1).unwrap()), ids(&query_topk(&db, &key, 1).unwrap()));
    }

    #[test]
    fn oracle_forces_gold_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let db = random_db(&mut rng, 80, 5, 12);
        let key = QueryKey::Pair(db.entry(0).key.clone());
        let gold = CompositionalPair { attr: 3, obj: 7, kind: PairKind::AdjNoun };
        let r = query_oracle(&db, &key, &gold, 2, &[]).unwrap();
        assert_eq!(r.labels(&db), [3, 7].into_iter().collect());
        let r = query_oracle(&db, &key, &gold, 4, &[]).unwrap();
        assert_eq!(r.hits.len(), 4);
        assert!(r.labels(&db).is_superset(&[3, 7].into_iter().collect()));
        assert_eq!(r.labels(&db).len(), 4);
        let absent = CompositionalPair { attr: 99, obj: 7, kind: PairKind::AdjNoun };
        assert!(matches!(query_oracle(&db, &key, &absent, 4, &[]), Err(Error::MissingConcept(99))));
    }

    #[test]
    fn exclusion_skips_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let db = random_db(&mut rng, 20, 4, 6);
        let key = QueryKey::Pair(db.entry(4).key.clone());
        let r = query_topk_excluding(&db, &key, 20, &[2]).unwrap();
        assert!(r.entries(&db).all(|e| e.instance != 2));
        assert_eq!(r.hits.len(), 18);
    }

    #[test]
    fn empty_db_and_zero_k_are_errors() {
        let db = ConceptDb::from_entries(2, vec![]).unwrap();
        assert!(matches!(query_topk(&db, &QueryKey::Pair(vec![1.0, 0.0]), 1), Err(Error::EmptyDb)));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let db = random_db(&mut rng, 4, 2, 2);
        assert!(query_topk(&db, &QueryKey::Pair(vec![1.0, 0.0]), 0).is_err());
    }

    #[test]
    fn persistence_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let db = random_db(&mut rng, 40, 7, 9);
        let mut buf = Vec::new();
        write_db(&mut buf, &db, "meta").unwrap();
        let (back, meta) = read_db(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, db);
        assert_eq!(meta, "meta");
    }

    #[test]
    fn slot_key_scores_each_entry_by_its_own_role() {
        let e = |k: Vec<f64>, label, role| DbEntry { key: k, instance: 0, label, role };
        let db = ConceptDb::from_entries(
            2,
            vec![
                e(vec![1.0, 0.0], 1, SlotRole::Attr),
                e(vec![0.0, 1.0], 2, SlotRole::Obj),
                e(vec![0.0, 1.0], 3, SlotRole::Attr),
            ],
        )
        .unwrap();
        let key = QueryKey::slots(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        let r = query_topk(&db, &key, 3).unwrap();
        let scores: Vec<(usize, f64)> = r.hits.iter().map(|h| (h.entry, h.score)).collect();
        assert_eq!(scores, vec![(0, 1.0), (1, 1.0), (2, 0.0)]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn cosine_of_unit_keys_is_inner_product(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let db = random_db(&mut rng, 10, 5, 3);
            let a = &db.entry(0).key;
            let b = &db.entry(1).key;
            let cos = dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
            proptest::prop_assert!((cos - dot(a, b)).abs() < 1e-12);
        }

        #[test]
        fn queries_match_brute_force(seed in 0u64..10_000, k in proptest::sample::select(vec![1usize, 4, 16])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let db = random_db(&mut rng, 60, 6, 8);
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let key = QueryKey::Pair(unit(&v).unwrap());
            proptest::prop_assert_eq!(ids(&query_topk(&db, &key, k).unwrap()), brute::topk(&db, &key, k));
            proptest::prop_assert_eq!(ids(&query_div_k(&db, &key, k).unwrap()), brute::div_k(&db, &key, k));
        }
    }
}

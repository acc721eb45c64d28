use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CompositionalPair, ConceptVocabulary, DatasetSplits, Instance, Region, SplitName, TokenId};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<u32>,
    split: String,
    caption: Vec<TokenId>,
    regions: Vec<Region>,
    mask_slots: (usize, usize),
    gold: CompositionalPair,
}

/// Write every split, one instance per line, in train/val/test_seen/test_novel order.
pub fn export_jsonl(splits: &DatasetSplits, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for name in SplitName::ALL {
        for inst in splits.get(name) {
            let line = Line {
                version: Some(SCHEMA_VERSION),
                split: name.as_str().to_string(),
                caption: inst.caption.clone(),
                regions: inst.regions.clone(),
                mask_slots: inst.mask_slots,
                gold: inst.gold,
            };
            let text = serde_json::to_string(&line).map_err(|e| Error::Invalid(e.to_string()))?;
            writeln!(out, "{text}").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read a JSONL dataset. Lines without a `version` field are taken as the
/// current schema. The novel-pair set is the set of test-novel gold pairs.
pub fn import_jsonl(path: &Path) -> Result<DatasetSplits> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut splits = DatasetSplits::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let text = line.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse { path: path.to_path_buf(), line: lineno, reason };
        let rec: Line = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        if let Some(v) = rec.version {
            if v != SCHEMA_VERSION {
                return Err(Error::Version { what: "dataset line", expected: SCHEMA_VERSION, found: v });
            }
        }
        let split = SplitName::parse(&rec.split).ok_or_else(|| parse_err(format!("unknown split `{}`", rec.split)))?;
        let (a, o) = rec.mask_slots;
        if a >= rec.caption.len() || o >= rec.caption.len() || a == o {
            return Err(parse_err(format!("mask slots ({a}, {o}) invalid for caption of {}", rec.caption.len())));
        }
        splits.get_mut(split).push(Instance {
            caption: rec.caption,
            regions: rec.regions,
            mask_slots: rec.mask_slots,
            gold: rec.gold,
        });
    }
    splits.novel_pairs = splits.test_novel.iter().map(|i| i.gold).collect();
    Ok(splits)
}

/// Vocabulary sidecar stored next to a JSONL dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub version: u32,
    pub vocab: ConceptVocabulary,
    pub novel_pairs: BTreeSet<CompositionalPair>,
    /// Opaque provenance record of whoever wrote the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

pub fn write_vocab(
    vocab: &ConceptVocabulary,
    novel_pairs: &BTreeSet<CompositionalPair>,
    provenance: Option<serde_json::Value>,
    path: &Path,
) -> Result<()> {
    let file = VocabFile { version: SCHEMA_VERSION, vocab: vocab.clone(), novel_pairs: novel_pairs.clone(), provenance };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<VocabFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: VocabFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), reason: e.to_string() })?;
    if file.version != SCHEMA_VERSION {
        return Err(Error::Version { what: "vocabulary file", expected: SCHEMA_VERSION, found: file.version });
    }
    file.vocab.validate().map_err(|reason| Error::Parse { path: path.to_path_buf(), line: 0, reason })?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, split_novel, WorldConfig};

    fn ten_instance_split() -> DatasetSplits {
        let cfg = WorldConfig { pairs: 10, novel_pairs: 2, instances_per_pair: 1, ..WorldConfig::default() };
        let w = generate_world(&cfg, 2).unwrap();
        let novel = w.pairs[..2].iter().copied().collect();
        split_novel(&w.instances, &novel, 0.2).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let s = ten_instance_split();
        assert_eq!(s.len(), 10);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        export_jsonl(&s, &p).unwrap();
        assert_eq!(import_jsonl(&p).unwrap(), s);
    }

    #[test]
    fn truncated_file_names_the_line() {
        let s = ten_instance_split();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        export_jsonl(&s, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let cut = text.lines().take(3).collect::<Vec<_>>().join("\n") + "\n" + &text.lines().nth(3).unwrap()[..40];
        std::fs::write(&p, cut).unwrap();
        match import_jsonl(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(
            &p,
            r#"{"version":7,"split":"train","caption":[1,2,2],"regions":[],"mask_slots":[1,2],"gold":{"attr":3,"obj":4,"kind":"adj_noun"}}"#,
        )
        .unwrap();
        assert!(matches!(import_jsonl(&p), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn vocab_sidecar_round_trip() {
        let v = ConceptVocabulary::new(4, 1, 4, 6);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        write_vocab(&v, &BTreeSet::new(), None, &p).unwrap();
        assert_eq!(read_vocab(&p).unwrap().vocab, v);
    }
}

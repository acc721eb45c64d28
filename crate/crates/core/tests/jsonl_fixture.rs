use std::path::PathBuf;

use compmeta::world::{export_jsonl, import_jsonl, scan_novel_leaks, CompositionalPair, PairKind};
use compmeta::Error;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/three_lines.jsonl")
}

#[test]
fn hand_written_lines_import_into_their_splits() {
    let s = import_jsonl(&fixture()).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test_seen.len(), s.test_novel.len()), (1, 0, 1, 1));
    let novel = CompositionalPair { attr: 4, obj: 7, kind: PairKind::VerbNoun };
    assert_eq!(s.novel_pairs.iter().copied().collect::<Vec<_>>(), vec![novel]);

    let seen = &s.test_seen[0];
    assert_eq!(seen.caption, vec![1, 2, 2, 6]);
    assert_eq!(seen.mask_slots, (1, 2));
    assert_eq!(seen.regions.len(), 2);
    assert_eq!(seen.regions[1].bbox, [0.5, 0.5, 1.0, 1.0]);
    assert!(scan_novel_leaks(&s.train, &s.novel_pairs).is_empty());
}

#[test]
fn export_then_import_is_lossless() {
    let s = import_jsonl(&fixture()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.jsonl");
    export_jsonl(&s, &path).unwrap();
    assert_eq!(import_jsonl(&path).unwrap(), s);
}

#[test]
fn bad_mask_slot_names_the_line() {
    let text = std::fs::read_to_string(fixture()).unwrap();
    let broken = text.replacen("\"mask_slots\":[1,2]", "\"mask_slots\":[1,9]", 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.jsonl");
    std::fs::write(&path, broken).unwrap();
    match import_jsonl(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

use compmeta::eval::{
    metric_rows, read_metric_rows, read_predictions, report_from_records, summarize, write_metric_rows,
    write_predictions, EvalSplit, PredictionRecord,
};
use proptest::prelude::*;

fn record() -> impl Strategy<Value = PredictionRecord> {
    (any::<bool>(), 0u32..4, 0u32..4, 0u32..4, 0u32..4, 0usize..21, proptest::option::of(any::<bool>())).prop_map(
        |(novel, ga, go, pa, po, steps, in_candidates)| PredictionRecord {
            split: if novel { EvalSplit::Novel } else { EvalSplit::Seen },
            index: 0,
            gold_attr: ga,
            gold_obj: go,
            pred_attr: pa,
            pred_obj: po,
            steps,
            in_candidates,
        },
    )
}

fn records() -> impl Strategy<Value = Vec<PredictionRecord>> {
    proptest::collection::vec(record(), 1..60).prop_map(|mut v| {
        for (i, r) in v.iter_mut().enumerate() {
            r.index = i;
        }
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pair_accuracy_never_exceeds_either_slot(recs in records()) {
        let r = report_from_records(&recs, "fp");
        for m in [&r.seen, &r.novel] {
            prop_assert!(m.pair() <= m.attr().min(m.obj()) + 1e-12);
            prop_assert!(m.pair_correct <= m.attr_correct.min(m.obj_correct));
        }
        prop_assert_eq!(r.seen.total + r.novel.total, recs.len());
    }

    #[test]
    fn dump_round_trip_regenerates_the_report(recs in records(), seed in 0u64..100) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        write_predictions(&recs, Some("{\"tool\":\"t\"}"), &path).unwrap();
        let back = read_predictions(&path).unwrap();
        prop_assert_eq!(&back, &recs);
        prop_assert_eq!(report_from_records(&back, "fp"), report_from_records(&recs, "fp"));

        let rows = metric_rows("div4", seed, &report_from_records(&recs, "fp"));
        let mpath = dir.path().join("metrics.csv");
        write_metric_rows(&rows, None, &mpath).unwrap();
        prop_assert_eq!(summarize(&read_metric_rows(&mpath).unwrap()), summarize(&rows));
    }
}

use std::collections::{BTreeMap, HashSet};

use laclip_core::dataset::{
    apply_splits, assign_splits, parse_manifest, parse_manifest_str, split_quotas, summarize, Category, ManifestError,
    ManifestRecord, ParseOptions, Source, Split,
};
use proptest::prelude::*;

/// Quotas by exhaustive search: the (train, test, val) triple summing to `n`
/// that is closest to 7:1:2 in L1 distance, preferring extra items for train,
/// then val, then test when several triples are equally close.
fn quota_oracle(n: usize) -> (usize, usize, usize) {
    let mut best: Option<((usize, usize, usize), usize)> = None;
    for train in 0..=n {
        for test in 0..=(n - train) {
            let val = n - train - test;
            // distances in tenths of an item keep the arithmetic exact
            let dev = (10 * train).abs_diff(7 * n) + (10 * test).abs_diff(n) + (10 * val).abs_diff(2 * n);
            let better = match best {
                None => true,
                Some(((bt, bs, bv), bd)) => dev < bd || (dev == bd && (train, val, test) > (bt, bv, bs)),
            };
            if better {
                best = Some(((train, test, val), dev));
            }
        }
    }
    best.unwrap().0
}

fn quota_triple(n: usize) -> (usize, usize, usize) {
    let q = split_quotas(n);
    let get = |s: Split| q.iter().find(|(x, _)| *x == s).unwrap().1;
    (get(Split::Train), get(Split::Test), get(Split::Val))
}

fn record(id: String, volume: &str, category: Category) -> ManifestRecord {
    ManifestRecord {
        id: id.clone(),
        title: format!("title {id}"),
        description: "描述".into(),
        image_path: format!("images/{id}.png"),
        category,
        volume: volume.into(),
        source: category.expected_source(),
        split: None,
    }
}

fn groups() -> impl Strategy<Value = Vec<ManifestRecord>> {
    let group = (
        prop::sample::select(vec!["v1", "v2", "v3"]),
        prop::sample::select(Category::ALL.to_vec()),
        0usize..45,
    );
    prop::collection::vec(group, 1..6).prop_map(|gs| {
        let mut out = Vec::new();
        for (g, (volume, category, n)) in gs.into_iter().enumerate() {
            for i in 0..n {
                out.push(record(format!("g{g}-{i:03}"), volume, category));
            }
        }
        out
    })
}

#[test]
fn quotas_match_exhaustive_search() {
    for n in 0..=300 {
        assert_eq!(quota_triple(n), quota_oracle(n), "n = {n}");
    }
    assert_eq!(quota_triple(20), (14, 2, 4));
}

proptest! {
    #[test]
    fn every_group_gets_its_quota(records in groups(), seed in any::<u64>()) {
        let a = assign_splits(&records, seed);
        prop_assert_eq!(a.labels.len(), records.len());
        let mut counts: BTreeMap<(String, Category), [usize; 3]> = BTreeMap::new();
        for (r, (id, split)) in records.iter().zip(&a.labels) {
            prop_assert_eq!(&r.id, id);
            let slot = match split { Split::Train => 0, Split::Test => 1, Split::Val => 2 };
            counts.entry((r.volume.clone(), r.category)).or_default()[slot] += 1;
        }
        for c in counts.values() {
            let n = c.iter().sum();
            prop_assert_eq!((c[0], c[1], c[2]), quota_oracle(n));
        }
        let again = assign_splits(&records, seed);
        prop_assert_eq!(a.to_tsv().into_bytes(), again.to_tsv().into_bytes());
    }

    #[test]
    fn assignment_ignores_manifest_order(records in groups(), seed in any::<u64>()) {
        let mut reversed = records.clone();
        reversed.reverse();
        let a = assign_splits(&records, seed);
        let b = assign_splits(&reversed, seed);
        for (id, s) in &a.labels {
            prop_assert_eq!(b.get(id), Some(*s));
        }
    }
}

#[test]
fn seeds_change_membership_but_not_counts() {
    let records: Vec<_> = (0..20).map(|i| record(format!("m{i:02}"), "dh", Category::Mural)).collect();
    let a = assign_splits(&records, 42);
    let b = assign_splits(&records, 43);
    assert_ne!(a.labels, b.labels);
    for asg in [&a, &b] {
        let n = |s| asg.labels.iter().filter(|(_, x)| *x == s).count();
        assert_eq!((n(Split::Train), n(Split::Test), n(Split::Val)), (14, 2, 4));
    }
    let applied = apply_splits(&records, &a);
    assert!(applied.iter().all(|r| r.split == a.get(&r.id)));
}

#[test]
fn parse_and_summarize() {
    let text = [
        r#"{"id":"a","title":"t","description":"d","image_path":"a.png","category":"pattern","volume":"v1","source":"silk"}"#,
        "",
        r#"{"id":"b","title":"t","description":"d","image_path":"b.png","category":"mural","volume":"c","source":"dunhuang","split":"val"}"#,
        r#"{"id":"c","title":"t","description":"d","image_path":"c.png","category":"pattern","volume":"v1","source":"silk"}"#,
    ]
    .join("\n");
    let report = parse_manifest_str(&text, ParseOptions::default()).unwrap();
    assert!(report.errors.is_empty());
    assert_eq!(report.records[1].split, Some(Split::Val));
    let summary = summarize(&report.records);
    assert_eq!(summary.total, 3);
    assert_eq!(summary.by_source()[&Source::Silk], 2);
    assert_eq!(summary.groups[&(Source::Silk, "v1".to_string(), Category::Pattern)], 2);

    let round: String = report.records.iter().map(|r| r.to_json_line() + "\n").collect();
    assert_eq!(parse_manifest_str(&round, ParseOptions::default()).unwrap().records, report.records);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, &text).unwrap();
    assert_eq!(parse_manifest(&path).unwrap(), report.records);
    assert!(matches!(
        parse_manifest(&dir.path().join("missing.jsonl")),
        Err(ManifestError::FileNotFound(_))
    ));
}

#[test]
fn strict_and_lenient_errors() {
    let ok = r#"{"id":"a","title":"t","description":"d","image_path":"a.png","category":"pattern","volume":"v1","source":"silk"}"#;
    let cases = [
        (ok.replace("\"silk\"", "\"dunhuang\""), "cross"),
        (ok.replace("pattern", "sculpture"), "malformed"),
        (ok.replace("\"d\"", "\"\""), "malformed"),
        (ok.replace("}", ",\"extra\":1}"), "malformed"),
        ("not json".to_string(), "malformed"),
        (ok.to_string(), "duplicate"),
    ];
    for (bad, kind) in &cases {
        let text = format!("{ok}\n{bad}\n");
        let err = parse_manifest_str(&text, ParseOptions::default()).unwrap_err();
        assert_eq!(err.line(), Some(2), "{bad}");
        let matched = match kind {
            &"cross" => matches!(err, ManifestError::CrossSourceCategory { .. }),
            &"duplicate" => matches!(err, ManifestError::DuplicateId { .. }),
            _ => matches!(err, ManifestError::MalformedLine { .. }),
        };
        assert!(matched, "{bad}: {err}");
    }

    let all: Vec<String> = std::iter::once(ok.to_string()).chain(cases.iter().map(|c| c.0.clone())).collect();
    let report = parse_manifest_str(&all.join("\n"), ParseOptions { lenient: true }).unwrap();
    // the unknown key is tolerated in lenient mode but then collides with "a"
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.errors.len(), 6);
    let lines: HashSet<_> = report.errors.iter().filter_map(|e| e.line()).collect();
    assert_eq!(lines.len(), 6);
}

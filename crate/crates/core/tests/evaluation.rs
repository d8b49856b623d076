mod common;

use std::collections::BTreeSet;
use std::fs;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use vladbench_core::evaluation::{
    average_precision, evaluate_index, holidays_from_ids, load_ground_truth, load_oxford_ground_truth, mean_ap, ApVariant,
    GroundTruth,
};
use vladbench_core::feature_io::{synth_dataset, SynthConfig};
use vladbench_core::retrieval::{Hit, RankedList, RetrievalIndex};
use vladbench_core::Error;

fn ranked(ids: &[String]) -> RankedList {
    RankedList {
        query_id: "q".into(),
        hits: ids
            .iter()
            .enumerate()
            .map(|(i, id)| Hit {
                image_id: id.clone(),
                distance: i as f64,
            })
            .collect(),
    }
}

/// Random ranking over up to 50 ids with random positives and junk.
fn random_case(seed: u64) -> (Vec<String>, GroundTruth) {
    let mut r = rng(seed);
    let n = r.random_range(1..=50);
    let mut ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
    for i in (1..n).rev() {
        ids.swap(i, r.random_range(0..=i));
    }
    let mut pos = BTreeSet::new();
    let mut junk = BTreeSet::new();
    for i in 0..n {
        match r.random_range(0..10) {
            0..=2 => {
                pos.insert(format!("id{i}"));
            }
            3 => {
                junk.insert(format!("id{i}"));
            }
            _ => {}
        }
    }
    if pos.is_empty() {
        pos.insert(ids[r.random_range(0..n)].clone());
        junk.retain(|j| !pos.contains(j));
    }
    // some positives may be absent from the ranking
    if r.random_bool(0.3) {
        pos.insert("never-retrieved".into());
    }
    (ids, GroundTruth::new("q", pos, junk, false).unwrap())
}

#[test]
fn ap_matches_oracle_on_random_cases() {
    for seed in 0..1000 {
        let (ids, gt) = random_case(seed);
        let got = average_precision(&ranked(&ids), &gt).unwrap();
        let want = ap_oracle(&ids, &gt.positives, &gt.junk, None);
        assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn plus_minus_plus_is_five_sixths() {
    let ids: Vec<String> = ["a", "x", "b"].iter().map(|s| s.to_string()).collect();
    let gt = GroundTruth::new("q", ["a", "b"].iter().map(|s| s.to_string()).collect(), BTreeSet::new(), false).unwrap();
    assert!((average_precision(&ranked(&ids), &gt).unwrap() - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn mean_matches_independent_mean() {
    let mut r = rng(55);
    let aps: Vec<f64> = (0..55).map(|_| r.random::<f64>()).collect();
    let mut s = 0.0;
    for a in &aps {
        s += a;
    }
    assert!((mean_ap(&aps).unwrap() - s / 55.0).abs() < 1e-12);
}

#[test]
fn map_ignores_query_order() {
    let mut r = rng(8);
    let ids: Vec<String> = (0..40).map(|i| (100_000 + (i / 4) * 100 + i % 4).to_string()).collect();
    let idx = RetrievalIndex::build(5, ids.iter().map(|id| (id.clone(), (0..5).map(|_| r.random::<f64>()).collect::<Vec<_>>())))
        .unwrap();
    let gts = holidays_from_ids(ids.iter().map(String::as_str)).unwrap();
    let mut rev = gts.clone();
    rev.reverse();
    let a = evaluate_index(&idx, &gts, ApVariant::Discrete).unwrap();
    let b = evaluate_index(&idx, &rev, ApVariant::Discrete).unwrap();
    assert!((a.map - b.map).abs() < 1e-12);
    assert_eq!(a.per_query.len(), 10);
}

#[test]
fn holidays_convention_and_scale() {
    let gts = holidays_from_ids(["100002", "100000", "100001", "100100"]).unwrap();
    assert_eq!(gts[0].query_id, "100000");
    assert_eq!(gts[0].positives, ["100001", "100002"].iter().map(|s| s.to_string()).collect());
    assert!(gts[0].exclude_self && gts[0].junk.is_empty());
    assert!(gts[1].positives.is_empty());

    let ids: Vec<String> = (0..500).flat_map(|g| (0..3).map(move |m| (100_000 + g * 100 + m).to_string())).collect();
    assert_eq!(holidays_from_ids(ids.iter().map(String::as_str)).unwrap().len(), 500);
}

#[test]
fn synth_groups_are_recovered() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SynthConfig::new(3, 5, 3, 4, 4);
    cfg.write_images = false;
    let manifest = synth_dataset(&cfg, dir.path()).unwrap();
    let gts = load_ground_truth(&manifest).unwrap();
    assert_eq!(gts.len(), 5);
    for (g, gt) in gts.iter().enumerate() {
        assert_eq!(gt.query_id, (100_000 + g * 100).to_string());
        let want: BTreeSet<String> = (1..3).map(|m| (100_000 + g * 100 + m).to_string()).collect();
        assert_eq!(gt.positives, want);
    }
}

fn write(dir: &std::path::Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

#[test]
fn oxford_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "all_souls_1_query.txt", "oxc1_all_souls_000013 136.5 34.1 648.5 955.7\n");
    write(d, "all_souls_1_good.txt", "all_souls_000013\nall_souls_000014\nall_souls_000015\n");
    write(d, "all_souls_1_ok.txt", "all_souls_000016\n");
    write(d, "all_souls_1_junk.txt", "all_souls_000017\n");
    write(d, "radcliffe_1_query.txt", "oxc1_radcliffe_000001 1 2 3 4\n");
    write(d, "radcliffe_1_good.txt", "radcliffe_000002\n");
    write(d, "radcliffe_1_ok.txt", "");
    write(d, "radcliffe_1_junk.txt", "");
    let gts = load_oxford_ground_truth(d).unwrap();
    assert_eq!(gts.len(), 2);
    let q = &gts[0];
    assert_eq!(q.query_id, "all_souls_000013");
    assert!(!q.exclude_self);
    // the query image itself moves from good to junk
    assert_eq!(q.positives.len(), 3);
    assert_eq!(q.junk, ["all_souls_000013", "all_souls_000017"].iter().map(|s| s.to_string()).collect());
    assert_eq!(gts[1].junk, ["radcliffe_000001".to_string()].into_iter().collect());
}

#[test]
fn oxford_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "x_query.txt", "oxc1_x_1 1 2 three 4\n");
    write(d, "x_good.txt", "");
    write(d, "x_ok.txt", "");
    write(d, "x_junk.txt", "");
    match load_oxford_ground_truth(d) {
        Err(Error::Parse { path, line, .. }) => {
            assert!(path.ends_with("x_query.txt"));
            assert_eq!(line, 1);
        }
        other => panic!("{other:?}"),
    }
    fs::remove_file(d.join("x_ok.txt")).unwrap();
    assert!(matches!(load_oxford_ground_truth(d), Err(Error::MissingFiles(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn junk_insertion_never_changes_ap(seed in 0u64..100_000, at in proptest::collection::vec(0usize..60, 1..6)) {
        let (ids, gt) = random_case(seed);
        let mut junk = gt.junk.clone();
        let mut with = ids.clone();
        for (n, pos) in at.iter().enumerate() {
            let j = format!("extra-junk-{n}");
            junk.insert(j.clone());
            with.insert((*pos).min(with.len()), j);
        }
        let gt2 = GroundTruth::new("q", gt.positives.clone(), junk, false).unwrap();
        let a = average_precision(&ranked(&ids), &gt).unwrap();
        let b = average_precision(&ranked(&with), &gt2).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn self_at_rank_one_never_changes_ap(seed in 0u64..100_000) {
        let (ids, gt) = random_case(seed);
        let gt = GroundTruth::new("q", gt.positives, gt.junk, true).unwrap();
        let mut with = vec!["q".to_string()];
        with.extend(ids.iter().cloned());
        let a = average_precision(&ranked(&ids), &gt).unwrap();
        let b = average_precision(&ranked(&with), &gt).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((b - ap_oracle(&with, &gt.positives, &gt.junk, Some("q"))).abs() < 1e-12);
    }
}

//! Approach identification through the scripted gateway against a
//! brute-force oracle over random clusters.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

#[test]
fn matches_oracle_on_random_clusters() {
    let started = Instant::now();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for seed in 0..64 {
        for regime in common::check_dai_seed(seed).unwrap() {
            *seen.entry(regime).or_default() += 1;
        }
    }
    for regime in ["SIMPLE", "COMPLEX", "single video", "composite"] {
        assert!(seen.get(regime).copied().unwrap_or(0) > 0, "no seed exercised {regime}: {seen:?}");
    }
    assert!(started.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn oracle_itself_on_hand_cases() {
    let truth: BTreeMap<String, Vec<String>> = [
        ("a", vec!["x", "y", "z"]),
        ("b", vec!["x", "y", "z"]),
        ("c", vec!["x", "z"]),
        ("d", vec!["x", "z"]),
        ("e", vec!["w", "x", "y", "z"]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.into_iter().map(str::to_string).collect()))
    .collect();
    let mids: BTreeMap<String, Vec<f64>> = truth
        .iter()
        .map(|(k, v)| (k.clone(), (0..v.len()).map(|i| i as f64).collect()))
        .collect();
    let out = common::oracle_approaches(&truth, &mids, 2);
    // modal tie between xyz and xz: the shorter one wins
    assert_eq!(out[0].0, "STANDARD");
    assert_eq!(out[0].1, vec!["x", "z"]);
    assert_eq!(out.len(), 2);
    assert_eq!(out[1].0, "COMPLEX");
    assert_eq!(out[1].1, vec!["x", "y", "z"]);
}

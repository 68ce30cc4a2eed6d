mod oracle;

use std::collections::BTreeMap;

use prodretrieve::evalbench::{gen_synthetic, mar_at_k, GroundTruth, SynthParams};
use prodretrieve::search::{knn_search, Orientation, RankingList};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn list(q: &str, items: &[String]) -> RankingList<f32> {
    RankingList {
        query_id: q.into(),
        entries: items.iter().map(|g| (g.clone(), 0.0)).collect(),
        k: items.len(),
        orientation: Orientation::Distance,
    }
}

type IdLists = BTreeMap<String, Vec<String>>;

/// Random lists and ground truth, plus the same data as plain id lists for the oracle.
fn toy(seed: u64, nq: usize) -> (Vec<RankingList<f32>>, GroundTruth, IdLists, IdLists) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gallery: Vec<String> = (0..25).map(|i| format!("g{i:02}")).collect();
    let mut lists = Vec::new();
    let mut gt = BTreeMap::new();
    let mut raw_lists = BTreeMap::new();
    let mut raw_gt = BTreeMap::new();
    for q in 0..nq {
        let qid = format!("q{q}");
        let mut pick = gallery.clone();
        pick.shuffle(&mut rng);
        let n_rel = rng.random_range(1..15);
        let rel: Vec<String> = pick[..n_rel].to_vec();
        pick.shuffle(&mut rng);
        let ranked: Vec<String> = pick[..rng.random_range(0..13)].to_vec();
        if q % 4 != 3 {
            lists.push(list(&qid, &ranked));
            raw_lists.insert(qid.clone(), ranked);
        }
        gt.insert(qid.clone(), rel.iter().cloned().collect());
        raw_gt.insert(qid, rel);
    }
    (lists, GroundTruth::new(gt).unwrap(), raw_lists, raw_gt)
}

#[test]
fn mixed_toy_matches_enumeration() {
    let (lists, gt, raw_lists, raw_gt) = toy(5, 5);
    let r = mar_at_k(&lists, &gt, 10, None).unwrap();
    assert!((r.mar_at_k - oracle::mar_enumerated(&raw_lists, &raw_gt, 10)).abs() < 1e-12);
    assert_eq!(r.n_missing, 1);
}

#[test]
fn zero_noise_pipeline_is_perfect() {
    let b = gen_synthetic::<f32>(&SynthParams {
        noise_sigma: 0.0,
        ..SynthParams::standard()
    })
    .unwrap();
    let lists = knn_search(&b.queries, &b.gallery, 10).unwrap();
    assert_eq!(mar_at_k(&lists, &b.gt, 10, None).unwrap().mar_at_k, 1.0);
}

#[test]
fn ground_truth_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("gt.jsonl");
    std::fs::write(&p, "{\"query\": \"q1\", \"relevant\": [\"a\", \"b\"]}\n{\"query\": \"q2\", \"relevant\": [\"c\"]}\n").unwrap();
    let gt = GroundTruth::load(&p).unwrap();
    assert_eq!(gt.relevant["q1"].len(), 2);
    gt.save(&p).unwrap();
    assert_eq!(GroundTruth::load(&p).unwrap(), gt);
    std::fs::write(&p, "{\"query\": \"q1\", \"relevant\": []}\n").unwrap();
    assert!(GroundTruth::load(&p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bounded_and_order_free(seed in any::<u64>(), nq in 1usize..12) {
        let (mut lists, gt, raw_lists, raw_gt) = toy(seed, nq);
        let a = mar_at_k(&lists, &gt, 10, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.mar_at_k));
        prop_assert!((a.mar_at_k - oracle::mar_enumerated(&raw_lists, &raw_gt, 10)).abs() < 1e-12);
        lists.reverse();
        prop_assert_eq!(a.mar_at_k, mar_at_k(&lists, &gt, 10, None).unwrap().mar_at_k);
    }

    #[test]
    fn adding_a_hit_never_hurts(seed in any::<u64>()) {
        let (lists, gt, _, _) = toy(seed, 6);
        let before = mar_at_k(&lists, &gt, 10, None).unwrap().mar_at_k;
        let mut better = lists.clone();
        let l = &mut better[0];
        let rel = &gt.relevant[&l.query_id];
        if let Some(missing) = rel.iter().find(|r| !l.gallery_ids().any(|g| g == r.as_str())) {
            l.entries.truncate(9);
            // replace the tail only if it was not a hit
            l.entries.retain(|(g, _)| rel.contains(g));
            l.entries.push((missing.clone(), 0.0));
            l.k = l.k.max(l.entries.len());
            let after = mar_at_k(&better, &gt, 10, None).unwrap().mar_at_k;
            prop_assert!(after >= before);
        }
    }
}

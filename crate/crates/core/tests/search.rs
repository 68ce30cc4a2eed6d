#![allow(clippy::needless_range_loop)]

mod oracle;

use std::collections::BTreeMap;

use prodretrieve::embed_store::{l2_normalize, EmbeddingSet};
use prodretrieve::search::{
    aggregate_crops, knn_search, pairwise_cosine_distance, topk, CropGroupMap, CropScheme,
    DistanceMatrix,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_set(rng: &mut ChaCha8Rng, prefix: &str, n: usize, dim: usize) -> EmbeddingSet<f32> {
    let ids = (0..n).map(|i| format!("{prefix}{i:04}")).collect();
    let data = (0..n * dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    l2_normalize(&EmbeddingSet::new(ids, dim, data).unwrap()).unwrap()
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:04}")).collect()
}

#[test]
fn distances_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = unit_set(&mut rng, "q", 4, 16);
    let g = unit_set(&mut rng, "g", 7, 16);
    let m = pairwise_cosine_distance(&q, &g).unwrap();
    let want = oracle::distance_table(&oracle::rows_f64(&q), &oracle::rows_f64(&g));
    for i in 0..4 {
        for j in 0..7 {
            assert!((m.get(i, j) as f64 - want[i][j]).abs() < 1e-5);
        }
    }
}

#[test]
fn self_distance_matrix_is_symmetric_with_zero_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = unit_set(&mut rng, "a", 20, 32);
    let m = pairwise_cosine_distance(&a, &a).unwrap();
    for i in 0..20 {
        assert!(m.get(i, i) < 1e-6);
        for j in 0..20 {
            assert!((m.get(i, j) - m.get(j, i)).abs() < 1e-6);
            assert!(m.get(i, j) <= 2.0 + 1e-5);
        }
    }
}

#[test]
fn topk_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (nq, ng) = (100, 1000);
    // quantized values force plenty of exact ties
    let values: Vec<f32> = (0..nq * ng)
        .map(|_| rng.random_range(0..50) as f32 / 25.0)
        .collect();
    let m = DistanceMatrix::new(ids("q", nq), ids("g", ng), values).unwrap();
    let lists = topk(&m, 10).unwrap();
    for (q, list) in lists.iter().enumerate() {
        let row: Vec<f64> = m.row(q).iter().map(|&v| v as f64).collect();
        let want = oracle::topk_by_sort(&row, m.gallery_ids(), 10);
        assert_eq!(list.gallery_ids().collect::<Vec<_>>(), want);
        list.validate().unwrap();
    }
}

#[test]
fn fused_search_equals_matrix_then_topk() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = unit_set(&mut rng, "q", 30, 24);
    let g = unit_set(&mut rng, "g", 300, 24);
    let via_matrix = topk(&pairwise_cosine_distance(&q, &g).unwrap(), 10).unwrap();
    assert_eq!(knn_search(&q, &g, 10).unwrap(), via_matrix);
}

#[test]
fn identity_retrieval() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = unit_set(&mut rng, "g", 50, 8);
    let q = g.select(&[17]);
    let l = &knn_search(&q, &g, 1).unwrap()[0];
    assert_eq!(l.entries[0].0, "g0017");
}

#[test]
fn six_crop_aggregation_matches_group_min() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let crops = ids("c", 18);
    let mut shuffled = crops.clone();
    shuffled.shuffle(&mut rng);
    let groups: BTreeMap<String, Vec<String>> = (0..3)
        .map(|p| (format!("p{p}"), shuffled[p * 6..(p + 1) * 6].to_vec()))
        .collect();
    let map = CropGroupMap::new(CropScheme::Index6Crop, groups.clone()).unwrap();
    let values: Vec<f32> = (0..2 * 18).map(|_| rng.random_range(0.0f32..2.0)).collect();
    let m = DistanceMatrix::new(ids("q", 2), crops.clone(), values).unwrap();
    let agg = aggregate_crops(&m, &map).unwrap();
    let table: Vec<Vec<f64>> = (0..2)
        .map(|q| m.row(q).iter().map(|&v| v as f64).collect())
        .collect();
    let want = oracle::group_min(&table, &crops, &groups);
    for (col, parent) in agg.gallery_ids().iter().enumerate() {
        for q in 0..2 {
            assert_eq!(agg.get(q, col) as f64, want[parent][q]);
        }
    }
    // parents appear in order of their first crop column
    let first_col = |p: &String| crops.iter().position(|c| groups[p].contains(c)).unwrap();
    assert!(agg
        .gallery_ids()
        .windows(2)
        .all(|w| first_col(&w[0]) < first_col(&w[1])));
}

#[test]
fn crop_map_json_format() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("map.json");
    std::fs::write(
        &p,
        r#"{"scheme": "index5crop", "groups": {"img": ["a", "b", "c", "d", "e"]}}"#,
    )
    .unwrap();
    let map = CropGroupMap::load(&p).unwrap();
    assert_eq!(map.scheme(), CropScheme::Index5Crop);
    assert_eq!(map.parent_of("c"), Some("img"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn topk_ignores_gallery_storage_order(seed in any::<u64>(), k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ng = 40;
        let gallery = ids("g", ng);
        let values: Vec<f32> = (0..3 * ng).map(|_| rng.random_range(0..8) as f32 / 4.0).collect();
        let m = DistanceMatrix::new(ids("q", 3), gallery.clone(), values.clone()).unwrap();
        let mut perm: Vec<usize> = (0..ng).collect();
        perm.shuffle(&mut rng);
        let pv: Vec<f32> = (0..3).flat_map(|q| perm.iter().map(|&j| values[q * ng + j]).collect::<Vec<_>>()).collect();
        let pm = DistanceMatrix::new(ids("q", 3), perm.iter().map(|&j| gallery[j].clone()).collect(), pv).unwrap();
        prop_assert_eq!(topk(&m, k).unwrap(), topk(&pm, k).unwrap());
    }

    #[test]
    fn extra_crop_never_increases_distance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crops = ids("c", 9);
        let base: BTreeMap<String, Vec<String>> =
            (0..3).map(|p| (format!("p{p}"), crops[p * 2..p * 2 + 2].to_vec())).collect();
        let mut grown = base.clone();
        grown.get_mut("p0").unwrap().push(crops[6].clone());
        let values: Vec<f32> = (0..2 * 9).map(|_| rng.random_range(0.0f32..2.0)).collect();
        let full = DistanceMatrix::new(ids("q", 2), crops.clone(), values.clone()).unwrap();
        let cols: Vec<usize> = (0..6).collect();
        let sub_vals: Vec<f32> = (0..2).flat_map(|q| cols.iter().map(|&c| values[q * 9 + c]).collect::<Vec<_>>()).collect();
        let sub = DistanceMatrix::new(ids("q", 2), crops[..6].to_vec(), sub_vals).unwrap();
        let a = aggregate_crops(&sub, &CropGroupMap::new(CropScheme::Custom, base).unwrap()).unwrap();
        let grown_map = CropGroupMap::new(CropScheme::Custom, grown.clone()).unwrap();
        let full_cols: Vec<usize> = (0..7).collect();
        let full_vals: Vec<f32> = (0..2).flat_map(|q| full_cols.iter().map(|&c| values[q * 9 + c]).collect::<Vec<_>>()).collect();
        let b = aggregate_crops(&DistanceMatrix::new(ids("q", 2), crops[..7].to_vec(), full_vals).unwrap(), &grown_map).unwrap();
        prop_assert_eq!(a.gallery_ids(), b.gallery_ids());
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!(y <= x);
        }
        // the parent distance never exceeds any single crop's distance
        for (col, parent) in b.gallery_ids().iter().enumerate() {
            for crop in &grown[parent] {
                let j = crops.iter().position(|c| c == crop).unwrap();
                for q in 0..2 {
                    prop_assert!(b.get(q, col) <= full.get(q, j));
                }
            }
        }
    }
}

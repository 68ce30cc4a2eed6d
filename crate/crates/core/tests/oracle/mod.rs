//! Slow, direct reference implementations used only by tests.
//!
//! Everything here works on dense `f64` data with full sorts and explicit
//! loops, and shares no code with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

pub fn rows_f64(set: &prodretrieve::EmbeddingSetF32) -> Vec<Vec<f64>> {
    set.rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    (1.0 - s).max(0.0)
}

pub fn distance_table(q: &[Vec<f64>], g: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; g.len()]; q.len()];
    for i in 0..q.len() {
        for j in 0..g.len() {
            out[i][j] = cosine_distance(&q[i], &g[j]);
        }
    }
    out
}

/// Full sort by (score, id), then truncate.
pub fn topk_by_sort(scores: &[f64], ids: &[String], k: usize) -> Vec<String> {
    let mut all: Vec<(f64, &String)> = scores.iter().copied().zip(ids).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
    all.into_iter().take(k).map(|(_, id)| id.clone()).collect()
}

pub struct DenseRerank {
    pub jaccard: Vec<Vec<f64>>,
    pub fused: Vec<Vec<f64>>,
    pub original: Vec<Vec<f64>>,
}

/// k-reciprocal re-ranking with dense vectors and no shortcuts.
pub fn rerank_dense(
    q: &[Vec<f64>],
    g: &[Vec<f64>],
    k1: usize,
    k2: usize,
    lambda: f64,
) -> DenseRerank {
    let probes: Vec<&Vec<f64>> = q.iter().chain(g.iter()).collect();
    let n = probes.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            d[i][j] = cosine_distance(probes[i], probes[j]);
        }
    }
    let order: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut o: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            o.sort_by(|&a, &b| d[i][a].partial_cmp(&d[i][b]).unwrap().then(a.cmp(&b)));
            o
        })
        .collect();
    let knn = |i: usize, k: usize| -> Vec<usize> { order[i][..k].to_vec() };
    let recip = |i: usize, k: usize| -> BTreeSet<usize> {
        knn(i, k)
            .into_iter()
            .filter(|&j| knn(j, k).contains(&i))
            .collect()
    };
    let half = k1.div_ceil(2);
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let core = recip(i, k1);
        let mut all = core.clone();
        for &c in &core {
            let cand = recip(c, half);
            let overlap = cand.iter().filter(|x| core.contains(x)).count() as f64;
            if overlap >= 2.0 / 3.0 * cand.len() as f64 {
                all.extend(cand);
            }
        }
        for &j in &all {
            v[i][j] = (-d[i][j]).exp();
        }
    }
    let mut vq = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut members = vec![i];
        members.extend(knn(i, k2 - 1));
        for &m in &members {
            for j in 0..n {
                vq[i][j] += v[m][j];
            }
        }
        for j in 0..n {
            vq[i][j] /= members.len() as f64;
        }
    }
    let nq = q.len();
    let mut jaccard = vec![vec![0.0; g.len()]; nq];
    let mut fused = vec![vec![0.0; g.len()]; nq];
    let mut original = vec![vec![0.0; g.len()]; nq];
    for p in 0..nq {
        for gi in 0..g.len() {
            let (mut lo, mut hi) = (0.0, 0.0);
            for j in 0..n {
                lo += vq[p][j].min(vq[nq + gi][j]);
                hi += vq[p][j].max(vq[nq + gi][j]);
            }
            let dj = if hi > 0.0 { 1.0 - lo / hi } else { 1.0 };
            jaccard[p][gi] = dj;
            original[p][gi] = d[p][nq + gi];
            fused[p][gi] = (1.0 - lambda) * dj + lambda * d[p][nq + gi];
        }
    }
    DenseRerank {
        jaccard,
        fused,
        original,
    }
}

/// Per parent, the minimum over its crop columns.
pub fn group_min(
    values: &[Vec<f64>],
    crop_ids: &[String],
    groups: &BTreeMap<String, Vec<String>>,
) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (parent, crops) in groups {
        let mut per_query = Vec::new();
        for row in values {
            let mut best = f64::INFINITY;
            for (j, c) in crop_ids.iter().enumerate() {
                if crops.contains(c) && row[j] < best {
                    best = row[j];
                }
            }
            per_query.push(best);
        }
        out.insert(parent.clone(), per_query);
    }
    out
}

/// Components of the explicit similarity graph by breadth-first search.
pub fn threshold_components(
    rows: &[Vec<f64>],
    ids: &[String],
    threshold: f64,
) -> Vec<BTreeSet<String>> {
    let n = rows.len();
    let sim =
        |i: usize, j: usize| -> f64 { rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum() };
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            adj[i][j] = i != j && sim(i, j) >= threshold;
        }
    }
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([s]);
        seen[s] = true;
        while let Some(u) = queue.pop_front() {
            comp.insert(ids[u].clone());
            for w in 0..n {
                if adj[u][w] && !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Recall per query by explicit intersection, zero when a query has no list.
pub fn mar_enumerated(
    lists: &BTreeMap<String, Vec<String>>,
    gt: &BTreeMap<String, Vec<String>>,
    k: usize,
) -> f64 {
    let mut total = 0.0;
    for (q, rel) in gt {
        if let Some(list) = lists.get(q) {
            let mut hits = 0;
            for item in list.iter().take(k) {
                if rel.iter().any(|r| r == item) {
                    hits += 1;
                }
            }
            total += hits as f64 / rel.len().min(k) as f64;
        }
    }
    total / gt.len() as f64
}

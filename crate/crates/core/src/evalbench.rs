//! MAR@K evaluation and the seeded synthetic benchmark.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::scalar::Scalar;
use crate::search::RankingList;

pub const DEFAULT_K: usize = 10;

/// Relevant gallery ids per query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub relevant: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthRecord {
    query: String,
    relevant: Vec<String>,
}

impl GroundTruth {
    pub fn new(relevant: BTreeMap<String, BTreeSet<String>>) -> Result<Self> {
        if let Some((q, _)) = relevant.iter().find(|(_, r)| r.is_empty()) {
            return Err(Error::InvalidParams(format!(
                "query {q:?} has no relevant items"
            )));
        }
        Ok(Self { relevant })
    }

    pub fn len(&self) -> usize {
        self.relevant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevant.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<GroundTruthRecord> = fsutil::read_jsonl(path, "ground truth")?;
        let mut relevant = BTreeMap::new();
        for r in records {
            if relevant
                .insert(r.query.clone(), r.relevant.into_iter().collect())
                .is_some()
            {
                return Err(Error::DuplicateId(r.query));
            }
        }
        Self::new(relevant)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<GroundTruthRecord> = self
            .relevant
            .iter()
            .map(|(q, r)| GroundTruthRecord {
                query: q.clone(),
                relevant: r.iter().cloned().collect(),
            })
            .collect();
        fsutil::write_atomic(path, &fsutil::to_jsonl(&records))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mar_at_k: f64,
    pub k: usize,
    pub n_queries: usize,
    pub n_missing: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_query: BTreeMap<String, f64>,
}

/// Mean over ground-truth queries of `|top-k ∩ relevant| / min(|relevant|, k)`.
///
/// Queries without a list score zero and are counted in `n_missing`. When
/// `gallery` is given, a list naming any id outside it is an error.
pub fn mar_at_k<T: Scalar>(
    lists: &[RankingList<T>],
    gt: &GroundTruth,
    k: usize,
    gallery: Option<&HashSet<String>>,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::InvalidParams("k must be at least 1".into()));
    }
    let mut by_query: BTreeMap<&str, &RankingList<T>> = BTreeMap::new();
    for l in lists {
        if let Some(universe) = gallery {
            if let Some(g) = l.gallery_ids().find(|g| !universe.contains(*g)) {
                return Err(Error::UnknownGalleryId {
                    query: l.query_id.clone(),
                    gallery: g.to_owned(),
                });
            }
        }
        if by_query.insert(&l.query_id, l).is_some() {
            return Err(Error::DuplicateId(l.query_id.clone()));
        }
    }
    let mut per_query = BTreeMap::new();
    let mut n_missing = 0;
    for (q, relevant) in &gt.relevant {
        let recall = match by_query.get(q.as_str()) {
            Some(list) => {
                let hits = list
                    .gallery_ids()
                    .take(k)
                    .filter(|g| relevant.contains(*g))
                    .count();
                hits as f64 / relevant.len().min(k) as f64
            }
            None => {
                n_missing += 1;
                0.0
            }
        };
        per_query.insert(q.clone(), recall);
    }
    let mar = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    Ok(EvalReport {
        mar_at_k: mar,
        k,
        n_queries: per_query.len(),
        n_missing,
        per_query,
    })
}

/// Parameters of the clustered synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_classes: usize,
    pub gallery_per_class: usize,
    pub queries_per_class: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthParams {
    /// 200 classes of 10 gallery and 2 query items in 64 dimensions, sigma 0.35, seed 7.
    pub fn standard() -> Self {
        Self {
            n_classes: 200,
            gallery_per_class: 10,
            queries_per_class: 2,
            dim: 64,
            noise_sigma: 0.35,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark<T = f32> {
    pub gallery: EmbeddingSet<T>,
    pub queries: EmbeddingSet<T>,
    pub gt: GroundTruth,
}

pub fn gallery_id(class: usize, member: usize) -> String {
    format!("g{class:05}_{member:03}")
}

pub fn query_id(class: usize, member: usize) -> String {
    format!("q{class:05}_{member:03}")
}

/// Seeded Gaussian clusters around random unit centroids.
///
/// Draw order: every centroid, then gallery members class by class, then
/// queries class by class.
pub fn gen_synthetic<T: Scalar>(p: &SynthParams) -> Result<SyntheticBenchmark<T>> {
    if p.n_classes == 0 || p.gallery_per_class == 0 || p.queries_per_class == 0 {
        return Err(Error::InvalidParams(
            "class and member counts must be at least 1".into(),
        ));
    }
    if p.dim < 2 {
        return Err(Error::InvalidParams(format!("dim {} below 2", p.dim)));
    }
    if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "noise_sigma {} is not a finite non-negative number",
            p.noise_sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let centroids: Vec<Vec<f64>> = (0..p.n_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..p.dim).map(|_| rng.sample(StandardNormal)).collect();
            if let Some(u) = unit(v) {
                break u;
            }
        })
        .collect();
    let member = |c: &[f64], rng: &mut ChaCha8Rng| -> Vec<T> {
        let v = if p.noise_sigma == 0.0 {
            c.to_vec()
        } else {
            loop {
                let v: Vec<f64> = c
                    .iter()
                    .map(|x| x + p.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if let Some(u) = unit(v) {
                    break u;
                }
            }
        };
        v.into_iter().map(T::lit).collect()
    };
    let mut draw = |per_class: usize, name: fn(usize, usize) -> String| {
        let mut ids = Vec::with_capacity(p.n_classes * per_class);
        let mut data = Vec::with_capacity(p.n_classes * per_class * p.dim);
        for (c, centroid) in centroids.iter().enumerate() {
            for m in 0..per_class {
                ids.push(name(c, m));
                data.extend(member(centroid, &mut rng));
            }
        }
        EmbeddingSet::new(ids, p.dim, data)
    };
    let gallery = draw(p.gallery_per_class, gallery_id)?;
    let queries = draw(p.queries_per_class, query_id)?;
    let relevant = (0..p.n_classes)
        .flat_map(|c| {
            let rel: BTreeSet<String> =
                (0..p.gallery_per_class).map(|m| gallery_id(c, m)).collect();
            (0..p.queries_per_class).map(move |m| (query_id(c, m), rel.clone()))
        })
        .collect();
    Ok(SyntheticBenchmark {
        gallery,
        queries,
        gt: GroundTruth::new(relevant)?,
    })
}

/// Adds seeded `N(0, sigma^2)` noise to every coordinate. Rows are not renormalized,
/// so the result stands in for a second model or test scale of the same items.
pub fn perturb<T: Scalar>(set: &EmbeddingSet<T>, sigma: f64, seed: u64) -> Result<EmbeddingSet<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "sigma {sigma} is not a finite non-negative number"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = set
        .as_slice()
        .iter()
        .map(|v| T::lit(v.as_f64() + sigma * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    EmbeddingSet::new(set.ids().to_vec(), set.dim(), data)
}

fn unit(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n.is_nan() || n <= 1e-12 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

//! Threshold-graph clustering of training embeddings into confident pseudo-classes.

use std::collections::{BTreeMap, HashMap};

use petgraph::unionfind::UnionFind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::search::NORM_TOLERANCE;

/// Clusters of size at least 10 are not considered confident.
pub const DEFAULT_MAX_CLUSTER_SIZE: usize = 10;
pub const DEFAULT_TARGET_CLASSES: usize = 100_000;

/// Disjoint clusters plus the ids left out of every cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    #[serde(rename = "threshold")]
    pub similarity_threshold: f64,
    pub clusters: Vec<Vec<String>>,
    pub pool: Vec<String>,
}

impl ClusterResult {
    pub fn n_ids(&self) -> usize {
        self.pool.len() + self.clusters.iter().map(Vec::len).sum::<usize>()
    }

    pub fn clustered_images(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// Checks disjointness and that every cluster has at least two members.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.clusters {
            if c.len() < 2 {
                return Err(Error::InvalidParams(format!("cluster of size {}", c.len())));
            }
        }
        for id in self.clusters.iter().flatten().chain(&self.pool) {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(())
    }
}

/// Connected components of the graph linking every pair with cosine similarity
/// at or above `threshold`.
///
/// Components of two or more become clusters, members sorted ascending and
/// clusters ordered by their smallest member. Singletons form the pool.
pub fn cluster_features<T: Scalar>(set: &EmbeddingSet<T>, threshold: f64) -> Result<ClusterResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParams(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    set.check_normalized(NORM_TOLERANCE)?;
    let n = set.len();
    let t = T::lit(threshold);
    let edges: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = set.row(i);
            (i + 1..n)
                .filter(|&j| scalar::dot(a, set.row(j)) >= t)
                .collect()
        })
        .collect();
    let mut uf = UnionFind::<usize>::new(n);
    for (i, js) in edges.iter().enumerate() {
        for &j in js {
            uf.union(i, j);
        }
    }
    let mut components: HashMap<usize, Vec<String>> = HashMap::new();
    for i in 0..n {
        components
            .entry(uf.find(i))
            .or_default()
            .push(set.ids()[i].clone());
    }
    let mut clusters = Vec::new();
    let mut pool = Vec::new();
    for (_, mut members) in components {
        if members.len() == 1 {
            pool.append(&mut members);
        } else {
            members.sort_unstable();
            clusters.push(members);
        }
    }
    clusters.sort_unstable_by(|a, b| a[0].cmp(&b[0]));
    pool.sort_unstable();
    Ok(ClusterResult {
        similarity_threshold: threshold,
        clusters,
        pool,
    })
}

/// Keeps clusters strictly smaller than `max_size`; members of the rest join the pool.
pub fn filter_confident(result: &ClusterResult, max_size: usize) -> ClusterResult {
    let mut pool = result.pool.clone();
    let mut clusters = Vec::new();
    for c in &result.clusters {
        if c.len() < max_size {
            clusters.push(c.clone());
        } else {
            pool.extend(c.iter().cloned());
        }
    }
    pool.sort_unstable();
    ClusterResult {
        similarity_threshold: result.similarity_threshold,
        clusters,
        pool,
    }
}

/// Class labels for the training subset: one class per kept cluster, topped up
/// with single-image classes drawn from the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelAssignment {
    pub class_of: BTreeMap<String, usize>,
    pub n_classes: usize,
    pub n_cluster_classes: usize,
    pub n_singleton_classes: usize,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub class: usize,
}

impl PseudoLabelAssignment {
    /// Records ordered by class, then id.
    pub fn records(&self) -> Vec<LabelRecord> {
        let mut out: Vec<LabelRecord> = self
            .class_of
            .iter()
            .map(|(id, &class)| LabelRecord {
                id: id.clone(),
                class,
            })
            .collect();
        out.sort_by(|a, b| a.class.cmp(&b.class).then_with(|| a.id.cmp(&b.id)));
        out
    }
}

/// Cluster `i` becomes class `i`; the remaining `target_classes - clusters`
/// classes hold one pool image each, sampled uniformly without replacement.
pub fn assign_pseudo_labels(
    kept: &ClusterResult,
    target_classes: usize,
    seed: u64,
) -> Result<PseudoLabelAssignment> {
    let n_cluster_classes = kept.clusters.len();
    if target_classes < n_cluster_classes {
        return Err(Error::TargetBelowClusterCount {
            target: target_classes,
            clusters: n_cluster_classes,
        });
    }
    let needed = target_classes - n_cluster_classes;
    if kept.pool.len() < needed {
        return Err(Error::PoolTooSmall {
            pool: kept.pool.len(),
            needed,
        });
    }
    let mut class_of = BTreeMap::new();
    for (class, members) in kept.clusters.iter().enumerate() {
        for id in members {
            if class_of.insert(id.clone(), class).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, kept.pool.len(), needed);
    for (offset, i) in picks.into_iter().enumerate() {
        let id = &kept.pool[i];
        if class_of
            .insert(id.clone(), n_cluster_classes + offset)
            .is_some()
        {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(PseudoLabelAssignment {
        n_images: kept.clustered_images() + needed,
        class_of,
        n_classes: target_classes,
        n_cluster_classes,
        n_singleton_classes: needed,
    })
}

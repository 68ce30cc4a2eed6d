//! Score-level maximum ensemble and rank-level voting ensemble.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::scalar::Scalar;
use crate::search::{self, DistanceMatrix, Orientation, RankingList};

pub const DEFAULT_DEPTH: usize = 10;

/// Per-row min-max similarity: the row minimum maps to 1, the maximum to 0.
/// Constant rows map to all zeros.
pub fn row_similarity<T: Scalar>(row: &[T]) -> Vec<T> {
    let (lo, hi) = row
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    if span.is_nan() || span <= T::zero() {
        return vec![T::zero(); row.len()];
    }
    row.iter().map(|&v| (hi - v) / span).collect()
}

/// Fuses aligned distance matrices by the elementwise maximum of their
/// row-normalized similarities, returned as the distance `1 - s_max`.
pub fn max_ensemble<T: Scalar>(matrices: &[DistanceMatrix<T>]) -> Result<DistanceMatrix<T>> {
    let Some(first) = matrices.first() else {
        return Err(Error::InvalidParams(
            "maximum ensemble needs at least one matrix".into(),
        ));
    };
    for (i, m) in matrices.iter().enumerate().skip(1) {
        if m.n_queries() != first.n_queries() || m.n_gallery() != first.n_gallery() {
            return Err(Error::ShapeMismatch(format!(
                "member {i} is {}x{}, member 0 is {}x{}",
                m.n_queries(),
                m.n_gallery(),
                first.n_queries(),
                first.n_gallery()
            )));
        }
        if m.query_ids() != first.query_ids() || m.gallery_ids() != first.gallery_ids() {
            return Err(Error::IdMismatch(format!(
                "member {i} ids differ from member 0"
            )));
        }
    }
    let rows: Vec<Vec<T>> = (0..first.n_queries())
        .into_par_iter()
        .map(|q| {
            let mut best = vec![T::zero(); first.n_gallery()];
            for m in matrices {
                for (b, s) in best.iter_mut().zip(row_similarity(m.row(q))) {
                    *b = b.max(s);
                }
            }
            best.into_iter().map(|s| T::one() - s).collect()
        })
        .collect();
    DistanceMatrix::new(
        first.query_ids().to_vec(),
        first.gallery_ids().to_vec(),
        rows.concat(),
    )
}

/// One model's ranking lists; a query may be absent but never listed twice.
#[derive(Debug, Clone)]
pub struct Ballots<T = f32> {
    pub label: String,
    pub lists: Vec<RankingList<T>>,
}

/// Borda vote over per-model top-`k` lists.
///
/// Rank `r` (1-based) earns `k + 1 - r` points. Items are ordered by points,
/// then by how many models listed them, then by ascending id. Scores in the
/// output are the point totals, higher is better.
pub fn vote_ensemble<T: Scalar>(models: &[Ballots<T>], k: usize) -> Result<Vec<RankingList<T>>> {
    if models.is_empty() {
        return Err(Error::InvalidParams(
            "voting needs at least one model".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidParams("k must be at least 1".into()));
    }
    let mut per_query: BTreeMap<&str, Vec<&RankingList<T>>> = BTreeMap::new();
    for model in models {
        let mut seen = HashSet::new();
        for list in &model.lists {
            if !seen.insert(list.query_id.as_str()) {
                return Err(Error::DuplicateBallot {
                    model: model.label.clone(),
                    query: list.query_id.clone(),
                });
            }
            per_query.entry(&list.query_id).or_default().push(list);
        }
    }
    Ok(per_query
        .into_par_iter()
        .map(|(query, lists)| tally(query, &lists, k))
        .collect())
}

fn tally<T: Scalar>(query: &str, lists: &[&RankingList<T>], k: usize) -> RankingList<T> {
    let mut points: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for list in lists {
        for (rank, (gallery, _)) in list.entries.iter().take(k).enumerate() {
            let e = points.entry(gallery).or_default();
            e.0 += (k - rank) as u64;
            e.1 += 1;
        }
    }
    let mut items: Vec<(&str, u64, u64)> =
        points.into_iter().map(|(g, (p, c))| (g, p, c)).collect();
    items.sort_by_key(|&(g, p, c)| (Reverse(p), Reverse(c), g));
    items.truncate(k);
    RankingList {
        query_id: query.to_owned(),
        entries: items
            .into_iter()
            .map(|(g, p, _)| (g.to_owned(), T::lit(p as f64)))
            .collect(),
        k,
        orientation: Orientation::Similarity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMethod {
    Maximum,
    Voting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub label: String,
    pub path: PathBuf,
}

/// Which models to combine and how. Maximum members point at distance
/// matrix files, voting members at ranking-list files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub method: EnsembleMethod,
    #[serde(default = "default_depth")]
    pub k: usize,
    pub members: Vec<EnsembleMember>,
}

fn default_depth() -> usize {
    DEFAULT_DEPTH
}

impl EnsembleSpec {
    /// Reads a spec; relative member paths resolve against the spec's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: EnsembleSpec = fsutil::read_json(path, "ensemble spec")?;
        let base = path.parent().unwrap_or(Path::new(""));
        for m in &mut spec.members {
            if m.path.is_relative() {
                m.path = base.join(&m.path);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::ManifestInvalid("ensemble has no members".into()));
        }
        if self.k == 0 {
            return Err(Error::ManifestInvalid(
                "ensemble depth k must be at least 1".into(),
            ));
        }
        let mut labels = BTreeSet::new();
        for m in &self.members {
            if !labels.insert(&m.label) {
                return Err(Error::ManifestInvalid(format!(
                    "duplicate member label {:?}",
                    m.label
                )));
            }
        }
        Ok(())
    }

    /// Loads every member and produces the fused top-`k` lists.
    pub fn run(&self) -> Result<Vec<RankingList<f32>>> {
        self.validate()?;
        match self.method {
            EnsembleMethod::Voting => {
                let ballots = self
                    .members
                    .iter()
                    .map(|m| {
                        Ok(Ballots {
                            label: m.label.clone(),
                            lists: search::load_rankings(&m.path)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                vote_ensemble(&ballots, self.k)
            }
            EnsembleMethod::Maximum => {
                let matrices = self
                    .members
                    .iter()
                    .map(|m| DistanceMatrix::load(&m.path))
                    .collect::<Result<Vec<_>>>()?;
                search::topk(&max_ensemble(&matrices)?, self.k)
            }
        }
    }
}

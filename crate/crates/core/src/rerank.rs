//! k-reciprocal re-ranking with a Jaccard distance over expanded neighbor sets,
//! split so that any subset of queries can be re-ranked independently.
//!
//! The probe set is the concatenation of queries and gallery. For every probe
//! the shared precomputation ([`RerankContext::build`]) derives:
//!
//! * its `k1` nearest neighbors (self excluded, ties by probe index),
//! * the mutual neighbor set `R(p, k1)` and its expansion with every
//!   `R(c, ceil(k1/2))` that overlaps `R(p, k1)` in at least two thirds of its members,
//! * a sparse weight vector `exp(-d)` over the expanded set, averaged over the
//!   probe and its `k2 - 1` nearest neighbors.
//!
//! Query rows are then scored against every gallery item by weighted Jaccard
//! distance blended with the original distance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::scalar::Scalar;
use crate::search::{self, DistanceMatrix, RankingList, NORM_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankParams {
    /// Reciprocal neighborhood size.
    pub k1: usize,
    /// Local query-expansion size, counting the probe itself.
    pub k2: usize,
    /// Weight of the original distance in the final blend.
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.k2 > self.k1 {
            return Err(Error::InvalidParams(format!(
                "need 1 <= k2 <= k1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParams(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }

    /// `ceil(k1 / 2)`, the neighborhood size used when expanding reciprocal sets.
    pub fn half_k1(&self) -> usize {
        self.k1.div_ceil(2)
    }
}

/// Sparse vector: strictly ascending column indices with their weights.
pub type SparseRow<T> = Vec<(usize, T)>;

/// Neighbor structures over the joint probe set, shared by every shard.
#[derive(Debug, Clone)]
pub struct RerankContext<T = f32> {
    params: RerankParams,
    n_queries: usize,
    query_ids: Vec<String>,
    gallery_ids: Vec<String>,
    /// Probe × probe original distances.
    dist: Vec<T>,
    /// Per probe, its `k1` nearest other probes, nearest first.
    knn: Vec<Vec<usize>>,
    /// Per probe, the locally expanded weight vector.
    expanded: Vec<SparseRow<T>>,
    /// Column → (gallery offset, weight) for the gallery part of `expanded`.
    inverted: Vec<Vec<(usize, T)>>,
    /// Weight sum of each gallery vector in `expanded`.
    gallery_mass: Vec<T>,
}

impl<T: Scalar> RerankContext<T> {
    pub fn build(
        queries: &EmbeddingSet<T>,
        gallery: &EmbeddingSet<T>,
        params: RerankParams,
    ) -> Result<Self> {
        params.validate()?;
        if queries.dim() != gallery.dim() {
            return Err(Error::DimMismatch {
                left: queries.dim(),
                right: gallery.dim(),
            });
        }
        queries.check_normalized(NORM_TOLERANCE)?;
        gallery.check_normalized(NORM_TOLERANCE)?;
        let nq = queries.len();
        let n = nq + gallery.len();
        if n <= params.k1 {
            return Err(Error::TooFewItems { n, k1: params.k1 });
        }

        let probes: Vec<&[T]> = queries.rows().chain(gallery.rows()).collect();
        let mut dist = vec![T::zero(); n * n];
        dist.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
            for (o, p) in out.iter_mut().zip(&probes) {
                *o = search::cosine_distance(probes[i], p);
            }
        });

        let k1 = params.k1;
        let knn: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|i| nearest_others(&dist[i * n..(i + 1) * n], i, k1))
            .collect();

        let graph = NeighborGraph { knn: &knn };
        let half = params.half_k1();
        let r_full: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|i| graph.reciprocal(i, k1))
            .collect();
        let r_half: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|i| graph.reciprocal(i, half))
            .collect();

        let weights: Vec<SparseRow<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let set = expand(&r_full[i], &r_half);
                set.into_iter()
                    .map(|g| (g, (-dist[i * n + g]).exp()))
                    .collect()
            })
            .collect();

        let expanded: Vec<SparseRow<T>> = (0..n)
            .into_par_iter()
            .map_init(
                || vec![T::zero(); n],
                |acc, i| {
                    let mut members: Vec<usize> = knn[i][..params.k2 - 1].to_vec();
                    members.push(i);
                    members.sort_unstable();
                    average_rows(&members, &weights, acc)
                },
            )
            .collect();

        let mut inverted: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        for (g, row) in expanded[nq..].iter().enumerate() {
            for &(j, w) in row {
                inverted[j].push((g, w));
            }
        }
        let gallery_mass = expanded[nq..].iter().map(|r| mass(r)).collect();

        Ok(Self {
            params,
            n_queries: nq,
            query_ids: queries.ids().to_vec(),
            gallery_ids: gallery.ids().to_vec(),
            dist,
            knn,
            expanded,
            inverted,
            gallery_mass,
        })
    }

    pub fn params(&self) -> RerankParams {
        self.params
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn query_ids(&self) -> &[String] {
        &self.query_ids
    }

    pub fn gallery_ids(&self) -> &[String] {
        &self.gallery_ids
    }

    fn n_probes(&self) -> usize {
        self.knn.len()
    }

    pub fn neighbors(&self) -> NeighborGraph<'_> {
        NeighborGraph { knn: &self.knn }
    }

    /// The expanded weight vector of a probe (queries first, then gallery).
    pub fn expanded_weights(&self, probe: usize) -> &[(usize, T)] {
        &self.expanded[probe]
    }

    /// Original cosine distance between query `q` and every gallery item.
    pub fn original_row(&self, q: usize) -> &[T] {
        let n = self.n_probes();
        &self.dist[q * n + self.n_queries..(q + 1) * n]
    }

    /// Weighted Jaccard distance between query `q` and every gallery item.
    ///
    /// Pairs whose weight vectors are both empty get distance one.
    pub fn jaccard_row(&self, q: usize) -> Vec<T> {
        let probe = &self.expanded[q];
        let mut overlap = vec![T::zero(); self.gallery_ids.len()];
        for &(j, a) in probe {
            for &(g, b) in &self.inverted[j] {
                overlap[g] = overlap[g] + a.min(b);
            }
        }
        let query_mass = mass(probe);
        overlap
            .iter()
            .zip(&self.gallery_mass)
            .map(|(&min_sum, &gm)| {
                let max_sum = query_mass + gm - min_sum;
                if max_sum > T::zero() {
                    (T::one() - min_sum / max_sum).max(T::zero()).min(T::one())
                } else {
                    T::one()
                }
            })
            .collect()
    }

    /// Final blended distance of query `q` to every gallery item.
    pub fn rerank_row(&self, q: usize) -> Vec<T> {
        let lambda = T::lit(self.params.lambda);
        let keep = T::one() - lambda;
        self.jaccard_row(q)
            .into_iter()
            .zip(self.original_row(q))
            .map(|(dj, &d)| keep * dj + lambda * d)
            .collect()
    }

    /// Re-ranked top-`k` lists for the given query indices, in the given order.
    pub fn rerank_topk(&self, queries: &[usize], k: usize) -> Result<Vec<RankingList<T>>> {
        if k == 0 {
            return Err(Error::InvalidParams("k must be at least 1".into()));
        }
        if let Some(&q) = queries.iter().find(|&&q| q >= self.n_queries) {
            return Err(Error::InvalidParams(format!(
                "query index {q} out of range"
            )));
        }
        Ok(queries
            .par_iter()
            .map(|&q| {
                search::rank_row(
                    &self.query_ids[q],
                    &self.rerank_row(q),
                    &self.gallery_ids,
                    k,
                )
            })
            .collect())
    }

    fn matrix_from_rows(&self, row: impl Fn(usize) -> Vec<T> + Sync + Send) -> DistanceMatrix<T> {
        let rows: Vec<Vec<T>> = (0..self.n_queries).into_par_iter().map(row).collect();
        DistanceMatrix::new(
            self.query_ids.clone(),
            self.gallery_ids.clone(),
            rows.concat(),
        )
        .expect("re-ranked distances are finite and non-negative")
    }

    pub fn rerank_matrix(&self) -> DistanceMatrix<T> {
        self.matrix_from_rows(|q| self.rerank_row(q))
    }

    pub fn jaccard_matrix(&self) -> DistanceMatrix<T> {
        self.matrix_from_rows(|q| self.jaccard_row(q))
    }
}

fn mass<T: Scalar>(row: &[(usize, T)]) -> T {
    row.iter().fold(T::zero(), |s, &(_, w)| s + w)
}

/// The `k` nearest probes to `i` other than `i` itself, ties broken by index.
fn nearest_others<T: Scalar>(row: &[T], i: usize, k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| row[*a].partial_cmp(&row[*b]).unwrap().then(a.cmp(b));
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

fn expand(core: &[usize], r_half: &[Vec<usize>]) -> Vec<usize> {
    let mut set: Vec<usize> = core.to_vec();
    for &c in core {
        let cand = &r_half[c];
        let overlap = cand
            .iter()
            .filter(|g| core.binary_search(g).is_ok())
            .count();
        if 3 * overlap >= 2 * cand.len() {
            set.extend_from_slice(cand);
        }
    }
    set.sort_unstable();
    set.dedup();
    set
}

/// Mean of the sparse rows at `members`, accumulated in the order given.
fn average_rows<T: Scalar>(
    members: &[usize],
    rows: &[SparseRow<T>],
    acc: &mut [T],
) -> SparseRow<T> {
    let mut touched = Vec::new();
    for &m in members {
        for &(j, w) in &rows[m] {
            if acc[j] == T::zero() {
                touched.push(j);
            }
            acc[j] = acc[j] + w;
        }
    }
    touched.sort_unstable();
    let count = T::lit(members.len() as f64);
    touched
        .into_iter()
        .map(|j| {
            let v = acc[j] / count;
            acc[j] = T::zero();
            (j, v)
        })
        .collect()
}

/// Nearest-neighbor lists over the joint probe set.
#[derive(Debug, Clone, Copy)]
pub struct NeighborGraph<'a> {
    knn: &'a [Vec<usize>],
}

impl NeighborGraph<'_> {
    /// `N(p, k)`: the `k` nearest other probes, nearest first. `k` may not exceed `k1`.
    pub fn neighbors(&self, p: usize, k: usize) -> &[usize] {
        &self.knn[p][..k]
    }

    /// `R(p, k)`: members of `N(p, k)` that also have `p` in their own `N(., k)`, ascending.
    pub fn reciprocal(&self, p: usize, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .neighbors(p, k)
            .iter()
            .copied()
            .filter(|&g| self.neighbors(g, k).contains(&p))
            .collect();
        out.sort_unstable();
        out
    }
}

/// Re-ranked query × gallery distances.
pub fn kreciprocal_rerank<T: Scalar>(
    queries: &EmbeddingSet<T>,
    gallery: &EmbeddingSet<T>,
    params: RerankParams,
) -> Result<DistanceMatrix<T>> {
    Ok(RerankContext::build(queries, gallery, params)?.rerank_matrix())
}

/// The pure weighted-Jaccard component of [`kreciprocal_rerank`].
pub fn jaccard_distance<T: Scalar>(
    queries: &EmbeddingSet<T>,
    gallery: &EmbeddingSet<T>,
    params: RerankParams,
) -> Result<DistanceMatrix<T>> {
    Ok(RerankContext::build(queries, gallery, params)?.jaccard_matrix())
}

/// How queries are split across workers: query `i` goes to shard `i mod n_shards`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub n_queries: usize,
    pub n_shards: usize,
    pub assignment: String,
    pub result_files: Vec<String>,
    /// Query indices held by each shard.
    pub shards: Vec<Vec<usize>>,
    /// Query ids in index order, used to name missing queries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_ids: Option<Vec<String>>,
}

pub const MODULO_ASSIGNMENT: &str = "modulo";

pub fn shard_file_name(shard: usize) -> String {
    format!("shard_{shard}.jsonl")
}

pub fn build_shard_manifest(n_queries: usize, n_shards: usize) -> Result<ShardManifest> {
    if n_shards == 0 {
        return Err(Error::InvalidParams("n_shards must be at least 1".into()));
    }
    Ok(ShardManifest {
        n_queries,
        n_shards,
        assignment: MODULO_ASSIGNMENT.to_owned(),
        result_files: (0..n_shards).map(shard_file_name).collect(),
        shards: (0..n_shards)
            .map(|s| (s..n_queries).step_by(n_shards).collect())
            .collect(),
        query_ids: None,
    })
}

impl ShardManifest {
    pub fn with_query_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_queries {
            return Err(Error::ManifestInvalid(format!(
                "{} query ids for {} queries",
                ids.len(),
                self.n_queries
            )));
        }
        self.query_ids = Some(ids);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = build_shard_manifest(self.n_queries, self.n_shards)
            .map_err(|e| Error::ManifestInvalid(e.to_string()))?;
        if self.assignment != MODULO_ASSIGNMENT {
            return Err(Error::ManifestInvalid(format!(
                "unknown assignment {:?}",
                self.assignment
            )));
        }
        if self.shards != expected.shards || self.result_files.len() != self.n_shards {
            return Err(Error::ManifestInvalid(
                "shard table does not follow modulo assignment".into(),
            ));
        }
        if self
            .query_ids
            .as_ref()
            .is_some_and(|ids| ids.len() != self.n_queries)
        {
            return Err(Error::ManifestInvalid(
                "query id list has the wrong length".into(),
            ));
        }
        Ok(())
    }

    pub fn shard_queries(&self, shard: usize) -> &[usize] {
        &self.shards[shard]
    }

    pub fn result_path(&self, job_dir: &Path, shard: usize) -> PathBuf {
        job_dir.join(&self.result_files[shard])
    }

    fn query_name(&self, q: usize) -> String {
        match &self.query_ids {
            Some(ids) => ids[q].clone(),
            None => q.to_string(),
        }
    }
}

/// 64-bit FNV-1a of a shard payload.
pub fn payload_checksum(payload: &[u8]) -> u64 {
    use std::hash::Hasher;
    let mut h = FnvHasher::default();
    h.write(payload);
    h.finish()
}

#[derive(Serialize, Deserialize)]
struct ChecksumLine {
    checksum: String,
}

/// Ranking lists as JSON Lines followed by a `{"checksum": hex}` trailer.
pub fn encode_shard<T: Scalar>(lists: &[RankingList<T>]) -> Vec<u8> {
    let mut out = search::encode_rankings(lists);
    let trailer = ChecksumLine {
        checksum: format!("{:016x}", payload_checksum(&out)),
    };
    serde_json::to_writer(&mut out, &trailer).expect("serializable trailer");
    out.push(b'\n');
    out
}

/// Why a shard's queries are absent from merged results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingReason {
    /// No result file under the final name.
    Absent,
    /// The file is present but its payload fails the checksum.
    Checksum,
    /// The checksum holds but the records do not match the shard's queries.
    Mismatch,
}

/// Decodes a shard file, checking the trailer against the payload.
pub fn decode_shard<T: Scalar>(
    bytes: &[u8],
) -> std::result::Result<Vec<RankingList<T>>, MissingReason> {
    let body = bytes.strip_suffix(b"\n").ok_or(MissingReason::Checksum)?;
    let split = body.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let (payload, trailer) = body.split_at(split);
    let trailer: ChecksumLine =
        serde_json::from_slice(trailer).map_err(|_| MissingReason::Checksum)?;
    let recorded =
        u64::from_str_radix(&trailer.checksum, 16).map_err(|_| MissingReason::Checksum)?;
    if recorded != payload_checksum(payload) {
        return Err(MissingReason::Checksum);
    }
    let text = std::str::from_utf8(payload).map_err(|_| MissingReason::Mismatch)?;
    text.lines()
        .map(|l| search::decode_ranking_line(l).map_err(|_| MissingReason::Mismatch))
        .collect()
}

/// Queries without merged results and why.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingReport {
    pub missing_queries: Vec<String>,
    pub reasons: BTreeMap<usize, MissingReason>,
}

impl MissingReport {
    pub fn is_empty(&self) -> bool {
        self.reasons.is_empty()
    }

    pub fn missing_shards(&self) -> Vec<usize> {
        self.reasons.keys().copied().collect()
    }
}

/// Collects every readable shard file of a job, in query-index order.
///
/// Absent or corrupt shards are reported, never fatal.
pub fn merge_shard_results<T: Scalar>(
    manifest: &ShardManifest,
    job_dir: &Path,
) -> Result<(Vec<RankingList<T>>, MissingReport)> {
    manifest.validate()?;
    let mut by_query: Vec<Option<RankingList<T>>> = vec![None; manifest.n_queries];
    let mut report = MissingReport::default();
    for shard in 0..manifest.n_shards {
        let path = manifest.result_path(job_dir, shard);
        let outcome = match std::fs::read(&path) {
            Ok(bytes) => {
                decode_shard::<T>(&bytes).and_then(|lists| check_shard(manifest, shard, lists))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(MissingReason::Absent),
            Err(e) => return Err(Error::io(path, e)),
        };
        match outcome {
            Ok(lists) => {
                for (&q, list) in manifest.shard_queries(shard).iter().zip(lists) {
                    by_query[q] = Some(list);
                }
            }
            Err(reason) => {
                report.reasons.insert(shard, reason);
            }
        }
    }
    let mut results = Vec::with_capacity(manifest.n_queries);
    for (q, slot) in by_query.into_iter().enumerate() {
        match slot {
            Some(list) => results.push(list),
            None => report.missing_queries.push(manifest.query_name(q)),
        }
    }
    Ok((results, report))
}

fn check_shard<T: Scalar>(
    manifest: &ShardManifest,
    shard: usize,
    lists: Vec<RankingList<T>>,
) -> std::result::Result<Vec<RankingList<T>>, MissingReason> {
    let expected = manifest.shard_queries(shard);
    if lists.len() != expected.len() {
        return Err(MissingReason::Mismatch);
    }
    if manifest.query_ids.is_some()
        && !lists
            .iter()
            .zip(expected)
            .all(|(l, &q)| l.query_id == manifest.query_name(q))
    {
        return Err(MissingReason::Mismatch);
    }
    Ok(lists)
}

/// Writes one shard's results under a temp name and renames them into place.
pub fn write_shard_file<T: Scalar>(path: &Path, lists: &[RankingList<T>]) -> Result<()> {
    fsutil::write_atomic(path, &encode_shard(lists))
}

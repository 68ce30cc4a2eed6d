//! Exact cosine search, top-K extraction and crop-group aggregation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::scalar::{self, Scalar};

/// Row norms must be within this of one before cosine distances are taken.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Which direction of a score is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Lower is better.
    #[default]
    Distance,
    /// Higher is better.
    Similarity,
}

/// Dense query × gallery distances, lower is better.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix<T = f32> {
    query_ids: Vec<String>,
    gallery_ids: Vec<String>,
    values: Vec<T>,
}

impl<T: Scalar> DistanceMatrix<T> {
    pub fn new(query_ids: Vec<String>, gallery_ids: Vec<String>, values: Vec<T>) -> Result<Self> {
        if values.len() != query_ids.len() * gallery_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} x {}",
                values.len(),
                query_ids.len(),
                gallery_ids.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(Error::InvalidParams(format!(
                "distance {v} is negative or not finite"
            )));
        }
        Ok(Self {
            query_ids,
            gallery_ids,
            values,
        })
    }

    pub fn query_ids(&self) -> &[String] {
        &self.query_ids
    }

    pub fn gallery_ids(&self) -> &[String] {
        &self.gallery_ids
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn n_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn row(&self, q: usize) -> &[T] {
        let g = self.gallery_ids.len();
        &self.values[q * g..(q + 1) * g]
    }

    pub fn get(&self, q: usize, g: usize) -> T {
        self.values[q * self.gallery_ids.len() + g]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(
            path,
            &serde_json::to_vec(&self.to_wire()).expect("serializable"),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let wire: MatrixWire<T> = fsutil::read_json(path, "distance matrix")?;
        if wire.orientation != Orientation::Distance {
            return Err(Error::malformed(
                path,
                "distance matrix",
                "orientation must be \"distance\"",
            ));
        }
        if wire.values.len() != wire.query_ids.len()
            || wire
                .values
                .iter()
                .any(|r| r.len() != wire.gallery_ids.len())
        {
            return Err(Error::malformed(
                path,
                "distance matrix",
                "values do not match the id lists",
            ));
        }
        Self::new(wire.query_ids, wire.gallery_ids, wire.values.concat())
    }

    fn to_wire(&self) -> MatrixWire<T> {
        MatrixWire {
            orientation: Orientation::Distance,
            query_ids: self.query_ids.clone(),
            gallery_ids: self.gallery_ids.clone(),
            values: (0..self.n_queries())
                .map(|q| self.row(q).to_vec())
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixWire<T> {
    orientation: Orientation,
    query_ids: Vec<String>,
    gallery_ids: Vec<String>,
    values: Vec<Vec<T>>,
}

/// Ordered best-first results for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingList<T = f32> {
    pub query_id: String,
    pub entries: Vec<(String, T)>,
    pub k: usize,
    pub orientation: Orientation,
}

#[derive(Serialize, Deserialize)]
struct RankingWire<T> {
    query: String,
    ranks: Vec<(String, T)>,
    orientation: Orientation,
}

impl<T: Scalar> RankingList<T> {
    pub fn gallery_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(g, _)| g.as_str())
    }

    /// Checks length, uniqueness and score order.
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() > self.k {
            return Err(Error::InvalidParams(format!(
                "query {:?}: {} entries exceed k={}",
                self.query_id,
                self.entries.len(),
                self.k
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (g, _) in &self.entries {
            if !seen.insert(g) {
                return Err(Error::DuplicateId(g.clone()));
            }
        }
        let ordered = self.entries.windows(2).all(|w| match self.orientation {
            Orientation::Distance => w[0].1 <= w[1].1,
            Orientation::Similarity => w[0].1 >= w[1].1,
        });
        if !ordered {
            return Err(Error::InvalidParams(format!(
                "query {:?}: entries are not sorted best-first",
                self.query_id
            )));
        }
        Ok(())
    }
}

/// Serializes lists as JSON Lines, one query per line.
pub fn encode_rankings<T: Scalar>(lists: &[RankingList<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    for l in lists {
        let rec = RankingWire {
            query: l.query_id.clone(),
            ranks: l.entries.clone(),
            orientation: l.orientation,
        };
        serde_json::to_writer(&mut out, &rec).expect("serializable ranking");
        out.push(b'\n');
    }
    out
}

/// Parses one JSON Lines record; `k` is taken to be the list length.
pub fn decode_ranking_line<T: Scalar>(line: &str) -> serde_json::Result<RankingList<T>> {
    let w: RankingWire<T> = serde_json::from_str(line)?;
    Ok(RankingList {
        k: w.ranks.len(),
        query_id: w.query,
        entries: w.ranks,
        orientation: w.orientation,
    })
}

pub fn save_rankings<T: Scalar>(lists: &[RankingList<T>], path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode_rankings(lists))
}

pub fn load_rankings<T: Scalar>(path: &Path) -> Result<Vec<RankingList<T>>> {
    let text = String::from_utf8(fsutil::read(path)?)
        .map_err(|e| Error::malformed(path, "ranking list", e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            decode_ranking_line(l)
                .map_err(|e| Error::malformed(path, "ranking list", format!("line {}: {e}", n + 1)))
        })
        .collect()
}

/// Cosine distance `1 - <q, g>` for every query/gallery pair, clamped at zero.
pub fn pairwise_cosine_distance<T: Scalar>(
    queries: &EmbeddingSet<T>,
    gallery: &EmbeddingSet<T>,
) -> Result<DistanceMatrix<T>> {
    check_pair(queries, gallery)?;
    let ng = gallery.len();
    let mut values = vec![T::zero(); queries.len() * ng];
    if ng > 0 {
        values
            .par_chunks_mut(ng)
            .zip(queries.rows().collect::<Vec<_>>())
            .for_each(|(out, q)| fill_distances(q, gallery, out));
    }
    Ok(DistanceMatrix {
        query_ids: queries.ids().to_vec(),
        gallery_ids: gallery.ids().to_vec(),
        values,
    })
}

fn check_pair<T: Scalar>(queries: &EmbeddingSet<T>, gallery: &EmbeddingSet<T>) -> Result<()> {
    if queries.dim() != gallery.dim() {
        return Err(Error::DimMismatch {
            left: queries.dim(),
            right: gallery.dim(),
        });
    }
    queries.check_normalized(NORM_TOLERANCE)?;
    gallery.check_normalized(NORM_TOLERANCE)
}

#[inline]
pub(crate) fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    (T::one() - scalar::dot(a, b)).max(T::zero())
}

fn fill_distances<T: Scalar>(q: &[T], gallery: &EmbeddingSet<T>, out: &mut [T]) {
    for (o, g) in out.iter_mut().zip(gallery.rows()) {
        *o = cosine_distance(q, g);
    }
}

/// Orders candidate indices by ascending score, ties by ascending id.
fn by_score_then_id<'a, T: Scalar>(
    scores: &'a [T],
    ids: &'a [String],
) -> impl Fn(&usize, &usize) -> Ordering + 'a {
    move |&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a].cmp(&ids[b]))
    }
}

/// The `k` best (smallest) entries of one row, best first.
pub(crate) fn rank_row<T: Scalar>(
    query_id: &str,
    scores: &[T],
    ids: &[String],
    k: usize,
) -> RankingList<T> {
    let cmp = by_score_then_id(scores, ids);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    RankingList {
        query_id: query_id.to_owned(),
        entries: idx
            .into_iter()
            .map(|i| (ids[i].clone(), scores[i]))
            .collect(),
        k,
        orientation: Orientation::Distance,
    }
}

/// Per query, the `k` nearest gallery ids; ties go to the lexicographically smaller id.
pub fn topk<T: Scalar>(matrix: &DistanceMatrix<T>, k: usize) -> Result<Vec<RankingList<T>>> {
    if k == 0 {
        return Err(Error::InvalidParams("k must be at least 1".into()));
    }
    Ok((0..matrix.n_queries())
        .into_par_iter()
        .map(|q| rank_row(&matrix.query_ids[q], matrix.row(q), &matrix.gallery_ids, k))
        .collect())
}

/// `topk(pairwise_cosine_distance(queries, gallery), k)` without materializing the matrix.
pub fn knn_search<T: Scalar>(
    queries: &EmbeddingSet<T>,
    gallery: &EmbeddingSet<T>,
    k: usize,
) -> Result<Vec<RankingList<T>>> {
    if k == 0 {
        return Err(Error::InvalidParams("k must be at least 1".into()));
    }
    check_pair(queries, gallery)?;
    Ok((0..queries.len())
        .into_par_iter()
        .map_init(
            || vec![T::zero(); gallery.len()],
            |buf, q| {
                fill_distances(queries.row(q), gallery, buf);
                rank_row(&queries.ids()[q], buf, gallery.ids(), k)
            },
        )
        .collect())
}

/// How gallery images were split into locally matched parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropScheme {
    Index5Crop,
    Index6Crop,
    Custom,
}

impl CropScheme {
    pub fn crops_per_parent(self) -> Option<usize> {
        match self {
            CropScheme::Index5Crop => Some(5),
            CropScheme::Index6Crop => Some(6),
            CropScheme::Custom => None,
        }
    }
}

/// Membership of gallery crop variants in their parent images.
#[derive(Debug, Clone, PartialEq)]
pub struct CropGroupMap {
    scheme: CropScheme,
    groups: BTreeMap<String, Vec<String>>,
    crop_to_parent: HashMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct CropMapWire {
    scheme: CropScheme,
    groups: BTreeMap<String, Vec<String>>,
}

impl CropGroupMap {
    pub fn new(scheme: CropScheme, groups: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut crop_to_parent = HashMap::new();
        for (parent, crops) in &groups {
            if crops.is_empty() {
                return Err(Error::InvalidCropMap(format!(
                    "parent {parent:?} has no crops"
                )));
            }
            if let Some(n) = scheme.crops_per_parent() {
                if crops.len() != n {
                    return Err(Error::InvalidCropMap(format!(
                        "parent {parent:?} has {} crops, {scheme:?} requires {n}",
                        crops.len()
                    )));
                }
            }
            for c in crops {
                if let Some(prev) = crop_to_parent.insert(c.clone(), parent.clone()) {
                    return Err(Error::InvalidCropMap(format!(
                        "crop {c:?} belongs to both {prev:?} and {parent:?}"
                    )));
                }
            }
        }
        Ok(Self {
            scheme,
            groups,
            crop_to_parent,
        })
    }

    pub fn scheme(&self) -> CropScheme {
        self.scheme
    }

    pub fn groups(&self) -> &BTreeMap<String, Vec<String>> {
        &self.groups
    }

    pub fn parent_of(&self, crop: &str) -> Option<&str> {
        self.crop_to_parent.get(crop).map(String::as_str)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let w: CropMapWire = fsutil::read_json(path, "crop group map")?;
        Self::new(w.scheme, w.groups)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(
            path,
            &CropMapWire {
                scheme: self.scheme,
                groups: self.groups.clone(),
            },
        )
    }
}

/// Collapses crop columns into parent columns, keeping each parent's best (minimum) crop distance.
///
/// Parents are ordered by the first column at which any of their crops appears.
pub fn aggregate_crops<T: Scalar>(
    matrix: &DistanceMatrix<T>,
    map: &CropGroupMap,
) -> Result<DistanceMatrix<T>> {
    let mut parent_ids: Vec<String> = Vec::new();
    let mut parent_index: HashMap<&str, usize> = HashMap::new();
    let mut column_parent = Vec::with_capacity(matrix.n_gallery());
    for crop in &matrix.gallery_ids {
        let parent = map
            .parent_of(crop)
            .ok_or_else(|| Error::UnmappedCropId(crop.clone()))?;
        let next = parent_index.len();
        let p = *parent_index.entry(parent).or_insert_with(|| {
            parent_ids.push(parent.to_owned());
            next
        });
        column_parent.push(p);
    }
    let np = parent_ids.len();
    let mut values = vec![T::infinity(); matrix.n_queries() * np];
    if np > 0 {
        values.par_chunks_mut(np).enumerate().for_each(|(q, out)| {
            for (v, &p) in matrix.row(q).iter().zip(&column_parent) {
                if *v < out[p] {
                    out[p] = *v;
                }
            }
        });
    }
    DistanceMatrix::new(matrix.query_ids.clone(), parent_ids, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_store::l2_normalize;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn self_and_orthogonal_distances() {
        let g =
            EmbeddingSet::from_rows(ids("g", 2), vec![vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap();
        let q = EmbeddingSet::from_rows(ids("q", 1), vec![vec![1.0f32, 0.0]]).unwrap();
        let m = pairwise_cosine_distance(&q, &g).unwrap();
        assert!(m.get(0, 0).abs() < 1e-6);
        assert!((m.get(0, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_unnormalized_and_dim_mismatch() {
        let a = EmbeddingSet::from_rows(ids("a", 1), vec![vec![2.0f32, 0.0]]).unwrap();
        let b = EmbeddingSet::from_rows(ids("b", 1), vec![vec![1.0f32, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            pairwise_cosine_distance(&a, &a),
            Err(Error::NotNormalized { .. })
        ));
        let a = l2_normalize(&a).unwrap();
        assert!(matches!(
            pairwise_cosine_distance(&a, &b),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let m = DistanceMatrix::new(
            vec!["q".into()],
            vec!["zeta".into(), "alpha".into(), "mid".into()],
            vec![0.5f32, 0.5, 0.1],
        )
        .unwrap();
        let l = &topk(&m, 3).unwrap()[0];
        let order: Vec<&str> = l.gallery_ids().collect();
        assert_eq!(order, ["mid", "alpha", "zeta"]);
        l.validate().unwrap();
    }

    #[test]
    fn short_gallery_returns_everything() {
        let m = DistanceMatrix::new(vec!["q".into()], ids("g", 3), vec![0.3f32, 0.1, 0.2]).unwrap();
        let l = &topk(&m, 10).unwrap()[0];
        assert_eq!(l.entries.len(), 3);
        assert!(topk(&m, 0).is_err());
    }

    #[test]
    fn one_crop_per_parent_is_reindexing() {
        let m = DistanceMatrix::new(
            ids("q", 2),
            ids("c", 3),
            vec![0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6],
        )
        .unwrap();
        let groups = (0..3)
            .map(|i| (format!("p{i}"), vec![format!("c{i}")]))
            .collect();
        let map = CropGroupMap::new(CropScheme::Custom, groups).unwrap();
        let agg = aggregate_crops(&m, &map).unwrap();
        assert_eq!(agg.gallery_ids(), ["p0", "p1", "p2"]);
        assert_eq!(agg.values(), m.values());
    }

    #[test]
    fn five_crops_take_the_minimum() {
        let crops = ids("c", 5);
        let m = DistanceMatrix::new(
            vec!["q".into()],
            crops.clone(),
            vec![0.9f32, 0.4, 0.7, 0.8, 0.95],
        )
        .unwrap();
        let map = CropGroupMap::new(
            CropScheme::Index5Crop,
            BTreeMap::from([("p".to_string(), crops)]),
        )
        .unwrap();
        let agg = aggregate_crops(&m, &map).unwrap();
        assert_eq!(agg.values(), [0.4]);
    }

    #[test]
    fn unmapped_crop_and_bad_schemes() {
        let m = DistanceMatrix::new(vec!["q".into()], vec!["x".into()], vec![0.1f32]).unwrap();
        let map = CropGroupMap::new(
            CropScheme::Custom,
            BTreeMap::from([("p".to_string(), vec!["c".to_string()])]),
        )
        .unwrap();
        assert!(matches!(
            aggregate_crops(&m, &map),
            Err(Error::UnmappedCropId(_))
        ));
        assert!(CropGroupMap::new(
            CropScheme::Index6Crop,
            BTreeMap::from([("p".to_string(), ids("c", 5))])
        )
        .is_err());
        let shared = BTreeMap::from([
            ("p".to_string(), vec!["c".to_string()]),
            ("r".to_string(), vec!["c".to_string()]),
        ]);
        assert!(CropGroupMap::new(CropScheme::Custom, shared).is_err());
    }

    #[test]
    fn ranking_jsonl_format() {
        let l = RankingList {
            query_id: "q1".into(),
            entries: vec![("g2".into(), 0.25f32), ("g1".into(), 0.5)],
            k: 10,
            orientation: Orientation::Distance,
        };
        let bytes = encode_rankings(std::slice::from_ref(&l));
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            "{\"query\":\"q1\",\"ranks\":[[\"g2\",0.25],[\"g1\",0.5]],\"orientation\":\"distance\"}\n"
        );
        let back: RankingList<f32> =
            decode_ranking_line(std::str::from_utf8(&bytes).unwrap().trim()).unwrap();
        assert_eq!(back.entries, l.entries);
    }
}

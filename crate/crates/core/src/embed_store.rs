//! Embedding container, the EMB1 file format, normalization and multi-scale fusion.
//!
//! EMB1 layout (little-endian throughout):
//!
//! | bytes  | content                                   |
//! |--------|-------------------------------------------|
//! | 0..4   | magic `EMB1`                              |
//! | 4..8   | `u32` row count N                         |
//! | 8..12  | `u32` dimension D                         |
//! | 12..16 | reserved, zero                            |
//! | ...    | N ids, each `u16` byte length + UTF-8     |
//! | ...    | N×D `f32`, row-major                      |

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::scalar::{self, Scalar};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const HEADER_LEN: usize = 16;
pub const DEFAULT_DIM: usize = 2048;
/// Rows with a Euclidean norm at or below this are rejected as degenerate.
pub const MIN_NORM: f64 = 1e-12;

/// Item ids paired with fixed-dimension dense vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T = f32> {
    ids: Vec<String>,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> EmbeddingSet<T> {
    /// Builds a set, checking id uniqueness, shape and finiteness.
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidEmbeddings("dim must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::InvalidEmbeddings(format!(
                "{} values for {} ids of dim {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if id.is_empty() {
                return Err(Error::InvalidEmbeddings("empty id".into()));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let row = pos / dim;
            return Err(Error::NonFiniteValue {
                row,
                id: ids[row].clone(),
            });
        }
        Ok(Self { ids, dim, data })
    }

    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<T>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::InvalidEmbeddings(format!(
                "ragged rows: {} vs {dim}",
                bad.len()
            )));
        }
        if ids.len() != rows.len() {
            return Err(Error::InvalidEmbeddings(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        Self::new(ids, dim, rows.concat())
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(Vec::new(), dim, Vec::new())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.dim)
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            ids,
            dim: self.dim,
            data,
        }
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Scalar>(&self) -> EmbeddingSet<U> {
        EmbeddingSet {
            ids: self.ids.clone(),
            dim: self.dim,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Returns the first row whose norm deviates from one by more than `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for (row, r) in self.rows().enumerate() {
            let norm = scalar::norm(r).as_f64();
            if (norm - 1.0).abs() > tol {
                return Err(Error::NotNormalized {
                    row,
                    id: self.ids[row].clone(),
                    norm,
                });
            }
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Vec<String>, usize, Vec<T>) {
        (self.ids, self.dim, self.data)
    }
}

/// Scales every row to unit Euclidean norm.
///
/// Rows with norm at or below [`MIN_NORM`] are an error rather than being clamped.
pub fn l2_normalize<T: Scalar>(set: &EmbeddingSet<T>) -> Result<EmbeddingSet<T>> {
    let dim = set.dim;
    let mut data = set.data.clone();
    data.par_chunks_mut(dim)
        .enumerate()
        .try_for_each(|(row, r)| normalize_row(r).ok_or(row))
        .map_err(|row| Error::ZeroVector {
            row,
            id: set.ids[row].clone(),
        })?;
    Ok(EmbeddingSet {
        ids: set.ids.clone(),
        dim,
        data,
    })
}

fn normalize_row<T: Scalar>(r: &mut [T]) -> Option<()> {
    let n = scalar::norm(r);
    if n.is_nan() || n.as_f64() <= MIN_NORM {
        return None;
    }
    for v in r.iter_mut() {
        *v = *v / n;
    }
    Some(())
}

/// Aligned embeddings of the same items, one set per test resolution.
#[derive(Debug, Clone)]
pub struct ScaleGroup<T = f32> {
    scales: Vec<(String, EmbeddingSet<T>)>,
}

impl<T: Scalar> ScaleGroup<T> {
    pub fn new(scales: Vec<(String, EmbeddingSet<T>)>) -> Result<Self> {
        let Some((_, first)) = scales.first() else {
            return Err(Error::InvalidParams(
                "a scale group needs at least one member".into(),
            ));
        };
        for (label, set) in &scales[1..] {
            if set.dim != first.dim {
                return Err(Error::MisalignedScales {
                    label: label.clone(),
                    detail: format!("dim {} vs {}", set.dim, first.dim),
                });
            }
            if set.ids != first.ids {
                let detail = match set.ids.iter().zip(&first.ids).position(|(a, b)| a != b) {
                    Some(i) => format!("id order differs at row {i}"),
                    None => format!("{} ids vs {}", set.len(), first.len()),
                };
                return Err(Error::MisalignedScales {
                    label: label.clone(),
                    detail,
                });
            }
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[(String, EmbeddingSet<T>)] {
        &self.scales
    }
}

/// Fuses per-scale embeddings into one descriptor per item:
/// `normalize(mean_s(normalize(x_s)))`.
///
/// Each coordinate sums its per-scale values in sorted order, so listing the
/// scales in a different order gives bit-identical output even when the
/// scales nearly cancel.
pub fn fuse_multiscale<T: Scalar>(group: &ScaleGroup<T>) -> Result<EmbeddingSet<T>> {
    let normalized: Vec<EmbeddingSet<T>> = group
        .scales
        .iter()
        .map(|(_, s)| l2_normalize(s))
        .collect::<Result<_>>()?;
    let first = &normalized[0];
    let dim = first.dim;
    let count = T::lit(normalized.len() as f64);
    let mut data = vec![T::zero(); first.data.len()];
    data.par_chunks_mut(dim)
        .enumerate()
        .try_for_each(|(row, out)| {
            let mut column = Vec::with_capacity(normalized.len());
            for (c, o) in out.iter_mut().enumerate() {
                column.clear();
                column.extend(normalized.iter().map(|set| set.row(row)[c]));
                // rows are finite, checked on construction
                column.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite embedding values"));
                *o = column.iter().fold(T::zero(), |acc, v| acc + *v) / count;
            }
            normalize_row(out).ok_or(row)
        })
        .map_err(|row| Error::ZeroVector {
            row,
            id: first.ids[row].clone(),
        })?;
    Ok(EmbeddingSet {
        ids: first.ids.clone(),
        dim,
        data,
    })
}

/// Serializes a set to EMB1 bytes.
pub fn encode(set: &EmbeddingSet<f32>) -> Result<Vec<u8>> {
    let n = u32::try_from(set.len())
        .map_err(|_| Error::InvalidEmbeddings(format!("{} rows exceed u32", set.len())))?;
    let d = u32::try_from(set.dim)
        .map_err(|_| Error::InvalidEmbeddings(format!("dim {} exceeds u32", set.dim)))?;
    let id_bytes: usize = set.ids.iter().map(|id| 2 + id.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + id_bytes + 4 * set.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for id in &set.ids {
        let len = u16::try_from(id.len()).map_err(|_| {
            Error::InvalidEmbeddings(format!("id of {} bytes exceeds u16", id.len()))
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in &set.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses EMB1 bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<EmbeddingSet<f32>> {
    let truncated = |detail: String| Error::TruncatedFile {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::MagicMismatch {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(format!("{} byte header", bytes.len())));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (n, dim) = (word(4), word(8));
    if word(12) != 0 {
        return Err(Error::malformed(
            path,
            "EMB1 header",
            "reserved bytes are not zero",
        ));
    }
    if dim == 0 {
        return Err(Error::malformed(path, "EMB1 header", "dim is zero"));
    }
    let mut at = HEADER_LEN;
    let mut ids = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let Some(len_bytes) = bytes.get(at..at + 2) else {
            return Err(truncated(format!("id block ends before id {i} of {n}")));
        };
        let len = u16::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        at += 2;
        let Some(raw) = bytes.get(at..at + len) else {
            return Err(truncated(format!("id {i} of {n} is cut short")));
        };
        let id = std::str::from_utf8(raw).map_err(|e| Error::malformed(path, "EMB1 id", e))?;
        ids.push(id.to_owned());
        at += len;
    }
    let expected = n
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| truncated(format!("count {n} x dim {dim} overflows")))?;
    let payload = &bytes[at..];
    if payload.len() != expected {
        return Err(truncated(format!(
            "payload has {} bytes, header declares {n} x {dim} floats ({expected} bytes)",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingSet::new(ids, dim, data)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet<f32>> {
    decode(&fsutil::read(path)?, path)
}

pub fn save_embeddings(set: &EmbeddingSet<f32>, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode(set)?)
}

/// JSON description of an embedding file, used to assemble scale groups and ensembles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub path: PathBuf,
    pub scale: String,
    pub model: String,
    pub sha256: String,
}

impl Sidecar {
    pub fn describe(path: &Path, scale: &str, model: &str) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            scale: scale.to_owned(),
            model: model.to_owned(),
            sha256: fsutil::sha256_file(path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self)
    }

    /// Reads a sidecar; a relative `path` inside it resolves against the sidecar's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut car: Sidecar = fsutil::read_json(path, "sidecar manifest")?;
        if car.path.is_relative() {
            if let Some(dir) = path.parent() {
                car.path = dir.join(&car.path);
            }
        }
        Ok(car)
    }

    /// Loads the described embeddings after checking the recorded digest.
    pub fn load_embeddings(&self) -> Result<EmbeddingSet<f32>> {
        let bytes = fsutil::read(&self.path)?;
        let actual = fsutil::sha256_hex(&bytes);
        if actual != self.sha256 {
            return Err(Error::malformed(
                &self.path,
                "embedding file",
                format!("sha256 {actual} does not match sidecar {}", self.sha256),
            ));
        }
        decode(&bytes, &self.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str], rows: Vec<Vec<f32>>) -> EmbeddingSet<f32> {
        EmbeddingSet::from_rows(ids.iter().map(|s| s.to_string()).collect(), rows).unwrap()
    }

    #[test]
    fn empty_set_is_header_only() {
        let s = EmbeddingSet::<f32>::empty(DEFAULT_DIM).unwrap();
        let bytes = encode(&s).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &2048u32.to_le_bytes());
        assert_eq!(decode(&bytes, Path::new("x")).unwrap(), s);
    }

    #[test]
    fn two_by_two_layout_by_hand() {
        let s = set(&["a", "bc"], vec![vec![1.0, -2.0], vec![0.5, 4.0]]);
        let bytes = encode(&s).unwrap();
        // header 16, ids (2+1)+(2+2)=7, payload 2*2*4=16
        assert_eq!(bytes.len(), 16 + 7 + 16);
        let mut expected = b"EMB1".to_vec();
        expected.extend([2, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend([1, 0, b'a', 2, 0, b'b', b'c']);
        for v in [1.0f32, -2.0, 0.5, 4.0] {
            expected.extend(v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&set(&["a"], vec![vec![1.0]])).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes, Path::new("x")),
            Err(Error::MagicMismatch { .. })
        ));
    }

    #[test]
    fn half_payload_is_truncated() {
        let ids: Vec<String> = (0..100).map(|i| format!("id{i}")).collect();
        let data = vec![0.25f32; 100 * 2048];
        let s = EmbeddingSet::new(ids, 2048, data).unwrap();
        let bytes = encode(&s).unwrap();
        let payload = 100 * 2048 * 4;
        let cut = &bytes[..bytes.len() - payload / 2];
        assert!(matches!(
            decode(cut, Path::new("x")),
            Err(Error::TruncatedFile { .. })
        ));
        assert!(matches!(
            decode(&bytes[..10], Path::new("x")),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn duplicate_and_non_finite_rejected() {
        let dup =
            EmbeddingSet::from_rows(vec!["a".into(), "a".into()], vec![vec![1.0f32], vec![2.0]]);
        assert!(matches!(dup, Err(Error::DuplicateId(_))));
        // bypass the constructor to forge a file with a NaN
        let mut bytes = encode(&set(&["a", "b"], vec![vec![1.0], vec![2.0]])).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode(&bytes, Path::new("x")),
            Err(Error::NonFiniteValue { row: 1, .. })
        ));
        let mut bytes = encode(&set(&["a", "b"], vec![vec![1.0], vec![2.0]])).unwrap();
        bytes[21] = b'a';
        assert!(matches!(
            decode(&bytes, Path::new("x")),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn normalize_three_four_five() {
        let s = set(&["a"], vec![vec![3.0, 4.0]]);
        let n = l2_normalize(&s).unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-6);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-6);
        let again = l2_normalize(&n).unwrap();
        for (a, b) in again.as_slice().iter().zip(n.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_row_is_an_error() {
        let s = set(&["a", "z"], vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        match l2_normalize(&s) {
            Err(Error::ZeroVector { row, id }) => assert_eq!((row, id.as_str()), (1, "z")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fuse_orthogonal_pair_hits_diagonal() {
        let a = set(&["p"], vec![vec![1.0, 0.0]]);
        let b = set(&["p"], vec![vec![0.0, 1.0]]);
        let g = ScaleGroup::new(vec![("400".into(), a), ("600".into(), b)]).unwrap();
        let f = fuse_multiscale(&g).unwrap();
        assert!((f.row(0)[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((f.row(0)[1] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn fuse_identical_scales_is_normalize() {
        let a = set(&["p", "q"], vec![vec![2.0, 1.0, 0.5], vec![-1.0, 3.0, 0.0]]);
        let g = ScaleGroup::new(vec![
            ("400".into(), a.clone()),
            ("512".into(), a.clone()),
            ("600".into(), a.clone()),
        ])
        .unwrap();
        let f = fuse_multiscale(&g).unwrap();
        let n = l2_normalize(&a).unwrap();
        for (x, y) in f.as_slice().iter().zip(n.as_slice()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_cancelling_scales_is_zero_vector() {
        let a = set(&["p"], vec![vec![1.0, 0.0]]);
        let b = set(&["p"], vec![vec![-1.0, 0.0]]);
        let g = ScaleGroup::new(vec![("a".into(), a), ("b".into(), b)]).unwrap();
        assert!(matches!(fuse_multiscale(&g), Err(Error::ZeroVector { .. })));
    }

    #[test]
    fn misaligned_scales_rejected() {
        let a = set(&["p", "q"], vec![vec![1.0], vec![2.0]]);
        let b = set(&["q", "p"], vec![vec![1.0], vec![2.0]]);
        assert!(matches!(
            ScaleGroup::new(vec![("a".into(), a), ("b".into(), b)]),
            Err(Error::MisalignedScales { .. })
        ));
    }

    #[test]
    fn sidecar_rejects_modified_file() {
        let dir = tempfile::tempdir().unwrap();
        let emb = dir.path().join("a.emb");
        save_embeddings(&set(&["a"], vec![vec![1.0, 2.0]]), &emb).unwrap();
        let car = Sidecar {
            path: "a.emb".into(),
            ..Sidecar::describe(&emb, "512", "m").unwrap()
        };
        let car_path = dir.path().join("a.json");
        car.save(&car_path).unwrap();
        let loaded = Sidecar::load(&car_path).unwrap();
        assert_eq!(loaded.load_embeddings().unwrap().len(), 1);
        save_embeddings(&set(&["a"], vec![vec![1.0, 3.0]]), &emb).unwrap();
        assert!(Sidecar::load(&car_path).unwrap().load_embeddings().is_err());
    }
}

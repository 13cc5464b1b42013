//! Core numeric types: row-major embedding matrices, the squared-L2 metric and
//! L2 normalization.
//!
//! Distances accumulate in `f64` over the stored `f32` components in ascending
//! component order. Every index in this crate ranks by the same function, so
//! two searches over the same data agree bit-for-bit regardless of thread count.

use crate::error::{Error, Result};

/// Vectors with a norm at or below this are rejected by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Tolerance on the squared norm of vectors in a set flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// Squared Euclidean distance between two vectors of equal length.
pub fn squared_l2(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(l2sq(a, b))
}

/// Unchecked kernel behind [`squared_l2`]; callers guarantee equal lengths.
#[inline]
pub fn l2sq(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}

pub(crate) fn norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Returns `v / ‖v‖`.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let mut out = v.to_vec();
    normalize_row(&mut out, 0)?;
    Ok(out)
}

/// Normalizes `v` in place; `row` is reported if the vector cannot be normalized.
pub(crate) fn normalize_row(v: &mut [f32], row: usize) -> Result<()> {
    if let Some(col) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { row, col });
    }
    let n = norm(v);
    if n <= MIN_NORM {
        return Err(Error::ZeroNorm { row });
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
    Ok(())
}

/// Borrowed view of `len` row-major vectors of dimension `dim`.
#[derive(Debug, Clone, Copy)]
pub struct Rows<'a> {
    dim: usize,
    data: &'a [f32],
}

impl<'a> Rows<'a> {
    pub fn new(dim: usize, data: &'a [f32]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "buffer of {} values is not a whole number of {dim}-d rows",
                data.len()
            )));
        }
        Ok(Rows { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &'a [f32] {
        self.data
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'a, f32> {
        self.data.chunks_exact(self.dim)
    }
}

/// A labeled gallery or query set: `N` vectors of dimension `dim`, one
/// identity label per vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f32>,
    labels: Vec<String>,
    normalized: bool,
}

impl EmbeddingSet {
    /// Validates and wraps a row-major buffer.
    ///
    /// Rejects non-finite components, empty labels, a label count that does
    /// not match the row count, and (when `normalized` is set) rows whose
    /// squared norm is not within [`UNIT_NORM_TOLERANCE`] of one.
    pub fn new(dim: usize, data: Vec<f32>, labels: Vec<String>, normalized: bool) -> Result<Self> {
        let rows = Rows::new(dim, &data)?;
        if rows.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} vectors but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        for (row, v) in rows.iter().enumerate() {
            if let Some(col) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { row, col });
            }
            if normalized && !is_unit(v) {
                return Err(Error::invalid(format!(
                    "vector {row} is flagged normalized but has squared norm {}",
                    norm(v).powi(2)
                )));
            }
        }
        if let Some(row) = labels.iter().position(|l| l.is_empty()) {
            return Err(Error::invalid(format!("label of vector {row} is empty")));
        }
        Ok(EmbeddingSet {
            dim,
            data,
            labels,
            normalized,
        })
    }

    /// Builds an unnormalized set from individual rows.
    pub fn from_rows<V: AsRef<[f32]>>(rows: &[V], labels: Vec<String>) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        if rows.is_empty() {
            return Err(Error::Empty("no rows given"));
        }
        EmbeddingSet::new(dim, data, labels, false)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn rows(&self) -> Rows<'_> {
        Rows {
            dim: self.dim,
            data: &self.data,
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.rows().row(i)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    /// L2-normalizes every row. Fails on the first near-zero row.
    pub fn normalized(mut self) -> Result<Self> {
        if self.normalized {
            return Ok(self);
        }
        for (row, v) in self.data.chunks_exact_mut(self.dim).enumerate() {
            normalize_row(v, row)?;
        }
        self.normalized = true;
        Ok(self)
    }

    /// New set holding the given rows, in the given order.
    pub fn select(&self, ids: &[usize]) -> EmbeddingSet {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i].clone());
        }
        EmbeddingSet {
            dim: self.dim,
            data,
            labels,
            normalized: self.normalized,
        }
    }

    pub(crate) fn into_parts(self) -> (usize, Vec<f32>, Vec<String>, bool) {
        (self.dim, self.data, self.labels, self.normalized)
    }
}

fn is_unit(v: &[f32]) -> bool {
    let sq: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum();
    (sq - 1.0).abs() <= UNIT_NORM_TOLERANCE
}

/// One ranked hit: a zero-based base vector id and its distance to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub dist: f64,
}

impl Neighbor {
    /// Total order used for every ranked list: distance, then id.
    #[inline]
    pub fn rank_cmp(&self, other: &Neighbor) -> std::cmp::Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then_with(|| self.id.cmp(&other.id))
    }
}

/// Ranked neighbors of one query, ascending by distance with ties broken by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchResult {
    pub entries: Vec<Neighbor>,
}

impl SearchResult {
    pub fn top1(&self) -> Option<&Neighbor> {
        self.entries.first()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|n| n.id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

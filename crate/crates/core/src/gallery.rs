//! Gallery hygiene and feature fusion.
//!
//! Cleaning runs 2-means inside each identity folder. The centroid of the
//! larger cluster is the main center; any feature whose Euclidean distance to
//! the main center exceeds twice the mean distance of the main cluster's
//! members is dropped as mislabeled.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kmeans::{self, KMeansParams};
use crate::vector::{l2sq, normalize_row, EmbeddingSet, Rows};

/// Folders smaller than this are kept whole.
pub const MIN_FOLDER_FOR_CLEANING: usize = 3;

/// Features claimed to belong to one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityFolder {
    identity: String,
    dim: usize,
    features: Vec<f32>,
}

impl IdentityFolder {
    pub fn new(identity: impl Into<String>, dim: usize, features: Vec<f32>) -> Result<Self> {
        Rows::new(dim, &features)?;
        if features.is_empty() {
            return Err(Error::Empty("identity folder has no features"));
        }
        Ok(IdentityFolder {
            identity: identity.into(),
            dim,
            features,
        })
    }

    /// Builds a folder from separate vectors, rejecting mixed dimensions.
    pub fn from_vectors<V: AsRef<[f32]>>(
        identity: impl Into<String>,
        vectors: &[V],
    ) -> Result<Self> {
        let dim = vectors
            .first()
            .map(|v| v.as_ref().len())
            .ok_or(Error::Empty("identity folder has no features"))?;
        let mut features = Vec::with_capacity(dim * vectors.len());
        for v in vectors {
            let v = v.as_ref();
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            features.extend_from_slice(v);
        }
        IdentityFolder::new(identity, dim, features)
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn rows(&self) -> Rows<'_> {
        Rows::new(self.dim, &self.features).expect("shape checked at construction")
    }
}

/// Outcome of cleaning one folder; indices are positions within the folder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CleanReport {
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
    pub main_center: Vec<f32>,
    pub avg_dist: f64,
    pub threshold: f64,
}

/// Cleans one folder with 2-means seeded by `seed`.
///
/// Folders of fewer than [`MIN_FOLDER_FOR_CLEANING`] features are kept whole;
/// their report uses the folder mean as the main center.
pub fn clean_identity(folder: &IdentityFolder, seed: u64) -> Result<CleanReport> {
    let rows = folder.rows();
    let n = rows.len();
    let (main_center, members): (Vec<f32>, Vec<usize>) = if n < MIN_FOLDER_FOR_CLEANING {
        (mean(rows, 0..n), (0..n).collect())
    } else {
        let trained = kmeans::train_with_report(rows, KMeansParams::new(2, seed))?;
        let mut count = [0usize; 2];
        let mut spread = [0.0f64; 2];
        for (x, &l) in rows.iter().zip(&trained.labels) {
            count[l] += 1;
            spread[l] += l2sq(x, trained.codebook.centroid(l));
        }
        let main = if count[1] > count[0] || (count[1] == count[0] && spread[1] < spread[0]) {
            1
        } else {
            0
        };
        let members = (0..n).filter(|&i| trained.labels[i] == main).collect();
        (trained.codebook.centroid(main).to_vec(), members)
    };

    let dists: Vec<f64> = rows.iter().map(|x| l2sq(x, &main_center).sqrt()).collect();
    let avg_dist = members.iter().map(|&i| dists[i]).sum::<f64>() / members.len() as f64;
    let threshold = 2.0 * avg_dist;
    let (kept, removed) = if n < MIN_FOLDER_FOR_CLEANING {
        ((0..n).collect(), Vec::new())
    } else {
        (0..n).partition(|&i| dists[i] <= threshold)
    };
    Ok(CleanReport {
        kept,
        removed,
        main_center,
        avg_dist,
        threshold,
    })
}

fn mean(rows: Rows<'_>, ids: std::ops::Range<usize>) -> Vec<f32> {
    let mut acc = vec![0.0f64; rows.dim()];
    let n = ids.len() as f64;
    for i in ids {
        for (a, &v) in acc.iter_mut().zip(rows.row(i)) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// Cleaning outcome for one identity of a gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub identity: String,
    /// Gallery row of each folder member, in gallery order.
    pub rows: Vec<usize>,
    pub report: CleanReport,
}

impl IdentityReport {
    pub fn kept_rows(&self) -> Vec<usize> {
        self.report.kept.iter().map(|&i| self.rows[i]).collect()
    }

    pub fn removed_rows(&self) -> Vec<usize> {
        self.report.removed.iter().map(|&i| self.rows[i]).collect()
    }

    /// One JSON-lines record; `kept` and `removed` are gallery row indices.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "identity": self.identity,
            "n": self.rows.len(),
            "kept": self.kept_rows(),
            "removed": self.removed_rows(),
            "avg_dist": self.report.avg_dist,
            "threshold": self.report.threshold,
        })
        .to_string()
    }
}

/// Groups rows by label, in order of each label's first appearance.
pub fn group_by_label(set: &EmbeddingSet) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, label) in set.labels().iter().enumerate() {
        let s = *slot.entry(label.as_str()).or_insert_with(|| {
            order.push((label.clone(), Vec::new()));
            order.len() - 1
        });
        order[s].1.push(i);
    }
    order
}

/// Cleans every identity folder independently (in parallel) and returns the
/// surviving rows in their original relative order.
pub fn clean_gallery(set: &EmbeddingSet, seed: u64) -> Result<(EmbeddingSet, Vec<IdentityReport>)> {
    let groups = group_by_label(set);
    let reports: Vec<IdentityReport> = groups
        .into_par_iter()
        .map(|(identity, rows)| {
            let features = set.select(&rows).data().to_vec();
            let folder = IdentityFolder::new(identity.clone(), set.dim(), features)?;
            let report = clean_identity(&folder, seed)?;
            Ok(IdentityReport {
                identity,
                rows,
                report,
            })
        })
        .collect::<Result<_>>()?;
    let mut keep: Vec<usize> = reports.iter().flat_map(IdentityReport::kept_rows).collect();
    keep.sort_unstable();
    Ok((set.select(&keep), reports))
}

/// Ways to merge the features of an image and its mirrored copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Single,
    Concat,
    Sort,
    Prod,
    Sum,
    Max,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 6] = [
        FusionStrategy::Single,
        FusionStrategy::Concat,
        FusionStrategy::Sort,
        FusionStrategy::Prod,
        FusionStrategy::Sum,
        FusionStrategy::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Single => "single",
            FusionStrategy::Concat => "concat",
            FusionStrategy::Sort => "sort",
            FusionStrategy::Prod => "prod",
            FusionStrategy::Sum => "sum",
            FusionStrategy::Max => "max",
        }
    }

    /// Output dimension for inputs of dimension `dim`.
    pub fn output_dim(self, dim: usize) -> usize {
        match self {
            FusionStrategy::Concat | FusionStrategy::Sort => 2 * dim,
            _ => dim,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown fusion strategy {s:?}")))
    }
}

/// Fuses two features; `b` is ignored for [`FusionStrategy::Single`].
/// The result is L2-normalized when `normalize` is set.
pub fn fuse(a: &[f32], b: &[f32], strategy: FusionStrategy, normalize: bool) -> Result<Vec<f32>> {
    let mut out = fuse_raw(a, b, strategy)?;
    if normalize {
        normalize_row(&mut out, 0)?;
    }
    Ok(out)
}

fn fuse_raw(a: &[f32], b: &[f32], strategy: FusionStrategy) -> Result<Vec<f32>> {
    if strategy == FusionStrategy::Single {
        return Ok(a.to_vec());
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let zip = || a.iter().zip(b);
    Ok(match strategy {
        FusionStrategy::Single => unreachable!(),
        FusionStrategy::Sum => zip().map(|(x, y)| x + y).collect(),
        FusionStrategy::Max => zip().map(|(x, y)| x.max(*y)).collect(),
        FusionStrategy::Prod => zip().map(|(x, y)| x * y).collect(),
        FusionStrategy::Concat => a.iter().chain(b).copied().collect(),
        FusionStrategy::Sort => zip()
            .map(|(x, y)| x.min(*y))
            .chain(zip().map(|(x, y)| x.max(*y)))
            .collect(),
    })
}

/// Fuses row `i` of `a` with row `i` of `b`; labels come from `a`.
pub fn fuse_sets(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    strategy: FusionStrategy,
    normalize: bool,
) -> Result<EmbeddingSet> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cannot pair {} rows with {} rows",
            a.len(),
            b.len()
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let dim = strategy.output_dim(a.dim());
    let mut data = Vec::with_capacity(a.len() * dim);
    for (row, (x, y)) in a.rows().iter().zip(b.rows().iter()).enumerate() {
        let mut v = fuse_raw(x, y, strategy)?;
        if normalize {
            normalize_row(&mut v, row)?;
        }
        data.extend_from_slice(&v);
    }
    EmbeddingSet::new(dim, data, a.labels().to_vec(), normalize)
}

/// Fuses row `i` with row `i + N/2` of a single set (originals first, mirrors second).
pub fn fuse_halves(
    set: &EmbeddingSet,
    strategy: FusionStrategy,
    normalize: bool,
) -> Result<EmbeddingSet> {
    if !set.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "pairing halves needs an even row count, got {}",
            set.len()
        )));
    }
    let half = set.len() / 2;
    let first: Vec<usize> = (0..half).collect();
    let second: Vec<usize> = (half..set.len()).collect();
    let mut a = set.select(&first);
    let mut b = set.select(&second);
    if set.is_normalized() {
        // Flag only; fusion output decides its own normalization.
        a = strip_normalized(a);
        b = strip_normalized(b);
    }
    fuse_sets(&a, &b, strategy, normalize)
}

fn strip_normalized(set: EmbeddingSet) -> EmbeddingSet {
    let (dim, data, labels, _) = set.into_parts();
    EmbeddingSet::new(dim, data, labels, false).expect("rows already validated")
}

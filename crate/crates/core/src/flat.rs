//! Exhaustive k-NN search by squared L2.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::topk::TopK;
use crate::vector::{l2sq, EmbeddingSet, Rows, SearchResult};

/// The whole base set, scanned in id order for every query.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    base: EmbeddingSet,
}

impl FlatIndex {
    pub fn build(base: EmbeddingSet) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::Empty("cannot build an index over an empty set"));
        }
        Ok(FlatIndex { base })
    }

    pub fn base(&self) -> &EmbeddingSet {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// Exact `k` nearest neighbors of a single query.
    pub fn search_one(&self, query: &[f32], k: usize) -> Result<SearchResult> {
        check_dim(self.dim(), query.len())?;
        self.check_k(k)?;
        Ok(self.scan(query, k))
    }

    /// Exact `k` nearest neighbors of every query; queries run in parallel.
    pub fn search(&self, queries: Rows<'_>, k: usize) -> Result<Vec<SearchResult>> {
        check_dim(self.dim(), queries.dim())?;
        self.check_k(k)?;
        Ok(par_map_queries(queries, |q| self.scan(q, k)))
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!(
                "k must be in 1..={} for this index, got {k}",
                self.len()
            )));
        }
        Ok(())
    }

    fn scan(&self, query: &[f32], k: usize) -> SearchResult {
        let mut top = TopK::new(k);
        for (id, x) in self.base.rows().iter().enumerate() {
            top.push(id, l2sq(query, x));
        }
        top.into_result()
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Runs `f` over every query row, in parallel, preserving query order.
pub(crate) fn par_map_queries<F>(queries: Rows<'_>, f: F) -> Vec<SearchResult>
where
    F: Fn(&[f32]) -> SearchResult + Sync,
{
    if queries.len() <= 1 {
        return queries.iter().map(&f).collect();
    }
    queries
        .as_slice()
        .par_chunks_exact(queries.dim())
        .with_min_len(4)
        .map(&f)
        .collect()
}

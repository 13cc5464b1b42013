//! Inverted file with exact post-verification.
//!
//! A coarse k-means codebook partitions the base into `nlist` posting lists.
//! Each list keeps full copies of its vectors, so a query probes its `nprobe`
//! nearest lists and ranks every candidate found there by exact squared L2.

use std::borrow::Cow;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flat::{check_dim, par_map_queries};
use crate::kmeans::{self, Codebook, KMeansParams, DEFAULT_MAX_ITERS};
use crate::topk::TopK;
use crate::vector::{l2sq, EmbeddingSet, Rows, SearchResult};

/// Default probe count for `nlist` lists.
pub fn default_nprobe(nlist: usize) -> usize {
    (nlist / 32).max(1)
}

/// Coarse quantizer training parameters shared by both IVF index kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IvfParams {
    pub nlist: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Train on a seeded subsample of this many rows instead of the whole base.
    pub train_size: Option<usize>,
}

impl IvfParams {
    pub fn new(nlist: usize, seed: u64) -> Self {
        IvfParams {
            nlist,
            seed,
            max_iters: DEFAULT_MAX_ITERS,
            train_size: None,
        }
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_train_size(mut self, train_size: usize) -> Self {
        self.train_size = Some(train_size);
        self
    }

    pub(crate) fn kmeans(&self) -> KMeansParams {
        KMeansParams::new(self.nlist, self.seed).with_max_iters(self.max_iters)
    }
}

/// Rows used to train the quantizers: the full base, or a seeded subsample
/// kept in ascending id order.
pub(crate) fn training_rows<'a>(base: Rows<'a>, params: &IvfParams) -> Cow<'a, [f32]> {
    match params.train_size {
        Some(t) if t < base.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x7261_696e_5f73_6d70);
            let mut ids = index::sample(&mut rng, base.len(), t).into_vec();
            ids.sort_unstable();
            let mut out = Vec::with_capacity(t * base.dim());
            for i in ids {
                out.extend_from_slice(base.row(i));
            }
            Cow::Owned(out)
        }
        _ => Cow::Borrowed(base.as_slice()),
    }
}

pub(crate) fn check_nprobe(nprobe: usize, nlist: usize) -> Result<()> {
    if nprobe == 0 || nprobe > nlist {
        return Err(Error::invalid(format!(
            "nprobe must be in 1..={nlist}, got {nprobe}"
        )));
    }
    Ok(())
}

/// One posting list: ids in insertion order and their vectors, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatList {
    pub ids: Vec<usize>,
    pub vectors: Vec<f32>,
}

impl FlatList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfFlatIndex {
    dim: usize,
    coarse: Codebook,
    lists: Vec<FlatList>,
    labels: Vec<String>,
    normalized: bool,
}

impl IvfFlatIndex {
    pub fn build(base: &EmbeddingSet, params: IvfParams) -> Result<Self> {
        let n = base.len();
        if params.nlist == 0 {
            return Err(Error::invalid("nlist must be at least 1"));
        }
        if params.nlist > n {
            return Err(Error::InsufficientData(format!(
                "nlist={} exceeds the {n} base vectors",
                params.nlist
            )));
        }
        let train = training_rows(base.rows(), &params);
        let coarse = kmeans::train(Rows::new(base.dim(), &train)?, params.kmeans())?;
        Self::with_quantizer(base, coarse)
    }

    /// Fills posting lists for `base` using an already trained coarse codebook.
    pub fn with_quantizer(base: &EmbeddingSet, coarse: Codebook) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::Empty("cannot build an index over an empty set"));
        }
        check_dim(coarse.dim(), base.dim())?;
        let assignment = kmeans::assign(base.rows(), &coarse)?;
        let mut lists = vec![FlatList::default(); coarse.k()];
        for (id, (&l, x)) in assignment.labels.iter().zip(base.rows().iter()).enumerate() {
            lists[l].ids.push(id);
            lists[l].vectors.extend_from_slice(x);
        }
        Ok(IvfFlatIndex {
            dim: base.dim(),
            coarse,
            lists,
            labels: base.labels().to_vec(),
            normalized: base.is_normalized(),
        })
    }

    /// Reassembles a deserialized index, checking the partition invariants.
    pub fn from_parts(
        coarse: Codebook,
        lists: Vec<FlatList>,
        labels: Vec<String>,
        normalized: bool,
    ) -> Result<Self> {
        let dim = coarse.dim();
        if lists.len() != coarse.k() {
            return Err(Error::Invariant(format!(
                "{} posting lists for {} coarse centroids",
                lists.len(),
                coarse.k()
            )));
        }
        let mut seen = vec![false; labels.len()];
        for list in &lists {
            if list.vectors.len() != list.ids.len() * dim {
                return Err(Error::Invariant("posting list payload length".into()));
            }
            for &id in &list.ids {
                if id >= seen.len() || std::mem::replace(&mut seen[id], true) {
                    return Err(Error::Invariant(format!("id {id} missing or duplicated")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invariant(
                "not every id appears in a posting list".into(),
            ));
        }
        Ok(IvfFlatIndex {
            dim,
            coarse,
            lists,
            labels,
            normalized,
        })
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

    pub fn nlist(&self) -> usize {
        self.coarse.k()
    }

    pub fn coarse(&self) -> &Codebook {
        &self.coarse
    }

    pub fn lists(&self) -> &[FlatList] {
        &self.lists
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn search_one(&self, query: &[f32], k: usize, nprobe: usize) -> Result<SearchResult> {
        self.check(query.len(), k, nprobe)?;
        Ok(self.scan(query, k, nprobe))
    }

    /// Returns up to `k` hits per query; fewer when the probed lists hold
    /// fewer than `k` vectors.
    pub fn search(&self, queries: Rows<'_>, k: usize, nprobe: usize) -> Result<Vec<SearchResult>> {
        self.check(queries.dim(), k, nprobe)?;
        Ok(par_map_queries(queries, |q| self.scan(q, k, nprobe)))
    }

    fn check(&self, dim: usize, k: usize, nprobe: usize) -> Result<()> {
        check_dim(self.dim, dim)?;
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        check_nprobe(nprobe, self.nlist())
    }

    fn scan(&self, query: &[f32], k: usize, nprobe: usize) -> SearchResult {
        let mut top = TopK::new(k);
        for c in self.coarse.nearest_n(query, nprobe) {
            let list = &self.lists[c];
            for (&id, x) in list.ids.iter().zip(list.vectors.chunks_exact(self.dim)) {
                top.push(id, l2sq(query, x));
            }
        }
        top.into_result()
    }
}

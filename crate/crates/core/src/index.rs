//! A single handle over the three index kinds.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flat::FlatIndex;
use crate::ivf_flat::{default_nprobe, IvfFlatIndex, IvfParams};
use crate::ivf_pq::{IvfPqIndex, IvfPqParams};
use crate::vector::{EmbeddingSet, Rows, SearchResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndexKind {
    Flat,
    IvfFlat,
    IvfPq,
}

impl IndexKind {
    pub fn code(self) -> u8 {
        match self {
            IndexKind::Flat => 0,
            IndexKind::IvfFlat => 1,
            IndexKind::IvfPq => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(IndexKind::Flat),
            1 => Some(IndexKind::IvfFlat),
            2 => Some(IndexKind::IvfPq),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Flat => "flat",
            IndexKind::IvfFlat => "ivf-flat",
            IndexKind::IvfPq => "ivf-pq",
        }
    }
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(IndexKind::Flat),
            "ivf-flat" | "ivfflat" => Ok(IndexKind::IvfFlat),
            "ivf-pq" | "ivfpq" => Ok(IndexKind::IvfPq),
            other => Err(Error::invalid(format!(
                "unknown index kind {other:?} (expected flat, ivf-flat or ivf-pq)"
            ))),
        }
    }
}

/// How to build an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildConfig {
    Flat,
    IvfFlat(IvfParams),
    IvfPq(IvfPqParams),
}

impl BuildConfig {
    pub fn kind(&self) -> IndexKind {
        match self {
            BuildConfig::Flat => IndexKind::Flat,
            BuildConfig::IvfFlat(_) => IndexKind::IvfFlat,
            BuildConfig::IvfPq(_) => IndexKind::IvfPq,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Index {
    Flat(FlatIndex),
    IvfFlat(IvfFlatIndex),
    IvfPq(IvfPqIndex),
}

impl Index {
    pub fn build(base: EmbeddingSet, config: &BuildConfig) -> Result<Self> {
        Ok(match config {
            BuildConfig::Flat => Index::Flat(FlatIndex::build(base)?),
            BuildConfig::IvfFlat(p) => Index::IvfFlat(IvfFlatIndex::build(&base, *p)?),
            BuildConfig::IvfPq(p) => Index::IvfPq(IvfPqIndex::build(&base, *p)?),
        })
    }

    pub fn kind(&self) -> IndexKind {
        match self {
            Index::Flat(_) => IndexKind::Flat,
            Index::IvfFlat(_) => IndexKind::IvfFlat,
            Index::IvfPq(_) => IndexKind::IvfPq,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Index::Flat(i) => i.dim(),
            Index::IvfFlat(i) => i.dim(),
            Index::IvfPq(i) => i.dim(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels().is_empty()
    }

    pub fn labels(&self) -> &[String] {
        match self {
            Index::Flat(i) => i.base().labels(),
            Index::IvfFlat(i) => i.labels(),
            Index::IvfPq(i) => i.labels(),
        }
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels()[id]
    }

    pub fn is_normalized(&self) -> bool {
        match self {
            Index::Flat(i) => i.base().is_normalized(),
            Index::IvfFlat(i) => i.is_normalized(),
            Index::IvfPq(i) => i.is_normalized(),
        }
    }

    pub fn nlist(&self) -> Option<usize> {
        match self {
            Index::Flat(_) => None,
            Index::IvfFlat(i) => Some(i.nlist()),
            Index::IvfPq(i) => Some(i.nlist()),
        }
    }

    pub fn pq_m(&self) -> Option<usize> {
        match self {
            Index::IvfPq(i) => Some(i.m()),
            _ => None,
        }
    }

    /// False when result distances are quantized estimates.
    pub fn exact_distances(&self) -> bool {
        !matches!(self, Index::IvfPq(_))
    }

    /// Probe count a search actually uses: `nprobe`, or the default for IVF
    /// kinds when `None`. Always `None` for the flat index.
    pub fn effective_nprobe(&self, nprobe: Option<usize>) -> Option<usize> {
        self.nlist()
            .map(|n| nprobe.unwrap_or_else(|| default_nprobe(n)))
    }

    /// `k` nearest neighbors of every query. `nprobe` is ignored by the flat index.
    pub fn search(
        &self,
        queries: Rows<'_>,
        k: usize,
        nprobe: Option<usize>,
    ) -> Result<Vec<SearchResult>> {
        let nprobe = self.effective_nprobe(nprobe);
        match self {
            Index::Flat(i) => i.search(queries, k),
            Index::IvfFlat(i) => i.search(queries, k, nprobe.unwrap_or(1)),
            Index::IvfPq(i) => i.search(queries, k, nprobe.unwrap_or(1)),
        }
    }
}

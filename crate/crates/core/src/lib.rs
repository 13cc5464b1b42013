//! Exact and approximate nearest-neighbor search over face embeddings.
//!
//! Three index kinds share one search contract: squared Euclidean distance,
//! results sorted ascending with ties broken by lower id.
//!
//! - [`flat::FlatIndex`]: exhaustive scan.
//! - [`ivf_flat::IvfFlatIndex`]: k-means coarse quantizer with exact distances inside probed lists.
//! - [`ivf_pq::IvfPqIndex`]: coarse quantizer plus product-quantized residuals scored by table lookup.
//!
//! [`gallery`] cleans identity folders and fuses paired embeddings, [`eval`]
//! splits data and benchmarks strategies, [`io`] and [`persist`] hold the file formats.

pub mod error;
pub mod eval;
pub mod flat;
pub mod gallery;
pub mod index;
pub mod io;
pub mod ivf_flat;
pub mod ivf_pq;
pub mod kmeans;
pub mod persist;
pub mod topk;
pub mod vector;

pub use error::{Error, FormatIssue, Result};
pub use index::{BuildConfig, Index, IndexKind};
pub use vector::{EmbeddingSet, Neighbor, Rows, SearchResult};

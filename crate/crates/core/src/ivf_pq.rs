//! Coarse quantizer + product quantization of residuals, searched with
//! asymmetric distance computation (ADC).
//!
//! Every base vector is stored as its coarse list plus `m` one-byte codes, one
//! per `dim / m`-wide slice of its residual `x - centroid`. At query time each
//! probed list gets an `m x 256` table of distances between the query's
//! residual slices and the sub-centroids; a candidate's estimated distance is
//! the sum of `m` table lookups.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::flat::{check_dim, par_map_queries};
use crate::ivf_flat::{check_nprobe, training_rows, IvfParams};
use crate::kmeans::{self, Codebook, KMeansParams};
use crate::topk::TopK;
use crate::vector::{l2sq, EmbeddingSet, Rows, SearchResult};

/// Sub-codebook size; codes are single bytes.
pub const KSUB: usize = 256;

/// Seed used to train sub-codebook `j` of a run seeded with `seed`.
pub fn subspace_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_add(1 + j as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IvfPqParams {
    pub ivf: IvfParams,
    pub m: usize,
}

impl IvfPqParams {
    pub fn new(nlist: usize, m: usize, seed: u64) -> Self {
        IvfPqParams {
            ivf: IvfParams::new(nlist, seed),
            m,
        }
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.ivf.max_iters = max_iters;
        self
    }

    pub fn with_train_size(mut self, train_size: usize) -> Self {
        self.ivf.train_size = Some(train_size);
        self
    }
}

/// `m` sub-codebooks over consecutive `dsub`-wide slices.
///
/// A sub-codebook holds fewer than [`KSUB`] centroids when its training
/// slices had fewer distinct values; [`Codebook::k`] records the actual size.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer {
    dsub: usize,
    codebooks: Vec<Codebook>,
}

impl ProductQuantizer {
    pub fn new(codebooks: Vec<Codebook>) -> Result<Self> {
        let dsub = codebooks
            .first()
            .map(Codebook::dim)
            .ok_or_else(|| Error::invalid("product quantizer needs at least one sub-codebook"))?;
        for cb in &codebooks {
            check_dim(dsub, cb.dim())?;
            if cb.k() > KSUB {
                return Err(Error::invalid(format!(
                    "sub-codebook of {} centroids does not fit byte codes",
                    cb.k()
                )));
            }
        }
        Ok(ProductQuantizer { dsub, codebooks })
    }

    /// Trains one sub-codebook per slice of `residuals`.
    pub fn train(residuals: Rows<'_>, m: usize, seed: u64, max_iters: usize) -> Result<Self> {
        let dim = residuals.dim();
        if m == 0 || !dim.is_multiple_of(m) {
            return Err(Error::invalid(format!(
                "m={m} must be positive and divide the dimension {dim}"
            )));
        }
        let dsub = dim / m;
        let mut codebooks = Vec::with_capacity(m);
        for j in 0..m {
            let slices = subspace_slices(residuals, m, j);
            let params = KMeansParams::new(KSUB, subspace_seed(seed, j)).with_max_iters(max_iters);
            codebooks.push(train_subspace(&slices, dsub, params)?);
        }
        ProductQuantizer::new(codebooks)
    }

    pub fn m(&self) -> usize {
        self.codebooks.len()
    }

    pub fn dsub(&self) -> usize {
        self.dsub
    }

    pub fn dim(&self) -> usize {
        self.dsub * self.m()
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    /// Writes the code of each residual slice into `codes`; ties pick the lower code.
    pub fn encode_residual(&self, residual: &[f32], codes: &mut [u8]) {
        for ((cb, slice), code) in self
            .codebooks
            .iter()
            .zip(residual.chunks_exact(self.dsub))
            .zip(codes.iter_mut())
        {
            *code = cb.nearest(slice).0 as u8;
        }
    }

    pub fn decode_residual(&self, codes: &[u8], out: &mut [f32]) {
        for ((cb, &code), dst) in self
            .codebooks
            .iter()
            .zip(codes)
            .zip(out.chunks_exact_mut(self.dsub))
        {
            dst.copy_from_slice(cb.centroid(code as usize));
        }
    }

    /// Distance table between the slices of a residual query and every sub-centroid.
    pub fn adc_table(&self, residual_query: &[f32]) -> AdcTable {
        let mut values = vec![f64::INFINITY; self.m() * KSUB];
        for (j, (cb, slice)) in self
            .codebooks
            .iter()
            .zip(residual_query.chunks_exact(self.dsub))
            .enumerate()
        {
            let row = &mut values[j * KSUB..j * KSUB + cb.k()];
            for (b, cell) in row.iter_mut().enumerate() {
                *cell = l2sq(slice, cb.centroid(b));
            }
        }
        AdcTable { values }
    }
}

/// Row-major `m x 256` lookup table; unused cells of short codebooks are infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcTable {
    values: Vec<f64>,
}

impl AdcTable {
    pub fn m(&self) -> usize {
        self.values.len() / KSUB
    }

    pub fn get(&self, j: usize, code: u8) -> f64 {
        self.values[j * KSUB + code as usize]
    }

    /// Estimated squared distance of an encoded vector: sum of `m` lookups.
    #[inline]
    pub fn distance(&self, codes: &[u8]) -> f64 {
        let mut acc = 0.0;
        for (row, &c) in self.values.chunks_exact(KSUB).zip(codes) {
            acc += row[c as usize];
        }
        acc
    }
}

fn subspace_slices(rows: Rows<'_>, m: usize, j: usize) -> Vec<f32> {
    let dsub = rows.dim() / m;
    let mut out = Vec::with_capacity(rows.len() * dsub);
    for x in rows.iter() {
        out.extend_from_slice(&x[j * dsub..(j + 1) * dsub]);
    }
    out
}

/// k-means over one subspace; when the slices take at most `params.k` distinct
/// values the codebook is trained on the distinct values alone with `k` capped
/// to their count, which reproduces every slice exactly.
fn train_subspace(slices: &[f32], dsub: usize, params: KMeansParams) -> Result<Codebook> {
    let mut seen = HashSet::new();
    let mut distinct = Vec::new();
    for s in slices.chunks_exact(dsub) {
        let key: Vec<u32> = s.iter().map(|x| x.to_bits()).collect();
        if seen.insert(key) {
            distinct.extend_from_slice(s);
            if seen.len() > params.k {
                return kmeans::train(Rows::new(dsub, slices)?, params);
            }
        }
    }
    let k = seen.len();
    kmeans::train(Rows::new(dsub, &distinct)?, KMeansParams { k, ..params })
}

/// One posting list: ids in insertion order and their `m`-byte codes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PqList {
    pub ids: Vec<usize>,
    pub codes: Vec<u8>,
}

impl PqList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Trains the coarse codebook on the base, then one PQ codebook per residual
/// subspace.
pub fn train(base: Rows<'_>, params: IvfPqParams) -> Result<(Codebook, ProductQuantizer)> {
    let IvfPqParams { ivf, m } = params;
    let (n, dim) = (base.len(), base.dim());
    if m == 0 || dim % m != 0 {
        return Err(Error::invalid(format!(
            "m={m} must be positive and divide the dimension {dim}"
        )));
    }
    if n < KSUB {
        return Err(Error::InsufficientData(format!(
            "PQ training needs at least {KSUB} vectors, got {n}"
        )));
    }
    if ivf.nlist == 0 {
        return Err(Error::invalid("nlist must be at least 1"));
    }
    if ivf.nlist > n {
        return Err(Error::InsufficientData(format!(
            "nlist={} exceeds the {n} base vectors",
            ivf.nlist
        )));
    }
    let train = training_rows(base, &ivf);
    let train = Rows::new(dim, &train)?;
    let coarse = kmeans::train(train, ivf.kmeans())?;
    let residuals = residuals(train, &coarse);
    let pq = ProductQuantizer::train(Rows::new(dim, &residuals)?, m, ivf.seed, ivf.max_iters)?;
    Ok((coarse, pq))
}

/// `x - nearest coarse centroid` for every row.
pub fn residuals(rows: Rows<'_>, coarse: &Codebook) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.as_slice().len());
    for x in rows.iter() {
        let c = coarse.centroid(coarse.nearest(x).0);
        out.extend(x.iter().zip(c).map(|(a, b)| a - b));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfPqIndex {
    dim: usize,
    coarse: Codebook,
    pq: ProductQuantizer,
    lists: Vec<PqList>,
    labels: Vec<String>,
    normalized: bool,
}

impl IvfPqIndex {
    pub fn build(base: &EmbeddingSet, params: IvfPqParams) -> Result<Self> {
        let (coarse, pq) = train(base.rows(), params)?;
        Self::with_quantizers(base, coarse, pq)
    }

    /// Encodes every base vector with already trained quantizers.
    pub fn with_quantizers(
        base: &EmbeddingSet,
        coarse: Codebook,
        pq: ProductQuantizer,
    ) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::Empty("cannot build an index over an empty set"));
        }
        check_dim(coarse.dim(), base.dim())?;
        check_dim(pq.dim(), base.dim())?;
        let mut index = IvfPqIndex {
            dim: base.dim(),
            lists: vec![PqList::default(); coarse.k()],
            coarse,
            pq,
            labels: base.labels().to_vec(),
            normalized: base.is_normalized(),
        };
        let m = index.pq.m();
        let mut codes = vec![0u8; m];
        for (id, x) in base.rows().iter().enumerate() {
            let list = index.encode_into(x, &mut codes);
            index.lists[list].ids.push(id);
            index.lists[list].codes.extend_from_slice(&codes);
        }
        Ok(index)
    }

    /// Reassembles a deserialized index, checking the partition and code invariants.
    pub fn from_parts(
        coarse: Codebook,
        pq: ProductQuantizer,
        lists: Vec<PqList>,
        labels: Vec<String>,
        normalized: bool,
    ) -> Result<Self> {
        let dim = coarse.dim();
        if pq.dim() != dim {
            return Err(Error::Invariant(format!(
                "PQ covers {} dimensions, coarse quantizer {dim}",
                pq.dim()
            )));
        }
        if lists.len() != coarse.k() {
            return Err(Error::Invariant(format!(
                "{} posting lists for {} coarse centroids",
                lists.len(),
                coarse.k()
            )));
        }
        let m = pq.m();
        let mut seen = vec![false; labels.len()];
        for list in &lists {
            if list.codes.len() != list.ids.len() * m {
                return Err(Error::Invariant("posting list code length".into()));
            }
            for &id in &list.ids {
                if id >= seen.len() || std::mem::replace(&mut seen[id], true) {
                    return Err(Error::Invariant(format!("id {id} missing or duplicated")));
                }
            }
            for codes in list.codes.chunks_exact(m) {
                for (cb, &c) in pq.codebooks().iter().zip(codes) {
                    if c as usize >= cb.k() {
                        return Err(Error::Invariant(format!(
                            "code {c} out of range for a {}-entry sub-codebook",
                            cb.k()
                        )));
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invariant(
                "not every id appears in a posting list".into(),
            ));
        }
        Ok(IvfPqIndex {
            dim,
            coarse,
            pq,
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

    pub fn m(&self) -> usize {
        self.pq.m()
    }

    pub fn coarse(&self) -> &Codebook {
        &self.coarse
    }

    pub fn pq(&self) -> &ProductQuantizer {
        &self.pq
    }

    pub fn lists(&self) -> &[PqList] {
        &self.lists
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Coarse list and PQ codes of `x`.
    pub fn encode(&self, x: &[f32]) -> Result<(usize, Vec<u8>)> {
        check_dim(self.dim, x.len())?;
        let mut codes = vec![0u8; self.pq.m()];
        let list = self.encode_into(x, &mut codes);
        Ok((list, codes))
    }

    fn encode_into(&self, x: &[f32], codes: &mut [u8]) -> usize {
        let list = self.coarse.nearest(x).0;
        let residual: Vec<f32> = x
            .iter()
            .zip(self.coarse.centroid(list))
            .map(|(a, b)| a - b)
            .collect();
        self.pq.encode_residual(&residual, codes);
        list
    }

    /// Coarse centroid plus the concatenated sub-centroids selected by `codes`.
    pub fn reconstruct(&self, list: usize, codes: &[u8]) -> Vec<f32> {
        let mut out = vec![0.0; self.dim];
        self.pq.decode_residual(codes, &mut out);
        for (o, c) in out.iter_mut().zip(self.coarse.centroid(list)) {
            *o += c;
        }
        out
    }

    /// ADC table for `query` against the vectors of coarse list `list`.
    pub fn adc_table(&self, query: &[f32], list: usize) -> AdcTable {
        let residual: Vec<f32> = query
            .iter()
            .zip(self.coarse.centroid(list))
            .map(|(a, b)| a - b)
            .collect();
        self.pq.adc_table(&residual)
    }

    pub fn search_one(&self, query: &[f32], k: usize, nprobe: usize) -> Result<SearchResult> {
        self.check(query.len(), k, nprobe)?;
        Ok(self.scan(query, k, nprobe))
    }

    /// Top-`k` by ADC estimate; returned distances are estimates, not exact.
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
        let m = self.pq.m();
        let mut top = TopK::new(k);
        for c in self.coarse.nearest_n(query, nprobe) {
            let list = &self.lists[c];
            if list.is_empty() {
                continue;
            }
            let table = self.adc_table(query, c);
            for (&id, codes) in list.ids.iter().zip(list.codes.chunks_exact(m)) {
                top.push(id, table.distance(codes));
            }
        }
        top.into_result()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, n: usize, dim: usize) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingSet::new(dim, data, (0..n).map(|i| format!("p{i}")).collect(), false).unwrap()
    }

    #[test]
    fn parameter_errors() {
        let base = random_set(1, 300, 12);
        assert!(train(base.rows(), IvfPqParams::new(4, 5, 0)).is_err());
        assert!(train(base.rows(), IvfPqParams::new(4, 0, 0)).is_err());
        let small = random_set(2, 255, 12);
        assert!(matches!(
            train(small.rows(), IvfPqParams::new(4, 4, 0)),
            Err(Error::InsufficientData(_))
        ));
        let idx = IvfPqIndex::build(&base, IvfPqParams::new(4, 4, 0)).unwrap();
        assert!(idx.search_one(&[0.0; 12], 1, 5).is_err());
        assert!(idx.encode(&[0.0; 11]).is_err());
    }

    #[test]
    fn zero_residuals_collapse_codebooks() {
        // 4 distinct points, each repeated 100 times: with nlist=4 every vector is a centroid.
        let pts = [
            [1.0f32, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let rows: Vec<[f32; 4]> = (0..400).map(|i| pts[i % 4]).collect();
        let base = EmbeddingSet::from_rows(&rows, (0..400).map(|i| format!("{}", i % 4)).collect())
            .unwrap();
        let idx = IvfPqIndex::build(&base, IvfPqParams::new(4, 2, 3)).unwrap();
        for cb in idx.pq().codebooks() {
            assert_eq!(cb.k(), 1);
            assert_eq!(cb.centroid(0), &[0.0, 0.0]);
        }
        let (list, codes) = idx.encode(&pts[2]).unwrap();
        assert_eq!(idx.coarse().centroid(list), &pts[2]);
        assert_eq!(codes, vec![0, 0]);
        let q = [0.3f32, -0.2, 0.9, 0.1];
        for c in 0..4 {
            let t = idx.adc_table(&q, c);
            let want = l2sq(&q, idx.coarse().centroid(c));
            assert!((t.distance(&[0, 0]) - want).abs() <= 1e-4);
        }
    }

    #[test]
    fn encode_is_deterministic_and_table_decomposes() {
        let base = random_set(3, 1200, 16);
        let idx = IvfPqIndex::build(&base, IvfPqParams::new(8, 4, 3)).unwrap();
        let q = random_set(4, 30, 16);
        for i in 0..30 {
            let x = base.row(i * 7);
            let (list, codes) = idx.encode(x).unwrap();
            assert_eq!(idx.encode(x).unwrap(), (list, codes.clone()));
            let recon = idx.reconstruct(list, &codes);
            let t = idx.adc_table(q.row(i), list);
            assert!((t.distance(&codes) - l2sq(q.row(i), &recon)).abs() <= 1e-4);
        }
    }

    #[test]
    fn subspace_codebooks_match_standalone_kmeans() {
        let base = random_set(5, 5000, 64);
        let params = IvfPqParams::new(16, 8, 42).with_max_iters(8);
        let (coarse, pq) = train(base.rows(), params).unwrap();
        let res = residuals(base.rows(), &coarse);
        let res = Rows::new(64, &res).unwrap();
        for j in 0..8 {
            let slices = subspace_slices(res, 8, j);
            let oracle = kmeans::train(
                Rows::new(8, &slices).unwrap(),
                KMeansParams::new(256, subspace_seed(42, j)).with_max_iters(8),
            )
            .unwrap();
            assert_eq!(pq.codebooks()[j].inertia(), oracle.inertia());
            assert_eq!(&pq.codebooks()[j], &oracle);
        }
    }

    #[test]
    fn lists_partition_and_store_m_bytes() {
        let base = random_set(6, 700, 8);
        let idx = IvfPqIndex::build(&base, IvfPqParams::new(5, 4, 1)).unwrap();
        let mut ids: Vec<usize> = idx.lists().iter().flat_map(|l| l.ids.clone()).collect();
        ids.sort();
        assert_eq!(ids, (0..700).collect::<Vec<_>>());
        for l in idx.lists() {
            assert_eq!(l.codes.len(), 4 * l.len());
        }
    }
}

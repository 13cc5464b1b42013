//! VIDX index files.
//!
//! ```text
//! "VIDX" · u32 version=1 · u8 kind (0 flat, 1 ivf-flat, 2 ivf-pq) · u32 dim · u64 count
//! kind payload
//!   flat      count*dim f32 in id order
//!   ivf-flat  codebook · nlist lists of { u64 len · len u64 ids · len*dim f32 }
//!   ivf-pq    codebook · u32 m · m codebooks · nlist lists of { u64 len · len u64 ids · len*m u8 codes }
//! u8 normalized · count labels of { u32 byte length · UTF-8 bytes }
//! u64 CRC-64/XZ of every preceding byte
//! ```
//!
//! A codebook block is `u32 dim · u32 k · f64 inertia · k*dim f32`. All
//! integers and floats are little-endian.

use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, FormatIssue, Result};
use crate::flat::FlatIndex;
use crate::index::{Index, IndexKind};
use crate::io::write_atomic;
use crate::ivf_flat::{FlatList, IvfFlatIndex};
use crate::ivf_pq::{IvfPqIndex, PqList, ProductQuantizer};
use crate::kmeans::Codebook;
use crate::vector::EmbeddingSet;

pub const VIDX_MAGIC: &[u8; 4] = b"VIDX";
pub const VIDX_VERSION: u32 = 1;
pub const VIDX_HEADER_LEN: usize = 21;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn codebook(&mut self, cb: &Codebook) {
        self.u32(cb.dim());
        self.u32(cb.k());
        self.buf.extend_from_slice(&cb.inertia().to_le_bytes());
        self.f32s(cb.centroids().as_slice());
    }
    fn ids(&mut self, ids: &[usize]) {
        self.u64(ids.len());
        for &id in ids {
            self.u64(id);
        }
    }
}

pub fn encode_index(index: &Index) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(VIDX_MAGIC);
    w.u32(VIDX_VERSION as usize);
    w.u8(index.kind().code());
    w.u32(index.dim());
    w.u64(index.len());
    match index {
        Index::Flat(i) => w.f32s(i.base().data()),
        Index::IvfFlat(i) => {
            w.codebook(i.coarse());
            for list in i.lists() {
                w.ids(&list.ids);
                w.f32s(&list.vectors);
            }
        }
        Index::IvfPq(i) => {
            w.codebook(i.coarse());
            w.u32(i.m());
            for cb in i.pq().codebooks() {
                w.codebook(cb);
            }
            for list in i.lists() {
                w.ids(&list.ids);
                w.buf.extend_from_slice(&list.codes);
            }
        }
    }
    w.u8(index.is_normalized() as u8);
    for label in index.labels() {
        w.u32(label.len());
        w.buf.extend_from_slice(label.as_bytes());
    }
    let crc = checksum(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    w.buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, issue: FormatIssue) -> Error {
        Error::format(self.pos as u64, issue)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(FormatIssue::Truncated));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| {
            Error::format(
                at as u64,
                FormatIssue::Inconsistent("length overflow".into()),
            )
        })
    }

    /// `n` items of `width` bytes, checked against the remaining length first.
    fn block(&mut self, n: usize, width: usize) -> Result<&'a [u8]> {
        let len = n
            .checked_mul(width)
            .ok_or_else(|| self.err(FormatIssue::Truncated))?;
        self.take(len)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let start = self.pos;
        let raw = self.block(n, 4)?;
        let mut out = Vec::with_capacity(n);
        for (i, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(
                    (start + 4 * i) as u64,
                    FormatIssue::NonFinite,
                ));
            }
            out.push(v);
        }
        Ok(out)
    }

    fn codebook(&mut self) -> Result<Codebook> {
        let at = self.pos;
        let dim = self.u32()?;
        let k = self.u32()?;
        let inertia = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if dim == 0 || k == 0 {
            return Err(Error::format(
                at as u64,
                FormatIssue::Inconsistent("empty codebook".into()),
            ));
        }
        let centroids = self.f32s(k * dim)?;
        Codebook::new(k, dim, centroids, inertia)
            .map_err(|e| Error::format(at as u64, FormatIssue::Inconsistent(e.to_string())))
    }

    fn ids(&mut self, count: usize) -> Result<Vec<usize>> {
        let at = self.pos;
        let n = self.u64()?;
        if n > count {
            return Err(Error::format(
                at as u64,
                FormatIssue::Inconsistent(format!("list of {n} ids in an index of {count}")),
            ));
        }
        let raw = self.block(n, 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect())
    }
}

/// Parses a VIDX byte buffer, verifying the trailing checksum first.
pub fn decode_index(bytes: &[u8]) -> Result<Index> {
    if bytes.len() >= 4 && &bytes[..4] != VIDX_MAGIC {
        return Err(Error::format(0, FormatIssue::BadMagic));
    }
    if bytes.len() < VIDX_HEADER_LEN + 8 {
        return Err(Error::format(bytes.len() as u64, FormatIssue::Truncated));
    }
    let body_len = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = checksum(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::format(
            body_len as u64,
            FormatIssue::Checksum { stored, computed },
        ));
    }

    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 4,
    };
    let version = r.u32()? as u32;
    if version != VIDX_VERSION {
        return Err(Error::format(4, FormatIssue::UnsupportedVersion(version)));
    }
    let kind_code = r.u8()?;
    let kind = IndexKind::from_code(kind_code)
        .ok_or_else(|| Error::format(8, FormatIssue::BadIndexKind(kind_code)))?;
    let dim = r.u32()?;
    let count = r.u64()?;
    if dim == 0 {
        return Err(Error::format(
            9,
            FormatIssue::Inconsistent("dim is zero".into()),
        ));
    }

    enum Payload {
        Flat(Vec<f32>),
        IvfFlat(Codebook, Vec<FlatList>),
        IvfPq(Codebook, ProductQuantizer, Vec<PqList>),
    }

    let payload_at = r.pos as u64;
    let payload = match kind {
        IndexKind::Flat => Payload::Flat(r.f32s(count.saturating_mul(dim))?),
        IndexKind::IvfFlat => {
            let coarse = r.codebook()?;
            let mut lists = Vec::with_capacity(coarse.k());
            for _ in 0..coarse.k() {
                let ids = r.ids(count)?;
                let vectors = r.f32s(ids.len() * dim)?;
                lists.push(FlatList { ids, vectors });
            }
            Payload::IvfFlat(coarse, lists)
        }
        IndexKind::IvfPq => {
            let coarse = r.codebook()?;
            let m_at = r.pos as u64;
            let m = r.u32()?;
            if m == 0 || m > dim {
                return Err(Error::format(
                    m_at,
                    FormatIssue::Inconsistent(format!("m = {m}")),
                ));
            }
            let mut codebooks = Vec::with_capacity(m);
            for _ in 0..m {
                codebooks.push(r.codebook()?);
            }
            let pq = ProductQuantizer::new(codebooks)
                .map_err(|e| Error::format(m_at, FormatIssue::Inconsistent(e.to_string())))?;
            let mut lists = Vec::with_capacity(coarse.k());
            for _ in 0..coarse.k() {
                let ids = r.ids(count)?;
                let codes = r.block(ids.len(), m)?.to_vec();
                lists.push(PqList { ids, codes });
            }
            Payload::IvfPq(coarse, pq, lists)
        }
    };

    let normalized = match r.u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(r.err(FormatIssue::Inconsistent(format!(
                "normalized flag {other}"
            ))));
        }
    };
    let mut labels = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = r.u32()?;
        let at = r.pos as u64;
        let raw = r.take(len)?;
        let label =
            std::str::from_utf8(raw).map_err(|_| Error::format(at, FormatIssue::InvalidUtf8))?;
        labels.push(label.to_string());
    }
    if r.pos != body_len {
        return Err(r.err(FormatIssue::TrailingBytes));
    }

    let inconsistent =
        |e: Error| Error::format(payload_at, FormatIssue::Inconsistent(e.to_string()));
    let index = match payload {
        Payload::Flat(data) => {
            let set = EmbeddingSet::new(dim, data, labels, normalized).map_err(inconsistent)?;
            Index::Flat(FlatIndex::build(set).map_err(inconsistent)?)
        }
        Payload::IvfFlat(coarse, lists) => {
            if coarse.dim() != dim {
                return Err(inconsistent(Error::DimensionMismatch {
                    expected: dim,
                    found: coarse.dim(),
                }));
            }
            Index::IvfFlat(
                IvfFlatIndex::from_parts(coarse, lists, labels, normalized)
                    .map_err(inconsistent)?,
            )
        }
        Payload::IvfPq(coarse, pq, lists) => {
            if coarse.dim() != dim {
                return Err(inconsistent(Error::DimensionMismatch {
                    expected: dim,
                    found: coarse.dim(),
                }));
            }
            Index::IvfPq(
                IvfPqIndex::from_parts(coarse, pq, lists, labels, normalized)
                    .map_err(inconsistent)?,
            )
        }
    };
    Ok(index)
}

pub fn save_index(index: &Index, path: &Path) -> Result<()> {
    write_atomic(path, &encode_index(index))
}

pub fn load_index(path: &Path) -> Result<Index> {
    decode_index(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::BuildConfig;
    use crate::ivf_flat::IvfParams;
    use crate::ivf_pq::IvfPqParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, n: usize, dim: usize) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingSet::new(
            dim,
            data,
            (0..n).map(|i| format!("person-{}", i / 3)).collect(),
            false,
        )
        .unwrap()
    }

    fn all_kinds() -> Vec<Index> {
        let base = random_set(1, 600, 16);
        vec![
            Index::build(base.clone(), &BuildConfig::Flat).unwrap(),
            Index::build(base.clone(), &BuildConfig::IvfFlat(IvfParams::new(8, 2))).unwrap(),
            Index::build(base, &BuildConfig::IvfPq(IvfPqParams::new(8, 4, 2))).unwrap(),
        ]
    }

    #[test]
    fn round_trip_every_kind() {
        for idx in all_kinds() {
            let bytes = encode_index(&idx);
            let back = decode_index(&bytes).unwrap();
            assert_eq!(back, idx);
            assert_eq!(encode_index(&back), bytes);
        }
    }

    #[test]
    fn header_fields() {
        for idx in all_kinds() {
            let bytes = encode_index(&idx);
            assert_eq!(&bytes[..4], b"VIDX");
            assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
            assert_eq!(bytes[8], idx.kind().code());
            assert_eq!(&bytes[9..13], &16u32.to_le_bytes());
            assert_eq!(&bytes[13..21], &600u64.to_le_bytes());
        }
    }

    #[test]
    fn pq_lists_cost_m_bytes_plus_id_per_vector() {
        let idx = &all_kinds()[2];
        let Index::IvfPq(pq) = idx else {
            unreachable!()
        };
        let codebooks: usize = std::iter::once(pq.coarse())
            .chain(pq.pq().codebooks())
            .map(|cb| 16 + 4 * cb.k() * cb.dim())
            .sum();
        let labels: usize = pq.labels().iter().map(|l| 4 + l.len()).sum();
        let lists = pq.nlist() * 8 + pq.len() * (8 + pq.m());
        let expected = VIDX_HEADER_LEN + codebooks + 4 + lists + 1 + labels + 8;
        assert_eq!(encode_index(idx).len(), expected);
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let bytes = encode_index(&all_kinds()[1]);
        let mut bad = bytes.clone();
        bad[100] ^= 0x40;
        let err = decode_index(&bad).unwrap_err();
        assert!(matches!(
            err,
            Error::Format { offset, issue: FormatIssue::Checksum { .. } } if offset == (bytes.len() - 8) as u64
        ));
        let mut magic = bytes.clone();
        magic[1] = b'Y';
        assert!(matches!(
            decode_index(&magic),
            Err(Error::Format {
                offset: 0,
                issue: FormatIssue::BadMagic
            })
        ));
        assert!(decode_index(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn bad_kind_with_valid_checksum() {
        let mut bytes = encode_index(&all_kinds()[0]);
        bytes[8] = 7;
        let n = bytes.len() - 8;
        let crc = checksum(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_index(&bytes),
            Err(Error::Format {
                offset: 8,
                issue: FormatIssue::BadIndexKind(7)
            })
        ));
    }
}

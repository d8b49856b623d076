//! Exact L2 retrieval over fixed-dimension image descriptors.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;

use crate::binio::{check_finite_f32, check_finite_f64, read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const CDS_MAGIC: &[u8; 4] = b"CDS1";
pub const CDS_VERSION: u16 = 1;

/// Immutable, contiguous descriptor matrix keyed by image id. Safe to query
/// from many threads at once.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub image_id: String,
    pub distance: f64,
}

/// Hits sorted by ascending distance, ties by ascending image id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedList {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.image_id.as_str())
    }
}

fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    a.distance.total_cmp(&b.distance).then_with(|| a.image_id.cmp(&b.image_id))
}

impl RetrievalIndex {
    /// Builds an index over `entries`, each of length `dim`.
    pub fn build<I, S, V>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, V)>,
        S: Into<String>,
        V: AsRef<[f64]>,
    {
        let mut ids = Vec::new();
        let mut seen = HashSet::new();
        let mut data = Vec::new();
        for (id, v) in entries {
            let id = id.into();
            let v = v.as_ref();
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            check_finite_f64(v)?;
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
            data.extend_from_slice(v);
        }
        Ok(RetrievalIndex { dim, ids, data })
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

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|x| x == id).map(|i| self.descriptor(i))
    }

    /// Full scan by ascending L2 distance. `top_k = None` returns every
    /// non-excluded entry.
    pub fn query(&self, q: &[f64], top_k: Option<usize>, exclude: &HashSet<String>) -> Result<RankedList> {
        self.query_as("", q, top_k, exclude)
    }

    pub fn query_as(
        &self,
        query_id: &str,
        q: &[f64],
        top_k: Option<usize>,
        exclude: &HashSet<String>,
    ) -> Result<RankedList> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        check_finite_f64(q)?;
        let mut hits: Vec<Hit> = self
            .ids
            .iter()
            .enumerate()
            .filter(|(_, id)| !exclude.contains(*id))
            .map(|(i, id)| Hit {
                image_id: id.clone(),
                distance: squared_l2(q, self.descriptor(i)).sqrt(),
            })
            .collect();
        hits.sort_by(hit_order);
        if let Some(k) = top_k {
            hits.truncate(k);
        }
        Ok(RankedList {
            query_id: query_id.to_string(),
            hits,
        })
    }

    /// Queries with a stored entry's own descriptor.
    pub fn query_by_id(&self, id: &str, top_k: Option<usize>, exclude: &HashSet<String>) -> Result<RankedList> {
        let q = self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        self.query_as(id, q, top_k, exclude)
    }

    /// Serializes as a `.cds1` file.
    ///
    /// Layout (little-endian): magic `CDS1`, version u16, count u32, dim u32,
    /// then per entry image_id (u32 length + UTF-8) and `dim` f32 values.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_header(CDS_MAGIC, CDS_VERSION, 8 + self.data.len() * 4 + self.ids.len() * 16);
        w.len_u32(self.len())?;
        w.len_u32(self.dim)?;
        for (i, id) in self.ids.iter().enumerate() {
            w.str(id);
            for &x in self.descriptor(i) {
                w.f32(x as f32);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, "cds", CDS_MAGIC, CDS_VERSION)?;
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id = r.str()?;
            r.require(dim * 4)?;
            let v = r.f32_vec(dim)?;
            check_finite_f32(&v)?;
            entries.push((id, v.into_iter().map(f64::from).collect::<Vec<f64>>()));
        }
        r.finish()?;
        Self::build(dim, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[inline]
pub fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize the scan
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for l in 0..4 {
            let d = ca[l] - cb[l];
            acc[l] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

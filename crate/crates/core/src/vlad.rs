//! VLAD encoding: per-word sums of residuals to the nearest visual word,
//! concatenated over the vocabulary, plus the normalization schemes and
//! multi-scale concatenation applied on top of it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binio::{check_finite_f32, read_file, write_file, ByteReader, ByteWriter};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::feature_io::{l2_normalize_in_place, DescriptorSet};

pub const VLAD_MAGIC: &[u8; 4] = b"VLD1";
pub const VLAD_VERSION: u16 = 1;

/// Normalization applied to a VLAD vector so far.
///
/// Legal transitions: `raw -> intra -> intra+global_l2` and
/// `raw -> ssr+global_l2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Normalization {
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "intra")]
    Intra,
    #[serde(rename = "ssr")]
    Ssr,
    #[serde(rename = "intra+global_l2")]
    IntraGlobalL2,
    #[serde(rename = "ssr+global_l2")]
    SsrGlobalL2,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::Raw => "raw",
            Normalization::Intra => "intra",
            Normalization::Ssr => "ssr",
            Normalization::IntraGlobalL2 => "intra+global_l2",
            Normalization::SsrGlobalL2 => "ssr+global_l2",
        }
    }

    fn code(self) -> u8 {
        match self {
            Normalization::Raw => 0,
            Normalization::Intra => 1,
            Normalization::Ssr => 2,
            Normalization::IntraGlobalL2 => 3,
            Normalization::SsrGlobalL2 => 4,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Normalization::Raw,
            1 => Normalization::Intra,
            2 => Normalization::Ssr,
            3 => Normalization::IntraGlobalL2,
            4 => Normalization::SsrGlobalL2,
            _ => return Err(Error::invalid("vlad header", format!("unknown normalization code {c}"))),
        })
    }

    pub fn includes_intra(self) -> bool {
        matches!(self, Normalization::Intra | Normalization::IntraGlobalL2)
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "raw" => Normalization::Raw,
            "intra" => Normalization::Intra,
            "ssr" => Normalization::Ssr,
            "intra+global_l2" => Normalization::IntraGlobalL2,
            "ssr+global_l2" => Normalization::SsrGlobalL2,
            _ => return Err(Error::invalid("normalization", format!("unknown mode {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VladDescriptor {
    pub image_id: String,
    pub layer_name: String,
    pub scales: Vec<u32>,
    pub k: usize,
    pub dim_per_word: usize,
    pub values: Vec<f64>,
    pub normalization: Normalization,
}

/// Encodes an L2-normalized descriptor set against a vocabulary.
///
/// Residuals are accumulated in row-major grid order whatever order the set
/// is stored in, so the output is bit-identical under permutation.
pub fn encode_vlad(ds: &DescriptorSet, cb: &Codebook) -> Result<VladDescriptor> {
    if !ds.normalized {
        return Err(Error::Unnormalized);
    }
    if ds.dim != cb.dim {
        return Err(Error::DimensionMismatch {
            expected: cb.dim,
            actual: ds.dim,
        });
    }
    let d = cb.dim;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| ds.positions()[i]);

    let mut values = vec![0.0; cb.k * d];
    for i in order {
        let f = ds.get(i);
        let (word, _) = cb.nearest(f);
        let c = cb.centroid(word);
        for ((acc, x), cx) in values[word * d..(word + 1) * d].iter_mut().zip(f).zip(c) {
            *acc += x - cx;
        }
    }
    Ok(VladDescriptor {
        image_id: ds.image_id.clone(),
        layer_name: ds.layer_name.clone(),
        scales: vec![ds.scale_id],
        k: cb.k,
        dim_per_word: d,
        values,
        normalization: Normalization::Raw,
    })
}

impl VladDescriptor {
    fn expect_state(&self, expected: Normalization) -> Result<()> {
        if self.normalization != expected {
            return Err(Error::NormalizationState {
                expected: expected.as_str(),
                actual: self.normalization.as_str(),
            });
        }
        Ok(())
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim_per_word)
    }

    /// L2-normalizes every per-word block independently; zero blocks stay zero.
    pub fn intra_normalize(mut self) -> Result<Self> {
        self.expect_state(Normalization::Raw)?;
        for block in self.values.chunks_exact_mut(self.dim_per_word) {
            l2_normalize_in_place(block);
        }
        self.normalization = Normalization::Intra;
        Ok(self)
    }

    /// Signed square root followed by whole-vector L2 normalization.
    pub fn ssr_normalize(mut self) -> Result<Self> {
        self.expect_state(Normalization::Raw)?;
        for x in self.values.iter_mut() {
            *x = x.signum() * x.abs().sqrt();
        }
        l2_normalize_in_place(&mut self.values);
        self.normalization = Normalization::SsrGlobalL2;
        Ok(self)
    }

    pub fn global_l2(mut self) -> Result<Self> {
        self.expect_state(Normalization::Intra)?;
        l2_normalize_in_place(&mut self.values);
        self.normalization = Normalization::IntraGlobalL2;
        Ok(self)
    }

    /// Applies the transitions needed to reach `target` from a raw vector.
    pub fn normalize_to(self, target: Normalization) -> Result<Self> {
        match target {
            Normalization::Raw => {
                self.expect_state(Normalization::Raw)?;
                Ok(self)
            }
            Normalization::Intra => self.intra_normalize(),
            Normalization::IntraGlobalL2 => self.intra_normalize()?.global_l2(),
            Normalization::SsrGlobalL2 => self.ssr_normalize(),
            Normalization::Ssr => Err(Error::invalid(
                "normalization",
                "ssr is always followed by global L2; use ssr+global_l2",
            )),
        }
    }
}

/// Concatenates per-scale VLADs of one image in ascending scale order.
pub fn concat_multiscale(parts: &[VladDescriptor]) -> Result<VladDescriptor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("multi-scale parts", "empty list"))?;
    let mut sorted: Vec<&VladDescriptor> = parts.iter().collect();
    sorted.sort_by_key(|p| p.scales.iter().min().copied());
    let mut scales = Vec::new();
    for p in &sorted {
        if p.image_id != first.image_id
            || p.layer_name != first.layer_name
            || p.k != first.k
            || p.dim_per_word != first.dim_per_word
            || p.normalization != first.normalization
        {
            return Err(Error::invalid(
                "multi-scale parts",
                format!("metadata of {}/{:?} differs from {}/{:?}", p.image_id, p.scales, first.image_id, first.scales),
            ));
        }
        for &s in &p.scales {
            if scales.contains(&s) {
                return Err(Error::invalid("multi-scale parts", format!("duplicate scale {s}")));
            }
            scales.push(s);
        }
    }
    scales.sort_unstable();
    Ok(VladDescriptor {
        image_id: first.image_id.clone(),
        layer_name: first.layer_name.clone(),
        scales,
        k: first.k,
        dim_per_word: first.dim_per_word,
        values: sorted.iter().flat_map(|p| p.values.iter().copied()).collect(),
        normalization: first.normalization,
    })
}

/// Writes a `.vlad` file holding descriptors that share layer, scales, `k`,
/// per-word dimension and normalization.
///
/// Layout (little-endian): magic `VLD1`, version u16, count u32, k u32,
/// dim_per_word u32, normalization u8, scale count u32, scales u32 each,
/// layer_name (u32 length + UTF-8); then per record image_id (u32 length +
/// UTF-8) and `k * dim_per_word * scales` f32 values.
pub fn write_vlad(set: &[VladDescriptor]) -> Result<Vec<u8>> {
    let first = set
        .first()
        .ok_or_else(|| Error::invalid("vlad set", "cannot write an empty set"))?;
    let len = first.values.len();
    let mut w = ByteWriter::with_header(VLAD_MAGIC, VLAD_VERSION, set.len() * (len * 4 + 16));
    w.len_u32(set.len())?;
    w.len_u32(first.k)?;
    w.len_u32(first.dim_per_word)?;
    w.u8(first.normalization.code());
    w.len_u32(first.scales.len())?;
    for &s in &first.scales {
        w.u32(s);
    }
    w.str(&first.layer_name);
    for v in set {
        if v.layer_name != first.layer_name
            || v.scales != first.scales
            || v.k != first.k
            || v.dim_per_word != first.dim_per_word
            || v.normalization != first.normalization
        {
            return Err(Error::invalid("vlad set", format!("record {} has different metadata", v.image_id)));
        }
        if v.values.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                actual: v.values.len(),
            });
        }
        w.str(&v.image_id);
        for &x in &v.values {
            w.f32(x as f32);
        }
    }
    Ok(w.finish())
}

pub fn read_vlad(bytes: &[u8]) -> Result<Vec<VladDescriptor>> {
    let mut r = ByteReader::open(bytes, "vlad", VLAD_MAGIC, VLAD_VERSION)?;
    let count = r.u32()? as usize;
    let k = r.u32()? as usize;
    let dim_per_word = r.u32()? as usize;
    let normalization = Normalization::from_code(r.u8()?)?;
    let n_scales = r.u32()? as usize;
    let mut scales = Vec::with_capacity(n_scales.min(8));
    for _ in 0..n_scales {
        scales.push(r.u32()?);
    }
    let layer_name = r.str()?;
    let len = k * dim_per_word * n_scales;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let image_id = r.str()?;
        r.require(len * 4)?;
        let raw = r.f32_vec(len)?;
        check_finite_f32(&raw)?;
        out.push(VladDescriptor {
            image_id,
            layer_name: layer_name.clone(),
            scales: scales.clone(),
            k,
            dim_per_word,
            values: raw.into_iter().map(f64::from).collect(),
            normalization,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_vlad_file(path: &Path, set: &[VladDescriptor]) -> Result<()> {
    write_file(path, &write_vlad(set)?)
}

pub fn read_vlad_file(path: &Path) -> Result<Vec<VladDescriptor>> {
    read_vlad(&read_file(path)?)
}

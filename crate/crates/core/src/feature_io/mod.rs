//! Feature-map interchange and per-location descriptor extraction.

mod cfmp;
mod manifest;
mod synth;

pub use cfmp::{read_cfmp, read_cfmp_file, write_cfmp, write_cfmp_file, CFMP_MAGIC, CFMP_VERSION};
pub use manifest::{
    DatasetManifest, FeatureEntry, GroundTruthKind, GroupSpec, GroupsFile, ImageEntry, ManifestImage,
};
pub use synth::{synth_dataset, synth_image_id, SynthConfig, SYNTH_LAYERS};

use crate::binio::check_finite_f32;
use crate::error::{Error, Result};

/// One layer's activation grid for one image at one input scale.
///
/// `values` is laid out row-major by (row, column, channel), so the channel
/// vector of grid cell `(i, j)` starts at `(i * side + j) * depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub image_id: String,
    pub layer_name: String,
    pub scale_id: u32,
    pub side: usize,
    pub depth: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        image_id: impl Into<String>,
        layer_name: impl Into<String>,
        scale_id: u32,
        side: usize,
        depth: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let map = FeatureMap {
            image_id: image_id.into(),
            layer_name: layer_name.into(),
            scale_id,
            side,
            depth,
            values,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.depth == 0 {
            return Err(Error::invalid(
                "feature map",
                format!("side and depth must be >= 1 (got {}x{})", self.side, self.depth),
            ));
        }
        if !(1..=2).contains(&self.scale_id) {
            return Err(Error::invalid(
                "feature map",
                format!("scale_id must be 1 or 2, got {}", self.scale_id),
            ));
        }
        let expected = self.side * self.side * self.depth;
        if self.values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.values.len(),
            });
        }
        check_finite_f32(&self.values)
    }

    /// Number of grid locations, `side * side`.
    pub fn locations(&self) -> usize {
        self.side * self.side
    }

    /// Channel vector at grid cell `(i, j)`.
    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.side + j) * self.depth;
        &self.values[start..start + self.depth]
    }
}

/// The local descriptors of one feature map.
///
/// Every descriptor carries its row-major grid index so that encoders can
/// restore a canonical order regardless of how the set was permuted.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub image_id: String,
    pub layer_name: String,
    pub scale_id: u32,
    pub dim: usize,
    pub normalized: bool,
    positions: Vec<u32>,
    data: Vec<f64>,
}

impl DescriptorSet {
    /// Builds a set from explicit vectors; positions follow the given order.
    pub fn from_vectors(
        image_id: impl Into<String>,
        layer_name: impl Into<String>,
        scale_id: u32,
        dim: usize,
        vectors: &[Vec<f64>],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(vectors.len() * dim);
        for v in vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            data.extend_from_slice(v);
        }
        crate::binio::check_finite_f64(&data)?;
        Ok(DescriptorSet {
            image_id: image_id.into(),
            layer_name: layer_name.into(),
            scale_id,
            dim,
            normalized: false,
            positions: (0..vectors.len() as u32).collect(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn get(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Grid index (row-major) of each descriptor, in storage order.
    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1)).take(self.len())
    }

    /// Flat row-major view of all descriptors.
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Reorders descriptors: element `k` of the result is element `order[k]`
    /// of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: order.len(),
            });
        }
        let mut seen = vec![false; self.len()];
        let mut data = Vec::with_capacity(self.data.len());
        let mut positions = Vec::with_capacity(self.len());
        for &src in order {
            if src >= self.len() || std::mem::replace(&mut seen[src], true) {
                return Err(Error::invalid("permutation", format!("index {src} repeated or out of range")));
            }
            data.extend_from_slice(self.get(src));
            positions.push(self.positions[src]);
        }
        Ok(DescriptorSet {
            data,
            positions,
            ..self.clone_meta()
        })
    }

    /// Returns a copy with every descriptor L2-normalized.
    pub fn l2_normalized(&self) -> Self {
        let mut data = self.data.clone();
        if self.dim > 0 {
            for chunk in data.chunks_exact_mut(self.dim) {
                l2_normalize_in_place(chunk);
            }
        }
        DescriptorSet {
            data,
            positions: self.positions.clone(),
            normalized: true,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        DescriptorSet {
            image_id: self.image_id.clone(),
            layer_name: self.layer_name.clone(),
            scale_id: self.scale_id,
            dim: self.dim,
            normalized: self.normalized,
            positions: Vec::new(),
            data: Vec::new(),
        }
    }
}

/// Splits a feature map into its `side * side` channel vectors, row-major.
pub fn extract_descriptors(map: &FeatureMap) -> Result<DescriptorSet> {
    map.validate()?;
    Ok(DescriptorSet {
        image_id: map.image_id.clone(),
        layer_name: map.layer_name.clone(),
        scale_id: map.scale_id,
        dim: map.depth,
        normalized: false,
        positions: (0..map.locations() as u32).collect(),
        data: map.values.iter().map(|&v| f64::from(v)).collect(),
    })
}

/// Unit-length copy of `v`; the zero vector maps to itself.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    l2_normalize_in_place(&mut out);
    out
}

pub fn l2_normalize_in_place(v: &mut [f64]) {
    let norm = l2_norm(v);
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

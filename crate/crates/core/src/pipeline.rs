//! Stage functions that chain the modules into the retrieval pipeline, and
//! the configuration they run under.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::codebook::{subsample_rows, Codebook, KMeans, KMeansFit, DEFAULT_K, DEFAULT_MAX_ITER, DEFAULT_REL_TOL, DEFAULT_SAMPLE_CAP};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_index, ApVariant, EvalSummary, GroundTruth};
use crate::feature_io::{extract_descriptors, read_cfmp_file, DatasetManifest, DescriptorSet};
use crate::projection::{fit_pca_whiten, ProjectOptions, Projection, DEFAULT_DIM_OUT, DEFAULT_WHITEN_EPSILON};
use crate::retrieval::RetrievalIndex;
use crate::vlad::{concat_multiscale, encode_vlad, Normalization, VladDescriptor};

/// Output dimension after PCA, or `none` for uncompressed VLADs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimOut(pub Option<usize>);

impl Default for DimOut {
    fn default() -> Self {
        DimOut(Some(DEFAULT_DIM_OUT))
    }
}

impl fmt::Display for DimOut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(n) => write!(f, "{n}"),
            None => f.write_str("none"),
        }
    }
}

impl FromStr for DimOut {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(DimOut(None));
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(DimOut(Some(n))),
            _ => Err(Error::invalid("dim", format!("{s:?} (expected a positive integer or `none`)"))),
        }
    }
}

impl Serialize for DimOut {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(n) => s.serialize_u64(n as u64),
            None => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for DimOut {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Null,
            Num(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Null => Ok(DimOut(None)),
            Raw::Num(0) => Err(serde::de::Error::custom("dim_out must be >= 1")),
            Raw::Num(n) => Ok(DimOut(Some(n))),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Everything that determines a pipeline run. Every field has a default,
/// and the whole struct is echoed into run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub layers: Vec<String>,
    pub scale_sets: Vec<Vec<u32>>,
    pub k: usize,
    pub normalization: Normalization,
    pub dim_out: DimOut,
    pub kmeans_seed: u64,
    pub sample_seed: u64,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub sample_cap: usize,
    pub whiten_epsilon: f64,
    pub projection_l2: bool,
    pub ap_variant: ApVariant,
    /// Manifest whose descriptors train the vocabularies instead of the
    /// database itself.
    pub vocab_corpus: Option<PathBuf>,
    /// Manifest whose VLADs fit the PCA instead of the database itself.
    pub pca_corpus: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            manifest: None,
            layers: Vec::new(),
            scale_sets: vec![vec![1]],
            k: DEFAULT_K,
            normalization: Normalization::IntraGlobalL2,
            dim_out: DimOut::default(),
            kmeans_seed: 0,
            sample_seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            rel_tol: DEFAULT_REL_TOL,
            sample_cap: DEFAULT_SAMPLE_CAP,
            whiten_epsilon: DEFAULT_WHITEN_EPSILON,
            projection_l2: true,
            ap_variant: ApVariant::Discrete,
            vocab_corpus: None,
            pca_corpus: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn vocab_params(&self) -> VocabParams {
        VocabParams {
            k: self.k,
            seed: self.kmeans_seed,
            max_iter: self.max_iter,
            rel_tol: self.rel_tol,
            sample_cap: self.sample_cap,
            sample_seed: self.sample_seed,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads and L2-normalizes the descriptors of every manifest image for one
/// layer and scale, in manifest order.
pub fn load_descriptor_sets(manifest: &DatasetManifest, layer: &str, scale: u32) -> Result<Vec<DescriptorSet>> {
    manifest
        .images
        .par_iter()
        .map(|img| {
            let path = manifest
                .feature_path(&img.image_id, layer, scale)
                .ok_or_else(|| Error::MissingFiles(vec![manifest.resolve(&format!("<{} {layer} s{scale}>", img.image_id))]))?;
            let map = read_cfmp_file(&path)?;
            if map.image_id != img.image_id || map.layer_name != layer || map.scale_id != scale {
                return Err(Error::invalid(
                    "feature file",
                    format!(
                        "{} holds {}/{}/s{} but the manifest expects {}/{layer}/s{scale}",
                        path.display(),
                        map.image_id,
                        map.layer_name,
                        map.scale_id,
                        img.image_id
                    ),
                ));
            }
            Ok(extract_descriptors(&map)?.l2_normalized())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VocabParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub sample_cap: usize,
    pub sample_seed: u64,
}

/// Trains a vocabulary on the pooled descriptors of `sets`, uniformly
/// subsampled to `sample_cap`.
pub fn train_vocabulary(sets: &[DescriptorSet], params: &VocabParams) -> Result<KMeansFit> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("vocabulary corpus", "no descriptor sets"))?;
    let dim = first.dim;
    let mut pooled = Vec::with_capacity(sets.iter().map(|s| s.as_flat().len()).sum());
    for s in sets {
        if s.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.dim,
            });
        }
        pooled.extend_from_slice(s.as_flat());
    }
    let sample = subsample_rows(&pooled, dim, params.sample_cap, params.sample_seed);
    let km = KMeans {
        k: params.k,
        seed: params.seed,
        max_iter: params.max_iter,
        rel_tol: params.rel_tol,
    };
    let mut fit = km.fit(&sample, dim)?;
    fit.codebook = fit.codebook.with_provenance(first.layer_name.clone(), first.scale_id);
    Ok(fit)
}

/// Encodes every image at every scale, normalizes each per-scale VLAD to
/// `normalization`, and concatenates scales in ascending order.
///
/// `per_scale[s][i]` is image `i` at the `s`-th scale; `codebooks[s]` is
/// that scale's vocabulary.
pub fn encode_images(
    per_scale: &[Vec<DescriptorSet>],
    codebooks: &[&Codebook],
    normalization: Normalization,
) -> Result<Vec<VladDescriptor>> {
    if per_scale.is_empty() || per_scale.len() != codebooks.len() {
        return Err(Error::invalid("encode", "need one codebook per scale"));
    }
    let n = per_scale[0].len();
    if per_scale.iter().any(|s| s.len() != n) {
        return Err(Error::invalid("encode", "scales cover different image counts"));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let parts = per_scale
                .iter()
                .zip(codebooks)
                .map(|(sets, cb)| encode_vlad(&sets[i], cb)?.normalize_to(normalization))
                .collect::<Result<Vec<_>>>()?;
            concat_multiscale(&parts)
        })
        .collect()
}

/// Largest PCA output dimension the training set supports, capped at `want`.
pub fn effective_dim_out(want: usize, dim_in: usize, samples: usize) -> usize {
    want.min(dim_in).min(samples.saturating_sub(1))
}

/// Fits PCA+whitening on `training`, shrinking `dim_out` when the training
/// set cannot support it.
pub fn fit_projection(training: &[VladDescriptor], dim_out: usize, eps: f64) -> Result<Projection> {
    let dim_in = training.first().map(|v| v.values.len()).unwrap_or(0);
    let eff = effective_dim_out(dim_out, dim_in, training.len());
    if eff == 0 {
        return Err(Error::TooFewPoints {
            needed: 2,
            available: training.len(),
        });
    }
    if eff < dim_out {
        log::warn!("PCA output dimension reduced from {dim_out} to {eff} ({} samples, {dim_in}-D input)", training.len());
    }
    let rows: Vec<&[f64]> = training.iter().map(|v| v.values.as_slice()).collect();
    fit_pca_whiten(&rows, eff, eps)
}

pub fn index_vlads(vlads: &[VladDescriptor]) -> Result<RetrievalIndex> {
    let dim = vlads.first().map(|v| v.values.len()).unwrap_or(0);
    RetrievalIndex::build(dim, vlads.iter().map(|v| (v.image_id.clone(), v.values.as_slice())))
}

pub fn project_vlads(vlads: &[VladDescriptor], projection: &Projection, l2: bool) -> Result<RetrievalIndex> {
    let opts = ProjectOptions {
        whiten: true,
        l2_normalize: l2,
    };
    let projected = vlads
        .par_iter()
        .map(|v| Ok((v.image_id.clone(), projection.project_with(&v.values, opts)?)))
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::build(projection.dim_out, projected)
}

/// Caches trained vocabularies per (layer, scale) within one run.
#[derive(Default)]
pub struct VocabCache {
    entries: Vec<((String, u32), Codebook)>,
}

impl VocabCache {
    pub fn get(&self, layer: &str, scale: u32) -> Option<&Codebook> {
        self.entries
            .iter()
            .find(|((l, s), _)| l == layer && *s == scale)
            .map(|(_, cb)| cb)
    }

    pub fn insert(&mut self, cb: Codebook) {
        let key = (cb.layer_name.clone(), cb.scale_id);
        self.entries.retain(|(k, _)| *k != key);
        self.entries.push((key, cb));
    }
}

/// Result of one (layer, scale set) configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub layer: String,
    pub scales: Vec<u32>,
    pub normalization: Normalization,
    /// Dimension of the vectors actually ranked.
    pub dim: usize,
    pub compressed: bool,
    pub summary: EvalSummary,
}

/// Runs vocabulary training, encoding, optional PCA, indexing and
/// evaluation for one layer and scale set.
#[allow(clippy::too_many_arguments)]
pub fn run_layer(
    manifest: &DatasetManifest,
    gts: &[GroundTruth],
    layer: &str,
    scales: &[u32],
    config: &PipelineConfig,
    vocab_corpus: Option<&DatasetManifest>,
    pca_corpus: Option<&DatasetManifest>,
    cache: &mut VocabCache,
) -> Result<RunOutcome> {
    let mut scales = scales.to_vec();
    scales.sort_unstable();
    scales.dedup();

    let mut per_scale = Vec::with_capacity(scales.len());
    for &s in &scales {
        let sets = load_descriptor_sets(manifest, layer, s)?;
        if cache.get(layer, s).is_none() {
            let fit = match vocab_corpus {
                Some(corpus) => train_vocabulary(&load_descriptor_sets(corpus, layer, s)?, &config.vocab_params())?,
                None => train_vocabulary(&sets, &config.vocab_params())?,
            };
            log::info!(
                "vocabulary {layer}/s{s}: k={} after {} iterations, inertia {:.6}",
                fit.codebook.k,
                fit.codebook.iterations_run,
                fit.codebook.final_inertia
            );
            cache.insert(fit.codebook);
        }
        per_scale.push(sets);
    }
    let codebooks: Vec<&Codebook> = scales.iter().map(|&s| cache.get(layer, s).unwrap()).collect();
    let vlads = encode_images(&per_scale, &codebooks, config.normalization)?;

    let (index, compressed) = match config.dim_out.0 {
        None => (index_vlads(&vlads)?, false),
        Some(want) => {
            let projection = match pca_corpus {
                Some(corpus) => {
                    let corpus_sets = scales
                        .iter()
                        .map(|&s| load_descriptor_sets(corpus, layer, s))
                        .collect::<Result<Vec<_>>>()?;
                    let training = encode_images(&corpus_sets, &codebooks, config.normalization)?;
                    fit_projection(&training, want, config.whiten_epsilon)?
                }
                None => fit_projection(&vlads, want, config.whiten_epsilon)?,
            };
            (project_vlads(&vlads, &projection, config.projection_l2)?, true)
        }
    };
    let summary = evaluate_index(&index, gts, config.ap_variant)?;
    Ok(RunOutcome {
        layer: layer.to_string(),
        scales,
        normalization: config.normalization,
        dim: index.dim(),
        compressed,
        summary,
    })
}

/// Digest of a file's bytes, used to key cached stage outputs.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&crate::binio::read_file(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dim_out_parsing_and_serde() {
        assert_eq!("none".parse::<DimOut>().unwrap(), DimOut(None));
        assert_eq!("128".parse::<DimOut>().unwrap(), DimOut(Some(128)));
        assert!("0".parse::<DimOut>().is_err());
        assert_eq!(serde_json::from_str::<DimOut>("null").unwrap(), DimOut(None));
        assert!(serde_json::from_str::<DimOut>("0").is_err());
        let cfg: PipelineConfig = serde_json::from_str(r#"{"dim_out": "none", "k": 8}"#).unwrap();
        assert_eq!(cfg.dim_out, DimOut(None));
        assert_eq!(cfg.k, 8);
        assert_eq!(cfg.normalization, Normalization::IntraGlobalL2);
        let back: PipelineConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_defaults_and_digest() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.k, 100);
        assert_eq!(cfg.dim_out, DimOut(Some(128)));
        assert_eq!(cfg.digest(), PipelineConfig::default().digest());
        let other = PipelineConfig {
            kmeans_seed: 1,
            ..Default::default()
        };
        assert_ne!(cfg.digest(), other.digest());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn effective_dim() {
        assert_eq!(effective_dim_out(128, 1600, 80), 79);
        assert_eq!(effective_dim_out(128, 64, 1000), 64);
        assert_eq!(effective_dim_out(128, 51200, 1491), 128);
    }
}

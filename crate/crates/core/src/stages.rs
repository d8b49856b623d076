//! Persisted, cached pipeline stages under one output directory.
//!
//! Layout below `output_dir`:
//!
//! ```text
//! vocab/<layer>_s<scale>.cbk           k-means vocabulary
//! vlad/<layer>_s<scales>.vlad          normalized (multi-scale) VLADs
//! vlad/<layer>_s<scales>.pca-corpus.vlad
//! pca/<layer>_s<scales>_d<dim>.prj     PCA + whitening
//! index/<layer>_s<scales>_d<dim>.cds   searchable descriptors (`dnone` = raw)
//! eval/<layer>_s<scales>_d<dim>.csv    header + one result row
//! run_meta.json                        materialized config of the last run
//! ```
//!
//! Each artifact carries a `.meta.json` sidecar (see [`crate::stage_cache`]).
//! Stages pull their inputs through the earlier stages, so asking for an
//! index trains and encodes whatever is missing or stale. Downstream stages
//! always continue from the bytes on disk, which keeps cached and fresh runs
//! identical.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_index, load_ground_truth, GroundTruth, SweepReport, SweepRow};
use crate::feature_io::DatasetManifest;
use crate::pipeline::{
    encode_images, fit_projection, file_digest, index_vlads, load_descriptor_sets, project_vlads, sha256_hex,
    train_vocabulary, DimOut, PipelineConfig, RunOutcome,
};
use crate::projection::Projection;
use crate::retrieval::RetrievalIndex;
use crate::stage_cache::{is_fresh, record, StageKey};
use crate::vlad::{read_vlad_file, write_vlad_file, VladDescriptor};

pub const RUN_META_FILE: &str = "run_meta.json";

/// Default manifest location when the config names none.
pub fn default_manifest_path(output_dir: &Path) -> PathBuf {
    output_dir.join("synth").join("manifest.json")
}

pub fn scales_label(scales: &[u32]) -> String {
    scales.iter().map(u32::to_string).collect::<Vec<_>>().join("+")
}

fn normalized_scales(scales: &[u32]) -> Result<Vec<u32>> {
    let mut s = scales.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.is_empty() {
        return Err(Error::invalid("scales", "empty scale set"));
    }
    Ok(s)
}

pub struct Workspace {
    pub config: PipelineConfig,
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    vocab_corpus: Option<DatasetManifest>,
    pca_corpus: Option<DatasetManifest>,
    feature_digests: HashMap<(bool, String, u32), String>,
    ground_truth: Option<Vec<GroundTruth>>,
}

impl Workspace {
    /// Loads the manifest (and corpora) named by `config`. Empty `layers`
    /// defaults to the first layer listed for the first manifest image.
    pub fn open(mut config: PipelineConfig) -> Result<Self> {
        let manifest_path = config
            .manifest
            .clone()
            .unwrap_or_else(|| default_manifest_path(&config.output_dir));
        let manifest = DatasetManifest::load(&manifest_path)?;
        if config.layers.is_empty() {
            let first = manifest
                .images
                .first()
                .and_then(|img| img.features.first())
                .ok_or_else(|| Error::invalid("manifest", "no feature entries"))?;
            config.layers = vec![first.layer.clone()];
        }
        config.manifest = Some(manifest_path.clone());
        let vocab_corpus = config.vocab_corpus.as_deref().map(DatasetManifest::load).transpose()?;
        let pca_corpus = config.pca_corpus.as_deref().map(DatasetManifest::load).transpose()?;
        Ok(Workspace {
            config,
            manifest_path,
            manifest,
            vocab_corpus,
            pca_corpus,
            feature_digests: HashMap::new(),
            ground_truth: None,
        })
    }

    fn out(&self) -> &Path {
        &self.config.output_dir
    }

    /// Digest over every image's feature file for one layer and scale, in
    /// manifest order.
    fn features_digest(&mut self, corpus: bool, layer: &str, scale: u32) -> Result<String> {
        let key = (corpus, layer.to_string(), scale);
        if let Some(d) = self.feature_digests.get(&key) {
            return Ok(d.clone());
        }
        let manifest = if corpus { self.vocab_corpus.as_ref().unwrap() } else { &self.manifest };
        let mut acc = String::new();
        for img in &manifest.images {
            let path = manifest
                .feature_path(&img.image_id, layer, scale)
                .ok_or_else(|| Error::MissingFiles(vec![manifest.resolve(&format!("<{} {layer} s{scale}>", img.image_id))]))?;
            acc.push_str(&img.image_id);
            acc.push(' ');
            acc.push_str(&file_digest(&path)?);
            acc.push('\n');
        }
        let d = sha256_hex(acc.as_bytes());
        self.feature_digests.insert(key, d.clone());
        Ok(d)
    }

    fn pca_corpus_digest(&self) -> Result<Option<String>> {
        let Some(corpus) = &self.pca_corpus else { return Ok(None) };
        let mut acc = String::new();
        for img in &corpus.images {
            for f in &img.features {
                acc.push_str(&file_digest(&corpus.resolve(&f.path))?);
                acc.push('\n');
            }
        }
        Ok(Some(sha256_hex(acc.as_bytes())))
    }

    pub fn vocab_path(&self, layer: &str, scale: u32) -> PathBuf {
        self.out().join("vocab").join(format!("{layer}_s{scale}.cbk"))
    }

    pub fn vlad_path(&self, layer: &str, scales: &[u32]) -> PathBuf {
        self.out().join("vlad").join(format!("{layer}_s{}.vlad", scales_label(scales)))
    }

    fn pca_corpus_vlad_path(&self, layer: &str, scales: &[u32]) -> PathBuf {
        self.out().join("vlad").join(format!("{layer}_s{}.pca-corpus.vlad", scales_label(scales)))
    }

    pub fn projection_path(&self, layer: &str, scales: &[u32], dim: usize) -> PathBuf {
        self.out().join("pca").join(format!("{layer}_s{}_d{dim}.prj", scales_label(scales)))
    }

    pub fn index_path(&self, layer: &str, scales: &[u32], dim: DimOut) -> PathBuf {
        self.out().join("index").join(format!("{layer}_s{}_d{dim}.cds", scales_label(scales)))
    }

    pub fn eval_path(&self, layer: &str, scales: &[u32], dim: DimOut) -> PathBuf {
        self.out().join("eval").join(format!("{layer}_s{}_d{dim}.csv", scales_label(scales)))
    }

    /// Trains (or reuses) the vocabulary for one layer and scale.
    pub fn vocab(&mut self, layer: &str, scale: u32) -> Result<(PathBuf, Codebook)> {
        let path = self.vocab_path(layer, scale);
        let use_corpus = self.vocab_corpus.is_some();
        let key = StageKey::new(
            "train-vocab",
            json!({ "layer": layer, "scale": scale, "params": format!("{:?}", self.config.vocab_params()) }),
        )
        .input_digest("features", self.features_digest(use_corpus, layer, scale)?);
        if !is_fresh(&path, &key) {
            let source = self.vocab_corpus.as_ref().unwrap_or(&self.manifest);
            let fit = train_vocabulary(&load_descriptor_sets(source, layer, scale)?, &self.config.vocab_params())?;
            log::info!(
                "vocabulary {layer}/s{scale}: k={} after {} iterations, inertia {:.6}",
                fit.codebook.k,
                fit.codebook.iterations_run,
                fit.codebook.final_inertia
            );
            fit.codebook.save(&path)?;
            record(&path, &key)?;
        } else {
            log::info!("reusing {}", path.display());
        }
        Ok((path.clone(), Codebook::load(&path)?))
    }

    fn codebooks(&mut self, layer: &str, scales: &[u32]) -> Result<(Vec<Codebook>, Vec<String>)> {
        let mut books = Vec::new();
        let mut digests = Vec::new();
        for &s in scales {
            let (p, cb) = self.vocab(layer, s)?;
            digests.push(file_digest(&p)?);
            books.push(cb);
        }
        Ok((books, digests))
    }

    fn encode_into(
        &mut self,
        path: PathBuf,
        corpus: Option<&DatasetManifest>,
        stage: &str,
        layer: &str,
        scales: &[u32],
    ) -> Result<(PathBuf, Vec<VladDescriptor>)> {
        let (books, book_digests) = self.codebooks(layer, scales)?;
        let mut key = StageKey::new(stage, json!({ "layer": layer, "scales": scales, "normalization": self.config.normalization }))
            .input_digest("vocab", book_digests.join(","));
        key = match corpus {
            Some(_) => key.input_digest("corpus", self.pca_corpus_digest()?.unwrap_or_default()),
            None => {
                let mut ds = Vec::new();
                for &s in scales {
                    ds.push(self.features_digest(false, layer, s)?);
                }
                key.input_digest("features", ds.join(","))
            }
        };
        if !is_fresh(&path, &key) {
            let source = corpus.unwrap_or(&self.manifest);
            let per_scale = scales
                .iter()
                .map(|&s| load_descriptor_sets(source, layer, s))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Codebook> = books.iter().collect();
            let vlads = encode_images(&per_scale, &refs, self.config.normalization)?;
            write_vlad_file(&path, &vlads)?;
            record(&path, &key)?;
        }
        let vlads = read_vlad_file(&path)?;
        Ok((path, vlads))
    }

    /// Encodes every manifest image for `layer` over `scales`.
    pub fn vlads(&mut self, layer: &str, scales: &[u32]) -> Result<(PathBuf, Vec<VladDescriptor>)> {
        let scales = normalized_scales(scales)?;
        let path = self.vlad_path(layer, &scales);
        self.encode_into(path, None, "encode", layer, &scales)
    }

    /// Fits (or reuses) PCA + whitening for `dim` output dimensions.
    pub fn projection(&mut self, layer: &str, scales: &[u32], dim: usize) -> Result<(PathBuf, Projection)> {
        let scales = normalized_scales(scales)?;
        let (train_path, _) = match self.pca_corpus.clone() {
            Some(corpus) => {
                let p = self.pca_corpus_vlad_path(layer, &scales);
                self.encode_into(p, Some(&corpus), "encode-pca-corpus", layer, &scales)?
            }
            None => self.vlads(layer, &scales)?,
        };
        let path = self.projection_path(layer, &scales, dim);
        let key = StageKey::new("fit-pca", json!({ "dim_out": dim, "whiten_epsilon": self.config.whiten_epsilon }))
            .input_file("training", &train_path)?;
        if !is_fresh(&path, &key) {
            let training = read_vlad_file(&train_path)?;
            fit_projection(&training, dim, self.config.whiten_epsilon)?.save(&path)?;
            record(&path, &key)?;
        }
        Ok((path.clone(), Projection::load(&path)?))
    }

    /// Builds (or reuses) the searchable index: raw VLADs for `dim = none`,
    /// otherwise projected ones.
    pub fn index(&mut self, layer: &str, scales: &[u32], dim: DimOut) -> Result<(PathBuf, RetrievalIndex)> {
        let scales = normalized_scales(scales)?;
        let (vlad_path, _) = self.vlads(layer, &scales)?;
        let path = self.index_path(layer, &scales, dim);
        let mut key = StageKey::new("index", json!({ "dim_out": dim, "projection_l2": self.config.projection_l2 }))
            .input_file("vlad", &vlad_path)?;
        let projection = match dim.0 {
            None => None,
            Some(d) => {
                let (p, proj) = self.projection(layer, &scales, d)?;
                key = key.input_file("projection", &p)?;
                Some(proj)
            }
        };
        if !is_fresh(&path, &key) {
            let vlads = read_vlad_file(&vlad_path)?;
            let index = match &projection {
                None => index_vlads(&vlads)?,
                Some(p) => project_vlads(&vlads, p, self.config.projection_l2)?,
            };
            index.save(&path)?;
            record(&path, &key)?;
        }
        Ok((path.clone(), RetrievalIndex::load(&path)?))
    }

    pub fn ground_truth(&mut self) -> Result<&[GroundTruth]> {
        if self.ground_truth.is_none() {
            self.ground_truth = Some(load_ground_truth(&self.manifest)?);
        }
        Ok(self.ground_truth.as_deref().unwrap())
    }

    /// Scores the index for one configuration and writes its CSV.
    pub fn evaluate(&mut self, layer: &str, scales: &[u32], dim: DimOut) -> Result<(SweepReport, RunOutcome)> {
        let scales = normalized_scales(scales)?;
        let (_, index) = self.index(layer, &scales, dim)?;
        let variant = self.config.ap_variant;
        let summary = evaluate_index(&index, self.ground_truth()?, variant)?;
        let outcome = RunOutcome {
            layer: layer.to_string(),
            scales: scales.clone(),
            normalization: self.config.normalization,
            dim: index.dim(),
            compressed: dim.0.is_some(),
            summary,
        };
        let report = self.report(vec![row_of(&outcome)]);
        crate::binio::write_file(&self.eval_path(layer, &scales, dim), report.to_csv().as_bytes())?;
        Ok((report, outcome))
    }

    pub fn report(&self, rows: Vec<SweepRow>) -> SweepReport {
        SweepReport {
            dataset_name: self.manifest.dataset_name.clone(),
            config_digest: self.config.digest(),
            ap_variant: self.config.ap_variant,
            rows,
        }
    }

    /// Every configured layer x scale set at the configured dimension.
    pub fn sweep(&mut self) -> Result<SweepReport> {
        let layers = self.config.layers.clone();
        let scale_sets = self.config.scale_sets.clone();
        let mut all: Vec<u32> = scale_sets.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        let mut missing = self.manifest.missing_feature_files(&layers, &all);
        for c in self.vocab_corpus.iter().chain(self.pca_corpus.iter()) {
            missing.extend(c.missing_feature_files(&layers, &all));
        }
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        let mut rows = Vec::new();
        for layer in &layers {
            for scales in &scale_sets {
                let (_, outcome) = self.evaluate(layer, scales, self.config.dim_out)?;
                log::info!("{layer} scales {}: mAP {:.4}", scales_label(&outcome.scales), outcome.summary.map);
                rows.push(row_of(&outcome));
            }
        }
        let report = self.report(rows);
        crate::binio::write_file(&self.out().join("sweep.csv"), report.to_csv().as_bytes())?;
        crate::binio::write_file(&self.out().join("sweep.dat"), report.to_gnuplot().as_bytes())?;
        Ok(report)
    }

    /// Records the fully materialized config and its digest.
    pub fn write_run_meta(&self, command: &str) -> Result<PathBuf> {
        let path = self.out().join(RUN_META_FILE);
        let meta = json!({
            "command": command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "dataset_name": self.manifest.dataset_name,
            "manifest_digest": file_digest(&self.manifest_path)?,
            "config_digest": self.config.digest(),
            "config": self.config,
        });
        let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        text.push('\n');
        crate::binio::write_file(&path, text.as_bytes())?;
        Ok(path)
    }
}

fn row_of(o: &RunOutcome) -> SweepRow {
    SweepRow {
        layer: o.layer.clone(),
        scales: o.scales.clone(),
        normalization: o.normalization,
        dim: o.dim,
        compressed: o.compressed,
        map: o.summary.map,
        queries: o.summary.per_query.len(),
    }
}

//! Layer x scale-set sweeps.

use std::fmt::Write as _;

use serde::Serialize;

use super::{load_ground_truth, ApVariant};
use crate::error::{Error, Result};
use crate::feature_io::DatasetManifest;
use crate::pipeline::{run_layer, PipelineConfig, VocabCache};
use crate::vlad::Normalization;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub layer: String,
    pub scales: Vec<u32>,
    pub normalization: Normalization,
    pub dim: usize,
    pub compressed: bool,
    pub map: f64,
    pub queries: usize,
}

impl SweepRow {
    pub fn scales_label(&self) -> String {
        self.scales.iter().map(u32::to_string).collect::<Vec<_>>().join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub dataset_name: String,
    pub config_digest: String,
    pub ap_variant: ApVariant,
    pub rows: Vec<SweepRow>,
}

pub const CSV_HEADER: &str = "dataset,layer,scales,normalization,dim,compressed,ap_variant,map,queries";

impl SweepReport {
    pub fn csv_row(&self, row: &SweepRow) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6},{}",
            self.dataset_name,
            row.layer,
            row.scales_label(),
            row.normalization,
            row.dim,
            row.compressed,
            self.ap_variant,
            row.map,
            row.queries
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for row in &self.rows {
            s.push_str(&self.csv_row(row));
            s.push('\n');
        }
        s
    }

    /// gnuplot data: one indexed block per scale set, one line per layer in
    /// sweep order (`layer_index layer map`).
    pub fn to_gnuplot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# dataset {} ap {} config {}", self.dataset_name, self.ap_variant, self.config_digest);
        let mut labels: Vec<String> = Vec::new();
        for row in &self.rows {
            if !labels.contains(&row.scales_label()) {
                labels.push(row.scales_label());
            }
        }
        for (b, label) in labels.iter().enumerate() {
            if b > 0 {
                s.push_str("\n\n");
            }
            let _ = writeln!(s, "# scales {label}");
            let mut layers: Vec<&str> = Vec::new();
            for row in self.rows.iter().filter(|r| &r.scales_label() == label) {
                if !layers.contains(&row.layer.as_str()) {
                    layers.push(&row.layer);
                }
                let idx = layers.iter().position(|l| *l == row.layer).unwrap();
                let _ = writeln!(s, "{idx} \"{}\" {:.6}", row.layer, row.map);
            }
        }
        s
    }
}

/// Evaluates every (layer, scale set) pair, rows in input order. All
/// required feature files are checked before any work starts.
pub fn sweep(
    manifest: &DatasetManifest,
    layers: &[String],
    scale_sets: &[Vec<u32>],
    config: &PipelineConfig,
) -> Result<SweepReport> {
    if layers.is_empty() || scale_sets.is_empty() || scale_sets.iter().any(Vec::is_empty) {
        return Err(Error::invalid("sweep", "need at least one layer and one non-empty scale set"));
    }
    let mut all_scales: Vec<u32> = scale_sets.iter().flatten().copied().collect();
    all_scales.sort_unstable();
    all_scales.dedup();

    let vocab_corpus = config.vocab_corpus.as_deref().map(DatasetManifest::load).transpose()?;
    let pca_corpus = config.pca_corpus.as_deref().map(DatasetManifest::load).transpose()?;
    let mut missing = manifest.missing_feature_files(layers, &all_scales);
    for corpus in vocab_corpus.iter().chain(pca_corpus.iter()) {
        missing.extend(corpus.missing_feature_files(layers, &all_scales));
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }

    let gts = load_ground_truth(manifest)?;
    let mut rows = Vec::with_capacity(layers.len() * scale_sets.len());
    for layer in layers {
        let mut cache = VocabCache::default();
        for scales in scale_sets {
            let outcome = run_layer(
                manifest,
                &gts,
                layer,
                scales,
                config,
                vocab_corpus.as_ref(),
                pca_corpus.as_ref(),
                &mut cache,
            )?;
            log::info!("{layer} scales {:?}: mAP {:.4}", outcome.scales, outcome.summary.map);
            rows.push(SweepRow {
                layer: outcome.layer,
                scales: outcome.scales,
                normalization: outcome.normalization,
                dim: outcome.dim,
                compressed: outcome.compressed,
                map: outcome.summary.map,
                queries: outcome.summary.per_query.len(),
            });
        }
    }
    Ok(SweepReport {
        dataset_name: manifest.dataset_name.clone(),
        config_digest: config.digest(),
        ap_variant: config.ap_variant,
        rows,
    })
}

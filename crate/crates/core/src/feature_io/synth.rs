//! Deterministic synthetic datasets with Holidays-style grouping.
//!
//! Each group owns a few "planted" channel patterns that appear at random
//! grid cells of every member image; all other cells are drawn from a
//! background dictionary shared by the whole dataset. Two layers are written
//! per image: `mid` at `side x side` and `top`, a 2x2 average pooling of
//! `mid`. Scale 2 maps are nearest-neighbour 2x upsamplings of the scale 1
//! grid, so they carry the same information at four times the locations.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{FeatureEntry, GroupSpec, GroupsFile, ImageEntry, ManifestImage};
use super::{write_cfmp_file, DatasetManifest, FeatureMap};
use crate::binio::write_file;
use crate::error::{Error, Result};
use crate::visualization::RgbImage;

pub const SYNTH_LAYERS: [&str; 2] = ["mid", "top"];

const BACKGROUND_ATOMS: usize = 8;
fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_groups: usize,
    pub images_per_group: usize,
    pub side: usize,
    pub depth: usize,
    /// When false every cell is background and groups share nothing.
    pub planted: bool,
    pub patterns_per_group: usize,
    /// Amplitude of the uniform per-channel noise on background cells;
    /// planted cells get half of it.
    pub noise: f32,
    /// Distance of a pattern from its background atom, relative to the
    /// atom's norm.
    pub pattern_offset: f32,
    /// Pixels per `mid` grid cell in the scale 1 images.
    pub patch_px: usize,
    pub write_images: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            num_groups: 20,
            images_per_group: 4,
            side: 6,
            depth: 16,
            planted: true,
            patterns_per_group: 3,
            noise: 0.2,
            pattern_offset: 0.15,
            patch_px: 8,
            write_images: true,
        }
    }
}

impl SynthConfig {
    pub fn new(seed: u64, num_groups: usize, images_per_group: usize, side: usize, depth: usize) -> Self {
        SynthConfig {
            seed,
            num_groups,
            images_per_group,
            side,
            depth,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_groups == 0 || self.images_per_group == 0 || self.side == 0 || self.depth == 0 {
            return Err(Error::invalid("synth config", "all counts must be >= 1"));
        }
        if self.images_per_group > 100 || self.num_groups > 9000 {
            return Err(Error::invalid(
                "synth config",
                "at most 100 images per group and 9000 groups fit the id/100 convention",
            ));
        }
        if self.patch_px == 0 {
            return Err(Error::invalid("synth config", "patch_px must be >= 1"));
        }
        Ok(())
    }
}

pub fn synth_image_id(group: usize, member: usize) -> String {
    (100_000 + group * 100 + member).to_string()
}

/// Writes a synthetic dataset under `out_dir` and returns its manifest.
///
/// Files: `manifest.json`, `groups.json`, `features/<id>_<layer>_s<scale>.cfmp`
/// and, if enabled, `images/<id>_s<scale>.ppm`.
pub fn synth_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.depth;
    let cells = config.side * config.side;

    let atoms: Vec<Vec<f32>> = (0..BACKGROUND_ATOMS)
        .map(|_| (0..d).map(|_| rng.random::<f32>()).collect())
        .collect();
    // A pattern is a fixed offset from one background atom. It lands in the
    // same vocabulary cells as ordinary background, but with a residual
    // direction that every member of its group repeats.
    let patterns: Vec<Vec<Vec<f32>>> = (0..config.num_groups)
        .map(|_| {
            (0..config.patterns_per_group)
                .map(|_| {
                    let atom = &atoms[rng.random_range(0..BACKGROUND_ATOMS)];
                    let offset: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                    let scale = config.pattern_offset * norm(atom) / norm(&offset).max(f32::MIN_POSITIVE);
                    atom.iter().zip(&offset).map(|(a, o)| a + scale * o).collect()
                })
                .collect()
        })
        .collect();
    let cells_per_pattern = (cells / 8).max(1);

    let mut images = Vec::new();
    let mut groups = Vec::new();
    for (g, group_patterns) in patterns.iter().enumerate() {
        let mut members = Vec::new();
        for m in 0..config.images_per_group {
            let id = synth_image_id(g, m);
            let mut values = Vec::with_capacity(cells * d);
            for _ in 0..cells {
                let atom = &atoms[rng.random_range(0..BACKGROUND_ATOMS)];
                let gain = rng.random_range(0.5f32..1.5);
                values.extend(atom.iter().map(|&a| a * gain + config.noise * rng.random_range(-1.0f32..1.0)));
            }
            if config.planted {
                for pattern in group_patterns {
                    let amount = cells_per_pattern.min(cells);
                    for cell in sample(&mut rng, cells, amount).iter() {
                        let gain = rng.random_range(0.8f32..1.2);
                        for (c, &p) in pattern.iter().enumerate() {
                            values[cell * d + c] = p * gain + 0.5 * config.noise * rng.random_range(-1.0f32..1.0);
                        }
                    }
                }
            }
            let mid = FeatureMap::new(id.clone(), SYNTH_LAYERS[0], 1, config.side, d, values)?;
            images.push(write_image_files(config, out_dir, &mid)?);
            members.push(id);
        }
        groups.push(GroupSpec { members });
    }

    let groups_file = GroupsFile { groups };
    write_file(&out_dir.join("groups.json"), groups_file.to_json().as_bytes())?;
    let mut manifest = DatasetManifest::new(
        if config.planted { "synth" } else { "synth-noise" },
        images,
    )
    .with_base_dir(out_dir);
    manifest.ground_truth_path = "groups.json".into();
    write_file(&out_dir.join("manifest.json"), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

fn write_image_files(config: &SynthConfig, out_dir: &Path, mid: &FeatureMap) -> Result<ManifestImage> {
    let id = &mid.image_id;
    let mid2 = upsample2(mid);
    let maps = [
        mid.clone(),
        avg_pool2(mid, SYNTH_LAYERS[1]),
        avg_pool2(&mid2, SYNTH_LAYERS[1]),
        mid2,
    ];
    let mut features = Vec::new();
    for map in &maps {
        let rel = format!("features/{}_{}_s{}.cfmp", id, map.layer_name, map.scale_id);
        write_cfmp_file(&out_dir.join(&rel), map)?;
        features.push(FeatureEntry {
            layer: map.layer_name.clone(),
            scale: map.scale_id,
            path: rel,
        });
    }
    features.sort_by(|a, b| (&a.layer, a.scale).cmp(&(&b.layer, b.scale)));

    let mut images = Vec::new();
    if config.write_images {
        let img1 = render_cells(mid, config.patch_px);
        let img2 = img1.upsample_nearest(2);
        for (scale, img) in [(1u32, img1), (2, img2)] {
            let rel = format!("images/{id}_s{scale}.ppm");
            write_file(&out_dir.join(&rel), &img.to_ppm())?;
            images.push(ImageEntry { scale, path: rel });
        }
    }
    Ok(ManifestImage {
        image_id: id.clone(),
        features,
        images,
    })
}

fn upsample2(map: &FeatureMap) -> FeatureMap {
    let side = map.side * 2;
    let mut values = Vec::with_capacity(side * side * map.depth);
    for i in 0..side {
        for j in 0..side {
            values.extend_from_slice(map.cell(i / 2, j / 2));
        }
    }
    FeatureMap {
        image_id: map.image_id.clone(),
        layer_name: map.layer_name.clone(),
        scale_id: 2,
        side,
        depth: map.depth,
        values,
    }
}

/// 2x2 average pooling with ceil semantics at odd borders.
fn avg_pool2(map: &FeatureMap, layer: &str) -> FeatureMap {
    let side = map.side.div_ceil(2);
    let d = map.depth;
    let mut values = vec![0f32; side * side * d];
    for i in 0..side {
        for j in 0..side {
            let out = &mut values[(i * side + j) * d..(i * side + j + 1) * d];
            let mut n = 0f32;
            for si in 2 * i..(2 * i + 2).min(map.side) {
                for sj in 2 * j..(2 * j + 2).min(map.side) {
                    for (o, v) in out.iter_mut().zip(map.cell(si, sj)) {
                        *o += v;
                    }
                    n += 1.0;
                }
            }
            out.iter_mut().for_each(|o| *o /= n);
        }
    }
    FeatureMap {
        image_id: map.image_id.clone(),
        layer_name: layer.to_string(),
        scale_id: map.scale_id,
        side,
        depth: d,
        values,
    }
}

/// Paints each grid cell with a colour derived from its first channels plus
/// a small fixed texture, so patches are distinguishable.
fn render_cells(map: &FeatureMap, patch_px: usize) -> RgbImage {
    let n = map.side * patch_px;
    let mut img = RgbImage::new(n, n);
    for i in 0..map.side {
        for j in 0..map.side {
            let cell = map.cell(i, j);
            let base: [f32; 3] = std::array::from_fn(|c| cell[c % cell.len()]);
            for y in 0..patch_px {
                for x in 0..patch_px {
                    let texture = ((x + 2 * y) % 5) as f32 * 6.0;
                    let rgb: [u8; 3] =
                        std::array::from_fn(|c| (base[c] * 90.0 + texture).clamp(0.0, 255.0) as u8);
                    img.set(j * patch_px + x, i * patch_px + y, rgb);
                }
            }
        }
    }
    img
}

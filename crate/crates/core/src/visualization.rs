//! Qualitative diagnostics rendered as binary PPM (P6) images: the
//! correspondence mosaic and patch-cluster grids.
//!
//! Every local descriptor of an `n^l x n^l` grid is represented by the
//! square patch of side `round(n / n^l)` centred on its cell of the warped
//! `n x n` source image.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feature_io::{extract_descriptors, read_cfmp_file, DatasetManifest};
use crate::retrieval::squared_l2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn upsample_nearest(&self, factor: usize) -> Self {
        let mut out = RgbImage::new(self.width * factor, self.height * factor);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }

    pub fn crop(&self, rect: &PatchRect) -> Self {
        let mut out = RgbImage::new(rect.side, rect.side);
        for y in 0..rect.side {
            for x in 0..rect.side {
                out.set(x, y, self.get(rect.x + x, rect.y + y));
            }
        }
        out
    }

    pub fn blit(&mut self, src: &RgbImage, x0: usize, y0: usize) {
        for y in 0..src.height {
            for x in 0..src.width {
                self.set(x0 + x, y0 + y, src.get(x, y));
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::invalid("ppm", "truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        if fields[0] != "P6" {
            return Err(Error::invalid("ppm", format!("expected P6, found {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::invalid("ppm", format!("bad header field {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::invalid("ppm", format!("only 8-bit images supported (maxval {maxval})")));
        }
        pos += 1;
        let needed = width * height * 3;
        let available = bytes.len().saturating_sub(pos);
        if available < needed {
            return Err(Error::Truncated {
                format: "ppm",
                needed,
                available,
            });
        }
        Ok(RgbImage {
            width,
            height,
            pixels: bytes[pos..pos + needed].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

/// Centre patch of grid cell `(i, j)` in an `image_side`-pixel square image
/// covered by a `grid_side x grid_side` feature map.
pub fn patch_rect(image_side: usize, grid_side: usize, i: usize, j: usize) -> Result<PatchRect> {
    if grid_side == 0 || image_side < grid_side {
        return Err(Error::invalid(
            "patch geometry",
            format!("{image_side}px image cannot hold a {grid_side}x{grid_side} grid"),
        ));
    }
    let side = ((image_side as f64 / grid_side as f64).round() as usize).clamp(1, image_side);
    let cell = image_side as f64 / grid_side as f64;
    let origin = |k: usize| {
        let centre = (k as f64 + 0.5) * cell;
        ((centre - side as f64 / 2.0).round().max(0.0) as usize).min(image_side - side)
    };
    Ok(PatchRect {
        x: origin(j),
        y: origin(i),
        side,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchRef {
    pub image_id: String,
    pub layer_name: String,
    pub scale_id: u32,
    pub grid_i: usize,
    pub grid_j: usize,
    pub rect: PatchRect,
}

#[derive(Debug, Clone)]
struct PatchEntry {
    image: usize,
    i: usize,
    j: usize,
}

/// Local descriptors of one layer and scale for a set of images, together
/// with the images their patches are cut from.
#[derive(Debug, Clone)]
pub struct PatchDatabase {
    pub layer_name: String,
    pub scale_id: u32,
    pub grid_side: usize,
    pub image_side: usize,
    dim: usize,
    image_ids: Vec<String>,
    images: Vec<RgbImage>,
    entries: Vec<PatchEntry>,
    descriptors: Vec<f64>,
}

impl PatchDatabase {
    pub fn new(layer_name: impl Into<String>, scale_id: u32, grid_side: usize, dim: usize) -> Self {
        PatchDatabase {
            layer_name: layer_name.into(),
            scale_id,
            grid_side,
            image_side: 0,
            dim,
            image_ids: Vec::new(),
            images: Vec::new(),
            entries: Vec::new(),
            descriptors: Vec::new(),
        }
    }

    /// Adds one image with its `grid_side^2` descriptors in row-major order.
    pub fn add_image(&mut self, image_id: impl Into<String>, image: RgbImage, descriptors: &[f64]) -> Result<()> {
        let image_id = image_id.into();
        if image.width != image.height {
            return Err(Error::invalid("patch database", format!("image {image_id} is not square")));
        }
        if !self.images.is_empty() && image.width != self.image_side {
            return Err(Error::invalid(
                "patch database",
                format!("image {image_id} is {}px, expected {}px", image.width, self.image_side),
            ));
        }
        patch_rect(image.width, self.grid_side, 0, 0)?;
        let expected = self.grid_side * self.grid_side * self.dim;
        if descriptors.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: descriptors.len(),
            });
        }
        if self.image_ids.contains(&image_id) {
            return Err(Error::DuplicateId(image_id));
        }
        let idx = self.images.len();
        self.image_side = image.width;
        for i in 0..self.grid_side {
            for j in 0..self.grid_side {
                self.entries.push(PatchEntry { image: idx, i, j });
            }
        }
        self.descriptors.extend_from_slice(descriptors);
        self.image_ids.push(image_id);
        self.images.push(image);
        Ok(())
    }

    /// Loads every manifest image for `layer`/`scale`. Descriptors are
    /// L2-normalized when `normalize` is set.
    pub fn from_manifest(manifest: &DatasetManifest, layer: &str, scale: u32, normalize: bool) -> Result<Self> {
        let mut db: Option<PatchDatabase> = None;
        let mut missing = Vec::new();
        for img in &manifest.images {
            if manifest.image_path(&img.image_id, scale).filter(|p| p.is_file()).is_none() {
                missing.push(manifest.resolve(&format!("<image {} scale {scale}>", img.image_id)));
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        for img in &manifest.images {
            let fpath = manifest
                .feature_path(&img.image_id, layer, scale)
                .ok_or_else(|| Error::MissingFiles(vec![manifest.resolve(&format!("<{} {layer} s{scale}>", img.image_id))]))?;
            let map = read_cfmp_file(&fpath)?;
            let mut ds = extract_descriptors(&map)?;
            if normalize {
                ds = ds.l2_normalized();
            }
            let ipath = manifest.image_path(&img.image_id, scale).unwrap();
            let image = RgbImage::from_ppm(&crate::binio::read_file(&ipath)?)?;
            let db = db.get_or_insert_with(|| PatchDatabase::new(layer, scale, map.side, map.depth));
            if map.side != db.grid_side {
                return Err(Error::invalid("patch database", format!("{} has a {}-cell grid", img.image_id, map.side)));
            }
            db.add_image(img.image_id.clone(), image, ds.as_flat())?;
        }
        db.ok_or_else(|| Error::invalid("patch database", "manifest has no images"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn patch_side(&self) -> usize {
        patch_rect(self.image_side, self.grid_side, 0, 0).map(|r| r.side).unwrap_or(0)
    }

    fn descriptor(&self, e: usize) -> &[f64] {
        &self.descriptors[e * self.dim..(e + 1) * self.dim]
    }

    fn entry_index(&self, image_id: &str, i: usize, j: usize) -> Result<usize> {
        let img = self
            .image_ids
            .iter()
            .position(|x| x == image_id)
            .ok_or_else(|| Error::UnknownId(image_id.to_string()))?;
        if i >= self.grid_side || j >= self.grid_side {
            return Err(Error::invalid("patch", format!("cell ({i},{j}) outside {0}x{0} grid", self.grid_side)));
        }
        Ok(img * self.grid_side * self.grid_side + i * self.grid_side + j)
    }

    pub fn patch_ref(&self, image_id: &str, i: usize, j: usize) -> Result<PatchRef> {
        self.entry_index(image_id, i, j)?;
        Ok(PatchRef {
            image_id: image_id.to_string(),
            layer_name: self.layer_name.clone(),
            scale_id: self.scale_id,
            grid_i: i,
            grid_j: j,
            rect: patch_rect(self.image_side, self.grid_side, i, j)?,
        })
    }

    fn patch_pixels(&self, e: usize) -> RgbImage {
        let entry = &self.entries[e];
        let rect = patch_rect(self.image_side, self.grid_side, entry.i, entry.j).expect("validated on insert");
        self.images[entry.image].crop(&rect)
    }

    /// The `k` nearest patches to `query`, by descriptor distance with ties
    /// broken by (image id, row, column); `skip` filters candidates.
    fn nearest(&self, query: &[f64], k: usize, skip: impl Fn(&PatchEntry) -> bool) -> Vec<(usize, f64)> {
        let mut cand: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !skip(e))
            .map(|(idx, _)| (idx, squared_l2(query, self.descriptor(idx))))
            .collect();
        let key = |&(idx, d): &(usize, f64)| {
            let e = &self.entries[idx];
            (d, &self.image_ids[e.image], e.i, e.j)
        };
        cand.sort_by(|a, b| {
            let (da, ia, ra, ca) = key(a);
            let (db, ib, rb, cb) = key(b);
            da.total_cmp(&db).then_with(|| ia.cmp(ib)).then(ra.cmp(&rb)).then(ca.cmp(&cb))
        });
        cand.truncate(k);
        cand.into_iter().map(|(i, d)| (i, d.sqrt())).collect()
    }

    /// Neighbour refs for a patch, excluding the patch itself.
    pub fn neighbours(&self, r: &PatchRef, k: usize) -> Result<Vec<(PatchRef, f64)>> {
        let own = self.entry_index(&r.image_id, r.grid_i, r.grid_j)?;
        let own_entry = self.entries[own].clone();
        let query = self.descriptor(own).to_vec();
        let found = self.nearest(&query, k, |e| e.image == own_entry.image && e.i == own_entry.i && e.j == own_entry.j);
        found
            .into_iter()
            .map(|(idx, d)| {
                let e = &self.entries[idx];
                Ok((self.patch_ref(&self.image_ids[e.image], e.i, e.j)?, d))
            })
            .collect()
    }
}

fn average_patches(patches: &[RgbImage]) -> RgbImage {
    let side = patches[0].width;
    let mut out = RgbImage::new(side, side);
    let n = patches.len() as u32;
    for (o, px) in out.pixels.iter_mut().enumerate() {
        let sum: u32 = patches.iter().map(|p| u32::from(p.pixels[o])).sum();
        *px = ((sum + n / 2) / n) as u8;
    }
    out
}

/// Replaces every cell of `target_id`'s grid by the pixel-wise mean of its
/// `k_nn` nearest database patches. Patches from the target image itself are
/// skipped when `exclude_self` is set.
pub fn correspondence_mosaic(db: &PatchDatabase, target_id: &str, k_nn: usize, exclude_self: bool) -> Result<RgbImage> {
    if k_nn == 0 {
        return Err(Error::invalid("k_nn", "must be >= 1"));
    }
    let target = db
        .image_ids
        .iter()
        .position(|x| x == target_id)
        .ok_or_else(|| Error::UnknownId(target_id.to_string()))?;
    let g = db.grid_side;
    let side = db.patch_side();
    let cells: Vec<Result<RgbImage>> = (0..g * g)
        .into_par_iter()
        .map(|cell| {
            let query = db.descriptor(target * g * g + cell);
            let found = db.nearest(query, k_nn, |e| exclude_self && e.image == target);
            if found.len() < k_nn {
                return Err(Error::Computation(format!(
                    "only {} candidate patches for k_nn = {k_nn}",
                    found.len()
                )));
            }
            let patches: Vec<RgbImage> = found.iter().map(|&(idx, _)| db.patch_pixels(idx)).collect();
            Ok(average_patches(&patches))
        })
        .collect();
    let mut out = RgbImage::new(g * side, g * side);
    for (cell, patch) in cells.into_iter().enumerate() {
        out.blit(&patch?, (cell % g) * side, (cell / g) * side);
    }
    Ok(out)
}

/// One row per reference: the reference patch followed by its `k_nn`
/// nearest patches in ascending distance.
pub fn patch_clusters(db: &PatchDatabase, references: &[PatchRef], k_nn: usize) -> Result<RgbImage> {
    let side = db.patch_side();
    let rows: Vec<Result<Vec<RgbImage>>> = references
        .par_iter()
        .map(|r| {
            let own = db.entry_index(&r.image_id, r.grid_i, r.grid_j)?;
            let mut row = vec![db.patch_pixels(own)];
            let found = db.neighbours(r, k_nn)?;
            if found.len() < k_nn {
                return Err(Error::Computation(format!("only {} neighbours for k_nn = {k_nn}", found.len())));
            }
            for (n, _) in found {
                row.push(db.patch_pixels(db.entry_index(&n.image_id, n.grid_i, n.grid_j)?));
            }
            Ok(row)
        })
        .collect();
    let mut out = RgbImage::new((k_nn + 1) * side, references.len() * side);
    for (r, row) in rows.into_iter().enumerate() {
        for (c, patch) in row?.iter().enumerate() {
            out.blit(patch, c * side, r * side);
        }
    }
    Ok(out)
}

/// Uniform seeded sample of `count` distinct grid positions across the
/// database.
pub fn sample_patch_refs(db: &PatchDatabase, count: usize, seed: u64) -> Result<Vec<PatchRef>> {
    if count > db.len() {
        return Err(Error::invalid("patch sample", format!("{count} requested, {} available", db.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, db.len(), count).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|idx| {
            let e = &db.entries[idx];
            db.patch_ref(&db.image_ids[e.image], e.i, e.j)
        })
        .collect()
}

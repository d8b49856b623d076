//! Visual vocabularies: k-means over L2-normalized local descriptors and
//! nearest-word assignment.
//!
//! Training is Lloyd's algorithm from a seeded k-means++ start. Every
//! assignment step is logged with its inertia; clusters that come out empty
//! are reseeded to the point farthest from its current centroid and the step
//! is flagged as a repair. Sums are accumulated in point order so the result
//! does not depend on how many threads ran the assignment step.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{check_finite_f64, read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"CBK1";
pub const CODEBOOK_VERSION: u16 = 1;

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
pub const DEFAULT_SAMPLE_CAP: usize = 500_000;

const PAR_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    centroids: Vec<f64>,
    pub layer_name: String,
    pub scale_id: u32,
    pub seed: u64,
    pub iterations_run: usize,
    pub final_inertia: f64,
}

impl Codebook {
    /// Wraps explicit centroids (flat, `k * dim`), e.g. for tests or
    /// externally trained vocabularies.
    pub fn from_centroids(dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::invalid(
                "codebook",
                format!("{} values do not form centroids of dim {dim}", centroids.len()),
            ));
        }
        check_finite_f64(&centroids)?;
        Ok(Codebook {
            k: centroids.len() / dim,
            dim,
            centroids,
            layer_name: String::new(),
            scale_id: 1,
            seed: 0,
            iterations_run: 0,
            final_inertia: 0.0,
        })
    }

    pub fn with_provenance(mut self, layer_name: impl Into<String>, scale_id: u32) -> Self {
        self.layer_name = layer_name.into();
        self.scale_id = scale_id;
        self
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign(&self, v: &[f64]) -> Result<usize> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        Ok(nearest(&self.centroids, self.dim, v).0)
    }

    /// Nearest centroid and its squared distance, without the dimension check.
    pub(crate) fn nearest(&self, v: &[f64]) -> (usize, f64) {
        nearest(&self.centroids, self.dim, v)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_header(CODEBOOK_MAGIC, CODEBOOK_VERSION, 40 + self.centroids.len() * 8);
        w.len_u32(self.k)?;
        w.len_u32(self.dim)?;
        w.u32(self.scale_id);
        w.u64(self.seed);
        w.len_u32(self.iterations_run)?;
        w.f64(self.final_inertia);
        w.str(&self.layer_name);
        for &c in &self.centroids {
            w.f64(c);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, "codebook", CODEBOOK_MAGIC, CODEBOOK_VERSION)?;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let scale_id = r.u32()?;
        let seed = r.u64()?;
        let iterations_run = r.u32()? as usize;
        let final_inertia = r.f64()?;
        let layer_name = r.str()?;
        let n = k
            .checked_mul(dim)
            .ok_or_else(|| Error::invalid("codebook header", "k*dim overflows"))?;
        r.require(n.saturating_mul(8))?;
        let centroids = r.f64_vec(n)?;
        r.finish()?;
        if k == 0 || dim == 0 {
            return Err(Error::invalid("codebook header", "k and dim must be >= 1"));
        }
        check_finite_f64(&centroids)?;
        if final_inertia.is_nan() || final_inertia < 0.0 {
            return Err(Error::invalid("codebook", "final_inertia must be >= 0"));
        }
        Ok(Codebook {
            k,
            dim,
            centroids,
            layer_name,
            scale_id,
            seed,
            iterations_run,
            final_inertia,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// One logged assignment step of Lloyd's algorithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LloydStep {
    pub inertia: f64,
    /// Empty clusters were reseeded during this step.
    pub repaired: bool,
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub log: Vec<LloydStep>,
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl KMeans {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeans {
            k,
            seed,
            max_iter: DEFAULT_MAX_ITER,
            rel_tol: DEFAULT_REL_TOL,
        }
    }

    fn check_input(&self, data: &[f64], dim: usize) -> Result<usize> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(
                "training data",
                format!("{} values do not split into rows of dim {dim}", data.len()),
            ));
        }
        if self.k == 0 {
            return Err(Error::invalid("k", "must be >= 1"));
        }
        let n = data.len() / dim;
        if n < self.k {
            return Err(Error::TooFewPoints {
                needed: self.k,
                available: n,
            });
        }
        check_finite_f64(data)?;
        Ok(n)
    }

    /// k-means++ seeding driven by `self.seed`.
    pub fn seed_centroids(&self, data: &[f64], dim: usize) -> Result<Vec<f64>> {
        let n = self.check_input(data, dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let row = |i: usize| &data[i * dim..(i + 1) * dim];

        let first = rng.random_range(0..n);
        let mut centroids = Vec::with_capacity(self.k * dim);
        centroids.extend_from_slice(row(first));
        let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();

        for _ in 1..self.k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = None;
                for (i, &w) in d2.iter().enumerate() {
                    acc += w;
                    if w > 0.0 && acc > target {
                        chosen = Some(i);
                        break;
                    }
                }
                // rounding can leave target just above the final sum
                chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
            } else {
                rng.random_range(0..n)
            };
            let c = row(pick).to_vec();
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(sq_dist(row(i), &c));
            }
            centroids.extend_from_slice(&c);
        }
        Ok(centroids)
    }

    pub fn fit(&self, data: &[f64], dim: usize) -> Result<KMeansFit> {
        let init = self.seed_centroids(data, dim)?;
        self.fit_from(data, dim, init)
    }

    /// Runs Lloyd iterations from explicit initial centroids.
    pub fn fit_from(&self, data: &[f64], dim: usize, init: Vec<f64>) -> Result<KMeansFit> {
        let n = self.check_input(data, dim)?;
        if init.len() != self.k * dim {
            return Err(Error::DimensionMismatch {
                expected: self.k * dim,
                actual: init.len(),
            });
        }
        let mut centroids = init;
        let mut state = assign_with_repair(data, dim, n, &mut centroids);
        let mut log = vec![LloydStep {
            inertia: state.inertia,
            repaired: state.repaired,
        }];
        let mut iterations = 0;

        for _ in 0..self.max_iter {
            let mut next = update_centroids(data, dim, self.k, &state.assignments, &centroids);
            let next_state = assign_with_repair(data, dim, n, &mut next);
            if !next_state.repaired && next_state.inertia > state.inertia {
                // no real progress left; keep the better configuration
                break;
            }
            let prev = state.inertia;
            centroids = next;
            state = next_state;
            iterations += 1;
            log.push(LloydStep {
                inertia: state.inertia,
                repaired: state.repaired,
            });
            if state.repaired {
                continue;
            }
            if prev <= 0.0 || (prev - state.inertia) < self.rel_tol * prev {
                break;
            }
        }

        let codebook = Codebook {
            k: self.k,
            dim,
            centroids,
            layer_name: String::new(),
            scale_id: 1,
            seed: self.seed,
            iterations_run: iterations,
            final_inertia: state.inertia,
        };
        Ok(KMeansFit {
            codebook,
            log,
            assignments: state.assignments,
        })
    }
}

/// Trains a vocabulary over `descriptors` (all of one dimension).
pub fn train_codebook(
    descriptors: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    rel_tol: f64,
) -> Result<Codebook> {
    let dim = descriptors.first().map(Vec::len).unwrap_or(0);
    let mut flat = Vec::with_capacity(descriptors.len() * dim);
    for d in descriptors {
        if d.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: d.len(),
            });
        }
        flat.extend_from_slice(d);
    }
    if descriptors.len() < k {
        return Err(Error::TooFewPoints {
            needed: k,
            available: descriptors.len(),
        });
    }
    let km = KMeans {
        k,
        seed,
        max_iter,
        rel_tol,
    };
    Ok(km.fit(&flat, dim)?.codebook)
}

/// Uniformly samples at most `cap` rows (seeded), preserving their order.
pub fn subsample_rows(data: &[f64], dim: usize, cap: usize, seed: u64) -> Vec<f64> {
    let n = data.len() / dim.max(1);
    if n <= cap {
        return data.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, cap).into_vec();
    picked.sort_unstable();
    let mut out = Vec::with_capacity(cap * dim);
    for i in picked {
        out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
    }
    out
}

struct Assignment {
    assignments: Vec<usize>,
    inertia: f64,
    repaired: bool,
}

fn assign_all(data: &[f64], dim: usize, centroids: &[f64]) -> Vec<(usize, f64)> {
    if data.len() / dim >= PAR_THRESHOLD {
        data.par_chunks_exact(dim)
            .map(|p| nearest(centroids, dim, p))
            .collect()
    } else {
        data.chunks_exact(dim).map(|p| nearest(centroids, dim, p)).collect()
    }
}

fn assign_with_repair(data: &[f64], dim: usize, n: usize, centroids: &mut [f64]) -> Assignment {
    let k = centroids.len() / dim;
    let mut repaired = false;
    let mut attempts = 0;
    loop {
        let nearest = assign_all(data, dim, centroids);
        let mut counts = vec![0usize; k];
        for &(c, _) in &nearest {
            counts[c] += 1;
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if empty.is_empty() || attempts >= k {
            let inertia = nearest.iter().map(|&(_, d)| d).sum();
            return Assignment {
                assignments: nearest.into_iter().map(|(c, _)| c).collect(),
                inertia,
                repaired,
            };
        }
        attempts += 1;
        repaired = true;
        let mut d2: Vec<f64> = nearest.iter().map(|&(_, d)| d).collect();
        let mut owner: Vec<usize> = nearest.iter().map(|&(c, _)| c).collect();
        for e in empty {
            let far = (0..n)
                .filter(|&i| counts[owner[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if d2[b] >= d2[i] => Some(b),
                    _ => Some(i),
                });
            let Some(p) = far else { break };
            log::debug!("k-means: reseeding empty cluster {e} at point {p}");
            counts[owner[p]] -= 1;
            counts[e] += 1;
            owner[p] = e;
            d2[p] = 0.0;
            centroids[e * dim..(e + 1) * dim].copy_from_slice(&data[p * dim..(p + 1) * dim]);
        }
    }
}

fn update_centroids(data: &[f64], dim: usize, k: usize, assignments: &[usize], old: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &c) in data.chunks_exact(dim).zip(assignments) {
        counts[c] += 1;
        for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
            *s += x;
        }
    }
    for c in 0..k {
        let block = &mut sums[c * dim..(c + 1) * dim];
        if counts[c] == 0 {
            block.copy_from_slice(&old[c * dim..(c + 1) * dim]);
        } else {
            let n = counts[c] as f64;
            block.iter_mut().for_each(|s| *s /= n);
        }
    }
    sums
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[f64], dim: usize, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(v, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

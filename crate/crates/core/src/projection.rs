//! PCA with whitening for compressing VLAD vectors.
//!
//! The principal directions are the top eigenvectors of the sample
//! covariance (divisor `n - 1`). When the input dimension exceeds the number
//! of samples, as it does for real VLADs (`k * d` in the tens of thousands
//! against a few thousand images), the same directions are recovered from
//! the `n x n` Gram matrix of the centered data instead.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::binio::{check_finite_f64, read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::feature_io::l2_normalize_in_place;

pub const PROJECTION_MAGIC: &[u8; 4] = b"PRJ1";
pub const PROJECTION_VERSION: u16 = 1;
pub const DEFAULT_DIM_OUT: usize = 128;
pub const DEFAULT_WHITEN_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub dim_in: usize,
    pub dim_out: usize,
    mean: Vec<f64>,
    /// `dim_out x dim_in`, row-major; rows are orthonormal.
    basis: Vec<f64>,
    eigenvalues: Vec<f64>,
    pub whiten_epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectOptions {
    pub whiten: bool,
    pub l2_normalize: bool,
}

impl Default for ProjectOptions {
    fn default() -> Self {
        ProjectOptions {
            whiten: true,
            l2_normalize: true,
        }
    }
}

pub fn fit_pca_whiten<V: AsRef<[f64]> + Sync>(training: &[V], dim_out: usize, eps: f64) -> Result<Projection> {
    let n = training.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, available: n });
    }
    let dim_in = training[0].as_ref().len();
    for v in training {
        let v = v.as_ref();
        if v.len() != dim_in {
            return Err(Error::DimensionMismatch {
                expected: dim_in,
                actual: v.len(),
            });
        }
        check_finite_f64(v)?;
    }
    if dim_out == 0 || dim_out > dim_in.min(n - 1) {
        return Err(Error::invalid(
            "dim_out",
            format!("{dim_out} not in 1..={} (dim_in {dim_in}, {n} samples)", dim_in.min(n - 1)),
        ));
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::invalid("whitening epsilon", format!("{eps}")));
    }

    let mut mean = vec![0.0; dim_in];
    for v in training {
        for (m, x) in mean.iter_mut().zip(v.as_ref()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = training
        .iter()
        .map(|v| v.as_ref().iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let denom = (n - 1) as f64;

    let (basis, eigenvalues) = if dim_in <= n {
        covariance_route(&centered, dim_in, dim_out, denom)
    } else {
        gram_route(&centered, dim_in, dim_out, denom)?
    };

    Ok(Projection {
        dim_in,
        dim_out,
        mean,
        basis,
        eigenvalues,
        whiten_epsilon: eps,
    })
}

fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn covariance_route(centered: &[Vec<f64>], dim_in: usize, dim_out: usize, denom: f64) -> (Vec<f64>, Vec<f64>) {
    let mut cov = DMatrix::<f64>::zeros(dim_in, dim_in);
    for row in centered {
        for a in 0..dim_in {
            let xa = row[a];
            for b in a..dim_in {
                cov[(a, b)] += xa * row[b];
            }
        }
    }
    for a in 0..dim_in {
        for b in a..dim_in {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let (values, vectors) = sorted_eigen(cov);
    let mut basis = Vec::with_capacity(dim_out * dim_in);
    for c in 0..dim_out {
        let mut row: Vec<f64> = vectors.column(c).iter().copied().collect();
        l2_normalize_in_place(&mut row);
        fix_sign(&mut row);
        basis.extend_from_slice(&row);
    }
    (basis, values[..dim_out].to_vec())
}

fn gram_route(centered: &[Vec<f64>], dim_in: usize, dim_out: usize, denom: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = centered.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|a| (0..n).map(|b| if b < a { 0.0 } else { dot(&centered[a], &centered[b]) / denom }).collect())
        .collect();
    let gram = DMatrix::from_fn(n, n, |a, b| if b >= a { rows[a][b] } else { rows[b][a] });
    let (values, vectors) = sorted_eigen(gram);

    let top = values[0];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim_out);
    for (c, &lambda) in values.iter().enumerate().take(dim_out) {
        if lambda.is_nan() || lambda <= top * 1e-12 {
            return Err(Error::Computation(format!(
                "training set has rank {c}, cannot extract {dim_out} principal components"
            )));
        }
        let u = vectors.column(c);
        let mut row = vec![0.0; dim_in];
        for (x, &w) in centered.iter().zip(u.iter()) {
            for (r, xv) in row.iter_mut().zip(x) {
                *r += w * xv;
            }
        }
        // one modified Gram-Schmidt pass against earlier rows
        for prev in &basis {
            let p = dot(&row, prev);
            for (r, q) in row.iter_mut().zip(prev) {
                *r -= p * q;
            }
        }
        l2_normalize_in_place(&mut row);
        fix_sign(&mut row);
        basis.push(row);
    }
    Ok((basis.concat(), values[..dim_out].to_vec()))
}

/// Makes the entry of largest magnitude positive (earliest on ties).
fn fix_sign(row: &mut [f64]) {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if x.abs() > row[best].abs() {
            best = i;
        }
    }
    if row[best] < 0.0 {
        row.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Projection {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis_row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.dim_in..(i + 1) * self.dim_in]
    }

    /// Whitened projection followed by L2 normalization.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.project_with(v, ProjectOptions::default())
    }

    pub fn project_with(&self, v: &[f64], opts: ProjectOptions) -> Result<Vec<f64>> {
        if v.len() != self.dim_in {
            return Err(Error::DimensionMismatch {
                expected: self.dim_in,
                actual: v.len(),
            });
        }
        check_finite_f64(v)?;
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let mut out: Vec<f64> = (0..self.dim_out)
            .map(|i| {
                let y = dot(self.basis_row(i), &centered);
                if opts.whiten {
                    y / (self.eigenvalues[i] + self.whiten_epsilon).sqrt()
                } else {
                    y
                }
            })
            .collect();
        if opts.l2_normalize {
            l2_normalize_in_place(&mut out);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_header(
            PROJECTION_MAGIC,
            PROJECTION_VERSION,
            16 + 8 * (self.mean.len() + self.eigenvalues.len() + self.basis.len()),
        );
        w.len_u32(self.dim_in)?;
        w.len_u32(self.dim_out)?;
        w.f64(self.whiten_epsilon);
        for &x in self.mean.iter().chain(&self.eigenvalues).chain(&self.basis) {
            w.f64(x);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, "projection", PROJECTION_MAGIC, PROJECTION_VERSION)?;
        let dim_in = r.u32()? as usize;
        let dim_out = r.u32()? as usize;
        let whiten_epsilon = r.f64()?;
        let total = dim_in + dim_out + dim_out * dim_in;
        r.require(total.saturating_mul(8))?;
        let mean = r.f64_vec(dim_in)?;
        let eigenvalues = r.f64_vec(dim_out)?;
        let basis = r.f64_vec(dim_out * dim_in)?;
        r.finish()?;
        check_finite_f64(&mean)?;
        check_finite_f64(&basis)?;
        if dim_out == 0 || dim_out > dim_in {
            return Err(Error::invalid("projection header", format!("dim_out {dim_out} vs dim_in {dim_in}")));
        }
        if eigenvalues.iter().any(|&e| e.is_nan() || e < 0.0) || eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("projection", "eigenvalues must be non-negative and non-increasing"));
        }
        Ok(Projection {
            dim_in,
            dim_out,
            mean,
            basis,
            eigenvalues,
            whiten_epsilon,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

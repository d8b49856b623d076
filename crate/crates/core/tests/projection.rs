#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use proptest::prelude::*;
use vladbench_core::projection::{fit_pca_whiten, ProjectOptions, Projection};

const RAW: ProjectOptions = ProjectOptions {
    whiten: false,
    l2_normalize: false,
};

fn reconstruct(p: &Projection, x: &[f64]) -> Vec<f64> {
    let y = p.project_with(x, RAW).unwrap();
    let mut out = p.mean().to_vec();
    for (i, yi) in y.iter().enumerate() {
        for (o, b) in out.iter_mut().zip(p.basis_row(i)) {
            *o += yi * b;
        }
    }
    out
}

fn assert_orthonormal(p: &Projection, tol: f64) {
    for i in 0..p.dim_out {
        for j in 0..p.dim_out {
            let dot: f64 = p.basis_row(i).iter().zip(p.basis_row(j)).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < tol, "rows {i},{j}: {dot}");
        }
    }
}

#[test]
fn full_rank_reconstruction_is_identity() {
    let data = anisotropic(&mut rng(1), 50, 8);
    let p = fit_pca_whiten(&data, 8, 1e-9).unwrap();
    for x in &data {
        for (a, b) in reconstruct(&p, x).iter().zip(x) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn whitened_training_covariance_is_identity() {
    let data = anisotropic(&mut rng(2), 200, 10);
    let p = fit_pca_whiten(&data, 4, 1e-9).unwrap();
    let opts = ProjectOptions {
        whiten: true,
        l2_normalize: false,
    };
    let out: Vec<Vec<f64>> = data.iter().map(|x| p.project_with(x, opts).unwrap()).collect();
    let cov = covariance(&out);
    for (a, row) in cov.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-3, "cov[{a}][{b}] = {v}");
        }
    }
}

#[test]
fn eigenvalues_match_projected_variance() {
    let data = anisotropic(&mut rng(3), 120, 6);
    let p = fit_pca_whiten(&data, 6, 1e-9).unwrap();
    let out: Vec<Vec<f64>> = data.iter().map(|x| p.project_with(x, RAW).unwrap()).collect();
    let cov = covariance(&out);
    for i in 0..6 {
        assert!((cov[i][i] - p.eigenvalues()[i]).abs() < 1e-8 * (1.0 + p.eigenvalues()[i]));
    }
    assert!(p.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn full_rank_preserves_centered_distances() {
    let data = anisotropic(&mut rng(4), 30, 5);
    let p = fit_pca_whiten(&data, 5, 1e-9).unwrap();
    let out: Vec<Vec<f64>> = data.iter().map(|x| p.project_with(x, RAW).unwrap()).collect();
    for i in 0..data.len() {
        for j in 0..i {
            let a = dist2(&data[i], &data[j]).sqrt();
            let b = dist2(&out[i], &out[j]).sqrt();
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn projection_matches_explicit_matvec() {
    let data = anisotropic(&mut rng(5), 40, 7);
    let p = fit_pca_whiten(&data, 3, 1e-9).unwrap();
    let x = &data[7];
    let mut y = Vec::new();
    for i in 0..3 {
        let mut s = 0.0;
        for c in 0..7 {
            s += p.basis_row(i)[c] * (x[c] - p.mean()[c]);
        }
        y.push(s / (p.eigenvalues()[i] + p.whiten_epsilon).sqrt());
    }
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (a, b) in p.project(x).unwrap().iter().zip(&y) {
        assert!((a - b / n).abs() < 1e-6);
    }
}

#[test]
fn high_dimensional_inputs_use_the_sample_space() {
    // more dimensions than samples, as for VLADs of a small database
    let data = anisotropic(&mut rng(6), 12, 40);
    let p = fit_pca_whiten(&data, 11, 1e-9).unwrap();
    assert_orthonormal(&p, 1e-6);
    for x in &data {
        for (a, b) in reconstruct(&p, x).iter().zip(x) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    assert!(fit_pca_whiten(&data, 12, 1e-9).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn basis_is_orthonormal(seed in 0u64..100_000, n in 6usize..60, d in 2usize..12, frac in 0.1f64..1.0) {
        let data = anisotropic(&mut rng(seed), n, d);
        let out = ((d.min(n - 1) as f64 * frac).ceil() as usize).max(1);
        let p = fit_pca_whiten(&data, out, 1e-9).unwrap();
        assert_orthonormal(&p, 1e-6);
        prop_assert!(p.eigenvalues().iter().all(|&e| e >= 0.0));
        for i in 0..out {
            let row = p.basis_row(i);
            let big = row.iter().enumerate().fold(0, |b, (j, v)| if v.abs() > row[b].abs() { j } else { b });
            prop_assert!(row[big] > 0.0);
        }
        let again = fit_pca_whiten(&data, out, 1e-9).unwrap();
        prop_assert_eq!(p.to_bytes().unwrap(), again.to_bytes().unwrap());
    }
}

//! Brute-force oracles and fixtures shared by the integration tests and the
//! acceptance runner. Everything here is written independently of the
//! library code it checks: plain loops, no shared helpers.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(r: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// Nearest centroid by exhaustive scan, lowest index on ties.
pub fn nearest_oracle(centroids: &[Vec<f64>], v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..centroids.len() {
        if dist2(v, &centroids[i]) < dist2(v, &centroids[best]) {
            best = i;
        }
    }
    best
}

/// Raw VLAD: per-word residual sums, concatenated.
pub fn vlad_oracle(centroids: &[Vec<f64>], descriptors: &[Vec<f64>]) -> Vec<f64> {
    let d = centroids[0].len();
    let mut out = vec![0.0; centroids.len() * d];
    for f in descriptors {
        let w = nearest_oracle(centroids, f);
        for c in 0..d {
            out[w * d + c] += f[c] - centroids[w][c];
        }
    }
    out
}

/// AP as defined on a ranked list of ids: junk (and optionally the query)
/// removed, then mean over positives of precision at each hit.
pub fn ap_oracle(ranking: &[String], positives: &BTreeSet<String>, junk: &BTreeSet<String>, drop: Option<&str>) -> f64 {
    let mut kept = Vec::new();
    for id in ranking {
        if junk.contains(id) || Some(id.as_str()) == drop {
            continue;
        }
        kept.push(id.clone());
    }
    let mut total = 0.0;
    for (r, id) in kept.iter().enumerate() {
        if positives.contains(id) {
            let hits_so_far = kept[..=r].iter().filter(|x| positives.contains(*x)).count();
            total += hits_so_far as f64 / (r + 1) as f64;
        }
    }
    total / positives.len() as f64
}

/// Full ranking by a double loop: every entry scored, then ordered by
/// (distance, id) with a selection sort.
pub fn ranking_oracle(entries: &[(String, Vec<f64>)], q: &[f64]) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = Vec::new();
    for (id, v) in entries {
        scored.push((id.clone(), dist2(q, v).sqrt()));
    }
    for i in 0..scored.len() {
        let mut best = i;
        for j in i + 1..scored.len() {
            let (a, b) = (&scored[j], &scored[best]);
            if a.1 < b.1 || (a.1 == b.1 && a.0 < b.0) {
                best = j;
            }
        }
        scored.swap(i, best);
    }
    scored
}

/// Best 2-partition of up to ~16 points by enumerating every labelling.
/// Returns the two cluster means (ordered by first coordinate) and the SSE.
pub fn best_two_partition(points: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n = points.len();
    let d = points[0].len();
    let mut best: Option<(Vec<Vec<f64>>, f64)> = None;
    for mask in 1u32..(1 << n) - 1 {
        let mut means = vec![vec![0.0; d]; 2];
        let mut counts = [0usize; 2];
        for (i, p) in points.iter().enumerate() {
            let g = ((mask >> i) & 1) as usize;
            counts[g] += 1;
            for c in 0..d {
                means[g][c] += p[c];
            }
        }
        for g in 0..2 {
            for c in 0..d {
                means[g][c] /= counts[g] as f64;
            }
        }
        let mut sse = 0.0;
        for (i, p) in points.iter().enumerate() {
            sse += dist2(p, &means[((mask >> i) & 1) as usize]);
        }
        if best.as_ref().is_none_or(|b| sse < b.1) {
            means.sort_by(|a, b| a[0].total_cmp(&b[0]));
            best = Some((means, sse));
        }
    }
    best.unwrap()
}

/// Two tight quads of 2-D points far apart.
pub fn two_quads() -> Vec<Vec<f64>> {
    let mut pts = Vec::new();
    for (cx, cy) in [(0.0, 0.0), (10.0, 10.0)] {
        for (dx, dy) in [(-0.1, -0.1), (0.1, -0.1), (-0.1, 0.1), (0.1, 0.12)] {
            pts.push(vec![cx + dx, cy + dy]);
        }
    }
    pts
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Sample covariance with divisor n - 1.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for c in 0..d {
            mean[c] += r[c] / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    cov
}

/// Random points with unequal spread per axis, then rotated-ish by mixing.
pub fn anisotropic(r: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mix: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|c| r.random_range(-1.0..1.0) * (d - c) as f64).collect();
            (0..d).map(|a| (0..d).map(|b| mix[a][b] * z[b]).sum::<f64>() + 0.5).collect()
        })
        .collect()
}

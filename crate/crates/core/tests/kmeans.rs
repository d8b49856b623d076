mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use vladbench_core::codebook::{train_codebook, Codebook, KMeans};

fn random_instance(seed: u64) -> (Vec<Vec<f64>>, usize) {
    let mut r = rng(seed);
    let n = r.random_range(4..40);
    let d = r.random_range(1..5);
    let k = r.random_range(1..=n.min(6));
    let mut pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    // duplicated points make empty clusters (and repairs) likely
    if seed.is_multiple_of(4) {
        for i in 1..n / 2 {
            pts[i] = pts[0].clone();
        }
    }
    (pts, k)
}

#[test]
fn inertia_never_rises_between_plain_steps() {
    for seed in 0..200 {
        let (pts, k) = random_instance(seed);
        let fit = KMeans::new(k, seed).fit(&flatten(&pts), pts[0].len()).unwrap();
        for w in fit.log.windows(2) {
            if !w[1].repaired {
                assert!(w[1].inertia <= w[0].inertia, "seed {seed}: {:?}", fit.log);
            }
        }
        assert_eq!(fit.log.last().unwrap().inertia, fit.codebook.final_inertia);
    }
}

#[test]
fn final_assignments_are_nearest() {
    for seed in 0..200 {
        let (pts, k) = random_instance(seed);
        let fit = KMeans::new(k, seed).fit(&flatten(&pts), pts[0].len()).unwrap();
        let cents: Vec<Vec<f64>> = (0..k).map(|i| fit.codebook.centroid(i).to_vec()).collect();
        let mut sse = 0.0;
        for (p, &a) in pts.iter().zip(&fit.assignments) {
            assert_eq!(a, nearest_oracle(&cents, p), "seed {seed}");
            assert_eq!(fit.codebook.assign(p).unwrap(), a);
            for c in &cents {
                assert!(dist2(p, &cents[a]) <= dist2(p, c));
            }
            sse += dist2(p, &cents[a]);
        }
        assert!((sse - fit.codebook.final_inertia).abs() <= 1e-9 * (1.0 + sse));
    }
}

#[test]
fn two_quads_match_exhaustive_partition() {
    let pts = two_quads();
    let (mut expected, best_sse) = best_two_partition(&pts);
    expected.sort_by(|a, b| a[0].total_cmp(&b[0]));
    for seed in 0..10 {
        let cb = train_codebook(&pts, 2, seed, 100, 1e-4).unwrap();
        let mut got: Vec<Vec<f64>> = (0..2).map(|i| cb.centroid(i).to_vec()).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (g, e) in got.iter().zip(&expected) {
            for (x, y) in g.iter().zip(e) {
                assert!((x - y).abs() < 1e-6, "seed {seed}: {got:?} vs {expected:?}");
            }
        }
        assert!((cb.final_inertia - best_sse).abs() < 1e-9);
    }
}

#[test]
fn k_equal_one_gives_the_mean() {
    let mut r = rng(5);
    let pts: Vec<Vec<f64>> = (0..17).map(|_| unit_vector(&mut r, 3)).collect();
    let cb = train_codebook(&pts, 1, 0, 100, 1e-4).unwrap();
    for c in 0..3 {
        let mean = pts.iter().map(|p| p[c]).sum::<f64>() / 17.0;
        assert!((cb.centroid(0)[c] - mean).abs() < 1e-12);
    }
}

#[test]
fn same_inputs_same_codebook() {
    let (pts, k) = random_instance(11);
    let a = train_codebook(&pts, k, 3, 100, 1e-4).unwrap();
    let b = train_codebook(&pts, k, 3, 100, 1e-4).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn truncated_codebook_file_is_rejected() {
    let cb = Codebook::from_centroids(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let bytes = cb.to_bytes().unwrap();
    for cut in [0, 4, 6, bytes.len() - 1] {
        assert!(Codebook::from_bytes(&bytes[..cut]).is_err());
    }
    assert_eq!(Codebook::from_bytes(&bytes).unwrap(), cb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Shuffling the data but starting from the same centroids converges to
    /// the same centroid multiset.
    #[test]
    fn permutation_invariance(seed in 0u64..10_000) {
        let (pts, k) = random_instance(seed | 1);
        let d = pts[0].len();
        let km = KMeans::new(k, seed);
        let init = km.seed_centroids(&flatten(&pts), d).unwrap();
        let a = km.fit_from(&flatten(&pts), d, init.clone()).unwrap();

        let mut r = rng(seed ^ 0xabc);
        let mut shuffled = pts.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, r.random_range(0..=i));
        }
        let b = km.fit_from(&flatten(&shuffled), d, init).unwrap();

        let sorted = |cb: &Codebook| {
            let mut v: Vec<Vec<f64>> = (0..k).map(|i| cb.centroid(i).to_vec()).collect();
            v.sort_by(|x, y| x.iter().zip(y).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
            v
        };
        for (x, y) in sorted(&a.codebook).iter().zip(sorted(&b.codebook).iter()) {
            for (p, q) in x.iter().zip(y) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }
    }
}

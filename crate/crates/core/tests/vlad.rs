mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use vladbench_core::codebook::Codebook;
use vladbench_core::feature_io::DescriptorSet;
use vladbench_core::vlad::{concat_multiscale, encode_vlad, read_vlad, write_vlad, Normalization, VladDescriptor};

struct Instance {
    centroids: Vec<Vec<f64>>,
    descriptors: Vec<Vec<f64>>,
}

fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let k = r.random_range(1..=5);
    let d = r.random_range(1..=4);
    let n = r.random_range(0..=20);
    Instance {
        centroids: (0..k).map(|_| unit_vector(&mut r, d)).collect(),
        descriptors: (0..n).map(|_| unit_vector(&mut r, d)).collect(),
    }
}

fn encode(inst: &Instance) -> VladDescriptor {
    let d = inst.centroids[0].len();
    let cb = Codebook::from_centroids(d, flatten(&inst.centroids)).unwrap();
    let ds = DescriptorSet::from_vectors("img", "l", 1, d, &inst.descriptors).unwrap().l2_normalized();
    encode_vlad(&ds, &cb).unwrap()
}

#[test]
fn matches_brute_force_accumulation() {
    for seed in 0..500 {
        let inst = instance(seed);
        let got = encode(&inst);
        let want = vlad_oracle(&inst.centroids, &inst.descriptors);
        assert_eq!(got.values.len(), want.len());
        for (g, w) in got.values.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "seed {seed}");
        }
    }
}

#[test]
fn mass_is_conserved() {
    for seed in 0..200 {
        let inst = instance(seed);
        let v = encode(&inst);
        let d = v.dim_per_word;
        let mut total = vec![0.0; d];
        for (w, block) in v.blocks().enumerate() {
            let count = inst
                .descriptors
                .iter()
                .filter(|f| nearest_oracle(&inst.centroids, f) == w)
                .count() as f64;
            for c in 0..d {
                total[c] += block[c] + count * inst.centroids[w][c];
            }
        }
        for c in 0..d {
            let s: f64 = inst.descriptors.iter().map(|f| f[c]).sum();
            assert!((total[c] - s).abs() < 1e-5, "seed {seed}");
        }
    }
}

#[test]
fn intra_blocks_are_unit_or_zero() {
    for seed in 0..100 {
        let v = encode(&instance(seed));
        let raw = v.values.clone();
        let intra = v.intra_normalize().unwrap();
        for (b, (block, raw_block)) in intra.blocks().zip(raw.chunks(intra.dim_per_word)).enumerate() {
            let n = block.iter().map(|x| x * x).sum::<f64>().sqrt();
            if raw_block.iter().all(|&x| x == 0.0) {
                assert!(block.iter().all(|&x| x == 0.0), "seed {seed} block {b}");
            } else {
                assert!((n - 1.0).abs() < 1e-6, "seed {seed} block {b}: {n}");
            }
        }
    }
}

#[test]
fn state_machine_rejects_other_orders() {
    let v = encode(&instance(3));
    assert!(v.clone().global_l2().is_err());
    let intra = v.clone().intra_normalize().unwrap();
    assert!(intra.clone().intra_normalize().is_err());
    assert!(intra.clone().ssr_normalize().is_err());
    let full = intra.global_l2().unwrap();
    assert_eq!(full.normalization, Normalization::IntraGlobalL2);
    assert!(full.clone().global_l2().is_err());
    let ssr = v.ssr_normalize().unwrap();
    assert_eq!(ssr.normalization, Normalization::SsrGlobalL2);
    assert!(ssr.intra_normalize().is_err());
}

#[test]
fn ssr_keeps_signs_and_unit_norm() {
    for seed in 0..50 {
        let v = encode(&instance(seed));
        let raw = v.values.clone();
        let s = v.ssr_normalize().unwrap();
        let n = s.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if raw.iter().all(|&x| x == 0.0) {
            assert_eq!(n, 0.0);
            continue;
        }
        assert!((n - 1.0).abs() < 1e-9);
        for (a, b) in raw.iter().zip(&s.values) {
            assert_eq!(a.partial_cmp(&0.0), b.partial_cmp(&0.0));
        }
    }
}

#[test]
fn multiscale_order_is_canonical() {
    let inst = instance(9);
    let d = inst.centroids[0].len();
    let cb = Codebook::from_centroids(d, flatten(&inst.centroids)).unwrap();
    let s1 = DescriptorSet::from_vectors("img", "l", 1, d, &inst.descriptors).unwrap().l2_normalized();
    let mut rev = inst.descriptors.clone();
    rev.reverse();
    let s2 = DescriptorSet::from_vectors("img", "l", 2, d, &rev).unwrap().l2_normalized();
    let a = encode_vlad(&s1, &cb).unwrap();
    let b = encode_vlad(&s2, &cb).unwrap();
    let ab = concat_multiscale(&[a.clone(), b.clone()]).unwrap();
    let ba = concat_multiscale(&[b.clone(), a.clone()]).unwrap();
    assert_eq!(ab, ba);
    assert_eq!(ab.scales, vec![1, 2]);
    assert_eq!(ab.values[..a.values.len()], a.values[..]);
    assert_eq!(ab.values[a.values.len()..], b.values[..]);
    assert!(concat_multiscale(&[a.clone(), a]).is_err());
}

#[test]
fn file_roundtrip_is_f32_exact() {
    let vs: Vec<VladDescriptor> = (0..4)
        .map(|i| {
            let mut v = encode(&instance(40));
            v.image_id = format!("im{i}");
            v.intra_normalize().unwrap().global_l2().unwrap()
        })
        .collect();
    let back = read_vlad(&write_vlad(&vs).unwrap()).unwrap();
    for (a, b) in vs.iter().zip(&back) {
        assert_eq!(a.image_id, b.image_id);
        assert_eq!(a.normalization, b.normalization);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Encoding is bit-identical under any permutation of the descriptors.
    #[test]
    fn order_invariance(seed in 0u64..100_000, shuffle_seed in 0u64..1000) {
        let inst = instance(seed);
        let d = inst.centroids[0].len();
        let cb = Codebook::from_centroids(d, flatten(&inst.centroids)).unwrap();
        let ds = DescriptorSet::from_vectors("img", "l", 1, d, &inst.descriptors).unwrap().l2_normalized();
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut r = rng(shuffle_seed);
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let a = encode_vlad(&ds, &cb).unwrap();
        let b = encode_vlad(&ds.permuted(&order).unwrap(), &cb).unwrap();
        prop_assert_eq!(a.values, b.values);
    }
}

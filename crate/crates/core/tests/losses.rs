mod common;

use common::*;
use mmpt_core::losses::{joint_loss, moco_loss, ntxent_cross, ntxent_intra, ntxent_symmetric, query_bce, LossReport, LossWeights};
use mmpt_core::tensor::Graph;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn rows<R: Rng>(n: usize, d: usize, r: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

fn ntxent(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let (n, d) = (a.len(), a[0].len());
    let mut g = Graph::inference();
    let av = g.constant(&[n, d], a.concat()).unwrap();
    let bv = g.constant(&[n, d], b.concat()).unwrap();
    let l = ntxent_symmetric(&mut g, av, bv, tau).unwrap();
    g.scalar(l)
}

#[test]
fn ntxent_matches_direct_summation() {
    let mut r = rng(20);
    for _ in 0..50 {
        let n = r.random_range(2..6);
        let d = r.random_range(2..6);
        let (a, b) = (rows(n, d, &mut r), rows(n, d, &mut r));
        let tau = r.random_range(0.05..2.0);
        assert!((ntxent(&a, &b, tau) - ntxent_oracle(&a, &b, tau)).abs() < 1e-10);
    }
}

#[test]
fn ntxent_two_pair_closed_form() {
    let e = std::f64::consts::E;
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let closed = ((2.0 + e) / e).ln();
    assert!((ntxent(&eye, &eye, 1.0) - closed).abs() < 1e-12);
    let mut g = Graph::inference();
    let a = g.constant(&[2, 2], eye.concat()).unwrap();
    let intra = ntxent_intra(&mut g, a, a, 1.0).unwrap();
    let cross = ntxent_cross(&mut g, a, a, 1.0).unwrap();
    assert_eq!(g.scalar(intra), g.scalar(cross));
}

#[test]
fn aligned_pairs_beat_permuted_pairs() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let a = rows(4, 8, &mut r);
        let b: Vec<Vec<f64>> = a
            .iter()
            .map(|v| v.iter().map(|x| x + 0.05 * r.random_range(-1.0..1.0)).collect())
            .collect();
        let mut perm = b.clone();
        while perm == b {
            perm.shuffle(&mut r);
        }
        assert!(ntxent(&a, &b, 0.1) < ntxent(&a, &perm, 0.1), "seed {seed}");
    }
}

#[test]
fn ntxent_one_hot_alignment_is_nearly_free() {
    let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    assert!(ntxent(&eye, &eye, 0.1) < 0.01);
}

#[test]
fn ntxent_rotation_invariant() {
    let mut r = rng(21);
    let (a, b) = (rows(3, 3, &mut r), rows(3, 3, &mut r));
    let (s, c) = (0.7f64.sin(), 0.7f64.cos());
    let rot = |v: &Vec<f64>| vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
    let ra: Vec<_> = a.iter().map(rot).collect();
    let rb: Vec<_> = b.iter().map(rot).collect();
    assert!((ntxent(&a, &b, 0.2) - ntxent(&ra, &rb, 0.2)).abs() < 1e-12);
}

fn moco(s: &[f64], key: &[f64], queue: &[f64], d: usize, tau: f64) -> f64 {
    let mut g = Graph::inference();
    let q = g.constant(&[s.len() / d, d], s.to_vec()).unwrap();
    let l = moco_loss(&mut g, q, key, queue, tau).unwrap();
    g.scalar(l)
}

#[test]
fn moco_reference_values_and_queue_symmetry() {
    let e = std::f64::consts::E;
    let v = moco(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 1.0);
    assert!((v - (-(e / (e + 2.0)).ln())).abs() < 1e-12);
    assert!(moco(&[0.3, -0.2, 0.9], &[0.6, 0.0, 0.8], &[], 3, 0.1).abs() < 1e-12);

    let mut r = rng(22);
    let s: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let key: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let queue: Vec<Vec<f64>> = rows(5, 4, &mut r);
    let mut shuffled = queue.clone();
    shuffled.shuffle(&mut r);
    let a = moco(&s, &key, &queue.concat(), 4, 0.2);
    let b = moco(&s, &key, &shuffled.concat(), 4, 0.2);
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn bce_at_one_half_is_ln2() {
    let mut g = Graph::inference();
    let p = g.constant(&[6], vec![0.5; 6]).unwrap();
    let l = query_bce(&mut g, p, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0], None).unwrap();
    assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-9);
}

proptest! {
    #[test]
    fn joint_decomposition(t in prop::array::uniform5(0.0f64..10.0), w in prop::array::uniform3(0.0f64..2.0)) {
        let w = LossWeights { alpha: w[0], beta: w[1], w_contrast: w[2] };
        let r = LossReport::from_terms(t[0], t[1], t[2], t[3], t[4], &w);
        let direct = w.alpha * (t[0] + t[1]) + w.beta * t[2] + w.w_contrast * (t[3] + t[4]);
        prop_assert!((r.joint - direct).abs() < 1e-12);
        prop_assert_eq!(joint_loss(&r, &w), r.joint);
    }

    #[test]
    fn ntxent_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let (a, b) = (rows(3, 4, &mut r), rows(3, 4, &mut r));
        let scaled: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
        prop_assert!((ntxent(&a, &b, 0.3) - ntxent(&scaled, &b, 0.3)).abs() < 1e-9);
    }

    #[test]
    fn bce_is_non_negative(p in prop::collection::vec(0.0f64..=1.0, 1..20), seed in any::<u64>()) {
        let mut r = rng(seed);
        let labels: Vec<f64> = p.iter().map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mut g = Graph::inference();
        let v = g.constant(&[p.len()], p.clone()).unwrap();
        let l = query_bce(&mut g, v, &labels, None).unwrap();
        prop_assert!(g.scalar(l) >= 0.0 && g.scalar(l).is_finite());
    }
}

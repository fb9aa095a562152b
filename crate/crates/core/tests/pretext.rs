mod common;

use common::*;
use mmpt_core::backbone::DropPath;
use mmpt_core::data::{generate_shape, ShapeKind, ShapeSpec};
use mmpt_core::geometry::{farthest_point_sample, knn_group, random_mask};
use mmpt_core::harness::{batch_loss, prepare_sample, LossSettings, TaskSet, TrainConfig, Trainer};
use mmpt_core::pretext::{inflate_box, render_views, sample_queries, MomentumKeys, BACKGROUND};
use mmpt_core::tensor::{Graph, ParamStore};
use rand::Rng;

#[test]
fn sphere_coverage_is_moderate() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let spec = ShapeSpec {
            kind: ShapeKind::Sphere,
            n: 1024,
            noise_sigma: 0.0,
        };
        let cloud = generate_shape(&spec, &mut r).unwrap();
        for img in render_views(&cloud, 3, (32, 32), &mut r).unwrap() {
            let f = img.covered_fraction();
            assert!((0.3..=0.9).contains(&f), "seed {seed}: {f}");
            assert!(img.data.iter().all(|&v| (0.0..=BACKGROUND).contains(&v)));
        }
    }
}

#[test]
fn fake_queries_are_uniform_in_inflated_box() {
    let mut r = rng(40);
    let cloud = random_cloud(256, &mut r);
    let centers = farthest_point_sample(&cloud, 8, 0).unwrap();
    let patches = knn_group(&cloud, &centers, 16).unwrap();
    let part = random_mask(8, 0.5, &mut r).unwrap();
    let n = 10_000;
    let q = sample_queries(&patches, &part, 4, n, cloud.bounds(), &mut r).unwrap();
    let (lo, hi) = inflate_box(cloud.bounds());
    let fakes = &q.queries[q.n_real..];
    for a in 0..3 {
        let mut xs: Vec<f64> = fakes.iter().map(|p| (p[a] - lo[a]) / (hi[a] - lo[a])).collect();
        assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - x).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "axis {a}: KS {ks}");
    }
}

#[test]
fn real_queries_come_from_masked_groups() {
    let mut r = rng(41);
    for _ in 0..20 {
        let cloud = random_cloud(128, &mut r);
        let centers = farthest_point_sample(&cloud, 8, 0).unwrap();
        let patches = knn_group(&cloud, &centers, 8).unwrap();
        let part = random_mask(8, 0.75, &mut r).unwrap();
        let q = sample_queries(&patches, &part, 12, 12, cloud.bounds(), &mut r).unwrap();
        assert_eq!(q.len(), 24);
        let masked_pts: Vec<_> = part.masked.iter().flat_map(|&j| patches.world_patch(j)).collect();
        for (p, &l) in q.queries.iter().zip(&q.labels) {
            let is_real = masked_pts.iter().any(|m| dist2(m, p) < 1e-24);
            if l == 1.0 {
                assert!(is_real);
            } else {
                assert_eq!(l, 0.0);
            }
        }
        assert_eq!(q.labels.iter().filter(|&&l| l == 1.0).count(), q.n_real);
    }
}

#[test]
fn plr_overfits_a_fixed_cloud() {
    let mut cfg = TrainConfig::desk();
    cfg.tasks = "plr".parse().unwrap();
    let mut t = Trainer::new(cfg.clone(), 1).unwrap();
    let spec = ShapeSpec {
        kind: ShapeKind::Torus,
        n: 512,
        noise_sigma: 0.01,
    };
    let mut r = rng(42);
    let cloud = generate_shape(&spec, &mut r).unwrap();
    let inputs = vec![prepare_sample(&t.model, &cloud, cfg.tasks, false, &mut r).unwrap()];
    let settings = LossSettings::from_config(&cfg);
    let accuracy = |t: &Trainer| {
        let mut g = Graph::inference();
        let inp = &inputs[0];
        let enc = t
            .model
            .encode_masked(&mut g, &t.store, inp.patches.clone(), inp.partition.clone(), &inp.drop)
            .unwrap();
        let q = inp.queries.as_ref().unwrap();
        let logits = t.model.plr_decode(&mut g, &t.store, &enc, q).unwrap();
        let hits = g
            .value(logits)
            .iter()
            .zip(&q.labels)
            .filter(|(z, y)| (**z > 0.0) == (**y > 0.5))
            .count();
        hits as f64 / q.len() as f64
    };
    for _ in 0..300 {
        let mut g = Graph::new();
        let terms = batch_loss(&mut g, &t.store, &t.model, &inputs, &[], &[], &settings).unwrap();
        g.backward(terms.joint).unwrap();
        let grads = g.param_grads(&t.store);
        t.opt.step(&mut t.store, &grads, cfg.lr).unwrap();
    }
    let acc = accuracy(&t);
    assert!(acc > 0.9, "{acc}");
}

#[test]
fn momentum_queue_stays_bounded_and_normalized() {
    let mut r = rng(43);
    let mut store = ParamStore::new();
    store.add("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut keys = MomentumKeys::new(&store, 0.9, 5, 3).unwrap();
    for _ in 0..12 {
        let k: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        keys.enqueue(&k).unwrap();
        assert!(keys.len() <= 5);
    }
    for row in keys.queue_flat().chunks(3) {
        assert!((row.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(MomentumKeys::new(&store, 1.0, 5, 3).is_err());
}

#[test]
fn masked_coordinates_never_reach_the_encoder() {
    let cfg = TrainConfig::desk();
    let t = Trainer::new(cfg, 1).unwrap();
    let mut r = rng(44);
    for _ in 0..5 {
        let cloud = random_cloud(512, &mut r);
        let inp = prepare_sample(&t.model, &cloud, TaskSet::TLR_ONLY, false, &mut r).unwrap();
        let mut zeroed = inp.patches.clone();
        for &j in &inp.partition.masked {
            zeroed.centers[j] = [0.0; 3];
            for row in j * zeroed.k..(j + 1) * zeroed.k {
                zeroed.patches[row] = [0.0; 3];
            }
        }
        let mut g = Graph::inference();
        let a = t
            .model
            .encode_masked(&mut g, &t.store, inp.patches, inp.partition.clone(), &DropPath::Off)
            .unwrap();
        let b = t
            .model
            .encode_masked(&mut g, &t.store, zeroed, inp.partition, &DropPath::Off)
            .unwrap();
        assert_eq!(g.value(a.tokens), g.value(b.tokens));
        assert_eq!(g.value(a.pos_visible), g.value(b.pos_visible));
    }
}

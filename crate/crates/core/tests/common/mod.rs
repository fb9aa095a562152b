#![allow(dead_code)]

use mmpt_core::geometry::{Point, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points<R: Rng>(n: usize, rng: &mut R) -> Vec<Point> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()
}

pub fn random_cloud<R: Rng>(n: usize, rng: &mut R) -> PointCloud {
    PointCloud::new(random_points(n, rng)).unwrap()
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Greedy maximin selection evaluated from scratch at every step.
pub fn fps_oracle(pts: &[Point], m: usize, seed: usize) -> Vec<usize> {
    let mut chosen = vec![seed];
    while chosen.len() < m {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..pts.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| dist2(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

/// Indices of the `k` nearest points to `pts[c]`, ordered by (distance, index).
pub fn knn_oracle(pts: &[Point], c: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| {
        dist2(&pts[a], &pts[c])
            .partial_cmp(&dist2(&pts[b], &pts[c]))
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn one_sided(from: &[Point], to: &[Point], f: impl Fn(f64) -> f64) -> f64 {
    let mut total = 0.0;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            best = best.min(dist2(p, q));
        }
        total += f(best);
    }
    total / from.len() as f64
}

pub fn chamfer_l2_oracle(a: &[Point], b: &[Point]) -> f64 {
    one_sided(a, b, |d| d) + one_sided(b, a, |d| d)
}

pub fn chamfer_l1_oracle(a: &[Point], b: &[Point]) -> f64 {
    0.5 * (one_sided(a, b, f64::sqrt) + one_sided(b, a, f64::sqrt))
}

/// Symmetrized NT-Xent evaluated term by term on normalized rows.
pub fn ntxent_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let a: Vec<_> = a.iter().map(unit).collect();
    let b: Vec<_> = b.iter().map(unit).collect();
    let sim = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / tau;
    let n = a.len();
    let direction = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        (0..n)
            .map(|i| {
                let pos = sim(&x[i], &y[i]).exp();
                let same: f64 = (0..n).filter(|&k| k != i).map(|k| sim(&x[i], &x[k]).exp()).sum();
                let cross: f64 = (0..n).map(|k| sim(&x[i], &y[k]).exp()).sum();
                -(pos / (same + cross)).ln()
            })
            .sum::<f64>()
    };
    (direction(&a, &b) + direction(&b, &a)) / (2 * n) as f64
}

use mmpt_core::losses::{
    chamfer_l2_var, moco_loss, ntxent_cross, ntxent_intra, ntxent_symmetric, patch_chamfer_l2, query_bce, FocalParams,
};
use mmpt_core::tensor::{grad_check, GradCheckOptions, GradCheckReport, ParamStore};

fn uniform_param<R: Rng>(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut R) -> mmpt_core::tensor::ParamId {
    let n = shape.iter().product();
    store
        .add(name, shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Finite-difference check of every differentiable loss op on small random inputs.
pub fn loss_op_gradients(opts: GradCheckOptions) -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(opts.seed.wrapping_add(100));
    let mut store = ParamStore::new();
    let pred = uniform_param(&mut store, "pred", &[5, 3], &mut r);
    let patches = uniform_param(&mut store, "patches", &[2, 4, 3], &mut r);
    let logits = uniform_param(&mut store, "logits", &[6], &mut r);
    let a = uniform_param(&mut store, "a", &[3, 4], &mut r);
    let b = uniform_param(&mut store, "b", &[3, 4], &mut r);
    let gt: Vec<f64> = (0..21).map(|_| r.random_range(-1.0..1.0)).collect();
    let patch_gt: Vec<f64> = (0..24).map(|_| r.random_range(-1.0..1.0)).collect();
    let labels = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let keys: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
    let queue: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();

    let mut out = Vec::new();
    let mut check = |name, f: &dyn Fn(&mut mmpt_core::tensor::Graph, &ParamStore) -> mmpt_core::Result<mmpt_core::tensor::Var>| {
        out.push((name, grad_check(&mut store, |g, s| f(g, s), opts).unwrap()));
    };
    check("chamfer_l2", &|g, s| {
        let p = g.param(s, pred);
        let t = g.constant(&[7, 3], gt.clone())?;
        chamfer_l2_var(g, p, t)
    });
    check("patch_chamfer_l2", &|g, s| {
        let p = g.param(s, patches);
        let t = g.constant(&[2, 4, 3], patch_gt.clone())?;
        patch_chamfer_l2(g, p, t)
    });
    check("query_bce", &|g, s| {
        let x = g.param(s, logits);
        let p = g.sigmoid(x)?;
        query_bce(g, p, &labels, None)
    });
    check("query_bce_focal", &|g, s| {
        let x = g.param(s, logits);
        let p = g.sigmoid(x)?;
        query_bce(g, p, &labels, Some(FocalParams::default()))
    });
    check("ntxent_symmetric", &|g, s| {
        let (x, y) = (g.param(s, a), g.param(s, b));
        ntxent_symmetric(g, x, y, 0.5)
    });
    check("ntxent_intra", &|g, s| {
        let (x, y) = (g.param(s, a), g.param(s, b));
        ntxent_intra(g, x, y, 0.1)
    });
    check("ntxent_cross", &|g, s| {
        let (x, y) = (g.param(s, a), g.param(s, b));
        ntxent_cross(g, x, y, 0.3)
    });
    check("moco", &|g, s| {
        let x = g.param(s, a);
        moco_loss(g, x, &keys, &queue, 0.2)
    });
    out
}

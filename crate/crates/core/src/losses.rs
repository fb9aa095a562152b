//! Training losses (on the tape) and evaluation metrics (plain `f64`).

use crate::error::{invalid_arg, shape_err, Result};
use crate::geometry::{sq_dist, Point};
use crate::tensor::{Graph, Var};

/// Clamp applied to probabilities before the logarithm in the BCE term.
pub const PROB_EPS: f64 = 1e-7;

/// Stand-in for `-inf` on masked logits; exponentiates to exactly zero.
const MASKED_LOGIT: f64 = -1e300;

fn nearest_sq(p: &Point, set: &[Point]) -> f64 {
    set.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min)
}

fn check_sets(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.is_empty() || gt.is_empty() {
        return Err(invalid_arg!("chamfer/f-score need non-empty sets ({} vs {})", pred.len(), gt.len()));
    }
    Ok(())
}

/// Mean squared nearest-neighbour distance in both directions, summed.
pub fn chamfer_l2(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_sets(pred, gt)?;
    let a = pred.iter().map(|p| nearest_sq(p, gt)).sum::<f64>() / pred.len() as f64;
    let b = gt.iter().map(|g| nearest_sq(g, pred)).sum::<f64>() / gt.len() as f64;
    Ok(a + b)
}

/// Half the sum of the two mean nearest-neighbour Euclidean distances.
pub fn chamfer_l1(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_sets(pred, gt)?;
    let a = pred.iter().map(|p| nearest_sq(p, gt).sqrt()).sum::<f64>() / pred.len() as f64;
    let b = gt.iter().map(|g| nearest_sq(g, pred).sqrt()).sum::<f64>() / gt.len() as f64;
    Ok(0.5 * (a + b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Default F-score threshold on unit-normalized clouds.
pub const FSCORE_THRESHOLD: f64 = 0.01;

pub fn fscore(pred: &[Point], gt: &[Point], threshold: f64) -> Result<FScore> {
    check_sets(pred, gt)?;
    if !(threshold > 0.0) {
        return Err(invalid_arg!("f-score threshold must be positive, got {threshold}"));
    }
    let t2 = threshold * threshold;
    let within = |from: &[Point], to: &[Point]| from.iter().filter(|p| nearest_sq(p, to) <= t2).count() as f64 / from.len() as f64;
    let precision = within(pred, gt);
    let recall = within(gt, pred);
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(FScore { precision, recall, f })
}

/// Differentiable Chamfer-ℓ2 between two `(n, 3)` / `(m, 3)` tensors.
pub fn chamfer_l2_var(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    if g.shape(pred)[0] == 0 || g.shape(gt)[0] == 0 {
        return Err(invalid_arg!("chamfer of an empty set"));
    }
    let d = g.pairwise_sq_dist(pred, gt)?;
    let to_gt = g.min_over_axis(d, 1)?;
    let to_pred = g.min_over_axis(d, 0)?;
    let a = g.mean(to_gt)?;
    let b = g.mean(to_pred)?;
    g.add(a, b)
}

/// Chamfer-ℓ2 per patch, averaged over patches. Both inputs are `(G, K, 3)`.
pub fn patch_chamfer_l2(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let (sp, sg) = (g.shape(pred).to_vec(), g.shape(gt).to_vec());
    if sp.len() != 3 || sg.len() != 3 || sp[0] != sg[0] || sp[2] != 3 || sg[2] != 3 {
        return Err(shape_err!("patch chamfer: {sp:?} vs {sg:?}"));
    }
    let groups = sp[0];
    let mut terms = Vec::with_capacity(groups);
    for j in 0..groups {
        let p = g.slice(pred, 0, j, 1)?;
        let p = g.reshape(p, &[sp[1], 3])?;
        let t = g.slice(gt, 0, j, 1)?;
        let t = g.reshape(t, &[sg[1], 3])?;
        terms.push(chamfer_l2_var(g, p, t)?);
    }
    let all = g.concat(&terms, 0)?;
    g.mean(all)
}

/// Optional focal modulation of the query BCE term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

/// Mean binary cross-entropy of clamped probabilities against 0/1 labels.
/// With `focal` set, each term is scaled by `α_t (1 - p_t)^γ`.
pub fn query_bce(g: &mut Graph, probs: Var, labels: &[f64], focal: Option<FocalParams>) -> Result<Var> {
    let n = g.value(probs).len();
    if n != labels.len() {
        return Err(shape_err!("query_bce: {n} probabilities vs {} labels", labels.len()));
    }
    if n == 0 {
        return Err(invalid_arg!("query_bce of an empty batch"));
    }
    let shape = [n];
    let p = g.reshape(probs, &shape)?;
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let lab = g.constant(&shape, labels.to_vec())?;
    let inv_lab = g.constant(&shape, labels.iter().map(|l| 1.0 - l).collect())?;
    let loss = match focal {
        None => {
            let logp = g.log(p)?;
            let one_minus = g.neg(p)?;
            let one_minus = g.add_scalar(one_minus, 1.0)?;
            let log1mp = g.log(one_minus)?;
            let pos = g.mul(lab, logp)?;
            let neg = g.mul(inv_lab, log1mp)?;
            g.add(pos, neg)?
        }
        Some(FocalParams { gamma, alpha }) => {
            // p_t = l p + (1 - l)(1 - p)
            let lp = g.mul(lab, p)?;
            let one_minus = g.neg(p)?;
            let one_minus = g.add_scalar(one_minus, 1.0)?;
            let rest = g.mul(inv_lab, one_minus)?;
            let pt = g.add(lp, rest)?;
            let log_pt = g.log(pt)?;
            let miss = g.neg(pt)?;
            let miss = g.add_scalar(miss, 1.0)?;
            let miss = g.clamp(miss, PROB_EPS, 1.0)?;
            let log_miss = g.log(miss)?;
            let scaled = g.scale(log_miss, gamma)?;
            let modulator = g.exp(scaled)?;
            let alpha_t = g.constant(&shape, labels.iter().map(|&l| l * alpha + (1.0 - l) * (1.0 - alpha)).collect())?;
            let w = g.mul(alpha_t, modulator)?;
            g.mul(w, log_pt)?
        }
    };
    let m = g.mean(loss)?;
    g.neg(m)
}

fn check_pair(g: &Graph, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(shape_err!("{what}: {sa:?} vs {sb:?}"));
    }
    Ok((sa[0], sa[1]))
}

/// Sum over `i` of `-log(exp(sim(a_i, b_i)/τ) / (Σ_{k≠i} exp(sim(a_i, a_k)/τ) + Σ_k exp(sim(a_i, b_k)/τ)))`
/// on already-normalized rows.
fn ntxent_direction(g: &mut Graph, a: Var, b: Var, n: usize, tau: f64) -> Result<Var> {
    let at = g.transpose(a)?;
    let bt = g.transpose(b)?;
    let aa = g.matmul(a, at)?;
    let aa = g.scale(aa, 1.0 / tau)?;
    let mut diag = vec![0.0; n * n];
    for i in 0..n {
        diag[i * n + i] = MASKED_LOGIT;
    }
    let diag = g.constant(&[n, n], diag)?;
    let aa = g.add(aa, diag)?;
    let ab = g.matmul(a, bt)?;
    let ab = g.scale(ab, 1.0 / tau)?;
    let logits = g.concat(&[aa, ab], 1)?;
    let lsm = g.log_softmax(logits)?;
    let mut pick = vec![0.0; n * 2 * n];
    for i in 0..n {
        pick[i * 2 * n + n + i] = 1.0;
    }
    let pick = g.constant(&[n, 2 * n], pick)?;
    let chosen = g.mul(lsm, pick)?;
    let total = g.sum(chosen)?;
    g.neg(total)
}

/// Symmetrized NT-Xent: `(1/2N) Σ_i (ℓ_{i,a,b} + ℓ_{i,b,a})`, where each
/// direction's denominator holds the same-modality negatives `k ≠ i` plus
/// every cross pairing. Rows are L2-normalized internally.
pub fn ntxent_symmetric(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    let (n, _) = check_pair(g, a, b, "ntxent")?;
    if n < 2 {
        return Err(invalid_arg!("NT-Xent needs at least 2 rows, got {n}"));
    }
    if !(tau > 0.0) {
        return Err(invalid_arg!("temperature must be positive, got {tau}"));
    }
    let an = g.l2_normalize(a)?;
    let bn = g.l2_normalize(b)?;
    let ab = ntxent_direction(g, an, bn, n, tau)?;
    let ba = ntxent_direction(g, bn, an, n, tau)?;
    let s = g.add(ab, ba)?;
    g.scale(s, 1.0 / (2 * n) as f64)
}

/// Intra-modal term between the mean projected views `z3d` and the 3D logits `s3d`.
pub fn ntxent_intra(g: &mut Graph, z3d: Var, s3d: Var, tau: f64) -> Result<Var> {
    ntxent_symmetric(g, z3d, s3d, tau)
}

/// Cross-modal term between the 3D logits `s3d` and the image projections `z2d`.
pub fn ntxent_cross(g: &mut Graph, s3d: Var, z2d: Var, tau: f64) -> Result<Var> {
    ntxent_symmetric(g, s3d, z2d, tau)
}

/// Mean InfoNCE with one positive key per row and `K` shared queued negatives.
///
/// `key_pos` is `N×d`, `queue` holds `K` rows of width `d` (row-major, may be
/// empty). Keys are treated as constants.
pub fn moco_loss(g: &mut Graph, s3d: Var, key_pos: &[f64], queue: &[f64], tau: f64) -> Result<Var> {
    let shape = g.shape(s3d).to_vec();
    if shape.len() != 2 {
        return Err(shape_err!("moco: queries must be a matrix, got {shape:?}"));
    }
    let (n, d) = (shape[0], shape[1]);
    if key_pos.len() != n * d {
        return Err(shape_err!("moco: {} positive key values for {n}x{d} queries", key_pos.len()));
    }
    if !queue.len().is_multiple_of(d.max(1)) {
        return Err(shape_err!("moco: queue length {} not a multiple of width {d}", queue.len()));
    }
    if !(tau > 0.0) {
        return Err(invalid_arg!("temperature must be positive, got {tau}"));
    }
    let k = queue.len() / d;
    let s = g.l2_normalize(s3d)?;
    let kp = g.constant(&[n, d], key_pos.to_vec())?;
    let prod = g.mul(s, kp)?;
    let pos = g.mean_over_axis(prod, 1)?;
    let pos = g.scale(pos, d as f64)?;
    let pos = g.reshape(pos, &[n, 1])?;
    let logits = if k > 0 {
        let q = g.constant(&[d, k], transpose(queue, k, d))?;
        let neg = g.matmul(s, q)?;
        g.concat(&[pos, neg], 1)?
    } else {
        pos
    };
    let logits = g.scale(logits, 1.0 / tau)?;
    let lsm = g.log_softmax(logits)?;
    let first = g.slice(lsm, 1, 0, 1)?;
    let m = g.mean(first)?;
    g.neg(m)
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Weights of the joint objective. `w_contrast` scales both contrastive terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub w_contrast: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            w_contrast: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.w_contrast].iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid_arg!("loss weights must be non-negative: {self:?}"));
        }
        Ok(())
    }

    /// The contrastive-weight ablation grid, as (alpha, beta, w_contrast).
    pub fn ablation_grid() -> [LossWeights; 5] {
        [1.0, 0.5, 0.2, 0.1, 0.01].map(|w| LossWeights {
            alpha: 1.0,
            beta: 1.0,
            w_contrast: w,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub rec_cd: f64,
    pub rec_bce: f64,
    pub moco: f64,
    pub iml: f64,
    pub cml: f64,
    pub joint: f64,
}

impl LossReport {
    /// Fills `joint` from the five terms.
    pub fn from_terms(rec_cd: f64, rec_bce: f64, moco: f64, iml: f64, cml: f64, w: &LossWeights) -> Self {
        let mut r = Self {
            rec_cd,
            rec_bce,
            moco,
            iml,
            cml,
            joint: 0.0,
        };
        r.joint = joint_loss(&r, w);
        r
    }
}

/// `alpha (rec_cd + rec_bce) + beta moco + w_contrast (iml + cml)`.
pub fn joint_loss(terms: &LossReport, w: &LossWeights) -> f64 {
    w.alpha * (terms.rec_cd + terms.rec_bce) + w.beta * terms.moco + w.w_contrast * (terms.iml + terms.cml)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::inference();
        let v = f(&mut g).unwrap();
        g.scalar(v)
    }

    #[test]
    fn chamfer_small_cases() {
        let a = [[0.0, 0.0, 0.0]];
        let b = [[1.0, 0.0, 0.0]];
        assert_eq!(chamfer_l2(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer_l1(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer_l2(&b, &b).unwrap(), 0.0);
        assert!(chamfer_l2(&[], &b).is_err());
    }

    #[test]
    fn fscore_cases() {
        let gt: Vec<Point> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(fscore(&gt, &gt, 0.01).unwrap().f, 1.0);
        let far: Vec<Point> = gt.iter().map(|p| [p[0], 1.0, 0.0]).collect();
        assert_eq!(fscore(&far, &gt, 0.01).unwrap().f, 0.0);
        let mut noisy = gt.clone();
        noisy.extend(gt.iter().map(|p| [p[0], 50.0, 0.0]));
        let s = fscore(&noisy, &gt, 0.01).unwrap();
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bce_reference_values() {
        let half = eval(|g| {
            let p = g.constant(&[4], vec![0.5; 4])?;
            query_bce(g, p, &[1.0, 0.0, 1.0, 0.0], None)
        });
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let exact = eval(|g| {
            let p = g.constant(&[2], vec![1.0, 0.0])?;
            query_bce(g, p, &[1.0, 0.0], None)
        });
        assert!(exact < 1e-6);
        let mut g = Graph::new();
        let p = g.constant(&[2], vec![0.5; 2]).unwrap();
        assert!(query_bce(&mut g, p, &[1.0], None).is_err());
    }

    #[test]
    fn focal_down_weights_easy_examples() {
        let bce = eval(|g| {
            let p = g.constant(&[2], vec![0.9, 0.1])?;
            query_bce(g, p, &[1.0, 0.0], None)
        });
        let focal = eval(|g| {
            let p = g.constant(&[2], vec![0.9, 0.1])?;
            query_bce(g, p, &[1.0, 0.0], Some(FocalParams::default()))
        });
        assert!(focal < bce * 0.05);
    }

    fn ntxent_value(a: &[f64], b: &[f64], n: usize, d: usize, tau: f64) -> f64 {
        eval(|g| {
            let a = g.constant(&[n, d], a.to_vec())?;
            let b = g.constant(&[n, d], b.to_vec())?;
            ntxent_symmetric(g, a, b, tau)
        })
    }

    #[test]
    fn ntxent_two_orthonormal_pairs() {
        let e = std::f64::consts::E;
        let eye = [1.0, 0.0, 0.0, 1.0];
        let v = ntxent_value(&eye, &eye, 2, 2, 1.0);
        assert!((v - ((2.0 + e) / e).ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn ntxent_large_temperature_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = ntxent_value(&a, &b, 4, 3, 1e6);
        assert!((v - 7f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn ntxent_scale_invariant_and_rejects_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = a.iter().map(|x| x * 7.5).collect();
        let v1 = ntxent_value(&a, &b, 3, 4, 0.3);
        let v2 = ntxent_value(&scaled, &b, 3, 4, 0.3);
        assert!((v1 - v2).abs() < 1e-12);
        let mut g = Graph::new();
        let x = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(ntxent_symmetric(&mut g, x, x, 0.1).is_err());
    }

    #[test]
    fn moco_reference_values() {
        let zero = eval(|g| {
            let s = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
            moco_loss(g, s, &[0.6, 0.8, 1.0, 0.0], &[], 0.1)
        });
        assert_eq!(zero, 0.0);
        let e = std::f64::consts::E;
        let v = eval(|g| {
            let s = g.constant(&[1, 3], vec![1.0, 0.0, 0.0])?;
            moco_loss(g, s, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 1.0)
        });
        assert!((v - (-(e / (e + 2.0)).ln())).abs() < 1e-12);
    }

    #[test]
    fn joint_weights() {
        let r = LossReport::from_terms(1.0, 2.0, 3.0, 4.0, 5.0, &LossWeights::default());
        assert!((r.joint - (3.0 + 3.0 + 0.9)).abs() < 1e-12);
        assert_eq!(joint_loss(&LossReport::default(), &LossWeights::default()), 0.0);
        let double = LossWeights {
            alpha: 2.0,
            beta: 2.0,
            w_contrast: 0.2,
        };
        assert!((joint_loss(&r, &double) - 2.0 * r.joint).abs() < 1e-12);
    }

    #[test]
    fn bce_and_focal_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let logits = store.add("x", &[6], (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        for focal in [None, Some(FocalParams::default())] {
            let rep = grad_check(
                &mut store,
                |g, s| {
                    let x = g.param(s, logits);
                    let p = g.sigmoid(x)?;
                    query_bce(g, p, &labels, focal)
                },
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
    }
}

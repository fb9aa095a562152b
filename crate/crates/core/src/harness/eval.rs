use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::DropPath;
use crate::data::{Dataset, ShapeKind};
use crate::error::{invalid_arg, Result};
use crate::geometry::{Point, PointCloud};
use crate::losses::{chamfer_l1, chamfer_l2, fscore, FSCORE_THRESHOLD};
use crate::pretext::Model;
use crate::tensor::{Graph, ParamStore};

fn eval_drop(model: &Model) -> DropPath {
    DropPath::eval(model.backbone.cfg.drop_path)
}

/// Frozen-encoder global features (class token ⊕ max-pool), width `2·dim`.
pub fn global_features(model: &Model, store: &ParamStore, clouds: &[&PointCloud]) -> Result<Vec<Vec<f64>>> {
    let drop = eval_drop(model);
    clouds
        .iter()
        .map(|c| {
            let mut g = Graph::inference();
            let f = model.f3d(&mut g, store, c, &drop)?;
            Ok(g.value(f).to_vec())
        })
        .collect()
}

/// `g_3D` projections of the global features, width `proj_dim`.
pub fn projection_features(model: &Model, store: &ParamStore, clouds: &[&PointCloud]) -> Result<Vec<Vec<f64>>> {
    let drop = eval_drop(model);
    clouds
        .iter()
        .map(|c| {
            let mut g = Graph::inference();
            let z = model.project_view(&mut g, store, c, &drop)?;
            Ok(g.value(z).to_vec())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression on standardized features, fitted by
/// full-batch gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `d × classes`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
    classes: usize,
}

impl SoftmaxProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, opts: &ProbeOptions) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(invalid_arg!(
                "probe needs matching non-empty features and labels ({} vs {})",
                x.len(),
                y.len()
            ));
        }
        if classes == 0 || y.iter().any(|&c| c >= classes) {
            return Err(invalid_arg!("labels must lie in 0..{classes}"));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for j in 0..d {
                scale[j] += (row[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-16 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut probe = Self {
            mean,
            scale,
            w: vec![0.0; d * classes],
            b: vec![0.0; classes],
            classes,
        };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        for _ in 0..opts.epochs {
            let mut gw = vec![0.0; d * classes];
            let mut gb = vec![0.0; classes];
            for (row, &label) in xs.iter().zip(y) {
                let p = probe.probs_std(row);
                for c in 0..classes {
                    let e = (p[c] - if c == label { 1.0 } else { 0.0 }) / n;
                    gb[c] += e;
                    for j in 0..d {
                        gw[j * classes + c] += e * row[j];
                    }
                }
            }
            for (w, g) in probe.w.iter_mut().zip(&gw) {
                *w -= opts.lr * (g + opts.l2 * *w);
            }
            for (b, g) in probe.b.iter_mut().zip(&gb) {
                *b -= opts.lr * g;
            }
        }
        Ok(probe)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn probs_std(&self, xs: &[f64]) -> Vec<f64> {
        let mut z = self.b.clone();
        for (j, v) in xs.iter().enumerate() {
            for c in 0..self.classes {
                z[c] += v * self.w[j * self.classes + c];
            }
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Most probable class; ties go to the lowest class id.
    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.probs_std(&self.standardize(x));
        let mut best = 0;
        for c in 1..p.len() {
            if p[c] > p[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &l)| self.predict(r) == l).count();
        hits as f64 / x.len().max(1) as f64
    }
}

fn gather(feats: &[Vec<f64>], data: &Dataset, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    (
        idx.iter().map(|&i| feats[i].clone()).collect(),
        idx.iter().map(|&i| data.samples[i].class_id).collect(),
    )
}

/// Test-split accuracy of a probe fitted on train-split global features.
pub fn linear_probe(model: &Model, store: &ParamStore, data: &Dataset, opts: &ProbeOptions) -> Result<f64> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(invalid_arg!("linear probe needs non-empty train and test splits"));
    }
    let clouds: Vec<&PointCloud> = data.samples.iter().map(|s| &s.cloud).collect();
    let feats = global_features(model, store, &clouds)?;
    let (xtr, ytr) = gather(&feats, data, &data.train);
    let (xte, yte) = gather(&feats, data, &data.test);
    let probe = SoftmaxProbe::fit(&xtr, &ytr, data.num_classes(), opts)?;
    Ok(probe.accuracy(&xte, &yte))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotResult {
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FewShotSpec {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 10,
            queries: 20,
            episodes: 10,
            seed: 0,
        }
    }
}

/// Episodic few-shot accuracy over precomputed features. Each episode draws
/// `way` classes, then `shot` support and `queries` query samples from each.
pub fn few_shot_features(feats: &[Vec<f64>], labels: &[usize], spec: &FewShotSpec, opts: &ProbeOptions) -> Result<FewShotResult> {
    if spec.way == 0 || spec.shot == 0 || spec.queries == 0 || spec.episodes == 0 {
        return Err(invalid_arg!("way, shot, queries and episodes must all be positive"));
    }
    let classes = labels.iter().map(|&l| l + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let need = spec.shot + spec.queries;
    let eligible: Vec<usize> = (0..classes).filter(|&c| by_class[c].len() >= need).collect();
    if eligible.len() < spec.way {
        return Err(invalid_arg!(
            "{}-way {}-shot with {} queries needs {} classes of {need} samples, found {}",
            spec.way,
            spec.shot,
            spec.queries,
            spec.way,
            eligible.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut accuracies = Vec::with_capacity(spec.episodes);
    for _ in 0..spec.episodes {
        let chosen: Vec<usize> = eligible.choose_multiple(&mut rng, spec.way).copied().collect();
        let (mut xs, mut ys, mut xq, mut yq) = (vec![], vec![], vec![], vec![]);
        for (local, &c) in chosen.iter().enumerate() {
            let picks: Vec<usize> = by_class[c].choose_multiple(&mut rng, need).copied().collect();
            for (j, &i) in picks.iter().enumerate() {
                if j < spec.shot {
                    xs.push(feats[i].clone());
                    ys.push(local);
                } else {
                    xq.push(feats[i].clone());
                    yq.push(local);
                }
            }
        }
        let probe = SoftmaxProbe::fit(&xs, &ys, spec.way, opts)?;
        accuracies.push(probe.accuracy(&xq, &yq));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(FewShotResult { mean, std, accuracies })
}

/// Few-shot evaluation on the frozen encoder's global features of every
/// sample in `data`.
pub fn few_shot_eval(model: &Model, store: &ParamStore, data: &Dataset, spec: &FewShotSpec, opts: &ProbeOptions) -> Result<FewShotResult> {
    let clouds: Vec<&PointCloud> = data.samples.iter().map(|s| &s.cloud).collect();
    let feats = global_features(model, store, &clouds)?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.class_id).collect();
    few_shot_features(&feats, &labels, spec, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconRow {
    pub label: String,
    pub count: usize,
    /// Chamfer ℓ1 × 10³.
    pub cd_l1: f64,
    /// Chamfer ℓ2 × 10³.
    pub cd_l2: f64,
    /// F-score at [`FSCORE_THRESHOLD`].
    pub fscore: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconTable {
    /// One row per class present, then the average over all clouds.
    pub rows: Vec<ReconRow>,
}

impl ReconTable {
    pub fn average(&self) -> &ReconRow {
        self.rows.last().expect("table always has an average row")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("class\tcount\tcd_l1_x1e3\tcd_l2_x1e3\tfscore\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{:.4}\t{:.4}\t{:.4}", r.label, r.count, r.cd_l1, r.cd_l2, r.fscore);
        }
        s
    }
}

/// `(CD-ℓ1 × 10³, CD-ℓ2 × 10³, F-score)` of one reconstruction.
pub fn score_reconstruction(pred: &[Point], gt: &[Point]) -> Result<(f64, f64, f64)> {
    Ok((
        chamfer_l1(pred, gt)? * 1e3,
        chamfer_l2(pred, gt)? * 1e3,
        fscore(pred, gt, FSCORE_THRESHOLD)?.f,
    ))
}

/// Masks each test cloud, reconstructs the masked patches in world
/// coordinates and scores them against the hidden points. The mask of test
/// sample `i` comes from stream `i` under `seed`.
pub fn recon_eval(model: &Model, store: &ParamStore, data: &Dataset, seed: u64) -> Result<ReconTable> {
    if data.test.is_empty() {
        return Err(invalid_arg!("reconstruction report needs a non-empty test split"));
    }
    let drop = eval_drop(model);
    let mut per_class: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); data.num_classes()];
    for &i in &data.test {
        let sample = &data.samples[i];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let patches = model.group(&sample.cloud)?;
        let partition = model.draw_partition(&mut rng)?;
        let mut g = Graph::inference();
        let enc = model.encode_masked(&mut g, store, patches, partition, &drop)?;
        let out = model.tlr_decode(&mut g, store, &enc)?;
        let pred = g.value(out.pred);
        let k = enc.patches.k;
        let (mut p, mut t) = (Vec::new(), Vec::new());
        for (row, &j) in enc.partition.masked.iter().enumerate() {
            let c = enc.patches.centers[j];
            for q in 0..k {
                let o = &pred[(row * k + q) * 3..(row * k + q) * 3 + 3];
                p.push([o[0] + c[0], o[1] + c[1], o[2] + c[2]]);
            }
            t.extend(enc.patches.world_patch(j));
        }
        per_class[sample.class_id].push(score_reconstruction(&p, &t)?);
    }
    let row = |label: String, xs: &[(f64, f64, f64)]| {
        let n = xs.len() as f64;
        ReconRow {
            label,
            count: xs.len(),
            cd_l1: xs.iter().map(|x| x.0).sum::<f64>() / n,
            cd_l2: xs.iter().map(|x| x.1).sum::<f64>() / n,
            fscore: xs.iter().map(|x| x.2).sum::<f64>() / n,
        }
    };
    let mut rows: Vec<ReconRow> = per_class
        .iter()
        .enumerate()
        .filter(|(_, xs)| !xs.is_empty())
        .map(|(c, xs)| {
            let label = ShapeKind::from_class_id(c)
                .map(|k| k.name().to_string())
                .unwrap_or_else(|_| c.to_string());
            row(label, xs)
        })
        .collect();
    let all: Vec<(f64, f64, f64)> = per_class.concat();
    rows.push(row("avg".into(), &all));
    Ok(ReconTable { rows })
}

/// Writes `class_id<TAB>z_1<TAB>…<TAB>z_P` per sample, where `z` is the
/// `g_3D` projection of the frozen global feature.
pub fn embed_dump(model: &Model, store: &ParamStore, data: &Dataset, path: &Path) -> Result<()> {
    let clouds: Vec<&PointCloud> = data.samples.iter().map(|s| &s.cloud).collect();
    let feats = projection_features(model, store, &clouds)?;
    let mut w = BufWriter::new(File::create(path)?);
    for (s, f) in data.samples.iter().zip(&feats) {
        write!(w, "{}", s.class_id)?;
        for v in f {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_memorizes_single_sample() {
        let x = vec![vec![0.3, -1.0]];
        let p = SoftmaxProbe::fit(&x, &[2], 6, &ProbeOptions::default()).unwrap();
        assert_eq!(p.accuracy(&x, &[2]), 1.0);
    }

    #[test]
    fn probe_separates_blobs() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 3) as f64 * 5.0 + (i as f64 * 0.01), 1.0]).collect();
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let p = SoftmaxProbe::fit(&x, &y, 3, &ProbeOptions::default()).unwrap();
        assert_eq!(p.accuracy(&x, &y), 1.0);
    }

    #[test]
    fn one_way_few_shot_is_perfect() {
        let feats: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let spec = FewShotSpec {
            way: 1,
            shot: 3,
            queries: 5,
            episodes: 4,
            seed: 1,
        };
        let r = few_shot_features(&feats, &labels, &spec, &ProbeOptions::default()).unwrap();
        assert_eq!((r.mean, r.std), (1.0, 0.0));
        let too_many = FewShotSpec { way: 3, ..spec };
        assert!(few_shot_features(&feats, &labels, &too_many, &ProbeOptions::default()).is_err());
    }

    #[test]
    fn oracle_reconstruction_scores_perfectly() {
        let pts = vec![[0.0, 0.1, 0.2], [0.5, -0.5, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(score_reconstruction(&pts, &pts).unwrap(), (0.0, 0.0, 1.0));
    }
}

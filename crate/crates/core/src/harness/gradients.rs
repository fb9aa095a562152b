use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TaskSet;
use super::train::{batch_loss, prepare_sample, LossSettings};
use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::geometry::{AugmentSpec, PointCloud};
use crate::losses::{FocalParams, LossWeights};
use crate::pretext::{Model, TaskConfig};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, ParamStore};

#[derive(Debug, Clone)]
pub struct GradientCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn toy_model(seed: u64) -> Result<(ParamStore, Model)> {
    let cfg = BackboneConfig {
        depth: 1,
        dim: 8,
        heads: 2,
        ffn_ratio: 2,
        decoder_depth: 1,
        drop_path: 0.0,
    };
    let task = TaskConfig {
        groups: 4,
        group_size: 4,
        mask_ratio: 0.5,
        n_real: 3,
        n_fake: 3,
        proj_dim: 4,
        image_size: 8,
        image_channels: vec![2, 3],
        n_views: 1,
        tau: 0.5,
        view_augment: AugmentSpec {
            dropout_prob: 0.0,
            ..AugmentSpec::default()
        },
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(&mut store, cfg, task, &mut rng)?;
    Ok((store, model))
}

fn unit_rows<R: Rng>(n: usize, d: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.into_iter().map(|x| x / norm));
    }
    out
}

/// Finite-difference checks of the three task losses and the joint loss
/// on a toy model (4 patches of 4 points, width 8) and a batch of two clouds.
pub fn toy_gradient_suite(opts: &GradCheckOptions) -> Result<Vec<GradientCase>> {
    let (mut store, model) = toy_model(opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let clouds: Vec<PointCloud> = (0..2)
        .map(|_| {
            let pts = (0..24).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
            PointCloud::new(pts)
        })
        .collect::<Result<_>>()?;
    let inputs = clouds
        .iter()
        .map(|c| prepare_sample(&model, c, TaskSet::ALL, true, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let p = model.task.proj_dim;
    let keys = unit_rows(2, p, &mut rng);
    let queue = unit_rows(5, p, &mut rng);

    let only = |tlr, plr, mcl| TaskSet { tlr, plr, mcl };
    let cases: [(&'static str, TaskSet, Option<FocalParams>); 5] = [
        ("tlr", only(true, false, false), None),
        ("plr", only(false, true, false), None),
        ("plr_focal", only(false, true, false), Some(FocalParams::default())),
        ("mcl", only(false, false, true), None),
        ("joint", TaskSet::ALL, None),
    ];
    let mut out = Vec::new();
    for (name, tasks, focal) in cases {
        let settings = LossSettings {
            weights: LossWeights::default(),
            tasks,
            focal,
            tau: model.task.tau,
        };
        let report = grad_check(
            &mut store,
            |g, s| Ok(batch_loss(g, s, &model, &inputs, &keys, &queue, &settings)?.joint),
            *opts,
        )?;
        out.push(GradientCase { name, report });
    }
    Ok(out)
}

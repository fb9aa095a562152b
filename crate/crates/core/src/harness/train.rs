use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{TaskSet, TrainConfig};
use super::optim::{cosine_lr, AdamHyper, AdamW};
use crate::backbone::DropPath;
use crate::data::Dataset;
use crate::error::{invalid_arg, MmptError, Result};
use crate::geometry::{MaskPartition, PatchSet, PointCloud};
use crate::losses::{moco_loss, ntxent_cross, ntxent_intra, patch_chamfer_l2, query_bce, FocalParams, LossReport, LossWeights};
use crate::pretext::{sample_queries, DepthImage, MclOutput, Model, MomentumKeys, QueryBatch};
use crate::tensor::{Graph, ParamStore, Var};

/// Stream ids of the per-step and per-epoch generators; model
/// initialization uses stream 0.
const STEP_STREAM: u64 = 1 << 32;
const EPOCH_STREAM: u64 = 1 << 33;

#[derive(Debug, Clone)]
pub struct MclInputs {
    pub views: (PointCloud, PointCloud),
    pub images: Vec<DepthImage>,
    pub drops: (DropPath, DropPath),
}

/// Every random draw one sample needs for a training step, taken up front
/// so that the loss is a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct SampleInputs {
    pub patches: PatchSet,
    pub partition: MaskPartition,
    pub drop: DropPath,
    pub queries: Option<QueryBatch>,
    pub mcl: Option<MclInputs>,
}

pub fn prepare_sample<R: Rng + ?Sized>(
    model: &Model,
    cloud: &PointCloud,
    tasks: TaskSet,
    train: bool,
    rng: &mut R,
) -> Result<SampleInputs> {
    let patches = model.group(cloud)?;
    let partition = model.draw_partition(rng)?;
    let drop = model.drop_path(train, rng);
    let queries = if tasks.plr {
        let t = &model.task;
        Some(sample_queries(&patches, &partition, t.n_real, t.n_fake, cloud.bounds(), rng)?)
    } else {
        None
    };
    let mcl = if tasks.mcl {
        let (t1, t2, images) = model.mcl_inputs(cloud, rng)?;
        let drops = (model.drop_path(train, rng), model.drop_path(train, rng));
        Some(MclInputs {
            views: (t1, t2),
            images,
            drops,
        })
    } else {
        None
    };
    Ok(SampleInputs {
        patches,
        partition,
        drop,
        queries,
        mcl,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub tasks: TaskSet,
    pub focal: Option<FocalParams>,
    pub tau: f64,
}

impl LossSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            weights: cfg.weights,
            tasks: cfg.tasks,
            focal: cfg.focal.then(FocalParams::default),
            tau: cfg.task.tau,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchTerms {
    pub joint: Var,
    pub report: LossReport,
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Joint objective over a batch. `keys` holds one momentum key row per
/// sample and `queue` the queued negatives; both are constants.
pub fn batch_loss(
    g: &mut Graph,
    store: &ParamStore,
    model: &Model,
    inputs: &[SampleInputs],
    keys: &[f64],
    queue: &[f64],
    s: &LossSettings,
) -> Result<BatchTerms> {
    if inputs.is_empty() {
        return Err(invalid_arg!("empty batch"));
    }
    let (mut cds, mut bces, mut z3d, mut s3d, mut z2d) = (vec![], vec![], vec![], vec![], vec![]);
    for inp in inputs {
        let enc = model.encode_masked(g, store, inp.patches.clone(), inp.partition.clone(), &inp.drop)?;
        if s.tasks.tlr {
            let out = model.tlr_decode(g, store, &enc)?;
            cds.push(patch_chamfer_l2(g, out.pred, out.gt)?);
        }
        if s.tasks.plr {
            let q = inp
                .queries
                .as_ref()
                .ok_or_else(|| invalid_arg!("PLR enabled but no queries drawn"))?;
            let logits = model.plr_decode(g, store, &enc, q)?;
            let probs = g.sigmoid(logits)?;
            bces.push(query_bce(g, probs, &q.labels, s.focal)?);
        }
        if s.tasks.mcl {
            let m = inp.mcl.as_ref().ok_or_else(|| invalid_arg!("MCL enabled but no views drawn"))?;
            let glob = model.global_feature(g, enc.tokens)?;
            let MclOutput {
                z3d: z, s3d: sv, z2d: zi, ..
            } = model.mcl_project(g, store, m.views.clone(), &m.images, glob, (&m.drops.0, &m.drops.1))?;
            z3d.push(z);
            s3d.push(sv);
            z2d.push(zi);
        }
    }
    let w = s.weights;
    let mut parts: Vec<Var> = Vec::new();
    let mut report = LossReport::default();
    if !cds.is_empty() {
        let cd = mean_of(g, &cds)?;
        report.rec_cd = g.scalar(cd);
        parts.push(g.scale(cd, w.alpha)?);
    }
    if !bces.is_empty() {
        let bce = mean_of(g, &bces)?;
        report.rec_bce = g.scalar(bce);
        parts.push(g.scale(bce, w.alpha)?);
    }
    if !s3d.is_empty() {
        let z3d = g.concat(&z3d, 0)?;
        let s3d = g.concat(&s3d, 0)?;
        let z2d = g.concat(&z2d, 0)?;
        let moco = moco_loss(g, s3d, keys, queue, s.tau)?;
        let iml = ntxent_intra(g, z3d, s3d, s.tau)?;
        let cml = ntxent_cross(g, s3d, z2d, s.tau)?;
        report.moco = g.scalar(moco);
        report.iml = g.scalar(iml);
        report.cml = g.scalar(cml);
        parts.push(g.scale(moco, w.beta)?);
        let c = g.add(iml, cml)?;
        parts.push(g.scale(c, w.w_contrast)?);
    }
    let mut joint = parts[0];
    for &p in &parts[1..] {
        joint = g.add(joint, p)?;
    }
    report.joint = g.scalar(joint);
    Ok(BatchTerms { joint, report })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// 1-based index of the completed step.
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

impl StepLog {
    /// One JSON object with fixed keys.
    pub fn to_json(&self) -> String {
        let r = &self.report;
        let mut s = String::new();
        let _ = write!(
            s,
            "{{\"step\":{},\"lr\":{},\"rec_cd\":{},\"rec_bce\":{},\"moco\":{},\"iml\":{},\"cml\":{},\"joint\":{}}}",
            self.step, self.lr, r.rec_cd, r.rec_bce, r.moco, r.iml, r.cml, r.joint
        );
        s
    }
}

/// Online parameters, optimizer, momentum keys and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub opt: AdamW,
    pub keys: MomentumKeys,
    pub step: usize,
    pub total_steps: usize,
}

impl Trainer {
    /// Fresh state. All randomness derives from `cfg.seed`: the model and
    /// the initial (random unit-vector) key queue from stream 0, each step
    /// and each epoch shuffle from its own stream.
    pub fn new(cfg: TrainConfig, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(invalid_arg!("training split is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, cfg.backbone, cfg.task.clone(), &mut rng)?;
        let opt = AdamW::new(
            &store,
            AdamHyper {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
                weight_decay: cfg.weight_decay,
            },
        );
        let dim = cfg.task.proj_dim;
        let mut keys = MomentumKeys::new(&store, cfg.momentum, cfg.queue_size, dim)?;
        for _ in 0..cfg.queue_size {
            let v: Vec<f64> = (0..dim)
                .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
                .collect();
            keys.enqueue(&v)?;
        }
        let total_steps = cfg.total_steps(train_len);
        Ok(Self {
            cfg,
            model,
            store,
            opt,
            keys,
            step: 0,
            total_steps,
        })
    }

    pub fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(STEP_STREAM + self.step as u64);
        rng
    }

    /// Dataset indices of the current step's batch: consecutive slices of a
    /// per-epoch shuffle of `train`, wrapping to fill the last batch.
    pub fn batch_indices(&self, train: &[usize]) -> Vec<usize> {
        let b = self.cfg.batch_size;
        let per_epoch = train.len().div_ceil(b).max(1);
        let (epoch, pos) = (self.step / per_epoch, self.step % per_epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(EPOCH_STREAM + epoch as u64);
        let mut order = train.to_vec();
        order.shuffle(&mut rng);
        (0..b).map(|j| order[(pos * b + j) % order.len()]).collect()
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.cfg.lr, self.cfg.lr_floor)
    }

    /// One optimizer step on the next batch of `data`'s train split.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog> {
        let batch = self.batch_indices(&data.train);
        let lr = self.current_lr();
        let settings = LossSettings::from_config(&self.cfg);
        let mut rng = self.step_rng();
        let mut inputs = Vec::with_capacity(batch.len());
        for &i in &batch {
            let cloud = &data
                .samples
                .get(i)
                .ok_or_else(|| invalid_arg!("sample index {i} out of range"))?
                .cloud;
            inputs.push(prepare_sample(&self.model, cloud, self.cfg.tasks, true, &mut rng)?);
        }
        if self.step == 0 {
            self.dump_views(&inputs)?;
        }
        let mut keys = Vec::new();
        if self.cfg.tasks.mcl {
            for inp in &inputs {
                let view = &inp.mcl.as_ref().expect("views drawn when MCL is enabled").views.0;
                keys.extend(self.model.key(&self.keys.store, view)?);
            }
        }
        let queue = self.keys.queue_flat();
        let mut g = Graph::new();
        let terms = batch_loss(&mut g, &self.store, &self.model, &inputs, &keys, &queue, &settings)
            .and_then(|t| {
                let r = t.report;
                if [r.rec_cd, r.rec_bce, r.moco, r.iml, r.cml, r.joint].iter().all(|x| x.is_finite()) {
                    Ok(t)
                } else {
                    Err(MmptError::Numeric(format!("non-finite loss terms {r:?}")))
                }
            })
            .and_then(|t| g.backward(t.joint).map(|_| t))
            .map_err(|e| self.diagnose(e, &batch, lr))?;
        let grads = g.param_grads(&self.store);
        self.opt.step(&mut self.store, &grads, lr)?;
        if self.cfg.tasks.mcl {
            self.keys.update(&self.store)?;
            for k in keys.chunks(self.cfg.task.proj_dim) {
                self.keys.enqueue(k)?;
            }
        }
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            lr,
            report: terms.report,
        })
    }

    fn diagnose(&self, e: MmptError, batch: &[usize], lr: f64) -> MmptError {
        match e {
            MmptError::Numeric(msg) => {
                let worst = self
                    .store
                    .iter()
                    .map(|(_, p)| (p.name.as_str(), p.data.iter().fold(0.0f64, |a, x| a.max(x.abs()))))
                    .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
                MmptError::Numeric(format!(
                    "{msg} at step {} (lr {lr}, batch {batch:?}, largest parameter {} = {})",
                    self.step + 1,
                    worst.0,
                    worst.1
                ))
            }
            other => other,
        }
    }

    fn dump_views(&self, inputs: &[SampleInputs]) -> Result<()> {
        let Some(dir) = &self.cfg.dump_views else { return Ok(()) };
        std::fs::create_dir_all(dir)?;
        for (i, inp) in inputs.iter().enumerate() {
            if let Some(m) = &inp.mcl {
                for (v, img) in m.images.iter().enumerate() {
                    img.write_pgm(&dir.join(format!("sample{i}_view{v}.pgm")))?;
                }
            }
        }
        Ok(())
    }

    /// Runs steps until `total_steps`, passing each log record to `log`.
    pub fn run<F: FnMut(&StepLog)>(&mut self, data: &Dataset, until: usize, mut log: F) -> Result<()> {
        while self.step < until {
            let rec = self.train_step(data)?;
            log(&rec);
        }
        Ok(())
    }
}

/// Full pre-training run from a fresh state.
pub fn pretrain<F: FnMut(&StepLog)>(cfg: TrainConfig, data: &Dataset, log: F) -> Result<Trainer> {
    if data.is_empty() {
        return Err(invalid_arg!("empty dataset"));
    }
    let mut t = Trainer::new(cfg, data.train.len())?;
    let total = t.total_steps;
    t.run(data, total, log)?;
    Ok(t)
}

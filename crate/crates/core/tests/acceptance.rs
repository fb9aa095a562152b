//! One PASS/FAIL line per acceptance criterion, written straight to stdout so
//! it shows up without `--nocapture`. Tolerances are pinned here.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use mmpt_core::backbone::DropPath;
use mmpt_core::data::{build_dataset, Dataset};
use mmpt_core::geometry::{farthest_point_sample, knn_group, random_mask, PointCloud};
use mmpt_core::harness::{
    checkpoint, few_shot_eval, linear_probe, prepare_sample, pretrain, toy_gradient_suite, FewShotSpec, ProbeOptions, StepLog, TaskSet,
    TrainConfig, Trainer,
};
use mmpt_core::losses::{chamfer_l1, chamfer_l2, fscore, joint_loss, moco_loss, ntxent_symmetric, query_bce, LossReport, LossWeights};
use mmpt_core::tensor::{GradCheckOptions, Graph};
use rand::Rng;

const KERNEL_BUDGET: Duration = Duration::from_secs(30);
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const TRAINING_BUDGET: Duration = Duration::from_secs(300);
const GRAD_TOL: f64 = 1e-4;
const LOSS_RATIO: f64 = 0.5;
const PROBE_MIN: f64 = 0.90;
const FEW_SHOT_MIN: f64 = 0.85;
const MASK_FREQ_TOL: f64 = 0.02;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(elapsed: Duration, budget: Duration, msg: String) -> Outcome {
    check(
        elapsed < budget,
        format!("{msg}; {:.1}s of {}s", elapsed.as_secs_f64(), budget.as_secs()),
    )
}

fn kernel_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1000);
    let mut fps_bad = 0;
    for _ in 0..200 {
        let n = r.random_range(2..=64);
        let pts = random_points(n, &mut r);
        let m = r.random_range(1..=n);
        let got = farthest_point_sample(&PointCloud::new(pts.clone()).unwrap(), m, 0).unwrap();
        fps_bad += usize::from(got != fps_oracle(&pts, m, 0));
    }
    let mut knn_bad = 0;
    for _ in 0..200 {
        let n = r.random_range(2..=64);
        let pts = random_points(n, &mut r);
        let k = r.random_range(1..=n);
        let c = r.random_range(0..n);
        let ps = knn_group(&PointCloud::new(pts.clone()).unwrap(), &[c], k).unwrap();
        knn_bad += usize::from(ps.neighbors != knn_oracle(&pts, c, k));
    }
    let mut cd_err: f64 = 0.0;
    for _ in 0..100 {
        let a = random_points(r.random_range(1..=40), &mut r);
        let b = random_points(r.random_range(1..=40), &mut r);
        cd_err = cd_err
            .max((chamfer_l2(&a, &b).unwrap() - chamfer_l2_oracle(&a, &b)).abs())
            .max((chamfer_l1(&a, &b).unwrap() - chamfer_l1_oracle(&a, &b)).abs());
    }
    let msg = format!("fps mismatches {fps_bad}/200, knn mismatches {knn_bad}/200, chamfer max err {cd_err:.1e}");
    check(fps_bad == 0 && knn_bad == 0 && cd_err <= 1e-12, msg.clone())?;
    within(start.elapsed(), KERNEL_BUDGET, msg)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions {
        h: 1e-5,
        tol: GRAD_TOL,
        ..GradCheckOptions::default()
    };
    let mut worst = (0.0f64, "");
    let mut failed = Vec::new();
    let ops = loss_op_gradients(opts);
    let tasks = toy_gradient_suite(&opts).map_err(|e| e.to_string())?;
    let all = ops.iter().map(|(n, r)| (*n, r)).chain(tasks.iter().map(|c| (c.name, &c.report)));
    let mut count = 0;
    for (name, rep) in all {
        count += 1;
        if rep.max_rel_error > worst.0 {
            worst = (rep.max_rel_error, name);
        }
        if !rep.passed() {
            failed.push(name);
        }
    }
    let msg = format!(
        "{count} cases, worst {} at {:.2e} (tol {GRAD_TOL:.0e}), failed {failed:?}",
        worst.1, worst.0
    );
    check(failed.is_empty(), msg.clone())?;
    within(start.elapsed(), GRADIENT_BUDGET, msg)
}

fn formula_identities() -> Outcome {
    let mut g = Graph::inference();
    let half = g.constant(&[4], vec![0.5; 4]).unwrap();
    let bce = query_bce(&mut g, half, &[1.0, 0.0, 1.0, 0.0], None).unwrap();
    let bce_err = (g.scalar(bce) - std::f64::consts::LN_2).abs();

    let s = g.constant(&[2, 3], vec![0.2, -0.4, 0.9, 1.0, 0.3, 0.1]).unwrap();
    let moco = moco_loss(&mut g, s, &[0.6, 0.8, 0.0, 0.0, 1.0, 0.0], &[], 0.1).unwrap();
    let moco0 = g.scalar(moco).abs();

    let e = std::f64::consts::E;
    let eye = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let nt = ntxent_symmetric(&mut g, eye, eye, 1.0).unwrap();
    let nt = g.scalar(nt);
    // Hand evaluation: positive e, same-side negative 1, cross negatives e and 1.
    let hand = -(e / (1.0 + e + 1.0)).ln();
    let nt_err = (nt - hand).abs();

    let pts = random_points(50, &mut rng(7));
    let f = fscore(&pts, &pts, 0.01).unwrap().f;

    let mut r = rng(8);
    let mut joint_err: f64 = 0.0;
    for _ in 0..1000 {
        let t: [f64; 5] = std::array::from_fn(|_| r.random_range(0.0..10.0));
        let w = LossWeights {
            alpha: r.random_range(0.0..2.0),
            beta: r.random_range(0.0..2.0),
            w_contrast: r.random_range(0.0..2.0),
        };
        let rep = LossReport::from_terms(t[0], t[1], t[2], t[3], t[4], &w);
        let direct = w.alpha * (t[0] + t[1]) + w.beta * t[2] + w.w_contrast * (t[3] + t[4]);
        joint_err = joint_err.max((rep.joint - direct).abs()).max((joint_loss(&rep, &w) - direct).abs());
    }
    let msg = format!(
        "|bce-ln2| {bce_err:.1e}, moco(K=0) {moco0:.1e}, ntxent(N=2) {nt:.6} vs hand {hand:.6}, fscore(self) {f}, joint err {joint_err:.1e}"
    );
    check(
        bce_err <= 1e-9 && moco0 <= 1e-12 && nt_err <= 1e-3 && f == 1.0 && joint_err <= 1e-12,
        msg,
    )
}

fn masking_exactness() -> Outcome {
    let mut r = rng(9);
    let mut wrong = 0;
    let mut cases = 0;
    for m in [1, 2, 3, 5, 8, 10, 16, 32, 64, 128, 255] {
        for ratio in [0.0, 0.1, 0.25, 0.4, 0.5, 0.6, 0.75, 0.8, 0.9, 0.95] {
            cases += 1;
            let p = random_mask(m, ratio, &mut r).unwrap();
            let want = (ratio * m as f64).round() as usize;
            let disjoint = p.masked.iter().all(|j| !p.visible.contains(j)) && p.m() == m;
            wrong += usize::from(p.masked.len() != want || !disjoint);
        }
    }
    let mut worst: f64 = 0.0;
    for m in [5, 64] {
        let draws = 10_000;
        let mut hits = vec![0usize; m];
        for _ in 0..draws {
            for j in random_mask(m, 0.8, &mut r).unwrap().masked {
                hits[j] += 1;
            }
        }
        let target = (0.8 * m as f64).round() / m as f64;
        for h in hits {
            worst = worst.max((h as f64 / draws as f64 - target).abs());
        }
    }
    let msg = format!("{wrong}/{cases} grid cells wrong; worst frequency deviation {worst:.4} over 10000 draws");
    check(wrong == 0 && worst <= MASK_FREQ_TOL, msg)
}

fn leakage_guard() -> Outcome {
    let t = Trainer::new(TrainConfig::desk(), 1).map_err(|e| e.to_string())?;
    let mut r = rng(10);
    let mut differing = 0;
    for _ in 0..20 {
        let cloud = random_cloud(512, &mut r);
        let inp = prepare_sample(&t.model, &cloud, TaskSet::ALL, false, &mut r).unwrap();
        let mut zeroed = inp.patches.clone();
        for &j in &inp.partition.masked {
            zeroed.centers[j] = [0.0; 3];
            for row in j * zeroed.k..(j + 1) * zeroed.k {
                zeroed.patches[row] = [0.0; 3];
            }
        }
        let q = inp.queries.as_ref().unwrap();
        let mut g = Graph::inference();
        let a = t
            .model
            .encode_masked(&mut g, &t.store, inp.patches.clone(), inp.partition.clone(), &DropPath::Off)
            .unwrap();
        let b = t
            .model
            .encode_masked(&mut g, &t.store, zeroed, inp.partition.clone(), &DropPath::Off)
            .unwrap();
        let la = t.model.plr_decode(&mut g, &t.store, &a, q).unwrap();
        let lb = t.model.plr_decode(&mut g, &t.store, &b, q).unwrap();
        let same = g.value(a.tokens) == g.value(b.tokens) && g.value(la) == g.value(lb);
        differing += usize::from(!same);
    }
    check(
        differing == 0,
        format!("{differing}/20 clouds changed encoder tokens or PLR logits"),
    )
}

struct Run {
    first: f64,
    last: f64,
    probe: f64,
    trainer: Trainer,
}

fn train_and_probe(cfg: TrainConfig, data: &Dataset, eval: &Dataset) -> Result<Run, String> {
    let mut logs: Vec<StepLog> = Vec::new();
    let trainer = pretrain(cfg.clone(), data, |l| logs.push(*l)).map_err(|e| e.to_string())?;
    let opts = ProbeOptions {
        epochs: cfg.probe_epochs,
        lr: cfg.probe_lr,
        l2: cfg.probe_l2,
    };
    let probe = linear_probe(&trainer.model, &trainer.store, eval, &opts).map_err(|e| e.to_string())?;
    Ok(Run {
        first: logs.first().map_or(f64::NAN, |l| l.report.joint),
        last: logs.last().map_or(f64::NAN, |l| l.report.joint),
        probe,
        trainer,
    })
}

fn desk(seed: u64, tasks: TaskSet) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.seed = seed;
    cfg.tasks = tasks;
    cfg
}

fn training_signal(full42: &Result<Run, String>, data: &Dataset, eval: &Dataset, elapsed: Duration) -> Outcome {
    let run = full42.as_ref().map_err(|e| e.clone())?;
    let start = Instant::now();
    let cfg = &run.trainer.cfg;
    let opts = ProbeOptions {
        epochs: cfg.probe_epochs,
        lr: cfg.probe_lr,
        l2: cfg.probe_l2,
    };
    let fs = few_shot_eval(&run.trainer.model, &run.trainer.store, eval, &FewShotSpec::default(), &opts).map_err(|e| e.to_string())?;
    let ratio = run.last / run.first;
    let msg = format!(
        "joint {:.3} -> {:.3} (ratio {ratio:.3} <= {LOSS_RATIO}), probe {:.3} >= {PROBE_MIN}, 5-way 10-shot {:.3} ± {:.3} >= {FEW_SHOT_MIN}, {} train clouds",
        run.first,
        run.last,
        run.probe,
        fs.mean,
        fs.std,
        data.train.len()
    );
    check(
        ratio <= LOSS_RATIO && run.probe >= PROBE_MIN && fs.mean >= FEW_SHOT_MIN,
        msg.clone(),
    )?;
    within(elapsed + start.elapsed(), TRAINING_BUDGET, msg)
}

fn monotone_benefit(full42: &Result<Run, String>, data: &Dataset, eval: &Dataset) -> Outcome {
    let mut rows = Vec::new();
    let (mut worse, mut ties) = (0, 0);
    for seed in [42, 1, 2] {
        let full = if seed == 42 {
            full42.as_ref().map_err(|e| e.clone())?.probe
        } else {
            train_and_probe(desk(seed, TaskSet::ALL), data, eval)?.probe
        };
        let tlr = train_and_probe(desk(seed, TaskSet::TLR_ONLY), data, eval)?.probe;
        worse += usize::from(tlr > full);
        ties += usize::from(tlr == full);
        rows.push(format!("seed {seed}: tlr {tlr:.3} vs full {full:.3}"));
    }
    check(worse == 0 && ties <= 1, format!("{} (ties {ties})", rows.join(", ")))
}

fn determinism_and_persistence(data: &Dataset) -> Outcome {
    let cfg = TrainConfig::desk();
    let n = data.train.len();
    let steps = |t: &mut Trainer, until| {
        let mut logs = Vec::new();
        t.run(data, until, |l| logs.push(*l)).map(|_| logs).map_err(|e| e.to_string())
    };
    let mut a = Trainer::new(cfg.clone(), n).map_err(|e| e.to_string())?;
    let mut b = Trainer::new(cfg.clone(), n).map_err(|e| e.to_string())?;
    let rerun_same = steps(&mut a, 12)? == steps(&mut b, 12)? && a.store == b.store;

    let mut straight = Trainer::new(cfg.clone(), n).map_err(|e| e.to_string())?;
    let full = steps(&mut straight, 12)?;
    let mut head = Trainer::new(cfg, n).map_err(|e| e.to_string())?;
    let first = steps(&mut head, 2)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("resume.mmck");
    checkpoint::save(&head, &path).map_err(|e| e.to_string())?;
    let mut resumed = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let rest = steps(&mut resumed, 12)?;
    let resume_same = [first, rest.clone()].concat() == full
        && resumed.store == straight.store
        && resumed.keys.queue_flat() == straight.keys.queue_flat()
        && checkpoint::to_bytes(&resumed).ok() == checkpoint::to_bytes(&straight).ok();
    check(
        rerun_same && resume_same,
        format!(
            "re-run identical: {rerun_same}; save/load then {} steps identical: {resume_same}",
            rest.len()
        ),
    )
}

fn report(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, msg) = match &outcome {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    let line = format!("[{tag}] {name}: {msg} [{:.1}s]\n", start.elapsed().as_secs_f64());
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    outcome.is_ok()
}

#[test]
fn acceptance() {
    let mut passed = vec![
        report("kernel oracles", kernel_oracles),
        report("gradient suite", gradient_suite),
        report("formula identities", formula_identities),
        report("masking exactness", masking_exactness),
        report("leakage guard", leakage_guard),
    ];

    let cfg = TrainConfig::desk();
    let data = build_dataset(&cfg.data).unwrap();
    let eval = build_dataset(&cfg.eval).unwrap();
    let start = Instant::now();
    let full42 = train_and_probe(desk(42, TaskSet::ALL), &data, &eval);
    let elapsed = start.elapsed();
    passed.push(report("training signal", || training_signal(&full42, &data, &eval, elapsed)));
    passed.push(report("monotone benefit", || monotone_benefit(&full42, &data, &eval)));
    passed.push(report("determinism and persistence", || determinism_and_persistence(&data)));

    let n_pass = passed.iter().filter(|&&p| p).count();
    let _ = writeln!(std::io::stdout(), "acceptance: {n_pass}/{} criteria passed", passed.len());
    assert!(passed.iter().all(|&p| p), "{n_pass}/{} acceptance criteria passed", passed.len());
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmpt_core::data::{build_dataset, DataConfig, Dataset};
use mmpt_core::harness::{
    checkpoint, embed_dump, few_shot_eval, linear_probe, pretrain, toy_gradient_suite, FewShotSpec, ProbeOptions, TrainConfig, Trainer,
};
use mmpt_core::tensor::GradCheckOptions;
use mmpt_core::{MmptError, Result};

#[derive(Parser)]
#[command(name = "mmpt", version, about = "Multi-task point-cloud pre-training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train from a key = value config; writes checkpoint.mmck and log.jsonl.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Index into the contrastive-weight grid {1, 0.5, 0.2, 0.1, 0.01}.
        #[arg(long)]
        weights_grid: Option<usize>,
        /// Override the number of optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Linear-probe accuracy of a checkpoint's frozen encoder.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Exported dataset; defaults to the checkpoint's evaluation set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Episodic few-shot accuracy (mean and standard deviation).
    Fewshot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 5)]
        way: usize,
        #[arg(long, default_value_t = 10)]
        shot: usize,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 20)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Masked-reconstruction table: CD-l1 x1e3, CD-l2 x1e3, F-score@1%.
    ReconEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the task losses on a toy model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump projected embeddings, one `class_id<TAB>features` line per sample.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate and export the synthetic shape dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        n_points: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
}

fn eval_data(t: &Trainer, dir: &Option<PathBuf>) -> Result<Dataset> {
    match dir {
        Some(d) => Dataset::import(d),
        None => build_dataset(&t.cfg.eval),
    }
}

fn probe_opts(cfg: &TrainConfig) -> ProbeOptions {
    ProbeOptions {
        epochs: cfg.probe_epochs,
        lr: cfg.probe_lr,
        l2: cfg.probe_l2,
    }
}

fn run_pretrain(config: Option<&Path>, out: &Path, grid: Option<usize>, steps: Option<usize>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_text(&fs::read_to_string(p)?)?,
        None => TrainConfig::desk(),
    };
    if let Some(i) = grid {
        cfg = cfg.with_weight_grid(i)?;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let data = match &cfg.data_dir {
        Some(d) => Dataset::import(d)?,
        None => build_dataset(&cfg.data)?,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let mut log = BufWriter::new(File::create(out.join("log.jsonl"))?);
    let every = cfg.log_every.max(1);
    let mut io_err = None;
    let trainer = pretrain(cfg, &data, |rec| {
        let line = rec.to_json();
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
        if rec.step % every == 0 {
            println!("{line}");
        }
    });
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let trainer = trainer?;
    let path = out.join("checkpoint.mmck");
    checkpoint::save(&trainer, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain {
            config,
            out,
            weights_grid,
            steps,
        } => run_pretrain(config.as_deref(), &out, weights_grid, steps),
        Cmd::Probe { ckpt, data } => {
            let t = checkpoint::load(&ckpt)?;
            let d = eval_data(&t, &data)?;
            let acc = linear_probe(&t.model, &t.store, &d, &probe_opts(&t.cfg))?;
            println!("linear_probe_accuracy\t{acc:.4}");
            Ok(())
        }
        Cmd::Fewshot {
            ckpt,
            way,
            shot,
            episodes,
            queries,
            seed,
            data,
        } => {
            let t = checkpoint::load(&ckpt)?;
            let d = eval_data(&t, &data)?;
            let spec = FewShotSpec {
                way,
                shot,
                queries,
                episodes,
                seed,
            };
            let r = few_shot_eval(&t.model, &t.store, &d, &spec, &probe_opts(&t.cfg))?;
            println!("{way}-way {shot}-shot\t{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std);
            Ok(())
        }
        Cmd::ReconEval { ckpt, seed, data } => {
            let t = checkpoint::load(&ckpt)?;
            let d = eval_data(&t, &data)?;
            print!("{}", mmpt_core::harness::recon_eval(&t.model, &t.store, &d, seed)?.to_text());
            Ok(())
        }
        Cmd::Gradcheck { tol, seed } => {
            let opts = GradCheckOptions {
                tol,
                seed,
                ..GradCheckOptions::default()
            };
            let mut failed = Vec::new();
            for case in toy_gradient_suite(&opts)? {
                let r = &case.report;
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{}\t{status}\tmax_rel_error={:.3e}\tchecked={}",
                    case.name, r.max_rel_error, r.checked
                );
                if !r.passed() {
                    failed.push(case.name);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(MmptError::Numeric(format!("gradient check above tolerance {tol}: {failed:?}")))
            }
        }
        Cmd::Embed { ckpt, out, data } => {
            let t = checkpoint::load(&ckpt)?;
            let d = eval_data(&t, &data)?;
            embed_dump(&t.model, &t.store, &d, &out)
        }
        Cmd::GenData {
            out,
            per_class,
            seed,
            n_points,
            noise,
        } => {
            let cfg = DataConfig {
                per_class,
                n_points,
                noise_sigma: noise,
                seed,
                ..DataConfig::default()
            };
            let d = build_dataset(&cfg)?;
            d.export(&out)?;
            eprintln!("wrote {} clouds to {}", d.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

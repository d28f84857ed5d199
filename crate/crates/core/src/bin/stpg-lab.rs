use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ndarray::{Array3, Axis};

use stpg::anchors::fit_anchors;
use stpg::checkpoint;
use stpg::config::{ConfigError, RunConfig};
use stpg::data::{generate_dataset, read_dataset, write_dataset, DatasetSpec};
use stpg::io::{read_tensor, write_tensor, Tensor};
use stpg::metrics::evaluate;
use stpg::rng::Rng;
use stpg::selection::{professional_step_targets, SelectionMode};
use stpg::tensor::ProbabilityMap;
use stpg::train::{run, RunOptions, TrainError};

#[derive(Parser)]
#[command(name = "stpg-lab", version, about = "Dual mean-teacher semi-supervised segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Also checkpoint every N iterations.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Stop early at this iteration, leaving a resumable checkpoint.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Evaluate a checkpoint's Gen-Student on a validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory from `gen-data`, or a dataset spec JSON file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a spec JSON file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit uniformly spread class anchors.
    FitAnchors {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split Gen-Teacher pseudo-labels into consistent / highly / lowly
    /// mismatched sets given Pro-Student predictions.
    RefineLabels {
        /// Pro-Student probabilities, `[W, H, C]` or `[B, W, H, C]`.
        #[arg(long)]
        pro: PathBuf,
        /// Gen-Teacher probabilities, same shape.
        #[arg(long)]
        gen: PathBuf,
        #[arg(long, value_enum, default_value = "cons-hmis")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    ConsOnly,
    ConsLmis,
    ConsHmis,
    All,
}

impl From<Mode> for SelectionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::ConsOnly => SelectionMode::ConsOnly,
            Mode::ConsLmis => SelectionMode::ConsLmis,
            Mode::ConsHmis => SelectionMode::ConsHmis,
            Mode::All => SelectionMode::All,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if let Some(t) = e.downcast_ref::<TrainError>() {
                t.exit_code()
            } else if e.downcast_ref::<ConfigError>().is_some() {
                2
            } else {
                1
            };
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Train { config, resume, out, checkpoint_every, stop_at } => {
            let cfg = RunConfig::load(&config)?;
            let summary = run(&cfg, &out, &RunOptions { resume, checkpoint_every, stop_at })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval { ckpt, data, out } => {
            let (cfg, state) = checkpoint::load_with_config(&ckpt).context("loading checkpoint")?;
            let dataset = load_data(&data)?;
            if dataset.spec.num_classes != cfg.dataset.num_classes || dataset.spec.channels != cfg.dataset.channels {
                bail!("dataset does not match the checkpoint's classes/channels");
            }
            let report = evaluate(&state.gen_student, &dataset.val, &cfg.tail(), state.iteration)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(path, &text)?;
            }
            println!("{text}");
        }
        Command::GenData { spec, out } => {
            let spec: DatasetSpec = serde_json::from_str(&std::fs::read_to_string(&spec)?).context("parsing spec")?;
            let data = generate_dataset(&spec)?;
            write_dataset(&out, &data)?;
            println!(
                "wrote {} labeled, {} unlabeled, {} validation images to {}",
                data.labeled.len(),
                data.unlabeled.len(),
                data.val.len(),
                out.display()
            );
        }
        Command::FitAnchors { classes, dim, tau, seed, out } => {
            let fit = fit_anchors(classes, dim, tau, &mut Rng::new(seed))?;
            write_tensor(&out, &Tensor::F32(fit.anchors.vectors().clone().into_dyn()))?;
            println!(
                "{}",
                serde_json::json!({
                    "loss": fit.loss,
                    "steps": fit.steps,
                    "converged": fit.converged,
                    "max_pairwise_cosine": fit.anchors.max_pairwise_cosine(),
                })
            );
        }
        Command::RefineLabels { pro, gen, mode, out } => refine(&pro, &gen, mode.into(), &out)?,
    }
    Ok(())
}

fn load_data(path: &Path) -> anyhow::Result<stpg::data::Dataset> {
    if path.is_dir() {
        Ok(read_dataset(path)?)
    } else {
        let spec: DatasetSpec = serde_json::from_str(&std::fs::read_to_string(path)?).context("parsing spec")?;
        Ok(generate_dataset(&spec)?)
    }
}

fn read_prob_batch(path: &Path) -> anyhow::Result<Vec<ProbabilityMap>> {
    let arr = read_tensor(path)?.into_f32()?;
    let maps = match arr.ndim() {
        3 => vec![arr.into_dimensionality::<ndarray::Ix3>()?],
        4 => arr
            .into_dimensionality::<ndarray::Ix4>()?
            .axis_iter(Axis(0))
            .map(|a| a.to_owned())
            .collect::<Vec<Array3<f32>>>(),
        n => bail!("{}: expected a rank 3 or 4 tensor, found rank {n}", path.display()),
    };
    Ok(maps.into_iter().map(ProbabilityMap::new).collect::<Result<_, _>>()?)
}

fn stack_u8(maps: Vec<Array3<u8>>) -> anyhow::Result<Tensor> {
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    Ok(Tensor::U8(ndarray::stack(Axis(0), &views)?.into_dyn()))
}

fn refine(pro: &Path, gen: &Path, mode: SelectionMode, out: &Path) -> anyhow::Result<()> {
    let pro = read_prob_batch(pro)?;
    let gen = read_prob_batch(gen)?;
    if pro.len() != gen.len() {
        bail!("batch sizes differ: {} vs {}", pro.len(), gen.len());
    }
    let t = professional_step_targets(&pro, &gen, None, mode)?;
    std::fs::create_dir_all(out)?;
    let part = |f: fn(&stpg::selection::PseudoLabelPartition) -> &stpg::tensor::OneHotMap| {
        t.partitions.iter().map(|p| f(p).data().clone()).collect::<Vec<_>>()
    };
    write_tensor(out.join("cons.stpg"), &stack_u8(part(|p| &p.cons))?)?;
    write_tensor(out.join("hmis.stpg"), &stack_u8(part(|p| &p.hmis))?)?;
    write_tensor(out.join("lmis.stpg"), &stack_u8(part(|p| &p.lmis))?)?;
    write_tensor(
        out.join("targets.stpg"),
        &stack_u8(t.step.targets.iter().map(|m| m.data().clone()).collect())?,
    )?;
    let weights: Vec<_> = t.step.weights.iter().map(|w| w.data().view()).collect();
    write_tensor(out.join("weights.stpg"), &Tensor::F32(ndarray::stack(Axis(0), &weights)?.into_dyn()))?;
    std::fs::write(out.join("confusion.csv"), t.confusion.to_csv())?;
    let counts = t.partition_counts();
    std::fs::write(
        out.join("scores.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "mismatch": t.scores.0,
            "cons": counts.cons,
            "hmis": counts.hmis,
            "lmis": counts.lmis,
        }))?,
    )?;
    println!("cons {} hmis {} lmis {}", counts.cons, counts.hmis, counts.lmis);
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lfdiff::data::{generate_scene, load_scene, save_scene, write_hdr_raw, SceneSpec};
use lfdiff::eval::{ablate_sampling_steps, emit_ablation, emit_report, evaluate_dataset};
use lfdiff::model::{LfDiffConfig, LfDiffModel};
use lfdiff::training::{
    load_model, save_checkpoint, write_loss_csv, Dataset, TrainConfig, Trainer,
};
use lfdiff::{DType, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "lfdiff",
    version,
    about = "Multi-exposure HDR reconstruction with a latent diffusion prior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic exposure-bracketed scenes with ground truth.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum object displacement between frames, in pixels.
        #[arg(long, default_value_t = 4.0)]
        motion: f32,
        /// Exposure values of the three frames, ascending; the middle one is the reference.
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            default_value = "-2,0,2"
        )]
        exposures: Vec<f32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 (prior from ground truth) or stage 2 (diffusion prior).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct one scene and write the HDR result.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every scene of a dataset and write a report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a dataset for several sampler step counts.
    AblateSteps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,50")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter counts per component.
    Params {
        #[arg(long, conflicts_with = "ckpt", default_value = "paper")]
        preset: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
    /// Work finished and outputs were written, but nothing was scored.
    EmptyDataset,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::EmptyDataset) => {
            eprintln!("error: no scene with ground truth was found");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData {
            count,
            size,
            seed,
            motion,
            exposures,
            out,
        } => gen_data(count, size, seed, motion, &exposures, &out),
        Command::Train {
            stage,
            config,
            data,
            out,
            resume,
        } => train(stage, &config, &data, &out, resume.as_deref()),
        Command::Infer {
            ckpt,
            scene,
            steps,
            seed,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let stack = load_scene(&scene)?;
            let hdr = model.infer(&stack, steps, seed)?;
            write_hdr_raw(&hdr, &out)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            steps,
            seed,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let report = evaluate_dataset(&model, &data, steps, seed)?;
            emit_report(&report, &out)?;
            print!("{}", report.summary());
            if report.scenes.is_empty() {
                return Err(Failure::EmptyDataset);
            }
            Ok(())
        }
        Command::AblateSteps {
            ckpt,
            data,
            steps,
            seed,
            out,
        } => {
            if steps.is_empty() || steps.contains(&0) {
                return Err(Failure::Usage("--steps needs positive step counts".into()));
            }
            let model = load_model(&ckpt)?;
            let table = ablate_sampling_steps(&model, &data, &steps, seed)?;
            emit_ablation(&table, &out)?;
            print!("{}", table.to_csv());
            if table.reports.iter().all(|r| r.scenes.is_empty()) {
                return Err(Failure::EmptyDataset);
            }
            Ok(())
        }
        Command::Params { preset, ckpt } => {
            let model = match ckpt {
                Some(p) => load_model(p)?,
                None => {
                    let cfg = LfDiffConfig::preset(&preset)?;
                    LfDiffModel::new(cfg, DType::F32, 0)?
                }
            };
            println!("{}", model.param_count());
            Ok(())
        }
    }
}

fn gen_data(
    count: usize,
    size: usize,
    seed: u64,
    motion: f32,
    exposures: &[f32],
    out: &Path,
) -> Result<(), Failure> {
    if count == 0 {
        return Err(Failure::Usage("--count must be positive".into()));
    }
    let exposure_set: [f32; 3] = exposures.try_into().map_err(|_| {
        Failure::Usage(format!(
            "--exposures needs 3 values, got {}",
            exposures.len()
        ))
    })?;
    for i in 0..count {
        let spec = SceneSpec {
            seed: seed.wrapping_add(i as u64),
            height: size,
            width: size,
            motion_magnitude: motion,
            exposure_set,
            ..SceneSpec::default()
        };
        let stack = generate_scene(&spec)?;
        save_scene(&stack, out.join(format!("scene_{i:04}")))?;
    }
    log::info!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn train(
    stage: u8,
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(), Failure> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", config.display())))?;
    let cfg = TrainConfig::from_text(&format!("stage = {stage}\n{text}"))?;
    if cfg.stage != stage {
        return Err(Failure::Usage(format!(
            "config sets stage {} but --stage is {stage}",
            cfg.stage
        )));
    }
    let dataset = Dataset::load(data)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume_with(p, cfg.clone())?,
        None => Trainer::new(cfg.clone())?,
    };
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", out.display())))?;
    log::info!(
        "stage {stage}: {} scenes, {} trainable tensors, epochs {}..{}",
        dataset.len(),
        trainer.trainable().len(),
        trainer.state().epoch,
        cfg.epochs
    );
    let every = cfg.checkpoint_every;
    trainer.fit(&dataset, |t, records| {
        let epoch = t.state().epoch;
        if let Some(r) = records.last() {
            log::info!(
                "epoch {epoch} step {} loss {:.6} lr {:e}",
                r.step,
                r.l_total,
                r.lr
            );
        }
        if every > 0 && epoch % every == 0 {
            t.save(out.join(format!("epoch_{epoch:05}.lfck")))?;
        }
        Ok(())
    })?;
    let final_path = out.join("checkpoint.lfck");
    save_checkpoint(
        &final_path,
        trainer.model(),
        trainer.config(),
        trainer.state(),
    )?;
    write_loss_csv(&trainer.state().history, out.join("loss.csv"))?;
    log::info!("wrote {}", final_path.display());
    Ok(())
}

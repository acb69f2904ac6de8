use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spatialgen::checkpoint;
use spatialgen::diffusion::sample;
use spatialgen::error::Result;
use spatialgen::harness::{
    ablate_inject, ablate_sharing, export_dataset, report, report_ascii, spatial_score,
    sweep_lambda, AblationReport, ExperimentConfig, RunCache,
};
use spatialgen::numcore::Rng;
use spatialgen::pnm;
use spatialgen::scenegen::{gen_scene, render, tokenize, CurriculumPhase, SceneSpec, TaskTag};
use spatialgen::trainer::{train_probe, Trainer};

#[derive(Parser)]
#[command(
    name = "spatialgen",
    about = "Geometry-guided toy diffusion: train, sample, and run ablations",
    arg_required_else_help = true
)]
struct Cli {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export a dataset of rendered scenes with prompts, depth, and masks.
    GenData {
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        val_count: usize,
    },
    /// Run the two-stage training loop and write checkpoints and logs.
    Train,
    /// Sample an image and its derived depth map from a trained checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Held-out scene index supplying the prompt.
        #[arg(long, default_value_t = 0)]
        scene_index: u64,
    },
    /// Train the depth-probing baseline on frozen semantic states.
    Probe,
    /// Stage-1 ablation over attention-sharing strategies.
    AblateSharing,
    /// Stage-2 ablation over depth injection modes.
    AblateInject,
    /// Stage-2 sweep over the depth-loss weight.
    SweepLambda,
    /// Aggregate run directories into one report.
    Report {
        /// Run directories to aggregate.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
    },
    /// Export ground-truth (and optionally model-derived) depth for a scene.
    ExportDepth {
        #[arg(long, default_value_t = 0)]
        scene_index: u64,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn load_experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let mut exp = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        exp.seeds = vec![seed];
    }
    exp.validate()?;
    Ok(exp)
}

fn write_ablation(out: &Path, rep: &AblationReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("ablation_report.json"),
        serde_json::to_string_pretty(rep)?,
    )?;
    print!("{}", rep.ascii_table());
    Ok(())
}

/// Prompt for a held-out text-to-image scene.
fn scene_prompt(seed: u64, index: u64) -> (Vec<u32>, SceneSpec) {
    let mut rng = Rng::new(seed).stream("cli-scenes").fork(index);
    let pair = gen_scene(&mut rng, &CurriculumPhase::coarse(), TaskTag::T2i);
    (tokenize(&pair.target), pair.target)
}

fn run(cli: Cli) -> Result<()> {
    let exp = load_experiment(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::GenData { count, val_count } => {
            export_dataset(&out, &exp.model, exp.seeds[0], count, val_count)?;
            println!("wrote {} records to {}", count + val_count, out.display());
        }
        Command::Train => {
            std::fs::create_dir_all(&out)?;
            for &seed in &exp.seeds {
                let mut t = Trainer::new(exp.model.clone(), exp.train.clone(), seed)?;
                let boundaries = t.phase_boundaries();
                while !t.finished() {
                    t.step_once()?;
                    if boundaries.contains(&t.global_step) {
                        let path = out.join(format!("seed{seed}_step{}.spfz", t.global_step));
                        std::fs::write(path, t.checkpoint_bytes())?;
                    }
                }
                std::fs::write(out.join(format!("seed{seed}.spfz")), t.checkpoint_bytes())?;
                std::fs::write(
                    out.join(if exp.seeds.len() == 1 {
                        "trainlog.ndjson".to_string()
                    } else {
                        format!("trainlog_seed{seed}.ndjson")
                    }),
                    t.log.to_ndjson(),
                )?;
                let val_depth = t.validate_depth()?;
                let score = if exp.train.steps_s2 > 0 {
                    spatial_score(&t.store, &exp.model, seed, exp.score_scenes)?
                } else {
                    f32::NAN
                };
                println!(
                    "seed {seed}: final val depth loss {val_depth:.4}, spatial score {score:.3}"
                );
            }
        }
        Command::Sample { ckpt, scene_index } => {
            std::fs::create_dir_all(&out)?;
            let loaded = checkpoint::load(&ckpt)?;
            let cfg = loaded.header.config.clone();
            let store = spatialgen::trainer::init_full_store(&cfg, loaded.header.run_state.seed);
            checkpoint::load_into(&loaded, &cfg, &store, None)?;
            let seed = exp.seeds[0];
            let (prompt, spec) = scene_prompt(seed, scene_index);
            let mut rng = Rng::new(seed).stream("sample");
            let result = sample(&prompt, None, &store, &cfg, &mut rng)?;
            pnm::write_image_ppm(&result.image, &out.join("image.ppm"))?;
            pnm::write_depth_pgm16(&result.depth, &out.join("depth.pgm16"))?;
            let (ideal, gt_depth, _) = render(&spec, cfg.height, cfg.width);
            pnm::write_image_ppm(&ideal, &out.join("target.ppm"))?;
            pnm::write_depth_pgm16(&gt_depth, &out.join("target_depth.pgm16"))?;
            let prompt_text: Vec<String> = prompt.iter().map(u32::to_string).collect();
            std::fs::write(out.join("prompt.txt"), prompt_text.join(" "))?;
            println!(
                "sampled scene {scene_index} with {} denoising steps into {}",
                result.steps,
                out.display()
            );
        }
        Command::Probe => {
            std::fs::create_dir_all(&out)?;
            let mut results = Vec::new();
            for &seed in &exp.seeds {
                let (log, final_val) = train_probe(&exp.model, &exp.train, seed)?;
                std::fs::write(
                    out.join(format!("probe_trainlog_seed{seed}.ndjson")),
                    log.to_ndjson(),
                )?;
                println!("probe seed {seed}: final val depth loss {final_val:.4}");
                results.push(serde_json::json!({"seed": seed, "val_depth_loss": final_val}));
            }
            std::fs::write(
                out.join("probe_result.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "schema_version": spatialgen::harness::SCHEMA_VERSION,
                    "results": results,
                }))?,
            )?;
        }
        Command::AblateSharing => {
            let rep = ablate_sharing(&exp, &mut RunCache::default())?;
            write_ablation(&out, &rep)?;
        }
        Command::AblateInject => {
            let rep = ablate_inject(&exp, &mut RunCache::default())?;
            write_ablation(&out, &rep)?;
        }
        Command::SweepLambda => {
            let rep = sweep_lambda(&exp, &mut RunCache::default())?;
            write_ablation(&out, &rep)?;
        }
        Command::Report { runs } => {
            let dirs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
            let rep = report(&dirs)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&rep)?)?;
            print!("{}", report_ascii(&rep));
        }
        Command::ExportDepth { scene_index, ckpt } => {
            std::fs::create_dir_all(&out)?;
            let seed = exp.seeds[0];
            let (prompt, spec) = scene_prompt(seed, scene_index);
            let (image, depth, mask) = render(&spec, exp.model.height, exp.model.width);
            pnm::write_image_ppm(&image, &out.join("image.ppm"))?;
            pnm::write_depth_pgm16(&depth, &out.join("depth.pgm16"))?;
            pnm::write_mask_pgm(&mask, &out.join("mask.pgm"))?;
            if let Some(ckpt) = ckpt {
                let loaded = checkpoint::load(&ckpt)?;
                let cfg = loaded.header.config.clone();
                let store =
                    spatialgen::trainer::init_full_store(&cfg, loaded.header.run_state.seed);
                checkpoint::load_into(&loaded, &cfg, &store, None)?;
                let pred = spatialgen::numcore::no_grad(|| -> Result<_> {
                    let sem = spatialgen::attention::semantic_forward(&prompt, &store, &cfg)?;
                    let geo0 = spatialgen::geometry::init_geo_states(&store, None, &cfg)?;
                    let geo = spatialgen::geometry::derive_geometry(&geo0, &sem, &cfg, &store)?;
                    spatialgen::geometry::decode_depth(&geo, &store, &cfg)
                })?;
                pnm::write_depth_pgm16(&pred, &out.join("pred_depth.pgm16"))?;
            }
            println!("exported scene {scene_index} to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

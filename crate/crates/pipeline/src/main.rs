use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use maskfree_core::image_io::load_rgb;
use maskfree_core::metrics::RegionKind;
use maskfree_models::reason_seg::{
    continue_training, encode_samples, evaluate, ReasonSegModel, SegLossRecord, TrainingData,
};
use maskfree_models::synth::{generate_synthetic_corpus, removal_cases, write_benchmark, write_corpus, QueryFamily};
use maskfree_models::vae::{train_inpainter, write_loss_csv, InpaintModel};
use maskfree_models::vocab::Vocabulary;
use maskfree_pipeline::ablation::run_ablation;
use maskfree_pipeline::config::BlendMode;
use maskfree_pipeline::edit::{edit, next_run_dir, replay, Pipeline};
use maskfree_pipeline::evaluate::{evaluate_dir, load_cases, write_report};
use maskfree_pipeline::PipelineConfig;
use ndarray::Array2;

#[derive(Parser)]
#[command(name = "maskfree", version, about = "Mask-free instruction-driven image editing")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit one image according to an instruction.
    Edit {
        image: Option<PathBuf>,
        instruction: Option<String>,
        /// Re-execute a previous run directory from its snapshot.
        #[arg(long, conflicts_with_all = ["image", "instruction"])]
        replay: Option<PathBuf>,
        /// Use the generator output without compositing into the source.
        #[arg(long)]
        no_blend: bool,
    },
    /// Train the masked-image inpainter.
    TrainInpaint {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        no_hypergraph: bool,
    },
    /// Train the reasoning segmenter on a synthetic corpus.
    TrainReseg {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write a synthetic referring-segmentation corpus or removal benchmark.
    GenCorpus {
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Restrict to one query family.
        #[arg(long)]
        family: Option<String>,
        /// Write object-removal cases with a manifest instead.
        #[arg(long)]
        benchmark: bool,
    },
    /// Score edited images against a benchmark manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        /// Score the whole image rather than the background.
        #[arg(long)]
        full_image: bool,
        #[arg(long, default_value = "edited")]
        method: String,
    },
    /// Compare Baseline, +ReSeg and +HyPConv on a benchmark.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Dump the encoder hypergraph built for an image.
    InspectHypergraph {
        image: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train_inpaint.train.seed = seed;
        cfg.train_reseg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if cfg.out_dir.as_os_str().is_empty() {
        cfg.out_dir = PathBuf::from("runs");
    }
    Ok(cfg)
}

fn write_seg_log(path: &Path, log: &[SegLossRecord]) -> anyhow::Result<()> {
    let mut s = String::from("step,text_loss,mask_loss,total\n");
    for r in log {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.text_loss, r.mask_loss, r.total));
    }
    fs::write(path, s)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let mut cfg = load_config(&cli)?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Edit {
            image,
            instruction,
            replay: from,
            no_blend,
        } => {
            let artifact = if let Some(dir) = from {
                replay(&dir, &next_run_dir(&out, &dir))?
            } else {
                let (Some(image), Some(instruction)) = (image, instruction) else {
                    bail!("edit needs an image and an instruction, or --replay");
                };
                if no_blend {
                    cfg.masks.blend = BlendMode::None;
                }
                let pipeline = Pipeline::from_config(cfg)?;
                edit(&pipeline, &image, &instruction, &next_run_dir(&out, &image))?
            };
            println!("{}", artifact.dir.display());
            if let Some(e) = &artifact.outcome.error {
                eprintln!("edit failed: {e}");
            }
            Ok(artifact.is_ok())
        }
        Command::TrainInpaint { steps, no_hypergraph } => {
            let t = &mut cfg.train_inpaint;
            if let Some(s) = steps {
                t.train.steps = s;
            }
            if no_hypergraph {
                t.model.hypergraph = false;
            }
            let (model, log) = train_inpainter(t.model.clone(), &t.train)?;
            fs::create_dir_all(&out)?;
            let name = if t.model.hypergraph { "inpainter" } else { "inpainter_plain" };
            let path = out.join(format!("{name}.safetensors"));
            model.save(&path)?;
            write_loss_csv(&out.join(format!("{name}_loss.csv")), &log)?;
            println!("{}", path.display());
            Ok(true)
        }
        Command::TrainReseg { steps } => {
            let t = &mut cfg.train_reseg;
            if let Some(s) = steps {
                t.train.steps = s;
            }
            t.train.weights = cfg.losses;
            let vocab = Vocabulary::default();
            let seed = t.train.seed;
            let model = ReasonSegModel::new(t.model.clone(), vocab.clone(), seed)?;
            let data = TrainingData::Stream { seed, corpus: &t.corpus };
            let (model, log) = continue_training(model, &t.train, data, |_, r| {
                if r.step % 100 == 0 {
                    log::info!("step {}: text {:.4} mask {:.4}", r.step, r.text_loss, r.mask_loss);
                }
            })?;
            let held_out = encode_samples(&vocab, &generate_synthetic_corpus(seed ^ 0xe7a1, 400, &t.corpus)?)?;
            let report = evaluate(&model, &held_out)?;
            fs::create_dir_all(&out)?;
            let path = out.join("reason_seg.safetensors");
            model.save(&path)?;
            write_seg_log(&out.join("reason_seg_loss.csv"), &log)?;
            fs::write(out.join("reason_seg_eval.json"), serde_json::to_string_pretty(&report)?)?;
            println!("{}", path.display());
            println!("held-out gIoU {:.3} cIoU {:.3}", report.overall.giou, report.overall.ciou);
            Ok(true)
        }
        Command::GenCorpus { n, family, benchmark } => {
            let mut corpus_cfg = cfg.train_reseg.corpus.clone();
            if let Some(f) = family {
                let f = QueryFamily::parse(&f).with_context(|| format!("unknown query family {f:?}"))?;
                corpus_cfg = maskfree_models::synth::CorpusConfig {
                    image_size: corpus_cfg.image_size,
                    ..maskfree_models::synth::CorpusConfig::only(f)
                };
            }
            if benchmark {
                let manifest = write_benchmark(&out, &removal_cases(cfg.seed, n, &corpus_cfg))?;
                println!("{}", manifest.display());
            } else {
                write_corpus(&out, &generate_synthetic_corpus(cfg.seed, n, &corpus_cfg)?)?;
                println!("{}", out.display());
            }
            Ok(true)
        }
        Command::Eval {
            manifest,
            edited,
            full_image,
            method,
        } => {
            let region = if full_image { RegionKind::Full } else { RegionKind::Background };
            let scores = evaluate_dir(&manifest, &edited, region)?;
            let (json, table) = write_report(&out, &method, &scores)?;
            print!("{}", fs::read_to_string(&table)?);
            println!("{}", json.display());
            Ok(true)
        }
        Command::Ablate { manifest } => {
            let cases = load_cases(&manifest)?;
            let table = run_ablation(&cases, &cfg)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
            let text = table.render();
            fs::write(out.join("ablation.txt"), &text)?;
            print!("{text}");
            Ok(table.skipped.is_empty())
        }
        Command::InspectHypergraph { image, tau } => {
            let model = match &cfg.models.inpainter {
                Some(p) => InpaintModel::<f32>::load(p)?,
                None => {
                    log::warn!("no inpainter checkpoint configured; using untrained weights");
                    InpaintModel::new(cfg.train_inpaint.model.clone(), cfg.seed)?
                }
            };
            let img = load_rgb(&image)?;
            let s = model.config.image_size;
            let img = maskfree_pipeline::resample::resize_rgb(img.view(), s, s);
            let hg = model.encoder_hypergraph(img.view(), Array2::from_elem((s, s), false).view(), tau.or(cfg.inpaint.tau))?;
            println!("{}", serde_json::to_string(&hg.to_debug())?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

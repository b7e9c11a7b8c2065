use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use touchprint::checkpoint::{checkpoint_load, checkpoint_save};
use touchprint::dataset::write_scene;
use touchprint::eval::{evaluate, imprint_support, margin_sweep, run_experiment, touch_support, ExperimentConfig, MARGINS};
use touchprint::geometry::{generate_scene, SceneSpec};
use touchprint::imprinting::PoolingMethod;
use touchprint::model::{pretrain, LabeledScene, PretrainConfig};
use touchprint::BinaryMask;
use touchprint_cli::session::{load_dir, Session};
use touchprint_cli::{render, server};

#[derive(Parser)]
#[command(name = "touchprint", version, about = "Touch-driven refinement of a scene segmentation model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes into DIR/scene_NNN.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
    },
    /// Pre-train on the training labels of every scene under DATA.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        margin: f64,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Imprint a plant prototype from support scenes. A scene directory
    /// holding `mask.png` uses it as interaction mask; otherwise touches are
    /// simulated.
    Imprint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        support: PathBuf,
        #[arg(long, default_value = "rap")]
        method: PoolingMethod,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class metrics of a checkpoint on the scenes under TEST.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Before / distillation / imprinting comparison.
    Experiment {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON experiment configuration; `--seed` overrides its seed.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Mean IoU of the imprinting variants across angular margins.
    Sweep {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// HTTP refinement service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Scenes used for metrics; defaults to DATA.
        #[arg(long)]
        test: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::GenData {
            out,
            scenes,
            seed,
            width,
            height,
        } => gen_data(&out, scenes, seed, width, height),
        Command::Pretrain {
            data,
            margin,
            scale,
            epochs,
            seed,
            out,
        } => {
            let defaults = PretrainConfig::default();
            let cfg = PretrainConfig {
                margin,
                scale: scale.unwrap_or(defaults.scale),
                epochs: epochs.unwrap_or(defaults.epochs),
                seed,
                ..defaults
            };
            let data: Vec<LabeledScene> = load_dir(&data)?.iter().map(|(_, s)| s.training_sample()).collect();
            tracing::info!("pre-training on {} scenes for {} epochs", data.len(), cfg.epochs);
            let outcome = pretrain(&data, &cfg)?;
            if let Some(last) = outcome.loss_curve.last() {
                tracing::info!("final loss {last:.4}");
            }
            checkpoint_save(&outcome.model, &out)?;
            Ok(())
        }
        Command::Imprint {
            ckpt,
            support,
            method,
            seed,
            out,
        } => imprint(&ckpt, &support, method, seed, &out),
        Command::Eval { ckpt, test, json } => {
            let model = checkpoint_load(&ckpt)?;
            let scenes: Vec<_> = load_dir(&test)?.into_iter().map(|(_, s)| s).collect();
            let (report, _) = evaluate(&model, &scenes)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{:<12} {:>8} {:>10} {:>8}", "class", "IoU", "precision", "recall");
                let pct = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{:.2}", 100.0 * v));
                for c in &report.classes {
                    println!("{:<12} {:>8} {:>10} {:>8}", c.name, pct(c.iou), pct(c.precision), pct(c.recall));
                }
                println!("mean IoU {}", pct(report.mean_iou));
            }
            Ok(())
        }
        Command::Experiment { seed, out, config } => experiment(seed, &out, config.as_deref()),
        Command::Sweep { seed, out, config } => {
            let cfg = load_config(seed, config.as_deref())?;
            let report = margin_sweep(&cfg, &MARGINS)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("sweep.json"), serde_json::to_vec_pretty(&report)?)?;
            fs::write(out.join("sweep.txt"), report.to_text())?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Serve { port, data, ckpt, test } => {
            let session = Session::open(&ckpt, &data, test.as_deref())?;
            tokio::runtime::Runtime::new()?.block_on(server::serve(session, port))
        }
    }
}

fn gen_data(out: &Path, scenes: usize, seed: u64, width: usize, height: usize) -> Result<()> {
    let spec = SceneSpec::default().with_resolution(width, height);
    for i in 0..scenes {
        let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let scene = generate_scene(scene_seed, &spec)?.scene;
        write_scene(&scene, out.join(format!("scene_{i:03}")))?;
    }
    tracing::info!("wrote {scenes} scenes to {}", out.display());
    Ok(())
}

fn imprint(ckpt: &Path, support: &Path, method: PoolingMethod, seed: u64, out: &Path) -> Result<()> {
    let model = checkpoint_load(ckpt)?;
    let scenes = load_dir(support)?;
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let only: Vec<_> = scenes.iter().map(|(_, s)| s.clone()).collect();
    let simulated = touch_support(&cfg, &only)?;
    let mut masks = Vec::with_capacity(scenes.len());
    for ((id, scene), sim) in scenes.iter().zip(simulated.interaction) {
        let path = support.join(id).join("mask.png");
        if path.is_file() {
            let mask = BinaryMask::from_luma(&image::open(&path)?.into_luma8());
            if mask.dims() != scene.gt_labels.dims() {
                bail!("{} does not match the scene size", path.display());
            }
            masks.push(mask);
        } else {
            masks.push(sim);
        }
    }
    let images: Vec<_> = only.iter().map(|s| s.rgb.clone()).collect();
    let outcome = imprint_support(&model, &images, &masks, method).context("imprinting")?;
    tracing::info!(
        "imprinted {} training pixels in {:.1} ms",
        outcome.training_masks.iter().map(BinaryMask::count).sum::<usize>(),
        outcome.elapsed_ms
    );
    checkpoint_save(&outcome.model, out)?;
    Ok(())
}

fn load_config(seed: u64, path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => ExperimentConfig::default(),
    };
    cfg.seed = seed;
    Ok(cfg)
}

fn experiment(seed: u64, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(seed, config)?;
    let outcome = run_experiment(&cfg)?;
    let report = &outcome.report;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    fs::write(out.join("report.txt"), report.to_text())?;

    let png_dir = out.join("qualitative");
    fs::create_dir_all(&png_dir)?;
    for (i, scene) in outcome.scenes.test.iter().enumerate().take(3) {
        scene.rgb.save(png_dir.join(format!("test{i}_rgb.png")))?;
        render::colorize(&scene.gt_labels).save(png_dir.join(format!("test{i}_gt.png")))?;
        for (row, preds) in report.rows.iter().zip(&outcome.predictions) {
            let name = row.method.to_lowercase().replace('-', "_");
            render::overlay(&scene.rgb, &preds[i], 0.6).save(png_dir.join(format!("test{i}_{name}.png")))?;
        }
    }
    for (i, (m, t)) in outcome.interaction_masks.iter().zip(&outcome.training_masks).enumerate() {
        m.to_luma().save(png_dir.join(format!("support{i}_interaction.png")))?;
        t.to_luma().save(png_dir.join(format!("support{i}_training.png")))?;
    }
    print!("{}", report.to_text());
    Ok(())
}

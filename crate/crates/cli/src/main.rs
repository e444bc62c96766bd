use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use voxdet::ablation::{run_ablation, AblationAxis, EvalSplit};
use voxdet::config::RunConfig;
use voxdet::detection::{evaluate_ap, ApTable, Box3D, CLASS_NAMES};
use voxdet::pipeline::{evaluate_scene, run_training, Model, RunReport};
use voxdet::render::{photometric_loss_value, psnr};
use voxdet::scene::{dataset_hash, generate_dataset, load_dataset, save_dataset, DatasetInfo, SceneSample};

const VERSION: &str = concat!("voxdet ", env!("CARGO_PKG_VERSION"));

#[derive(Parser)]
#[command(name = "voxdet", version, about = "Multi-view voxel detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value` override, repeatable (e.g. `--set train.epochs=3`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train and val scene sets.
    GenScene {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-class AP of a trained run.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Write per-scene predictions here as JSON.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Render color and depth for one or more views of a scene.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        views: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every row of one comparison and print mAP deltas.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// modules, opacity or sampling.
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the estimated free space of a scene as a PLY point cloud plus
    /// the full opacity raster.
    DumpFreespace {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(base: RunConfig, args: &ConfigArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => base,
    };
    let mut sets = args.overrides.clone();
    if let Some(s) = args.seed {
        sets.push(format!("seed={s}"));
    }
    Ok(base.with_overrides(&sets)?)
}

/// A run's stored config with `args` applied on top.
fn run_config(run: &Path, args: &ConfigArgs) -> Result<RunConfig> {
    let stored = RunConfig::load(&run.join("config.toml"))?;
    resolve(stored, args)
}

fn load_model(run: &Path, cfg: &RunConfig) -> Result<Model> {
    let ckpt = run.join("checkpoint.json");
    if !ckpt.is_file() {
        return Err(voxdet::Error::CheckpointMissing(ckpt).into());
    }
    Ok(Model::load(cfg, &ckpt)?)
}

fn split_scenes(data: &Path, split: &str) -> Result<Vec<SceneSample>> {
    let split: EvalSplit = split.parse()?;
    let dir = data.join(match split {
        EvalSplit::Train => "train",
        EvalSplit::Val => "val",
    });
    Ok(load_dataset(&dir)?.1)
}

fn write_run_dir(out: &Path, cfg: &RunConfig, report: &impl serde::Serialize, model: Option<&Model>) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    fs::write(out.join("seed"), format!("{}\n", cfg.seed))?;
    fs::write(out.join("version"), format!("{VERSION}\n"))?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(report)?)?;
    if let Some(m) = model {
        m.save(&out.join("checkpoint.json"))?;
    }
    Ok(())
}

fn ap_table(t25: &ApTable, t50: &ApTable) -> String {
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.4}", x));
    let mut s = format!("{:<10} {:>9} {:>9}\n", "class", "AP@0.25", "AP@0.5");
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        s += &format!("{:<10} {:>9} {:>9}\n", name, cell(t25.per_class[c]), cell(t50.per_class[c]));
    }
    s += &format!("{:<10} {:>9.4} {:>9.4}\n", "mean", t25.mean, t50.mean);
    s
}

fn write_png(path: &Path, rgb: &[f64], h: usize, w: usize) -> Result<()> {
    let bytes: Vec<u8> = rgb.iter().map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

/// `VOXDEPTH 1 h w` header line, then little-endian f32 values (NaN where no
/// ray reached the grid).
fn write_depth(path: &Path, depth: &[f64], h: usize, w: usize) -> Result<()> {
    let mut raw = format!("VOXDEPTH 1 {h} {w}\n").into_bytes();
    for &d in depth {
        raw.extend_from_slice(&(d as f32).to_le_bytes());
    }
    fs::write(path, raw)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenScene { cfg, out } => {
            let cfg = resolve(RunConfig::default(), &cfg)?;
            let d = &cfg.data;
            let all = generate_dataset(cfg.seed, d.train_scenes + d.val_scenes, d.profile)?;
            let (train, val) = all.split_at(d.train_scenes);
            for (name, scenes) in [("train", train), ("val", val)] {
                let info = DatasetInfo {
                    seed: cfg.seed,
                    profile: d.profile,
                    scenes: scenes.len(),
                };
                save_dataset(&out.join(name), &info, scenes)?;
            }
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            println!("{}", dataset_hash(&out)?);
        }
        Cmd::Train { cfg, data, out } => {
            let cfg = resolve(RunConfig::default(), &cfg)?;
            let train = split_scenes(&data, "train")?;
            let val = split_scenes(&data, "val").unwrap_or_default();
            let (model, report) = run_training(&cfg, &train, &val)?;
            write_run_dir(&out, &cfg, &report, Some(&model))?;
            print_summary(&report);
        }
        Cmd::Eval {
            cfg,
            run,
            data,
            split,
            predictions,
        } => {
            let cfg = run_config(&run, &cfg)?;
            let model = load_model(&run, &cfg)?;
            let scenes = split_scenes(&data, &split)?;
            let preds: Vec<Vec<Box3D>> = scenes
                .iter()
                .map(|s| evaluate_scene(&model, s, &cfg, &[]).map(|e| e.detections))
                .collect::<voxdet::Result<_>>()?;
            let gts: Vec<Vec<Box3D>> = scenes.iter().map(|s| s.boxes.clone()).collect();
            let t25 = evaluate_ap(&preds, &gts, 0.25)?;
            let t50 = evaluate_ap(&preds, &gts, 0.5)?;
            print!("{}", ap_table(&t25, &t50));
            if let Some(p) = predictions {
                fs::write(&p, serde_json::to_string_pretty(&preds)?).with_context(|| p.display().to_string())?;
            }
        }
        Cmd::Render {
            cfg,
            run,
            data,
            split,
            scene,
            views,
            out,
        } => {
            let cfg = run_config(&run, &cfg)?;
            let model = load_model(&run, &cfg)?;
            let scenes = split_scenes(&data, &split)?;
            let sample = scenes
                .get(scene)
                .ok_or_else(|| voxdet::Error::ConfigInvalid(format!("scene {scene} of {}", scenes.len())))?;
            let e = evaluate_scene(&model, sample, &cfg, &views)?;
            fs::create_dir_all(&out)?;
            for (v, rgb, depth) in &e.renders {
                let cam = &sample.cameras[*v];
                let (h, w) = (cam.height(), cam.width());
                write_png(&out.join(format!("view_{v:04}.png")), rgb, h, w)?;
                write_depth(&out.join(format!("view_{v:04}.depth.f32")), depth, h, w)?;
                let p = psnr(photometric_loss_value(rgb, &sample.images[*v].data)?);
                println!("view {v}: PSNR {p:.2} dB");
            }
        }
        Cmd::Ablate {
            cfg,
            data,
            axis,
            split,
            out,
        } => {
            let cfg = resolve(RunConfig::default(), &cfg)?;
            let axis: AblationAxis = axis.parse()?;
            let split: EvalSplit = split.parse()?;
            let train = split_scenes(&data, "train")?;
            let val = split_scenes(&data, "val").unwrap_or_default();
            let table = run_ablation(&cfg, axis, split, &train, &val, |name, row_cfg, model, report| {
                let dir = out.join("rows").join(name.replace(['/', ' ', '+'], "_"));
                write_run_dir(&dir, row_cfg, report, Some(model)).map_err(|e| voxdet::Error::Io(std::io::Error::other(e)))
            })?;
            write_run_dir(&out, &cfg, &table, None)?;
            print!("{}", table.to_text());
        }
        Cmd::DumpFreespace {
            cfg,
            run,
            data,
            split,
            scene,
            tau,
            out,
        } => {
            let cfg = run_config(&run, &cfg)?;
            let model = load_model(&run, &cfg)?;
            let scenes = split_scenes(&data, &split)?;
            let sample = scenes
                .get(scene)
                .ok_or_else(|| voxdet::Error::ConfigInvalid(format!("scene {scene} of {}", scenes.len())))?;
            let e = evaluate_scene(&model, sample, &cfg, &[])?;
            let n = e.opacity.write_free_space_ply(&out, tau)?;
            e.opacity.write_raster(&out.with_extension("opacity"))?;
            println!("{n} free voxels of {}", e.opacity.values.len());
        }
    }
    Ok(())
}

fn print_summary(r: &RunReport) {
    let s = &r.final_train;
    println!(
        "train: mAP@0.25 {:.4} mAP@0.5 {:.4} opacity-BA {:.4} PSNR {:.2}",
        s.map_25,
        s.map_50,
        s.opacity_balanced_accuracy,
        s.psnr.unwrap_or(f64::NAN)
    );
    if let Some(v) = &r.final_val {
        println!("val:   mAP@0.25 {:.4} mAP@0.5 {:.4}", v.map_25, v.map_50);
    }
}

/// Machine-readable category of a failure.
fn category(e: &anyhow::Error) -> &'static str {
    if let Some(v) = e.downcast_ref::<voxdet::Error>() {
        return v.category();
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "internal"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": category(&e), "message": format!("{e:#}")}));
            ExitCode::from(1)
        }
    }
}

//! Command-line front end: scene generation, training, evaluation, bare
//! geometry inspection, and the association metric over detection dumps.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvdet::allocation::{apply_caps, build_mapping};
use mvdet::checkpoint::{load_checkpoint, save_checkpoint};
use mvdet::eval::{
    aar_recall, average_precision_2d, center_error_3d, default_tau_sweep, load_detections,
    mean_alpha_error, save_detections, SceneDetections,
};
use mvdet::geometry::Anchor3D;
use mvdet::model::{cosine_lr, AdamW, Model, ModelConfig};
use mvdet::scene::{generate_scene, load_scenes, save_scenes, GenConfig, RasterConfig, Scene};
use mvdet::{Error, Result};

#[derive(Parser)]
#[command(name = "mvdet", version, about = "Multi-camera 2D/3D detector on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate deterministic synthetic scenes as JSONL.
    GenScenes(GenScenesArgs),
    /// Train a model over a scene file.
    Train(TrainArgs),
    /// Evaluate a checkpoint: detections, AP, center error, association.
    Eval(EvalArgs),
    /// Inspect projections and the query-to-camera mapping without a model.
    Project(ProjectArgs),
    /// Association accuracy / recall curve over a detection dump.
    AssocMetric(AssocArgs),
}

#[derive(Args)]
struct GenScenesArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    cameras: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// TOML model configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_ckpt: PathBuf,
    #[arg(long)]
    steps: u64,
    /// Continue from an existing checkpoint instead of fresh parameters.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Append a (step, loss) CSV here.
    #[arg(long)]
    dump_plots: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dump_detections: Option<PathBuf>,
    /// Write the association curve as CSV (tau_iou, aar, recall).
    #[arg(long)]
    dump_plots: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    score_threshold: f64,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Write per-scene mapping matrices (ground-truth anchors as queries).
    #[arg(long)]
    dump_mapping: Option<PathBuf>,
}

#[derive(Args)]
struct AssocArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    tau_dis: f64,
    /// Comma-separated IoU thresholds; defaults to 0.1..0.9.
    #[arg(long)]
    tau_iou_sweep: Option<String>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version on stdout with success status
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Data(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenScenes(a) => gen_scenes(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Project(a) => project(a),
        Cmd::AssocMetric(a) => assoc_metric(a),
    }
}

fn gen_scenes(a: GenScenesArgs) -> Result<()> {
    let cfg = GenConfig {
        cameras: a.cameras,
        ..GenConfig::default()
    };
    let mut scenes = Vec::with_capacity(a.count as usize);
    for i in 0..a.count {
        let mut s = generate_scene(a.seed.wrapping_add(i), &cfg)?;
        s.scene_id = i;
        scenes.push(s);
    }
    save_scenes(&a.out, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn load_config(path: Option<&PathBuf>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::load(p),
        None => Ok(ModelConfig::default()),
    }
}

fn check_scene_compat(scenes: &[Scene], cfg: &ModelConfig) -> Result<()> {
    for s in scenes {
        if s.rig.len() != cfg.cameras {
            return Err(Error::Data(format!(
                "scene {} has {} cameras but the model expects {}",
                s.scene_id,
                s.rig.len(),
                cfg.cameras
            )));
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let scenes = load_scenes(&a.scenes)?;
    if scenes.is_empty() {
        return Err(Error::Data(format!("{}: no scenes", a.scenes.display())));
    }
    let (cfg, mut store) = match &a.resume {
        Some(ckpt) => {
            let (cfg, store) = load_checkpoint(ckpt)?;
            if a.config.is_some() {
                return Err(Error::Usage(
                    "--config conflicts with --resume; the checkpoint carries its config".into(),
                ));
            }
            (cfg, store)
        }
        None => {
            let cfg = load_config(a.config.as_ref())?;
            let model = Model::new(cfg.clone())?;
            (model.config, model.store)
        }
    };
    check_scene_compat(&scenes, &cfg)?;
    let rc = RasterConfig::default();
    let mut plot: Vec<(u64, f64)> = Vec::new();
    for k in 0..a.steps {
        // schedule off the global step so a resumed run picks up the decay
        // exactly where the original left off
        let opt = AdamW::new(
            cosine_lr(cfg.lr, store.step, cfg.lr_schedule_steps),
            cfg.weight_decay,
        );
        let scene = &scenes[(store.step as usize) % scenes.len()];
        let rep = mvdet::model::train_step(&mut store, &cfg, scene, &rc, &opt, None)?;
        plot.push((store.step, rep.loss.total));
        if k % 50 == 0 || k + 1 == a.steps {
            println!(
                "step {:>6}  loss {:.4}  (2d {:.4}, 3d {:.4})  |g| {:.3e}",
                store.step, rep.loss.total, rep.loss.l2d, rep.loss.l3d, rep.grad_norm
            );
        }
    }
    save_checkpoint(&a.out_ckpt, &cfg, &store)?;
    println!("wrote checkpoint to {}", a.out_ckpt.display());
    if let Some(p) = &a.dump_plots {
        let mut f = create(p)?;
        writeln!(f, "step,loss").map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        for (s, l) in &plot {
            writeln!(f, "{s},{l}").map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        }
    }
    Ok(())
}

fn create(p: &PathBuf) -> Result<std::fs::File> {
    std::fs::File::create(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
}

fn eval(a: EvalArgs) -> Result<()> {
    let scenes = load_scenes(&a.scenes)?;
    let (cfg, store) = load_checkpoint(&a.ckpt)?;
    check_scene_compat(&scenes, &cfg)?;
    let model = Model {
        config: cfg.clone(),
        store,
    };
    let rc = RasterConfig::default();
    let mut dets: Vec<SceneDetections> = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let (d, _) = model.infer(s, &rc, None, a.score_threshold)?;
        dets.push(d);
    }
    let (per_class, map50) = average_precision_2d(&dets, &scenes, 0.5, cfg.num_classes)?;
    let (_, map75) = average_precision_2d(&dets, &scenes, 0.75, cfg.num_classes)?;
    let ce = center_error_3d(&dets, &scenes)?;
    let report = aar_recall(&dets, &scenes, 2.0, &default_tau_sweep())?;
    let alpha_err = mean_alpha_error(&dets, &scenes)?;
    println!("scenes: {}  detections(3d): {}", scenes.len(), dets.iter().map(|d| d.det3d.len()).sum::<usize>());
    println!("2D AP@0.5: {:?}  mean {:?}", per_class, map50);
    println!("2D mAP@0.75: {map75:?}");
    println!(
        "3D center error: mean {:.3} m, median {:.3} m over {} / {} matched",
        ce.mean, ce.median, ce.matched, ce.gt_total
    );
    match alpha_err {
        Some(e) => println!("mean observation-angle error: {e:.4} rad"),
        None => println!("mean observation-angle error: n/a"),
    }
    for pt in &report.curve {
        match pt.aar_percent {
            Some(aar) => println!(
                "tau_iou {:.1}: AAR {:.1}%  recall {:.1}%  ({}/{})",
                pt.tau_iou, aar, pt.recall_percent, pt.valid_matching, pt.matching
            ),
            None => println!("tau_iou {:.1}: no candidate matches", pt.tau_iou),
        }
    }
    if let Some(p) = &a.dump_detections {
        save_detections(p, &dets)?;
        println!("wrote detections to {}", p.display());
    }
    if let Some(p) = &a.dump_plots {
        write_assoc_csv(p, &report)?;
    }
    Ok(())
}

fn write_assoc_csv(p: &PathBuf, report: &mvdet::eval::AssociationReport) -> Result<()> {
    let mut f = create(p)?;
    let werr = |e: std::io::Error| Error::Data(format!("{}: {e}", p.display()));
    writeln!(f, "tau_iou,aar_percent,recall_percent,valid_matching,matching").map_err(werr)?;
    for pt in &report.curve {
        writeln!(
            f,
            "{},{},{},{},{}",
            pt.tau_iou,
            pt.aar_percent.map_or(String::from(""), |v| v.to_string()),
            pt.recall_percent,
            pt.valid_matching,
            pt.matching
        )
        .map_err(werr)?;
    }
    Ok(())
}

fn project(a: ProjectArgs) -> Result<()> {
    let scenes = load_scenes(&a.scenes)?;
    let mut dump = a.dump_mapping.as_ref().map(create).transpose()?;
    for s in &scenes {
        let anchors: Vec<Anchor3D> = s.objects.iter().map(|o| o.anchor).collect();
        let mapping = apply_caps(&build_mapping(&anchors, &s.rig), &anchors, &s.rig);
        println!(
            "scene {}: {} objects -> {} 2D queries over {} cameras (groups {:?})",
            s.scene_id,
            s.objects.len(),
            mapping.m(),
            s.rig.len(),
            mapping.group_sizes()
        );
        if let Some(f) = dump.as_mut() {
            let line = serde_json::json!({
                "scene_id": s.scene_id,
                "n": s.objects.len(),
                "m": mapping.m(),
                "group_sizes": mapping.group_sizes(),
                "columns": mapping
                    .columns
                    .iter()
                    .map(|c| serde_json::json!({"camera": c.camera, "owner": c.owner}))
                    .collect::<Vec<_>>(),
            });
            writeln!(f, "{line}").map_err(|e| {
                Error::Data(format!("{}: {e}", a.dump_mapping.as_ref().unwrap().display()))
            })?;
        }
    }
    Ok(())
}

fn assoc_metric(a: AssocArgs) -> Result<()> {
    let dets = load_detections(&a.detections)?;
    let scenes = load_scenes(&a.scenes)?;
    let sweep = match &a.tau_iou_sweep {
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Usage(format!("bad tau_iou {t:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?,
        None => default_tau_sweep(),
    };
    let report = aar_recall(&dets, &scenes, a.tau_dis, &sweep)?;
    for pt in &report.curve {
        match pt.aar_percent {
            Some(aar) => println!(
                "tau_iou {:.2}: AAR {:.2}%  recall {:.2}%  ({}/{})",
                pt.tau_iou, aar, pt.recall_percent, pt.valid_matching, pt.matching
            ),
            None => println!("tau_iou {:.2}: no candidate matches", pt.tau_iou),
        }
    }
    if let Some(p) = &a.out_csv {
        write_assoc_csv(p, &report)?;
    }
    Ok(())
}

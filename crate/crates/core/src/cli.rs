//! Batch command surface: `gen`, `train`, `eval`, `gradcheck`, `render`.
//!
//! Every command writes `manifest.json` into its output directory before doing any
//! work and rewrites it with the finish time afterwards. Machine-readable results
//! go to files; stdout only carries a human summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{parse_override, RunConfig};
use crate::distill::pseudo_labels;
use crate::error::{Error, Result};
use crate::evalmetrics::{emit_report, MetricsReport};
use crate::gradcheck::{grad_check, GradCheckConfig};
use crate::imagegrid::{write_png, Raster};
use crate::objective::SceneLevel;
use crate::scene::{generate_dataset, load_eval_masks, load_training_set, write_dataset, TrainScene};
use crate::trainer::{evaluate, predict_scene, training_report, Checkpoint, TrainConfig, Trainer};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.dbck";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

/// Environment variable read when `--threads` is not given.
pub const THREADS_ENV: &str = "DEPTHSEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "depthseg", version, about = "Depth-guided box-supervised instance segmentation")]
pub struct Cli {
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train per-instance mask heads from boxes and pseudo-depth.
    Train(TrainArgs),
    /// Score a checkpoint against the held-out masks.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck(GradcheckArgs),
    /// Write per-scene PNG overlays.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat key-value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set tau_d=0.7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Clear a non-empty output directory instead of refusing.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset seed (overrides `data_seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of scenes (overrides `num_scenes`).
    #[arg(long)]
    pub num_scenes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Clear a non-empty output directory instead of refusing.
    #[arg(long)]
    pub force: bool,
    /// Random cases per loss term.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    /// Seed for the random cases.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub out_dir: PathBuf,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: Option<f64>,
    pub elapsed_seconds: Option<f64>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates `out`, refusing (or with `force`, clearing) a non-empty directory.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(Error::InvalidArgument(format!("{} exists and is not a directory", out.display())));
        }
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::InvalidArgument(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    out.display()
                )));
            }
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Manifest bookkeeping around one command.
struct Run {
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    fn start(command: &str, config_path: Option<&Path>, config: serde_json::Value, out: &Path, force: bool) -> Result<Self> {
        prepare_out_dir(out, force)?;
        let manifest = RunManifest {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            config,
            out_dir: out.to_path_buf(),
            started_at: unix_now(),
            finished_at: None,
            elapsed_seconds: None,
        };
        write_json(&manifest, &out.join(MANIFEST_FILE))?;
        Ok(Run {
            manifest,
            clock: Instant::now(),
        })
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.finished_at = Some(unix_now());
        self.manifest.elapsed_seconds = Some(self.clock.elapsed().as_secs_f64());
        let path = self.manifest.out_dir.join(MANIFEST_FILE);
        write_json(&self.manifest, &path)
    }
}

fn load_config(common: &Common, default_file: Option<&Path>) -> Result<(RunConfig, Option<PathBuf>)> {
    let overrides = common
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    let path = common
        .config
        .clone()
        .or_else(|| default_file.filter(|p| p.is_file()).map(Path::to_path_buf));
    if let Some(p) = &path {
        if !p.is_file() {
            return Err(Error::InvalidArgument(format!("config file {} not found", p.display())));
        }
    }
    Ok((RunConfig::load(path.as_deref(), &overrides)?, path))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} directory {} not found", path.display())))
    }
}

/// `data_seed` recorded by `gen` in the dataset's manifest, if any.
fn dataset_seed(data: &Path) -> Option<u64> {
    let text = fs::read_to_string(data.join(MANIFEST_FILE)).ok()?;
    let m: RunManifest = serde_json::from_str(&text).ok()?;
    m.config.get("data_seed")?.as_u64()
}

/// Resolved config as a flat TOML file that `--config` accepts back.
fn write_config_file(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text = toml::to_string(&cfg.resolved()).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let (mut cfg, path) = load_config(&args.common, None)?;
    if let Some(s) = args.seed {
        cfg.data_seed = s;
    }
    if let Some(n) = args.num_scenes {
        cfg.num_scenes = n;
    }
    let out = &args.common.out;
    let run = Run::start("gen", path.as_deref(), cfg.resolved(), out, args.common.force)?;
    let scenes = generate_dataset(&cfg.scene, cfg.data_seed, cfg.num_scenes)?;
    let set = write_dataset(&scenes, out)?;
    run.finish()?;
    println!(
        "wrote {} scenes, {} instances to {}",
        set.images.len(),
        set.annotations.len(),
        out.display()
    );
    Ok(())
}

/// Trains on the dataset at `data` and writes checkpoint, report and resolved config to `out`.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    require_dir(&args.data, "data")?;
    let (cfg, path) = load_config(&args.common, None)?;
    let out = &args.common.out;
    let scenes = load_training_set(&args.data)?;
    let run = Run::start("train", path.as_deref(), cfg.resolved(), out, args.common.force)?;
    write_config_file(&cfg, &out.join(CONFIG_FILE))?;
    let mut trainer = Trainer::new(&scenes, &cfg.train)?;
    trainer.run()?;
    let ckpt = trainer.checkpoint();
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    let report = training_report(&cfg.train, &ckpt, dataset_seed(&args.data))?;
    emit_report(&report, &out.join(REPORT_FILE))?;
    run.finish()?;
    let last = report.loss_trace.last();
    println!(
        "trained {} scenes for {} steps; final total loss {}",
        scenes.len(),
        ckpt.step,
        last.map(|e| format!("{:.4}", e.total)).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

/// Loads a checkpoint and its training config (`--config`, else `config.toml` beside the
/// checkpoint), refusing configs whose hash differs from the one the checkpoint was trained with.
fn load_trained(common: &Common, checkpoint: &Path) -> Result<(RunConfig, Option<PathBuf>, Checkpoint)> {
    if !checkpoint.is_file() {
        return Err(Error::InvalidArgument(format!("checkpoint {} not found", checkpoint.display())));
    }
    let beside = checkpoint.parent().map(|d| d.join(CONFIG_FILE));
    let (cfg, path) = load_config(common, beside.as_deref())?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.config_hash != cfg.train.hash() {
        return Err(Error::Config(
            "checkpoint was trained with a different configuration (pass the training --config)".into(),
        ));
    }
    Ok((cfg, path, ckpt))
}

fn eval_masks(scenes: &[TrainScene], data: &Path) -> Result<Vec<Vec<Raster>>> {
    let masks = load_eval_masks(data)?;
    Ok(scenes.iter().map(|s| masks.for_image(s.id).to_vec()).collect())
}

pub fn evaluate_dir(cfg: &TrainConfig, ckpt: &Checkpoint, data: &Path) -> Result<MetricsReport> {
    let scenes = load_training_set(data)?;
    let masks = eval_masks(&scenes, data)?;
    let mut report = evaluate(&scenes, &masks, ckpt, cfg)?;
    report.seeds.data = dataset_seed(data);
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    require_dir(&args.data, "data")?;
    let (cfg, path, ckpt) = load_trained(&args.common, &args.checkpoint)?;
    let out = &args.common.out;
    let run = Run::start("eval", path.as_deref(), cfg.resolved(), out, args.common.force)?;
    let report = evaluate_dir(&cfg.train, &ckpt, &args.data)?;
    emit_report(&report, &out.join(REPORT_FILE))?;
    run.finish()?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "mean IoU {}  AP {}  AP50 {}  AP75 {}",
        fmt(report.mean_iou),
        fmt(report.ap),
        fmt(report.ap50),
        fmt(report.ap75)
    );
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let gc = GradCheckConfig {
        cases: args.cases,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let echo = serde_json::json!({ "cases": gc.cases, "seed": gc.seed, "step": gc.step, "tolerance": gc.tolerance });
    let run = Run::start("gradcheck", None, echo, &args.out, args.force)?;
    let report = grad_check(&gc)?;
    write_json(&report, &args.out.join(GRADCHECK_FILE))?;
    run.finish()?;
    for t in &report.terms {
        println!(
            "{:<16} {:>4} cases  max rel error {:.3e}  {}",
            t.term,
            t.cases,
            t.max_rel_error,
            if t.passed { "ok" } else { "FAIL" }
        );
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.terms.iter().filter(|t| !t.passed).map(|t| t.term.as_str()).collect();
        Err(Error::GradCheckFailed(failed.join(", ")))
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.2, 0.2],
    [0.2, 0.9, 0.2],
    [0.3, 0.5, 1.0],
    [1.0, 0.9, 0.1],
    [1.0, 0.3, 1.0],
    [0.1, 0.9, 0.9],
];

fn is_contour(mask: &Raster, y: usize, x: usize) -> bool {
    if mask.get(y, x, 0) <= 0.5 {
        return false;
    }
    let (h, w) = (mask.height(), mask.width());
    y == 0
        || x == 0
        || y + 1 == h
        || x + 1 == w
        || mask.get(y - 1, x, 0) <= 0.5
        || mask.get(y + 1, x, 0) <= 0.5
        || mask.get(y, x - 1, 0) <= 0.5
        || mask.get(y, x + 1, 0) <= 0.5
}

/// Blue (far) to red (near).
fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v]
}

/// Three panels side by side: image with final-mask contours; pseudo mask (red) against
/// final mask (green), overlap yellow; pseudo-depth heatmap.
pub fn render_panels(scene: &TrainScene, finals: &[Raster], pseudo: &[Option<Raster>]) -> Raster {
    let (h, w) = (scene.image.height(), scene.image.width());
    let mut out = Raster::zeros(h, 3 * w, 3);
    for y in 0..h {
        for x in 0..w {
            let mut px = [scene.image.get(y, x, 0), scene.image.get(y, x, 1), scene.image.get(y, x, 2)];
            for (i, m) in finals.iter().enumerate() {
                if is_contour(m, y, x) {
                    px = PALETTE[i % PALETTE.len()];
                }
            }
            let fin = finals.iter().any(|m| m.get(y, x, 0) > 0.5);
            let ps = pseudo.iter().flatten().any(|m| m.get(y, x, 0) > 0.5);
            let mid = [if ps { 1.0 } else { 0.1 }, if fin { 1.0 } else { 0.1 }, 0.1];
            let hot = heat(scene.pseudo_depth.get(y, x, 0));
            for c in 0..3 {
                out.set(y, x, c, px[c]);
                out.set(y, w + x, c, mid[c]);
                out.set(y, 2 * w + x, c, hot[c]);
            }
        }
    }
    out
}

pub fn cmd_render(args: &RenderArgs) -> Result<()> {
    require_dir(&args.data, "data")?;
    let (cfg, path, ckpt) = load_trained(&args.common, &args.checkpoint)?;
    let scenes = load_training_set(&args.data)?;
    if scenes.len() != ckpt.scenes.len() {
        return Err(Error::Checkpoint("checkpoint and dataset disagree on scene count".into()));
    }
    let out = &args.common.out;
    let run = Run::start("render", path.as_deref(), cfg.resolved(), out, args.common.force)?;
    let t = &cfg.train;
    let obj = t.objective();
    for (scene, sc) in scenes.iter().zip(&ckpt.scenes) {
        let finals: Vec<Raster> = predict_scene(scene, &sc.student, t)?
            .into_iter()
            .map(|o| o.mask_prob.threshold(0.5))
            .collect();
        let pseudo = match &sc.teacher {
            Some(teacher) => {
                let level = SceneLevel::full(scene, &obj)?;
                pseudo_labels(&level, teacher, t.anchor_stride, &obj, &t.matching(), t.pred_score)?
                    .into_iter()
                    .map(|l| l.map(|l| l.mask))
                    .collect()
            }
            None => Vec::new(),
        };
        write_png(&render_panels(scene, &finals, &pseudo), &out.join(format!("scene_{:06}.png", scene.id)))?;
    }
    run.finish()?;
    println!("rendered {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Render(a) => cmd_render(a),
    }
}

/// Process exit code for a failed command: 3 for numeric failures, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        3
    } else {
        2
    }
}

/// One-line JSON status for the last line of stderr.
pub fn error_line(code: i32, kind: &str, message: &str) -> String {
    serde_json::json!({ "status": "error", "code": code, "kind": kind, "message": message.trim_end() }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_numeric_from_validation() {
        let nan = Error::NonFinite {
            scene: 0,
            step: 1,
            instance: 2,
            term: "projection",
        };
        assert_eq!(exit_code(&nan), 3);
        assert_eq!(exit_code(&Error::GradCheckFailed("dice".into())), 3);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 2);
    }

    #[test]
    fn error_line_is_one_json_object() {
        let line = error_line(2, "config", "bad \"value\"\nsecond line");
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["status"], "error");
        assert_eq!(v["code"], 2);
        assert_eq!(v["message"], "bad \"value\"\nsecond line");
        assert!(!error_line(2, "config", "msg\n").contains("\\n"));
    }

    #[test]
    fn out_dir_guard() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("o");
        prepare_out_dir(&out, false).unwrap();
        prepare_out_dir(&out, false).unwrap();
        fs::write(out.join("f"), "x").unwrap();
        assert!(matches!(prepare_out_dir(&out, false), Err(Error::InvalidArgument(_))));
        prepare_out_dir(&out, true).unwrap();
        assert!(fs::read_dir(&out).unwrap().next().is_none());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}

//! Two-phase optimisation driver (base, then self-distillation) and checkpoints.

use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{distill_step, ema_update_in_place, TeacherState};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    average_precision, coco_thresholds, mean_instance_iou, mask_iou, GroundTruth, MetricsReport, Prediction,
    SceneMetrics, Seeds, TraceEntry,
};
use crate::features::coord_scale;
use crate::imagegrid::{Pixel, Raster};
use crate::losses::{LossTerms, Phase};
use crate::maskhead::{HeadOutput, HeadParams, PARAM_COUNT};
use crate::matching::{MatchConfig, PredScore, MASK_THRESHOLD};
use crate::objective::{instance_objective, ObjectiveConfig, SceneLevel};
use crate::scene::{splitmix64, TrainScene};

/// Spacing between student scale levels.
const SCALE_STEP: f64 = 0.05;

/// Every training knob. Flat so it maps one-to-one onto the key-value config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_steps: Vec<usize>,
    pub distill_start: usize,
    pub momentum: f64,
    pub init_scale: f64,
    /// Logit gain of the box-shaped initial mask; 0 starts from purely random weights.
    pub box_prior: f64,
    pub ema_rate: f64,
    pub gamma: f64,
    pub tau_d: f64,
    pub tau_m: f64,
    pub alpha: f64,
    pub beta: f64,
    pub depth_k: f64,
    pub color_theta: f64,
    pub tau_c: f64,
    pub dilation: usize,
    pub region_margin: usize,
    /// Steps over which the pairwise terms ramp linearly from 0 to full weight.
    pub pairwise_warmup: usize,
    pub depth_consistency: bool,
    pub instance_depth: bool,
    pub depth_gate: bool,
    pub anchor_stride: usize,
    /// Smallest student scale; the teacher always runs at full size.
    pub student_scale_min: f64,
    pub pred_score: PredScore,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 400,
            base_lr: 0.05,
            lr_decay: 0.1,
            decay_steps: vec![300],
            distill_start: 312,
            momentum: 0.9,
            init_scale: 0.3,
            box_prior: 2.0,
            ema_rate: 0.999,
            gamma: 4.0,
            tau_d: 0.5,
            tau_m: 0.8,
            alpha: 0.8,
            beta: 0.2,
            depth_k: 8.0,
            color_theta: 0.1,
            tau_c: 0.3,
            dilation: 2,
            region_margin: 4,
            pairwise_warmup: 150,
            depth_consistency: true,
            instance_depth: true,
            depth_gate: true,
            anchor_stride: 8,
            student_scale_min: 0.8,
            pred_score: PredScore::MeanForeground,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return fail("decay_steps must be strictly increasing".into());
        }
        if self.decay_steps.last().is_some_and(|&s| s >= self.total_steps) {
            return fail("decay_steps must be below total_steps".into());
        }
        if let Some(&first) = self.decay_steps.first() {
            if self.distill_start < first {
                return fail(format!(
                    "distill_start ({}) must not precede the first decay step ({first})",
                    self.distill_start
                ));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return fail(format!("ema_rate must lie in (0, 1), got {}", self.ema_rate));
        }
        crate::matching::check_balance(self.alpha, self.beta)?;
        if self.gamma < 0.0 || self.depth_k <= 0.0 || self.color_theta <= 0.0 || self.init_scale < 0.0 || !(self.box_prior >= 0.0) {
            return fail("gamma, depth_k, color_theta init_scale and box_prior must be non-negative (k, theta positive)".into());
        }
        if self.dilation == 0 || self.anchor_stride == 0 {
            return fail("dilation and anchor_stride must be at least 1".into());
        }
        if !(self.student_scale_min > 0.0 && self.student_scale_min <= 1.0) {
            return fail(format!("student_scale_min must lie in (0, 1], got {}", self.student_scale_min));
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            tau_d: self.tau_d,
            depth_k: self.depth_k,
            color_theta: self.color_theta,
            tau_c: self.tau_c,
            dilation: self.dilation,
            region_margin: self.region_margin,
            gamma: self.gamma,
            pairwise_weight: 1.0,
            depth_consistency: self.depth_consistency,
            instance_depth: self.instance_depth,
            depth_gate: self.depth_gate,
        }
    }

    pub fn matching(&self) -> MatchConfig {
        MatchConfig {
            alpha: self.alpha,
            beta: self.beta,
            tau_d: self.tau_d,
            tau_m: self.tau_m,
        }
    }

    /// Box-supervised baseline: no depth gate and no depth losses.
    pub fn box_only(mut self) -> Self {
        self.depth_gate = false;
        self.depth_consistency = false;
        self.instance_depth = false;
        self
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.decay_steps.iter().filter(|&&s| s <= step).count();
        self.base_lr * self.lr_decay.powi(decays as i32)
    }

    /// Objective settings in force at `step`.
    pub fn objective_at(&self, step: usize) -> ObjectiveConfig {
        let mut o = self.objective();
        if step < self.pairwise_warmup {
            o.pairwise_weight = step as f64 / self.pairwise_warmup as f64;
        }
        o
    }

    pub fn phase_at(&self, step: usize) -> Phase {
        if step >= self.distill_start {
            Phase::Distill
        } else {
            Phase::Base
        }
    }

    /// Student scale levels, ascending; the last is 1.
    pub fn scale_levels(&self) -> Vec<f64> {
        let n = ((1.0 - self.student_scale_min) / SCALE_STEP).round() as usize + 1;
        (0..n).map(|i| 1.0 - (n - 1 - i) as f64 * SCALE_STEP).collect()
    }

    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes).into()
    }
}

/// Seed of instance `index` in scene `scene_id`.
fn instance_seed(seed: u64, scene_id: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(scene_id.wrapping_mul(0x100).wrapping_add(index as u64 + 1)))
}

fn scene_rng(seed: u64, scene_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed.wrapping_add(0xA5A5) ^ splitmix64(scene_id)))
}

/// Mutable optimisation state of one scene.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub id: u64,
    rng: ChaCha8Rng,
    pub anchors: Vec<Pixel>,
    pub student: Vec<HeadParams>,
    pub velocity: Vec<Vec<f64>>,
    pub teacher: Option<TeacherState>,
}

/// A scene and its lazily built working levels (index = scale level).
struct SceneWork<'a> {
    scene: &'a TrainScene,
    sizes: Vec<(usize, usize)>,
    levels: Vec<Mutex<Option<Arc<SceneLevel>>>>,
}

impl<'a> SceneWork<'a> {
    fn new(scene: &'a TrainScene, scales: &[f64], obj: &ObjectiveConfig) -> Result<Self> {
        let (h, w) = (scene.image.height(), scene.image.width());
        let sizes: Vec<(usize, usize)> = scales
            .iter()
            .map(|s| (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1)))
            .collect();
        let work = SceneWork {
            scene,
            levels: sizes.iter().map(|_| Mutex::new(None)).collect(),
            sizes,
        };
        // Building the full level validates the scene up front.
        work.level(work.full_index(), obj)?;
        Ok(work)
    }

    fn full_index(&self) -> usize {
        self.sizes.len() - 1
    }

    fn level(&self, idx: usize, obj: &ObjectiveConfig) -> Result<Arc<SceneLevel>> {
        let mut slot = self.levels[idx].lock().expect("level cache poisoned");
        if let Some(l) = slot.as_ref() {
            return Ok(l.clone());
        }
        let (h, w) = self.sizes[idx];
        let l = Arc::new(SceneLevel::build(self.scene, h, w, obj)?);
        *slot = Some(l.clone());
        Ok(l)
    }
}

struct SceneStep {
    terms: LossTerms,
    reliable: usize,
}

/// Stateful trainer; `run_until` advances every scene in lockstep.
pub struct Trainer<'a> {
    config: TrainConfig,
    work: Vec<SceneWork<'a>>,
    states: Vec<SceneState>,
    step: usize,
    trace: Vec<TraceEntry>,
}

impl<'a> Trainer<'a> {
    pub fn new(scenes: &'a [TrainScene], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let obj = config.objective();
        let scales = config.scale_levels();
        let work = scenes
            .iter()
            .map(|s| SceneWork::new(s, &scales, &obj))
            .collect::<Result<Vec<_>>>()?;
        let states = work
            .iter()
            .map(|wk| {
                let full = wk.level(wk.full_index(), &obj)?;
                let id = wk.scene.id;
                Ok(SceneState {
                    id,
                    rng: scene_rng(config.seed, id),
                    anchors: full.anchors.clone(),
                    student: (0..full.instance_count())
                        .map(|i| {
                            let b = full.boxes[i];
                            let scale = coord_scale(full.height, full.width);
                            HeadParams::init_box_prior(
                                instance_seed(config.seed, id, i),
                                config.init_scale,
                                b.width() as f64 / 2.0 / scale,
                                b.height() as f64 / 2.0 / scale,
                                config.box_prior,
                            )
                        })
                        .collect(),
                    velocity: vec![vec![0.0; PARAM_COUNT]; full.instance_count()],
                    teacher: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            config: config.clone(),
            work,
            states,
            step: 0,
            trace: Vec::new(),
        })
    }

    pub fn from_checkpoint(scenes: &'a [TrainScene], config: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(scenes, config)?;
        if ckpt.config_hash != config.hash() {
            return Err(Error::Checkpoint("checkpoint was written with a different configuration".into()));
        }
        if ckpt.scenes.len() != t.states.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} scenes, dataset has {}",
                ckpt.scenes.len(),
                t.states.len()
            )));
        }
        for (state, sc) in t.states.iter_mut().zip(&ckpt.scenes) {
            if sc.id != state.id || sc.anchors != state.anchors {
                return Err(Error::Checkpoint(format!("scene {} does not match the dataset", sc.id)));
            }
            state.rng = sc.rng.restore();
            state.student = sc.student.clone();
            state.velocity = sc.velocity.clone();
            state.teacher = sc.teacher.clone();
        }
        t.step = ckpt.step;
        t.trace = ckpt.trace.clone();
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn states(&self) -> &[SceneState] {
        &self.states
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Full-resolution working level of scene `idx`.
    pub fn full_level(&self, idx: usize) -> Result<Arc<SceneLevel>> {
        let wk = &self.work[idx];
        wk.level(wk.full_index(), &self.config.objective())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.total_steps)
    }

    /// Advances to `target` steps (capped at the configured total).
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        let target = target.min(self.config.total_steps);
        while self.step < target {
            self.advance()?;
        }
        Ok(())
    }

    fn advance(&mut self) -> Result<()> {
        let step = self.step;
        let cfg = &self.config;
        let results: Vec<Result<SceneStep>> = self
            .work
            .par_iter()
            .zip(self.states.par_iter_mut())
            .enumerate()
            .map(|(i, (wk, st))| step_scene(wk, st, cfg, step, i))
            .collect();
        let mut sum = LossTerms::default();
        let mut reliable = 0;
        for r in results {
            let r = r?;
            sum += r.terms;
            reliable += r.reliable;
        }
        let n = self.states.len().max(1) as f64;
        let terms = LossTerms {
            projection: sum.projection / n,
            color_pairwise: sum.color_pairwise / n,
            depth_consistency: sum.depth_consistency / n,
            instance_depth: sum.instance_depth / n,
            reliable_dice: sum.reliable_dice / n,
        };
        let phase = cfg.phase_at(step);
        self.trace.push(TraceEntry {
            step,
            phase,
            lr: cfg.lr_at(step),
            terms,
            total: terms.total(phase, cfg.gamma),
            reliable,
        });
        self.step += 1;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.hash(),
            step: self.step,
            scenes: self
                .states
                .iter()
                .map(|s| SceneCheckpoint {
                    id: s.id,
                    rng: RngState::capture(&s.rng),
                    anchors: s.anchors.clone(),
                    student: s.student.clone(),
                    velocity: s.velocity.clone(),
                    teacher: s.teacher.clone(),
                })
                .collect(),
            trace: self.trace.clone(),
        }
    }
}

fn step_scene(wk: &SceneWork, st: &mut SceneState, cfg: &TrainConfig, step: usize, scene_idx: usize) -> Result<SceneStep> {
    let obj = cfg.objective_at(step);
    let li = st.rng.gen_range(0..wk.sizes.len());
    let level = wk.level(li, &obj)?;
    let phase = cfg.phase_at(step);

    let (terms, grads, reliable) = match phase {
        Phase::Base => {
            let mut terms = Vec::with_capacity(st.student.len());
            let mut grads = Vec::with_capacity(st.student.len());
            for (i, p) in st.student.iter().enumerate() {
                let e = instance_objective(&level, i, p, None, Phase::Base, &obj)?;
                terms.push(e.terms);
                grads.push(e.grad);
            }
            (terms, grads, 0)
        }
        Phase::Distill => {
            let full = wk.level(wk.full_index(), &obj)?;
            if st.teacher.is_none() {
                st.teacher = Some(TeacherState::from_student(
                    &st.anchors,
                    &st.student,
                    cfg.ema_rate,
                    (full.height, full.width),
                )?);
            }
            let teacher = st.teacher.as_ref().expect("teacher initialised above");
            let out = distill_step(
                &level,
                &full,
                &st.student,
                teacher,
                cfg.anchor_stride,
                &obj,
                &cfg.matching(),
                cfg.pred_score,
            )?;
            (out.terms, out.grads, out.reliable)
        }
    };

    for (i, t) in terms.iter().enumerate() {
        if let Some(term) = t.non_finite_term() {
            return Err(Error::NonFinite {
                scene: scene_idx,
                step,
                instance: i,
                term,
            });
        }
        if !grads[i].iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite {
                scene: scene_idx,
                step,
                instance: i,
                term: "gradient",
            });
        }
    }

    let lr = cfg.lr_at(step);
    for ((p, v), g) in st.student.iter_mut().zip(st.velocity.iter_mut()).zip(&grads) {
        for ((pi, vi), gi) in p.as_mut_slice().iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    if let Some(teacher) = st.teacher.as_mut() {
        ema_update_in_place(teacher, &st.anchors, &st.student)?;
    }
    Ok(SceneStep {
        terms: terms.into_iter().fold(LossTerms::default(), |a, b| a + b),
        reliable,
    })
}

/// Trains from scratch; the report carries the loss trace, config echo and seed.
pub fn train(scenes: &[TrainScene], config: &TrainConfig) -> Result<(Checkpoint, MetricsReport)> {
    let mut t = Trainer::new(scenes, config)?;
    t.run()?;
    let ckpt = t.checkpoint();
    let report = training_report(config, &ckpt, None)?;
    Ok((ckpt, report))
}

pub fn training_report(config: &TrainConfig, ckpt: &Checkpoint, data_seed: Option<u64>) -> Result<MetricsReport> {
    Ok(MetricsReport {
        command: "train".into(),
        seeds: Seeds {
            data: data_seed,
            train: Some(config.seed),
        },
        config: serde_json::to_value(config)?,
        loss_trace: ckpt.trace.clone(),
        ..MetricsReport::default()
    })
}

/// Student outputs at full resolution for every instance of a scene.
pub fn predict_scene(scene: &TrainScene, params: &[HeadParams], config: &TrainConfig) -> Result<Vec<HeadOutput>> {
    let obj = config.objective();
    let level = SceneLevel::full(scene, &obj)?;
    if params.len() != level.instance_count() {
        return Err(Error::Shape(format!(
            "scene {} has {} instances but {} parameter sets",
            scene.id,
            level.instance_count(),
            params.len()
        )));
    }
    params
        .iter()
        .zip(&level.stacks)
        .map(|(p, s)| Ok(obj.head().forward(s, p)?.without_cache()))
        .collect()
}

/// Final-mask IoU and mask AP of a checkpoint against held-out masks
/// (`gt_masks[scene][instance]`, in annotation order).
pub fn evaluate(
    scenes: &[TrainScene],
    gt_masks: &[Vec<Raster>],
    ckpt: &Checkpoint,
    config: &TrainConfig,
) -> Result<MetricsReport> {
    if scenes.len() != ckpt.scenes.len() || scenes.len() != gt_masks.len() {
        return Err(Error::Checkpoint("checkpoint, dataset and masks disagree on scene count".into()));
    }
    let per_scene: Vec<Result<(SceneMetrics, Vec<Prediction>, Vec<GroundTruth>)>> = scenes
        .par_iter()
        .zip(&ckpt.scenes)
        .zip(gt_masks)
        .map(|((scene, sc), masks)| {
            if sc.id != scene.id {
                return Err(Error::Checkpoint(format!("scene id {} expected, found {}", scene.id, sc.id)));
            }
            if masks.len() != scene.annotations.len() {
                return Err(Error::Annotation(format!("scene {}: mask count differs from box count", scene.id)));
            }
            let outs = predict_scene(scene, &sc.student, config)?;
            let mut ious = Vec::with_capacity(outs.len());
            let mut preds = Vec::with_capacity(outs.len());
            let mut gts = Vec::with_capacity(outs.len());
            for ((o, gt), ann) in outs.iter().zip(masks).zip(&scene.annotations) {
                let m = o.mask_prob.threshold(MASK_THRESHOLD);
                ious.push(mask_iou(&m, gt)?);
                preds.push(Prediction {
                    image_id: scene.id,
                    category: ann.category,
                    score: config.pred_score.score(&o.mask_prob),
                    mask: m,
                });
                gts.push(GroundTruth {
                    image_id: scene.id,
                    category: ann.category,
                    mask: gt.clone(),
                });
            }
            let mean = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
            Ok((
                SceneMetrics {
                    id: scene.id,
                    instance_ious: ious,
                    mean_iou: mean,
                },
                preds,
                gts,
            ))
        })
        .collect();
    let mut metrics = Vec::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for r in per_scene {
        let (m, p, g) = r?;
        metrics.push(m);
        preds.extend(p);
        gts.extend(g);
    }
    let ap = average_precision(&preds, &gts, &coco_thresholds())?;
    Ok(MetricsReport {
        command: "eval".into(),
        seeds: Seeds {
            data: None,
            train: Some(config.seed),
        },
        config: serde_json::to_value(config)?,
        mean_iou: mean_instance_iou(&metrics),
        scenes: metrics,
        ap: Some(ap.ap),
        ap50: Some(ap.ap50),
        ap75: Some(ap.ap75),
        loss_trace: ckpt.trace.clone(),
    })
}

/// Position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneCheckpoint {
    pub id: u64,
    pub rng: RngState,
    pub anchors: Vec<Pixel>,
    pub student: Vec<HeadParams>,
    pub velocity: Vec<Vec<f64>>,
    pub teacher: Option<TeacherState>,
}

/// Complete trainer state. Binary layout (little endian): magic `DBCK1`, config hash,
/// step, trace, then per scene its RNG position, anchors, student parameters, momentum
/// buffers and optional teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: usize,
    pub scenes: Vec<SceneCheckpoint>,
    pub trace: Vec<TraceEntry>,
}

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DBCK1";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn pixel(&mut self, p: Pixel) {
        self.u64(p.x as u64);
        self.u64(p.y as u64);
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("count overflows usize".into()))
    }
    /// A count of items each at least `item_bytes` long, bounded by the bytes left.
    fn count(&mut self, item_bytes: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(item_bytes) > self.buf.len() - self.pos {
            return Err(Error::Checkpoint(format!("implausible count {n} at byte {}", self.pos)));
        }
        Ok(n)
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn pixel(&mut self) -> Result<Pixel> {
        Ok(Pixel::new(self.usize()?, self.usize()?))
    }
    fn params(&mut self) -> Result<HeadParams> {
        HeadParams::from_vec(self.f64s(PARAM_COUNT)?).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn write_terms(w: &mut Writer, t: &LossTerms) {
    w.f64s(&[t.projection, t.color_pairwise, t.depth_consistency, t.instance_depth, t.reliable_dice]);
}

fn read_terms(r: &mut Reader) -> Result<LossTerms> {
    Ok(LossTerms {
        projection: r.f64()?,
        color_pairwise: r.f64()?,
        depth_consistency: r.f64()?,
        instance_depth: r.f64()?,
        reliable_dice: r.f64()?,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.0.extend_from_slice(&self.config_hash);
        w.u64(self.step as u64);
        w.u64(self.trace.len() as u64);
        for e in &self.trace {
            w.u64(e.step as u64);
            w.u8(matches!(e.phase, Phase::Distill) as u8);
            w.f64(e.lr);
            write_terms(&mut w, &e.terms);
            w.f64(e.total);
            w.u64(e.reliable as u64);
        }
        w.u64(self.scenes.len() as u64);
        for s in &self.scenes {
            w.u64(s.id);
            w.0.extend_from_slice(&s.rng.seed);
            w.u64(s.rng.stream);
            w.u128(s.rng.word_pos);
            w.u64(s.anchors.len() as u64);
            for ((a, p), v) in s.anchors.iter().zip(&s.student).zip(&s.velocity) {
                w.pixel(*a);
                w.f64s(p.as_slice());
                w.f64s(v);
            }
            match &s.teacher {
                None => w.u8(0),
                Some(t) => {
                    w.u8(1);
                    w.f64(t.ema_rate);
                    w.u64(t.input_size.0 as u64);
                    w.u64(t.input_size.1 as u64);
                    for (a, p) in t.anchors.iter().zip(&t.params) {
                        w.pixel(*a);
                        w.f64s(p.as_slice());
                    }
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::Checkpoint("missing DBCK1 header".into()));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.usize()?;
        let n_trace = r.count(8 * 10)?;
        let mut trace = Vec::with_capacity(n_trace);
        for _ in 0..n_trace {
            let step = r.usize()?;
            let phase = match r.u8()? {
                0 => Phase::Base,
                1 => Phase::Distill,
                v => return Err(Error::Checkpoint(format!("bad phase tag {v}"))),
            };
            trace.push(TraceEntry {
                step,
                phase,
                lr: r.f64()?,
                terms: read_terms(&mut r)?,
                total: r.f64()?,
                reliable: r.usize()?,
            });
        }
        let n_scenes = r.count(8)?;
        let mut scenes = Vec::with_capacity(n_scenes);
        for _ in 0..n_scenes {
            let id = r.u64()?;
            let rng = RngState {
                seed: r.take(32)?.try_into().expect("32 bytes"),
                stream: r.u64()?,
                word_pos: r.u128()?,
            };
            let n = r.count(16 + 16 * PARAM_COUNT)?;
            let mut anchors = Vec::with_capacity(n);
            let mut student = Vec::with_capacity(n);
            let mut velocity = Vec::with_capacity(n);
            for _ in 0..n {
                anchors.push(r.pixel()?);
                student.push(r.params()?);
                velocity.push(r.f64s(PARAM_COUNT)?);
            }
            let teacher = match r.u8()? {
                0 => None,
                1 => {
                    let ema_rate = r.f64()?;
                    let input_size = (r.usize()?, r.usize()?);
                    let mut ta = Vec::with_capacity(n);
                    let mut tp = Vec::with_capacity(n);
                    for _ in 0..n {
                        ta.push(r.pixel()?);
                        tp.push(r.params()?);
                    }
                    Some(TeacherState {
                        anchors: ta,
                        params: tp,
                        ema_rate,
                        input_size,
                    })
                }
                v => return Err(Error::Checkpoint(format!("bad teacher flag {v}"))),
            };
            scenes.push(SceneCheckpoint {
                id,
                rng,
                anchors,
                student,
                velocity,
                teacher,
            });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_hash,
            step,
            scenes,
            trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, SceneConfig};

    fn tiny_scenes(n: usize) -> Vec<TrainScene> {
        let mut cfg = SceneConfig::easy();
        cfg.height = 40;
        cfg.width = 40;
        cfg.min_radius = 6.0;
        cfg.max_radius = 9.0;
        cfg.min_objects = 2;
        cfg.max_objects = 2;
        generate_dataset(&cfg, 3, n)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, s)| s.training_view(i as u64))
            .collect()
    }

    fn short_config() -> TrainConfig {
        TrainConfig {
            total_steps: 12,
            decay_steps: vec![6],
            distill_start: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let scenes = tiny_scenes(2);
        let cfg = TrainConfig {
            total_steps: 0,
            decay_steps: vec![],
            ..TrainConfig::default()
        };
        let (ckpt, report) = train(&scenes, &cfg).unwrap();
        assert!(report.loss_trace.is_empty());
        let fresh = Trainer::new(&scenes, &cfg).unwrap().checkpoint();
        assert_eq!(ckpt, fresh);
        assert!(ckpt.scenes[0].teacher.is_none());
    }

    #[test]
    fn schedule_and_phases() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(299), cfg.base_lr);
        assert!((cfg.lr_at(300) - cfg.base_lr * 0.1).abs() < 1e-18);
        assert_eq!(cfg.phase_at(311), Phase::Base);
        assert_eq!(cfg.phase_at(312), Phase::Distill);
        let levels = cfg.scale_levels();
        assert_eq!(levels.len(), 5);
        for (a, b) in levels.iter().zip([0.8, 0.85, 0.9, 0.95, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(*cfg.scale_levels().last().unwrap(), 1.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainConfig { base_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { decay_steps: vec![300, 200], ..TrainConfig::default() },
            TrainConfig { decay_steps: vec![400], ..TrainConfig::default() },
            TrainConfig { distill_start: 100, ..TrainConfig::default() },
            TrainConfig { alpha: 0.9, beta: 0.2, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn phase_boundary_is_visible_in_trace() {
        let scenes = tiny_scenes(2);
        let cfg = short_config();
        let (ckpt, report) = train(&scenes, &cfg).unwrap();
        let t = &report.loss_trace;
        assert_eq!(t.len(), 12);
        assert_eq!(t[7].phase, Phase::Base);
        assert_eq!(t[7].terms.reliable_dice, 0.0);
        assert_eq!(t[8].phase, Phase::Distill);
        assert!(ckpt.scenes.iter().all(|s| s.teacher.is_some()));
    }

    #[test]
    fn checkpoint_bytes_round_trip_and_resume() {
        let scenes = tiny_scenes(2);
        let cfg = short_config();
        let (full, _) = train(&scenes, &cfg).unwrap();

        let mut a = Trainer::new(&scenes, &cfg).unwrap();
        a.run_until(9).unwrap();
        let mid = Checkpoint::from_bytes(&a.checkpoint().to_bytes()).unwrap();
        assert_eq!(mid, a.checkpoint());
        let mut b = Trainer::from_checkpoint(&scenes, &cfg, &mid).unwrap();
        b.run().unwrap();
        assert_eq!(b.checkpoint().to_bytes(), full.to_bytes());

        let other = TrainConfig { gamma: 2.0, ..cfg };
        assert!(Trainer::from_checkpoint(&scenes, &other, &mid).is_err());
        let bytes = full.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }

    #[test]
    fn nan_depth_aborts_with_location() {
        let mut scenes = tiny_scenes(2);
        let d = scenes[1].pseudo_depth.data_mut();
        for v in d.iter_mut() {
            *v = f64::NAN;
        }
        let cfg = TrainConfig {
            student_scale_min: 1.0,
            ..short_config()
        };
        match train(&scenes, &cfg) {
            Err(Error::NonFinite { scene, step, instance, term }) => {
                assert_eq!((scene, step, instance), (1, 0, 0));
                assert_eq!(term, "instance_depth");
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }
}

//! Analytic-versus-finite-difference gradient verification for every loss and for the
//! full objective composed with the mask head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imagegrid::{neighbor_edges, PixelBox, Raster};
use crate::losses::{
    color_similarity, depth_similarity, loss_dice, loss_instance_depth, loss_pairwise, loss_projection, Phase,
};
use crate::maskhead::{backward, relu_margin, HeadParams, MaskHead, PARAM_COUNT};
use crate::objective::{instance_objective, ObjectiveConfig, SceneLevel};
use crate::scene::{BoxAnnotation, TrainScene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTerm {
    PairwiseDepth,
    PairwiseColor,
    InstanceDepth,
    Projection,
    Dice,
    HeadBackward,
    Composed,
}

impl GradTerm {
    pub const ALL: [GradTerm; 7] = [
        GradTerm::PairwiseDepth,
        GradTerm::PairwiseColor,
        GradTerm::InstanceDepth,
        GradTerm::Projection,
        GradTerm::Dice,
        GradTerm::HeadBackward,
        GradTerm::Composed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTerm::PairwiseDepth => "pairwise_depth",
            GradTerm::PairwiseColor => "pairwise_color",
            GradTerm::InstanceDepth => "instance_depth",
            GradTerm::Projection => "projection",
            GradTerm::Dice => "dice",
            GradTerm::HeadBackward => "head_backward",
            GradTerm::Composed => "composed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub cases: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Fault injection: perturbs the analytic gradient of this term.
    pub corrupt: Option<GradTerm>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            cases: 100,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub terms: Vec<TermReport>,
    pub passed: bool,
}

/// `max|a - n| / max(max|a|, max|n|, 1e-6)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = inf(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = inf(&mut analytic.iter().copied()).max(inf(&mut numeric.iter().copied())).max(1e-6);
    diff / scale
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Raster {
    Raster::new(h, w, 1, (0..h * w).map(|_| rng.gen_range(0.02..0.98)).collect()).expect("sized")
}

fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PixelBox {
    let x0 = rng.gen_range(0..w);
    let y0 = rng.gen_range(0..h);
    let x1 = rng.gen_range(x0 + 1..=w);
    let y1 = rng.gen_range(y0 + 1..=h);
    PixelBox::new(x0, y0, x1, y1).expect("non-empty")
}

/// Smooth random colour image: a base colour plus small per-pixel jitter.
fn smooth_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Raster {
    let base: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let data = (0..h * w)
        .flat_map(|_| base.map(|b| b + 0.05 * rng.gen_range(-1.0..1.0f64)))
        .collect::<Vec<_>>();
    Raster::new(h, w, 3, data).expect("sized")
}

fn smooth_depth(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Raster {
    let base = rng.gen_range(0.2..0.8);
    Raster::new(h, w, 1, (0..h * w).map(|_| base + rng.gen_range(-0.08..0.08)).collect()).expect("sized")
}

/// Smallest gap between the largest and second-largest value of any row or column.
fn projection_tie_gap(mask: &Raster) -> f64 {
    let (h, w) = (mask.height(), mask.width());
    let gap = |vals: &mut dyn Iterator<Item = f64>| {
        let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in vals {
            if v > a {
                b = a;
                a = v;
            } else if v > b {
                b = v;
            }
        }
        if b.is_finite() {
            a - b
        } else {
            f64::INFINITY
        }
    };
    let rows = (0..h).map(|y| gap(&mut (0..w).map(|x| mask.get(y, x, 0))));
    let cols = (0..w).map(|x| gap(&mut (0..h).map(|y| mask.get(y, x, 0))));
    rows.chain(cols).fold(f64::INFINITY, f64::min)
}

fn corrupt(g: &mut [f64], on: bool) {
    if on && !g.is_empty() {
        let scale = g.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        g[0] += 1e-2 * scale;
    }
}

fn mask_from(x: &[f64], h: usize, w: usize) -> Raster {
    Raster::new(h, w, 1, x.to_vec()).expect("sized")
}

/// One random case of `term`; returns the relative error, or `None` when the draw sits on
/// a non-differentiable point and must be redrawn.
fn run_case(term: GradTerm, rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<Option<f64>> {
    let h = rng.gen_range(3..=6);
    let w = rng.gen_range(3..=6);
    let hstep = cfg.step;
    let bad = cfg.corrupt == Some(term);
    let err = match term {
        GradTerm::PairwiseDepth | GradTerm::PairwiseColor => {
            let edges = neighbor_edges(h, w, rng.gen_range(1..=2));
            let (sim, tau) = if term == GradTerm::PairwiseDepth {
                (depth_similarity(&smooth_depth(rng, h, w), &edges, 8.0), 0.5)
            } else {
                (color_similarity(&smooth_image(rng, h, w), &edges, 0.1), 0.3)
            };
            let region = Raster::new(h, w, 1, (0..h * w).map(|_| (rng.gen::<f64>() < 0.8) as u8 as f64).collect())?;
            let mask = random_mask(rng, h, w);
            let (_, g) = loss_pairwise(&mask, &edges, &sim, tau, &region)?;
            let mut a = g.into_data();
            corrupt(&mut a, bad);
            let n = numeric_gradient(mask.data(), hstep, |x| {
                loss_pairwise(&mask_from(x, h, w), &edges, &sim, tau, &region).expect("sized").0
            });
            rel_error(&a, &n)
        }
        GradTerm::InstanceDepth => {
            let pred = random_mask(rng, h, w);
            let pseudo = random_mask(rng, h, w);
            let b = random_box(rng, h, w);
            let (_, g) = loss_instance_depth(&pred, &pseudo, &b)?;
            let mut a = g.into_data();
            corrupt(&mut a, bad);
            let n = numeric_gradient(pred.data(), hstep, |x| {
                loss_instance_depth(&mask_from(x, h, w), &pseudo, &b).expect("sized").0
            });
            rel_error(&a, &n)
        }
        GradTerm::Projection => {
            let mask = random_mask(rng, h, w);
            if projection_tie_gap(&mask) < 1e-3 {
                return Ok(None);
            }
            let b = random_box(rng, h, w);
            let (_, g) = loss_projection(&mask, &b);
            let mut a = g.into_data();
            corrupt(&mut a, bad);
            let n = numeric_gradient(mask.data(), hstep, |x| loss_projection(&mask_from(x, h, w), &b).0);
            rel_error(&a, &n)
        }
        GradTerm::Dice => {
            let mask = random_mask(rng, h, w);
            let target = Raster::new(h, w, 1, (0..h * w).map(|_| rng.gen_range(0..2) as f64).collect())?;
            let (_, g) = loss_dice(&mask, &target)?;
            let mut a = g.into_data();
            corrupt(&mut a, bad);
            let n = numeric_gradient(mask.data(), hstep, |x| loss_dice(&mask_from(x, h, w), &target).expect("sized").0);
            rel_error(&a, &n)
        }
        GradTerm::HeadBackward => {
            let scene = random_scene(rng, h, w);
            let obj = ObjectiveConfig::default();
            let level = SceneLevel::full(&scene, &obj)?;
            let params = HeadParams::init(rng.gen(), 0.8);
            if relu_margin(&level.stacks[0], &params) < 1e-3 {
                return Ok(None);
            }
            let um = random_mask(rng, h, w).map(|v| 2.0 * v - 1.0);
            let ud = random_mask(rng, h, w).map(|v| 2.0 * v - 1.0);
            let head = MaskHead::default();
            let out = head.forward(&level.stacks[0], &params)?;
            let mut a = backward(&out, &um, &ud)?;
            corrupt(&mut a, bad);
            let n = numeric_gradient(params.as_slice(), hstep, |x| {
                let p = HeadParams::from_vec(x.to_vec()).expect("finite");
                let o = head.forward(&level.stacks[0], &p).expect("shape");
                let dot = |r: &Raster, u: &Raster| r.data().iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>();
                dot(&o.mask_prob, &um) + dot(&o.depth_pred, &ud)
            });
            rel_error(&a, &n)
        }
        GradTerm::Composed => {
            let (h, w) = (h + 2, w + 2);
            let scene = random_scene(rng, h, w);
            let obj = ObjectiveConfig {
                dilation: 1,
                region_margin: 1,
                ..ObjectiveConfig::default()
            };
            let level = SceneLevel::full(&scene, &obj)?;
            let params = HeadParams::init(rng.gen(), 0.8);
            let target = random_box(rng, h, w).indicator(h, w);
            let eval = instance_objective(&level, 0, &params, Some(&target), Phase::Distill, &obj)?;
            if relu_margin(&level.stacks[0], &params) < 1e-3 || projection_tie_gap(&eval.output.mask_prob) < 1e-4 {
                return Ok(None);
            }
            let mut a = eval.grad;
            corrupt(&mut a, bad);
            let n = numeric_gradient(params.as_slice(), hstep, |x| {
                let p = HeadParams::from_vec(x.to_vec()).expect("finite");
                instance_objective(&level, 0, &p, Some(&target), Phase::Distill, &obj)
                    .expect("shape")
                    .terms
                    .total(Phase::Distill, obj.gamma)
            });
            debug_assert_eq!(n.len(), PARAM_COUNT);
            rel_error(&a, &n)
        }
    };
    Ok(Some(err))
}

fn random_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> TrainScene {
    TrainScene {
        id: 0,
        image: smooth_image(rng, h, w),
        pseudo_depth: smooth_depth(rng, h, w),
        annotations: vec![BoxAnnotation {
            bbox: random_box(rng, h, w),
            category: 1,
        }],
    }
}

/// Checks every term over `cfg.cases` random draws (redrawing at kinks and argmax ties).
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut terms = Vec::new();
    for (t, term) in GradTerm::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(t as u64 * 0x9E37));
        let mut worst = 0.0f64;
        let mut done = 0;
        let mut attempts = 0;
        while done < cfg.cases && attempts < cfg.cases * 20 {
            attempts += 1;
            if let Some(e) = run_case(term, &mut rng, cfg)? {
                worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
                done += 1;
            }
        }
        terms.push(TermReport {
            term: term.name().into(),
            cases: done,
            max_rel_error: worst,
            passed: done == cfg.cases && worst <= cfg.tolerance,
        });
    }
    let passed = terms.iter().all(|t| t.passed);
    Ok(GradCheckReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        terms,
        passed,
    })
}

//! Per-scene precomputation and the per-instance training objective shared by the
//! trainer, the distillation step and the gradient checker.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{attach_rel_coords, build_base_features, FeatureStack};
use crate::imagegrid::{neighbor_edges, resize_bilinear, EdgeGraph, Pixel, PixelBox, Raster};
use crate::losses::{
    color_similarity, depth_similarity, dice_with_grad, loss_instance_depth, loss_projection, pairwise_on_edges,
    qualifying_edges, LossTerms, Phase,
};
use crate::maskhead::{backward, HeadOutput, HeadParams, MaskHead};
use crate::scene::TrainScene;

/// Loss-side settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub tau_d: f64,
    pub depth_k: f64,
    pub color_theta: f64,
    pub tau_c: f64,
    pub dilation: usize,
    pub region_margin: usize,
    pub gamma: f64,
    /// Multiplier on both pairwise terms (the trainer ramps it up during warmup).
    pub pairwise_weight: f64,
    pub depth_consistency: bool,
    pub instance_depth: bool,
    pub depth_gate: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            tau_d: 0.5,
            depth_k: 8.0,
            color_theta: 0.1,
            tau_c: 0.3,
            dilation: 2,
            region_margin: 4,
            gamma: 4.0,
            pairwise_weight: 1.0,
            depth_consistency: true,
            instance_depth: true,
            depth_gate: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn head(&self) -> MaskHead {
        MaskHead {
            depth_gate: self.depth_gate,
        }
    }
}

/// One scene resampled to a working size, with everything that does not depend on parameters.
#[derive(Debug, Clone)]
pub struct SceneLevel {
    pub height: usize,
    pub width: usize,
    pub pseudo_depth: Raster,
    pub edges: EdgeGraph,
    /// Per-pixel mean depth similarity.
    pub depth_pixel_sim: Vec<f64>,
    pub region: Raster,
    pub depth_edges: Vec<(usize, usize)>,
    pub color_edges: Vec<(usize, usize)>,
    pub base: Arc<Raster>,
    pub boxes: Vec<PixelBox>,
    pub anchors: Vec<Pixel>,
    pub stacks: Vec<FeatureStack>,
}

impl SceneLevel {
    pub fn build(scene: &TrainScene, height: usize, width: usize, cfg: &ObjectiveConfig) -> Result<Self> {
        scene.image.ensure_same_size(&scene.pseudo_depth, "pseudo depth")?;
        let (sh, sw) = (scene.image.height(), scene.image.width());
        let image = resize_bilinear(&scene.image, height, width)?;
        let pseudo_depth = resize_bilinear(&scene.pseudo_depth, height, width)?;
        let base = Arc::new(build_base_features(&image)?);
        let edges = neighbor_edges(height, width, cfg.dilation);
        let depth_sim = depth_similarity(&pseudo_depth, &edges, cfg.depth_k);
        let color_sim = color_similarity(&image, &edges, cfg.color_theta);

        let mut boxes = Vec::with_capacity(scene.annotations.len());
        for a in &scene.annotations {
            if a.bbox.is_empty() || !a.bbox.fits_in(sh, sw) {
                return Err(Error::Annotation(format!("scene {}: box {:?} is empty or out of bounds", scene.id, a.bbox)));
            }
            boxes.push(a.bbox.rescale((sh, sw), (height, width)));
        }
        let mut region = Raster::zeros(height, width, 1);
        for b in &boxes {
            let d = b.dilate(cfg.region_margin, height, width);
            for y in d.y0..d.y1 {
                for x in d.x0..d.x1 {
                    region.set(y, x, 0, 1.0);
                }
            }
        }
        let depth_edges = qualifying_edges(&edges, &depth_sim, cfg.tau_d, &region);
        let color_edges = qualifying_edges(&edges, &color_sim, cfg.tau_c, &region);
        let anchors: Vec<Pixel> = boxes.iter().map(PixelBox::center).collect();
        let stacks = anchors
            .iter()
            .map(|&a| attach_rel_coords(base.clone(), a))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneLevel {
            height,
            width,
            pseudo_depth,
            edges,
            depth_pixel_sim: depth_sim.pixel_sim,
            region,
            depth_edges,
            color_edges,
            base,
            boxes,
            anchors,
            stacks,
        })
    }

    pub fn full(scene: &TrainScene, cfg: &ObjectiveConfig) -> Result<Self> {
        Self::build(scene, scene.image.height(), scene.image.width(), cfg)
    }

    pub fn instance_count(&self) -> usize {
        self.boxes.len()
    }

    pub fn stack_at(&self, anchor: Pixel) -> Result<FeatureStack> {
        attach_rel_coords(self.base.clone(), anchor)
    }
}

/// Loss terms, parameter gradient and head output for one instance.
#[derive(Debug, Clone)]
pub struct InstanceEval {
    pub terms: LossTerms,
    pub grad: Vec<f64>,
    pub output: HeadOutput,
}

/// Evaluates the instance's loss (the reliable dice term only in the distill phase and only
/// when a pseudo mask is given) and its gradient with respect to the head parameters.
pub fn instance_objective(
    level: &SceneLevel,
    instance: usize,
    params: &HeadParams,
    pseudo_mask: Option<&Raster>,
    phase: Phase,
    cfg: &ObjectiveConfig,
) -> Result<InstanceEval> {
    let output = cfg.head().forward(&level.stacks[instance], params)?;
    let (terms, d_mask, d_depth) = loss_and_upstream(level, instance, &output, pseudo_mask, phase, cfg)?;
    let grad = backward(&output, &d_mask, &d_depth)?;
    Ok(InstanceEval { terms, grad, output })
}

/// Loss terms and their gradients with respect to the mask and depth maps.
pub fn loss_and_upstream(
    level: &SceneLevel,
    instance: usize,
    output: &HeadOutput,
    pseudo_mask: Option<&Raster>,
    phase: Phase,
    cfg: &ObjectiveConfig,
) -> Result<(LossTerms, Raster, Raster)> {
    let bbox = &level.boxes[instance];
    let mask = &output.mask_prob;
    let mut terms = LossTerms::default();

    let (proj, mut d_mask) = loss_projection(mask, bbox);
    terms.projection = proj;

    let pw = cfg.pairwise_weight;
    if pw != 0.0 {
        let (color, g) = pairwise_on_edges(mask, &level.color_edges);
        terms.color_pairwise = pw * color;
        accumulate(&mut d_mask, &g, pw);
        if cfg.depth_consistency {
            let (cons, g) = pairwise_on_edges(mask, &level.depth_edges);
            terms.depth_consistency = pw * cons;
            accumulate(&mut d_mask, &g, pw);
        }
    }

    let d_depth = if cfg.instance_depth {
        let (v, g) = loss_instance_depth(&output.depth_pred, &level.pseudo_depth, bbox)?;
        terms.instance_depth = v;
        g
    } else {
        Raster::zeros(level.height, level.width, 1)
    };

    if phase == Phase::Distill {
        if let Some(target) = pseudo_mask {
            mask.ensure_same_size(target, "pseudo mask")?;
            let (v, g) = dice_with_grad(mask.data(), target.data());
            terms.reliable_dice = v;
            for (d, gi) in d_mask.data_mut().iter_mut().zip(g) {
                *d += cfg.gamma * gi;
            }
        }
    }
    Ok((terms, d_mask, d_depth))
}

fn accumulate(dst: &mut Raster, src: &Raster, scale: f64) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += scale * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{loss_pairwise, SimilarityField};
    use crate::scene::{generate_scene, SceneConfig};

    fn scene() -> TrainScene {
        generate_scene(&SceneConfig::easy(), 11).unwrap().training_view(0)
    }

    #[test]
    fn precomputed_edges_match_loss_pairwise() {
        let cfg = ObjectiveConfig::default();
        let s = scene();
        let level = SceneLevel::full(&s, &cfg).unwrap();
        let params = HeadParams::init(3, 0.1);
        let out = cfg.head().forward(&level.stacks[0], &params).unwrap();
        let sim: SimilarityField = depth_similarity(&level.pseudo_depth, &level.edges, cfg.depth_k);
        let (a, ga) = loss_pairwise(&out.mask_prob, &level.edges, &sim, cfg.tau_d, &level.region).unwrap();
        let (b, gb) = pairwise_on_edges(&out.mask_prob, &level.depth_edges);
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn zero_gamma_matches_base_phase() {
        let cfg = ObjectiveConfig {
            gamma: 0.0,
            ..ObjectiveConfig::default()
        };
        let s = scene();
        let level = SceneLevel::full(&s, &cfg).unwrap();
        let params = HeadParams::init(5, 0.1);
        let target = level.boxes[0].indicator(level.height, level.width);
        let base = instance_objective(&level, 0, &params, None, Phase::Base, &cfg).unwrap();
        let dist = instance_objective(&level, 0, &params, Some(&target), Phase::Distill, &cfg).unwrap();
        assert_eq!(base.grad, dist.grad);
        assert_eq!(base.terms.total(Phase::Base, 0.0), dist.terms.total(Phase::Distill, 0.0));
        assert!(dist.terms.reliable_dice > 0.0);
    }

    #[test]
    fn scaled_level_keeps_boxes_inside() {
        let cfg = ObjectiveConfig::default();
        let s = scene();
        let level = SceneLevel::build(&s, 77, 77, &cfg).unwrap();
        for (b, a) in level.boxes.iter().zip(&level.anchors) {
            assert!(!b.is_empty() && b.fits_in(77, 77));
            assert!(b.contains(a.x, a.y));
        }
    }
}

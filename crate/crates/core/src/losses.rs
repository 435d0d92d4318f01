//! Scalar losses on mask and depth maps, each paired with its exact gradient.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagegrid::{EdgeGraph, PixelBox, Raster};

/// Dice smoothing term.
pub const DICE_EPS: f64 = 1e-6;

/// Floor on the pairwise agreement probability; below it the term is clamped with zero gradient.
const PAIR_PROB_FLOOR: f64 = 1e-12;

/// Per-edge similarity and its per-pixel mean over incident edges.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityField {
    pub edge_sim: Vec<f64>,
    pub pixel_sim: Vec<f64>,
}

fn with_pixel_means(edges: &EdgeGraph, edge_sim: Vec<f64>) -> SimilarityField {
    let n = edges.height() * edges.width();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (&(a, b), &s) in edges.edges().iter().zip(&edge_sim) {
        sum[a] += s;
        sum[b] += s;
        count[a] += 1;
        count[b] += 1;
    }
    // An isolated pixel has nothing to disagree with.
    let pixel_sim = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 1.0 } else { s / c as f64 })
        .collect();
    SimilarityField { edge_sim, pixel_sim }
}

/// `exp(-k |d_a - d_b|)` per edge.
pub fn depth_similarity(depth: &Raster, edges: &EdgeGraph, k: f64) -> SimilarityField {
    let d = depth.data();
    let c = depth.channels();
    let sim = edges
        .edges()
        .iter()
        .map(|&(a, b)| (-k * (d[a * c] - d[b * c]).abs()).exp())
        .collect();
    with_pixel_means(edges, sim)
}

/// `exp(-||c_a - c_b||_2 / theta)` per edge.
pub fn color_similarity(image: &Raster, edges: &EdgeGraph, theta: f64) -> SimilarityField {
    let d = image.data();
    let c = image.channels();
    let sim = edges
        .edges()
        .iter()
        .map(|&(a, b)| {
            let dist = (0..c)
                .map(|k| (d[a * c + k] - d[b * c + k]).powi(2))
                .sum::<f64>()
                .sqrt();
            (-dist / theta).exp()
        })
        .collect();
    with_pixel_means(edges, sim)
}

/// Edges whose similarity is strictly above `tau` and whose endpoints both lie in `region`.
pub fn qualifying_edges(
    edges: &EdgeGraph,
    sim: &SimilarityField,
    tau: f64,
    region: &Raster,
) -> Vec<(usize, usize)> {
    let r = region.data();
    edges
        .edges()
        .iter()
        .zip(&sim.edge_sim)
        .filter(|(&(a, b), &s)| s > tau && r[a] > 0.5 && r[b] > 0.5)
        .map(|(&e, _)| e)
        .collect()
}

/// Mean of `-log(m_a m_b + (1-m_a)(1-m_b))` over pre-selected edges.
pub fn pairwise_on_edges(mask: &Raster, selected: &[(usize, usize)]) -> (f64, Raster) {
    let mut grad = Raster::zeros(mask.height(), mask.width(), 1);
    if selected.is_empty() {
        return (0.0, grad);
    }
    let m = mask.data();
    let inv = 1.0 / selected.len() as f64;
    let g = grad.data_mut();
    let mut total = 0.0;
    for &(a, b) in selected {
        let (ma, mb) = (m[a], m[b]);
        let p = ma * mb + (1.0 - ma) * (1.0 - mb);
        if p < PAIR_PROB_FLOOR {
            total -= PAIR_PROB_FLOOR.ln();
            continue;
        }
        total -= p.ln();
        g[a] -= inv * (2.0 * mb - 1.0) / p;
        g[b] -= inv * (2.0 * ma - 1.0) / p;
    }
    (total * inv, grad)
}

/// Pairwise agreement loss over edges with similarity above `tau` inside `region`.
///
/// Returns 0 with a zero gradient when no edge qualifies.
pub fn loss_pairwise(
    mask: &Raster,
    edges: &EdgeGraph,
    sim: &SimilarityField,
    tau: f64,
    region: &Raster,
) -> Result<(f64, Raster)> {
    mask.ensure_same_size(region, "pairwise region")?;
    if edges.height() != mask.height() || edges.width() != mask.width() {
        return Err(Error::Shape("edge graph does not match mask size".into()));
    }
    let selected = qualifying_edges(edges, sim, tau, region);
    Ok(pairwise_on_edges(mask, &selected))
}

/// Mean squared depth error over the box.
pub fn loss_instance_depth(depth_pred: &Raster, pseudo_depth: &Raster, bbox: &PixelBox) -> Result<(f64, Raster)> {
    depth_pred.ensure_same_size(pseudo_depth, "instance depth")?;
    if bbox.is_empty() {
        return Err(Error::InvalidArgument("instance depth loss needs a non-empty box".into()));
    }
    if !bbox.fits_in(depth_pred.height(), depth_pred.width()) {
        return Err(Error::InvalidArgument("box outside the depth map".into()));
    }
    let area = bbox.area() as f64;
    let mut grad = Raster::zeros(depth_pred.height(), depth_pred.width(), 1);
    let mut total = 0.0;
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            let e = depth_pred.get(y, x, 0) - pseudo_depth.get(y, x, 0);
            total += e * e;
            grad.set(y, x, 0, 2.0 * e / area);
        }
    }
    Ok((total / area, grad))
}

/// `1 - 2 sum(p t) / (sum p^2 + sum t^2 + eps)` and its gradient in `p`.
pub fn dice_with_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let union: f64 = pred.iter().map(|p| p * p).sum::<f64>() + target.iter().map(|t| t * t).sum::<f64>() + DICE_EPS;
    let value = 1.0 - 2.0 * inter / union;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| -2.0 * (t * union - 2.0 * p * inter) / (union * union))
        .collect();
    (value, grad)
}

pub fn loss_dice(mask: &Raster, target: &Raster) -> Result<(f64, Raster)> {
    mask.ensure_same_size(target, "dice target")?;
    let (v, g) = dice_with_grad(mask.data(), target.data());
    Ok((v, Raster::new(mask.height(), mask.width(), 1, g)?))
}

/// Lowest-index argmax.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

/// Dice between the mask's row/column max-projections and the box's projections.
pub fn loss_projection(mask: &Raster, bbox: &PixelBox) -> (f64, Raster) {
    let (h, w) = (mask.height(), mask.width());
    let mut grad = Raster::zeros(h, w, 1);

    let rows: Vec<(usize, f64)> = (0..h).map(|y| argmax((0..w).map(|x| mask.get(y, x, 0)))).collect();
    let row_target: Vec<f64> = (0..h).map(|y| (y >= bbox.y0 && y < bbox.y1) as u8 as f64).collect();
    let row_vals: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (vy, gy) = dice_with_grad(&row_vals, &row_target);
    for (y, (&(x, _), g)) in rows.iter().zip(gy).enumerate() {
        grad.data_mut()[y * w + x] += g;
    }

    let cols: Vec<(usize, f64)> = (0..w).map(|x| argmax((0..h).map(|y| mask.get(y, x, 0)))).collect();
    let col_target: Vec<f64> = (0..w).map(|x| (x >= bbox.x0 && x < bbox.x1) as u8 as f64).collect();
    let col_vals: Vec<f64> = cols.iter().map(|c| c.1).collect();
    let (vx, gx) = dice_with_grad(&col_vals, &col_target);
    for (x, (&(y, _), g)) in cols.iter().zip(gx).enumerate() {
        grad.data_mut()[y * w + x] += g;
    }
    (vy + vx, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Distill,
}

/// Loss components; scene-level values are sums over instances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub projection: f64,
    pub color_pairwise: f64,
    pub depth_consistency: f64,
    pub instance_depth: f64,
    pub reliable_dice: f64,
}

impl LossTerms {
    /// Box-supervised mask loss with the depth terms.
    pub fn mask_loss(&self) -> f64 {
        self.projection + self.color_pairwise + self.depth_consistency + self.instance_depth
    }

    pub fn total(&self, phase: Phase, gamma: f64) -> f64 {
        match phase {
            Phase::Base => self.mask_loss(),
            Phase::Distill => self.mask_loss() + gamma * self.reliable_dice,
        }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("projection", self.projection),
            ("color_pairwise", self.color_pairwise),
            ("depth_consistency", self.depth_consistency),
            ("instance_depth", self.instance_depth),
            ("reliable_dice", self.reliable_dice),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

impl Add for LossTerms {
    type Output = LossTerms;

    fn add(self, o: LossTerms) -> LossTerms {
        LossTerms {
            projection: self.projection + o.projection,
            color_pairwise: self.color_pairwise + o.color_pairwise,
            depth_consistency: self.depth_consistency + o.depth_consistency,
            instance_depth: self.instance_depth + o.instance_depth,
            reliable_dice: self.reliable_dice + o.reliable_dice,
        }
    }
}

impl AddAssign for LossTerms {
    fn add_assign(&mut self, o: LossTerms) {
        *self = *self + o;
    }
}

pub fn total_loss(terms: &LossTerms, phase: Phase, gamma: f64) -> f64 {
    terms.total(phase, gamma)
}

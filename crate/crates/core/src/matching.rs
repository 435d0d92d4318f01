//! Depth-aware scoring of teacher candidates and one-to-one assignment to boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagegrid::{Pixel, PixelBox, Raster};

/// Binarisation threshold for derived boxes and pseudo labels.
pub const MASK_THRESHOLD: f64 = 0.5;

/// How a candidate's prediction score is derived from its mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredScore {
    /// Mean probability over foreground pixels (0 for an empty mask).
    #[default]
    MeanForeground,
    /// Peak probability anywhere in the mask.
    Peak,
}

impl PredScore {
    pub fn score(self, mask: &Raster) -> f64 {
        match self {
            PredScore::MeanForeground => {
                let (sum, n) = mask
                    .data()
                    .iter()
                    .filter(|&&v| v > MASK_THRESHOLD)
                    .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
                if n == 0 {
                    0.0
                } else {
                    sum / n as f64
                }
            }
            PredScore::Peak => mask.data().iter().cloned().fold(0.0, f64::max),
        }
    }
}

/// One teacher prediction.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub mask_prob: Raster,
    pub depth_pred: Raster,
    pub bbox: PixelBox,
    pub pred_score: f64,
    pub anchor: Pixel,
    /// Instance whose teacher head produced this candidate.
    pub source: usize,
}

impl Candidate {
    pub fn new(mask_prob: Raster, depth_pred: Raster, anchor: Pixel, source: usize, strategy: PredScore) -> Self {
        let bbox = PixelBox::from_mask(&mask_prob, MASK_THRESHOLD);
        let pred_score = strategy.score(&mask_prob);
        Candidate {
            mask_prob,
            depth_pred,
            bbox,
            pred_score,
            anchor,
            source,
        }
    }
}

pub fn box_iou(a: &PixelBox, b: &PixelBox) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).area() as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    inter / union
}

/// Mask-weighted share of pixels whose depth similarity exceeds `tau_d`.
pub fn depth_consistency_score(mask: &Raster, pixel_sim: &[f64], tau_d: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&m, &s) in mask.data().iter().zip(pixel_sim) {
        let w = m * s;
        den += w;
        if s > tau_d {
            num += w;
        }
    }
    if den < 1e-12 {
        0.0
    } else {
        num / den
    }
}

pub fn check_balance(alpha: f64, beta: f64) -> Result<()> {
    if alpha < 0.0 || beta < 0.0 || alpha + beta > 1.0 + 1e-12 || !(alpha + beta).is_finite() {
        return Err(Error::Config(format!(
            "matching weights need alpha, beta >= 0 and alpha + beta <= 1 (got {alpha}, {beta})"
        )));
    }
    Ok(())
}

/// Weight left for the prediction score. Summing first keeps (0.8, 0.2) at exactly 0.
pub fn pred_weight(alpha: f64, beta: f64) -> f64 {
    (1.0 - (alpha + beta)).max(0.0)
}

/// `alpha * iou + beta * s_dcons + (1 - alpha - beta) * s_pred`.
pub fn matching_score(iou: f64, s_dcons: f64, s_pred: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_balance(alpha, beta)?;
    Ok(alpha * iou + beta * s_dcons + pred_weight(alpha, beta) * s_pred)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// (gt index, candidate index, score), sorted by gt index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn total(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }

    pub fn for_gt(&self, gt: usize) -> Option<(usize, f64)> {
        self.pairs.iter().find(|p| p.0 == gt).map(|p| (p.1, p.2))
    }
}

/// Minimum-cost assignment of every row of `cost` (rows <= cols) to a distinct column.
/// Shortest augmenting paths with dual potentials, O(rows^2 * cols).
fn min_cost_rows(cost: &[Vec<f64>], rows: usize, cols: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // col_owner[j] is the 1-based row assigned to 1-based column j (0 = free).
    let mut col_owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; rows];
    for j in 1..=cols {
        if col_owner[j] != 0 {
            row_to_col[col_owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Maximum-total-score one-to-one assignment of ground truths (rows) to candidates (columns).
/// Rows or columns beyond the smaller dimension stay unmatched.
pub fn hungarian(scores: &[Vec<f64>]) -> Assignment {
    let n_gt = scores.len();
    let n_cand = scores.first().map_or(0, Vec::len);
    if n_gt == 0 || n_cand == 0 {
        return Assignment {
            pairs: Vec::new(),
            unmatched: (0..n_gt).collect(),
        };
    }
    let mut pairs = Vec::with_capacity(n_gt.min(n_cand));
    if n_gt <= n_cand {
        let cost: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|s| -s).collect()).collect();
        for (g, c) in min_cost_rows(&cost, n_gt, n_cand).into_iter().enumerate() {
            pairs.push((g, c, scores[g][c]));
        }
    } else {
        let cost: Vec<Vec<f64>> = (0..n_cand)
            .map(|c| (0..n_gt).map(|g| -scores[g][c]).collect())
            .collect();
        for (c, g) in min_cost_rows(&cost, n_cand, n_gt).into_iter().enumerate() {
            pairs.push((g, c, scores[g][c]));
        }
        pairs.sort_by_key(|p| p.0);
    }
    let unmatched = (0..n_gt).filter(|g| !pairs.iter().any(|p| p.0 == *g)).collect();
    Assignment { pairs, unmatched }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau_d: f64,
    pub tau_m: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            alpha: 0.8,
            beta: 0.2,
            tau_d: 0.5,
            tau_m: 0.8,
        }
    }
}

impl MatchConfig {
    /// The IoU-only matching arm.
    pub fn iou_only(self) -> Self {
        MatchConfig {
            alpha: 1.0,
            beta: 0.0,
            ..self
        }
    }
}

/// `S_match` for every (gt, candidate) pair.
pub fn score_matrix(
    gt_boxes: &[PixelBox],
    candidates: &[Candidate],
    pixel_sim: &[f64],
    cfg: &MatchConfig,
) -> Result<Vec<Vec<f64>>> {
    check_balance(cfg.alpha, cfg.beta)?;
    let dcons: Vec<f64> = candidates
        .iter()
        .map(|c| depth_consistency_score(&c.mask_prob, pixel_sim, cfg.tau_d))
        .collect();
    gt_boxes
        .iter()
        .map(|gt| {
            candidates
                .iter()
                .zip(&dcons)
                .map(|(c, &d)| matching_score(box_iou(gt, &c.bbox), d, c.pred_score, cfg.alpha, cfg.beta))
                .collect()
        })
        .collect()
}

/// Hungarian assignment under `S_match`, before reliability filtering.
pub fn match_candidates(
    gt_boxes: &[PixelBox],
    candidates: &[Candidate],
    pixel_sim: &[f64],
    cfg: &MatchConfig,
) -> Result<Assignment> {
    let scores = score_matrix(gt_boxes, candidates, pixel_sim, cfg)?;
    Ok(if candidates.is_empty() {
        Assignment {
            pairs: Vec::new(),
            unmatched: (0..gt_boxes.len()).collect(),
        }
    } else {
        hungarian(&scores)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    /// Binary mask.
    pub mask: Raster,
    pub score: f64,
    pub candidate: usize,
}

/// Reliable pseudo masks per ground truth: matched and scoring strictly above `tau_m`.
pub fn assign_pseudo_masks(
    gt_boxes: &[PixelBox],
    candidates: &[Candidate],
    pixel_sim: &[f64],
    cfg: &MatchConfig,
) -> Result<Vec<Option<PseudoLabel>>> {
    let assignment = match_candidates(gt_boxes, candidates, pixel_sim, cfg)?;
    let mut out = vec![None; gt_boxes.len()];
    for &(g, c, score) in &assignment.pairs {
        if score > cfg.tau_m {
            out[g] = Some(PseudoLabel {
                mask: candidates[c].mask_prob.threshold(MASK_THRESHOLD),
                score,
                candidate: c,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = PixelBox::new(0, 0, 2, 2).unwrap();
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &PixelBox::new(5, 5, 7, 7).unwrap()), 0.0);
        assert!((box_iou(&a, &PixelBox::new(1, 0, 3, 2).unwrap()) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(box_iou(&a, &PixelBox::EMPTY), 0.0);
    }

    #[test]
    fn depth_consistency_examples() {
        let m = Raster::new(2, 2, 1, vec![0.9, 0.6, 0.2, 0.8]).unwrap();
        assert_eq!(depth_consistency_score(&m, &[0.9; 4], 0.5), 1.0);
        assert_eq!(depth_consistency_score(&m, &[0.1; 4], 0.5), 0.0);
        // Hand arithmetic: weights 0.9*0.9=0.81, 0.6*0.3=0.18, 0.2*0.7=0.14, 0.8*0.4=0.32
        // above 0.5: 0.81 + 0.14 = 0.95; total 1.45
        let s = depth_consistency_score(&m, &[0.9, 0.3, 0.7, 0.4], 0.5);
        assert!((s - 0.95 / 1.45).abs() < 1e-15);
        assert_eq!(depth_consistency_score(&Raster::zeros(2, 2, 1), &[0.9; 4], 0.5), 0.0);
    }

    #[test]
    fn depth_consistency_is_scale_invariant() {
        let m = Raster::new(2, 2, 1, vec![0.9, 0.6, 0.2, 0.8]).unwrap();
        let sims = [0.9, 0.3, 0.7, 0.4];
        let a = depth_consistency_score(&m, &sims, 0.5);
        let b = depth_consistency_score(&m.map(|v| v * 0.37), &sims, 0.5);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn matching_score_examples() {
        assert_eq!(matching_score(0.7, 0.1, 0.9, 1.0, 0.0).unwrap(), 0.7);
        // Default weights leave nothing for the prediction score.
        let (a, b) = (0.8, 0.2);
        assert_eq!(pred_weight(a, b), 0.0);
        let lo = matching_score(0.5, 0.5, 0.0, a, b).unwrap();
        let hi = matching_score(0.5, 0.5, 1.0, a, b).unwrap();
        assert_eq!(lo, hi);
        for (a, b) in [(0.0, 0.0), (0.3, 0.3), (0.8, 0.2), (1.0, 0.0)] {
            assert!((matching_score(0.42, 0.42, 0.42, a, b).unwrap() - 0.42).abs() < 1e-15);
        }
        assert!(matching_score(0.5, 0.5, 0.5, 0.7, 0.4).is_err());
        assert!(matching_score(0.5, 0.5, 0.5, -0.1, 0.4).is_err());
    }

    #[test]
    fn hungarian_small_cases() {
        let a = hungarian(&[vec![0.3]]);
        assert_eq!(a.pairs, vec![(0, 0, 0.3)]);
        let a = hungarian(&[vec![0.9, 0.1], vec![0.8, 0.2]]);
        assert_eq!(a.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        assert!((a.total() - 1.1).abs() < 1e-15);
        let a = hungarian(&[vec![0.5], vec![0.9], vec![0.1]]);
        assert_eq!(a.pairs, vec![(1, 0, 0.9)]);
        assert_eq!(a.unmatched, vec![0, 2]);
        let a = hungarian(&[]);
        assert!(a.pairs.is_empty());
    }

    fn candidate(mask: Raster, score: f64) -> Candidate {
        let mut c = Candidate::new(mask.clone(), mask, Pixel::new(0, 0), 0, PredScore::MeanForeground);
        c.pred_score = score;
        c
    }

    #[test]
    fn perfect_candidate_is_reliable() {
        let b = PixelBox::new(1, 1, 4, 4).unwrap();
        let c = candidate(b.indicator(6, 6), 1.0);
        let out = assign_pseudo_masks(&[b], &[c], &[1.0; 36], &MatchConfig::default()).unwrap();
        let label = out[0].as_ref().unwrap();
        assert_eq!(label.score, 1.0);
        assert_eq!(label.mask, b.indicator(6, 6));
    }

    #[test]
    fn low_scores_are_filtered() {
        let b = PixelBox::new(1, 1, 4, 4).unwrap();
        // Box IoU 0.5 with S_dcons 0.5 gives S_match 0.5.
        let half = PixelBox::new(1, 1, 4, 4).unwrap();
        let c = candidate(half.indicator(6, 6), 0.5);
        let cfg = MatchConfig {
            alpha: 0.0,
            beta: 0.0,
            ..MatchConfig::default()
        };
        let out = assign_pseudo_masks(&[b], &[c], &[1.0; 36], &cfg).unwrap();
        assert!(out[0].is_none());
        assert!(assign_pseudo_masks(&[b], &[], &[1.0; 36], &cfg).unwrap()[0].is_none());
    }

    #[test]
    fn pred_score_strategies() {
        let m = Raster::new(1, 4, 1, vec![0.2, 0.6, 0.9, 0.4]).unwrap();
        assert!((PredScore::MeanForeground.score(&m) - 0.75).abs() < 1e-15);
        assert_eq!(PredScore::Peak.score(&m), 0.9);
        assert_eq!(PredScore::MeanForeground.score(&Raster::zeros(2, 2, 1)), 0.0);
    }
}

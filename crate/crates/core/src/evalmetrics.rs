//! Mask IoU, COCO-style mask AP and the JSON run report.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagegrid::Raster;
use crate::losses::{LossTerms, Phase};

/// `|pred & gt| / |pred | gt|` over binary masks (values > 0.5 count as set).
/// Two empty masks agree vacuously and score 1.
pub fn mask_iou(pred: &Raster, gt: &Raster) -> Result<f64> {
    pred.ensure_same_size(gt, "mask IoU")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone)]
pub struct Prediction {
    pub image_id: u64,
    pub category: u32,
    pub score: f64,
    pub mask: Raster,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub image_id: u64,
    pub category: u32,
    pub mask: Raster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// Mean over the requested thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Precomputed IoUs between the predictions and ground truths of one category.
struct CategoryEval {
    /// Prediction indices sorted by descending score (stable).
    order: Vec<usize>,
    preds: Vec<(u64, f64)>,
    gts: Vec<u64>,
    /// `ious[p][g]`, zero across images.
    ious: Vec<Vec<f64>>,
}

impl CategoryEval {
    fn new(preds: &[&Prediction], gts: &[&GroundTruth]) -> Result<Self> {
        let mut ious = Vec::with_capacity(preds.len());
        for p in preds {
            let row = gts
                .iter()
                .map(|g| if g.image_id == p.image_id { mask_iou(&p.mask, &g.mask) } else { Ok(0.0) })
                .collect::<Result<Vec<_>>>()?;
            ious.push(row);
        }
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap_or(Ordering::Equal));
        Ok(CategoryEval {
            order,
            preds: preds.iter().map(|p| (p.image_id, p.score)).collect(),
            gts: gts.iter().map(|g| g.image_id).collect(),
            ious,
        })
    }

    /// 101-point interpolated AP at one IoU threshold.
    fn ap_at(&self, threshold: f64) -> f64 {
        let npos = self.gts.len();
        let mut taken = vec![false; npos];
        let mut tp = 0usize;
        let mut precision = Vec::with_capacity(self.order.len());
        let mut recall = Vec::with_capacity(self.order.len());
        for (k, &p) in self.order.iter().enumerate() {
            // Best still-unmatched ground truth of the same image at or above the threshold.
            let mut best: Option<usize> = None;
            let mut best_iou = threshold.min(1.0 - 1e-10);
            for (g, &iou) in self.ious[p].iter().enumerate() {
                if taken[g] || self.gts[g] != self.preds[p].0 {
                    continue;
                }
                if iou >= best_iou {
                    best_iou = iou;
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                taken[g] = true;
                tp += 1;
            }
            precision.push(tp as f64 / (k + 1) as f64);
            recall.push(tp as f64 / npos as f64);
        }
        for i in (1..precision.len()).rev() {
            if precision[i] > precision[i - 1] {
                precision[i - 1] = precision[i];
            }
        }
        let mut sum = 0.0;
        for r in 0..RECALL_POINTS {
            let target = r as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&v| v < target);
            if idx < precision.len() {
                sum += precision[idx];
            }
        }
        sum / RECALL_POINTS as f64
    }
}

/// COCO-style mask AP: per category, predictions in descending score order are greedily
/// matched to the best free ground truth of the same image; precision is interpolated at
/// 101 recall points; results are averaged over categories that have ground truth, then
/// over thresholds. Returns zeros when no category has ground truth.
pub fn average_precision(preds: &[Prediction], gts: &[GroundTruth], thresholds: &[f64]) -> Result<ApSummary> {
    let mut categories: Vec<u32> = gts.iter().map(|g| g.category).collect();
    categories.sort_unstable();
    categories.dedup();
    let evals = categories
        .iter()
        .map(|&c| {
            let p: Vec<&Prediction> = preds.iter().filter(|p| p.category == c).collect();
            let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == c).collect();
            CategoryEval::new(&p, &g)
        })
        .collect::<Result<Vec<_>>>()?;
    if evals.is_empty() {
        return Ok(ApSummary {
            ap: 0.0,
            ap50: 0.0,
            ap75: 0.0,
        });
    }
    let at = |t: f64| evals.iter().map(|e| e.ap_at(t)).sum::<f64>() / evals.len() as f64;
    let ap = if thresholds.is_empty() {
        0.0
    } else {
        thresholds.iter().map(|&t| at(t)).sum::<f64>() / thresholds.len() as f64
    };
    Ok(ApSummary {
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
    })
}

/// One row of the loss trace; losses are means over scenes of per-scene sums over instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub terms: LossTerms,
    pub total: f64,
    /// Instances that received a reliable pseudo mask this step.
    pub reliable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub id: u64,
    pub instance_ious: Vec<f64>,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: Option<u64>,
    pub train: Option<u64>,
}

/// Everything a run reports. Wall-clock timing is kept out so reports are reproducible
/// byte for byte; it lives in the run manifest instead.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub command: String,
    pub seeds: Seeds,
    pub config: serde_json::Value,
    pub scenes: Vec<SceneMetrics>,
    pub mean_iou: Option<f64>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub loss_trace: Vec<TraceEntry>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn emit_report(report: &MetricsReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Mean of all instance IoUs across scenes, or `None` with no instances.
pub fn mean_instance_iou(scenes: &[SceneMetrics]) -> Option<f64> {
    let all: Vec<f64> = scenes.iter().flat_map(|s| s.instance_ious.iter().copied()).collect();
    if all.is_empty() {
        None
    } else {
        Some(all.iter().sum::<f64>() / all.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagegrid::PixelBox;

    fn boxed(x0: usize, y0: usize, x1: usize, y1: usize) -> Raster {
        PixelBox::new(x0, y0, x1, y1).unwrap().indicator(10, 10)
    }

    #[test]
    fn iou_examples() {
        let a = boxed(0, 0, 4, 4);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &boxed(5, 5, 9, 9)).unwrap(), 0.0);
        // 4x4 vs the same shifted by 2 columns: overlap 8, union 24.
        assert!((mask_iou(&a, &boxed(2, 0, 6, 4)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = Raster::zeros(10, 10, 1);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        assert!(mask_iou(&a, &Raster::zeros(3, 3, 1)).is_err());
    }

    fn pred(mask: Raster, score: f64) -> Prediction {
        Prediction {
            image_id: 0,
            category: 1,
            score,
            mask,
        }
    }

    fn gt(mask: Raster) -> GroundTruth {
        GroundTruth {
            image_id: 0,
            category: 1,
            mask,
        }
    }

    #[test]
    fn single_perfect_prediction() {
        let m = boxed(1, 1, 5, 5);
        let s = average_precision(&[pred(m.clone(), 0.9)], &[gt(m)], &coco_thresholds()).unwrap();
        assert_eq!(s, ApSummary { ap: 1.0, ap50: 1.0, ap75: 1.0 });
    }

    #[test]
    fn no_predictions() {
        let s = average_precision(&[], &[gt(boxed(1, 1, 5, 5))], &coco_thresholds()).unwrap();
        assert_eq!(s, ApSummary { ap: 0.0, ap50: 0.0, ap75: 0.0 });
    }

    #[test]
    fn perfect_plus_partial_prediction() {
        // Second gt covers 10 pixels; its prediction covers 6 of them: IoU exactly 0.6.
        let g1 = boxed(0, 0, 4, 4);
        let g2 = boxed(0, 8, 10, 9);
        let p2 = boxed(0, 8, 6, 9);
        assert_eq!(mask_iou(&p2, &g2).unwrap(), 0.6);
        let gts = [gt(g1.clone()), gt(g2)];

        // Perfect prediction ranked first. Above IoU 0.6 only the first is a hit:
        // precision 1 up to recall 0.5 (51 of 101 points), nothing beyond.
        let s = average_precision(&[pred(g1.clone(), 0.9), pred(p2.clone(), 0.8)], &gts, &coco_thresholds()).unwrap();
        assert_eq!(s.ap50, 1.0);
        assert_eq!(s.ap75, 51.0 / 101.0);
        let expected = (3.0 + 7.0 * 51.0 / 101.0) / 10.0;
        assert!((s.ap - expected).abs() < 1e-15);

        // Partial prediction ranked first: the hit arrives second, precision 1/2.
        let s = average_precision(&[pred(g1, 0.3), pred(p2, 0.8)], &gts, &coco_thresholds()).unwrap();
        assert_eq!(s.ap50, 1.0);
        assert_eq!(s.ap75, 51.0 * 0.5 / 101.0);
    }

    #[test]
    fn predictions_only_match_within_their_image() {
        let m = boxed(1, 1, 5, 5);
        let mut p = pred(m.clone(), 0.9);
        p.image_id = 1;
        let s = average_precision(&[p], &[gt(m)], &coco_thresholds()).unwrap();
        assert_eq!(s.ap50, 0.0);
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = MetricsReport::default();
        emit_report(&r, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), r);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"scenes\": []"));
    }
}

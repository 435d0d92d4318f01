//! Library-level pipeline checks: the report format is pinned by a golden file and a
//! short run on one easy scene must make clear progress.

use std::path::PathBuf;

use depthseg::evalmetrics::{
    average_precision, coco_thresholds, mask_iou, mean_instance_iou, read_report, GroundTruth, MetricsReport,
    Prediction, SceneMetrics, Seeds, TraceEntry,
};
use depthseg::imagegrid::Raster;
use depthseg::losses::{LossTerms, Phase};
use depthseg::scene::{generate_scene, SceneConfig};
use depthseg::trainer::{train, TrainConfig};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// 4x4 binary mask with the listed pixels set.
fn mask(on: &[(usize, usize)]) -> Raster {
    let mut m = Raster::zeros(4, 4, 1);
    for &(y, x) in on {
        m.set(y, x, 0, 1.0);
    }
    m
}

fn fixture_report() -> MetricsReport {
    let gt_a = mask(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
    let gt_b = mask(&[(2, 2), (2, 3), (3, 2), (3, 3)]);
    let gt_c = mask(&[(0, 3), (1, 3)]);
    let pred_a = mask(&[(0, 0), (0, 1), (1, 0)]);
    let pred_b = mask(&[(2, 2), (2, 3), (3, 2), (3, 3), (1, 2)]);
    let pred_c = mask(&[(1, 3), (2, 3)]);

    let gts = vec![
        GroundTruth { image_id: 1, category: 1, mask: gt_a.clone() },
        GroundTruth { image_id: 1, category: 2, mask: gt_b.clone() },
        GroundTruth { image_id: 2, category: 1, mask: gt_c.clone() },
    ];
    let preds = vec![
        Prediction { image_id: 1, category: 1, score: 0.9, mask: pred_a.clone() },
        Prediction { image_id: 1, category: 2, score: 0.75, mask: pred_b.clone() },
        Prediction { image_id: 2, category: 1, score: 0.5, mask: pred_c.clone() },
        Prediction { image_id: 2, category: 1, score: 0.25, mask: gt_a.clone() },
    ];
    let ap = average_precision(&preds, &gts, &coco_thresholds()).unwrap();

    let iou = |p: &Raster, g: &Raster| mask_iou(p, g).unwrap();
    let scenes = vec![
        SceneMetrics { id: 1, instance_ious: vec![iou(&pred_a, &gt_a), iou(&pred_b, &gt_b)], mean_iou: 0.0 },
        SceneMetrics { id: 2, instance_ious: vec![iou(&pred_c, &gt_c)], mean_iou: 0.0 },
    ]
    .into_iter()
    .map(|mut s| {
        s.mean_iou = s.instance_ious.iter().sum::<f64>() / s.instance_ious.len() as f64;
        s
    })
    .collect::<Vec<_>>();

    let terms = |k: f64| LossTerms {
        projection: 1.5 * k,
        color_pairwise: 0.25 * k,
        depth_consistency: 0.125 * k,
        instance_depth: 0.0625 * k,
        reliable_dice: 0.5 * k,
    };
    let loss_trace = vec![
        TraceEntry { step: 0, phase: Phase::Base, lr: 0.05, terms: terms(1.0), total: terms(1.0).total(Phase::Base, 4.0), reliable: 0 },
        TraceEntry { step: 1, phase: Phase::Distill, lr: 0.005, terms: terms(0.5), total: terms(0.5).total(Phase::Distill, 4.0), reliable: 2 },
    ];

    MetricsReport {
        command: "eval".into(),
        seeds: Seeds { data: Some(7), train: Some(0) },
        config: serde_json::json!({ "suite": "easy", "tau_m": 0.8 }),
        mean_iou: mean_instance_iou(&scenes),
        scenes,
        ap: Some(ap.ap),
        ap50: Some(ap.ap50),
        ap75: Some(ap.ap75),
        loss_trace,
    }
}

#[test]
fn fixture_report_matches_golden_file() {
    let report = fixture_report();
    // Worked by hand: category 2 is a perfect detection up to IoU 0.8; category 1
    // reaches recall 1/2 at precision 1 up to IoU 0.75, i.e. 51 of 101 recall points.
    let half = 51.0 / 101.0;
    assert_eq!(report.scenes[0].instance_ious, vec![0.75, 0.8]);
    assert!((report.scenes[1].instance_ious[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((report.ap50.unwrap() - (1.0 + half) / 2.0).abs() < 1e-12);
    assert!((report.ap75.unwrap() - (1.0 + half) / 2.0).abs() < 1e-12);
    assert!((report.ap.unwrap() - (0.7 + 0.6 * half) / 2.0).abs() < 1e-12);
    assert_eq!(report.loss_trace[1].total, 0.96875 + 4.0 * 0.25);
    let text = report.to_json().unwrap();
    let path = fixture("golden_report.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
    }
    let golden = std::fs::read_to_string(&path).expect("golden report present (regenerate with UPDATE_GOLDEN=1)");
    assert_eq!(text, golden);
    assert_eq!(read_report(&path).unwrap(), report);
}

#[test]
fn one_easy_scene_halves_its_loss_in_300_steps() {
    let scene = generate_scene(&SceneConfig::easy(), 11).unwrap().training_view(0);
    let config = TrainConfig {
        total_steps: 300,
        decay_steps: vec![250],
        distill_start: 300,
        ..TrainConfig::default()
    };
    let (_, report) = train(std::slice::from_ref(&scene), &config).unwrap();
    let trace = &report.loss_trace;
    assert_eq!(trace.len(), 300);
    let first = trace[0].total;
    let last = trace[299].total;
    assert!(last < 0.5 * first, "loss went from {first} to {last}");
}

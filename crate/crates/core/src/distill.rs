//! EMA teacher and the self-distillation step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagegrid::{Pixel, PixelBox, Raster};
use crate::losses::{LossTerms, Phase};
use crate::maskhead::{HeadParams, MaskHead};
use crate::matching::{assign_pseudo_masks, Candidate, MatchConfig, PredScore, PseudoLabel};
use crate::objective::{instance_objective, ObjectiveConfig, SceneLevel};

/// EMA copies of the per-instance head parameters, keyed by the instances' anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub anchors: Vec<Pixel>,
    pub params: Vec<HeadParams>,
    pub ema_rate: f64,
    /// (height, width) the teacher always runs at.
    pub input_size: (usize, usize),
}

impl TeacherState {
    /// Teacher initialised as a copy of the student.
    pub fn from_student(anchors: &[Pixel], student: &[HeadParams], ema_rate: f64, input_size: (usize, usize)) -> Result<Self> {
        if anchors.len() != student.len() {
            return Err(Error::Shape(format!(
                "{} anchors for {} parameter sets",
                anchors.len(),
                student.len()
            )));
        }
        if !(ema_rate > 0.0 && ema_rate < 1.0) {
            return Err(Error::Config(format!("EMA rate must lie in (0, 1), got {ema_rate}")));
        }
        Ok(TeacherState {
            anchors: anchors.to_vec(),
            params: student.to_vec(),
            ema_rate,
            input_size,
        })
    }
}

/// `t <- rate * t + (1 - rate) * s`, evaluated as `t + (1 - rate) (s - t)` so that a
/// teacher equal to the student stays bit-identical.
pub fn ema_update_in_place(teacher: &mut TeacherState, student_anchors: &[Pixel], student: &[HeadParams]) -> Result<()> {
    if student_anchors != teacher.anchors.as_slice() || student.len() != teacher.params.len() {
        return Err(Error::Shape("teacher and student instance sets differ".into()));
    }
    let w = 1.0 - teacher.ema_rate;
    for (t, s) in teacher.params.iter_mut().zip(student) {
        if t.len() != s.len() {
            return Err(Error::Shape("teacher and student parameter lengths differ".into()));
        }
        for (ti, si) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *ti += w * (si - *ti);
        }
    }
    Ok(())
}

pub fn ema_update(teacher: &TeacherState, student_anchors: &[Pixel], student: &[HeadParams]) -> Result<TeacherState> {
    let mut next = teacher.clone();
    ema_update_in_place(&mut next, student_anchors, student)?;
    Ok(next)
}

/// Anchors on the stride lattice `k * stride + stride / 2` inside `bbox`, row-major, plus the
/// box centre when it is not a lattice point.
pub fn anchor_lattice(bbox: &PixelBox, stride: usize) -> Vec<Pixel> {
    if bbox.is_empty() {
        return Vec::new();
    }
    let stride = stride.max(1);
    let off = stride / 2;
    let axis = |lo: usize, hi: usize| -> Vec<usize> {
        let first = if lo <= off { 0 } else { (lo - off).div_ceil(stride) };
        (first..)
            .map(|k| k * stride + off)
            .take_while(|&v| v < hi)
            .collect()
    };
    let xs = axis(bbox.x0, bbox.x1);
    let ys = axis(bbox.y0, bbox.y1);
    let mut out: Vec<Pixel> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| Pixel::new(x, y)))
        .collect();
    let c = bbox.center();
    if !out.contains(&c) {
        out.push(c);
    }
    out
}

/// Teacher predictions at every lattice anchor of every ground-truth box, each produced with
/// the teacher parameters of that box's instance. `level` must be at the teacher's size.
pub fn teacher_candidates(
    level: &SceneLevel,
    teacher: &TeacherState,
    stride: usize,
    head: MaskHead,
    strategy: PredScore,
) -> Result<Vec<Candidate>> {
    if (level.height, level.width) != teacher.input_size {
        return Err(Error::Shape(format!(
            "teacher runs at {:?} but the scene level is {}x{}",
            teacher.input_size, level.height, level.width
        )));
    }
    if teacher.params.len() != level.instance_count() {
        return Err(Error::Shape("teacher instance count differs from the scene".into()));
    }
    let mut out = Vec::new();
    for (i, bbox) in level.boxes.iter().enumerate() {
        for anchor in anchor_lattice(bbox, stride) {
            let stack = level.stack_at(anchor)?;
            let o = head.forward(&stack, &teacher.params[i])?;
            out.push(Candidate::new(o.mask_prob, o.depth_pred, anchor, i, strategy));
        }
    }
    Ok(out)
}

/// Reliable pseudo masks for the scene's instances, at the teacher's resolution.
pub fn pseudo_labels(
    teacher_level: &SceneLevel,
    teacher: &TeacherState,
    stride: usize,
    obj: &ObjectiveConfig,
    matching: &MatchConfig,
    strategy: PredScore,
) -> Result<Vec<Option<PseudoLabel>>> {
    let candidates = teacher_candidates(teacher_level, teacher, stride, obj.head(), strategy)?;
    assign_pseudo_masks(&teacher_level.boxes, &candidates, &teacher_level.depth_pixel_sim, matching)
}

/// Pseudo mask resampled to a student level and re-binarised.
pub fn pseudo_at_level(label: &PseudoLabel, height: usize, width: usize) -> Result<Raster> {
    if (label.mask.height(), label.mask.width()) == (height, width) {
        return Ok(label.mask.clone());
    }
    Ok(crate::imagegrid::resize_bilinear(&label.mask, height, width)?.threshold(0.5))
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    /// Per instance.
    pub terms: Vec<LossTerms>,
    pub grads: Vec<Vec<f64>>,
    pub reliable: usize,
}

/// One distillation-phase evaluation of a scene: teacher candidates at full size, Hungarian
/// pseudo labels, then base losses plus `gamma` times the reliable dice on the student level.
/// Teacher outputs are constants here; no gradient reaches the teacher.
pub fn distill_step(
    student_level: &SceneLevel,
    teacher_level: &SceneLevel,
    student: &[HeadParams],
    teacher: &TeacherState,
    stride: usize,
    obj: &ObjectiveConfig,
    matching: &MatchConfig,
    strategy: PredScore,
) -> Result<DistillOutcome> {
    let labels = pseudo_labels(teacher_level, teacher, stride, obj, matching, strategy)?;
    let mut terms = Vec::with_capacity(student.len());
    let mut grads = Vec::with_capacity(student.len());
    let mut reliable = 0;
    for (i, params) in student.iter().enumerate() {
        let target = match &labels[i] {
            Some(l) => {
                reliable += 1;
                Some(pseudo_at_level(l, student_level.height, student_level.width)?)
            }
            None => None,
        };
        let e = instance_objective(student_level, i, params, target.as_ref(), Phase::Distill, obj)?;
        terms.push(e.terms);
        grads.push(e.grad);
    }
    Ok(DistillOutcome { terms, grads, reliable })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    #[test]
    fn ema_examples() {
        let a = vec![Pixel::new(1, 1)];
        let s = HeadParams::init(1, 0.1);
        let t = TeacherState::from_student(&a, std::slice::from_ref(&s), 0.999, (4, 4)).unwrap();
        assert_eq!(ema_update(&t, &a, std::slice::from_ref(&s)).unwrap(), t);

        let mut one = HeadParams::zeros();
        one.as_mut_slice().fill(1.0);
        let t = TeacherState::from_student(&a, &[one], 0.999, (4, 4)).unwrap();
        let next = ema_update(&t, &a, &[HeadParams::zeros()]).unwrap();
        assert!(next.params[0].as_slice().iter().all(|&v| (v - 0.999).abs() < 1e-15));

        assert!(ema_update(&t, &[Pixel::new(0, 0)], &[HeadParams::zeros()]).is_err());
        assert!(TeacherState::from_student(&a, &[HeadParams::zeros()], 1.0, (4, 4)).is_err());
    }

    #[test]
    fn lattice_counts() {
        // Lattice points at 4, 12, 20, ...
        let b = PixelBox::new(3, 3, 21, 13).unwrap();
        let pts = anchor_lattice(&b, 8);
        // x in {4, 12, 20}, y in {4, 12}; centre (11, 7) is off-lattice.
        assert_eq!(pts.len(), 3 * 2 + 1);
        assert_eq!(*pts.last().unwrap(), Pixel::new(11, 7));

        let tiny = PixelBox::new(5, 5, 7, 7).unwrap();
        assert_eq!(anchor_lattice(&tiny, 8), vec![Pixel::new(5, 5)]);

        // Centre on the lattice is not duplicated.
        let b = PixelBox::new(0, 0, 9, 9).unwrap();
        assert_eq!(b.center(), Pixel::new(4, 4));
        assert_eq!(anchor_lattice(&b, 8), vec![Pixel::new(4, 4)]);
    }

    #[test]
    fn teacher_equal_to_student_reproduces_student_forward() {
        let obj = ObjectiveConfig::default();
        let s = generate_scene(&SceneConfig::easy(), 4).unwrap().training_view(0);
        let level = SceneLevel::full(&s, &obj).unwrap();
        let student: Vec<HeadParams> = (0..level.instance_count()).map(|i| HeadParams::init(i as u64, 0.1)).collect();
        let t = TeacherState::from_student(&level.anchors, &student, 0.999, (level.height, level.width)).unwrap();
        let cands = teacher_candidates(&level, &t, 8, obj.head(), PredScore::MeanForeground).unwrap();
        for c in cands.iter().filter(|c| c.anchor == level.anchors[c.source]) {
            let o = obj.head().forward(&level.stacks[c.source], &student[c.source]).unwrap();
            assert_eq!(c.mask_prob, o.mask_prob);
        }
        assert!(cands.len() >= level.instance_count());
    }

    #[test]
    fn filtered_candidates_reduce_to_base_loss() {
        let obj = ObjectiveConfig::default();
        let s = generate_scene(&SceneConfig::easy(), 4).unwrap().training_view(0);
        let level = SceneLevel::full(&s, &obj).unwrap();
        let student: Vec<HeadParams> = (0..level.instance_count()).map(|i| HeadParams::init(i as u64, 0.1)).collect();
        let t = TeacherState::from_student(&level.anchors, &student, 0.999, (level.height, level.width)).unwrap();
        let strict = MatchConfig {
            tau_m: 1.0,
            ..MatchConfig::default()
        };
        let out = distill_step(&level, &level, &student, &t, 8, &obj, &strict, PredScore::MeanForeground).unwrap();
        assert_eq!(out.reliable, 0);
        let mut base = LossTerms::default();
        for (i, p) in student.iter().enumerate() {
            let e = instance_objective(&level, i, p, None, Phase::Base, &obj).unwrap();
            assert_eq!(e.grad, out.grads[i]);
            base += e.terms;
        }
        let summed = out.terms.iter().fold(LossTerms::default(), |a, &b| a + b);
        assert_eq!(base.total(Phase::Base, 4.0), summed.total(Phase::Distill, 4.0));
    }
}

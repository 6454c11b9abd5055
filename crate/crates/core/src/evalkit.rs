//! Accuracy at IoU thresholds, mean accuracy, and the non-learned
//! gaze/center baselines.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchorgeom::iou;
use crate::netmodel::Detection;
use crate::scenesim::SceneObject;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no records to evaluate")]
    Empty,
}

/// 0.50, 0.55, ..., 0.95.
pub fn thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Class must match and IoU must reach `t` (boundary inclusive).
pub fn is_correct(det: &Detection, gt: &SceneObject, t: f64) -> bool {
    det.class_id == gt.class_id && iou(&det.bbox, &gt.bbox) >= t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub detection: Detection,
    pub gt: SceneObject,
    /// Normalized (x, y).
    pub gaze: (f64, f64),
    /// Every object of the query frame; `gt` is among them.
    pub objects: Vec<SceneObject>,
    pub gt_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: [f64; 10],
    pub acc_50: f64,
    pub acc_75: f64,
    pub m_acc: f64,
    pub count: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "count = {}", self.count)?;
        for (t, a) in thresholds().iter().zip(&self.acc) {
            writeln!(f, "acc@{t:.2} = {a:.6}")?;
        }
        writeln!(f, "acc_50 = {:.6}", self.acc_50)?;
        writeln!(f, "acc_75 = {:.6}", self.acc_75)?;
        write!(f, "m_acc = {:.6}", self.m_acc)
    }
}

pub fn mean_accuracy(records: &[EvalRecord]) -> Result<MetricsReport, EvalError> {
    let dets: Vec<(Detection, SceneObject)> = records.iter().map(|r| (r.detection, r.gt)).collect();
    accuracy_of(&dets)
}

fn accuracy_of(pairs: &[(Detection, SceneObject)]) -> Result<MetricsReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = pairs.len() as f64;
    let ts = thresholds();
    let acc: [f64; 10] = std::array::from_fn(|k| pairs.iter().filter(|(d, g)| is_correct(d, g, ts[k])).count() as f64 / n);
    Ok(MetricsReport { acc, acc_50: acc[0], acc_75: acc[5], m_acc: acc.iter().sum::<f64>() / 10.0, count: pairs.len() })
}

/// `1/k` when the gaze falls in `k` boxes including the ground truth, else 0.
pub fn gaze_hit_score(gaze: (f64, f64), objects: &[SceneObject], gt_index: usize) -> f64 {
    let hits: Vec<usize> = (0..objects.len()).filter(|&i| objects[i].bbox.contains(gaze.0, gaze.1)).collect();
    if hits.contains(&gt_index) {
        1.0 / hits.len() as f64
    } else {
        0.0
    }
}

fn nearest_center(p: (f64, f64), objects: &[SceneObject]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, o) in objects.iter().enumerate() {
        let d = (o.bbox.cx - p.0).hypot(o.bbox.cy - p.1);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Object whose box center is nearest the gaze; lowest index on ties.
pub fn gaze_closest(gaze: (f64, f64), objects: &[SceneObject]) -> usize {
    nearest_center(gaze, objects)
}

/// Object nearest the frame center.
pub fn center_baseline(objects: &[SceneObject]) -> usize {
    nearest_center((0.5, 0.5), objects)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    /// Mean gaze-hit score.
    pub gaze_hit: f64,
    pub gaze_closest: MetricsReport,
    pub center: MetricsReport,
}

impl fmt::Display for BaselineReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gaze_hit = {:.6}", self.gaze_hit)?;
        writeln!(f, "gaze_closest.acc_50 = {:.6}", self.gaze_closest.acc_50)?;
        writeln!(f, "gaze_closest.m_acc = {:.6}", self.gaze_closest.m_acc)?;
        writeln!(f, "center.acc_50 = {:.6}", self.center.acc_50)?;
        write!(f, "center.m_acc = {:.6}", self.center.m_acc)
    }
}

/// Scores the gaze and center baselines on the ground-truth object lists.
pub fn baseline_report(records: &[EvalRecord]) -> Result<BaselineReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let as_det = |o: &SceneObject| Detection { bbox: o.bbox, class_id: o.class_id, score: 1.0 };
    let hit = records.iter().map(|r| gaze_hit_score(r.gaze, &r.objects, r.gt_index)).sum::<f64>() / records.len() as f64;
    let closest: Vec<_> = records.iter().map(|r| (as_det(&r.objects[gaze_closest(r.gaze, &r.objects)]), r.gt)).collect();
    let center: Vec<_> = records.iter().map(|r| (as_det(&r.objects[center_baseline(&r.objects)]), r.gt)).collect();
    Ok(BaselineReport { gaze_hit: hit, gaze_closest: accuracy_of(&closest)?, center: accuracy_of(&center)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchorgeom::BBox;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_corners(x1, y1, x2, y2)
    }

    fn obj(b: BBox, c: usize) -> SceneObject {
        SceneObject { bbox: b, class_id: c }
    }

    fn det(b: BBox, c: usize) -> Detection {
        Detection { bbox: b, class_id: c, score: 1.0 }
    }

    fn record(d: Detection, gt: SceneObject) -> EvalRecord {
        EvalRecord { detection: d, gt, gaze: (0.5, 0.5), objects: vec![gt], gt_index: 0 }
    }

    #[test]
    fn exact_detection_is_correct_everywhere() {
        let b = corners(0.1, 0.2, 0.5, 0.6);
        for t in thresholds() {
            assert!(is_correct(&det(b, 1), &obj(b, 1), t));
        }
        assert!(!is_correct(&det(b, 0), &obj(b, 1), 0.5));
    }

    #[test]
    fn boundary_iou_counts() {
        let gt = obj(corners(0.0, 0.0, 1.0, 1.0), 2);
        let d = det(corners(0.0, 0.0, 0.6, 1.0), 2);
        assert_eq!(iou(&d.bbox, &gt.bbox), 0.6);
        assert!(is_correct(&d, &gt, 0.6));
        let r = mean_accuracy(&[record(d, gt)]).unwrap();
        assert!((r.m_acc - 0.3).abs() < 1e-15);
        let wrong = mean_accuracy(&[record(det(gt.bbox, 0), gt)]).unwrap();
        assert_eq!(wrong.m_acc, 0.0);
        assert_eq!(mean_accuracy(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn gaze_examples() {
        let a = obj(corners(0.0, 0.0, 0.4, 0.4), 0);
        let b = obj(corners(0.2, 0.2, 0.6, 0.6), 1);
        let c = obj(corners(0.7, 0.7, 0.9, 0.9), 2);
        let objs = [a, b, c];
        assert_eq!(gaze_hit_score((0.1, 0.1), &objs, 0), 1.0);
        assert_eq!(gaze_hit_score((0.3, 0.3), &objs, 0), 0.5);
        assert_eq!(gaze_hit_score((0.65, 0.1), &objs, 0), 0.0);
        assert_eq!(gaze_hit_score((0.8, 0.8), &objs, 0), 0.0);
        assert_eq!(gaze_closest((0.8, 0.8), &objs), 2);
        let twins = [obj(corners(0.0, 0.4, 0.2, 0.6), 0), obj(corners(0.8, 0.4, 1.0, 0.6), 1)];
        assert_eq!(gaze_closest((0.5, 0.5), &twins), 0);
    }

    #[test]
    fn center_examples() {
        let mid = obj(corners(0.4, 0.4, 0.6, 0.6), 0);
        assert_eq!(center_baseline(&[mid]), 0);
        let cornered = [
            obj(corners(0.0, 0.0, 0.1, 0.1), 0),
            obj(corners(0.9, 0.9, 1.0, 1.0), 0),
            mid,
            obj(corners(0.9, 0.0, 1.0, 0.1), 0),
        ];
        assert_eq!(center_baseline(&cornered), 2);
    }
}

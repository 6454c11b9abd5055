//! Anchor grids, IoU, offset coding and ground-truth matching.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Offset variances for the centre terms.
pub const CENTER_VARIANCE: f64 = 0.1;
/// Offset variances for the log-size terms.
pub const SIZE_VARIANCE: f64 = 0.2;
/// IoU threshold for multi-anchor matching.
pub const MULTI_MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("invalid anchor config: {0}")]
    InvalidConfig(String),
    #[error("box has non-positive size ({w} x {h})")]
    DegenerateBox { w: f64, h: f64 },
    #[error("anchor set is empty")]
    EmptyAnchors,
    #[error("threshold {0} outside (0, 1)")]
    BadThreshold(f64),
}

/// Axis-aligned box in centre-size form, normalised to the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1 }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Intersection with the unit frame.
    pub fn clipped(&self) -> BBox {
        let [x1, y1, x2, y2] = self.corners();
        let (x1, y1) = (x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        let (x2, y2) = (x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        BBox::from_corners(x1, y1, x2.max(x1), y2.max(y1))
    }

    /// Closed-box containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let (sa, sb) = ((ax2 - ax1) * (ay2 - ay1), (bx2 - bx1) * (by2 - by1));
    // nested and identical boxes come out exact this way
    let union = sa.max(sb) + (sa.min(sb) - inter);
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// SSD-style prior layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Input resolution `(h, w)`.
    pub resolution: (usize, usize),
    /// Feature-grid sizes, largest first.
    pub grids: Vec<usize>,
    pub anchors_per_cell: Vec<usize>,
    /// Smallest and largest anchor scale (fraction of the frame).
    pub scale_range: (f64, f64),
    /// Extra aspect ratios per grid; each `r` also adds `1/r`.
    pub aspect_ratios: Vec<Vec<f64>>,
}

impl AnchorConfig {
    /// The 300x300 layout with six grids.
    pub fn ssd300() -> Self {
        Self {
            resolution: (300, 300),
            grids: vec![38, 19, 10, 5, 3, 1],
            anchors_per_cell: vec![4, 6, 6, 6, 4, 4],
            scale_range: (0.2, 0.9),
            aspect_ratios: vec![vec![2.0], vec![2.0, 3.0], vec![2.0, 3.0], vec![2.0, 3.0], vec![2.0], vec![2.0]],
        }
    }

    /// The 64x64 toy layout with four grids (380 anchors).
    pub fn toy() -> Self {
        Self {
            resolution: (64, 64),
            grids: vec![8, 4, 2, 1],
            anchors_per_cell: vec![4, 6, 6, 4],
            scale_range: (0.15, 0.9),
            aspect_ratios: vec![vec![2.0], vec![2.0, 3.0], vec![2.0, 3.0], vec![2.0]],
        }
    }

    /// Builds a config with the usual ratio sets for the given per-cell counts.
    pub fn with_grids(resolution: (usize, usize), grids: Vec<usize>, anchors_per_cell: Vec<usize>, scale_range: (f64, f64)) -> Self {
        let aspect_ratios = anchors_per_cell
            .iter()
            .map(|&k| if k == 6 { vec![2.0, 3.0] } else { vec![2.0] })
            .collect();
        Self { resolution, grids, anchors_per_cell, scale_range, aspect_ratios }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let bad = |m: String| Err(GeomError::InvalidConfig(m));
        if self.grids.is_empty() {
            return bad("grid list is empty".into());
        }
        if self.grids.contains(&0) {
            return bad("grid sizes must be positive".into());
        }
        if self.grids.windows(2).any(|w| w[0] <= w[1]) {
            return bad(format!("grid sizes must be strictly descending: {:?}", self.grids));
        }
        if self.anchors_per_cell.len() != self.grids.len() || self.aspect_ratios.len() != self.grids.len() {
            return bad("anchors_per_cell and aspect_ratios need one entry per grid".into());
        }
        for (k, (&n, ratios)) in self.anchors_per_cell.iter().zip(&self.aspect_ratios).enumerate() {
            if n != 4 && n != 6 {
                return bad(format!("anchors per cell must be 4 or 6, grid {k} has {n}"));
            }
            if 2 + 2 * ratios.len() != n {
                return bad(format!("grid {k}: {} ratios do not give {n} anchors", ratios.len()));
            }
            if ratios.iter().any(|r| !(*r > 0.0)) {
                return bad(format!("grid {k}: aspect ratios must be positive"));
            }
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("bad scale range {:?}", self.scale_range));
        }
        Ok(())
    }

    /// Closed-form anchor count: sum of grid^2 * per-cell.
    pub fn anchor_count(&self) -> usize {
        self.grids.iter().zip(&self.anchors_per_cell).map(|(g, k)| g * g * k).sum()
    }

    /// Scale of grid `k`, linearly spaced over the scale range.
    pub fn scale(&self, k: usize) -> f64 {
        let (lo, hi) = self.scale_range;
        let m = self.grids.len();
        if m == 1 {
            return lo;
        }
        lo + (hi - lo) * k as f64 / (m - 1) as f64
    }

    /// Start offset of each grid inside the flattened anchor list.
    pub fn grid_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.grids.len());
        let mut acc = 0;
        for (g, k) in self.grids.iter().zip(&self.anchors_per_cell) {
            off.push(acc);
            acc += g * g * k;
        }
        off
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    pub config: AnchorConfig,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn get(&self, i: usize) -> &BBox {
        &self.boxes[i]
    }
}

/// Generates anchors grid-major, then row-major over cells, then per ratio.
pub fn generate_anchors(config: &AnchorConfig) -> Result<AnchorSet, GeomError> {
    config.validate()?;
    let mut boxes = Vec::with_capacity(config.anchor_count());
    let m = config.grids.len();
    for (k, &g) in config.grids.iter().enumerate() {
        let s = config.scale(k);
        let s_next = if k + 1 < m { config.scale(k + 1) } else { 1.0 };
        let s_extra = (s * s_next).sqrt();
        let mut shapes = vec![(s, s), (s_extra, s_extra)];
        for &r in &config.aspect_ratios[k] {
            let q = r.sqrt();
            shapes.push((s * q, s / q));
            shapes.push((s / q, s * q));
        }
        for row in 0..g {
            for col in 0..g {
                let cx = (col as f64 + 0.5) / g as f64;
                let cy = (row as f64 + 0.5) / g as f64;
                for &(w, h) in &shapes {
                    boxes.push(BBox::new(cx, cy, w, h));
                }
            }
        }
    }
    debug_assert_eq!(boxes.len(), config.anchor_count());
    Ok(AnchorSet { boxes, config: config.clone() })
}

/// Regression targets of `gt` relative to `anchor`.
pub fn encode_offsets(gt: &BBox, anchor: &BBox) -> Result<[f64; 4], GeomError> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(GeomError::DegenerateBox { w: gt.w, h: gt.h });
    }
    if !(anchor.w > 0.0 && anchor.h > 0.0) {
        return Err(GeomError::DegenerateBox { w: anchor.w, h: anchor.h });
    }
    Ok([
        (gt.cx - anchor.cx) / anchor.w / CENTER_VARIANCE,
        (gt.cy - anchor.cy) / anchor.h / CENTER_VARIANCE,
        (gt.w / anchor.w).ln() / SIZE_VARIANCE,
        (gt.h / anchor.h).ln() / SIZE_VARIANCE,
    ])
}

pub fn decode_offsets(offsets: &[f64; 4], anchor: &BBox) -> BBox {
    BBox {
        cx: anchor.cx + offsets[0] * CENTER_VARIANCE * anchor.w,
        cy: anchor.cy + offsets[1] * CENTER_VARIANCE * anchor.h,
        w: anchor.w * (offsets[2] * SIZE_VARIANCE).exp(),
        h: anchor.h * (offsets[3] * SIZE_VARIANCE).exp(),
    }
}

/// Result of one-best matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestMatch {
    pub index: usize,
    pub iou: f64,
    /// Set when no anchor overlaps the box at all.
    pub no_overlap: bool,
}

/// Highest-IoU anchor, lowest index on ties.
pub fn match_one_best(gt: &BBox, anchors: &AnchorSet) -> Result<BestMatch, GeomError> {
    if anchors.is_empty() {
        return Err(GeomError::EmptyAnchors);
    }
    let mut best = BestMatch { index: 0, iou: iou(gt, &anchors.boxes[0]), no_overlap: false };
    for (i, a) in anchors.boxes.iter().enumerate().skip(1) {
        let v = iou(gt, a);
        if v > best.iou {
            best.index = i;
            best.iou = v;
        }
    }
    best.no_overlap = best.iou <= 0.0;
    Ok(best)
}

/// All anchors with IoU at or above `threshold`, plus the one-best anchor.
/// Sorted ascending.
pub fn match_multi(gt: &BBox, anchors: &AnchorSet, threshold: f64) -> Result<Vec<usize>, GeomError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(GeomError::BadThreshold(threshold));
    }
    let best = match_one_best(gt, anchors)?.index;
    Ok(anchors
        .boxes
        .iter()
        .enumerate()
        .filter(|(i, a)| *i == best || iou(gt, a) >= threshold)
        .map(|(i, _)| i)
        .collect())
}

/// The `ratio * |positives|` highest-loss non-positive anchors, ties broken
/// by lower index. Sorted ascending.
pub fn mine_hard_negatives(per_anchor_losses: &[f64], positives: &[usize], ratio: usize) -> Vec<usize> {
    if positives.is_empty() || ratio == 0 {
        return Vec::new();
    }
    let mut is_pos = vec![false; per_anchor_losses.len()];
    for &p in positives {
        if p < is_pos.len() {
            is_pos[p] = true;
        }
    }
    let mut cand: Vec<usize> = (0..per_anchor_losses.len()).filter(|&i| !is_pos[i]).collect();
    cand.sort_by(|&a, &b| per_anchor_losses[b].total_cmp(&per_anchor_losses[a]).then(a.cmp(&b)));
    cand.truncate(ratio * positives.len());
    cand.sort_unstable();
    cand
}

/// Matching result for one ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub positives: Vec<usize>,
    pub offsets: Vec<[f64; 4]>,
    pub class_id: usize,
    pub negatives: Vec<usize>,
}

impl MatchResult {
    pub fn n_pos(&self) -> usize {
        self.positives.len()
    }
}

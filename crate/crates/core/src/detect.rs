//! Gaussian-guided box detection: foreground filtering, a per-Gaussian
//! regression head, box decoding, rotated NMS, target assignment and the
//! regression/confidence losses.

use std::f64::consts::PI;

use rayon::prelude::*;
use thiserror::Error;

use crate::eval::box_iou_rotated;
use crate::gaussian::GaussianSet;
use crate::nn::{mlp_forward, mlp_layout, sigmoid, NnError, WeightSet};
use crate::tensorio::{format_box_record, parse_box_records, AnnotationError, BoxAnnotation};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("foreground category {id} is not below K = {k}")]
    BadCategory { id: usize, k: usize },
    #[error("{raw} raw vectors for {gaussians} gaussians")]
    Misaligned { raw: usize, gaussians: usize },
}

/// A yaw-rotated box; yaw turns the footprint about +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub category_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub confidence: f64,
}

impl Box3D {
    pub fn from_annotation(a: &BoxAnnotation, confidence: f64) -> Self {
        Self {
            category_id: a.category_id,
            center: a.center,
            size: a.size,
            yaw: a.yaw,
            confidence,
        }
    }

    pub fn annotation(&self) -> BoxAnnotation {
        BoxAnnotation {
            category_id: self.category_id,
            center: self.center,
            size: self.size,
            yaw: self.yaw,
        }
    }

    /// `true` when `p` lies inside or on the box.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy, dz) = (p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.size[0] / 2.0 && ly.abs() <= self.size[1] / 2.0 && dz.abs() <= self.size[2] / 2.0
    }
}

/// Detections in annotation text with a trailing confidence field.
pub fn format_detections(boxes: &[Box3D]) -> String {
    boxes
        .iter()
        .map(|b| format_box_record(&b.annotation(), Some(b.confidence)) + "\n")
        .collect()
}

pub fn parse_detections(text: &str, num_categories: usize) -> Result<Vec<Box3D>, AnnotationError> {
    Ok(parse_box_records(text, num_categories, true)?
        .into_iter()
        .map(|(a, c)| Box3D::from_annotation(&a, c.unwrap_or(1.0)))
        .collect())
}

/// Keeps Gaussians whose argmax category (ties to the lowest id) is in
/// `foreground`.
pub fn filter_foreground(gs: &GaussianSet, foreground: &[usize]) -> Result<GaussianSet, DetectError> {
    let k = gs.num_categories;
    if let Some(&id) = foreground.iter().find(|&&id| id >= k) {
        return Err(DetectError::BadCategory { id, k });
    }
    let kept = gs
        .gaussians
        .iter()
        .filter(|g| foreground.contains(&g.argmax_category()))
        .cloned()
        .collect();
    Ok(gs.with_gaussians(kept))
}

/// Every category except the background id `K - 1`.
pub fn default_foreground(num_categories: usize) -> Vec<usize> {
    (0..num_categories.saturating_sub(1)).collect()
}

pub const HEAD: &str = "head";
/// `[dc(3), log-size(3), sin yaw, cos yaw, confidence logit]`.
pub const HEAD_OUT: usize = 9;

pub fn head_layout(feature_dim: usize, hidden: usize, depth: usize) -> Vec<(String, Vec<usize>)> {
    mlp_layout(HEAD, feature_dim, hidden, depth, HEAD_OUT)
}

pub fn head_forward(gs: &GaussianSet, w: &WeightSet) -> Result<Vec<[f64; HEAD_OUT]>, DetectError> {
    gs.gaussians
        .par_iter()
        .map(|g| {
            let out = mlp_forward(w, HEAD, &g.feature)?;
            out.as_slice().try_into().map_err(|_| {
                DetectError::Nn(NnError::InputDim {
                    name: HEAD.into(),
                    expected: HEAD_OUT,
                    actual: out.len(),
                })
            })
        })
        .collect()
}

/// `atan2(s, c)` with `atan2(0, 0) = 0`.
pub fn yaw_from(s: f64, c: f64) -> f64 {
    if s == 0.0 && c == 0.0 {
        0.0
    } else {
        s.atan2(c).clamp(-PI, PI)
    }
}

pub fn decode_boxes(gs: &GaussianSet, raw: &[[f64; HEAD_OUT]]) -> Result<Vec<Box3D>, DetectError> {
    if raw.len() != gs.len() {
        return Err(DetectError::Misaligned {
            raw: raw.len(),
            gaussians: gs.len(),
        });
    }
    Ok(gs
        .gaussians
        .iter()
        .zip(raw)
        .map(|(g, r)| Box3D {
            category_id: g.argmax_category(),
            center: [0, 1, 2].map(|i| g.center[i] + r[i]),
            size: [0, 1, 2].map(|i| r[3 + i].exp()),
            yaw: yaw_from(r[6], r[7]),
            confidence: sigmoid(r[8]),
        })
        .collect())
}

/// Greedy per-category NMS in descending confidence (ties to the lower
/// index). A box is dropped when its IoU with an already kept box of its
/// category exceeds `iou_threshold`; at most `max_keep` survive per
/// category. Survivors keep their input order.
pub fn nms_rotated(boxes: &[Box3D], iou_threshold: f64, max_keep: usize) -> Vec<Box3D> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[a]
            .category_id
            .cmp(&boxes[b].category_id)
            .then(boxes[b].confidence.total_cmp(&boxes[a].confidence))
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; boxes.len()];
    let mut kept: Vec<usize> = Vec::new();
    let mut current = usize::MAX;
    for i in order {
        let b = &boxes[i];
        if b.category_id != current {
            current = b.category_id;
            kept.clear();
        }
        if kept.len() >= max_keep {
            continue;
        }
        if kept.iter().all(|&j| box_iou_rotated(&boxes[j], b) <= iou_threshold) {
            kept.push(i);
            keep[i] = true;
        }
    }
    boxes.iter().zip(&keep).filter(|(_, &k)| k).map(|(b, _)| *b).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetAssignment {
    /// Per Gaussian: the ground-truth box it regresses to, if any.
    pub matched: Vec<Option<usize>>,
}

impl TargetAssignment {
    pub fn positives(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// A Gaussian is positive when its center lies in at least one box; it is
/// matched to the containing box with the nearest center (ties to the
/// lower index).
pub fn assign_targets(gs: &GaussianSet, gt: &[BoxAnnotation]) -> TargetAssignment {
    let boxes: Vec<Box3D> = gt.iter().map(|a| Box3D::from_annotation(a, 1.0)).collect();
    let matched = gs
        .gaussians
        .iter()
        .map(|g| {
            let p = [g.center[0], g.center[1], g.center[2]];
            boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| b.contains(p))
                .map(|(i, b)| (i, dist2(p, b.center)))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((i, d)),
                })
                .map(|(i, _)| i)
        })
        .collect();
    TargetAssignment { matched }
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const CONF_EPS: f64 = 1e-6;

pub fn focal_loss(p: f64, positive: bool) -> f64 {
    let p = p.clamp(CONF_EPS, 1.0 - CONF_EPS);
    if positive {
        -FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * p.ln()
    } else {
        -(1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * (-p).ln_1p()
    }
}

/// The eight regression residuals of a decoded box against its target.
pub fn regression_residuals(b: &Box3D, t: &BoxAnnotation) -> [f64; 8] {
    [
        b.center[0] - t.center[0],
        b.center[1] - t.center[1],
        b.center[2] - t.center[2],
        b.size[0].ln() - t.size[0].ln(),
        b.size[1].ln() - t.size[1].ln(),
        b.size[2].ln() - t.size[2].ln(),
        b.yaw.sin() - t.yaw.sin(),
        b.yaw.cos() - t.yaw.cos(),
    ]
}

/// `(L_reg, L_conf)`: mean smooth-L1 over positives and their eight
/// residual channels (0 with no positives), and mean focal loss over all
/// boxes (0 with no boxes).
pub fn detection_loss(decoded: &[Box3D], assignment: &TargetAssignment, gt: &[BoxAnnotation]) -> Result<(f64, f64), DetectError> {
    if decoded.len() != assignment.matched.len() {
        return Err(DetectError::Misaligned {
            raw: decoded.len(),
            gaussians: assignment.matched.len(),
        });
    }
    let mut reg = 0.0;
    let mut positives = 0usize;
    let mut conf = 0.0;
    for (b, m) in decoded.iter().zip(&assignment.matched) {
        conf += focal_loss(b.confidence, m.is_some());
        if let Some(&t) = m.as_ref().and_then(|&i| gt.get(i)) {
            reg += regression_residuals(b, &t).iter().map(|&r| smooth_l1(r)).sum::<f64>();
            positives += 1;
        }
    }
    let l_reg = if positives == 0 { 0.0 } else { reg / (8 * positives) as f64 };
    let l_conf = if decoded.is_empty() { 0.0 } else { conf / decoded.len() as f64 };
    Ok((l_reg, l_conf))
}

pub fn total_loss(l_sem: f64, l_reg: f64, l_conf: f64) -> f64 {
    l_sem + l_reg + l_conf
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectParams {
    pub foreground: Vec<usize>,
    pub iou_threshold: f64,
    pub max_keep: usize,
}

impl DetectParams {
    pub fn new(num_categories: usize) -> Self {
        Self {
            foreground: default_foreground(num_categories),
            iou_threshold: 0.25,
            max_keep: 100,
        }
    }
}

/// Filter, head, decode and NMS in one call.
pub fn detect(gs: &GaussianSet, w: &WeightSet, p: &DetectParams) -> Result<Vec<Box3D>, DetectError> {
    let fg = filter_foreground(gs, &p.foreground)?;
    let raw = head_forward(&fg, w)?;
    let boxes = decode_boxes(&fg, &raw)?;
    Ok(nms_rotated(&boxes, p.iou_threshold, p.max_keep))
}

//! Rotated-box IoU, greedy matching, all-point AP and the mAP table.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::detect::Box3D;
use crate::tensorio::BoxAnnotation;

pub const CATEGORY_NAMES: [&str; 11] = [
    "bed", "chair", "sofa", "table", "desk", "dresser", "cabinet", "fridge", "sink", "lamp", "bathtub",
];
pub const THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("box with category {id} in scene {scene}, only {n} categories are evaluated")]
    Category { scene: usize, id: usize, n: usize },
}

type P2 = [f64; 2];

/// Footprint corners, counter-clockwise.
pub fn footprint(b: &Box3D) -> [P2; 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hx, hy) = (b.size[0] / 2.0, b.size[1] / 2.0);
    [[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]].map(|[x, y]| [b.center[0] + c * x - s * y, b.center[1] + s * x + c * y])
}

fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(p: &[P2]) -> f64 {
    let n = p.len();
    (0..n).map(|i| p[i][0] * p[(i + 1) % n][1] - p[(i + 1) % n][0] * p[i][1]).sum::<f64>() / 2.0
}

/// Sutherland-Hodgman: `subject` clipped to the convex counter-clockwise
/// polygon `clip`.
pub fn clip_polygon(subject: &[P2], clip: &[P2]) -> Vec<P2> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let dc = cross(a, b, cur);
            let dp = cross(a, b, prev);
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: P2, q: P2, dp: f64, dq: f64) -> P2 {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn volume(b: &Box3D) -> f64 {
    b.size[0] * b.size[1] * b.size[2]
}

pub fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    let za = (a.center[2] - a.size[2] / 2.0, a.center[2] + a.size[2] / 2.0);
    let zb = (b.center[2] - b.size[2] / 2.0, b.center[2] + b.size[2] / 2.0);
    let h = za.1.min(zb.1) - za.0.max(zb.0);
    if h <= 0.0 {
        return 0.0;
    }
    let poly = clip_polygon(&footprint(a), &footprint(b));
    if poly.len() < 3 {
        return 0.0;
    }
    polygon_area(&poly).max(0.0) * h
}

pub fn box_iou_rotated(a: &Box3D, b: &Box3D) -> f64 {
    let inter = intersection_volume(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = volume(a) + volume(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Flags for `preds` (taken in the given order): each prediction claims the
/// unmatched ground truth with the highest IoU at or above `threshold`
/// (ties to the lower index).
pub fn match_detections(preds: &[Box3D], gts: &[Box3D], threshold: f64) -> Vec<bool> {
    let ious: Vec<Vec<f64>> = preds
        .par_iter()
        .map(|p| gts.iter().map(|g| box_iou_rotated(p, g)).collect())
        .collect();
    let mut taken = vec![false; gts.len()];
    ious.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &iou) in row.iter().enumerate() {
                if !taken[j] && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            best.is_some()
        })
        .collect()
}

/// All-point interpolated AP; `None` when there is no ground truth.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let n = n_gt as f64;
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / n);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// One evaluated scene: predictions and ground truth.
pub type Scene = (Vec<Box3D>, Vec<BoxAnnotation>);

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub names: Vec<String>,
    pub thresholds: Vec<f64>,
    /// `ap[t][c]`, `None` for categories without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    /// Per threshold; `None` when no category has ground truth.
    pub map: Vec<Option<f64>>,
    pub n_gt: Vec<usize>,
    pub n_pred: Vec<usize>,
}

/// Names for `n` evaluated categories: the standard eleven when `n == 11`,
/// `c0, c1, ...` otherwise.
pub fn category_names(n: usize) -> Vec<String> {
    if n == CATEGORY_NAMES.len() {
        CATEGORY_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("c{i}")).collect()
    }
}

/// Matches each scene per category (predictions by descending confidence,
/// ties to the lower index), pools flags across scenes by confidence and
/// integrates AP per category.
pub fn map_report(scenes: &[Scene], names: &[String], thresholds: &[f64]) -> Result<EvalReport, EvalError> {
    let n = names.len();
    for (s, (preds, gts)) in scenes.iter().enumerate() {
        let ids = preds.iter().map(|b| b.category_id).chain(gts.iter().map(|g| g.category_id));
        if let Some(id) = ids.into_iter().find(|&id| id >= n) {
            return Err(EvalError::Category { scene: s, id, n });
        }
    }
    let mut n_gt = vec![0; n];
    let mut n_pred = vec![0; n];
    for (preds, gts) in scenes {
        preds.iter().for_each(|b| n_pred[b.category_id] += 1);
        gts.iter().for_each(|g| n_gt[g.category_id] += 1);
    }
    let mut ap = Vec::new();
    let mut map = Vec::new();
    for &t in thresholds {
        let row: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let mut pooled: Vec<(f64, bool)> = Vec::new();
                for (preds, gts) in scenes {
                    let mut p: Vec<Box3D> = preds.iter().filter(|b| b.category_id == c).copied().collect();
                    p.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
                    let g: Vec<Box3D> = gts
                        .iter()
                        .filter(|g| g.category_id == c)
                        .map(|g| Box3D::from_annotation(g, 1.0))
                        .collect();
                    let flags = match_detections(&p, &g, t);
                    pooled.extend(p.iter().map(|b| b.confidence).zip(flags));
                }
                pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
                let flags: Vec<bool> = pooled.into_iter().map(|(_, f)| f).collect();
                average_precision(&flags, n_gt[c])
            })
            .collect();
        let present: Vec<f64> = row.iter().flatten().copied().collect();
        map.push((!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64));
        ap.push(row);
    }
    Ok(EvalReport {
        names: names.to_vec(),
        thresholds: thresholds.to_vec(),
        ap,
        map,
        n_gt,
        n_pred,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn threshold_label(t: f64) -> String {
        format!("AP@{}", (t * 100.0).round() as i64)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("# AP: all-point interpolation, flags pooled across scenes\n");
        let mut header = vec!["metric".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("mAP".into());
        let widths: Vec<usize> = header.iter().map(|h| h.len().max(7)).collect();
        let line = |cells: Vec<String>| -> String {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join(" ")
                + "\n"
        };
        s += &line(header.clone());
        for (i, &t) in self.thresholds.iter().enumerate() {
            let mut row = vec![Self::threshold_label(t)];
            row.extend(self.ap[i].iter().map(|&v| cell(v)));
            row.push(cell(self.map[i]));
            s += &line(row);
        }
        let counts = |label: &str, v: &[usize]| {
            let mut row = vec![label.to_string()];
            row.extend(v.iter().map(|c| c.to_string()));
            row.push(v.iter().sum::<usize>().to_string());
            row
        };
        s += &line(counts("n_gt", &self.n_gt));
        s += &line(counts("n_pred", &self.n_pred));
        for (i, &t) in self.thresholds.iter().enumerate() {
            let _ = writeln!(s, "m{} = {}", Self::threshold_label(t), cell(self.map[i]));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn cube(center: [f64; 3], yaw: f64) -> Box3D {
        Box3D {
            category_id: 0,
            center,
            size: [1.0; 3],
            yaw,
            confidence: 1.0,
        }
    }

    fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for bx in [a, b] {
            let r = (bx.size[0] * bx.size[0] + bx.size[1] * bx.size[1]).sqrt() / 2.0;
            let ext = [r, r, bx.size[2] / 2.0];
            for i in 0..3 {
                lo[i] = lo[i].min(bx.center[i] - ext[i]);
                hi[i] = hi[i].max(bx.center[i] + ext[i]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
        for _ in 0..samples {
            let p = [0, 1, 2].map(|i| rng.random_range(lo[i]..hi[i]));
            let (ia, ib) = (a.contains(p), b.contains(p));
            na += ia as u64;
            nb += ib as u64;
            both += (ia && ib) as u64;
        }
        if na + nb == 0 {
            0.0
        } else {
            both as f64 / (na + nb - both) as f64
        }
    }

    #[test]
    fn iou_examples() {
        let a = cube([0.0; 3], 0.0);
        assert!((box_iou_rotated(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(box_iou_rotated(&a, &cube([3.0, 0.0, 0.0], 0.0)), 0.0);
        assert_eq!(box_iou_rotated(&a, &cube([0.0, 0.0, 1.5], 0.0)), 0.0);
        let shifted = cube([0.5, 0.0, 0.0], 0.0);
        assert!((box_iou_rotated(&a, &shifted) - 1.0 / 3.0).abs() < 1e-9);
        assert!((monte_carlo_iou(&a, &shifted, 200_000, 1) - 1.0 / 3.0).abs() < 0.01);
        let yawed = cube([0.0; 3], PI / 4.0);
        let iou = box_iou_rotated(&a, &yawed);
        assert!((iou - monte_carlo_iou(&a, &yawed, 200_000, 2)).abs() < 0.01, "{iou}");
        assert!((iou - 0.7071).abs() < 1e-4, "{iou}");
    }

    #[test]
    fn iou_symmetry_and_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let rand_box = |rng: &mut ChaCha8Rng| Box3D {
                category_id: 0,
                center: [0; 3].map(|_| rng.random_range(-1.0..1.0)),
                size: [0; 3].map(|_| rng.random_range(0.2..2.0)),
                yaw: rng.random_range(-PI..PI),
                confidence: 1.0,
            };
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let ab = box_iou_rotated(&a, &b);
            assert!((ab - box_iou_rotated(&b, &a)).abs() < 1e-9);
            assert!((box_iou_rotated(&a, &a) - 1.0).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&ab));
            let d = [0.7, -1.3, 2.1];
            let move_by = |x: Box3D| Box3D { center: [0, 1, 2].map(|i| x.center[i] + d[i]), ..x };
            assert!((ab - box_iou_rotated(&move_by(a), &move_by(b))).abs() < 1e-9);
            // Common yaw about the origin.
            let phi = 0.9;
            let (s, c) = f64::sin_cos(phi);
            let turn = |x: Box3D| Box3D {
                center: [c * x.center[0] - s * x.center[1], s * x.center[0] + c * x.center[1], x.center[2]],
                yaw: x.yaw + phi,
                ..x
            };
            assert!((ab - box_iou_rotated(&turn(a), &turn(b))).abs() < 1e-9);
        }
    }

    #[test]
    fn matching_examples() {
        let gt = cube([0.0; 3], 0.0);
        // IoU 0.3: overlap fraction x solves x / (2 - x) = 0.3.
        let x = 0.6 / 1.3;
        let p = cube([1.0 - x, 0.0, 0.0], 0.0);
        assert!((box_iou_rotated(&p, &gt) - 0.3).abs() < 1e-12);
        assert_eq!(match_detections(&[p], &[gt], 0.25), vec![true]);
        assert_eq!(match_detections(&[p], &[gt], 0.5), vec![false]);
        assert_eq!(match_detections(&[gt, gt], &[gt], 0.5), vec![true, false]);
        assert!(match_detections(&[], &[gt], 0.5).is_empty());
        // Second GT is the better match for the first prediction.
        let g2 = cube([0.1, 0.0, 0.0], 0.0);
        let q = cube([0.1, 0.0, 0.0], 0.0);
        assert_eq!(match_detections(&[q, gt], &[gt, g2], 0.5), vec![true, true]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false], 1), Some(0.0));
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-15);
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[true], 0), None);
    }

    fn ann(cat: usize, center: [f64; 3]) -> BoxAnnotation {
        BoxAnnotation {
            category_id: cat,
            center,
            size: [1.0; 3],
            yaw: 0.0,
        }
    }

    #[test]
    fn report_examples() {
        let names = category_names(2);
        let gts = vec![ann(0, [0.0; 3]), ann(1, [3.0, 0.0, 0.0]), ann(0, [0.0, 4.0, 0.0])];
        let perfect: Vec<Box3D> = gts.iter().map(|g| Box3D::from_annotation(g, 1.0)).collect();
        let r = map_report(&[(perfect, gts.clone())], &names, &THRESHOLDS).unwrap();
        assert_eq!(r.map, vec![Some(1.0), Some(1.0)]);
        assert!(r.ap.iter().flatten().all(|&v| v == Some(1.0)));
        assert!(r.to_table().contains("mAP@25 = 1.0000"));

        let r = map_report(&[(vec![], gts.clone())], &names, &THRESHOLDS).unwrap();
        assert_eq!(r.map, vec![Some(0.0), Some(0.0)]);

        // Hand-enumerated two-category case. Category 0: predictions at
        // confidence 0.9 (IoU 1/3 with GT a), 0.8 (exact on GT b), 0.7 (miss).
        let preds = vec![
            Box3D { confidence: 0.9, ..cube([0.5, 0.0, 0.0], 0.0) },
            Box3D { confidence: 0.8, ..cube([0.0, 4.0, 0.0], 0.0) },
            Box3D { confidence: 0.7, ..cube([9.0, 0.0, 0.0], 0.0) },
            Box3D { category_id: 1, confidence: 0.5, ..cube([3.0, 0.0, 0.0], 0.0) },
        ];
        let r = map_report(&[(preds, gts.clone())], &names, &THRESHOLDS).unwrap();
        // @25: flags [T, T, F] on 2 GT -> 1. @50: [F, T, F] -> 0.5 * 0.5.
        assert_eq!(r.ap[0], vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.ap[1], vec![Some(0.25), Some(1.0)]);
        assert_eq!(r.map, vec![Some(1.0), Some(0.625)]);
        assert_eq!(r.n_gt, vec![2, 1]);
        assert_eq!(r.n_pred, vec![3, 1]);

        let bad = vec![Box3D { category_id: 2, ..cube([0.0; 3], 0.0) }];
        assert!(map_report(&[(bad, vec![])], &names, &THRESHOLDS).is_err());
        let none = map_report(&[], &names, &THRESHOLDS).unwrap();
        assert_eq!(none.map, vec![None, None]);
    }

    #[test]
    fn table_layout() {
        let names = category_names(11);
        let r = map_report(&[], &names, &THRESHOLDS).unwrap();
        let t = r.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].contains("all-point"));
        let cols: Vec<&str> = lines[1].split_whitespace().collect();
        assert_eq!(cols[1..12], CATEGORY_NAMES);
        assert_eq!(cols[12], "mAP");
        assert!(lines[2].starts_with("  AP@25"));
        assert!(lines[3].starts_with("  AP@50"));
    }
}

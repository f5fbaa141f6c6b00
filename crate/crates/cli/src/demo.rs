//! Seeded synthetic rooms: an axis-aligned box room around the camera with
//! a few yawed cuboid objects on the floor, rendered analytically into an
//! ERP depth map, semantic mask and box annotations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsplat_core::detect::Box3D;
use semsplat_core::eval::box_iou_rotated;
use semsplat_core::gaussian::lift_layout;
use semsplat_core::geometry::{erp_direction, ErpGrid, GeometryError};
use semsplat_core::nn::WeightSet;
use semsplat_core::refine::{block_layout, block_prefix};
use semsplat_core::tensorio::BoxAnnotation;

/// Eleven object categories plus background.
pub const NUM_CATEGORIES: usize = 12;
pub const BACKGROUND: u8 = (NUM_CATEGORIES - 1) as u8;

/// Nominal `(sx, sy, sz)` per category id, meters.
pub const NOMINAL_SIZES: [[f64; 3]; 11] = [
    [2.0, 1.6, 0.5],
    [0.5, 0.5, 0.9],
    [2.0, 0.9, 0.8],
    [1.2, 0.8, 0.75],
    [1.2, 0.6, 0.75],
    [1.0, 0.5, 1.0],
    [0.8, 0.5, 1.8],
    [0.7, 0.7, 1.8],
    [0.6, 0.5, 0.9],
    [0.4, 0.4, 1.5],
    [1.7, 0.8, 0.6],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Room {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoParams {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// 0 picks 1-3 objects at random.
    pub num_objects: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoScene {
    pub room: Room,
    pub boxes: Vec<BoxAnnotation>,
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f32>,
    pub mask: Vec<u8>,
}

/// Distance from the origin along unit `dir` to the room's inner wall.
pub fn room_distance(room: &Room, dir: [f64; 3]) -> f64 {
    (0..3)
        .filter(|&i| dir[i] != 0.0)
        .map(|i| {
            if dir[i] > 0.0 {
                room.hi[i] / dir[i]
            } else {
                room.lo[i] / dir[i]
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// Entry distance of the ray from the origin along `dir` into a yawed box.
pub fn box_distance(b: &BoxAnnotation, dir: [f64; 3]) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let o = [-b.center[0], -b.center[1], -b.center[2]];
    let ol = [c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]];
    let dl = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        let half = b.size[i] / 2.0;
        if dl[i] == 0.0 {
            if ol[i].abs() > half {
                return None;
            }
            continue;
        }
        let a = (-half - ol[i]) / dl[i];
        let z = (half - ol[i]) / dl[i];
        t0 = t0.max(a.min(z));
        t1 = t1.min(a.max(z));
    }
    (t1 >= t0 && t0 > 0.0).then_some(t0)
}

fn as_box(a: &BoxAnnotation) -> Box3D {
    Box3D::from_annotation(a, 1.0)
}

fn place_objects(rng: &mut ChaCha8Rng, room: &Room, count: usize) -> Vec<BoxAnnotation> {
    let mut out: Vec<BoxAnnotation> = Vec::new();
    let margin = 0.05;
    for _ in 0..count {
        for _attempt in 0..1000 {
            let cat = rng.random_range(0..NOMINAL_SIZES.len());
            let size = NOMINAL_SIZES[cat].map(|s| s * rng.random_range(0.9..1.1));
            let yaw = rng.random_range(-PI..PI);
            let cx = rng.random_range(room.lo[0]..room.hi[0]);
            let cy = rng.random_range(room.lo[1]..room.hi[1]);
            let cand = BoxAnnotation {
                category_id: cat,
                center: [cx, cy, room.lo[2] + size[2] / 2.0],
                size,
                yaw,
            };
            let fp = semsplat_core::eval::footprint(&as_box(&cand));
            let inside = fp.iter().all(|p| {
                p[0] > room.lo[0] + margin
                    && p[0] < room.hi[0] - margin
                    && p[1] > room.lo[1] + margin
                    && p[1] < room.hi[1] - margin
            });
            let grown = Box3D {
                size: [size[0] + 0.6, size[1] + 0.6, size[2] + 10.0],
                ..as_box(&cand)
            };
            let clear_of_camera = !grown.contains([0.0, 0.0, 0.0]);
            let apart = out.iter().all(|o| {
                let spaced = Box3D {
                    size: [o.size[0] + 0.1, o.size[1] + 0.1, o.size[2]],
                    ..as_box(o)
                };
                box_iou_rotated(&spaced, &as_box(&cand)) == 0.0
            });
            if inside && clear_of_camera && apart {
                out.push(cand);
                break;
            }
        }
    }
    out
}

pub fn generate(p: &DemoParams) -> Result<DemoScene, GeometryError> {
    let grid = ErpGrid::new(p.height, p.width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let room = Room {
        lo: [
            rng.random_range(-3.5..-2.5),
            rng.random_range(-3.0..-2.0),
            rng.random_range(-1.6..-1.4),
        ],
        hi: [
            rng.random_range(2.5..3.5),
            rng.random_range(2.0..3.0),
            rng.random_range(1.2..1.4),
        ],
    };
    let count = if p.num_objects == 0 {
        rng.random_range(1..=3)
    } else {
        p.num_objects
    };
    let boxes = place_objects(&mut rng, &room, count);
    let mut depth = Vec::with_capacity(p.height * p.width);
    let mut mask = Vec::with_capacity(p.height * p.width);
    for r in 0..p.height {
        for c in 0..p.width {
            let d = erp_direction(r as f64 + 0.5, c as f64 + 0.5, grid);
            let dir = [d[0], d[1], d[2]];
            let mut t = room_distance(&room, dir);
            let mut label = BACKGROUND;
            for b in &boxes {
                if let Some(tb) = box_distance(b, dir) {
                    if tb < t {
                        t = tb;
                        label = b.category_id as u8;
                    }
                }
            }
            depth.push(t as f32);
            mask.push(label);
        }
    }
    Ok(DemoScene {
        room,
        boxes,
        height: p.height,
        width: p.width,
        depth,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightParams {
    pub feature_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub blocks: usize,
    /// 0 gives all-zero weights; otherwise entries are uniform in
    /// `(-scale, scale)` and layer-norm gains are 1.
    pub init_scale: f64,
    pub seed: u64,
}

pub fn full_layout(p: &WeightParams) -> Vec<(String, Vec<usize>)> {
    let (f, k) = (p.feature_dim, NUM_CATEGORIES);
    let mut layout = lift_layout(f, k, p.hidden, p.layers);
    for i in 0..p.blocks {
        layout.extend(block_layout(&block_prefix(i), f, k, p.hidden, p.layers));
    }
    layout.extend(semsplat_core::detect::head_layout(f, p.hidden, p.layers));
    layout
}

pub fn init_weights(p: &WeightParams) -> WeightSet {
    let layout = full_layout(p);
    if p.init_scale == 0.0 {
        return WeightSet::zeros(&layout);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut w = WeightSet::new();
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        let values = if name.ends_with("norm/W") {
            vec![1.0; n]
        } else {
            (0..n)
                .map(|_| rng.random_range(-p.init_scale..p.init_scale))
                .collect()
        };
        w.insert(name, shape, values);
    }
    w
}

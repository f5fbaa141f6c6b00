//! Equirectangular pixel <-> direction mapping and cube-face cameras.
//!
//! Continuous ERP coordinates: `u` runs down the rows in `[0, H]`, `v` across
//! the columns in `[0, W]`. The mapping used throughout is
//!
//! ```text
//! theta = (u / H - 0.5) * pi          eta = (1 - v / W) * 2 * pi
//! x = d sin(eta)    y = d cos(theta) cos(eta)    z = d cos(eta) sin(theta)
//! ```
//!
//! It has unit Jacobian norm for every `(theta, eta)`, so `|p| = d` exactly
//! up to rounding. The two parameterization poles are the `+-x` axis
//! (`cos(eta) = 0`), where `theta` is undetermined.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::tensorio::Tensor;

pub type Point3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("ERP grid must be at least 2x2, got {h}x{w}")]
    BadGrid { h: usize, w: usize },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("depth map has no pixel with positive depth")]
    EmptyScene,
    #[error("cube face resolution must be >= 2, got {0}")]
    BadResolution(usize),
    #[error("expected {expected}, got shape {actual:?}")]
    BadTensor { expected: String, actual: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErpGrid {
    h: usize,
    w: usize,
}

impl ErpGrid {
    pub fn new(h: usize, w: usize) -> Result<Self, GeometryError> {
        if h < 2 || w < 2 {
            return Err(GeometryError::BadGrid { h, w });
        }
        Ok(Self { h, w })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }
}

/// Unit direction for continuous ERP coordinates `(u, v)`.
pub fn erp_direction(u: f64, v: f64, grid: ErpGrid) -> Point3 {
    let theta = (u / grid.h as f64 - 0.5) * PI;
    let eta = (1.0 - v / grid.w as f64) * 2.0 * PI;
    let (st, ct) = theta.sin_cos();
    let (se, ce) = eta.sin_cos();
    Point3::new(se, ct * ce, ce * st)
}

/// Lifts continuous ERP coordinates with depth `d` (meters) to a 3D point.
pub fn unproject_pixel(u: f64, v: f64, d: f64, grid: ErpGrid) -> Result<Point3, GeometryError> {
    if !(d > 0.0) {
        return Err(GeometryError::NonPositiveDepth(d));
    }
    Ok(erp_direction(u, v, grid) * d)
}

/// A lifted depth sample and the pixel it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub row: usize,
    pub col: usize,
    pub depth: f64,
    pub point: Point3,
}

/// Rows and columns visited when sampling an `H x W` map every `stride` pixels.
pub fn sampled_pixels(h: usize, w: usize, stride: usize) -> impl Iterator<Item = (usize, usize)> {
    let stride = stride.max(1);
    (0..h)
        .step_by(stride)
        .flat_map(move |r| (0..w).step_by(stride).map(move |c| (r, c)))
}

/// Unprojects every `stride`-th pixel of an f32 `[H, W]` depth map, using
/// pixel centers (`row + 0.5`, `col + 0.5`). Non-positive or non-finite
/// depths are skipped.
pub fn unproject_depth_map(depth: &Tensor, stride: usize) -> Result<(ErpGrid, Vec<PixelPoint>), GeometryError> {
    let (h, w) = match (depth.as_f32(), depth.shape()) {
        (Some(_), &[h, w]) => (h, w),
        _ => {
            return Err(GeometryError::BadTensor {
                expected: "f32 [H, W] depth".into(),
                actual: depth.shape().to_vec(),
            })
        }
    };
    let grid = ErpGrid::new(h, w)?;
    let data = depth.as_f32().unwrap();
    let points: Vec<PixelPoint> = sampled_pixels(h, w, stride)
        .filter_map(|(row, col)| {
            let d = data[row * w + col] as f64;
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let point = unproject_pixel(row as f64 + 0.5, col as f64 + 0.5, d, grid).ok()?;
            Some(PixelPoint { row, col, depth: d, point })
        })
        .collect();
    if points.is_empty() {
        return Err(GeometryError::EmptyScene);
    }
    Ok((grid, points))
}

/// `cos(eta)` magnitudes below this are treated as the `+-x` pole.
const POLE_EPS: f64 = 1e-15;

/// Inverse of [`erp_direction`]: returns continuous `(u, v)` with `v` wrapped
/// into `[0, W)`. At the `+-x` poles `theta` is undetermined and set to 0.
pub fn direction_to_erp(dir: &Point3, grid: ErpGrid) -> (f64, f64) {
    let rho = dir.y.hypot(dir.z);
    // theta is confined to [-pi/2, pi/2] so cos(theta) >= 0 and cos(eta)
    // carries the sign of y.
    let (theta, cos_eta) = if rho < POLE_EPS {
        (0.0, rho)
    } else if dir.y >= 0.0 {
        (dir.z.atan2(dir.y), rho)
    } else {
        ((-dir.z).atan2(-dir.y), -rho)
    };
    let mut eta = dir.x.atan2(cos_eta);
    if eta < 0.0 {
        eta += 2.0 * PI;
    }
    let h = grid.h as f64;
    let w = grid.w as f64;
    let u = (theta / PI + 0.5) * h;
    let mut v = (1.0 - eta / (2.0 * PI)) * w;
    v = v.rem_euclid(w);
    if v >= w {
        v = 0.0;
    }
    (u, v)
}

/// Cube faces in their fixed serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Face {
    Front,
    Back,
    Right,
    Left,
    Up,
    Down,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::Front, Face::Back, Face::Right, Face::Left, Face::Up, Face::Down];

    pub fn name(self) -> &'static str {
        match self {
            Face::Front => "front",
            Face::Back => "back",
            Face::Right => "right",
            Face::Left => "left",
            Face::Up => "up",
            Face::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Camera basis `(right, up, forward)`; `right = forward x up`.
    pub fn basis(self) -> [Point3; 3] {
        let x = Point3::x();
        let y = Point3::y();
        let z = Point3::z();
        match self {
            Face::Front => [x, z, y],
            Face::Back => [-x, z, -y],
            Face::Right => [-y, z, x],
            Face::Left => [y, z, -x],
            Face::Up => [x, -y, z],
            Face::Down => [x, y, -z],
        }
    }

    /// Rotation from world to this face's camera frame: rows are right, up, forward.
    pub fn world_to_camera(self) -> nalgebra::Matrix3<f64> {
        let [r, u, f] = self.basis();
        nalgebra::Matrix3::from_rows(&[r.transpose(), u.transpose(), f.transpose()])
    }
}

/// A 90-degree pinhole view: focal = res / 2, principal point at the face
/// center. Pixel `(px, py)` spans `[px, px + 1) x [py, py + 1)`; image x
/// goes right, image y goes down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CubeFace {
    pub face: Face,
    resolution: usize,
}

impl CubeFace {
    pub fn new(face: Face, resolution: usize) -> Result<Self, GeometryError> {
        if resolution < 2 {
            return Err(GeometryError::BadResolution(resolution));
        }
        Ok(Self { face, resolution })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn focal(&self) -> f64 {
        self.resolution as f64 / 2.0
    }

    /// Unit ray through the center of pixel `(px, py)`; fractional indices
    /// are allowed, so `((res - 1) / 2, (res - 1) / 2)` is the face center.
    pub fn ray(&self, px: f64, py: f64) -> Point3 {
        let half = self.resolution as f64 / 2.0;
        let f = self.focal();
        let a = (px + 0.5 - half) / f;
        let b = (half - (py + 0.5)) / f;
        let [r, u, fwd] = self.face.basis();
        (r * a + u * b + fwd).normalize()
    }
}

/// Convenience wrapper over [`CubeFace::ray`].
pub fn face_ray(face: CubeFace, px: f64, py: f64) -> Point3 {
    face.ray(px, py)
}

/// Nearest-neighbor resampling of an ERP label mask onto the six cube faces
/// (order: front, back, right, left, up, down).
pub fn panorama_to_cubemap(mask: &Tensor, resolution: usize) -> Result<Vec<Tensor>, GeometryError> {
    let (h, w, data) = match (mask.as_u8(), mask.shape()) {
        (Some(d), &[h, w]) => (h, w, d),
        _ => {
            return Err(GeometryError::BadTensor {
                expected: "u8 [H, W] mask".into(),
                actual: mask.shape().to_vec(),
            })
        }
    };
    let grid = ErpGrid::new(h, w)?;
    Face::ALL
        .par_iter()
        .map(|&face| {
            let cam = CubeFace::new(face, resolution)?;
            let mut out = vec![0u8; resolution * resolution];
            for py in 0..resolution {
                for px in 0..resolution {
                    let dir = cam.ray(px as f64, py as f64);
                    let (u, v) = direction_to_erp(&dir, grid);
                    let row = (u.floor().max(0.0) as usize).min(h - 1);
                    let col = (v.floor().max(0.0) as usize).min(w - 1);
                    out[py * resolution + px] = data[row * w + col];
                }
            }
            Ok(Tensor::from_u8(vec![resolution, resolution], out).expect("face shape"))
        })
        .collect()
}

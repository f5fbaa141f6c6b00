//! Semantic 3D Gaussians and lifting from depth + per-pixel features.

use std::f64::consts::PI;

use nalgebra::Matrix3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{unproject_depth_map, ErpGrid, GeometryError, Point3};
use crate::nn::{mlp_forward, mlp_layout, sigmoid, softmax, NnError, WeightSet};
use crate::tensorio::{DType, Tensor, TensorArchive, TensorIoError};

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error("invalid lift parameters: {0}")]
    Params(String),
    #[error("features {features:?} do not align with depth {depth:?}")]
    Misaligned { depth: Vec<usize>, features: Vec<usize> },
    #[error("malformed gaussian archive: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGaussian {
    pub center: Point3,
    /// Principal radii in meters.
    pub radii: [f64; 3],
    /// Intrinsic Z-Y-X Euler angles `(x, y, z)`, radians.
    pub euler: [f64; 3],
    pub opacity: f64,
    /// Probability distribution over the `K` categories.
    pub category: Vec<f64>,
    pub feature: Vec<f64>,
}

impl SemanticGaussian {
    /// Category index with the highest probability; ties go to the lowest id.
    pub fn argmax_category(&self) -> usize {
        argmax(&self.category)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<SemanticGaussian>,
    pub grid: ErpGrid,
    pub stride: usize,
    pub num_categories: usize,
    pub feature_dim: usize,
    /// Radius ceiling used at lift time; refinement clamps to it.
    pub r_max: f64,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Same metadata, different members.
    pub fn with_gaussians(&self, gaussians: Vec<SemanticGaussian>) -> Self {
        Self {
            gaussians,
            ..self.clone()
        }
    }

    /// KTAR layout: `centers[N,3] radii[N,3] euler[N,3] opacity[N]
    /// category[N,K] features[N,F] meta[5] = (H, W, stride, K, F)`, plus
    /// `r_max[1]`.
    pub fn to_archive(&self) -> Result<TensorArchive, GaussianError> {
        let n = self.len();
        let k = self.num_categories;
        let f = self.feature_dim;
        let mut centers = Vec::with_capacity(3 * n);
        let mut radii = Vec::with_capacity(3 * n);
        let mut euler = Vec::with_capacity(3 * n);
        let mut opacity = Vec::with_capacity(n);
        let mut category = Vec::with_capacity(k * n);
        let mut features = Vec::with_capacity(f * n);
        for g in &self.gaussians {
            centers.extend_from_slice(g.center.as_slice());
            radii.extend_from_slice(&g.radii);
            euler.extend_from_slice(&g.euler);
            opacity.push(g.opacity);
            category.extend_from_slice(&g.category);
            features.extend_from_slice(&g.feature);
        }
        let mut a = TensorArchive::new();
        a.insert("centers", Tensor::from_f64(vec![n, 3], centers)?)?;
        a.insert("radii", Tensor::from_f64(vec![n, 3], radii)?)?;
        a.insert("euler", Tensor::from_f64(vec![n, 3], euler)?)?;
        a.insert("opacity", Tensor::from_f64(vec![n], opacity)?)?;
        a.insert("category", Tensor::from_f64(vec![n, k], category)?)?;
        a.insert("features", Tensor::from_f64(vec![n, f], features)?)?;
        let meta = [self.grid.height(), self.grid.width(), self.stride, k, f].map(|x| x as i32);
        a.insert("meta", Tensor::from_i32(vec![5], meta.to_vec())?)?;
        a.insert("r_max", Tensor::from_f64(vec![1], vec![self.r_max])?)?;
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self, GaussianError> {
        let meta = a.require("meta")?;
        if meta.dtype() != DType::I32 || meta.shape() != [5] {
            return Err(GaussianError::Format("meta must be i32 [5]".into()));
        }
        let m: Vec<usize> = meta.to_f64_vec().into_iter().map(|x| x as usize).collect();
        let grid = ErpGrid::new(m[0], m[1])?;
        let (stride, k, f) = (m[2], m[3], m[4]);
        let r_max = a.get("r_max").map(|t| t.to_f64_vec()[0]).unwrap_or(DEFAULT_R_MAX);
        let centers = a.require("centers")?;
        let n = centers.shape().first().copied().unwrap_or(0);
        let fetch = |name: &str, width: Option<usize>| -> Result<Vec<f64>, GaussianError> {
            let t = a.require(name)?;
            let expected: Vec<usize> = match width {
                Some(w) => vec![n, w],
                None => vec![n],
            };
            if t.shape() != expected.as_slice() {
                return Err(GaussianError::Format(format!(
                    "{name} has shape {:?}, expected {expected:?}",
                    t.shape()
                )));
            }
            Ok(t.to_f64_vec())
        };
        let c = fetch("centers", Some(3))?;
        let r = fetch("radii", Some(3))?;
        let e = fetch("euler", Some(3))?;
        let o = fetch("opacity", None)?;
        let cat = fetch("category", Some(k))?;
        let feat = fetch("features", Some(f))?;
        let gaussians = (0..n)
            .map(|i| SemanticGaussian {
                center: Point3::new(c[3 * i], c[3 * i + 1], c[3 * i + 2]),
                radii: [r[3 * i], r[3 * i + 1], r[3 * i + 2]],
                euler: [e[3 * i], e[3 * i + 1], e[3 * i + 2]],
                opacity: o[i],
                category: cat[k * i..k * (i + 1)].to_vec(),
                feature: feat[f * i..f * (i + 1)].to_vec(),
            })
            .collect();
        Ok(Self {
            gaussians,
            grid,
            stride,
            num_categories: k,
            feature_dim: f,
            r_max,
        })
    }
}

pub const DEFAULT_R_MAX: f64 = 0.5;
pub const DEFAULT_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftParams {
    pub r_max: f64,
    pub stride: usize,
    pub num_categories: usize,
    pub feature_dim: usize,
}

impl LiftParams {
    pub fn validate(&self) -> Result<(), GaussianError> {
        if !(self.r_max > 0.0) {
            return Err(GaussianError::Params(format!("r_max must be > 0, got {}", self.r_max)));
        }
        if self.stride == 0 {
            return Err(GaussianError::Params("stride must be >= 1".into()));
        }
        if self.num_categories < 2 {
            return Err(GaussianError::Params("at least 2 categories required".into()));
        }
        if self.feature_dim == 0 {
            return Err(GaussianError::Params("feature dimension must be >= 1".into()));
        }
        Ok(())
    }
}

pub const LIFT_SCALE: &str = "lift/scale";
pub const LIFT_ROT: &str = "lift/rot";
pub const LIFT_OPACITY: &str = "lift/opacity";
pub const LIFT_CATEGORY: &str = "lift/category";

/// Parameters the lifting MLPs need.
pub fn lift_layout(feature_dim: usize, num_categories: usize, hidden: usize, depth: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = mlp_layout(LIFT_SCALE, feature_dim, hidden, depth, 3);
    out.extend(mlp_layout(LIFT_ROT, feature_dim, hidden, depth, 3));
    out.extend(mlp_layout(LIFT_OPACITY, feature_dim, hidden, depth, 1));
    out.extend(mlp_layout(LIFT_CATEGORY, feature_dim, hidden, depth, num_categories));
    out
}

fn check_len(name: &str, v: &[f64], expected: usize) -> Result<(), NnError> {
    if v.len() != expected {
        return Err(NnError::InputDim {
            name: name.to_string(),
            expected,
            actual: v.len(),
        });
    }
    Ok(())
}

/// Builds one Gaussian per sampled pixel with positive depth.
///
/// `features` is `[H, W, F]` aligned with `depth`. Radii are
/// `sigmoid(.) * r_max`, Euler angles `(sigmoid(.) - 0.5) * 2 pi`, opacity
/// `sigmoid(.)`, category `softmax(.)`, all from the pixel feature.
pub fn lift(depth: &Tensor, features: &Tensor, w: &WeightSet, p: &LiftParams) -> Result<GaussianSet, GaussianError> {
    p.validate()?;
    let (h, wd) = match depth.shape() {
        &[h, w] => (h, w),
        s => {
            return Err(GaussianError::Misaligned {
                depth: s.to_vec(),
                features: features.shape().to_vec(),
            })
        }
    };
    if features.shape() != [h, wd, p.feature_dim] {
        return Err(GaussianError::Misaligned {
            depth: depth.shape().to_vec(),
            features: features.shape().to_vec(),
        });
    }
    let (grid, points) = unproject_depth_map(depth, p.stride)?;
    let fdata = features.to_f64_vec();
    let f = p.feature_dim;
    let gaussians: Result<Vec<_>, NnError> = points
        .par_iter()
        .map(|pp| {
            let off = (pp.row * wd + pp.col) * f;
            let feat = &fdata[off..off + f];
            let s = mlp_forward(w, LIFT_SCALE, feat)?;
            check_len(LIFT_SCALE, &s, 3)?;
            let r = mlp_forward(w, LIFT_ROT, feat)?;
            check_len(LIFT_ROT, &r, 3)?;
            let o = mlp_forward(w, LIFT_OPACITY, feat)?;
            check_len(LIFT_OPACITY, &o, 1)?;
            let c = mlp_forward(w, LIFT_CATEGORY, feat)?;
            check_len(LIFT_CATEGORY, &c, p.num_categories)?;
            Ok(SemanticGaussian {
                center: pp.point,
                radii: [0, 1, 2].map(|i| sigmoid(s[i]) * p.r_max),
                euler: [0, 1, 2].map(|i| (sigmoid(r[i]) - 0.5) * 2.0 * PI),
                opacity: sigmoid(o[0]),
                category: softmax(&c),
                feature: feat.to_vec(),
            })
        })
        .collect();
    Ok(GaussianSet {
        gaussians: gaussians?,
        grid,
        stride: p.stride,
        num_categories: p.num_categories,
        feature_dim: f,
        r_max: p.r_max,
    })
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `R = Rz(z) * Ry(y) * Rx(x)` for `euler = (x, y, z)`.
pub fn rotation_from_euler(euler: [f64; 3]) -> Matrix3<f64> {
    rot_z(euler[2]) * rot_y(euler[1]) * rot_x(euler[0])
}

/// `R diag(r^2) R^T`, mirrored so the result is exactly symmetric.
pub fn covariance_from(radii: [f64; 3], euler: [f64; 3]) -> Matrix3<f64> {
    let rot = rotation_from_euler(euler);
    let s2 = radii.map(|r| r * r);
    let mut cov = Matrix3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let v = (0..3).map(|k| rot[(i, k)] * s2[k] * rot[(j, k)]).sum::<f64>();
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

pub fn covariance_of(g: &SemanticGaussian) -> Matrix3<f64> {
    covariance_from(g.radii, g.euler)
}

/// Wraps an angle into `[-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..=PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    w.clamp(-PI, PI)
}

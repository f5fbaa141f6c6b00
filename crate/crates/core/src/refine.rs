//! Stacked refinement of semantic Gaussians. Each block updates semantics
//! (sparse conv over a voxelization), then centers, then scale/rotation.
//! Block `i` reads its weights from the `opt<i>/` namespace.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use thiserror::Error;

use crate::gaussian::{wrap_angle, GaussianSet, SemanticGaussian};
use crate::nn::{layernorm_gelu, mlp_forward, mlp_layout, sigmoid, softmax, submanifold_conv3d_raw, NnError, SparseGrid, WeightSet};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid refinement parameters: {0}")]
    Params(String),
    #[error("cannot refine an empty gaussian set")]
    Empty,
}

/// Smallest radius refinement may produce, meters.
pub const MIN_RADIUS: f64 = 1e-4;
pub const SEMANTIC_KERNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeParams {
    /// Number of stacked sub-modules.
    pub n: usize,
    pub voxel_size: f64,
    /// Largest center step; offsets lie in `(-S/2, S/2)` per axis.
    pub max_step: f64,
    /// Scale-offset range, meters.
    pub beta: f64,
    /// Rotation-offset range, radians.
    pub eta_rot: f64,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        Self {
            n: 2,
            voxel_size: 0.05,
            max_step: 0.2,
            beta: 0.4,
            eta_rot: PI / 4.0,
        }
    }
}

impl OptimizeParams {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.n < 1 {
            return Err(RefineError::Params("n must be >= 1".into()));
        }
        let positive = [("voxel_size", self.voxel_size), ("S", self.max_step), ("beta", self.beta), ("eta_rot", self.eta_rot)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(RefineError::Params(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("opt{i}")
}

/// Weights required by refinement block `prefix` (e.g. `opt0`).
pub fn block_layout(prefix: &str, feature_dim: usize, num_categories: usize, hidden: usize, depth: usize) -> Vec<(String, Vec<usize>)> {
    let f = feature_dim;
    let k = SEMANTIC_KERNEL;
    let mut out = Vec::new();
    for b in 0..2 {
        out.push((format!("{prefix}/sem{b}/conv/W"), vec![k, k, k, f, f]));
        out.push((format!("{prefix}/sem{b}/conv/b"), vec![f]));
        out.push((format!("{prefix}/sem{b}/norm/W"), vec![f]));
        out.push((format!("{prefix}/sem{b}/norm/b"), vec![f]));
    }
    out.push((format!("{prefix}/sem_head/conv/W"), vec![1, 1, 1, f, num_categories]));
    out.push((format!("{prefix}/sem_head/conv/b"), vec![num_categories]));
    out.extend(mlp_layout(&format!("{prefix}/center"), f, hidden, depth, 3));
    out.extend(mlp_layout(&format!("{prefix}/cov"), f, hidden, depth, 6));
    out
}

/// Occupied voxels plus which Gaussians fell into each.
#[derive(Debug, Clone, PartialEq)]
pub struct Voxelization {
    pub grid: SparseGrid,
    /// Members of each voxel, ascending Gaussian index.
    pub members: Vec<Vec<usize>>,
    /// Voxel index of each Gaussian.
    pub voxel_of: Vec<usize>,
}

pub fn voxel_coord(p: &[f64], voxel_size: f64) -> [i32; 3] {
    [0, 1, 2].map(|i| (p[i] / voxel_size).floor() as i32)
}

/// Bins centers into `floor(center / voxel_size)` cells; voxels are ordered
/// by first member and their feature is the mean of member features.
pub fn voxelize_gaussians(gs: &GaussianSet, voxel_size: f64) -> Result<Voxelization, RefineError> {
    if !(voxel_size > 0.0) {
        return Err(RefineError::Params(format!("voxel_size must be > 0, got {voxel_size}")));
    }
    let f = gs.feature_dim;
    let mut index: HashMap<[i32; 3], usize> = HashMap::new();
    let mut coords = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut voxel_of = Vec::with_capacity(gs.len());
    for (i, g) in gs.gaussians.iter().enumerate() {
        let c = voxel_coord(g.center.as_slice(), voxel_size);
        let v = *index.entry(c).or_insert_with(|| {
            coords.push(c);
            members.push(Vec::new());
            coords.len() - 1
        });
        members[v].push(i);
        voxel_of.push(v);
    }
    let mut features = vec![0.0; coords.len() * f];
    for (v, m) in members.iter().enumerate() {
        let out = &mut features[v * f..(v + 1) * f];
        for &i in m {
            for (o, x) in out.iter_mut().zip(&gs.gaussians[i].feature) {
                *o += x;
            }
        }
        let inv = 1.0 / m.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(Voxelization {
        grid: SparseGrid::new(coords, features, f)?,
        members,
        voxel_of,
    })
}

fn conv_block(grid: &SparseGrid, w: &WeightSet, name: &str) -> Result<SparseGrid, RefineError> {
    let f = grid.dim();
    let k = SEMANTIC_KERNEL;
    let kernel = w.require(&format!("{name}/conv/W"), &[k, k, k, f, f])?;
    let bias = w.require(&format!("{name}/conv/b"), &[f])?;
    let gamma = w.require(&format!("{name}/norm/W"), &[f])?;
    let beta = w.require(&format!("{name}/norm/b"), &[f])?;
    let conv = submanifold_conv3d_raw(grid, kernel, k, f, f, bias)?;
    Ok(conv.map_features(f, |x| layernorm_gelu(x, gamma, beta)))
}

/// Semantic update: two 5x5x5 conv + LayerNorm + GELU blocks refine the
/// voxel features, a 1x1x1 conv predicts category logits, and each Gaussian
/// takes `(softmax(logits) + old) / 2`. Geometry is untouched.
pub fn semantic_refine(gs: &GaussianSet, w: &WeightSet, prefix: &str, voxel_size: f64) -> Result<GaussianSet, RefineError> {
    if gs.is_empty() {
        return Err(RefineError::Empty);
    }
    let k = gs.num_categories;
    let f = gs.feature_dim;
    let vox = voxelize_gaussians(gs, voxel_size)?;
    let h = conv_block(&vox.grid, w, &format!("{prefix}/sem0"))?;
    let h = conv_block(&h, w, &format!("{prefix}/sem1"))?;
    let head_w = w.require(&format!("{prefix}/sem_head/conv/W"), &[1, 1, 1, f, k])?;
    let head_b = w.require(&format!("{prefix}/sem_head/conv/b"), &[k])?;
    let logits = submanifold_conv3d_raw(&h, head_w, 1, f, k, head_b)?;
    let probs: Vec<Vec<f64>> = (0..logits.len()).map(|v| softmax(logits.feature(v))).collect();
    let gaussians = gs
        .gaussians
        .iter()
        .zip(&vox.voxel_of)
        .map(|(g, &v)| SemanticGaussian {
            category: probs[v].iter().zip(&g.category).map(|(p, c)| (p + c) / 2.0).collect(),
            feature: h.feature(v).to_vec(),
            ..g.clone()
        })
        .collect();
    Ok(gs.with_gaussians(gaussians))
}

fn per_gaussian<F>(gs: &GaussianSet, update: F) -> Result<GaussianSet, RefineError>
where
    F: Fn(&SemanticGaussian) -> Result<SemanticGaussian, NnError> + Sync + Send,
{
    let gaussians: Result<Vec<_>, NnError> = gs.gaussians.par_iter().map(update).collect();
    Ok(gs.with_gaussians(gaussians?))
}

fn expect_dim(name: &str, v: &[f64], n: usize) -> Result<(), NnError> {
    if v.len() != n {
        return Err(NnError::InputDim {
            name: name.to_string(),
            expected: n,
            actual: v.len(),
        });
    }
    Ok(())
}

/// Residual center step `(sigmoid(MLP(f)) - 0.5) * S`.
pub fn center_refine(gs: &GaussianSet, w: &WeightSet, prefix: &str, max_step: f64) -> Result<GaussianSet, RefineError> {
    let block = format!("{prefix}/center");
    per_gaussian(gs, |g| {
        let out = mlp_forward(w, &block, &g.feature)?;
        expect_dim(&block, &out, 3)?;
        let mut c = g.center;
        for i in 0..3 {
            c[i] += (sigmoid(out[i]) - 0.5) * max_step;
        }
        Ok(SemanticGaussian { center: c, ..g.clone() })
    })
}

/// Scale/rotation update `r' = (r + sc) / 2`, `theta' = (theta + ro) / 2`
/// with `sc = (sigmoid(.) - 0.5) * beta`, `ro = (sigmoid(.) - 0.5) * eta_rot`.
/// Radii are clamped to `[MIN_RADIUS, r_max]`, angles wrapped to `[-pi, pi]`.
pub fn covariance_refine(gs: &GaussianSet, w: &WeightSet, prefix: &str, beta: f64, eta_rot: f64) -> Result<GaussianSet, RefineError> {
    let block = format!("{prefix}/cov");
    let r_max = gs.r_max.max(MIN_RADIUS);
    per_gaussian(gs, |g| {
        let out = mlp_forward(w, &block, &g.feature)?;
        expect_dim(&block, &out, 6)?;
        let radii = [0, 1, 2].map(|i| {
            let sc = (sigmoid(out[i]) - 0.5) * beta;
            ((g.radii[i] + sc) / 2.0).clamp(MIN_RADIUS, r_max)
        });
        let euler = [0, 1, 2].map(|i| {
            let ro = (sigmoid(out[3 + i]) - 0.5) * eta_rot;
            wrap_angle((g.euler[i] + ro) / 2.0)
        });
        Ok(SemanticGaussian { radii, euler, ..g.clone() })
    })
}

/// One sub-module: semantics, then centers, then covariance.
pub fn refine_block(gs: &GaussianSet, w: &WeightSet, prefix: &str, p: &OptimizeParams) -> Result<GaussianSet, RefineError> {
    let gs = semantic_refine(gs, w, prefix, p.voxel_size)?;
    let gs = center_refine(&gs, w, prefix, p.max_step)?;
    covariance_refine(&gs, w, prefix, p.beta, p.eta_rot)
}

/// Applies `p.n` stacked sub-modules `opt0 .. opt{n-1}`.
pub fn optimize(gs: &GaussianSet, w: &WeightSet, p: &OptimizeParams) -> Result<GaussianSet, RefineError> {
    p.validate()?;
    let mut cur = gs.clone();
    for i in 0..p.n {
        cur = refine_block(&cur, w, &block_prefix(i), p)?;
    }
    Ok(cur)
}

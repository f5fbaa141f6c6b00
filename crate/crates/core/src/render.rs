//! Cube-map splatting of semantic Gaussians, the per-class BCE loss against
//! one-hot face labels, and its analytic gradient with respect to each
//! Gaussian's center, radii, Euler angles and opacity.
//!
//! Per face, Gaussians are projected with the local pinhole Jacobian
//! (`cov2d = J W Sigma W^T J^T`, eigenvalues floored), sorted by camera depth
//! and composited front to back:
//!
//! ```text
//! w_i = min(o_i * G(q_i), w_clamp)    c += T * w_i * category_i    T *= 1 - w_i
//! ```
//!
//! `G(q) = exp(-q/2) * (1 - (q / cutoff^2)^8)^3` for `q < cutoff^2` and zero
//! beyond, a Gaussian that reaches zero at the cutoff with two continuous
//! derivatives.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::gaussian::{covariance_from, rot_x, rot_y, rot_z, GaussianSet, SemanticGaussian};
use crate::geometry::{CubeFace, Face, GeometryError, Point3};
use crate::nn::{finite_diff_grad, NnError};
use crate::tensorio::{Tensor, TensorArchive, TensorIoError};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("cube map mismatch: {0}")]
    Mismatch(String),
    #[error("bad cube map: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub w_clamp: f64,
    /// Minimum eigenvalue of a projected covariance, px^2.
    pub eig_floor: f64,
    /// Mahalanobis radius beyond which a splat contributes nothing.
    pub cutoff: f64,
    /// Splats whose center has camera depth at or below this are dropped.
    pub near: f64,
    /// Bound on `|x/z|`, `|y/z|` inside the projection Jacobian.
    pub jacobian_clamp: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            w_clamp: 0.999,
            eig_floor: 0.3,
            cutoff: 3.0,
            near: 0.01,
            jacobian_clamp: 1.3,
        }
    }
}

pub const DEFAULT_RESOLUTION: usize = 256;
/// Probability clamp of the BCE.
pub const BCE_EPS: f64 = 1e-6;

pub fn window(q: f64, cutoff: f64) -> f64 {
    let c2 = cutoff * cutoff;
    if !(q < c2) {
        return 0.0;
    }
    let h = 1.0 - (q / c2).powi(8);
    (-0.5 * q).exp() * h * h * h
}

pub fn window_deriv(q: f64, cutoff: f64) -> f64 {
    let c2 = cutoff * cutoff;
    if !(q < c2) {
        return 0.0;
    }
    let r = q / c2;
    let h = 1.0 - r.powi(8);
    let dh = -8.0 * r.powi(7) / c2;
    (-0.5 * q).exp() * (-0.5 * h * h * h + 3.0 * h * h * dh)
}

/// `max(m, BCE_EPS)` with the corner rounded over `[0, 2 BCE_EPS]` so the
/// result is twice differentiable. Returns value and derivative.
fn soft_floor(m: f64) -> (f64, f64) {
    let s = m / (2.0 * BCE_EPS);
    if s <= 0.0 {
        (BCE_EPS, 0.0)
    } else if s >= 1.0 {
        (m, 1.0)
    } else {
        (BCE_EPS * (1.0 + 2.0 * s * s * s - s * s * s * s), 3.0 * s * s - 2.0 * s * s * s)
    }
}

/// Clamps a probability into `[BCE_EPS, 1 - BCE_EPS]`; identical to a hard
/// clamp outside `BCE_EPS` of either bound.
pub fn bce_clamp(m: f64) -> (f64, f64) {
    if m <= 0.5 {
        soft_floor(m)
    } else {
        let (b, db) = soft_floor(1.0 - m);
        (1.0 - b, db)
    }
}

pub fn bce(m: f64, g: f64) -> f64 {
    let (mh, _) = bce_clamp(m);
    -(g * mh.ln() + (1.0 - g) * (-mh).ln_1p())
}

fn bce_grad(m: f64, g: f64) -> f64 {
    let (mh, dm) = bce_clamp(m);
    dm * (-g / mh + (1.0 - g) / (1.0 - mh))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub face: Face,
    pub gaussian: usize,
    /// Continuous pixel coordinates; pixel `(px, py)` is centered at
    /// `(px + 0.5, py + 0.5)`.
    pub mean: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub category: Vec<f64>,
}

/// Projection plus everything the backward pass needs.
#[derive(Debug, Clone)]
struct Proj {
    gaussian: usize,
    cam: Vector3<f64>,
    /// `J * W`.
    t: Matrix2x3<f64>,
    cov3: Matrix3<f64>,
    eigvec: Matrix2<f64>,
    eigval: [f64; 2],
    floored: bool,
    conic: Matrix2<f64>,
    cov2d: Matrix2<f64>,
    mean: Vector2<f64>,
    clamp_x: bool,
    clamp_y: bool,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]`.
    bbox: [usize; 4],
}

fn sym_eigen(m: &Matrix2<f64>) -> (Matrix2<f64>, [f64; 2]) {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let mid = 0.5 * (a + c);
    let rad = (0.5 * (a - c)).hypot(b);
    let phi = 0.5 * (2.0 * b).atan2(a - c);
    let (s, co) = phi.sin_cos();
    (Matrix2::new(co, -s, s, co), [mid + rad, mid - rad])
}

fn inverse2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let inv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
    0.5 * (inv + inv.transpose())
}

fn project(g: &SemanticGaussian, index: usize, face: CubeFace, cfg: &RenderConfig) -> Option<Proj> {
    let w = face.face.world_to_camera();
    let cam = w * g.center;
    let z = cam[2];
    if !(z > cfg.near) {
        return None;
    }
    let res = face.resolution() as f64;
    let f = face.focal();
    let half = res / 2.0;
    let (rx, ry) = (cam[0] / z, cam[1] / z);
    let lim = cfg.jacobian_clamp;
    let (tx, ty) = (rx.clamp(-lim, lim), ry.clamp(-lim, lim));
    let j = Matrix2x3::new(f / z, 0.0, -f * tx / z, 0.0, -f / z, f * ty / z);
    let t = j * w;
    let cov3 = covariance_from(g.radii, g.euler);
    let raw = t * cov3 * t.transpose();
    let raw = 0.5 * (raw + raw.transpose());
    let (eigvec, eigval) = sym_eigen(&raw);
    let floored = eigval[1] < cfg.eig_floor;
    let cov2d = if floored {
        let d = Matrix2::new(eigval[0].max(cfg.eig_floor), 0.0, 0.0, eigval[1].max(cfg.eig_floor));
        let c = eigvec * d * eigvec.transpose();
        0.5 * (c + c.transpose())
    } else {
        raw
    };
    let mean = Vector2::new(half + f * rx, half - f * ry);
    let reach = cfg.cutoff * eigval[0].max(cfg.eig_floor).sqrt();
    let span = |m: f64| -> Option<[usize; 2]> {
        let lo = (m - reach - 0.5).ceil().max(0.0);
        let hi = (m + reach - 0.5).floor().min(res - 1.0);
        (lo <= hi).then_some([lo as usize, hi as usize])
    };
    let [x0, x1] = span(mean[0])?;
    let [y0, y1] = span(mean[1])?;
    Some(Proj {
        gaussian: index,
        cam,
        t,
        cov3,
        eigvec,
        eigval,
        floored,
        conic: inverse2(&cov2d),
        cov2d,
        mean,
        clamp_x: rx.abs() > lim,
        clamp_y: ry.abs() > lim,
        bbox: [x0, x1, y0, y1],
    })
}

/// Projects `g` onto `face`. `None` when the center is at or behind the
/// near plane, or the splat's cutoff ellipse misses the face entirely.
pub fn project_gaussian_to_face(g: &SemanticGaussian, face: CubeFace, cfg: &RenderConfig) -> Option<Splat2D> {
    let p = project(g, 0, face, cfg)?;
    Some(Splat2D {
        face: face.face,
        gaussian: 0,
        mean: [p.mean[0], p.mean[1]],
        cov2d: p.cov2d,
        depth: p.cam[2],
        opacity: g.opacity,
        category: g.category.clone(),
    })
}

/// Six rendered faces in [`Face::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeMap {
    pub resolution: usize,
    pub num_categories: usize,
    /// Per face, `[res, res, K]` row-major.
    pub probs: Vec<Vec<f64>>,
    /// Per face, `[res, res]`.
    pub alpha: Vec<Vec<f64>>,
}

impl CubeMap {
    pub fn prob(&self, face: Face, px: usize, py: usize, k: usize) -> f64 {
        self.probs[face.index()][(py * self.resolution + px) * self.num_categories + k]
    }

    pub fn alpha_at(&self, face: Face, px: usize, py: usize) -> f64 {
        self.alpha[face.index()][py * self.resolution + px]
    }

    /// Per-pixel argmax class; pixels with no coverage get the background
    /// id `K - 1`.
    pub fn argmax_labels(&self, face: Face) -> Vec<u8> {
        let k = self.num_categories;
        self.probs[face.index()]
            .chunks(k)
            .map(|p| {
                let best = p.iter().enumerate().fold(0, |b, (i, &x)| if x > p[b] { i } else { b });
                if p[best] > 0.0 {
                    best as u8
                } else {
                    (k - 1) as u8
                }
            })
            .collect()
    }

    pub fn to_archive(&self) -> Result<TensorArchive, RenderError> {
        let (r, k) = (self.resolution, self.num_categories);
        let mut a = TensorArchive::new();
        for face in Face::ALL {
            let i = face.index();
            let probs = self.probs[i].iter().map(|&x| x as f32).collect();
            a.insert(format!("probs_{}", face.name()), Tensor::from_f32(vec![r, r, k], probs)?)?;
            let alpha = self.alpha[i].iter().map(|&x| x as f32).collect();
            a.insert(format!("alpha_{}", face.name()), Tensor::from_f32(vec![r, r], alpha)?)?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self, RenderError> {
        let mut probs = Vec::new();
        let mut alpha = Vec::new();
        let mut dims: Option<(usize, usize)> = None;
        for face in Face::ALL {
            let p = a.require(&format!("probs_{}", face.name()))?;
            let al = a.require(&format!("alpha_{}", face.name()))?;
            let &[r, r2, k] = p.shape() else {
                return Err(RenderError::Format(format!("probs_{} has shape {:?}", face.name(), p.shape())));
            };
            if r != r2 || al.shape() != [r, r] || dims.is_some_and(|d| d != (r, k)) {
                return Err(RenderError::Format(format!("inconsistent shapes on face {}", face.name())));
            }
            dims = Some((r, k));
            probs.push(p.to_f64_vec());
            alpha.push(al.to_f64_vec());
        }
        let (resolution, num_categories) = dims.unwrap();
        Ok(Self {
            resolution,
            num_categories,
            probs,
            alpha,
        })
    }
}

/// Ground-truth per-face label images; class `k` of pixel `p` is one-hot
/// `labels[p] == k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GtCubeMap {
    pub resolution: usize,
    pub num_categories: usize,
    pub labels: Vec<Vec<u8>>,
}

impl GtCubeMap {
    pub fn new(resolution: usize, num_categories: usize, labels: Vec<Vec<u8>>) -> Result<Self, RenderError> {
        if labels.len() != 6 {
            return Err(RenderError::Mismatch(format!("expected 6 faces, got {}", labels.len())));
        }
        for (face, l) in Face::ALL.iter().zip(&labels) {
            if l.len() != resolution * resolution {
                return Err(RenderError::Mismatch(format!("face {} has {} labels", face.name(), l.len())));
            }
            if let Some(&bad) = l.iter().find(|&&c| c as usize >= num_categories) {
                return Err(RenderError::Mismatch(format!("label {bad} on face {} is not < K = {num_categories}", face.name())));
            }
        }
        Ok(Self {
            resolution,
            num_categories,
            labels,
        })
    }

    /// From six `u8 [res, res]` face tensors.
    pub fn from_faces(faces: &[Tensor], num_categories: usize) -> Result<Self, RenderError> {
        let res = faces.first().map(|t| t.shape()[0]).unwrap_or(0);
        let labels = faces
            .iter()
            .map(|t| match (t.as_u8(), t.shape()) {
                (Some(d), &[a, b]) if a == res && b == res => Ok(d.to_vec()),
                _ => Err(RenderError::Mismatch(format!("face tensor {:?} is not u8 [{res}, {res}]", t.shape()))),
            })
            .collect::<Result<_, _>>()?;
        Self::new(res, num_categories, labels)
    }

    /// Labels of a rendered cube map, for self-consistent targets.
    pub fn from_render(map: &CubeMap) -> Self {
        Self {
            resolution: map.resolution,
            num_categories: map.num_categories,
            labels: Face::ALL.iter().map(|&f| map.argmax_labels(f)).collect(),
        }
    }
}

/// Gradient of the semantic loss with respect to one Gaussian.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub euler: [f64; 3],
    pub opacity: f64,
}

pub const PARAMS_PER_GAUSSIAN: usize = 10;

impl GaussianGrad {
    pub fn to_array(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut out = [0.0; PARAMS_PER_GAUSSIAN];
        out[0..3].copy_from_slice(&self.center);
        out[3..6].copy_from_slice(&self.radii);
        out[6..9].copy_from_slice(&self.euler);
        out[9] = self.opacity;
        out
    }

    fn add(&mut self, o: &[f64; PARAMS_PER_GAUSSIAN]) {
        for i in 0..3 {
            self.center[i] += o[i];
            self.radii[i] += o[3 + i];
            self.euler[i] += o[6 + i];
        }
        self.opacity += o[9];
    }
}

/// Differentiable parameters, `[center, radii, euler, opacity]` per Gaussian.
pub fn pack_params(gs: &GaussianSet) -> Vec<f64> {
    gs.gaussians
        .iter()
        .flat_map(|g| {
            let mut v = Vec::with_capacity(PARAMS_PER_GAUSSIAN);
            v.extend(g.center.iter());
            v.extend(g.radii);
            v.extend(g.euler);
            v.push(g.opacity);
            v
        })
        .collect()
}

pub fn unpack_params(gs: &GaussianSet, p: &[f64]) -> GaussianSet {
    let gaussians = gs
        .gaussians
        .iter()
        .zip(p.chunks(PARAMS_PER_GAUSSIAN))
        .map(|(g, v)| SemanticGaussian {
            center: Point3::new(v[0], v[1], v[2]),
            radii: [v[3], v[4], v[5]],
            euler: [v[6], v[7], v[8]],
            opacity: v[9],
            ..g.clone()
        })
        .collect();
    gs.with_gaussians(gaussians)
}

struct Contribution {
    slot: usize,
    w: f64,
    trans: f64,
    window: f64,
    q: f64,
    delta: Vector2<f64>,
    clamped: bool,
}

struct FaceSplats {
    face: CubeFace,
    splats: Vec<Proj>,
    /// Depth-ordered splat slots per pixel.
    buckets: Vec<Vec<u32>>,
}

fn prepare_face(gs: &GaussianSet, face: Face, res: usize, cfg: &RenderConfig) -> Result<FaceSplats, RenderError> {
    let face = CubeFace::new(face, res)?;
    let mut splats: Vec<Proj> = gs
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project(g, i, face, cfg))
        .collect();
    splats.sort_by(|a, b| a.cam[2].total_cmp(&b.cam[2]).then(a.gaussian.cmp(&b.gaussian)));
    let mut buckets = vec![Vec::new(); res * res];
    for (slot, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        for py in y0..=y1 {
            for px in x0..=x1 {
                buckets[py * res + px].push(slot as u32);
            }
        }
    }
    Ok(FaceSplats { face, splats, buckets })
}

fn composite_pixel(
    fs: &FaceSplats,
    gs: &GaussianSet,
    pix: usize,
    cfg: &RenderConfig,
    color: &mut [f64],
    record: Option<&mut Vec<Contribution>>,
) -> f64 {
    let res = fs.face.resolution();
    let centre = Vector2::new((pix % res) as f64 + 0.5, (pix / res) as f64 + 0.5);
    let cut2 = cfg.cutoff * cfg.cutoff;
    let mut trans = 1.0;
    let mut rec = record;
    for &slot in &fs.buckets[pix] {
        let s = &fs.splats[slot as usize];
        let delta = centre - s.mean;
        let q = (delta.transpose() * s.conic * delta)[0];
        if !(q < cut2) {
            continue;
        }
        let g = &gs.gaussians[s.gaussian];
        let window = window(q, cfg.cutoff);
        let raw = g.opacity * window;
        let clamped = raw > cfg.w_clamp;
        let w = raw.clamp(0.0, cfg.w_clamp);
        if w == 0.0 {
            continue;
        }
        for (c, a) in color.iter_mut().zip(&g.category) {
            *c += trans * w * a;
        }
        if let Some(r) = rec.as_deref_mut() {
            r.push(Contribution {
                slot: slot as usize,
                w,
                trans,
                window,
                q,
                delta,
                clamped,
            });
        }
        trans *= 1.0 - w;
    }
    trans
}

fn check_categories(gs: &GaussianSet) -> Result<(), RenderError> {
    let k = gs.num_categories;
    match gs.gaussians.iter().position(|g| g.category.len() != k) {
        Some(i) => Err(RenderError::Mismatch(format!("gaussian {i} has {} categories, set declares {k}", gs.gaussians[i].category.len()))),
        None => Ok(()),
    }
}

/// Renders all six faces (in parallel, one face per task).
pub fn render_cubemap(gs: &GaussianSet, resolution: usize, cfg: &RenderConfig) -> Result<CubeMap, RenderError> {
    check_categories(gs)?;
    let k = gs.num_categories;
    let faces: Result<Vec<_>, RenderError> = Face::ALL
        .par_iter()
        .map(|&face| {
            let fs = prepare_face(gs, face, resolution, cfg)?;
            let n = resolution * resolution;
            let mut probs = vec![0.0; n * k];
            let mut alpha = vec![0.0; n];
            for pix in 0..n {
                let t = composite_pixel(&fs, gs, pix, cfg, &mut probs[pix * k..(pix + 1) * k], None);
                alpha[pix] = 1.0 - t;
            }
            Ok((probs, alpha))
        })
        .collect();
    let (probs, alpha) = faces?.into_iter().unzip();
    Ok(CubeMap {
        resolution,
        num_categories: k,
        probs,
        alpha,
    })
}

fn check_pair(rendered: &CubeMap, gt: &GtCubeMap) -> Result<(), RenderError> {
    if rendered.resolution != gt.resolution || rendered.num_categories != gt.num_categories {
        return Err(RenderError::Mismatch(format!(
            "rendered res {} K {} vs target res {} K {}",
            rendered.resolution, rendered.num_categories, gt.resolution, gt.num_categories
        )));
    }
    Ok(())
}

/// Mean over faces of the per-face mean (over pixels and classes) BCE.
pub fn semantic_loss(rendered: &CubeMap, gt: &GtCubeMap) -> Result<f64, RenderError> {
    check_pair(rendered, gt)?;
    let k = gt.num_categories;
    let n = (gt.resolution * gt.resolution * k) as f64;
    let per_face: Vec<f64> = (0..6)
        .map(|f| {
            let probs = &rendered.probs[f];
            let sum: f64 = gt.labels[f]
                .iter()
                .enumerate()
                .map(|(pix, &l)| (0..k).map(|c| bce(probs[pix * k + c], (l as usize == c) as u8 as f64)).sum::<f64>())
                .sum();
            sum / n
        })
        .collect();
    Ok(per_face.iter().sum::<f64>() / 6.0)
}

#[derive(Default, Clone)]
struct SplatGrad {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
}

fn face_grad(fs: &FaceSplats, gs: &GaussianSet, gt: &[u8], cfg: &RenderConfig, scale: f64) -> (f64, Vec<SplatGrad>) {
    let k = gs.num_categories;
    let res = fs.face.resolution();
    let mut grads = vec![SplatGrad::default(); fs.splats.len()];
    let mut loss = 0.0;
    let mut color = vec![0.0; k];
    let mut dcolor = vec![0.0; k];
    let mut suffix = vec![0.0; k];
    let mut rec = Vec::new();
    for pix in 0..res * res {
        color.iter_mut().for_each(|c| *c = 0.0);
        rec.clear();
        composite_pixel(fs, gs, pix, cfg, &mut color, Some(&mut rec));
        let label = gt[pix] as usize;
        for c in 0..k {
            let g = (label == c) as u8 as f64;
            loss += bce(color[c], g);
            dcolor[c] = scale * bce_grad(color[c], g);
        }
        suffix.iter_mut().for_each(|s| *s = 0.0);
        for r in rec.iter().rev() {
            let s = &fs.splats[r.slot];
            let cat = &gs.gaussians[s.gaussian].category;
            let inv = 1.0 / (1.0 - r.w);
            let mut dw = 0.0;
            for c in 0..k {
                dw += dcolor[c] * (r.trans * cat[c] - suffix[c] * inv);
                suffix[c] += r.trans * r.w * cat[c];
            }
            if r.clamped {
                continue;
            }
            let o = gs.gaussians[s.gaussian].opacity;
            let sg = &mut grads[r.slot];
            sg.opacity += dw * r.window;
            let dq = dw * o * window_deriv(r.q, cfg.cutoff);
            sg.mean -= 2.0 * dq * (s.conic * r.delta);
            sg.conic += dq * r.delta * r.delta.transpose();
        }
    }
    (loss * scale, grads)
}

fn drot(a: f64, axis: usize) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    match axis {
        0 => Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s),
        1 => Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s),
        _ => Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0),
    }
}

fn inner(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Chains screen-space gradients back to the Gaussian's parameters.
fn backprop_splat(p: &Proj, sg: &SplatGrad, g: &SemanticGaussian, face: CubeFace, cfg: &RenderConfig) -> [f64; PARAMS_PER_GAUSSIAN] {
    let f = face.focal();
    let w = face.face.world_to_camera();
    // conic = cov^-1
    let g_cov = -(p.conic * sg.conic * p.conic);
    let g_cov = 0.5 * (g_cov + g_cov.transpose());
    let g_raw = if p.floored {
        let q = p.eigvec;
        let inner = q.transpose() * g_cov * q;
        let fl = cfg.eig_floor;
        let fv = p.eigval.map(|l| l.max(fl));
        let df = p.eigval.map(|l| if l > fl { 1.0 } else { 0.0 });
        let gap = p.eigval[0] - p.eigval[1];
        let off = if gap.abs() > 1e-12 * p.eigval[0].abs().max(1.0) {
            (fv[0] - fv[1]) / gap
        } else {
            df[0]
        };
        let scaled = Matrix2::new(inner[(0, 0)] * df[0], inner[(0, 1)] * off, inner[(1, 0)] * off, inner[(1, 1)] * df[1]);
        q * scaled * q.transpose()
    } else {
        g_cov
    };
    let g_cov3 = p.t.transpose() * g_raw * p.t;
    let g_t = 2.0 * g_raw * p.t * p.cov3;
    let g_j = g_t * w.transpose();

    let (x, y, z) = (p.cam[0], p.cam[1], p.cam[2]);
    let lim = cfg.jacobian_clamp;
    let (tx, ty) = ((x / z).clamp(-lim, lim), (y / z).clamp(-lim, lim));
    let mut g_cam = Vector3::zeros();
    // J = (f/z) [[1, 0, -tx], [0, -1, ty]]
    let fz = f / z;
    g_cam[2] += -fz / z * (g_j[(0, 0)] - g_j[(0, 2)] * tx - g_j[(1, 1)] + g_j[(1, 2)] * ty);
    if !p.clamp_x {
        g_cam[0] += -g_j[(0, 2)] * fz / z;
        g_cam[2] += g_j[(0, 2)] * fz * x / (z * z);
    }
    if !p.clamp_y {
        g_cam[1] += g_j[(1, 2)] * fz / z;
        g_cam[2] -= g_j[(1, 2)] * fz * y / (z * z);
    }
    // mean = (h + f x / z, h - f y / z)
    g_cam[0] += sg.mean[0] * fz;
    g_cam[1] -= sg.mean[1] * fz;
    g_cam[2] += (-sg.mean[0] * x + sg.mean[1] * y) * fz / z;
    let g_center = w.transpose() * g_cam;

    let rot = rot_z(g.euler[2]) * rot_y(g.euler[1]) * rot_x(g.euler[0]);
    let s2 = Matrix3::from_diagonal(&Vector3::from(g.radii.map(|r| r * r)));
    let g_sym = 0.5 * (g_cov3 + g_cov3.transpose());
    let rgr = rot.transpose() * g_sym * rot;
    let g_rot = 2.0 * g_sym * rot * s2;
    let d_rx = rot_z(g.euler[2]) * rot_y(g.euler[1]) * drot(g.euler[0], 0);
    let d_ry = rot_z(g.euler[2]) * drot(g.euler[1], 1) * rot_x(g.euler[0]);
    let d_rz = drot(g.euler[2], 2) * rot_y(g.euler[1]) * rot_x(g.euler[0]);

    let mut out = [0.0; PARAMS_PER_GAUSSIAN];
    out[..3].copy_from_slice(g_center.as_slice());
    for i in 0..3 {
        out[3 + i] = 2.0 * g.radii[i] * rgr[(i, i)];
    }
    out[6] = inner(&g_rot, &d_rx);
    out[7] = inner(&g_rot, &d_ry);
    out[8] = inner(&g_rot, &d_rz);
    out[9] = sg.opacity;
    out
}

/// Semantic loss of `gs` rendered at the target's resolution, and its
/// gradient per Gaussian.
pub fn semantic_loss_grad(gs: &GaussianSet, gt: &GtCubeMap, cfg: &RenderConfig) -> Result<(f64, Vec<GaussianGrad>), RenderError> {
    check_categories(gs)?;
    if gs.num_categories != gt.num_categories {
        return Err(RenderError::Mismatch(format!("set K {} vs target K {}", gs.num_categories, gt.num_categories)));
    }
    let res = gt.resolution;
    let scale = 1.0 / (6 * res * res * gt.num_categories) as f64;
    let per_face: Result<Vec<_>, RenderError> = Face::ALL
        .par_iter()
        .map(|&face| {
            let fs = prepare_face(gs, face, res, cfg)?;
            let (loss, grads) = face_grad(&fs, gs, &gt.labels[face.index()], cfg, scale);
            let params: Vec<(usize, [f64; PARAMS_PER_GAUSSIAN])> = fs
                .splats
                .iter()
                .zip(&grads)
                .map(|(p, sg)| (p.gaussian, backprop_splat(p, sg, &gs.gaussians[p.gaussian], fs.face, cfg)))
                .collect();
            Ok((loss, params))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = vec![GaussianGrad::default(); gs.len()];
    for (l, params) in per_face? {
        loss += l;
        for (i, g) in params {
            grads[i].add(&g);
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Flat parameter index of the worst component.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub num_params: usize,
}

/// Relative deviation `|a - n| / max(1e-6, |a| + |n|)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Compares [`semantic_loss_grad`] against central differences of
/// [`semantic_loss`] over every differentiable parameter.
pub fn gradient_check(gs: &GaussianSet, gt: &GtCubeMap, cfg: &RenderConfig, eps: f64) -> Result<GradCheck, RenderError> {
    let (_, grads) = semantic_loss_grad(gs, gt, cfg)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.to_array()).collect();
    let p0 = pack_params(gs);
    let loss = |p: &[f64]| {
        render_cubemap(&unpack_params(gs, p), gt.resolution, cfg)
            .and_then(|m| semantic_loss(&m, gt))
            .unwrap_or(f64::NAN)
    };
    let numeric = finite_diff_grad(loss, &p0, eps)?;
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        num_params: p0.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_err(a, n);
        if e > out.max_rel_err {
            out = GradCheck {
                max_rel_err: e,
                worst: i,
                analytic: a,
                numeric: n,
                num_params: p0.len(),
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ErpGrid;
    use crate::scenes::random_scene;

    fn gaussian(center: [f64; 3], r: f64, opacity: f64, category: Vec<f64>) -> SemanticGaussian {
        SemanticGaussian {
            center: Point3::from(center),
            radii: [r; 3],
            euler: [0.0; 3],
            opacity,
            category,
            feature: vec![],
        }
    }

    fn set(gaussians: Vec<SemanticGaussian>, k: usize) -> GaussianSet {
        GaussianSet {
            gaussians,
            grid: ErpGrid::new(8, 16).unwrap(),
            stride: 1,
            num_categories: k,
            feature_dim: 0,
            r_max: 0.5,
        }
    }

    fn onehot(k: usize, j: usize) -> Vec<f64> {
        (0..k).map(|i| (i == j) as u8 as f64).collect()
    }

    #[test]
    fn window_is_gaussian_near_center_and_vanishes_at_cutoff() {
        assert_eq!(window(0.0, 3.0), 1.0);
        assert!((window(1.0, 3.0) - (-0.5f64).exp()).abs() < 1e-7);
        assert_eq!(window(9.0, 3.0), 0.0);
        assert!(window(8.999, 3.0) < 1e-9);
        for q in [0.3, 2.0, 5.0, 8.5] {
            let h = 1e-6;
            let fd = (window(q + h, 3.0) - window(q - h, 3.0)) / (2.0 * h);
            assert!((fd - window_deriv(q, 3.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn bce_clamp_matches_hard_clamp_away_from_bounds() {
        assert_eq!(bce_clamp(0.0).0, BCE_EPS);
        assert_eq!(bce_clamp(-3.0), (BCE_EPS, 0.0));
        assert_eq!(bce_clamp(1.0).0, 1.0 - BCE_EPS);
        assert_eq!(bce_clamp(0.5), (0.5, 1.0));
        assert_eq!(bce_clamp(0.25).0, 0.25);
        for m in [0.0, 5e-7, 1e-6, 1.5e-6, 2e-6, 1.0 - 1.5e-6] {
            let h = 1e-9;
            let fd = (bce_clamp(m + h).0 - bce_clamp(m - h).0) / (2.0 * h);
            assert!((fd - bce_clamp(m).1).abs() < 1e-5, "{m}");
        }
    }

    #[test]
    fn on_axis_projection() {
        let cfg = RenderConfig::default();
        let g = gaussian([0.0, 2.0, 0.0], 0.1, 0.5, vec![1.0]);
        let front = CubeFace::new(Face::Front, 256).unwrap();
        let s = project_gaussian_to_face(&g, front, &cfg).unwrap();
        assert_eq!(s.mean, [128.0, 128.0]);
        assert!((s.cov2d - Matrix2::identity() * 40.96).norm() < 1e-9);
        assert!((s.depth - 2.0).abs() < 1e-15);
        assert!(project_gaussian_to_face(&g, CubeFace::new(Face::Back, 256).unwrap(), &cfg).is_none());
        let far = gaussian([0.0, 4.0, 0.0], 0.1, 0.5, vec![1.0]);
        let s2 = project_gaussian_to_face(&far, front, &cfg).unwrap();
        assert!((s2.cov2d - s.cov2d / 4.0).norm() < 1e-9);
        // Tiny Gaussians are floored.
        let tiny = gaussian([0.0, 2.0, 0.0], 1e-3, 0.5, vec![1.0]);
        let s3 = project_gaussian_to_face(&tiny, front, &cfg).unwrap();
        assert!((s3.cov2d - Matrix2::identity() * 0.3).norm() < 1e-12);
        let behind = gaussian([0.0, 0.005, 0.0], 0.1, 0.5, vec![1.0]);
        assert!(project_gaussian_to_face(&behind, front, &cfg).is_none());
    }

    #[test]
    fn projected_mean_follows_face_rays() {
        let cfg = RenderConfig::default();
        for face in Face::ALL {
            let cf = CubeFace::new(face, 32).unwrap();
            let dir = cf.ray(5.0, 20.0);
            let g = gaussian((dir * 2.5).into(), 0.05, 0.5, vec![1.0]);
            let s = project_gaussian_to_face(&g, cf, &cfg).unwrap();
            assert!((s.mean[0] - 5.5).abs() < 1e-9 && (s.mean[1] - 20.5).abs() < 1e-9, "{face:?}");
        }
    }

    #[test]
    fn compositing_examples() {
        let cfg = RenderConfig::default();
        let k = 3;
        let empty = render_cubemap(&set(vec![], k), 8, &cfg).unwrap();
        assert!(empty.alpha.iter().flatten().all(|&a| a == 0.0));
        assert!(empty.probs.iter().flatten().all(|&a| a == 0.0));

        let front = CubeFace::new(Face::Front, 16).unwrap();
        let at_pixel: [f64; 3] = (front.ray(7.0, 7.0) * 2.0).into();
        let solo = set(vec![gaussian(at_pixel, 0.1, 1.0, onehot(k, 1))], k);
        let map = render_cubemap(&solo, 16, &cfg).unwrap();
        assert!((map.prob(Face::Front, 7, 7, 1) - 0.999).abs() < 1e-12);
        assert_eq!(map.argmax_labels(Face::Front)[7 * 16 + 7], 1);

        let pair = set(vec![gaussian(at_pixel, 0.1, 0.5, onehot(k, 2)), gaussian(at_pixel, 0.1, 0.5, onehot(k, 2))], k);
        let map = render_cubemap(&pair, 16, &cfg).unwrap();
        assert!((map.prob(Face::Front, 7, 7, 2) - 0.75).abs() < 1e-12);
        assert!((map.alpha_at(Face::Front, 7, 7) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn depth_order_decides_visible_class() {
        let cfg = RenderConfig::default();
        let near = gaussian([0.0, 1.0, 0.0], 0.05, 0.9, onehot(2, 0));
        let far = gaussian([0.0, 3.0, 0.0], 0.15, 0.9, onehot(2, 1));
        for gs in [set(vec![near.clone(), far.clone()], 2), set(vec![far, near], 2)] {
            let map = render_cubemap(&gs, 8, &cfg).unwrap();
            assert!(map.prob(Face::Front, 3, 3, 0) > map.prob(Face::Front, 3, 3, 1));
        }
    }

    #[test]
    fn telescoping_and_monotone_alpha() {
        let cfg = RenderConfig::default();
        let (gs, _) = random_scene(3, 15, 2, 4).unwrap();
        let map = render_cubemap(&gs, 12, &cfg).unwrap();
        for f in 0..6 {
            for (pix, &a) in map.alpha[f].iter().enumerate() {
                let s: f64 = map.probs[f][pix * 4..(pix + 1) * 4].iter().sum();
                assert!((s - a).abs() < 1e-9);
                assert!((0.0..=1.0).contains(&a));
            }
        }
        let mut more = gs.clone();
        more.gaussians.extend(random_scene(4, 5, 2, 4).unwrap().0.gaussians);
        let map2 = render_cubemap(&more, 12, &cfg).unwrap();
        for f in 0..6 {
            for (a, b) in map.alpha[f].iter().zip(&map2.alpha[f]) {
                assert!(b >= a);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let k = 3;
        let res = 4;
        let (_, gt) = random_scene(1, 0, res, k).unwrap();
        let half = CubeMap {
            resolution: res,
            num_categories: k,
            probs: vec![vec![0.5; res * res * k]; 6],
            alpha: vec![vec![1.0; res * res]; 6],
        };
        assert!((semantic_loss(&half, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        let mut perfect = half.clone();
        for f in 0..6 {
            for pix in 0..res * res {
                for c in 0..k {
                    let g = gt.labels[f][pix] as usize == c;
                    perfect.probs[f][pix * k + c] = if g { 1.0 - BCE_EPS } else { BCE_EPS };
                }
            }
        }
        assert!(semantic_loss(&perfect, &gt).unwrap() < 1e-5);
        assert!((bce(0.0, 1.0) - 13.815510557964274).abs() < 1e-9);
        let wrong = CubeMap { resolution: 2, ..half.clone() };
        assert!(semantic_loss(&wrong, &gt).is_err());
    }

    #[test]
    fn cubemap_archive_roundtrip() {
        let cfg = RenderConfig::default();
        let (gs, _) = random_scene(8, 6, 2, 3).unwrap();
        let map = render_cubemap(&gs, 8, &cfg).unwrap();
        let a = map.to_archive().unwrap();
        assert_eq!(a.get("probs_front").unwrap().shape(), &[8, 8, 3]);
        assert_eq!(a.get("alpha_down").unwrap().shape(), &[8, 8]);
        let back = CubeMap::from_archive(&a).unwrap();
        for (x, y) in map.probs.iter().flatten().zip(back.probs.iter().flatten()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_and_invisible_scenes_have_zero_gradient() {
        let cfg = RenderConfig::default();
        let gt = GtCubeMap::new(8, 2, vec![vec![0; 64]; 6]).unwrap();
        let (_, g) = semantic_loss_grad(&set(vec![], 2), &gt, &cfg).unwrap();
        assert!(g.is_empty());
        // Transparent Gaussians render exactly 0, where the clamped loss is flat.
        let gs = set(vec![gaussian([0.0, 2.0, 0.0], 0.3, 0.0, onehot(2, 0))], 2);
        let (_, g) = semantic_loss_grad(&gs, &gt, &cfg).unwrap();
        let norm: f64 = g[0].to_array().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-4);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = RenderConfig::default();
        let (gs, gt) = random_scene(5, 5, 8, 3).unwrap();
        let (loss, _) = semantic_loss_grad(&gs, &gt, &cfg).unwrap();
        let direct = semantic_loss(&render_cubemap(&gs, 8, &cfg).unwrap(), &gt).unwrap();
        assert!((loss - direct).abs() < 1e-12);
        let check = gradient_check(&gs, &gt, &cfg, 1e-4).unwrap();
        assert!(check.max_rel_err < 1e-3, "{check:?}");
    }

    #[test]
    fn render_is_thread_count_independent() {
        let cfg = RenderConfig::default();
        let (gs, gt) = random_scene(12, 12, 8, 3).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (a, ga) = one.install(|| (render_cubemap(&gs, 8, &cfg).unwrap(), semantic_loss_grad(&gs, &gt, &cfg).unwrap()));
        let b = render_cubemap(&gs, 8, &cfg).unwrap();
        let gb = semantic_loss_grad(&gs, &gt, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }
}

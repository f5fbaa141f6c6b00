//! Small seeded Gaussian scenes used by gradient checks and descent runs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gaussian::{GaussianSet, SemanticGaussian};
use crate::geometry::{ErpGrid, Point3};
use crate::render::{render_cubemap, semantic_loss_grad, GtCubeMap, RenderConfig, RenderError};

fn onehot(k: usize, j: usize) -> Vec<f64> {
    (0..k).map(|i| (i == j) as u8 as f64).collect()
}

fn wrap(gaussians: Vec<SemanticGaussian>, k: usize) -> GaussianSet {
    GaussianSet {
        gaussians,
        grid: ErpGrid::new(2, 2).expect("2x2 grid is valid"),
        stride: 1,
        num_categories: k,
        feature_dim: 0,
        r_max: 0.5,
    }
}

/// `n` random Gaussians 1-3 m from the origin with random soft categories,
/// and a random per-pixel label target at `res`.
pub fn random_scene(seed: u64, n: usize, res: usize, k: usize) -> Result<(GaussianSet, GtCubeMap), RenderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let dir = loop {
                let v = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let len = v.norm();
                if len > 0.1 && len <= 1.0 {
                    break v / len;
                }
            };
            let cat: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = cat.iter().sum();
            SemanticGaussian {
                center: dir * rng.random_range(1.0..3.0),
                radii: [0; 3].map(|_| rng.random_range(0.05..0.5)),
                euler: [0; 3].map(|_| rng.random_range(-PI..PI)),
                opacity: rng.random_range(0.1..0.95),
                category: cat.iter().map(|c| c / s).collect(),
                feature: vec![],
            }
        })
        .collect();
    let labels = (0..6)
        .map(|_| (0..res * res).map(|_| rng.random_range(0..k) as u8).collect())
        .collect();
    Ok((wrap(gaussians, k), GtCubeMap::new(res, k, labels)?))
}

pub const DESCENT_RES: usize = 16;

/// A two-class scene: a shell of background Gaussians 3 m out and four
/// small objects 0.5 m from the camera. Returns the true scene, a copy with
/// the objects displaced by `offset` meters, and the true scene's argmax
/// labels as target.
pub fn offset_scene(offset: f64, cfg: &RenderConfig) -> Result<(GaussianSet, GaussianSet, GtCubeMap), RenderError> {
    let k = 2;
    let shell = 200;
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut gaussians: Vec<SemanticGaussian> = (0..shell)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / shell as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            SemanticGaussian {
                center: Point3::new(r * a.cos(), r * a.sin(), z) * 3.0,
                radii: [0.5; 3],
                euler: [0.0; 3],
                opacity: 0.99,
                category: onehot(k, 1),
                feature: vec![],
            }
        })
        .collect();
    let objects = [[0.2, 1.0, 0.1], [1.0, 0.3, -0.2], [-0.3, -0.1, 1.0], [-1.0, -0.4, -0.3]];
    for dir in objects {
        gaussians.push(SemanticGaussian {
            center: Point3::from(dir).normalize() * 0.5,
            radii: [0.05, 0.04, 0.06],
            euler: [0.3, 0.2, 0.1],
            opacity: 0.99,
            category: onehot(k, 0),
            feature: vec![],
        });
    }
    let truth = wrap(gaussians, k);
    let gt = GtCubeMap::from_render(&render_cubemap(&truth, DESCENT_RES, cfg)?);
    let mut moved = truth.clone();
    let shifts = [[1.0, 0.0, 0.5], [0.0, -1.0, 0.5], [0.7, 0.0, 0.7], [0.0, 1.0, 0.0]];
    for (g, s) in moved.gaussians[shell..].iter_mut().zip(shifts) {
        g.center += Point3::from(s).normalize() * offset;
    }
    Ok((truth, moved, gt))
}

/// Fixed-step gradient descent on Gaussian centers only. Returns the loss
/// before each step plus the final loss (`steps + 1` values).
pub fn descend_centers(gs: &GaussianSet, gt: &GtCubeMap, cfg: &RenderConfig, steps: usize, lr: f64) -> Result<(GaussianSet, Vec<f64>), RenderError> {
    let mut cur = gs.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grads) = semantic_loss_grad(&cur, gt, cfg)?;
        losses.push(loss);
        if step == steps {
            break;
        }
        for (g, d) in cur.gaussians.iter_mut().zip(&grads) {
            for i in 0..3 {
                g.center[i] -= lr * d.center[i];
            }
        }
    }
    Ok((cur, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::gradient_check;

    #[test]
    fn random_scene_is_seeded() {
        let (a, ga) = random_scene(3, 7, 8, 3).unwrap();
        let (b, gb) = random_scene(3, 7, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        assert_eq!(a.len(), 7);
        for g in &a.gaussians {
            let d = g.center.norm();
            assert!((1.0..3.0).contains(&d));
        }
    }

    #[test]
    fn five_gaussian_scene_passes_gradient_check() {
        let cfg = RenderConfig::default();
        let (gs, gt) = random_scene(0, 5, 8, 3).unwrap();
        let check = gradient_check(&gs, &gt, &cfg, 1e-4).unwrap();
        assert!(check.max_rel_err < 1e-3, "{check:?}");
    }

    #[test]
    fn descent_reduces_offset_loss() {
        let cfg = RenderConfig::default();
        let (truth, moved, gt) = offset_scene(0.1, &cfg).unwrap();
        let (_, losses) = descend_centers(&moved, &gt, &cfg, 50, 1e-2).unwrap();
        let (true_loss, _) = semantic_loss_grad(&truth, &gt, &cfg).unwrap();
        assert!(losses[0] > true_loss);
        assert!(losses[50] <= 0.8 * losses[0], "{} -> {}", losses[0], losses[50]);
    }
}

//! Deterministic per-pixel feature stub used when no feature map is given.

use semsplat_core::tensorio::{check_depth_map, Tensor, TensorIoError};

/// Depth is divided by this before encoding.
pub const DEPTH_SCALE: f64 = 10.0;
pub const DEFAULT_FEATURE_DIM: usize = 16;

/// Positional encoding of `a = (u / H, v / W, d / 10)` at pixel centers.
/// Channel `j` encodes `a[j % 3]`: the first three channels are `a`
/// itself, later ones alternate `sin` / `cos` of `2^l * pi * a` with
/// `l = (j - 3) / 6`.
pub fn encode(u: f64, v: f64, d: f64, h: usize, w: usize, dim: usize) -> Vec<f64> {
    let a = [u / h as f64, v / w as f64, d / DEPTH_SCALE];
    (0..dim)
        .map(|j| {
            let x = a[j % 3];
            if j < 3 {
                return x;
            }
            let l = (j - 3) / 6;
            let arg = (1u64 << l.min(60)) as f64 * std::f64::consts::PI * x;
            if ((j - 3) / 3) % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

/// f32 `[H, W, dim]` stub features for a depth map.
pub fn feature_stub(depth: &Tensor, dim: usize) -> Result<Tensor, TensorIoError> {
    let (h, w) = check_depth_map(depth)?;
    let d = depth.as_f32().expect("checked f32");
    let mut out = Vec::with_capacity(h * w * dim);
    for r in 0..h {
        for c in 0..w {
            let f = encode(
                r as f64 + 0.5,
                c as f64 + 0.5,
                d[r * w + c] as f64,
                h,
                w,
                dim,
            );
            out.extend(f.into_iter().map(|x| x as f32));
        }
    }
    Tensor::from_f32(vec![h, w, dim], out)
}

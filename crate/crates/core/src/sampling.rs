//! Point-cloud downsampling (FPS, voxel centroids), chamfer distance and
//! ASCII PLY export.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

pub type Pt = [f64; 3];

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("cannot pick {k} of {n} points")]
    TooMany { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("start index {start} out of range for {n} points")]
    Start { start: usize, n: usize },
    #[error("voxel size must be positive and finite, got {0}")]
    VoxelSize(f64),
    #[error("chamfer distance needs two nonempty sets")]
    Empty,
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn dist2(a: &Pt, b: &Pt) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Farthest point sampling from `start`. Ties go to the lowest index.
pub fn fps(points: &[Pt], k: usize, start: usize) -> Result<Vec<usize>, SamplingError> {
    let n = points.len();
    if k == 0 {
        return Err(SamplingError::ZeroK);
    }
    if k > n {
        return Err(SamplingError::TooMany { k, n });
    }
    if start >= n {
        return Err(SamplingError::Start { start, n });
    }
    let mut picked = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(k);
    let mut cur = start;
    loop {
        picked[cur] = true;
        out.push(cur);
        if out.len() == k {
            break;
        }
        let c = points[cur];
        min_d.par_iter_mut().zip(points).for_each(|(m, p)| *m = m.min(dist2(p, &c)));
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !picked[i] && best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        cur = best.expect("k <= n leaves an unpicked point");
    }
    Ok(out)
}

pub fn voxel_coord(p: &Pt, size: f64) -> [i64; 3] {
    p.map(|x| (x / size).floor() as i64)
}

/// One centroid per occupied voxel with its voxel coordinate, in
/// lexicographic coordinate order. Centroids are clamped to the bounding
/// box of their members.
pub fn voxel_cells(points: &[Pt], size: f64) -> Result<Vec<([i64; 3], Pt)>, SamplingError> {
    if !(size > 0.0 && size.is_finite()) {
        return Err(SamplingError::VoxelSize(size));
    }
    let mut cells: BTreeMap<[i64; 3], (Pt, usize, Pt, Pt)> = BTreeMap::new();
    for p in points {
        let e = cells
            .entry(voxel_coord(p, size))
            .or_insert(([0.0; 3], 0, [f64::INFINITY; 3], [f64::NEG_INFINITY; 3]));
        for i in 0..3 {
            e.0[i] += p[i];
            e.2[i] = e.2[i].min(p[i]);
            e.3[i] = e.3[i].max(p[i]);
        }
        e.1 += 1;
    }
    Ok(cells
        .into_iter()
        .map(|(c, (sum, n, lo, hi))| (c, [0, 1, 2].map(|i| (sum[i] / n as f64).clamp(lo[i], hi[i]))))
        .collect())
}

pub fn voxel_downsample(points: &[Pt], size: f64) -> Result<Vec<Pt>, SamplingError> {
    Ok(voxel_cells(points, size)?.into_iter().map(|(_, p)| p).collect())
}

const BRUTE_FORCE_BELOW: usize = 64;

/// Uniform-grid nearest-neighbour index.
pub struct GridIndex<'a> {
    points: &'a [Pt],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Pt]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let extent = (0..3).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64).cbrt().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(voxel_coord(p, cell)).or_default().push(i);
        }
        let keys = cells.keys();
        let (mut clo, mut chi) = ([i64::MAX; 3], [i64::MIN; 3]);
        for k in keys {
            for i in 0..3 {
                clo[i] = clo[i].min(k[i]);
                chi[i] = chi[i].max(k[i]);
            }
        }
        Self { points, cell, cells, lo: clo, hi: chi }
    }

    /// Squared distance to the nearest indexed point.
    pub fn nearest_dist2(&self, q: &Pt) -> f64 {
        let c = voxel_coord(q, self.cell);
        let max_ring = (0..3)
            .map(|i| (c[i] - self.lo[i]).abs().max((self.hi[i] - c[i]).abs()))
            .max()
            .unwrap_or(0);
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &i in ids {
                                best = best.min(dist2(q, &self.points[i]));
                            }
                        }
                    }
                }
            }
            let reach = r as f64 * self.cell;
            if best <= reach * reach {
                break;
            }
        }
        best
    }
}

fn nearest_all(queries: &[Pt], targets: &[Pt]) -> Vec<f64> {
    if targets.len() < BRUTE_FORCE_BELOW {
        queries
            .par_iter()
            .map(|q| targets.iter().map(|t| dist2(q, t)).fold(f64::INFINITY, f64::min).sqrt())
            .collect()
    } else {
        let index = GridIndex::new(targets);
        queries.par_iter().map(|q| index.nearest_dist2(q).sqrt()).collect()
    }
}

/// Symmetric chamfer distance in meters.
pub fn chamfer(a: &[Pt], b: &[Pt]) -> Result<f64, SamplingError> {
    if a.is_empty() || b.is_empty() {
        return Err(SamplingError::Empty);
    }
    let ab: f64 = nearest_all(a, b).iter().sum();
    let ba: f64 = nearest_all(b, a).iter().sum();
    Ok(ab / a.len() as f64 + ba / b.len() as f64)
}

pub fn ply_string(points: &[Pt]) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

pub fn write_ply(points: &[Pt], path: impl AsRef<Path>) -> Result<(), SamplingError> {
    let path = path.as_ref();
    std::fs::write(path, ply_string(points)).map_err(|source| SamplingError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub const FPS_COUNTS: [usize; 2] = [1024, 4096];
pub const VOXEL_SIZES: [f64; 2] = [0.05, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub method: String,
    pub points: usize,
    pub chamfer: f64,
}

/// Point counts and chamfer-to-original for FPS (start 0, `k` capped at
/// the cloud size) and voxel centroids.
pub fn sampling_report(points: &[Pt], fps_counts: &[usize], voxel_sizes: &[f64]) -> Result<Vec<SampleRow>, SamplingError> {
    if points.is_empty() {
        return Err(SamplingError::Empty);
    }
    let mut rows = vec![SampleRow {
        method: "original".into(),
        points: points.len(),
        chamfer: 0.0,
    }];
    for &k in fps_counts {
        let ids = fps(points, k.min(points.len()), 0)?;
        let sub: Vec<Pt> = ids.iter().map(|&i| points[i]).collect();
        rows.push(SampleRow {
            method: format!("fps k={k}"),
            points: sub.len(),
            chamfer: chamfer(points, &sub)?,
        });
    }
    for &v in voxel_sizes {
        let sub = voxel_downsample(points, v)?;
        rows.push(SampleRow {
            method: format!("voxel {v} m"),
            points: sub.len(),
            chamfer: chamfer(points, &sub)?,
        });
    }
    Ok(rows)
}

pub fn format_report(rows: &[SampleRow]) -> String {
    let mut s = format!("{:<16} {:>8} {:>12}\n", "method", "points", "chamfer_m");
    for r in rows {
        let _ = writeln!(s, "{:<16} {:>8} {:>12.6}", r.method, r.points, r.chamfer);
    }
    s
}

//! Small deterministic neural kernels: dense layers, activations,
//! submanifold sparse 3D convolution, LayerNorm + GELU, and a central
//! difference gradient oracle.
//!
//! Weight names follow `<block>/<layer>/{W,b}`. Dense layers store `W` as
//! `[out, in]`; conv kernels are `[k, k, k, F_in, F_out]` indexed by
//! `(dx, dy, dz)` offsets plus `k / 2`.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use thiserror::Error;

use crate::tensorio::{Tensor, TensorArchive, TensorIoError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("weight {0:?} is missing")]
    Missing(String),
    #[error("weight {name:?} has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("weight {0:?} contains non-finite values")]
    NonFinite(String),
    #[error("malformed layout line {line}: {text:?}")]
    Layout { line: usize, text: String },
    #[error("input has {actual} features, layer {name:?} expects {expected}")]
    InputDim {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("convolution kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("sparse grid is empty")]
    EmptyGrid,
    #[error("duplicate voxel coordinate {0:?}")]
    DuplicateVoxel([i32; 3]),
    #[error("function is not finite at coordinate {index} (value {value})")]
    NonFiniteEval { index: usize, value: f64 },
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

/// A named parameter array, widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Name of the archive entry that declares every parameter shape.
pub const LAYOUT_ENTRY: &str = "spec";

/// Named parameters for every learnable block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightSet {
    params: BTreeMap<String, Param>,
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.params.insert(name.into(), Param { shape, values });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Fetches a parameter and checks its shape.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&[f64], NnError> {
        let p = self.get(name).ok_or_else(|| NnError::Missing(name.to_string()))?;
        if p.shape != shape {
            return Err(NnError::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                actual: p.shape.clone(),
            });
        }
        Ok(&p.values)
    }

    /// Zero-filled weights for every entry of a declared layout.
    pub fn zeros(layout: &[(String, Vec<usize>)]) -> Self {
        let mut w = Self::new();
        for (name, shape) in layout {
            w.insert(name.clone(), shape.clone(), vec![0.0; shape.iter().product()]);
        }
        w
    }

    /// Layout text: one `name d0 d1 ...` line per parameter.
    pub fn layout_text(&self) -> String {
        let mut s = String::new();
        for (name, p) in &self.params {
            s.push_str(name);
            for d in &p.shape {
                s.push(' ');
                s.push_str(&d.to_string());
            }
            s.push('\n');
        }
        s
    }

    /// f64 tensors in name order, preceded by the layout entry.
    pub fn to_archive(&self) -> Result<TensorArchive, NnError> {
        let mut a = TensorArchive::new();
        a.insert(LAYOUT_ENTRY, Tensor::from_text(&self.layout_text()))?;
        for (name, p) in &self.params {
            a.insert(name.clone(), Tensor::from_f64(p.shape.clone(), p.values.clone())?)?;
        }
        Ok(a)
    }

    /// Loads weights, validating every declared entry against its shape
    /// and rejecting non-finite values.
    pub fn from_archive(a: &TensorArchive) -> Result<Self, NnError> {
        let layout = a.require(LAYOUT_ENTRY)?.as_text().unwrap_or_default();
        let declared = parse_layout(&layout)?;
        let mut w = Self::new();
        for (name, shape) in declared {
            let t = a.get(&name).ok_or_else(|| NnError::Missing(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(NnError::Shape {
                    name,
                    expected: shape,
                    actual: t.shape().to_vec(),
                });
            }
            let values = t.to_f64_vec();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(name));
            }
            w.insert(name, shape, values);
        }
        Ok(w)
    }

    /// Checks that every entry of `layout` is present with the declared shape.
    pub fn validate(&self, layout: &[(String, Vec<usize>)]) -> Result<(), NnError> {
        for (name, shape) in layout {
            self.require(name, shape)?;
        }
        Ok(())
    }
}

pub fn parse_layout(text: &str) -> Result<Vec<(String, Vec<usize>)>, NnError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(name) = parts.next() else { continue };
        let shape: Result<Vec<usize>, _> = parts.map(str::parse).collect();
        let shape = shape.map_err(|_| NnError::Layout {
            line: i + 1,
            text: line.to_string(),
        })?;
        out.push((name.to_string(), shape));
    }
    Ok(out)
}

/// Declares a dense stack `in -> hidden x (depth - 1) -> out` under `block`.
pub fn mlp_layout(block: &str, input: usize, hidden: usize, depth: usize, output: usize) -> Vec<(String, Vec<usize>)> {
    let depth = depth.max(1);
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(hidden, depth - 1));
    dims.push(output);
    let mut out = Vec::new();
    for l in 0..depth {
        out.push((format!("{block}/l{l}/W"), vec![dims[l + 1], dims[l]]));
        out.push((format!("{block}/l{l}/b"), vec![dims[l + 1]]));
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Exact GELU: `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// LayerNorm with affine `(gamma, beta)` followed by GELU.
pub fn layernorm_gelu(v: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
    v.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(x, (g, b))| gelu((x - mean) * inv * g + b))
        .collect()
}

fn dense(w: &[f64], b: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let input = x.len();
    (0..out)
        .map(|o| {
            let row = &w[o * input..(o + 1) * input];
            row.iter().zip(x).fold(b[o], |acc, (wi, xi)| acc + wi * xi)
        })
        .collect()
}

/// Evaluates the dense stack `block/l0, block/l1, ...` with GELU between
/// layers and a linear output.
pub fn mlp_forward(w: &WeightSet, block: &str, x: &[f64]) -> Result<Vec<f64>, NnError> {
    let first = format!("{block}/l0/W");
    if !w.contains(&first) {
        return Err(NnError::Missing(first));
    }
    let mut h = x.to_vec();
    let mut l = 0;
    loop {
        let wname = format!("{block}/l{l}/W");
        let Some(p) = w.get(&wname) else { break };
        let [out, input] = p.shape[..] else {
            return Err(NnError::Shape {
                name: wname,
                expected: vec![0, h.len()],
                actual: p.shape.clone(),
            });
        };
        if input != h.len() {
            return Err(NnError::InputDim {
                name: wname,
                expected: input,
                actual: h.len(),
            });
        }
        let bias = w.require(&format!("{block}/l{l}/b"), &[out])?;
        let y = dense(&p.values, bias, &h, out);
        l += 1;
        h = if w.contains(&format!("{block}/l{l}/W")) {
            y.into_iter().map(gelu).collect()
        } else {
            y
        };
    }
    Ok(h)
}

/// Occupied voxels with one feature vector each.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    coords: Vec<[i32; 3]>,
    features: Vec<f64>,
    dim: usize,
}

impl SparseGrid {
    /// `features` is row-major `[coords.len(), dim]`.
    pub fn new(coords: Vec<[i32; 3]>, features: Vec<f64>, dim: usize) -> Result<Self, NnError> {
        if features.len() != coords.len() * dim {
            return Err(NnError::InputDim {
                name: "sparse grid features".into(),
                expected: coords.len() * dim,
                actual: features.len(),
            });
        }
        let mut seen = HashMap::with_capacity(coords.len());
        for c in &coords {
            if seen.insert(*c, ()).is_some() {
                return Err(NnError::DuplicateVoxel(*c));
            }
        }
        Ok(Self { coords, features, dim })
    }

    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Same occupancy, features mapped per voxel.
    pub fn map_features(&self, dim: usize, f: impl Fn(&[f64]) -> Vec<f64> + Sync) -> SparseGrid {
        let features: Vec<f64> = (0..self.len())
            .into_par_iter()
            .flat_map_iter(|i| f(self.feature(i)))
            .collect();
        SparseGrid {
            coords: self.coords.clone(),
            features,
            dim,
        }
    }
}

/// Submanifold convolution: outputs exist only at input voxels, and each
/// output sums kernel taps over occupied neighbors inside the `k^3` window.
/// The window is walked z-major, so accumulation order is fixed.
pub fn submanifold_conv3d(grid: &SparseGrid, kernel: &Tensor, bias: &[f64]) -> Result<SparseGrid, NnError> {
    let shape = kernel.shape().to_vec();
    let &[k, k1, k2, fin, fout] = shape.as_slice() else {
        return Err(NnError::Shape {
            name: "kernel".into(),
            expected: vec![0, 0, 0, grid.dim(), bias.len()],
            actual: shape,
        });
    };
    if k != k1 || k != k2 {
        return Err(NnError::Shape {
            name: "kernel".into(),
            expected: vec![k, k, k, fin, fout],
            actual: shape,
        });
    }
    submanifold_conv3d_raw(grid, &kernel.to_f64_vec(), k, fin, fout, bias)
}

/// As [`submanifold_conv3d`] with the kernel given as a flat
/// `[k, k, k, fin, fout]` slice.
pub fn submanifold_conv3d_raw(
    grid: &SparseGrid,
    kernel: &[f64],
    k: usize,
    fin: usize,
    fout: usize,
    bias: &[f64],
) -> Result<SparseGrid, NnError> {
    if k % 2 == 0 {
        return Err(NnError::EvenKernel(k));
    }
    if grid.is_empty() {
        return Err(NnError::EmptyGrid);
    }
    if fin != grid.dim() {
        return Err(NnError::InputDim {
            name: "kernel".into(),
            expected: fin,
            actual: grid.dim(),
        });
    }
    if bias.len() != fout || kernel.len() != k * k * k * fin * fout {
        return Err(NnError::Shape {
            name: "kernel/bias".into(),
            expected: vec![k, k, k, fin, fout],
            actual: vec![kernel.len(), bias.len()],
        });
    }
    let index: HashMap<[i32; 3], usize> = grid.coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let r = (k / 2) as i32;
    let features: Vec<f64> = grid
        .coords
        .par_iter()
        .flat_map_iter(|c| {
            let mut acc = bias.to_vec();
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let Some(&j) = index.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                            continue;
                        };
                        let tap = (((dx + r) as usize * k + (dy + r) as usize) * k + (dz + r) as usize) * fin * fout;
                        let x = grid.feature(j);
                        for (i, xi) in x.iter().enumerate() {
                            let row = &kernel[tap + i * fout..tap + (i + 1) * fout];
                            for (a, w) in acc.iter_mut().zip(row) {
                                *a += w * xi;
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect();
    Ok(SparseGrid {
        coords: grid.coords.clone(),
        features,
        dim: fout,
    })
}

/// Central differences `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, p: &[f64], eps: f64) -> Result<Vec<f64>, NnError> {
    let mut x = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        x[i] = p[i] + eps;
        let fp = f(&x);
        x[i] = p[i] - eps;
        let fm = f(&x);
        x[i] = p[i];
        for v in [fp, fm] {
            if !v.is_finite() {
                return Err(NnError::NonFiniteEval { index: i, value: v });
            }
        }
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::function::erf::erf;

    fn phi(x: f64) -> f64 {
        0.5 * (1.0 + erf(x / 2f64.sqrt()))
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-50.0).abs() < 1e-12);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        let s = softmax(&[0.3; 5]);
        for v in &s {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let s = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_in_open_simplex_preserves_argmax(v in prop::collection::vec(-15.0f64..15.0, 2..10)) {
            let s = softmax(&v);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&x| x > 0.0 && x < 1.0));
            let am = |xs: &[f64]| xs.iter().enumerate().fold(0, |b, (i, &x)| if x > xs[b] { i } else { b });
            prop_assert_eq!(am(&s), am(&v));
        }

        #[test]
        fn layernorm_shift_invariant(v in prop::collection::vec(-5.0f64..5.0, 2..8), shift in -10.0f64..10.0) {
            let n = v.len();
            let ones = vec![1.0; n];
            let zeros = vec![0.0; n];
            let a = layernorm_gelu(&v, &ones, &zeros);
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let b = layernorm_gelu(&shifted, &ones, &zeros);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gelu_matches_independent_erf() {
        // 40-digit reference values.
        let reference = [
            (-3.0, -0.00404969409489028358),
            (-1.0, -0.15865525393145705141),
            (-0.25, -0.10032341857926906894),
            (0.0, 0.0),
            (0.5, 0.34573123063700655182),
            (1.0, 0.84134474606854294859),
            (2.5, 2.4844758366855596621),
        ];
        for (x, y) in reference {
            assert!((gelu(x) - y).abs() < 1e-15 * (1.0 + y.abs()), "{x}");
            assert!((gelu(x) - x * phi(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_gelu_examples() {
        let out = layernorm_gelu(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]);
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out[0] - s * phi(s)).abs() < 1e-9);
        assert!((out[1] + s * phi(-s)).abs() < 1e-9);
        assert!((out[0] - 0.8413).abs() < 1e-4);
        assert!((out[1] + 0.1587).abs() < 1e-4);
        let out = layernorm_gelu(&[2.0; 3], &[1.0; 3], &[0.3, -0.2, 0.0]);
        assert_eq!(out[0], gelu(0.3));
        assert_eq!(out[1], gelu(-0.2));
        assert!((out[0] - 0.3 * phi(0.3)).abs() < 1e-9);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn mlp_examples() {
        let layout = mlp_layout("m", 3, 4, 2, 2);
        let w = WeightSet::zeros(&layout);
        assert_eq!(mlp_forward(&w, "m", &[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let mut id = WeightSet::new();
        id.insert("id/l0/W", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        id.insert("id/l0/b", vec![2], vec![0.0, 0.0]);
        assert_eq!(mlp_forward(&id, "id", &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);

        // Two layers: h = gelu(A x + a), y = B h + b.
        let mut two = WeightSet::new();
        two.insert("t/l0/W", vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]);
        two.insert("t/l0/b", vec![2], vec![0.5, 0.0]);
        two.insert("t/l1/W", vec![2, 2], vec![2.0, 0.0, 1.0, -1.0]);
        two.insert("t/l1/b", vec![2], vec![0.0, 1.0]);
        let x = [1.0, -0.5];
        // A x + a = (1 - 1 + 0.5, -1 - 0.25) = (0.5, -1.25)
        let h = [0.5 * phi(0.5), -1.25 * phi(-1.25)];
        let expected = [2.0 * h[0], h[0] - h[1] + 1.0];
        let y = mlp_forward(&two, "t", &x).unwrap();
        assert!((y[0] - expected[0]).abs() < 1e-9);
        assert!((y[1] - expected[1]).abs() < 1e-9);
        let exact = [2.0 * gelu(0.5), gelu(0.5) - gelu(-1.25) + 1.0];
        for (a, b) in y.iter().zip(exact) {
            assert!((a - b).abs() < 1e-15);
        }

        assert!(matches!(mlp_forward(&two, "nope", &x), Err(NnError::Missing(_))));
        assert!(matches!(mlp_forward(&two, "t", &[1.0]), Err(NnError::InputDim { .. })));
        let mut bad = two.clone();
        bad.insert("t/l1/b", vec![3], vec![0.0; 3]);
        assert!(matches!(mlp_forward(&bad, "t", &x), Err(NnError::Shape { .. })));
    }

    #[test]
    fn weight_archive_roundtrip_and_validation() {
        let layout = mlp_layout("lift/scale", 4, 8, 2, 3);
        let mut w = WeightSet::zeros(&layout);
        w.insert("lift/scale/l0/b", vec![8], (0..8).map(|i| i as f64 * 0.1).collect());
        let a = w.to_archive().unwrap();
        let back = WeightSet::from_archive(&a).unwrap();
        assert_eq!(back, w);
        back.validate(&layout).unwrap();

        let mut broken = a.clone();
        let entries: Vec<_> = broken
            .entries()
            .iter()
            .filter(|(n, _)| n != "lift/scale/l1/W")
            .cloned()
            .collect();
        broken = TensorArchive::from_entries_unchecked(entries);
        assert!(matches!(WeightSet::from_archive(&broken), Err(NnError::Missing(_))));

        let mut nan = TensorArchive::new();
        nan.insert(LAYOUT_ENTRY, Tensor::from_text("x 1\n")).unwrap();
        nan.insert("x", Tensor::from_f32(vec![1], vec![f32::NAN]).unwrap()).unwrap();
        assert!(matches!(WeightSet::from_archive(&nan), Err(NnError::NonFinite(_))));

        let mut wrong = TensorArchive::new();
        wrong.insert(LAYOUT_ENTRY, Tensor::from_text("x 2\n")).unwrap();
        wrong.insert("x", Tensor::from_f32(vec![1], vec![0.0]).unwrap()).unwrap();
        assert!(matches!(WeightSet::from_archive(&wrong), Err(NnError::Shape { .. })));
    }

    fn identity_kernel(k: usize, f: usize) -> Vec<f64> {
        let mut w = vec![0.0; k * k * k * f * f];
        let c = k / 2;
        let tap = ((c * k + c) * k + c) * f * f;
        for i in 0..f {
            w[tap + i * f + i] = 1.0;
        }
        w
    }

    #[test]
    fn conv_identity_and_isolated_voxel() {
        let grid = SparseGrid::new(vec![[0, 0, 0], [1, 0, 0], [5, 5, 5]], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2).unwrap();
        let out = submanifold_conv3d_raw(&grid, &identity_kernel(1, 2), 1, 2, 2, &[0.0, 0.0]).unwrap();
        assert_eq!(out, grid);

        let single = SparseGrid::new(vec![[2, -1, 3]], vec![1.5], 1).unwrap();
        let kernel: Vec<f64> = (0..27).map(|i| i as f64).collect();
        let out = submanifold_conv3d_raw(&single, &kernel, 3, 1, 1, &[0.25]).unwrap();
        assert_eq!(out.feature(0), &[13.0 * 1.5 + 0.25]);
    }

    #[test]
    fn conv_two_voxels_all_ones() {
        let grid = SparseGrid::new(vec![[0, 0, 0], [2, 0, 0]], vec![1.0, 1.0], 1).unwrap();
        let kernel = Tensor::from_f64(vec![5, 5, 5, 1, 1], vec![1.0; 125]).unwrap();
        let out = submanifold_conv3d(&grid, &kernel, &[0.5]).unwrap();
        assert_eq!(out.coords(), grid.coords());
        assert_eq!(out.features(), &[2.5, 2.5]);
        // Outside the window: each sees only itself.
        let far = SparseGrid::new(vec![[0, 0, 0], [3, 0, 0]], vec![1.0, 1.0], 1).unwrap();
        let out = submanifold_conv3d(&far, &kernel, &[0.5]).unwrap();
        assert_eq!(out.features(), &[1.5, 1.5]);
    }

    #[test]
    fn conv_errors() {
        let grid = SparseGrid::new(vec![[0, 0, 0]], vec![1.0], 1).unwrap();
        assert!(matches!(
            submanifold_conv3d_raw(&grid, &[0.0; 8], 2, 1, 1, &[0.0]),
            Err(NnError::EvenKernel(2))
        ));
        let empty = SparseGrid::new(vec![], vec![], 1).unwrap();
        assert!(matches!(
            submanifold_conv3d_raw(&empty, &[0.0], 1, 1, 1, &[0.0]),
            Err(NnError::EmptyGrid)
        ));
        assert!(matches!(
            SparseGrid::new(vec![[0, 0, 0], [0, 0, 0]], vec![0.0, 0.0], 1),
            Err(NnError::DuplicateVoxel(_))
        ));
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let g = finite_diff_grad(|p| p[0] * p[1], &[2.0, 5.0], 1e-4).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-9 && (g[1] - 2.0).abs() < 1e-9);
        let err = finite_diff_grad(|p| if p[1] > 1.0 { f64::NAN } else { 0.0 }, &[0.0, 1.0], 1e-3).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteEval { index: 1, .. }));
    }
}

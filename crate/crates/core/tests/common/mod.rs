//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod propagation;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitrack::geometry::{BBox, BinaryMask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn t64(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    t64((0..n).map(|_| rng.random_range(-scale..scale)).collect(), shape)
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Largest elementwise relative error between autograd and central differences
/// of the scalar `f` at `x`.
pub fn gradient_error(x: &Tensor, eps: f64, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let out = f(var.as_tensor());
    let grads = out.backward().unwrap();
    let analytic = flat(grads.get(var.as_tensor()).expect("input received no gradient"));
    let base = flat(x);
    let shape = x.dims().to_vec();
    let eval = |v: &[f64]| f(&t64(v.to_vec(), &shape)).to_scalar::<f64>().unwrap();
    let mut worst = 0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}

pub fn random_mask(rng: &mut impl Rng, height: usize, width: usize, density: f64) -> BinaryMask {
    let data = (0..height * width).map(|_| rng.random_bool(density)).collect();
    BinaryMask::new(height, width, data).unwrap()
}

/// Dense row-major matrix used by the hand-written oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = t.dims2().unwrap();
        Self { rows, cols, data: flat(t) }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.at(i, k) * other.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() }
    }

    pub fn add_row(&self, bias: &[f64]) -> Mat {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] += bias[c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn vstack(parts: &[&Mat]) -> Mat {
        let cols = parts[0].cols;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.cols, cols);
            data.extend_from_slice(&p.data);
        }
        Mat { rows: data.len() / cols, cols, data }
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = &x.data[r * x.cols..(r + 1) * x.cols];
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.cols as f64;
        for c in 0..x.cols {
            out.set(r, c, (row[c] - mean) / (var + 1e-5).sqrt() * gamma[c] + beta[c]);
        }
    }
    out
}

pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Multi-head `softmax(Q K^T / sqrt(d)) V`, written out term by term.
pub fn dense_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let c = q.cols;
    let d = c / heads;
    let mut out = Mat::zeros(q.rows, c);
    for h in 0..heads {
        for i in 0..q.rows {
            let scores: Vec<f64> = (0..k.rows)
                .map(|j| (0..d).map(|t| q.at(i, h * d + t) * k.at(j, h * d + t)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                let s: f64 = (0..k.rows).map(|j| e[j] / z * v.at(j, h * d + t)).sum();
                out.set(i, h * d + t, s);
            }
        }
    }
    out
}

/// Row-major 2-D sine/cosine table: first half of the channels encodes the row, second half the column.
pub fn sine_positions(height: usize, width: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let quarter = half / 2;
    let mut out = Mat::zeros(height * width, dim);
    for r in 0..height {
        for c in 0..width {
            for (block, p) in [r, c].into_iter().enumerate() {
                for i in 0..quarter {
                    let f = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    out.set(r * width + c, block * half + i, (p as f64 * f).sin());
                    out.set(r * width + c, block * half + quarter + i, (p as f64 * f).cos());
                }
            }
        }
    }
    out
}

/// Success AUC by explicit enumeration of the 51 thresholds `i / 50`.
pub fn brute_auc(ious: &[f64]) -> f64 {
    let n = ious.len() as f64;
    let mut total = 0.0;
    for i in 0..=50 {
        let t = i as f64 / 50.0;
        let mut hits = 0usize;
        for &v in ious {
            if v > 0.0 && v >= t {
                hits += 1;
            }
        }
        total += hits as f64 / n;
    }
    total / 51.0
}

pub fn brute_box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn brute_jaccard(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pixels of `m` with a 4-neighbour outside `m` or on the image border.
pub fn brute_boundary(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w && m.get(r as usize, c as usize);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if inside(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| {
                let (rr, cc) = (r + dr, c + dc);
                rr < 0 || cc < 0 || rr >= h || cc >= w || !inside(rr, cc)
            }) {
                out.push((r, c));
            }
        }
    }
    out
}

/// Boundary F with matches found by scanning every pair of boundary pixels
/// within Euclidean distance `ceil(0.008 * diagonal)` (at least 1).
pub fn brute_boundary_f(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (bp, bg) = (brute_boundary(pred), brute_boundary(gt));
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let (h, w) = (pred.height() as f64, pred.width() as f64);
    let radius = ((0.008 * (h * h + w * w).sqrt()).ceil() as i64).max(1);
    let near = |a: &(i64, i64), set: &[(i64, i64)]| {
        set.iter().any(|b| (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2) <= radius * radius)
    };
    let precision = bp.iter().filter(|p| near(p, &bg)).count() as f64 / bp.len() as f64;
    let recall = bg.iter().filter(|g| near(g, &bp)).count() as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

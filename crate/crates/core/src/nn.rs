//! Parameter storage and the small set of layers the model is built from.
//!
//! Every layer works on unbatched tensors: token sequences are `(len, dim)`
//! and images are `(1, channels, height, width)`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Standard normal scaled by the given deviation.
    Normal(f64),
    /// `gain` where the column index modulo the row count equals the row
    /// index: the identity, repeated side by side for wide matrices.
    Eye(f64),
}

/// Named trainable parameters with deterministic, seeded initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Eye(gain) => {
                let (rows, cols) = match shape {
                    [r, c] if *r > 0 && c % r == 0 => (*r, *c),
                    _ => return Err(Error::Shape(format!("identity init needs a (n, k * n) matrix, got {shape:?}"))),
                };
                (0..rows * cols).map(|i| if (i % cols) % rows == i / cols { gain } else { 0.0 }).collect()
            }
            Init::Normal(std) => {
                let normal = rand_distr::Normal::new(0.0, std).expect("finite deviation");
                (0..n).map(|_| self.rng.sample(normal)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let b = fan_in_bound(in_dim);
        Ok(Self {
            weight: ps.var(&format!("{name}.weight"), &[in_dim, out_dim], Init::Uniform(b))?,
            bias: ps.var(&format!("{name}.bias"), &[out_dim], Init::Uniform(b))?,
        })
    }

    /// Layer starting as `copies` side-by-side copies of `gain * x`.
    pub fn identity(ps: &mut ParamStore, name: &str, dim: usize, copies: usize, gain: f64) -> Result<Self> {
        Ok(Self {
            weight: ps.var(&format!("{name}.weight"), &[dim, dim * copies], Init::Eye(gain))?,
            bias: ps.var(&format!("{name}.bias"), &[dim * copies], Init::Zeros)?,
        })
    }

    pub fn zeros(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.var(&format!("{name}.weight"), &[in_dim, out_dim], Init::Zeros)?,
            bias: ps.var(&format!("{name}.bias"), &[out_dim], Init::Zeros)?,
        })
    }

    /// `(len, in) -> (len, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.var(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: ps.var(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let b = fan_in_bound(in_ch * kernel * kernel);
        Ok(Self {
            weight: ps.var(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], Init::Uniform(b))?,
            bias: ps.var(&format!("{name}.bias"), &[out_ch], Init::Uniform(b))?,
            stride,
            padding: kernel / 2,
        })
    }

    /// `(1, C_in, H, W) -> (1, C_out, H_out, W_out)`.
    ///
    /// Single images go through an explicit patch gather and one matmul, whose
    /// backward pass is much cheaper on CPU than the native convolution's.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out_ch, in_ch, k, _) = self.weight.dims4()?;
        let (n, c, h, w) = x.dims4()?;
        if n != 1 || c != in_ch {
            let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
            return Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?);
        }
        let p = self.padding;
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let ho = (hp - k) / self.stride + 1;
        let wo = (wp - k) / self.stride + 1;
        let wmat = self.weight.reshape((out_ch, in_ch * k * k))?;
        let cols = if k == 1 && self.stride == 1 {
            x.reshape((c, h * w))?.t()?
        } else {
            let padded = if p > 0 { x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)? } else { x.clone() };
            let flat = padded.flatten_all()?;
            let idx = patch_indices(c, hp, wp, k, self.stride, ho, wo);
            let len = idx.len();
            flat.index_select(&Tensor::from_vec(idx, len, x.device())?, 0)?.reshape((ho * wo, c * k * k))?
        };
        let y = cols.matmul(&wmat.t()?)?.broadcast_add(&self.bias)?;
        Ok(y.t()?.reshape((1, out_ch, ho, wo))?)
    }
}

/// Flat input indices of every `k x k` patch, one row per output position,
/// columns ordered like a `(C, k, k)` weight slice.
fn patch_indices(c: usize, hp: usize, wp: usize, k: usize, stride: usize, ho: usize, wo: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(ho * wo * c * k * k);
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                for ky in 0..k {
                    let row = (ch * hp + oy * stride + ky) * wp + ox * stride;
                    idx.extend((0..k).map(|kx| (row + kx) as u32));
                }
            }
        }
    }
    idx
}

/// Numerically stable softmax over the last dimension, built from
/// differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&shift)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Scaled dot-product attention split over `heads`.
///
/// `q: (nq, c)`, `k: (nk, c)`, `v: (nk, c)` with `c` divisible by `heads`.
/// Returns the `(nq, c)` output and the `(heads, nq, nk)` weights.
pub fn attention_with_weights(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (nq, c) = q.dims2()?;
    let (nk, ck) = k.dims2()?;
    if ck != c || v.dims2()? != (nk, c) || c % heads != 0 {
        return Err(Error::Shape(format!(
            "attention q {:?} k {:?} v {:?} heads {heads}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let d = c / heads;
    let split = |t: &Tensor, n: usize| -> Result<Tensor> {
        Ok(t.reshape((n, heads, d))?.transpose(0, 1)?.contiguous()?)
    };
    let qh = split(q, nq)?;
    let kh = split(k, nk)?;
    let vh = split(v, nk)?;
    let scores = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (d as f64).sqrt())?;
    let weights = softmax_last(&scores)?;
    let out = weights.matmul(&vh)?.transpose(0, 1)?.contiguous()?.reshape((nq, c))?;
    Ok((out, weights))
}

pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    Ok(attention_with_weights(q, k, v, heads)?.0)
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            out: Linear::new(ps, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, key, value)?.0)
    }

    pub fn forward_with_weights(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<(Tensor, Tensor)> {
        let (o, w) = attention_with_weights(
            &self.q.forward(query)?,
            &self.k.forward(key)?,
            &self.v.forward(value)?,
            self.heads,
        )?;
        Ok((self.out.forward(&o)?, w))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm self-attention block; positions are added to queries and keys.
#[derive(Debug, Clone)]
pub struct SelfAttentionLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl SelfAttentionLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, dim * 2)?,
        })
    }

    pub fn forward(&self, x: &Tensor, pos: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let qk = match pos {
            Some(p) => h.broadcast_add(p)?,
            None => h.clone(),
        };
        let x = (x + self.attn.forward(&qk, &qk, &h)?)?;
        Ok((&x + self.ffn.forward(&self.norm2.forward(&x)?)?)?)
    }

    pub fn forward_with_weights(&self, x: &Tensor, pos: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let h = self.norm1.forward(x)?;
        let qk = match pos {
            Some(p) => h.broadcast_add(p)?,
            None => h.clone(),
        };
        let (a, w) = self.attn.forward_with_weights(&qk, &qk, &h)?;
        let x = (x + a)?;
        Ok(((&x + self.ffn.forward(&self.norm2.forward(&x)?)?)?, w))
    }
}

/// 2-D sinusoidal encoding, `(height * width, dim)`; the first half of the
/// channels encodes the row, the second half the column.
pub fn sinusoidal_2d(height: usize, width: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!("positional dim {dim} must be divisible by 4")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(height * width * dim);
    for r in 0..height {
        for c in 0..width {
            for p in [r, c] {
                for &f in &freqs {
                    data.push((p as f64 * f).sin());
                }
                for &f in &freqs {
                    data.push((p as f64 * f).cos());
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (height * width, dim), device)?.to_dtype(dtype)?)
}

/// Row-stochastic `(out_len, in_len)` matrix for 1-D linear interpolation
/// with half-pixel centers (`align_corners = false`).
pub fn linear_resize_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let t = src - lo as f64;
        m[i * in_len + lo] += 1.0 - t;
        m[i * in_len + hi] += t;
    }
    m
}

/// Bilinear resize of `(channels, h, w)` to `(channels, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(linear_resize_matrix(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let aw_t = Tensor::from_vec(linear_resize_matrix(out_w, w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let rows = ah.broadcast_matmul(x)?;
    Ok(rows.broadcast_matmul(&aw_t)?)
}

/// Bilinear sampling weights for a `k x k` grid of points spread evenly over
/// a box given in feature-cell coordinates (cell `c` is centred on `c`).
/// Returns a `(k * k, height * width)` row-stochastic matrix.
pub fn box_sampling_matrix(
    fx1: f64,
    fy1: f64,
    fx2: f64,
    fy2: f64,
    k: usize,
    height: usize,
    width: usize,
) -> Vec<f64> {
    let mut m = vec![0.0; k * k * height * width];
    let axis = |lo: f64, hi: f64, j: usize, len: usize| -> (usize, usize, f64) {
        let p = (lo + (j as f64 + 0.5) * (hi - lo) / k as f64).clamp(0.0, (len - 1) as f64);
        let a = p.floor() as usize;
        let b = (a + 1).min(len - 1);
        (a, b, p - a as f64)
    };
    for i in 0..k {
        let (r0, r1, ty) = axis(fy1, fy2, i, height);
        for j in 0..k {
            let (c0, c1, tx) = axis(fx1, fx2, j, width);
            let row = &mut m[(i * k + j) * height * width..(i * k + j + 1) * height * width];
            row[r0 * width + c0] += (1.0 - ty) * (1.0 - tx);
            row[r0 * width + c1] += (1.0 - ty) * tx;
            row[r1 * width + c0] += ty * (1.0 - tx);
            row[r1 * width + c1] += ty * tx;
        }
    }
    m
}

/// Flattens `(1, c, h, w)` to `(h * w, c)` tokens.
pub fn grid_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    Ok(x.reshape((c, h * w))?.t()?.contiguous()?)
}

/// Inverse of [`grid_to_tokens`].
pub fn tokens_to_grid(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    if n != h * w {
        return Err(Error::Shape(format!("{n} tokens cannot form a {h}x{w} grid")));
    }
    Ok(x.t()?.contiguous()?.reshape((1, c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gathered_conv_matches_native() {
        let mut ps = ParamStore::new(3, DType::F64);
        for (cin, cout, k, stride, h, w) in [(3, 5, 3, 2, 9, 8), (4, 2, 3, 1, 6, 7), (6, 3, 1, 1, 5, 5)] {
            let conv = Conv2d::new(&mut ps, &format!("c{cin}{k}{stride}"), cin, cout, k, stride).unwrap();
            let x = Tensor::randn(0f64, 1.0, (1, cin, h, w), &Device::Cpu).unwrap();
            let native = x
                .conv2d(&conv.weight, conv.padding, stride, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.reshape((1, cout, 1, 1)).unwrap())
                .unwrap();
            let ours = conv.forward(&x).unwrap();
            assert_eq!(ours.dims(), native.dims());
            let diff = (ours - native).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "{diff}");
        }
    }

    #[test]
    fn resize_matrix_rows_sum_to_one() {
        for (o, i) in [(8, 2), (32, 8), (5, 5), (3, 7)] {
            let m = linear_resize_matrix(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        // Identity when sizes match.
        let m = linear_resize_matrix(4, 4);
        for r in 0..4 {
            assert_eq!(m[r * 4 + r], 1.0);
        }
    }

    #[test]
    fn softmax_rows_normalized() {
        let x = Tensor::new(&[[1f64, 2., 3.], [1000., 0., -1000.]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let ls = log_softmax_last(&x).unwrap().exp().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!((ls[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_matrix_is_stochastic() {
        let m = box_sampling_matrix(-0.5, 1.2, 3.7, 7.5, 3, 8, 8);
        for r in 0..9 {
            let s: f64 = m[r * 64..(r + 1) * 64].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tokens_grid_roundtrip() {
        let x = Tensor::arange(0f32, 24., &Device::Cpu).unwrap().reshape((1, 2, 3, 4)).unwrap();
        let t = grid_to_tokens(&x).unwrap();
        assert_eq!(t.dims(), &[12, 2]);
        assert_eq!(t.get(1).unwrap().to_vec1::<f32>().unwrap(), vec![1., 13.]);
        let back = tokens_to_grid(&t, 3, 4).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn param_store_is_seeded() {
        let mut a = ParamStore::new(7, DType::F32);
        let mut b = ParamStore::new(7, DType::F32);
        let ta = a.var("w", &[3, 3], Init::Normal(1.0)).unwrap();
        let tb = b.var("w", &[3, 3], Init::Normal(1.0)).unwrap();
        assert_eq!(ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(), tb.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(a.var("w", &[1], Init::Zeros).is_err());
    }
}

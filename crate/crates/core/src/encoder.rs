//! Strided convolutional backbone shared by reference, memory and query frames.

use candle_core::{Device, Tensor};

use crate::config::ModelConfig;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{grid_to_tokens, Conv2d, LayerNorm, ParamStore};

/// Per-frame encoder output.
#[derive(Debug, Clone)]
pub struct VisualEmbedding {
    /// `(H * W, C)` tokens at the encoder stride.
    pub features: Tensor,
    /// `(1, c, H_I / 8, W_I / 8)` and `(1, c, H_I / 4, W_I / 4)` maps, coarse to fine.
    pub skips: Vec<Tensor>,
    pub stride: usize,
    /// Token grid `(H, W)`.
    pub grid: (usize, usize),
    /// Input size before padding.
    pub image_size: (usize, usize),
    /// Input size after padding to a multiple of the stride.
    pub padded_size: (usize, usize),
}

impl VisualEmbedding {
    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Reflect-pads the bottom and right edges up to multiples of `multiple`.
pub fn pad_to_multiple(img: &Image, multiple: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 {
        return Err(Error::Shape("cannot encode an empty image".into()));
    }
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return Ok(img.clone());
    }
    if (ph > h && h < 2) || (pw > w && w < 2) {
        return Err(Error::Shape(format!(
            "{h}x{w} image is too small to reflect-pad to {ph}x{pw}"
        )));
    }
    let mut out = Image::filled(ph, pw, [0.0; 3]);
    for r in 0..ph {
        for c in 0..pw {
            out.set_pixel(r, c, img.pixel(reflect(r as isize, h), reflect(c as isize, w)));
        }
    }
    Ok(out)
}

pub struct Encoder {
    stem: Conv2d,
    s4_down: Conv2d,
    s4_conv: Conv2d,
    s8_down: Conv2d,
    s8_conv: Conv2d,
    s16_down: Conv2d,
    s16_conv: Conv2d,
    norm: LayerNorm,
    mean: [f32; 3],
    std: [f32; 3],
    device: Device,
    dtype: candle_core::DType,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let [c2, c4, c8] = cfg.encoder_channels;
        let c = cfg.channels;
        Ok(Self {
            stem: Conv2d::new(ps, "encoder.stem", 3, c2, 3, 2)?,
            s4_down: Conv2d::new(ps, "encoder.s4_down", c2, c4, 3, 2)?,
            s4_conv: Conv2d::new(ps, "encoder.s4_conv", c4, c4, 3, 1)?,
            s8_down: Conv2d::new(ps, "encoder.s8_down", c4, c8, 3, 2)?,
            s8_conv: Conv2d::new(ps, "encoder.s8_conv", c8, c8, 3, 1)?,
            s16_down: Conv2d::new(ps, "encoder.s16_down", c8, c, 3, 2)?,
            s16_conv: Conv2d::new(ps, "encoder.s16_conv", c, c, 3, 1)?,
            norm: LayerNorm::new(ps, "encoder.norm", c)?,
            mean: cfg.pixel_mean,
            std: cfg.pixel_std,
            device: ps.device().clone(),
            dtype: ps.dtype(),
        })
    }

    fn to_tensor(&self, img: &Image) -> Result<Tensor> {
        let (h, w) = (img.height(), img.width());
        let mut chw = vec![0f32; 3 * h * w];
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            for ch in 0..3 {
                chw[ch * h * w + i] = (px[ch] - self.mean[ch]) / self.std[ch];
            }
        }
        Ok(Tensor::from_vec(chw, (1, 3, h, w), &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn encode(&self, frame: &Image) -> Result<VisualEmbedding> {
        let stride = ModelConfig::STRIDE;
        let padded = pad_to_multiple(frame, stride)?;
        let x = self.to_tensor(&padded)?;
        let x = self.stem.forward(&x)?.relu()?;
        let x = self.s4_down.forward(&x)?.relu()?;
        let skip4 = self.s4_conv.forward(&x)?.relu()?;
        let x = self.s8_down.forward(&skip4)?.relu()?;
        let skip8 = self.s8_conv.forward(&x)?.relu()?;
        let x = self.s16_down.forward(&skip8)?.relu()?;
        let x = self.s16_conv.forward(&x)?;
        let (_, _, h, w) = x.dims4()?;
        let features = self.norm.forward(&grid_to_tokens(&x)?)?;
        Ok(VisualEmbedding {
            features,
            skips: vec![skip8, skip4],
            stride,
            grid: (h, w),
            image_size: (frame.height(), frame.width()),
            padded_size: (padded.height(), padded.width()),
        })
    }
}

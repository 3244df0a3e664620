//! Dual-branch decoding of the propagated embedding.
//!
//! The mask branch is a small feature pyramid decoder. The box branch finds,
//! for every object slot and every box side, a probability map over the
//! pinpoints touching that side. Summing a side map along the side's own
//! direction leaves a 1-D distribution over the side-aligned coordinate, and
//! the expectation of that distribution is the box coordinate.

use candle_core::{DType, Tensor, D};

use crate::config::{HeadKind, LocalizerKind, ModelConfig};
use crate::encoder::VisualEmbedding;
use crate::error::{Error, Result};
use crate::geometry::{iou, mask_to_box, BBox, LabelMap};
use crate::nn::{
    resize_bilinear, sinusoidal_2d, softmax_last, tokens_to_grid, grid_to_tokens, Conv2d, Linear, ParamStore,
    SelfAttentionLayer,
};
use crate::propagation::PropagatedEmbedding;
use crate::uidm::{IdAssignment, IdBank};

/// Side order used in the stacked pinpoint maps.
pub const SIDES: [&str; 4] = ["top", "bottom", "left", "right"];

/// Objects whose total mask probability is below this many pixels are absent.
pub const ABSENT_MASS: f64 = 0.5;

/// Mask branch output for one frame.
#[derive(Debug, Clone)]
pub struct MaskPrediction {
    /// `(M + 1, H_s, W_s)` logits at stride 4 (padded frame).
    pub logits: Tensor,
    /// Background plus assigned slots, ascending.
    pub active_channels: Vec<usize>,
    /// Object label of each active channel.
    pub channel_objects: Vec<usize>,
    /// `(H_I * W_I, K)` upsampled logits of the active channels.
    pub pixel_logits: Tensor,
    /// `(H_I * W_I, K)` probabilities over the active channels.
    pub probs: Tensor,
    pub height: usize,
    pub width: usize,
}

impl MaskPrediction {
    pub fn num_objects(&self) -> usize {
        self.channel_objects.len() - 1
    }

    /// Probabilities over all `M + 1` channels; inactive channels are exactly 0.
    pub fn full_probs(&self, capacity: usize) -> Result<Tensor> {
        let (p, _) = self.probs.dims2()?;
        let probs = self.probs.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut full = vec![0.0; p * (capacity + 1)];
        for (i, row) in probs.iter().enumerate() {
            for (k, &ch) in self.active_channels.iter().enumerate() {
                full[i * (capacity + 1) + ch] = row[k];
            }
        }
        Ok(Tensor::from_vec(full, (p, capacity + 1), self.probs.device())?)
    }

    /// Total probability mass of each object `1..=N`, in pixels.
    pub fn object_mass(&self) -> Result<Vec<f64>> {
        let sums = self.probs.sum(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let mut mass = vec![0.0; self.num_objects()];
        for (k, &obj) in self.channel_objects.iter().enumerate() {
            if obj > 0 {
                mass[obj - 1] = sums[k];
            }
        }
        Ok(mass)
    }

    /// Argmax labels at full resolution.
    pub fn labels(&self) -> Result<LabelMap> {
        let probs = self.probs.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let data = probs
            .iter()
            .map(|row| {
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                self.channel_objects[best] as u8
            })
            .collect();
        LabelMap::new(self.height, self.width, self.num_objects(), data)
    }
}

/// Feature-pyramid mask decoder.
pub struct MaskDecoder {
    top: Conv2d,
    lateral8: Conv2d,
    lateral4: Conv2d,
    smooth8: Conv2d,
    smooth4: Conv2d,
    embed: Conv2d,
    /// Direct path from the propagated embedding into the readout.
    identity: Linear,
    /// `(M + 1, C)` ID bank shared with the identification module.
    bank: Tensor,
}

impl MaskDecoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, bank: &IdBank) -> Result<Self> {
        let dc = cfg.decoder_channels;
        let [_, c4, c8] = cfg.encoder_channels;
        Ok(Self {
            top: Conv2d::new(ps, "mask_decoder.top", cfg.channels, dc, 1, 1)?,
            lateral8: Conv2d::new(ps, "mask_decoder.lateral8", c8, dc, 1, 1)?,
            lateral4: Conv2d::new(ps, "mask_decoder.lateral4", c4, dc, 1, 1)?,
            smooth8: Conv2d::new(ps, "mask_decoder.smooth8", dc, dc, 3, 1)?,
            smooth4: Conv2d::new(ps, "mask_decoder.smooth4", dc, dc, 3, 1)?,
            embed: Conv2d::new(ps, "mask_decoder.embed", dc, cfg.channels, 1, 1)?,
            identity: Linear::identity(ps, "mask_decoder.identity", cfg.channels, 1, 1.0)?,
            bank: bank.table().clone(),
        })
    }

    fn upsample_to(x: &Tensor, like: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let (_, _, th, tw) = like.dims4()?;
        Ok(resize_bilinear(&x.reshape((c, h, w))?, th, tw)?.unsqueeze(0)?)
    }

    /// `(1, M + 1, H_I / 4, W_I / 4)` logits: decoder features scored
    /// against every ID bank vector, so channel `k` reads identity `k`.
    pub fn forward_logits(&self, d: &PropagatedEmbedding, skips: &[Tensor]) -> Result<Tensor> {
        let [skip8, skip4] = skips else {
            return Err(Error::Shape(format!("expected 2 skip maps, got {}", skips.len())));
        };
        let (h, w) = d.grid;
        let (_, _, h8, w8) = skip8.dims4()?;
        if (h8, w8) != (2 * h, 2 * w) {
            return Err(Error::Shape(format!("skip {h8}x{w8} does not match a {h}x{w} embedding")));
        }
        let x = self.top.forward(&tokens_to_grid(&d.tokens, h, w)?)?;
        let x8 = (Self::upsample_to(&x, skip8)? + self.lateral8.forward(skip8)?)?;
        let x8 = self.smooth8.forward(&x8)?.relu()?;
        let x4 = (Self::upsample_to(&x8, skip4)? + self.lateral4.forward(skip4)?)?;
        let x4 = self.smooth4.forward(&x4)?.relu()?;
        let direct = tokens_to_grid(&self.identity.forward(&d.tokens)?, h, w)?;
        let e = (self.embed.forward(&x4)? + Self::upsample_to(&direct, &x4)?)?;
        let (_, c, h4, w4) = e.dims4()?;
        let logits = self.bank.matmul(&e.reshape((c, h4 * w4))?)?;
        Ok(logits.reshape((1, self.bank.dim(0)?, h4, w4))?)
    }

    pub fn decode_mask(
        &self,
        d: &PropagatedEmbedding,
        frame: &VisualEmbedding,
        assignment: &IdAssignment,
    ) -> Result<MaskPrediction> {
        let logits = self.forward_logits(d, &frame.skips)?.squeeze(0)?;
        let active = assignment.active_channels();
        let idx: Vec<u32> = active.iter().map(|&c| c as u32).collect();
        let idx = Tensor::from_vec(idx, active.len(), logits.device())?;
        let active_logits = logits.index_select(&idx, 0)?;
        let (ph, pw) = frame.padded_size;
        let (ih, iw) = frame.image_size;
        let up = resize_bilinear(&active_logits, ph, pw)?;
        let up = if (ih, iw) == (ph, pw) { up } else { up.narrow(1, 0, ih)?.narrow(2, 0, iw)? };
        let pixel_logits = up.reshape((active.len(), ih * iw))?.t()?.contiguous()?;
        let probs = softmax_last(&pixel_logits)?;
        Ok(MaskPrediction {
            logits,
            channel_objects: assignment.channel_objects(),
            active_channels: active,
            pixel_logits,
            probs,
            height: ih,
            width: iw,
        })
    }
}

/// 1-D coordinate distributions for every object slot.
#[derive(Debug, Clone)]
pub struct BoxDistributions {
    /// `(M, W)`.
    pub px1: Tensor,
    pub px2: Tensor,
    /// `(M, H)`.
    pub py1: Tensor,
    pub py2: Tensor,
    /// `(4, M, H, W)` per-side probability maps in [`SIDES`] order, when the head has them.
    pub side_maps: Option<Tensor>,
}

/// Expectation of coordinates `0..L` under the distributions on the last axis.
pub fn soft_argmax(dist: &Tensor) -> Result<Tensor> {
    let len = dist.dim(D::Minus1)?;
    let coords = Tensor::arange(0u32, len as u32, dist.device())?.to_dtype(dist.dtype())?;
    Ok(dist.broadcast_mul(&coords)?.sum(D::Minus1)?)
}

/// Softmax over the whole grid for each slot and side, then marginals.
///
/// `scores` is `(H, W, 4M)` with channels grouped by side in [`SIDES`] order.
pub fn aggregate_decoupled(scores: &Tensor) -> Result<BoxDistributions> {
    let (h, w, c4) = scores.dims3()?;
    if c4 % 4 != 0 {
        return Err(Error::Shape(format!("{c4} score channels is not a multiple of 4")));
    }
    let m = c4 / 4;
    let flat = scores.reshape((h * w, c4))?.t()?.contiguous()?;
    let maps = softmax_last(&flat)?.reshape((4, m, h, w))?;
    let side = |i: usize| maps.get(i);
    Ok(BoxDistributions {
        py1: side(0)?.sum(2)?,
        py2: side(1)?.sum(2)?,
        px1: side(2)?.sum(1)?,
        px2: side(3)?.sum(1)?,
        side_maps: Some(maps),
    })
}

enum Localizer {
    Transformer(Vec<SelfAttentionLayer>),
    Conv(Vec<Conv2d>),
}

/// Box-branch output for one frame.
#[derive(Debug, Clone)]
pub struct BoxPrediction {
    /// `(M, 4)` as `[x1, y1, x2, y2]` image pixels, pairs ordered; row `s - 1` belongs to bank slot `s`.
    pub boxes: Tensor,
    pub distributions: BoxDistributions,
    /// Box of each object `1..=N`, read from its assigned slot.
    pub selected: Vec<BBox>,
}

pub struct BoxHead {
    kind: HeadKind,
    localizer: Localizer,
    proj: Option<Linear>,
    proj_x: Option<Linear>,
    proj_y: Option<Linear>,
    capacity: usize,
    /// `(M, C)` object rows of the ID bank.
    slots: Tensor,
}

/// Scores `(L, G * C)` query groups against `(M, C)` slot vectors, giving `(L, G * M)`
/// with channels grouped by `G`.
fn slot_scores(x: &Tensor, slots: &Tensor) -> Result<Tensor> {
    let (l, gc) = x.dims2()?;
    let (m, c) = slots.dims2()?;
    let g = gc / c;
    let s = x.reshape((l * g, c))?.matmul(&slots.t()?)?;
    Ok(s.reshape((l, g * m))?)
}

impl BoxHead {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, bank: &IdBank) -> Result<Self> {
        let c = cfg.channels;
        let m = cfg.capacity;
        let localizer = match cfg.localizer {
            LocalizerKind::Transformer => Localizer::Transformer(
                (0..cfg.head_layers)
                    .map(|i| SelfAttentionLayer::new(ps, &format!("box_head.sa{i}"), c, cfg.heads))
                    .collect::<Result<_>>()?,
            ),
            LocalizerKind::Conv => Localizer::Conv(
                (0..cfg.head_layers)
                    .map(|i| Conv2d::new(ps, &format!("box_head.conv{i}"), c, c, 3, 1))
                    .collect::<Result<_>>()?,
            ),
        };
        let (proj, proj_x, proj_y) = match cfg.head {
            HeadKind::Pinpoint => (Some(Linear::new(ps, "box_head.sides", c, 4 * c)?), None, None),
            HeadKind::Corner => (Some(Linear::new(ps, "box_head.corners", c, 2 * c)?), None, None),
            HeadKind::PinpointImplicit => (
                None,
                Some(Linear::new(ps, "box_head.x", c, 2 * c)?),
                Some(Linear::new(ps, "box_head.y", c, 2 * c)?),
            ),
        };
        let slots = bank.table().narrow(0, 1, m)?;
        Ok(Self { kind: cfg.head, localizer, proj, proj_x, proj_y, capacity: m, slots })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    fn localize(&self, d: &PropagatedEmbedding) -> Result<Tensor> {
        let (h, w) = d.grid;
        match &self.localizer {
            Localizer::Transformer(layers) => {
                let c = d.tokens.dim(1)?;
                let pos = sinusoidal_2d(h, w, c, d.tokens.dtype(), d.tokens.device())?;
                let mut x = d.tokens.clone();
                for l in layers {
                    x = l.forward(&x, Some(&pos))?;
                }
                Ok(x)
            }
            Localizer::Conv(convs) => {
                let mut x = tokens_to_grid(&d.tokens, h, w)?;
                for conv in convs {
                    x = (&x + conv.forward(&x)?.relu()?)?;
                }
                grid_to_tokens(&x)
            }
        }
    }

    /// Per-side pinpoint score maps `(H, W, 4M)`; only for the pinpoint head.
    pub fn localize_pinpoints(&self, d: &PropagatedEmbedding) -> Result<Tensor> {
        let proj = match (self.kind, &self.proj) {
            (HeadKind::Pinpoint, Some(p)) => p,
            _ => return Err(Error::Config(format!("{:?} head has no pinpoint maps", self.kind))),
        };
        let (h, w) = d.grid;
        let scores = slot_scores(&proj.forward(&self.localize(d)?)?, &self.slots)?;
        Ok(scores.reshape((h, w, 4 * self.capacity))?)
    }

    pub fn distributions(&self, d: &PropagatedEmbedding) -> Result<BoxDistributions> {
        let (h, w) = d.grid;
        let m = self.capacity;
        match self.kind {
            HeadKind::Pinpoint => aggregate_decoupled(&self.localize_pinpoints(d)?),
            HeadKind::Corner => {
                let x = self.localize(d)?;
                let scores = slot_scores(&self.proj.as_ref().expect("corner projection").forward(&x)?, &self.slots)?;
                let maps = softmax_last(&scores.t()?.contiguous()?)?.reshape((2, m, h, w))?;
                let (tl, br) = (maps.get(0)?, maps.get(1)?);
                Ok(BoxDistributions {
                    px1: tl.sum(1)?,
                    py1: tl.sum(2)?,
                    px2: br.sum(1)?,
                    py2: br.sum(2)?,
                    side_maps: None,
                })
            }
            HeadKind::PinpointImplicit => {
                let x = self.localize(d)?;
                let grid = tokens_to_grid(&x, h, w)?.squeeze(0)?;
                let cols = grid.mean(1)?.t()?.contiguous()?;
                let rows = grid.mean(2)?.t()?.contiguous()?;
                let sx = slot_scores(&self.proj_x.as_ref().expect("x projection").forward(&cols)?, &self.slots)?;
                let sy = slot_scores(&self.proj_y.as_ref().expect("y projection").forward(&rows)?, &self.slots)?;
                let px = softmax_last(&sx.t()?.contiguous()?)?;
                let py = softmax_last(&sy.t()?.contiguous()?)?;
                Ok(BoxDistributions {
                    px1: px.narrow(0, 0, m)?,
                    px2: px.narrow(0, m, m)?,
                    py1: py.narrow(0, 0, m)?,
                    py2: py.narrow(0, m, m)?,
                    side_maps: None,
                })
            }
        }
    }

    /// Localization, aggregation and soft-argmax; slots are read at the assigned bank indices.
    pub fn predict_boxes(
        &self,
        d: &PropagatedEmbedding,
        frame: &VisualEmbedding,
        assignment: &IdAssignment,
    ) -> Result<BoxPrediction> {
        let dist = self.distributions(d)?;
        let boxes = boxes_from_distributions(&dist, frame.padded_size, frame.image_size)?;
        let host = boxes.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let selected = assignment
            .bank_indices()
            .iter()
            .map(|&slot| {
                let b = &host[slot - 1];
                BBox::new(b[0], b[1], b[2], b[3])
            })
            .collect();
        Ok(BoxPrediction { boxes, distributions: dist, selected })
    }
}

/// Maps feature-cell coordinate `u` on a `cells`-long axis to image pixels,
/// sending the first cell to pixel 0 and the last to pixel `pixels - 1`.
pub fn cells_to_pixels(cells: usize, pixels: usize) -> f64 {
    if cells <= 1 {
        0.0
    } else {
        (pixels - 1) as f64 / (cells - 1) as f64
    }
}

/// `(M, 4)` ordered `[x1, y1, x2, y2]` boxes in image pixels.
pub fn boxes_from_distributions(
    dist: &BoxDistributions,
    padded: (usize, usize),
    image: (usize, usize),
) -> Result<Tensor> {
    let w = dist.px1.dim(1)?;
    let h = dist.py1.dim(1)?;
    let sx = cells_to_pixels(w, padded.1);
    let sy = cells_to_pixels(h, padded.0);
    let x1 = (soft_argmax(&dist.px1)? * sx)?;
    let x2 = (soft_argmax(&dist.px2)? * sx)?;
    let y1 = (soft_argmax(&dist.py1)? * sy)?;
    let y2 = (soft_argmax(&dist.py2)? * sy)?;
    let xmax = (image.1 - 1) as f64;
    let ymax = (image.0 - 1) as f64;
    let lo_x = x1.minimum(&x2)?.clamp(0.0, xmax)?;
    let hi_x = x1.maximum(&x2)?.clamp(0.0, xmax)?;
    let lo_y = y1.minimum(&y2)?.clamp(0.0, ymax)?;
    let hi_y = y1.maximum(&y2)?.clamp(0.0, ymax)?;
    Ok(Tensor::stack(&[lo_x, lo_y, hi_x, hi_y], 1)?)
}

/// Per-object IoU between the box branch and the mask branch's tight boxes.
///
/// An object both branches call absent scores 1; disagreement on presence scores 0.
pub fn branch_consistency(boxes: &[Option<BBox>], masks: &LabelMap) -> Vec<f64> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| match (b, mask_to_box(&masks.object_mask(i + 1))) {
            (Some(b), Some(m)) => iou(b, &m),
            (None, None) => 1.0,
            _ => 0.0,
        })
        .collect()
}

//! Training objectives for both output branches and the auxiliary ID reconstruction.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, LabelMap};
use crate::heads::{BoxPrediction, MaskPrediction};
use crate::nn::log_softmax_last;
use crate::uidm::IdAssignment;

/// Smoothing term of the soft Jaccard ratio.
pub const JACCARD_EPS: f64 = 1e-6;

const GIOU_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_jac: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub w_recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_ce: 1.0, w_jac: 1.0, w_l1: 5.0, w_giou: 2.0, w_recon: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_ce, self.w_jac, self.w_l1, self.w_giou, self.w_recon];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        if self.w_ce + self.w_jac <= 0.0 || self.w_l1 + self.w_giou <= 0.0 {
            return Err(Error::Config("joint training needs a positive mask weight and a positive box weight".into()));
        }
        Ok(())
    }
}

/// Format of the reference annotation a clip is initialized from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitFormat {
    Mask,
    Box,
}

/// One draw of the alternating initialization objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSample {
    pub init_format: InitFormat,
    pub p_box: f64,
}

impl ObjectiveSample {
    /// Box initialization with probability `p_box`, mask otherwise.
    pub fn draw(p_box: f64, rng: &mut impl Rng) -> Self {
        let init_format = if rng.random::<f64>() < p_box { InitFormat::Box } else { InitFormat::Mask };
        Self { init_format, p_box }
    }
}

fn object_positions(channel_objects: &[usize]) -> Vec<Option<usize>> {
    let n = channel_objects.iter().copied().max().unwrap_or(0);
    let mut pos = vec![None; n + 1];
    for (k, &obj) in channel_objects.iter().enumerate() {
        pos[obj] = Some(k);
    }
    pos
}

/// `(P, K)` one-hot targets over the active channels.
pub fn one_hot_targets(labels: &[u8], channel_objects: &[usize], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let k = channel_objects.len();
    let pos = object_positions(channel_objects);
    let max = k.saturating_sub(1);
    let mut data = vec![0f64; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        let p = pos
            .get(l as usize)
            .copied()
            .flatten()
            .ok_or(Error::LabelOutOfRange { label: l as usize, max })?;
        data[i * k + p] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), k), device)?.to_dtype(dtype)?)
}

/// Mean per-pixel negative log-likelihood of `labels` under `(P, K)` logits.
///
/// Column `k` of the logits belongs to object `channel_objects[k]`.
pub fn cross_entropy_mask(logits: &Tensor, labels: &[u8], channel_objects: &[usize]) -> Result<Tensor> {
    let (p, k) = logits.dims2()?;
    if p != labels.len() || k != channel_objects.len() {
        return Err(Error::Shape(format!(
            "logits {p}x{k} against {} labels and {} channels",
            labels.len(),
            channel_objects.len()
        )));
    }
    let target = one_hot_targets(labels, channel_objects, logits.dtype(), logits.device())?;
    let nll = (log_softmax_last(logits)? * target)?.sum_all()?.neg()?;
    Ok((nll / p as f64)?)
}

/// Mean over objects of `1 - sum(min(p, y)) / sum(max(p, y))`, background excluded.
pub fn soft_jaccard_loss(probs: &Tensor, labels: &[u8], channel_objects: &[usize]) -> Result<Tensor> {
    let (p, k) = probs.dims2()?;
    if p != labels.len() || k != channel_objects.len() {
        return Err(Error::Shape(format!("probs {p}x{k} against {} labels", labels.len())));
    }
    let objects: Vec<u32> = (0..k).filter(|&c| channel_objects[c] > 0).map(|c| c as u32).collect();
    if objects.is_empty() {
        return Ok(Tensor::zeros((), probs.dtype(), probs.device())?);
    }
    let target = one_hot_targets(labels, channel_objects, probs.dtype(), probs.device())?;
    let inter = probs.minimum(&target)?.sum(0)?;
    let union = probs.maximum(&target)?.sum(0)?;
    let ratio = ((inter + JACCARD_EPS)? / (union + JACCARD_EPS)?)?;
    let idx = Tensor::from_vec(objects.clone(), objects.len(), probs.device())?;
    let per_object = ratio.index_select(&idx, 0)?.affine(-1.0, 1.0)?;
    Ok(per_object.mean_all()?)
}

/// Elementwise GIoU of `(n, 4)` `[x1, y1, x2, y2]` boxes.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| t.narrow(1, i, 1).and_then(|c| c.squeeze(1));
    let (ax1, ay1, ax2, ay2) = (col(a, 0)?, col(a, 1)?, col(a, 2)?, col(a, 3)?);
    let (bx1, by1, bx2, by2) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);
    let area_a = ((&ax2 - &ax1)? * (&ay2 - &ay1)?)?;
    let area_b = ((&bx2 - &bx1)? * (&by2 - &by1)?)?;
    let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
    let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area_a + area_b)? - &inter)?;
    let hw = (ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)?;
    let hh = (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?;
    let hull = (hw * hh)?;
    let iou = (inter / (&union + GIOU_EPS)?)?;
    let empty = ((&hull - &union)? / (&hull + GIOU_EPS)?)?;
    Ok((iou - empty)?)
}

/// Mean absolute coordinate error of `(n, 4)` boxes.
pub fn box_l1(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok((pred - gt)?.abs()?.mean_all()?)
}

/// Mean `1 - GIoU` of `(n, 4)` boxes.
pub fn giou_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok(giou_tensor(pred, gt)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// `w_l1 * L1 + w_giou * (1 - GIoU)` on boxes already normalized by image size.
pub fn box_loss(pred: &Tensor, gt: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    if pred.dim(0)? == 0 {
        return Ok(Tensor::zeros((), pred.dtype(), pred.device())?);
    }
    Ok(((box_l1(pred, gt)? * weights.w_l1)? + (giou_loss(pred, gt)? * weights.w_giou)?)?)
}

/// `(1, 4)` row of image-normalized box coordinates.
pub fn normalized_box(b: &BBox, height: usize, width: usize) -> [f64; 4] {
    let (w, h) = (width as f64, height as f64);
    [b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h]
}

/// Ground truth and predictions for one supervised frame.
pub struct FrameTerms<'a> {
    pub mask: &'a MaskPrediction,
    pub boxes: &'a BoxPrediction,
    pub assignment: &'a IdAssignment,
    /// `None` for box-only data, which disables the mask losses.
    pub labels: Option<&'a LabelMap>,
    pub gt_boxes: &'a [Option<BBox>],
}

/// Reconstruction logits over the active channels and their grid-level targets.
pub struct ReconTerms<'a> {
    pub logits: &'a Tensor,
    pub labels: &'a LabelMap,
    pub channel_objects: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub ce: f64,
    pub jaccard: f64,
    pub l1: f64,
    pub giou: f64,
    pub recon: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted sum of every loss term, averaged over the supervised frames.
///
/// The reference format of a clip only changes how its embedding was built,
/// so the objective itself is the same for both draws of [`ObjectiveSample`].
pub fn total_step_loss(
    frames: &[FrameTerms<'_>],
    recon: Option<ReconTerms<'_>>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let first = frames.first().ok_or_else(|| Error::Shape("no supervised frames".into()))?;
    let dtype = first.mask.pixel_logits.dtype();
    let device = first.mask.pixel_logits.device().clone();
    let zero = || Tensor::zeros((), dtype, &device);
    let (mut ce, mut jac, mut l1, mut gi) = (zero()?, zero()?, zero()?, zero()?);
    for f in frames {
        if let Some(labels) = f.labels {
            let objs = &f.mask.channel_objects;
            ce = (ce + cross_entropy_mask(&f.mask.pixel_logits, labels.data(), objs)?)?;
            jac = (jac + soft_jaccard_loss(&f.mask.probs, labels.data(), objs)?)?;
        }
        let (h, w) = (f.mask.height, f.mask.width);
        let mut rows = Vec::new();
        let mut gt = Vec::new();
        for (i, b) in f.gt_boxes.iter().enumerate() {
            if let Some(b) = b {
                let slot = f.assignment.bank_index(i + 1).ok_or(Error::UnassignedLabel(i + 1))?;
                rows.push(slot as u32 - 1);
                gt.extend(normalized_box(b, h, w));
            }
        }
        if !rows.is_empty() {
            let n = rows.len();
            let idx = Tensor::from_vec(rows, n, &device)?;
            let scale = Tensor::from_vec(vec![1.0 / w as f64, 1.0 / h as f64, 1.0 / w as f64, 1.0 / h as f64], (1, 4), &device)?
                .to_dtype(dtype)?;
            let pred = f.boxes.boxes.index_select(&idx, 0)?.broadcast_mul(&scale)?;
            let gt = Tensor::from_vec(gt, (n, 4), &device)?.to_dtype(dtype)?;
            l1 = (l1 + box_l1(&pred, &gt)?)?;
            gi = (gi + giou_loss(&pred, &gt)?)?;
        }
    }
    let n = frames.len() as f64;
    let (ce, jac, l1, gi) = ((ce / n)?, (jac / n)?, (l1 / n)?, (gi / n)?);
    let recon_loss = match recon {
        Some(r) => cross_entropy_mask(r.logits, r.labels.data(), r.channel_objects)?,
        None => zero()?,
    };
    let total = ((&ce * weights.w_ce)?
        + (&jac * weights.w_jac)?
        + (&l1 * weights.w_l1)?
        + (&gi * weights.w_giou)?
        + (&recon_loss * weights.w_recon)?)?;
    Ok(LossBreakdown {
        ce: scalar(&ce)?,
        jaccard: scalar(&jac)?,
        l1: scalar(&l1)?,
        giou: scalar(&gi)?,
        recon: scalar(&recon_loss)?,
        total,
    })
}

/// Mean IoU over frames where the object is present; a missed box scores 0.
pub fn mean_box_iou(pred: &[Option<BBox>], gt: &[Option<BBox>]) -> Option<f64> {
    let pairs: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter_map(|(p, g)| match (p, g) {
            (Some(p), Some(g)) => Some(crate::geometry::iou(p, g)),
            (None, Some(_)) => Some(0.0),
            _ => None,
        })
        .collect();
    (!pairs.is_empty()).then(|| pairs.iter().sum::<f64>() / pairs.len() as f64)
}

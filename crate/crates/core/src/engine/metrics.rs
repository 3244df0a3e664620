//! Box tracking and mask segmentation metrics.
//!
//! Box conventions: frames where the ground-truth object is absent are
//! skipped; a suppressed prediction on a present object counts as IoU 0 and
//! infinite centre error. Success at threshold `t` requires `IoU > 0` and
//! `IoU >= t`, over 51 thresholds evenly spaced on `[0, 1]`.
//!
//! Mask conventions: absent ground truth is scored as background, so an
//! empty prediction there scores `J = F = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, BinaryMask, LabelMap};

pub const SUCCESS_THRESHOLDS: usize = 51;
pub const PRECISION_PIXELS: f64 = 20.0;
pub const NORM_PRECISION_MAX: f64 = 0.5;
/// Boundary tolerance as a fraction of the image diagonal.
pub const BOUNDARY_TOLERANCE: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VotScores {
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    /// Frames scored (ground truth present).
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VosScores {
    pub j: f64,
    pub f: f64,
    pub g: f64,
}

fn thresholds(max: f64) -> impl Iterator<Item = f64> {
    (0..SUCCESS_THRESHOLDS).map(move |i| max * i as f64 / (SUCCESS_THRESHOLDS - 1) as f64)
}

/// Scores one object track.
pub fn eval_vot(pred: &[Option<BBox>], gt: &[Option<BBox>]) -> Result<VotScores> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    let mut ious = Vec::new();
    let mut errors = Vec::new();
    let mut norm_errors = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        let Some(g) = g else { continue };
        match p {
            Some(p) => {
                let (pcx, pcy) = p.center();
                let (gcx, gcy) = g.center();
                let (dx, dy) = (pcx - gcx, pcy - gcy);
                ious.push(iou(p, g));
                errors.push(dx.hypot(dy));
                norm_errors.push((dx / g.width().max(1.0)).hypot(dy / g.height().max(1.0)));
            }
            None => {
                ious.push(0.0);
                errors.push(f64::INFINITY);
                norm_errors.push(f64::INFINITY);
            }
        }
    }
    let n = ious.len();
    if n == 0 {
        return Ok(VotScores { auc: 1.0, precision: 1.0, norm_precision: 1.0, frames: 0 });
    }
    let frac = |count: usize| count as f64 / n as f64;
    let auc = thresholds(1.0)
        .map(|t| frac(ious.iter().filter(|&&v| v > 0.0 && v >= t).count()))
        .sum::<f64>()
        / SUCCESS_THRESHOLDS as f64;
    let precision = frac(errors.iter().filter(|&&e| e < PRECISION_PIXELS).count());
    let norm_precision = thresholds(NORM_PRECISION_MAX)
        .map(|t| frac(norm_errors.iter().filter(|&&e| e <= t).count()))
        .sum::<f64>()
        / SUCCESS_THRESHOLDS as f64;
    Ok(VotScores { auc, precision, norm_precision, frames: n })
}

/// Foreground pixels with a 4-neighbour outside the mask; the image border counts as outside.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = BinaryMask::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            out.set(r, c, edge);
        }
    }
    out
}

/// Tolerance radius in pixels for an image of this size (at least 1).
pub fn boundary_radius(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((BOUNDARY_TOLERANCE * diag).ceil() as usize).max(1)
}

/// Disk dilation with the given radius.
fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = BinaryMask::zeros(h, w);
    for row in 0..h {
        for col in 0..w {
            if !mask.get(row, col) {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (y, x) = (row as isize + dy, col as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    out.set(y as usize, x as usize, true);
                }
            }
        }
    }
    out
}

/// Boundary F-measure between two masks of the same size.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (np, ng) = (bp.count(), bg.count());
    match (np, ng) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let radius = boundary_radius(pred.height(), pred.width());
    let precision = bp.intersection_count(&dilate(&bg, radius)) as f64 / np as f64;
    let recall = bg.intersection_count(&dilate(&bp, radius)) as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Region and boundary scores averaged over objects `1..=num_objects` and frames.
pub fn eval_vos(pred: &[LabelMap], gt: &[LabelMap], num_objects: usize) -> Result<VosScores> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    let (mut j, mut f, mut n) = (0.0, 0.0, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        if (p.height(), p.width()) != (g.height(), g.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} against ground truth {}x{}",
                p.height(),
                p.width(),
                g.height(),
                g.width()
            )));
        }
        for obj in 1..=num_objects {
            let (pm, gm) = (p.object_mask(obj), g.object_mask(obj));
            j += pm.iou(&gm);
            f += boundary_f(&pm, &gm);
            n += 1;
        }
    }
    if n == 0 {
        return Ok(VosScores { j: 1.0, f: 1.0, g: 1.0 });
    }
    let (j, f) = (j / n as f64, f / n as f64);
    Ok(VosScores { j, f, g: (j + f) / 2.0 })
}

/// Evaluation of one tracked sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    /// Mean over objects.
    pub vot: Option<VotScores>,
    pub vos: Option<VosScores>,
    /// Mean box IoU over frames with the object present.
    pub box_iou: Option<f64>,
    pub consistency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub sequences: usize,
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub norm_precision: Option<f64>,
    pub j: Option<f64>,
    pub f: Option<f64>,
    pub g: Option<f64>,
    pub box_iou: Option<f64>,
    pub consistency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub summary: MetricsSummary,
    pub per_sequence: Vec<SequenceMetrics>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    /// Unweighted means over sequences.
    pub fn new(per_sequence: Vec<SequenceMetrics>) -> Self {
        let seqs = &per_sequence;
        let summary = MetricsSummary {
            sequences: seqs.len(),
            auc: mean_of(seqs.iter().filter_map(|s| s.vot.map(|v| v.auc))),
            precision: mean_of(seqs.iter().filter_map(|s| s.vot.map(|v| v.precision))),
            norm_precision: mean_of(seqs.iter().filter_map(|s| s.vot.map(|v| v.norm_precision))),
            j: mean_of(seqs.iter().filter_map(|s| s.vos.map(|v| v.j))),
            f: mean_of(seqs.iter().filter_map(|s| s.vos.map(|v| v.f))),
            g: mean_of(seqs.iter().filter_map(|s| s.vos.map(|v| v.g))),
            box_iou: mean_of(seqs.iter().filter_map(|s| s.box_iou)),
            consistency: mean_of(seqs.iter().filter_map(|s| s.consistency)),
        };
        Self { summary, per_sequence }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Mean of per-object box scores over a sequence.
pub fn eval_vot_objects(pred: &[Vec<Option<BBox>>], gt: &[Vec<Option<BBox>>]) -> Result<VotScores> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    let n_obj = gt.iter().map(|f| f.len()).max().unwrap_or(0);
    let track = |frames: &[Vec<Option<BBox>>], obj: usize| -> Vec<Option<BBox>> {
        frames.iter().map(|f| f.get(obj).copied().flatten()).collect()
    };
    let scores = (0..n_obj)
        .map(|o| eval_vot(&track(pred, o), &track(gt, o)))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<&VotScores> = scores.iter().filter(|s| s.frames > 0).collect();
    let frames = scored.iter().map(|s| s.frames).sum();
    let avg = |f: fn(&VotScores) -> f64| mean_of(scored.iter().map(|s| f(s))).unwrap_or(1.0);
    Ok(VotScores { auc: avg(|s| s.auc), precision: avg(|s| s.precision), norm_precision: avg(|s| s.norm_precision), frames })
}

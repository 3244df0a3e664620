//! Tracking a set of annotated sequences and scoring the results.

use crate::data::SequenceSample;
use crate::error::Result;
use crate::losses::InitFormat;
use crate::model::{FrameOutput, Model};
use crate::propagation::MemoryConfig;
use crate::uidm::Reference;

use super::metrics::{eval_vos, eval_vot_objects, MetricsReport, SequenceMetrics};
use super::tracker::track_sequence;

/// First-frame reference for a sequence in the requested format.
pub fn reference_for(seq: &SequenceSample, init: InitFormat) -> Reference {
    match init {
        InitFormat::Mask => Reference::Mask(seq.labels[0].clone()),
        InitFormat::Box => Reference::Boxes(seq.boxes[0].clone()),
    }
}

/// Scores tracker outputs against a sequence's annotations.
///
/// The given reference frame is excluded from every score.
pub fn score_sequence(seq: &SequenceSample, outputs: &[FrameOutput]) -> Result<SequenceMetrics> {
    let n = seq.num_objects();
    let pred_labels: Vec<_> = outputs[1..].iter().map(|o| o.labels.clone()).collect();
    let pred_boxes: Vec<_> = outputs[1..].iter().map(|o| o.boxes.clone()).collect();
    let gt_boxes = &seq.boxes[1..];
    let vot = eval_vot_objects(&pred_boxes, gt_boxes)?;
    let vos = eval_vos(&pred_labels, &seq.labels[1..], n)?;
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    for (p, g) in pred_boxes.iter().zip(gt_boxes) {
        for (pb, gb) in p.iter().zip(g) {
            if let Some(gb) = gb {
                iou_sum += pb.map_or(0.0, |pb| crate::geometry::iou(&pb, gb));
                iou_n += 1;
            }
        }
    }
    let cons: Vec<f64> = outputs[1..].iter().flat_map(|o| o.consistency.iter().copied()).collect();
    Ok(SequenceMetrics {
        name: seq.name.clone(),
        vot: (vot.frames > 0).then_some(vot),
        vos: Some(vos),
        box_iou: (iou_n > 0).then(|| iou_sum / iou_n as f64),
        consistency: (!cons.is_empty()).then(|| cons.iter().sum::<f64>() / cons.len() as f64),
    })
}

/// Tracks every sequence from its first frame and reports the scores.
pub fn evaluate(
    model: &Model,
    sequences: &[SequenceSample],
    init: InitFormat,
    memory: &MemoryConfig,
) -> Result<MetricsReport> {
    let per_sequence = sequences
        .iter()
        .map(|seq| {
            let outputs = track_sequence(model, &seq.frames, &reference_for(seq, init), None, memory)?;
            score_sequence(seq, &outputs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(per_sequence))
}

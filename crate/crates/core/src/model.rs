//! The full network: encoder, identification, propagation and both heads.

use candle_core::DType;

use crate::config::ModelConfig;
use crate::data::Image;
use crate::encoder::{Encoder, VisualEmbedding};
use crate::error::Result;
use crate::geometry::{BBox, LabelMap};
use crate::heads::{branch_consistency, BoxHead, BoxPrediction, MaskDecoder, MaskPrediction, ABSENT_MASS};
use crate::nn::ParamStore;
use crate::propagation::{MemoryBank, MemoryEntry, PropagatedEmbedding, Propagator};
use crate::uidm::{assign_ids, labels_to_grid, BidrTrace, IdAssignment, IdEmbedding, Reference, Uidm};

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub uidm: Uidm,
    pub propagator: Propagator,
    pub mask_decoder: MaskDecoder,
    pub box_head: BoxHead,
}

/// Raw outputs of both branches for one frame.
#[derive(Debug, Clone)]
pub struct FrameDecoding {
    pub propagated: PropagatedEmbedding,
    pub mask: MaskPrediction,
    pub boxes: BoxPrediction,
}

/// Final per-frame tracking output in both formats.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub labels: LabelMap,
    /// Box per object `1..=N`; `None` when the object is judged absent.
    pub boxes: Vec<Option<BBox>>,
    pub present: Vec<bool>,
    pub consistency: Vec<f64>,
}

impl FrameDecoding {
    /// Applies the absent rule and reads out labels, boxes and branch consistency.
    pub fn finalize(&self) -> Result<FrameOutput> {
        let mass = self.mask.object_mass()?;
        let present: Vec<bool> = mass.iter().map(|&m| m >= ABSENT_MASS).collect();
        let mut labels = self.mask.labels()?;
        if present.iter().any(|p| !p) {
            let keep: Vec<u8> = (1..=present.len())
                .map(|l| if present[l - 1] { l as u8 } else { 0 })
                .collect();
            labels = labels.relabel(&keep);
        }
        let boxes: Vec<Option<BBox>> = self
            .boxes
            .selected
            .iter()
            .zip(&present)
            .map(|(b, &p)| p.then_some(*b))
            .collect();
        let consistency = branch_consistency(&boxes, &labels);
        Ok(FrameOutput { labels, boxes, present, consistency })
    }
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32)
    }

    pub fn with_dtype(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let encoder = Encoder::new(&mut ps, cfg)?;
        let uidm = Uidm::new(&mut ps, cfg)?;
        let propagator = Propagator::new(&mut ps, cfg)?;
        let mask_decoder = MaskDecoder::new(&mut ps, cfg, &uidm.bank)?;
        let box_head = BoxHead::new(&mut ps, cfg, &uidm.bank)?;
        Ok(Self { cfg: cfg.clone(), params: ps, encoder, uidm, propagator, mask_decoder, box_head })
    }

    pub fn encode(&self, frame: &Image) -> Result<VisualEmbedding> {
        self.encoder.encode(frame)
    }

    /// Identification embedding of a reference annotation and its memory entry.
    pub fn reference_entry(
        &self,
        frame: &VisualEmbedding,
        reference: &Reference,
        assignment: &IdAssignment,
        frame_index: usize,
    ) -> Result<(MemoryEntry, IdEmbedding, Option<BidrTrace>)> {
        let (id, trace) = self.uidm.unified_id_embedding_traced(frame, reference, assignment)?;
        Ok((MemoryEntry::new(frame, &id.emb, frame_index)?, id, trace))
    }

    /// Memory entry for a frame whose labels are known or predicted.
    pub fn labels_entry(
        &self,
        frame: &VisualEmbedding,
        labels: &LabelMap,
        assignment: &IdAssignment,
        frame_index: usize,
    ) -> Result<MemoryEntry> {
        let emb = assign_ids(&labels_to_grid(labels, frame)?, &self.uidm.bank, assignment)?;
        MemoryEntry::new(frame, &emb, frame_index)
    }

    /// Propagates memory into `frame` and runs both decoding branches.
    pub fn decode(&self, frame: &VisualEmbedding, memory: &MemoryBank, assignment: &IdAssignment) -> Result<FrameDecoding> {
        let propagated = self.propagator.propagate(frame, memory)?;
        let mask = self.mask_decoder.decode_mask(&propagated, frame, assignment)?;
        let boxes = self.box_head.predict_boxes(&propagated, frame, assignment)?;
        Ok(FrameDecoding { propagated, mask, boxes })
    }
}

//! Unified identification: the shared ID bank, the box ID refiner and the
//! training-only ID decoder.
//!
//! Mask references are turned into identification embeddings by placing each
//! object's bank vector at the cells it covers. Box references first become
//! box-shaped masks; the resulting coarse embedding is then corrected by the
//! refiner, a two-path transformer in which image tokens and per-object
//! tokens pooled from the boxes exchange information through cross-attention.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::VisualEmbedding;
use crate::error::{Error, Result};
use crate::geometry::{rasterize_boxes, BBox, LabelMap};
use crate::nn::{
    box_sampling_matrix, sinusoidal_2d, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore,
    SelfAttentionLayer,
};

/// Learned identity vectors; row 0 is background, rows `1..=capacity` are object slots.
#[derive(Debug, Clone)]
pub struct IdBank {
    table: Tensor,
}

impl IdBank {
    pub fn new(ps: &mut ParamStore, capacity: usize, channels: usize) -> Result<Self> {
        let table = ps.var("uidm.bank", &[capacity + 1, channels], Init::Normal(0.5))?;
        Ok(Self { table })
    }

    pub fn from_table(table: Tensor) -> Self {
        Self { table }
    }

    pub fn capacity(&self) -> usize {
        self.table.dims()[0] - 1
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn vector(&self, index: usize) -> Result<Tensor> {
        Ok(self.table.get(index)?)
    }
}

/// Injective map from object labels `1..=N` to bank slots `1..=M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdAssignment {
    bank_of: Vec<usize>,
}

impl IdAssignment {
    pub fn new(bank_of: Vec<usize>, capacity: usize) -> Result<Self> {
        let mut seen = vec![false; capacity + 1];
        for &b in &bank_of {
            if b == 0 || b > capacity {
                return Err(Error::Assignment(format!("bank index {b} outside 1..={capacity}")));
            }
            if std::mem::replace(&mut seen[b], true) {
                return Err(Error::Assignment(format!("bank index {b} assigned twice")));
            }
        }
        Ok(Self { bank_of })
    }

    /// Object `k` gets slot `k`.
    pub fn sequential(num_objects: usize, capacity: usize) -> Result<Self> {
        Self::new((1..=num_objects).collect(), capacity)
    }

    pub fn random(num_objects: usize, capacity: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_objects > capacity {
            return Err(Error::Assignment(format!("{num_objects} objects exceed capacity {capacity}")));
        }
        let mut slots: Vec<usize> = (1..=capacity).collect();
        slots.shuffle(rng);
        slots.truncate(num_objects);
        Self::new(slots, capacity)
    }

    pub fn num_objects(&self) -> usize {
        self.bank_of.len()
    }

    /// Bank slot of object `object` (1-based).
    pub fn bank_index(&self, object: usize) -> Option<usize> {
        object.checked_sub(1).and_then(|i| self.bank_of.get(i).copied())
    }

    pub fn bank_indices(&self) -> &[usize] {
        &self.bank_of
    }

    /// Background plus the assigned slots, in ascending slot order.
    pub fn active_channels(&self) -> Vec<usize> {
        let mut ch = Vec::with_capacity(self.bank_of.len() + 1);
        ch.push(0);
        ch.extend_from_slice(&self.bank_of);
        ch.sort_unstable();
        ch
    }

    /// Object label owning each active channel (0 for background).
    pub fn channel_objects(&self) -> Vec<usize> {
        self.active_channels()
            .into_iter()
            .map(|b| self.bank_of.iter().position(|&x| x == b).map_or(0, |i| i + 1))
            .collect()
    }
}

/// Identification embedding `(H * W, C)`: each cell holds its object's bank vector.
pub fn assign_ids(labels: &LabelMap, bank: &IdBank, assignment: &IdAssignment) -> Result<Tensor> {
    let index: Vec<u32> = labels
        .data()
        .iter()
        .map(|&l| match l as usize {
            0 => Ok(0),
            k => assignment.bank_index(k).map(|b| b as u32).ok_or(Error::UnassignedLabel(k)),
        })
        .collect::<Result<_>>()?;
    let idx = Tensor::from_vec(index, labels.data().len(), bank.table.device())?;
    Ok(bank.table.index_select(&idx, 0)?)
}

/// Pads a full-resolution label map with background to the encoder's padded
/// size and majority-downsamples it to the token grid.
pub fn labels_to_grid(labels: &LabelMap, frame: &VisualEmbedding) -> Result<LabelMap> {
    let (ph, pw) = frame.padded_size;
    if labels.height() > ph || labels.width() > pw {
        return Err(Error::Shape(format!(
            "{}x{} labels exceed the {ph}x{pw} padded frame",
            labels.height(),
            labels.width()
        )));
    }
    let padded = if (labels.height(), labels.width()) == (ph, pw) {
        labels.clone()
    } else {
        let mut p = LabelMap::zeros(ph, pw, labels.num_objects());
        for r in 0..labels.height() {
            for c in 0..labels.width() {
                p.set(r, c, labels.get(r, c));
            }
        }
        p
    };
    padded.downsample_majority(frame.stride)
}

/// Initialization reference for a tracking session.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Mask(LabelMap),
    /// `boxes[object - 1]`, in image pixels.
    Boxes(Vec<Option<BBox>>),
}

impl Reference {
    pub fn num_objects(&self) -> usize {
        match self {
            Reference::Mask(l) => l.num_objects(),
            Reference::Boxes(b) => b.len(),
        }
    }

    pub fn is_box(&self) -> bool {
        matches!(self, Reference::Boxes(_))
    }
}

/// Cross-attention weights recorded during one refiner pass.
#[derive(Debug, Clone, Default)]
pub struct BidrTrace {
    /// Per layer, `(heads, HW, object tokens)`: image queries over object keys.
    pub image_to_object: Vec<Tensor>,
    /// Per layer, `(heads, object tokens, HW)`: object queries over image keys.
    pub object_to_image: Vec<Tensor>,
    /// Token range of each object (ordered by bank slot) in the object path.
    pub object_ranges: Vec<(usize, std::ops::Range<usize>)>,
    /// Object-path tokens after the last layer.
    pub object_tokens: Option<Tensor>,
}

struct CrossBlock {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: MultiHeadAttention,
}

impl CrossBlock {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(ps, &format!("{name}.norm_q"), dim)?,
            norm_kv: LayerNorm::new(ps, &format!("{name}.norm_kv"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
        })
    }

    /// Returns the residual update and the attention weights.
    fn forward(
        &self,
        query: &Tensor,
        query_pos: Option<&Tensor>,
        source: &Tensor,
        source_pos: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let q = self.norm_q.forward(query)?;
        let kv = self.norm_kv.forward(source)?;
        let q = match query_pos {
            Some(p) => q.broadcast_add(p)?,
            None => q,
        };
        let k = match source_pos {
            Some(p) => kv.broadcast_add(p)?,
            None => kv.clone(),
        };
        self.attn.forward_with_weights(&q, &k, &kv)
    }
}

struct BidrLayer {
    image_sa: SelfAttentionLayer,
    object_sa: SelfAttentionLayer,
    image_ca: CrossBlock,
    object_ca: Option<CrossBlock>,
    image_ffn_norm: LayerNorm,
    image_ffn: FeedForward,
}

/// Box ID refiner.
pub struct BoxIdRefiner {
    layers: Vec<BidrLayer>,
    object_pos: Tensor,
    final_norm: LayerNorm,
    out: Linear,
    pool: usize,
    heads: usize,
    calls: AtomicUsize,
}

impl BoxIdRefiner {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let layers = (0..cfg.bidr_layers)
            .map(|i| {
                let name = format!("uidm.bidr.layer{i}");
                Ok(BidrLayer {
                    image_sa: SelfAttentionLayer::new(ps, &format!("{name}.image_sa"), c, cfg.heads)?,
                    object_sa: SelfAttentionLayer::new(ps, &format!("{name}.object_sa"), c, cfg.heads)?,
                    image_ca: CrossBlock::new(ps, &format!("{name}.image_ca"), c, cfg.heads)?,
                    object_ca: if cfg.dual_cross_attention {
                        Some(CrossBlock::new(ps, &format!("{name}.object_ca"), c, cfg.heads)?)
                    } else {
                        None
                    },
                    image_ffn_norm: LayerNorm::new(ps, &format!("{name}.image_ffn_norm"), c)?,
                    image_ffn: FeedForward::new(ps, &format!("{name}.image_ffn"), c, 2 * c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            object_pos: ps.var("uidm.bidr.object_pos", &[cfg.bidr_pool * cfg.bidr_pool, c], Init::Normal(0.1))?,
            final_norm: LayerNorm::new(ps, "uidm.bidr.final_norm", c)?,
            out: Linear::zeros(ps, "uidm.bidr.out", c, c)?,
            pool: cfg.bidr_pool,
            heads: cfg.heads,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of times [`Self::refine`] has run.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn dual_cross_attention(&self) -> bool {
        self.layers.first().is_some_and(|l| l.object_ca.is_some())
    }

    /// `k x k` feature samples from inside `b` (image pixels, inclusive corners).
    fn pool_box(&self, frame: &VisualEmbedding, b: &BBox) -> Result<Tensor> {
        let s = frame.stride as f64;
        let (h, w) = frame.grid;
        let m = box_sampling_matrix(
            b.x1 / s - 0.5,
            b.y1 / s - 0.5,
            (b.x2 + 1.0) / s - 0.5,
            (b.y2 + 1.0) / s - 0.5,
            self.pool,
            h,
            w,
        );
        let f = &frame.features;
        let m = Tensor::from_vec(m, (self.pool * self.pool, h * w), f.device())?.to_dtype(f.dtype())?;
        Ok(m.matmul(f)?)
    }

    /// Refinement residual `(H * W, C)` for a coarse box embedding.
    ///
    /// `boxes` pairs each object's bank slot with its box; objects are
    /// processed in ascending slot order.
    pub fn refine(
        &self,
        frame: &VisualEmbedding,
        coarse: &Tensor,
        boxes: &[(usize, BBox)],
        bank: &IdBank,
    ) -> Result<(Tensor, BidrTrace)> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut boxes = boxes.to_vec();
        boxes.sort_by_key(|(slot, _)| *slot);
        let (h, w) = frame.grid;
        let c = frame.features.dim(1)?;
        let pos = sinusoidal_2d(h, w, c, frame.features.dtype(), frame.features.device())?;
        let mut trace = BidrTrace::default();

        let mut image = (&frame.features + coarse)?;
        if boxes.is_empty() {
            let residual = self.out.forward(&self.final_norm.forward(&image)?)?;
            return Ok((residual, trace));
        }
        let kk = self.pool * self.pool;
        let mut tokens = Vec::with_capacity(boxes.len());
        for (i, (slot, b)) in boxes.iter().enumerate() {
            let pooled = self.pool_box(frame, b)?;
            let id = bank.vector(*slot)?.unsqueeze(0)?;
            tokens.push(pooled.broadcast_add(&id)?.add(&self.object_pos)?);
            trace.object_ranges.push((*slot, i * kk..(i + 1) * kk));
        }
        let mut object = Tensor::cat(&tokens, 0)?;

        for layer in &self.layers {
            image = layer.image_sa.forward(&image, Some(&pos))?;
            object = layer.object_sa.forward(&object, None)?;
            let (img_upd, w_io) = layer.image_ca.forward(&image, Some(&pos), &object, None)?;
            trace.image_to_object.push(w_io);
            if let Some(ca) = &layer.object_ca {
                let (obj_upd, w_oi) = ca.forward(&object, None, &image, Some(&pos))?;
                trace.object_to_image.push(w_oi);
                object = (object + obj_upd)?;
            }
            image = (image + img_upd)?;
            image = (&image + layer.image_ffn.forward(&layer.image_ffn_norm.forward(&image)?)?)?;
        }
        trace.object_tokens = Some(object);
        let residual = self.out.forward(&self.final_norm.forward(&image)?)?;
        Ok((residual, trace))
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

/// Whether the caller is training; the ID decoder only runs while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Auxiliary decoder reconstructing labels from an identification embedding.
pub struct IdDecoder {
    fc1: Linear,
    fc2: Linear,
}

impl IdDecoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, "uidm.id_decoder.fc1", cfg.channels, cfg.channels)?,
            fc2: Linear::new(ps, "uidm.id_decoder.fc2", cfg.channels, cfg.capacity + 1)?,
        })
    }

    /// `(H * W, C) -> (H * W, M + 1)` logits.
    pub fn reconstruct_mask(&self, emb: &Tensor, phase: Phase) -> Result<Tensor> {
        if phase != Phase::Train {
            return Err(Error::InvokedAtInference);
        }
        self.fc2.forward(&self.fc1.forward(emb)?.gelu()?)
    }
}

/// Output of [`Uidm::unified_id_embedding`].
#[derive(Debug, Clone)]
pub struct IdEmbedding {
    /// `(H * W, C)` embedding handed to propagation.
    pub emb: Tensor,
    /// Bank-only embedding before refinement (equal to `emb` for masks).
    pub coarse: Tensor,
    /// Reference labels on the token grid (box-shaped for box references).
    pub grid_labels: LabelMap,
}

pub struct Uidm {
    pub bank: IdBank,
    pub refiner: BoxIdRefiner,
    pub decoder: Option<IdDecoder>,
}

impl Uidm {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            bank: IdBank::new(ps, cfg.capacity, cfg.channels)?,
            refiner: BoxIdRefiner::new(ps, cfg)?,
            decoder: if cfg.mask_reconstruction { Some(IdDecoder::new(ps, cfg)?) } else { None },
        })
    }

    /// Identification embedding from a mask or box reference.
    pub fn unified_id_embedding(
        &self,
        frame: &VisualEmbedding,
        reference: &Reference,
        assignment: &IdAssignment,
    ) -> Result<IdEmbedding> {
        Ok(self.unified_id_embedding_traced(frame, reference, assignment)?.0)
    }

    pub fn unified_id_embedding_traced(
        &self,
        frame: &VisualEmbedding,
        reference: &Reference,
        assignment: &IdAssignment,
    ) -> Result<(IdEmbedding, Option<BidrTrace>)> {
        if reference.num_objects() > assignment.num_objects() {
            return Err(Error::UnassignedLabel(assignment.num_objects() + 1));
        }
        match reference {
            Reference::Mask(labels) => {
                let grid_labels = labels_to_grid(labels, frame)?;
                let emb = assign_ids(&grid_labels, &self.bank, assignment)?;
                Ok((IdEmbedding { coarse: emb.clone(), emb, grid_labels }, None))
            }
            Reference::Boxes(boxes) => {
                let (ph, pw) = frame.padded_size;
                let (ih, iw) = frame.image_size;
                let clamped: Vec<Option<BBox>> = boxes.iter().map(|b| b.map(|b| b.clamp_to(ih, iw))).collect();
                let full = rasterize_boxes(&clamped, ph, pw);
                let grid_labels = full.downsample_majority(frame.stride)?;
                let coarse = assign_ids(&grid_labels, &self.bank, assignment)?;
                let slot_boxes: Vec<(usize, BBox)> = clamped
                    .iter()
                    .enumerate()
                    .filter_map(|(i, b)| {
                        b.map(|b| assignment.bank_index(i + 1).map(|s| (s, b)).ok_or(Error::UnassignedLabel(i + 1)))
                    })
                    .collect::<Result<_>>()?;
                let (residual, trace) = self.refiner.refine(frame, &coarse, &slot_boxes, &self.bank)?;
                let emb = (&coarse + residual)?;
                Ok((IdEmbedding { emb, coarse, grid_labels }, Some(trace)))
            }
        }
    }

    /// Reconstruction logits restricted to the active channels, `(H * W, N + 1)`.
    pub fn reconstruct_active(&self, emb: &Tensor, assignment: &IdAssignment, phase: Phase) -> Result<Option<Tensor>> {
        let Some(decoder) = &self.decoder else {
            return Ok(None);
        };
        let logits = decoder.reconstruct_mask(emb, phase)?;
        let idx: Vec<u32> = assignment.active_channels().iter().map(|&c| c as u32).collect();
        let idx = Tensor::from_vec(idx.clone(), idx.len(), logits.device())?;
        Ok(Some(logits.index_select(&idx, D::Minus1)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;
    use crate::encoder::Encoder;
    use candle_core::DType;
    use rand::SeedableRng;

    fn vecs(t: &Tensor) -> Vec<Vec<f32>> {
        t.to_vec2::<f32>().unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { channels: 32, heads: 4, bidr_layers: 2, ..Default::default() }
    }

    #[test]
    fn assignment_validation() {
        assert!(IdAssignment::new(vec![1, 1], 4).is_err());
        assert!(IdAssignment::new(vec![0], 4).is_err());
        assert!(IdAssignment::new(vec![5], 4).is_err());
        let a = IdAssignment::new(vec![3, 1], 4).unwrap();
        assert_eq!(a.active_channels(), vec![0, 1, 3]);
        assert_eq!(a.channel_objects(), vec![0, 2, 1]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let r = IdAssignment::random(4, 4, &mut rng).unwrap();
        let mut s = r.bank_indices().to_vec();
        s.sort();
        assert_eq!(s, vec![1, 2, 3, 4]);
        assert!(IdAssignment::random(5, 4, &mut rng).is_err());
    }

    #[test]
    fn assign_ids_examples() {
        let mut ps = ParamStore::new(3, DType::F32);
        let bank = IdBank::new(&mut ps, 4, 8).unwrap();
        let table = vecs(bank.table());

        let full = LabelMap::new(2, 2, 1, vec![1; 4]).unwrap();
        let emb = assign_ids(&full, &bank, &IdAssignment::new(vec![3], 4).unwrap()).unwrap();
        assert!(vecs(&emb).iter().all(|row| *row == table[3]));

        let bg = LabelMap::zeros(2, 2, 1);
        let emb = assign_ids(&bg, &bank, &IdAssignment::new(vec![3], 4).unwrap()).unwrap();
        assert!(vecs(&emb).iter().all(|row| *row == table[0]));

        let two = LabelMap::new(2, 2, 2, vec![0, 1, 2, 1]).unwrap();
        let a = assign_ids(&two, &bank, &IdAssignment::new(vec![2, 4], 4).unwrap()).unwrap();
        let swapped = two.relabel(&[2, 1]);
        let b = assign_ids(&swapped, &bank, &IdAssignment::new(vec![4, 2], 4).unwrap()).unwrap();
        assert_eq!(vecs(&a), vecs(&b));

        assert!(matches!(
            assign_ids(&two, &bank, &IdAssignment::new(vec![2], 4).unwrap()),
            Err(Error::UnassignedLabel(2))
        ));
    }

    #[test]
    fn mask_path_bypasses_refiner_and_box_path_starts_at_coarse() {
        let cfg = small_cfg();
        let mut ps = ParamStore::new(5, DType::F32);
        let enc = Encoder::new(&mut ps, &cfg).unwrap();
        let uidm = Uidm::new(&mut ps, &cfg).unwrap();
        let frame = enc.encode(&Image::filled(64, 64, [0.3, 0.6, 0.2])).unwrap();
        let assignment = IdAssignment::new(vec![2, 5], cfg.capacity).unwrap();

        let mut labels = LabelMap::zeros(64, 64, 2);
        for r in 0..32 {
            for c in 0..32 {
                labels.set(r, c, 1);
                labels.set(r + 32, c + 32, 2);
            }
        }
        let out = uidm.unified_id_embedding(&frame, &Reference::Mask(labels.clone()), &assignment).unwrap();
        let direct = assign_ids(&labels.downsample_majority(16).unwrap(), &uidm.bank, &assignment).unwrap();
        assert_eq!(vecs(&out.emb), vecs(&direct));
        assert_eq!(uidm.refiner.calls(), 0);

        let boxes = vec![Some(BBox::new(0.0, 0.0, 31.0, 31.0)), Some(BBox::new(32.0, 32.0, 63.0, 63.0))];
        let out = uidm.unified_id_embedding(&frame, &Reference::Boxes(boxes), &assignment).unwrap();
        assert_eq!(uidm.refiner.calls(), 1);
        assert_eq!(out.emb.dims(), &[16, 32]);
        assert_eq!(vecs(&out.emb), vecs(&out.coarse));
    }

    #[test]
    fn reconstruction_is_training_only() {
        let cfg = small_cfg();
        let mut ps = ParamStore::new(5, DType::F32);
        let uidm = Uidm::new(&mut ps, &cfg).unwrap();
        let emb = Tensor::zeros((16, 32), DType::F32, ps.device()).unwrap();
        let dec = uidm.decoder.as_ref().unwrap();
        assert_eq!(dec.reconstruct_mask(&emb, Phase::Train).unwrap().dims(), &[16, cfg.capacity + 1]);
        assert!(matches!(dec.reconstruct_mask(&emb, Phase::Eval), Err(Error::InvokedAtInference)));

        let no_recon = ModelConfig { mask_reconstruction: false, ..cfg };
        let mut ps = ParamStore::new(5, DType::F32);
        assert!(Uidm::new(&mut ps, &no_recon).unwrap().decoder.is_none());
    }
}

//! Memory of past frames and attention propagation to the current frame.
//!
//! Each layer lets the current frame's tokens attend over the keys of every
//! memory frame at once; the attended values are the memory features plus
//! their identification embeddings, so identity travels with appearance.

use std::collections::VecDeque;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::VisualEmbedding;
use crate::error::{Error, Result};
use crate::nn::{attention_with_weights, sinusoidal_2d, FeedForward, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// A long-term entry is added every this many frames after the reference.
    pub long_term_every: usize,
    /// Most entries held at once, reference and short-term entry included.
    pub capacity: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { long_term_every: 5, capacity: 8 }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.long_term_every == 0 || self.capacity < 2 {
            return Err(Error::Config(format!(
                "memory needs long_term_every >= 1 and capacity >= 2, got {} and {}",
                self.long_term_every, self.capacity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MemoryEntry {
    /// `(HW, C)` key features.
    pub keys: Tensor,
    /// `(HW, C)` value features.
    pub values: Tensor,
    /// `(HW, C)` identification embedding.
    pub id_emb: Tensor,
    pub frame_index: usize,
}

impl MemoryEntry {
    pub fn new(frame: &VisualEmbedding, id_emb: &Tensor, frame_index: usize) -> Result<Self> {
        if id_emb.dims() != frame.features.dims() {
            return Err(Error::Shape(format!(
                "id embedding {:?} does not match features {:?}",
                id_emb.dims(),
                frame.features.dims()
            )));
        }
        Ok(Self {
            keys: frame.features.clone(),
            values: frame.features.clone(),
            id_emb: id_emb.clone(),
            frame_index,
        })
    }

    /// Copy cut from the autograd graph.
    pub fn detached(&self) -> Self {
        Self {
            keys: self.keys.detach(),
            values: self.values.detach(),
            id_emb: self.id_emb.detach(),
            frame_index: self.frame_index,
        }
    }
}

/// Reference entry (never evicted), FIFO long-term entries, and the most recent frame.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    cfg: MemoryConfig,
    reference: Option<MemoryEntry>,
    long_term: VecDeque<MemoryEntry>,
    short_term: Option<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(cfg: MemoryConfig) -> Self {
        Self { cfg, reference: None, long_term: VecDeque::new(), short_term: None }
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    /// Adds a frame. The first write becomes the reference entry.
    pub fn write(&mut self, entry: MemoryEntry) {
        let Some(reference) = &self.reference else {
            self.reference = Some(entry);
            return;
        };
        let offset = entry.frame_index.saturating_sub(reference.frame_index);
        if offset % self.cfg.long_term_every == 0 {
            self.long_term.push_back(entry);
            self.short_term = None;
        } else {
            self.short_term = Some(entry);
        }
        while self.len() > self.cfg.capacity && !self.long_term.is_empty() {
            self.long_term.pop_front();
        }
    }

    pub fn write_frame(&mut self, frame: &VisualEmbedding, id_emb: &Tensor, frame_index: usize) -> Result<()> {
        self.write(MemoryEntry::new(frame, id_emb, frame_index)?);
        Ok(())
    }

    /// Entries in time order.
    pub fn entries(&self) -> Vec<&MemoryEntry> {
        self.reference
            .iter()
            .chain(self.long_term.iter())
            .chain(self.short_term.iter())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.reference.is_some() as usize + self.long_term.len() + self.short_term.is_some() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_none()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries().iter().map(|e| e.frame_index).collect()
    }

    pub fn reference(&self) -> Option<&MemoryEntry> {
        self.reference.as_ref()
    }
}

/// Output of propagation.
#[derive(Debug, Clone)]
pub struct PropagatedEmbedding {
    /// `(HW, C')` tokens.
    pub tokens: Tensor,
    pub grid: (usize, usize),
    /// Per-head dimension used for the `1 / sqrt(d)` scaling.
    pub head_dim: usize,
}

/// One propagation layer: memory attention then a feed-forward block, both pre-norm residual.
pub struct PropagationLayer {
    pub norm_query: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl PropagationLayer {
    fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            norm_query: LayerNorm::new(ps, &format!("{name}.norm_query"), c)?,
            // Projections start as identities: attention initially matches
            // similar content at similar places and copies the identities over.
            q: Linear::identity(ps, &format!("{name}.q"), c, 1, 1.0)?,
            k: Linear::identity(ps, &format!("{name}.k"), c, 1, 1.0)?,
            v: Linear::identity(ps, &format!("{name}.v"), c, 1, 1.0)?,
            out: Linear::identity(ps, &format!("{name}.out"), c, 1, 1.0)?,
            norm_ffn: LayerNorm::new(ps, &format!("{name}.norm_ffn"), c)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), c, 2 * c)?,
        })
    }

    /// Attention output before the output projection and residual, plus weights.
    pub fn attend(
        &self,
        hidden: &Tensor,
        pos: &Tensor,
        mem_keys: &Tensor,
        mem_values: &Tensor,
        mem_ids: &Tensor,
        mem_pos: &Tensor,
        heads: usize,
    ) -> Result<(Tensor, Tensor)> {
        let q = self.q.forward(&self.norm_query.forward(hidden)?.broadcast_add(pos)?)?;
        let k = self.k.forward(&(mem_keys + mem_pos)?)?;
        let v = (self.v.forward(mem_values)? + mem_ids)?;
        attention_with_weights(&q, &k, &v, heads)
    }
}

pub struct Propagator {
    layers: Vec<PropagationLayer>,
    final_norm: LayerNorm,
    heads: usize,
}

impl Propagator {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let layers = (0..cfg.propagation_layers)
            .map(|i| PropagationLayer::new(ps, &format!("propagation.layer{i}"), c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, final_norm: LayerNorm::new(ps, "propagation.final_norm", c)?, heads: cfg.heads })
    }

    pub fn layers(&self) -> &[PropagationLayer] {
        &self.layers
    }

    pub fn final_norm(&self) -> &LayerNorm {
        &self.final_norm
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn propagate(&self, query: &VisualEmbedding, bank: &MemoryBank) -> Result<PropagatedEmbedding> {
        self.propagate_tokens(&query.features, query.grid, bank)
    }

    /// Propagates memory into `(HW, C)` query tokens laid out on `grid`.
    pub fn propagate_tokens(
        &self,
        query: &Tensor,
        grid: (usize, usize),
        bank: &MemoryBank,
    ) -> Result<PropagatedEmbedding> {
        let entries = bank.entries();
        if entries.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let (hw, c) = query.dims2()?;
        let pos = sinusoidal_2d(grid.0, grid.1, c, query.dtype(), query.device())?;
        if pos.dim(0)? != hw {
            return Err(Error::Shape(format!("{hw} query tokens do not fill a {grid:?} grid")));
        }
        for e in &entries {
            if e.keys.dims() != [hw, c] {
                return Err(Error::Shape(format!(
                    "memory frame {} has shape {:?}, query has {:?}",
                    e.frame_index,
                    e.keys.dims(),
                    query.dims()
                )));
            }
        }
        let cat = |f: fn(&MemoryEntry) -> &Tensor| -> Result<Tensor> {
            let parts: Vec<&Tensor> = entries.iter().map(|e| f(e)).collect();
            Ok(Tensor::cat(&parts, 0)?)
        };
        let mem_keys = cat(|e| &e.keys)?;
        let mem_values = cat(|e| &e.values)?;
        let mem_ids = cat(|e| &e.id_emb)?;
        let mem_pos = Tensor::cat(&vec![&pos; entries.len()], 0)?;

        let mut hidden = query.clone();
        for layer in &self.layers {
            let (att, _) = layer.attend(&hidden, &pos, &mem_keys, &mem_values, &mem_ids, &mem_pos, self.heads)?;
            hidden = (hidden + layer.out.forward(&att)?)?;
            hidden = (&hidden + layer.ffn.forward(&layer.norm_ffn.forward(&hidden)?)?)?;
        }
        Ok(PropagatedEmbedding {
            tokens: self.final_norm.forward(&hidden)?,
            grid,
            head_dim: c / self.heads,
        })
    }
}

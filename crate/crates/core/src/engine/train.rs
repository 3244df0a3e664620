//! Training on short clips with alternating box/mask initialization.

use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::optim::{poly_lr, Adam, AdamHyper};
use crate::config::Config;
use crate::data::{generate_sequence, SequenceSample};
use crate::error::{Error, Result};
use crate::losses::{total_step_loss, FrameTerms, InitFormat, ObjectiveSample, ReconTerms};
use crate::model::Model;
use crate::propagation::MemoryBank;
use crate::uidm::{labels_to_grid, IdAssignment, Phase, Reference};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub init: InitFormat,
    pub sequence: usize,
    pub loss: f64,
    pub ce: f64,
    pub jaccard: f64,
    pub l1: f64,
    pub giou: f64,
    pub recon: f64,
    pub grad_norm: f64,
}

/// A training clip: reference frame index followed by the supervised frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub sequence: usize,
    pub frames: Vec<usize>,
    pub sample: ObjectiveSample,
    pub assignment: IdAssignment,
}

/// Generates the synthetic training set described by the config.
pub fn training_sequences(cfg: &Config) -> Result<Vec<SequenceSample>> {
    (0..cfg.train.num_sequences)
        .map(|i| generate_sequence(&cfg.synth.with_seed(cfg.train.sequence_seed + i as u64)))
        .collect()
}

/// Random stream for one step; depends only on the seed and step index.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub adam: Adam,
    pub sequences: Vec<SequenceSample>,
    /// Steps completed.
    pub step: usize,
    pub logs: Vec<StepLog>,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        let sequences = training_sequences(&config)?;
        Self::with_sequences(config, sequences)
    }

    pub fn with_sequences(config: Config, sequences: Vec<SequenceSample>) -> Result<Self> {
        config.validate()?;
        config.loss.validate()?;
        if sequences.is_empty() || sequences.iter().any(|s| s.len() < 1 + config.train.clip_frames) {
            return Err(Error::DataSourceEmpty);
        }
        let model = Model::new(&config.model, config.seed)?;
        let adam = Adam::new(model.params.vars(), AdamHyper::default())?;
        Ok(Self { config, model, adam, sequences, step: 0, logs: Vec::new() })
    }

    /// Restores model, optimizer and step counter; the training set is regenerated from the config.
    pub fn resume(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let config = ckpt.manifest.config.clone();
        let mut trainer = Self::new(config)?;
        ckpt.load_into(&trainer.model)?;
        trainer.adam = ckpt.adam().ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        trainer.step = ckpt.manifest.step;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.config, self.step, Some(&self.adam))
    }

    /// Draws the clip for `step`.
    pub fn clip(&self, step: usize) -> Result<Clip> {
        let mut rng = step_rng(self.config.seed, step);
        let t = &self.config.train;
        let sequence = rng.random_range(0..self.sequences.len());
        let len = self.sequences[sequence].len();
        let mut gaps: Vec<usize> = (0..t.clip_frames)
            .map(|i| rng.random_range(1..=if i == 0 { t.max_ref_gap } else { t.max_gap }))
            .collect();
        // Shrink the widest gap until the clip fits.
        while gaps.iter().sum::<usize>() >= len {
            let widest = (0..gaps.len()).max_by_key(|&i| gaps[i]).expect("clip has frames");
            if gaps[widest] == 1 {
                return Err(Error::Config(format!("a {len}-frame sequence cannot hold {} clip frames", gaps.len() + 1)));
            }
            gaps[widest] -= 1;
        }
        let span: usize = gaps.iter().sum();
        let mut frame = rng.random_range(0..len - span);
        let mut frames = vec![frame];
        for g in gaps {
            frame += g;
            frames.push(frame);
        }
        let sample = ObjectiveSample::draw(t.p_box, &mut rng);
        let n = self.sequences[sequence].num_objects();
        let assignment = IdAssignment::random(n, self.config.model.capacity, &mut rng)?;
        Ok(Clip { sequence, frames, sample, assignment })
    }

    /// Runs one optimization step and returns its log.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let clip = self.clip(step)?;
        let seq = &self.sequences[clip.sequence];
        let model = &self.model;
        let assignment = &clip.assignment;

        let ref_idx = clip.frames[0];
        let ref_emb = model.encode(&seq.frames[ref_idx])?;
        let reference = match clip.sample.init_format {
            InitFormat::Mask => Reference::Mask(seq.labels[ref_idx].clone()),
            InitFormat::Box => Reference::Boxes(seq.boxes[ref_idx].clone()),
        };
        let (entry, id, _) = model.reference_entry(&ref_emb, &reference, assignment, ref_idx)?;
        let recon_logits = model.uidm.reconstruct_active(&id.emb, assignment, Phase::Train)?;
        let recon_target = labels_to_grid(&seq.labels[ref_idx], &ref_emb)?;
        let channel_objects = assignment.channel_objects();

        let mut memory = MemoryBank::new(self.config.memory.clone());
        memory.write(entry);
        let mut decoded = Vec::with_capacity(clip.frames.len() - 1);
        for &f in &clip.frames[1..] {
            let emb = model.encode(&seq.frames[f])?;
            let d = model.decode(&emb, &memory, assignment)?;
            let out = d.finalize()?;
            memory.write(model.labels_entry(&emb, &out.labels, assignment, f)?.detached());
            decoded.push((f, d));
        }
        let terms: Vec<FrameTerms<'_>> = decoded
            .iter()
            .map(|(f, d)| FrameTerms {
                mask: &d.mask,
                boxes: &d.boxes,
                assignment,
                labels: Some(&seq.labels[*f]),
                gt_boxes: &seq.boxes[*f],
            })
            .collect();
        let recon = recon_logits
            .as_ref()
            .map(|logits| ReconTerms { logits, labels: &recon_target, channel_objects: &channel_objects });
        let losses = total_step_loss(&terms, recon, &self.config.loss)?;
        let loss = losses.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "ce={} jaccard={} l1={} giou={} recon={} sequence={} frames={:?}",
                    losses.ce, losses.jaccard, losses.l1, losses.giou, losses.recon, clip.sequence, clip.frames
                ),
            });
        }
        let grads = losses.total.backward()?;
        let t = &self.config.train;
        let lr = poly_lr(step, t.steps, t.lr_start, t.lr_end, t.lr_power);
        let grad_norm = self.adam.step(self.model.params.vars(), &grads, lr, t.grad_clip)?;
        self.step += 1;
        let log = StepLog {
            step,
            lr,
            init: clip.sample.init_format,
            sequence: clip.sequence,
            loss,
            ce: losses.ce,
            jaccard: losses.jaccard,
            l1: losses.l1,
            giou: losses.giou,
            recon: losses.recon,
            grad_norm,
        };
        self.logs.push(log.clone());
        Ok(log)
    }

    /// Trains until `config.train.steps`, writing periodic checkpoints into `checkpoint_dir`.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let every = self.config.train.checkpoint_every;
        let log_every = self.config.train.log_every.max(1);
        while self.step < self.config.train.steps {
            let log = self.train_step()?;
            if log.step % log_every == 0 || self.step == self.config.train.steps {
                log::info!(
                    "step {} lr {:.2e} init {:?} loss {:.4} (ce {:.3} jac {:.3} l1 {:.3} giou {:.3} recon {:.3})",
                    log.step,
                    log.lr,
                    log.init,
                    log.loss,
                    log.ce,
                    log.jaccard,
                    log.l1,
                    log.giou,
                    log.recon
                );
            }
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.step % every == 0 {
                    let path = dir.join(format!("step-{:06}.safetensors", self.step));
                    self.save(&path)?;
                    written.push(path);
                }
            }
        }
        Ok(written)
    }
}

/// Trains a model from scratch on the configured synthetic data.
pub fn train(config: &Config) -> Result<Trainer> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run(None)?;
    Ok(trainer)
}

//! Tracking sessions: initialize from masks or boxes, then step frame by frame.

use crate::data::Image;
use crate::error::{Error, Result};
use crate::geometry::mask_to_box;
use crate::losses::InitFormat;
use crate::model::{FrameOutput, Model};
use crate::propagation::{MemoryBank, MemoryConfig};
use crate::uidm::{IdAssignment, Reference};

pub struct TrackerState {
    pub memory: MemoryBank,
    pub assignment: IdAssignment,
    pub last: FrameOutput,
    /// Index of the last processed frame.
    pub frame: usize,
    pub init_format: InitFormat,
}

/// One tracking session over one sequence.
pub struct Tracker<'m> {
    model: &'m Model,
    memory_cfg: MemoryConfig,
    state: Option<TrackerState>,
}

fn check_reference(frame: &Image, reference: &Reference) -> Result<()> {
    match reference {
        Reference::Mask(labels) => {
            if (labels.height(), labels.width()) != (frame.height(), frame.width()) {
                return Err(Error::InitFormatMismatch(format!(
                    "{}x{} mask for a {}x{} frame",
                    labels.height(),
                    labels.width(),
                    frame.height(),
                    frame.width()
                )));
            }
        }
        Reference::Boxes(boxes) => {
            if boxes.is_empty() {
                return Err(Error::InitFormatMismatch("no boxes given".into()));
            }
            if boxes.iter().flatten().any(|b| !b.is_finite()) {
                return Err(Error::InitFormatMismatch("non-finite box".into()));
            }
        }
    }
    Ok(())
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, memory_cfg: MemoryConfig) -> Self {
        Self { model, memory_cfg, state: None }
    }

    pub fn state(&self) -> Option<&TrackerState> {
        self.state.as_ref()
    }

    /// Encodes the reference frame and its annotation into memory.
    ///
    /// The returned output repeats a mask reference as given; a box reference
    /// keeps its boxes and gets its masks by decoding the reference frame
    /// against its own memory entry.
    pub fn initialize(&mut self, frame: &Image, reference: &Reference, assignment: IdAssignment) -> Result<FrameOutput> {
        if self.state.is_some() {
            return Err(Error::InitFormatMismatch("tracker is already initialized".into()));
        }
        check_reference(frame, reference)?;
        let emb = self.model.encode(frame)?;
        let (entry, _, _) = self.model.reference_entry(&emb, reference, &assignment, 0)?;
        let mut memory = MemoryBank::new(self.memory_cfg.clone());
        memory.write(entry.detached());
        let n = assignment.num_objects();
        let (output, init_format) = match reference {
            Reference::Mask(labels) => {
                let boxes: Vec<_> = (1..=n).map(|o| mask_to_box(&labels.object_mask(o))).collect();
                let present = boxes.iter().map(Option::is_some).collect();
                let labels = crate::geometry::LabelMap::new(labels.height(), labels.width(), n, labels.data().to_vec())?;
                (FrameOutput { labels, consistency: vec![1.0; n], boxes, present }, InitFormat::Mask)
            }
            Reference::Boxes(boxes) => {
                let decoded = self.model.decode(&emb, &memory, &assignment)?.finalize()?;
                let mut boxes = boxes.clone();
                boxes.resize(n, None);
                let boxes: Vec<_> = boxes.iter().map(|b| b.map(|b| b.clamp_to(frame.height(), frame.width()))).collect();
                let present = boxes.iter().map(Option::is_some).collect();
                let consistency = crate::heads::branch_consistency(&boxes, &decoded.labels);
                (FrameOutput { labels: decoded.labels, boxes, present, consistency }, InitFormat::Box)
            }
        };
        self.state = Some(TrackerState { memory, assignment, last: output.clone(), frame: 0, init_format });
        Ok(output)
    }

    /// Processes the next frame and writes it into memory with its predicted labels.
    pub fn step(&mut self, frame: &Image) -> Result<FrameOutput> {
        let model = self.model;
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::InitFormatMismatch("tracker stepped before initialization".into()))?;
        let emb = model.encode(frame)?;
        let output = model.decode(&emb, &state.memory, &state.assignment)?.finalize()?;
        let index = state.frame + 1;
        let entry = model.labels_entry(&emb, &output.labels, &state.assignment, index)?;
        state.memory.write(entry.detached());
        state.frame = index;
        state.last = output.clone();
        Ok(output)
    }
}

/// Tracks a whole sequence from a first-frame reference.
///
/// Objects get bank slots `1..=N` unless an assignment is given.
pub fn track_sequence(
    model: &Model,
    frames: &[Image],
    reference: &Reference,
    assignment: Option<IdAssignment>,
    memory_cfg: &MemoryConfig,
) -> Result<Vec<FrameOutput>> {
    let first = frames.first().ok_or(Error::DataSourceEmpty)?;
    let assignment = match assignment {
        Some(a) => a,
        None => IdAssignment::sequential(reference.num_objects(), model.cfg.capacity)?,
    };
    let mut tracker = Tracker::new(model, memory_cfg.clone());
    let mut out = Vec::with_capacity(frames.len());
    out.push(tracker.initialize(first, reference, assignment)?);
    for frame in &frames[1..] {
        out.push(tracker.step(frame)?);
    }
    Ok(out)
}

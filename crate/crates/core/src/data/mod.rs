//! Video samples, the synthetic moving-shapes generator and on-disk formats.

mod io;
mod synth;

pub use io::{load_box_file, load_mask_folder, parse_box_lines, write_box_file, write_mask_folder, write_rgb_png};
pub use synth::{generate_sequence, ShapeKind, SynthConfig};

use crate::error::{Error, Result};
use crate::geometry::{BBox, LabelMap};

/// RGB image with values in `[0, 1]`, stored row-major `HxWx3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Shifts content by whole pixels, replicating the border.
    pub fn translate(&self, dy: isize, dx: isize) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                let sr = (r as isize - dy).clamp(0, self.height as isize - 1) as usize;
                let sc = (c as isize - dx).clamp(0, self.width as isize - 1) as usize;
                out.set_pixel(r, c, self.pixel(sr, sc));
            }
        }
        out
    }
}

/// A clip with per-frame labels, boxes and presence for objects `1..=num_objects`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub name: String,
    pub frames: Vec<Image>,
    pub labels: Vec<LabelMap>,
    /// `boxes[frame][object - 1]`.
    pub boxes: Vec<Vec<Option<BBox>>>,
    pub presence: Vec<Vec<bool>>,
}

impl SequenceSample {
    /// Builds a sample whose boxes and presence flags are derived from the labels.
    pub fn from_labels(name: impl Into<String>, frames: Vec<Image>, labels: Vec<LabelMap>) -> Result<Self> {
        if frames.len() != labels.len() {
            return Err(Error::LengthMismatch(frames.len(), labels.len()));
        }
        let num_objects = labels.iter().map(|l| l.num_objects()).max().unwrap_or(0);
        let labels: Vec<LabelMap> = labels
            .into_iter()
            .map(|l| LabelMap::new(l.height(), l.width(), num_objects, l.data().to_vec()))
            .collect::<Result<_>>()?;
        let boxes: Vec<Vec<Option<BBox>>> = labels.iter().map(|l| l.boxes()).collect();
        let presence = boxes.iter().map(|b| b.iter().map(Option::is_some).collect()).collect();
        Ok(Self { name: name.into(), frames, labels, boxes, presence })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.labels.first().map_or(0, |l| l.num_objects())
    }
}

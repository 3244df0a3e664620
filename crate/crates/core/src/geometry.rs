//! Boxes, label maps and the conversions between them.
//!
//! Pixel `(row, col)` occupies the unit square with its top-left corner at
//! `(col, row)`. Boxes built from discrete masks are inclusive of both corner
//! pixels, so a solid rectangle over rows `2..=5` and cols `3..=7` has the
//! box `(3, 2, 7, 5)`. Areas are measured on the continuous coordinates
//! (`(x2 - x1) * (y2 - y1)`), which is what the predicted boxes use.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, reordering each coordinate pair so that `x1 <= x2` and `y1 <= y2`.
    /// NaN coordinates are kept, so `is_finite` still catches them.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        let order = |a: f64, b: f64| if a <= b { (a, b) } else { (b, a) };
        let ((x1, x2), (y1, y2)) = (order(x1, x2), order(y1, y2));
        Self { x1, y1, x2, y2 }
    }

    /// From the `x, y, w, h` top-left convention.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()
    }

    /// Clamps every coordinate into `[0, width - 1] x [0, height - 1]`.
    pub fn clamp_to(&self, height: usize, width: usize) -> Self {
        let xmax = width.saturating_sub(1) as f64;
        let ymax = height.saturating_sub(1) as f64;
        Self::new(
            self.x1.clamp(0.0, xmax),
            self.y1.clamp(0.0, ymax),
            self.x2.clamp(0.0, xmax),
            self.y2.clamp(0.0, ymax),
        )
    }

    fn intersection(&self, other: &Self) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    fn hull(&self, other: &Self) -> Self {
        Self {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }
}

/// Row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} cells, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    /// Builds a mask from a list of `(row, col)` foreground pixels.
    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Self {
        let mut mask = Self::zeros(height, width);
        for &(r, c) in pixels {
            mask.set(r, c, true);
        }
        mask
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    pub fn union_count(&self, other: &Self) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a || b).count()
    }

    /// Mask IoU; two empty masks score 1.
    pub fn iou(&self, other: &Self) -> f64 {
        let union = self.union_count(other);
        if union == 0 {
            return 1.0;
        }
        self.intersection_count(other) as f64 / union as f64
    }
}

/// Per-pixel object identity; 0 is background, `1..=num_objects` are objects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_objects: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_objects: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label data has {} cells, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize > num_objects) {
            return Err(Error::LabelOutOfRange { label: bad as usize, max: num_objects });
        }
        Ok(Self { height, width, num_objects, data })
    }

    pub fn zeros(height: usize, width: usize, num_objects: usize) -> Self {
        Self { height, width, num_objects, data: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        debug_assert!(label as usize <= self.num_objects);
        self.data[row * self.width + col] = label;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn object_mask(&self, object: usize) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as usize == object).collect(),
        }
    }

    /// Tight box of each object `1..=num_objects`, `None` where absent.
    pub fn boxes(&self) -> Vec<Option<BBox>> {
        let mut extents: Vec<Option<(usize, usize, usize, usize)>> = vec![None; self.num_objects];
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(r, c) as usize;
                if v == 0 {
                    continue;
                }
                let e = &mut extents[v - 1];
                *e = Some(match *e {
                    None => (c, r, c, r),
                    Some((x1, y1, x2, y2)) => (x1.min(c), y1.min(r), x2.max(c), y2.max(r)),
                });
            }
        }
        extents
            .into_iter()
            .map(|e| e.map(|(x1, y1, x2, y2)| BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)))
            .collect()
    }

    /// Relabels objects: pixel with label `k` (k >= 1) becomes `perm[k - 1]`.
    pub fn relabel(&self, perm: &[u8]) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| if v == 0 { 0 } else { perm[v as usize - 1] })
            .collect();
        Self { data, ..self.clone() }
    }

    /// Downsamples by an integer factor with a per-cell majority vote.
    ///
    /// Ties are broken in favour of foreground labels, and among foreground
    /// labels in favour of the larger index.
    pub fn downsample_majority(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} label map is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Self::zeros(h, w, self.num_objects);
        let mut counts = vec![0usize; self.num_objects + 1];
        for r in 0..h {
            for c in 0..w {
                counts.iter_mut().for_each(|v| *v = 0);
                for dr in 0..factor {
                    for dc in 0..factor {
                        counts[self.get(r * factor + dr, c * factor + dc) as usize] += 1;
                    }
                }
                let mut best = 0usize;
                for (label, &n) in counts.iter().enumerate().skip(1) {
                    if n > 0 && n >= counts[best] {
                        best = label;
                    }
                }
                out.set(r, c, best as u8);
            }
        }
        Ok(out)
    }
}

/// Foreground pixels touching each side of the object's tight box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PinpointSet {
    pub top: Vec<(usize, usize)>,
    pub bottom: Vec<(usize, usize)>,
    pub left: Vec<(usize, usize)>,
    pub right: Vec<(usize, usize)>,
}

/// Tight box around the foreground, or `None` for an empty mask.
pub fn mask_to_box(mask: &BinaryMask) -> Option<BBox> {
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                extent = Some(match extent {
                    None => (c, r, c, r),
                    Some((x1, y1, x2, y2)) => (x1.min(c), y1.min(r), x2.max(c), y2.max(r)),
                });
            }
        }
    }
    extent.map(|(x1, y1, x2, y2)| BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
}

/// All foreground pixels attaining the extreme row or column of each side, in scan order.
pub fn extract_pinpoints(mask: &BinaryMask) -> Result<PinpointSet> {
    let mut min_row = usize::MAX;
    let mut max_row = 0;
    let mut min_col = usize::MAX;
    let mut max_col = 0;
    let mut any = false;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                any = true;
                min_row = min_row.min(r);
                max_row = max_row.max(r);
                min_col = min_col.min(c);
                max_col = max_col.max(c);
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    let mut set = PinpointSet { top: vec![], bottom: vec![], left: vec![], right: vec![] };
    for r in 0..mask.height {
        for c in 0..mask.width {
            if !mask.get(r, c) {
                continue;
            }
            if r == min_row {
                set.top.push((r, c));
            }
            if r == max_row {
                set.bottom.push((r, c));
            }
            if c == min_col {
                set.left.push((r, c));
            }
            if c == max_col {
                set.right.push((r, c));
            }
        }
    }
    Ok(set)
}

/// Recovers the box from the side-aligned coordinate of one pinpoint per side.
pub fn box_from_pinpoints(p: &PinpointSet) -> Result<BBox> {
    let side = |list: &[(usize, usize)], name: &'static str| {
        list.first().copied().ok_or(Error::EmptySide(name))
    };
    let (top, _) = side(&p.top, "top")?;
    let (bottom, _) = side(&p.bottom, "bottom")?;
    let (_, left) = side(&p.left, "left")?;
    let (_, right) = side(&p.right, "right")?;
    Ok(BBox::new(left as f64, top as f64, right as f64, bottom as f64))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: IoU minus the empty fraction of the enclosing hull.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if hull <= 0.0 {
        return iou;
    }
    iou - (hull - union) / hull
}

/// Paints boxes into a label map; box `i` gets label `i + 1`.
///
/// Where boxes overlap the smaller box wins, ties go to the higher index.
/// Coordinates are clamped to the grid; a pixel is covered when its index
/// lies within the box on both axes.
pub fn rasterize_boxes(boxes: &[Option<BBox>], height: usize, width: usize) -> LabelMap {
    let mut out = LabelMap::zeros(height, width, boxes.len());
    if height == 0 || width == 0 {
        return out;
    }
    let mut order: Vec<(usize, BBox)> = boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.map(|b| (i, b.clamp_to(height, width))))
        .collect();
    // Paint largest first so that smaller boxes overwrite.
    order.sort_by(|(ia, a), (ib, b)| b.area().total_cmp(&a.area()).then(ia.cmp(ib)));
    for (i, b) in order {
        let r0 = b.y1.ceil() as usize;
        let r1 = b.y2.floor() as usize;
        let c0 = b.x1.ceil() as usize;
        let c1 = b.x2.floor() as usize;
        for r in r0..=r1.min(height - 1) {
            for c in c0..=c1.min(width - 1) {
                out.set(r, c, (i + 1) as u8);
            }
        }
    }
    out
}

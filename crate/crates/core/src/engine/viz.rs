//! Overlay images of tracking outputs and pinpoint probability maps.

use candle_core::{DType, Tensor};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::FrameOutput;

const COLORS: [[f32; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.8, 0.1],
    [0.8, 0.2, 0.8],
    [0.1, 0.8, 0.8],
    [1.0, 0.5, 0.0],
    [0.6, 0.4, 0.2],
];

fn color(object: usize) -> [f32; 3] {
    COLORS[(object - 1) % COLORS.len()]
}

fn draw_box(img: &mut Image, b: &BBox, rgb: [f32; 3]) {
    let b = b.clamp_to(img.height(), img.width());
    let (x1, y1, x2, y2) = (b.x1.round() as usize, b.y1.round() as usize, b.x2.round() as usize, b.y2.round() as usize);
    for x in x1..=x2 {
        img.set_pixel(y1, x, rgb);
        img.set_pixel(y2, x, rgb);
    }
    for y in y1..=y2 {
        img.set_pixel(y, x1, rgb);
        img.set_pixel(y, x2, rgb);
    }
}

/// Blends object masks over the frame and outlines the boxes.
pub fn render_overlay(frame: &Image, output: &FrameOutput) -> Result<Image> {
    let labels = &output.labels;
    if (labels.height(), labels.width()) != (frame.height(), frame.width()) {
        return Err(Error::Shape("overlay labels do not match the frame".into()));
    }
    let mut img = frame.clone();
    for r in 0..frame.height() {
        for c in 0..frame.width() {
            let l = labels.get(r, c) as usize;
            if l > 0 {
                let px = frame.pixel(r, c);
                let col = color(l);
                img.set_pixel(r, c, std::array::from_fn(|i| 0.5 * px[i] + 0.5 * col[i]));
            }
        }
    }
    for (i, b) in output.boxes.iter().enumerate() {
        if let Some(b) = b {
            draw_box(&mut img, b, color(i + 1));
        }
    }
    Ok(img)
}

/// The four side maps of one slot as a 2x2 mosaic (top, bottom / left, right),
/// each cell scaled up by `scale` and normalized to its own maximum.
pub fn render_side_maps(maps: &Tensor, slot: usize, scale: usize) -> Result<Image> {
    let (sides, _, h, w) = maps.dims4()?;
    if sides != 4 {
        return Err(Error::Shape(format!("expected 4 side maps, got {sides}")));
    }
    let maps = maps.to_dtype(DType::F32)?;
    let (ch, cw) = (h * scale, w * scale);
    let mut img = Image::filled(2 * ch, 2 * cw, [0.0; 3]);
    for side in 0..4 {
        let m = maps.get(side)?.get(slot)?.to_vec2::<f32>()?;
        let peak = m.iter().flatten().copied().fold(f32::MIN_POSITIVE, f32::max);
        let (oy, ox) = ((side / 2) * ch, (side % 2) * cw);
        for r in 0..ch {
            for c in 0..cw {
                let v = m[r / scale][c / scale] / peak;
                img.set_pixel(oy + r, ox + c, [v, v * v, 0.2 * (1.0 - v)]);
            }
        }
    }
    Ok(img)
}

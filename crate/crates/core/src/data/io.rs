//! Mask-folder and box-file formats.
//!
//! A sequence folder holds `frames/00000.png` RGB images, `masks/00000.png`
//! indexed-colour label maps (palette index = object label) and an optional
//! `boxes.txt` with one line per frame, each line a comma-separated list of
//! `x,y,w,h` quadruples (one per object) and `nan,nan,nan,nan` for absent
//! objects.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Image, SequenceSample};
use crate::error::{Error, Result};
use crate::geometry::{BBox, LabelMap};

/// The usual VOC/DAVIS colour map.
fn label_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        pal.extend_from_slice(&[r, g, b]);
    }
    pal
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png { path: path.to_path_buf(), reason: e.to_string() }
}

fn frame_name(index: usize) -> String {
    format!("{index:05}.png")
}

pub fn write_rgb_png(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(rgb).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

fn write_indexed_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), labels.width() as u32, labels.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(label_palette());
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(labels.data()).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

struct RawPng {
    height: usize,
    width: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    palette_len: usize,
    bytes: Vec<u8>,
}

fn read_png_raw(path: &Path) -> Result<RawPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut bytes = vec![0u8; size];
    let info = reader.next_frame(&mut bytes).map_err(|e| png_err(path, e))?;
    bytes.truncate(info.buffer_size());
    let palette_len = reader.info().palette.as_ref().map_or(0, |p| p.len() / 3);
    Ok(RawPng {
        height: info.height as usize,
        width: info.width as usize,
        color: info.color_type,
        depth: info.bit_depth,
        palette_len,
        bytes,
    })
}

fn read_rgb_png(path: &Path) -> Result<Image> {
    let raw = read_png_raw(path)?;
    if raw.depth != png::BitDepth::Eight {
        return Err(png_err(path, "expected 8-bit frames"));
    }
    let rgb: Vec<u8> = match raw.color {
        png::ColorType::Rgb => raw.bytes,
        png::ColorType::Rgba => raw.bytes.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => raw.bytes.iter().flat_map(|&v| [v, v, v]).collect(),
        other => return Err(png_err(path, format!("unsupported frame colour type {other:?}"))),
    };
    Image::from_rgb8(raw.height, raw.width, &rgb)
}

fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = read_png_raw(path)?;
    let mismatch = |reason: String| Error::PaletteMismatch { path: path.to_path_buf(), reason };
    if raw.color != png::ColorType::Indexed {
        return Err(mismatch(format!("expected an indexed-colour image, found {:?}", raw.color)));
    }
    if raw.depth != png::BitDepth::Eight {
        return Err(mismatch(format!("expected 8-bit indices, found {:?}", raw.depth)));
    }
    if let Some(&bad) = raw.bytes.iter().find(|&&v| v as usize >= raw.palette_len) {
        return Err(mismatch(format!("index {bad} outside a {}-entry palette", raw.palette_len)));
    }
    Ok((raw.height, raw.width, raw.bytes))
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Writes frames, indexed masks and `boxes.txt` under `dir`.
pub fn write_mask_folder(sample: &SequenceSample, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    let masks_dir = dir.join("masks");
    for d in [&frames_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (i, (img, lab)) in sample.frames.iter().zip(&sample.labels).enumerate() {
        write_rgb_png(&frames_dir.join(frame_name(i)), img.height(), img.width(), &img.to_rgb8())?;
        write_indexed_png(&masks_dir.join(frame_name(i)), lab)?;
    }
    write_box_file(&dir.join("boxes.txt"), &sample.boxes)
}

/// Loads a sequence folder; boxes are derived from the masks.
pub fn load_mask_folder(dir: &Path) -> Result<SequenceSample> {
    let frame_files = sorted_pngs(&dir.join("frames"))?;
    if frame_files.is_empty() {
        return Err(Error::DataSourceEmpty);
    }
    let masks_dir = dir.join("masks");
    let mut frames = Vec::with_capacity(frame_files.len());
    let mut raw_labels = Vec::with_capacity(frame_files.len());
    for (k, frame_path) in frame_files.iter().enumerate() {
        let name = frame_path.file_name().expect("listed files have names");
        let mask_path = masks_dir.join(name);
        if !mask_path.is_file() {
            return Err(Error::MissingFrame(k));
        }
        let img = read_rgb_png(frame_path)?;
        let (h, w, data) = read_label_png(&mask_path)?;
        if (h, w) != (img.height(), img.width()) {
            return Err(Error::Shape(format!(
                "mask {} is {h}x{w} but its frame is {}x{}",
                mask_path.display(),
                img.height(),
                img.width()
            )));
        }
        frames.push(img);
        raw_labels.push((h, w, data));
    }
    let num_objects = raw_labels
        .iter()
        .flat_map(|(_, _, d)| d.iter().copied())
        .max()
        .unwrap_or(0) as usize;
    let labels = raw_labels
        .into_iter()
        .map(|(h, w, d)| LabelMap::new(h, w, num_objects, d))
        .collect::<Result<Vec<_>>>()?;
    let name = dir.file_name().map_or_else(|| "sequence".to_string(), |n| n.to_string_lossy().into_owned());
    SequenceSample::from_labels(name, frames, labels)
}

pub fn write_box_file(path: &Path, boxes: &[Vec<Option<BBox>>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for frame in boxes {
        let fields: Vec<String> = frame
            .iter()
            .map(|b| match b {
                Some(b) => {
                    let [x, y, w, h] = b.to_xywh();
                    format!("{x},{y},{w},{h}")
                }
                None => "nan,nan,nan,nan".to_string(),
            })
            .collect();
        writeln!(w, "{}", fields.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses box-file text; line numbers in errors are 1-based.
pub fn parse_box_lines(text: &str) -> Result<Vec<Vec<Option<BBox>>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse { line: line_no, reason };
        let values = line
            .split(',')
            .map(|f| {
                let f = f.trim();
                if f.eq_ignore_ascii_case("nan") {
                    Ok(f64::NAN)
                } else {
                    f.parse::<f64>().map_err(|e| parse_err(format!("{f:?}: {e}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() || values.len() % 4 != 0 {
            return Err(parse_err(format!("{} fields is not a multiple of 4", values.len())));
        }
        let frame = values
            .chunks(4)
            .map(|q| {
                let nans = q.iter().filter(|v| v.is_nan()).count();
                match nans {
                    4 => Ok(None),
                    0 if q.iter().all(|v| v.is_finite()) && q[2] >= 0.0 && q[3] >= 0.0 => {
                        Ok(Some(BBox::from_xywh(q[0], q[1], q[2], q[3])))
                    }
                    0 => Err(parse_err(format!("invalid box {q:?}"))),
                    _ => Err(parse_err("partially missing box".into())),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(frame);
    }
    Ok(out)
}

pub fn load_box_file(path: &Path) -> Result<Vec<Vec<Option<BBox>>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_box_lines(&text)
}

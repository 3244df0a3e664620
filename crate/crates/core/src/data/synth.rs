//! Deterministic multi-object moving-shapes videos.
//!
//! Every target has its own colour and stripe texture. A distractor copies
//! the look of one target but is never labelled, and an optional grey
//! occluder sweeps across the scene above everything else. Objects are drawn
//! in a fixed per-sequence depth order, nearer objects overwriting farther
//! ones, so the label maps are unambiguous.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Image, SequenceSample};
use crate::error::{Error, Result};
use crate::geometry::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Plus,
    L,
}

impl ShapeKind {
    /// Whether local pixel `(r, c)` of an `h x w` footprint is inside the shape.
    fn contains(self, r: usize, c: usize, h: usize, w: usize) -> bool {
        match self {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let dy = (r as f64 + 0.5 - h as f64 / 2.0) / (h as f64 / 2.0);
                let dx = (c as f64 + 0.5 - w as f64 / 2.0) / (w as f64 / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            ShapeKind::Plus => {
                let (bh, bw) = ((h / 3).max(1), (w / 3).max(1));
                let row_band = r >= (h - bh) / 2 && r < (h - bh) / 2 + bh;
                let col_band = c >= (w - bw) / 2 && c < (w - bw) / 2 + bw;
                row_band || col_band
            }
            ShapeKind::L => {
                let (bh, bw) = ((h / 3).max(1), (w / 3).max(1));
                c < bw || r >= h - bh
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<ShapeKind>,
    pub min_size: usize,
    pub max_size: usize,
    /// Largest per-axis speed in pixels per frame; 0 freezes the scene.
    pub max_speed: f64,
    /// Probability that a sequence contains a sweeping occluder.
    pub occlusion_prob: f64,
    /// Probability that a sequence contains a look-alike distractor.
    pub distractor_prob: f64,
    pub length: usize,
    /// Per-pixel noise amplitude.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            min_objects: 1,
            max_objects: 4,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Plus, ShapeKind::L],
            min_size: 24,
            max_size: 48,
            max_speed: 3.0,
            occlusion_prob: 0.3,
            distractor_prob: 0.5,
            length: 24,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.length == 0 {
            return fail("grid size and length must be positive".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 254 {
            return fail(format!("object range {}..={} is invalid", self.min_objects, self.max_objects));
        }
        if self.shapes.is_empty() {
            return fail("shape set is empty".into());
        }
        if self.min_size < 3 || self.min_size > self.max_size || self.max_size > self.height.min(self.width) {
            return fail(format!("size range {}..={} does not fit the grid", self.min_size, self.max_size));
        }
        for (name, p) in [("occlusion_prob", self.occlusion_prob), ("distractor_prob", self.distractor_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.max_speed >= 0.0) || !(self.noise >= 0.0) {
            return fail("max_speed and noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.15, 0.85, 0.90],
    [0.95, 0.55, 0.10],
    [0.55, 0.30, 0.10],
];

#[derive(Debug, Clone)]
struct Sprite {
    shape: ShapeKind,
    h: usize,
    w: usize,
    color: [f32; 3],
    stripe_period: usize,
    stripe_vertical: bool,
    /// Top-left corner.
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    /// 0 for unlabelled sprites.
    label: u8,
}

impl Sprite {
    fn step(&mut self, height: usize, width: usize) {
        let (ymax, xmax) = ((height - self.h) as f64, (width - self.w) as f64);
        self.y += self.vy;
        self.x += self.vx;
        if self.y < 0.0 {
            self.y = -self.y;
            self.vy = -self.vy;
        }
        if self.y > ymax {
            self.y = 2.0 * ymax - self.y;
            self.vy = -self.vy;
        }
        if self.x < 0.0 {
            self.x = -self.x;
            self.vx = -self.vx;
        }
        if self.x > xmax {
            self.x = 2.0 * xmax - self.x;
            self.vx = -self.vx;
        }
        self.y = self.y.clamp(0.0, ymax);
        self.x = self.x.clamp(0.0, xmax);
    }

    fn texel(&self, r: usize, c: usize) -> [f32; 3] {
        let t = if self.stripe_vertical { c } else { r };
        let shade = if (t / self.stripe_period) % 2 == 0 { 1.0 } else { 0.75 };
        self.color.map(|v| v * shade)
    }
}

fn random_sprite(cfg: &SynthConfig, rng: &mut ChaCha8Rng, label: u8, color: [f32; 3]) -> Sprite {
    let shape = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
    let h = rng.random_range(cfg.min_size..=cfg.max_size);
    let w = rng.random_range(cfg.min_size..=cfg.max_size);
    let speed = |rng: &mut ChaCha8Rng| {
        if cfg.max_speed > 0.0 {
            rng.random_range(-cfg.max_speed..=cfg.max_speed)
        } else {
            0.0
        }
    };
    Sprite {
        shape,
        h,
        w,
        color,
        stripe_period: rng.random_range(2..=5),
        stripe_vertical: rng.random_bool(0.5),
        y: rng.random_range(0.0..=(cfg.height - h) as f64),
        x: rng.random_range(0.0..=(cfg.width - w) as f64),
        vy: speed(rng),
        vx: speed(rng),
        label,
    }
}

/// Generates one sequence; the output is a pure function of `cfg`.
pub fn generate_sequence(cfg: &SynthConfig) -> Result<SequenceSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (height, width) = (cfg.height, cfg.width);

    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut colors = PALETTE.to_vec();
    colors.shuffle(&mut rng);
    let mut sprites: Vec<Sprite> = (0..n)
        .map(|i| random_sprite(cfg, &mut rng, (i + 1) as u8, colors[i % colors.len()]))
        .collect();

    if rng.random_bool(cfg.distractor_prob) {
        let template = sprites[rng.random_range(0..n)].clone();
        let mut d = random_sprite(cfg, &mut rng, 0, template.color);
        d.shape = template.shape;
        d.h = template.h;
        d.w = template.w;
        d.stripe_period = template.stripe_period;
        d.stripe_vertical = template.stripe_vertical;
        sprites.push(d);
    }
    sprites.shuffle(&mut rng);

    // The occluder is drawn last, so it sits in front of everything.
    if rng.random_bool(cfg.occlusion_prob) {
        let h = (height / 2).max(cfg.min_size);
        let w = (width / 5).max(cfg.min_size / 2).max(3);
        let from_left = rng.random_bool(0.5);
        let span = (width - w) as f64;
        let speed = (span / cfg.length.max(2) as f64).max(1.0) * if from_left { 1.0 } else { -1.0 };
        sprites.push(Sprite {
            shape: ShapeKind::Rectangle,
            h,
            w,
            color: [0.5, 0.5, 0.5],
            stripe_period: 4,
            stripe_vertical: false,
            y: rng.random_range(0.0..=(height - h) as f64),
            x: if from_left { 0.0 } else { span },
            vy: 0.0,
            vx: speed,
            label: 0,
        });
    }

    let base: [f32; 3] = [
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..0.3),
    ];
    let (gy, gx) = (rng.random_range(-0.15f32..0.15), rng.random_range(-0.15f32..0.15));
    let mut background = Image::filled(height, width, base);
    for r in 0..height {
        for c in 0..width {
            let g = gy * r as f32 / height as f32 + gx * c as f32 / width as f32;
            background.set_pixel(r, c, base.map(|v| (v + g).clamp(0.0, 1.0)));
        }
    }

    let mut frames = Vec::with_capacity(cfg.length);
    let mut labels = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        if t > 0 {
            for s in &mut sprites {
                s.step(height, width);
            }
        }
        let mut img = background.clone();
        let mut lab = LabelMap::zeros(height, width, n);
        for s in &sprites {
            let (y0, x0) = (s.y.round() as usize, s.x.round() as usize);
            for r in 0..s.h {
                for c in 0..s.w {
                    let (py, px) = (y0 + r, x0 + c);
                    if py >= height || px >= width || !s.shape.contains(r, c, s.h, s.w) {
                        continue;
                    }
                    img.set_pixel(py, px, s.texel(r, c));
                    lab.set(py, px, s.label);
                }
            }
        }
        if cfg.noise > 0.0 {
            for r in 0..height {
                for c in 0..width {
                    let p = img.pixel(r, c);
                    let noisy = p.map(|v| (v + rng.random_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0));
                    img.set_pixel(r, c, noisy);
                }
            }
        }
        frames.push(img);
        labels.push(lab);
    }
    SequenceSample::from_labels(format!("synth-{:06}", cfg.seed), frames, labels)
}

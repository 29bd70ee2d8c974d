//! Synthetic segmentation data: every foreground class is drawn in one of
//! several distinct appearance modes, so a single class covers visually
//! unrelated regions.

mod augment;
mod cutmix;
mod io;

use std::ops::Range;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use augment::{crop, flip_horizontal, weak_augment};
pub use cutmix::{cutmix, mix_pixels, plan_batch, CutMixPlan, Mixable, Rect, AREA_RATIO};
pub use io::{read_sample, write_sample};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Interleaved `height x width x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Image,
    /// Class per pixel, row-major; 0 is background.
    pub label: Vec<u8>,
    /// Appearance mode per pixel (generator metadata; 0 on background).
    pub modes: Vec<u8>,
    pub sample_id: usize,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub modes_per_class: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub noise_std: f64,
    /// Per-image photometric jitter strength in `[0, 1]`: hue rotation up to
    /// this fraction of half the hue gap between palette entries, and a
    /// brightness gain in `1 ± jitter/2`.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            height: 64,
            width: 64,
            classes: 4,
            modes_per_class: 2,
            n_labeled: 8,
            n_unlabeled: 256,
            n_val: 64,
            noise_std: 0.05,
            color_jitter: 0.6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Rect,
    Triangle,
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Placed {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        (self.cy - self.ry, self.cx - self.rx, self.cy + self.ry, self.cx + self.rx)
    }

    fn overlaps(&self, other: &Placed, gap: f64) -> bool {
        let (a0, a1, a2, a3) = self.bbox();
        let (b0, b1, b2, b3) = other.bbox();
        a0 < b2 + gap && b0 < a2 + gap && a1 < b3 + gap && b1 < a3 + gap
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.kind {
            ShapeKind::Circle => (dy / self.ry).powi(2) + (dx / self.rx).powi(2) <= 1.0,
            ShapeKind::Rect => dy.abs() <= self.ry && dx.abs() <= self.rx,
            ShapeKind::Triangle => {
                // apex at the top, base along the bottom edge of the box
                let t = (dy + self.ry) / (2.0 * self.ry);
                (0.0..=1.0).contains(&t) && dx.abs() <= self.rx * t
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const BACKGROUND_LEVEL: f64 = 0.3;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidDataset(m.into()));
        if self.height < 16 || self.width < 16 {
            return bad("height and width must be at least 16");
        }
        if self.classes < 2 || self.classes > 255 {
            return bad("classes must lie in [2, 255]");
        }
        if self.modes_per_class == 0 || self.modes_per_class > 255 {
            return bad("modes_per_class must lie in [1, 255]");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.color_jitter) {
            return bad("color_jitter must lie in [0, 1]");
        }
        if self.n_labeled == 0 {
            return bad("n_labeled must be positive");
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_labeled + self.n_unlabeled + self.n_val
    }

    /// Disjoint, exhaustive id ranges for the three splits.
    pub fn ids(&self, split: Split) -> Range<usize> {
        let a = self.n_labeled;
        let b = a + self.n_unlabeled;
        match split {
            Split::Labeled => 0..a,
            Split::Unlabeled => a..b,
            Split::Val => b..self.total(),
        }
    }

    fn hue_slots(&self) -> usize {
        (self.classes - 1) * self.modes_per_class
    }

    /// Base hue of a foreground `(class, mode)`. Hues are interleaved so that
    /// neighbours on the colour wheel always belong to different classes and
    /// the modes of one class are spread evenly around it.
    pub fn mode_hue(&self, class: usize, mode: usize) -> f64 {
        debug_assert!(class >= 1 && class < self.classes && mode < self.modes_per_class);
        (mode * (self.classes - 1) + class - 1) as f64 / self.hue_slots() as f64
    }

    /// Un-jittered colour of a class/mode pair.
    pub fn mode_color(&self, class: usize, mode: usize) -> [f64; 3] {
        if class == 0 {
            [BACKGROUND_LEVEL; 3]
        } else {
            hsv_to_rgb(self.mode_hue(class, mode), 0.75, 0.85)
        }
    }

    pub fn generate(&self, sample_id: usize) -> Result<SegSample> {
        self.validate()?;
        if sample_id >= self.total() {
            return Err(Error::InvalidDataset(format!(
                "sample id {sample_id} outside [0, {})",
                self.total()
            )));
        }
        let mut rng = rng::stream(self.seed, tag::SAMPLE, sample_id as u64);
        let (h, w) = (self.height, self.width);
        let hf = h.min(w) as f64;

        let fg = self.classes - 1;
        let n_shapes = rng.gen_range(1..=3usize).min(fg);
        let mut classes: Vec<usize> = sample_indices(&mut rng, fg, n_shapes)
            .into_iter()
            .map(|c| c + 1)
            .collect();
        // labeled samples cycle through every (class, mode) pair so that the
        // labeled split covers all appearance modes
        let forced = (sample_id < self.n_labeled).then(|| {
            let slot = sample_id % self.hue_slots();
            (slot % fg + 1, slot / fg)
        });
        if let Some((fc, _)) = forced {
            match classes.iter().position(|&c| c == fc) {
                Some(i) => classes.swap(0, i),
                None => classes[0] = fc,
            }
        }

        let margin_y = (h / 8) as f64;
        let margin_x = (w / 8) as f64;
        let (rmin, rmax) = (hf / 10.0, hf / 5.0);
        let mut placed: Vec<(Placed, usize, usize)> = Vec::new();
        for (i, &class) in classes.iter().enumerate() {
            let mode = rng.gen_range(0..self.modes_per_class);
            let mode = match forced {
                Some((_, m)) if i == 0 => m,
                _ => mode,
            };
            let kind = match rng.gen_range(0..3) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Rect,
                _ => ShapeKind::Triangle,
            };
            for _ in 0..64 {
                let ry = rng.gen_range(rmin..rmax);
                let rx = ry * rng.gen_range(0.7..1.3);
                let (ylo, yhi) = (margin_y + ry, h as f64 - margin_y - ry);
                let (xlo, xhi) = (margin_x + rx, w as f64 - margin_x - rx);
                if ylo >= yhi || xlo >= xhi {
                    continue;
                }
                let cand = Placed {
                    kind,
                    cy: rng.gen_range(ylo..yhi),
                    cx: rng.gen_range(xlo..xhi),
                    ry,
                    rx,
                };
                if placed.iter().all(|(p, _, _)| !p.overlaps(&cand, 2.0)) {
                    placed.push((cand, class, mode));
                    break;
                }
            }
        }

        let jitter = self.color_jitter;
        let half_gap = 0.5 / self.hue_slots() as f64;
        let hue_shift = rng.gen_range(-1.0..=1.0) * jitter * half_gap;
        let gain = 1.0 + rng.gen_range(-1.0..=1.0) * jitter * 0.5;

        let mut label = vec![0u8; h * w];
        let mut modes = vec![0u8; h * w];
        let mut image = Image::new(h, w);
        let bg = [BACKGROUND_LEVEL * gain; 3];
        let colors: Vec<[f64; 3]> = placed
            .iter()
            .map(|&(_, class, mode)| {
                let c = hsv_to_rgb(self.mode_hue(class, mode) + hue_shift, 0.75, 0.85);
                c.map(|v| v * gain)
            })
            .collect();
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut color = bg;
                for (k, (shape, class, mode)) in placed.iter().enumerate() {
                    if shape.contains(py, px) {
                        label[y * w + x] = *class as u8;
                        modes[y * w + x] = *mode as u8;
                        color = colors[k];
                    }
                }
                for (ch, &c) in color.iter().enumerate() {
                    let n = if self.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    image.data[(y * w + x) * 3 + ch] = (c + n).clamp(0.0, 1.0) as f32;
                }
            }
        }
        Ok(SegSample {
            image,
            label,
            modes,
            sample_id,
        })
    }

    pub fn generate_split(&self, split: Split) -> Result<Vec<SegSample>> {
        self.ids(split).map(|id| self.generate(id)).collect()
    }
}

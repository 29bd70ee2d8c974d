use rand::seq::SliceRandom;
use rand::Rng as _;

use super::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Range of the pasted rectangle's area as a fraction of the frame.
pub const AREA_RATIO: (f64, f64) = (0.25, 0.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.top + self.height > height || self.left + self.width > width {
            return Err(Error::RectOutOfFrame {
                rect: (self.top, self.left, self.height, self.width),
                height,
                width,
            });
        }
        Ok(())
    }
}

/// One strong augmentation: `src_b` pasted into `src_a` inside `rect`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutMixPlan {
    pub rect: Rect,
    pub src_a: usize,
    pub src_b: usize,
}

/// Per-pixel selection between two interleaved maps with `channels` values per pixel.
pub fn mix_pixels<T: Copy>(a: &[T], b: &[T], height: usize, width: usize, channels: usize, rect: &Rect) -> Vec<T> {
    debug_assert_eq!(a.len(), height * width * channels);
    debug_assert_eq!(b.len(), a.len());
    let mut out = a.to_vec();
    for y in rect.top..rect.top + rect.height {
        let lo = (y * width + rect.left) * channels;
        let hi = lo + rect.width * channels;
        out[lo..hi].copy_from_slice(&b[lo..hi]);
    }
    out
}

/// Anything spatial that CutMix must move in lockstep with the image.
pub trait Mixable: Sized {
    fn frame(&self) -> (usize, usize);

    /// `self` outside `rect`, `other` inside.
    fn mix(&self, other: &Self, rect: &Rect) -> Self;
}

impl Mixable for Image {
    fn frame(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn mix(&self, other: &Self, rect: &Rect) -> Self {
        Image {
            height: self.height,
            width: self.width,
            data: mix_pixels(&self.data, &other.data, self.height, self.width, 3, rect),
        }
    }
}

/// Applies each plan to `batch`, producing one mixed item per plan.
pub fn cutmix<T: Mixable>(batch: &[T], plans: &[CutMixPlan]) -> Result<Vec<T>> {
    plans
        .iter()
        .map(|plan| {
            for idx in [plan.src_a, plan.src_b] {
                if idx >= batch.len() {
                    return Err(Error::BatchIndex {
                        index: idx,
                        len: batch.len(),
                    });
                }
            }
            let (a, b) = (&batch[plan.src_a], &batch[plan.src_b]);
            let (h, w) = a.frame();
            if b.frame() != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "cutmix",
                    left: vec![h, w],
                    right: vec![b.frame().0, b.frame().1],
                });
            }
            plan.rect.check(h, w)?;
            Ok(a.mix(b, &plan.rect))
        })
        .collect()
}

/// Draws one plan per batch item: `src_a = i`, `src_b` from a random
/// permutation, rectangle area uniform in [`AREA_RATIO`] of the frame with
/// aspect ratio in `[1/2, 2]`.
pub fn plan_batch(batch: usize, height: usize, width: usize, rng: &mut Rng) -> Vec<CutMixPlan> {
    let mut partner: Vec<usize> = (0..batch).collect();
    partner.shuffle(rng);
    (0..batch)
        .map(|i| {
            let area = rng.gen_range(AREA_RATIO.0..=AREA_RATIO.1) * (height * width) as f64;
            let aspect: f64 = rng.gen_range(0.5f64.ln()..=2.0f64.ln()).exp();
            let rh = ((area * aspect).sqrt().round() as usize).clamp(1, height);
            let rw = ((area / rh as f64).round() as usize).clamp(1, width);
            let rect = Rect {
                top: rng.gen_range(0..=height - rh),
                left: rng.gen_range(0..=width - rw),
                height: rh,
                width: rw,
            };
            CutMixPlan {
                rect,
                src_a: i,
                src_b: partner[i],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn img(v: f32) -> Image {
        Image {
            height: 8,
            width: 6,
            data: vec![v; 8 * 6 * 3],
        }
    }

    fn plan(rect: Rect) -> CutMixPlan {
        CutMixPlan { rect, src_a: 0, src_b: 1 }
    }

    #[test]
    fn empty_rect_keeps_source_a() {
        let out = cutmix(&[img(0.0), img(1.0)], &[plan(Rect { top: 3, left: 2, height: 0, width: 0 })]).unwrap();
        assert_eq!(out[0], img(0.0));
    }

    #[test]
    fn full_rect_gives_source_b() {
        let out = cutmix(&[img(0.0), img(1.0)], &[plan(Rect { top: 0, left: 0, height: 8, width: 6 })]).unwrap();
        assert_eq!(out[0], img(1.0));
    }

    #[test]
    fn pasted_pixel_count_equals_rect_area() {
        let rect = Rect { top: 2, left: 1, height: 5, width: 3 };
        let out = cutmix(&[img(0.0), img(1.0)], &[plan(rect)]).unwrap();
        let from_b = out[0].data.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(from_b, rect.area() * 3);
    }

    #[test]
    fn out_of_frame_rect_is_an_error() {
        let bad = plan(Rect { top: 5, left: 0, height: 4, width: 2 });
        assert!(matches!(cutmix(&[img(0.0), img(1.0)], &[bad]), Err(Error::RectOutOfFrame { .. })));
        let bad_idx = CutMixPlan { src_b: 2, ..plan(Rect { top: 0, left: 0, height: 1, width: 1 }) };
        assert!(matches!(cutmix(&[img(0.0), img(1.0)], &[bad_idx]), Err(Error::BatchIndex { .. })));
    }

    #[test]
    fn planned_rects_fit_and_respect_area_ratio() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..200 {
            for p in plan_batch(4, 56, 56, &mut rng) {
                p.rect.check(56, 56).unwrap();
                let ratio = p.rect.area() as f64 / (56.0 * 56.0);
                // rounding to whole pixels moves the ratio slightly
                assert!((0.22..=0.53).contains(&ratio), "{ratio}");
            }
        }
    }
}

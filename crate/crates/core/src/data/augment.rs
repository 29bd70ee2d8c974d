use rand::Rng as _;

use super::{Image, SegSample};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub fn flip_horizontal(sample: &SegSample) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let mut out = sample.clone();
    for y in 0..h {
        for x in 0..w {
            let (dst, src) = (y * w + x, y * w + (w - 1 - x));
            out.label[dst] = sample.label[src];
            out.modes[dst] = sample.modes[src];
            out.image.data[dst * 3..dst * 3 + 3].copy_from_slice(&sample.image.data[src * 3..src * 3 + 3]);
        }
    }
    out
}

pub fn crop(sample: &SegSample, top: usize, left: usize, height: usize, width: usize) -> Result<SegSample> {
    let (h, w) = (sample.height(), sample.width());
    if height == 0 || width == 0 || top + height > h || left + width > w {
        return Err(Error::InvalidDataset(format!(
            "crop {height}x{width} at ({top}, {left}) exceeds {h}x{w}"
        )));
    }
    let mut image = Image::new(height, width);
    let mut label = vec![0u8; height * width];
    let mut modes = vec![0u8; height * width];
    for y in 0..height {
        let src = (top + y) * w + left;
        label[y * width..(y + 1) * width].copy_from_slice(&sample.label[src..src + width]);
        modes[y * width..(y + 1) * width].copy_from_slice(&sample.modes[src..src + width]);
        image.data[y * width * 3..(y + 1) * width * 3]
            .copy_from_slice(&sample.image.data[src * 3..(src + width) * 3]);
    }
    Ok(SegSample {
        image,
        label,
        modes,
        sample_id: sample.sample_id,
    })
}

/// Random crop of size `crop_size` followed by a horizontal flip with
/// probability 1/2; the same transform hits image, labels and mode map.
pub fn weak_augment(sample: &SegSample, crop_size: (usize, usize), seed: u64) -> Result<SegSample> {
    let (ch, cw) = crop_size;
    let (h, w) = (sample.height(), sample.width());
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(Error::InvalidDataset(format!(
            "crop size {ch}x{cw} exceeds image {h}x{w}"
        )));
    }
    let mut rng = rng::stream(seed, tag::AUGMENT, sample.sample_id as u64);
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    let flip = rng.gen_bool(0.5);
    let out = crop(sample, top, left, ch, cw)?;
    Ok(if flip { flip_horizontal(&out) } else { out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;

    fn sample() -> SegSample {
        DatasetSpec::default().generate(5).unwrap()
    }

    fn class_counts(s: &SegSample) -> Vec<usize> {
        let mut c = vec![0; 256];
        s.label.iter().for_each(|&l| c[l as usize] += 1);
        c
    }

    #[test]
    fn flip_is_an_involution() {
        let s = sample();
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        assert_ne!(flip_horizontal(&s), s);
    }

    #[test]
    fn flip_preserves_class_pixel_counts() {
        let s = sample();
        assert_eq!(class_counts(&flip_horizontal(&s)), class_counts(&s));
    }

    #[test]
    fn full_frame_crop_without_flip_is_identity() {
        let s = sample();
        assert_eq!(crop(&s, 0, 0, 64, 64).unwrap(), s);
        // a full-frame weak augment is either the identity or a flip
        for seed in 0..8 {
            let a = weak_augment(&s, (64, 64), seed).unwrap();
            assert!(a == s || a == flip_horizontal(&s));
        }
    }

    #[test]
    fn weak_augment_is_pure() {
        let s = sample();
        assert_eq!(weak_augment(&s, (56, 56), 9).unwrap(), weak_augment(&s, (56, 56), 9).unwrap());
    }

    #[test]
    fn default_crop_keeps_every_class() {
        let spec = DatasetSpec::default();
        for id in 0..40 {
            let s = spec.generate(id).unwrap();
            for seed in 0..4 {
                let a = weak_augment(&s, (56, 56), seed).unwrap();
                let before: Vec<bool> = class_counts(&s).iter().map(|&c| c > 0).collect();
                let after: Vec<bool> = class_counts(&a).iter().map(|&c| c > 0).collect();
                assert_eq!(before, after, "sample {id} seed {seed}");
            }
        }
    }

    #[test]
    fn oversized_crop_is_rejected() {
        assert!(weak_augment(&sample(), (65, 10), 0).is_err());
        assert!(crop(&sample(), 60, 0, 10, 10).is_err());
    }
}

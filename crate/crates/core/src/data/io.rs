//! Flat binary sample files: `height, width, classes` as little-endian `u32`,
//! then `height*width*3` little-endian `f32` image values (interleaved RGB),
//! then `height*width` `u8` labels.

use std::io::{Read, Write};

use super::{Image, SegSample};
use crate::error::{Error, Result};

pub fn write_sample<W: Write>(mut out: W, sample: &SegSample, classes: usize) -> std::io::Result<()> {
    for v in [sample.height(), sample.width(), classes] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(sample.image.data.len() * 4 + sample.label.len());
    for v in &sample.image.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&sample.label);
    out.write_all(&buf)
}

/// Reads a sample written by [`write_sample`]; returns it with its class count.
/// The mode map is not stored and comes back zeroed.
pub fn read_sample<R: Read>(mut input: R, sample_id: usize) -> Result<(SegSample, usize)> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<sample>", e))?;
    let u32_at = |i: usize| -> Result<usize> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::InvalidDataset("truncated sample header".into()))
    };
    let (h, w, classes) = (u32_at(0)?, u32_at(1)?, u32_at(2)?);
    let n = h * w;
    let expected = 12 + n * 3 * 4 + n;
    if bytes.len() != expected {
        return Err(Error::InvalidDataset(format!(
            "sample file has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let data = bytes[12..12 + n * 12]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let label = bytes[12 + n * 12..].to_vec();
    if let Some(&bad) = label.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidDataset(format!("label {bad} >= class count {classes}")));
    }
    Ok((
        SegSample {
            image: Image {
                height: h,
                width: w,
                data,
            },
            label,
            modes: vec![0; n],
            sample_id,
        },
        classes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;

    #[test]
    fn header_layout_is_fixed() {
        let s = DatasetSpec::default().generate(0).unwrap();
        let mut buf = Vec::new();
        write_sample(&mut buf, &s, 4).unwrap();
        assert_eq!(&buf[..12], &[64, 0, 0, 0, 64, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(buf.len(), 12 + 64 * 64 * 13);
        let (back, classes) = read_sample(&buf[..], 0).unwrap();
        assert_eq!(classes, 4);
        assert_eq!(back.image, s.image);
        assert_eq!(back.label, s.label);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let s = DatasetSpec::default().generate(1).unwrap();
        let mut buf = Vec::new();
        write_sample(&mut buf, &s, 4).unwrap();
        assert!(read_sample(&buf[..buf.len() - 1], 1).is_err());
        assert!(read_sample(&buf[..5], 1).is_err());
    }
}

//! Binary 8-bit PGM export.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// How image values map onto `0..=255`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RangePolicy {
    /// The image's own minimum maps to 0 and maximum to 255.
    MinMax,
    /// `lo` maps to 0 and `hi` to 255; values outside are clipped.
    Fixed { lo: f64, hi: f64 },
}

/// Quantises `img` to gray levels.
pub fn to_gray(img: &Array2<f64>, policy: RangePolicy) -> Result<Array2<u8>> {
    if img.is_empty() {
        return Err(Error::shape("cannot export an empty image"));
    }
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("exported image"));
    }
    let (lo, hi) = match policy {
        RangePolicy::MinMax => img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        RangePolicy::Fixed { lo, hi } => {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::param(format!("invalid display range [{lo}, {hi}]")));
            }
            (lo, hi)
        }
    };
    let span = hi - lo;
    Ok(img.mapv(|v| if span > 0.0 { (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8 } else { 0 }))
}

/// `P5` header followed by one byte per pixel, rows top to bottom.
pub fn encode_pgm(img: &Array2<f64>, policy: RangePolicy) -> Result<Vec<u8>> {
    let gray = to_gray(img, policy)?;
    let (h, w) = gray.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(gray.iter());
    Ok(out)
}

pub fn export_pgm(img: &Array2<f64>, path: impl AsRef<Path>, policy: RangePolicy) -> Result<()> {
    let bytes = encode_pgm(img, policy)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Whitespace-token reader independent of the encoder.
    fn naive_read(bytes: &[u8]) -> (usize, usize, usize, Vec<u8>) {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
        }
        assert_eq!(fields[0], "P5");
        (fields[1].parse().unwrap(), fields[2].parse().unwrap(), fields[3].parse().unwrap(), bytes[pos + 1..].to_vec())
    }

    #[test]
    fn constant_image_is_mid_gray_under_fixed_range() {
        let img = Array2::from_elem((3, 4), 0.7);
        let g = to_gray(&img, RangePolicy::Fixed { lo: 0.0, hi: 1.4 }).unwrap();
        assert!(g.iter().all(|&v| v == 128));
    }

    #[test]
    fn ramp_hits_both_extremes() {
        let img = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let bytes = encode_pgm(&img, RangePolicy::MinMax).unwrap();
        let (w, h, max, px) = naive_read(&bytes);
        assert_eq!((w, h, max), (2, 2, 255));
        assert_eq!(px, vec![0, 85, 170, 255]);
    }

    #[test]
    fn non_square_dimensions_are_width_then_height() {
        let img = Array2::from_shape_fn((2, 5), |(i, j)| (i * 5 + j) as f64);
        let (w, h, _, px) = naive_read(&encode_pgm(&img, RangePolicy::MinMax).unwrap());
        assert_eq!((w, h), (5, 2));
        assert_eq!(px.len(), 10);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(to_gray(&Array2::zeros((0, 3)), RangePolicy::MinMax).is_err());
        assert!(to_gray(&Array2::from_elem((2, 2), f64::NAN), RangePolicy::MinMax).is_err());
        assert!(to_gray(&Array2::zeros((2, 2)), RangePolicy::Fixed { lo: 1.0, hi: 1.0 }).is_err());
    }

    #[test]
    fn file_export() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        export_pgm(&Array2::from_elem((2, 2), 1.0), &p, RangePolicy::MinMax).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"P5\n2 2\n255\n\0\0\0\0");
    }
}

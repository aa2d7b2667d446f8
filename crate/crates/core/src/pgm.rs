//! Binary greymap (P5) images for inspecting occlusions and attributions.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch {
                op: "pgm",
                lhs: vec![height, width],
                rhs: vec![pixels.len()],
            });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::CorruptPayload(format!("pgm: {what}"));
        // Header: magic, width, height, maxval, each separated by whitespace,
        // with '#' comments; exactly one whitespace byte precedes the raster.
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary greymap"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        let raster = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
        if raster.len() != width * height {
            return Err(Error::TruncatedFile {
                expected: width * height,
                actual: raster.len(),
            });
        }
        GrayImage::new(width, height, raster.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        GrayImage::from_bytes(&bytes)
    }
}

/// Linearly maps `values` onto 0..=255. A constant map becomes mid-grey.
pub fn minmax_scale(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Places equally sized panels side by side with `gap` white columns between.
pub fn side_by_side(panels: &[GrayImage], gap: usize) -> Result<GrayImage> {
    let first = panels.first().ok_or(Error::EmptyInput("panels"))?;
    let (w, h) = (first.width, first.height);
    if panels.iter().any(|p| p.width != w || p.height != h) {
        return Err(Error::Config("panels differ in size".into()));
    }
    let total = panels.len() * w + (panels.len() - 1) * gap;
    let mut pixels = vec![255u8; total * h];
    for (i, p) in panels.iter().enumerate() {
        let x0 = i * (w + gap);
        for y in 0..h {
            pixels[y * total + x0..y * total + x0 + w]
                .copy_from_slice(&p.pixels[y * w..(y + 1) * w]);
        }
    }
    GrayImage::new(total, h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_scale(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
        assert_eq!(minmax_scale(&[3.0, 3.0]), vec![128, 128]);
    }

    #[test]
    fn header_with_comment() {
        let img = GrayImage::from_bytes(b"P5 # made by hand\n2 1\n255\n\x07\x09").unwrap();
        assert_eq!(img.pixels, vec![7, 9]);
        assert!(GrayImage::from_bytes(b"P2\n1 1\n255\n\x00").is_err());
        assert!(GrayImage::from_bytes(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn panels_are_separated() {
        let a = GrayImage::new(2, 1, vec![0, 0]).unwrap();
        let b = GrayImage::new(2, 1, vec![9, 9]).unwrap();
        let joined = side_by_side(&[a, b], 1).unwrap();
        assert_eq!((joined.width, joined.height), (5, 1));
        assert_eq!(joined.pixels, vec![0, 0, 255, 9, 9]);
    }

    proptest! {
        #[test]
        fn round_trip((w, h, pixels) in (1usize..40, 1usize..40).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(any::<u8>(), w * h))
        })) {
            let img = GrayImage::new(w, h, pixels).unwrap();
            prop_assert_eq!(GrayImage::from_bytes(&img.to_bytes()).unwrap(), img);
        }
    }
}

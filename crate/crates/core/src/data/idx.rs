//! Reader and writer for the IDX container used by the MNIST distribution.
//!
//! All header integers are big-endian. Image files start with magic `2051`
//! followed by count, rows and cols; label files start with magic `2049`
//! followed by count. Gzip-compressed files are detected by their two-byte
//! signature and decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

const GZIP_SIGNATURE: [u8; 2] = [0x1f, 0x8b];

/// One image as a row-major byte grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteGrid {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl ByteGrid {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.cols + col]
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let word = bytes.get(offset..offset + 4).ok_or(Error::TruncatedFile {
        expected: offset + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(
        word.try_into().expect("slice of length 4"),
    ))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::WrongMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<ByteGrid>> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let expected = 16 + count * size;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            actual: bytes.len(),
        });
    }
    Ok((0..count)
        .map(|i| ByteGrid {
            rows,
            cols,
            pixels: bytes[16 + i * size..16 + (i + 1) * size].to_vec(),
        })
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            actual: bytes.len(),
        });
    }
    let labels = bytes[8..expected].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(Error::LabelOutOfRange { index, label });
    }
    Ok(labels)
}

pub fn write_idx_images(images: &[ByteGrid]) -> Vec<u8> {
    let (rows, cols) = images.first().map_or((0, 0), |g| (g.rows, g.cols));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for grid in images {
        out.extend_from_slice(&grid.pixels);
    }
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads a whole file, inflating it first if it carries a gzip signature.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&GZIP_SIGNATURE) {
        let mut inflated = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut inflated)
            .map_err(|e| Error::io(path, e))?;
        Ok(inflated)
    } else {
        Ok(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_header(magic: u32, n: u32, r: u32, c: u32) -> Vec<u8> {
        [magic, n, r, c]
            .iter()
            .flat_map(|v| v.to_be_bytes())
            .collect()
    }

    #[test]
    fn parses_constructed_image_stream() {
        let mut bytes = image_header(2051, 1, 2, 2);
        bytes.extend_from_slice(&[0, 255, 7, 9]);
        let grids = parse_idx_images(&bytes).unwrap();
        assert_eq!(grids.len(), 1);
        assert_eq!(grids[0].get(0, 0), 0);
        assert_eq!(grids[0].get(0, 1), 255);
        assert_eq!(grids[0].get(1, 0), 7);
        assert_eq!(grids[0].get(1, 1), 9);
    }

    #[test]
    fn label_magic_in_image_slot_is_rejected() {
        let mut bytes = image_header(2049, 1, 2, 2);
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(Error::WrongMagic {
                expected: 2051,
                found: 2049
            })
        ));
    }

    #[test]
    fn short_image_payload_is_truncated() {
        let mut bytes = image_header(2051, 2, 2, 2);
        bytes.extend_from_slice(&[1, 2, 3, 4, 5]);
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(Error::TruncatedFile {
                expected: 24,
                actual: 21
            })
        ));
        assert!(matches!(
            parse_idx_images(&[0, 0, 8]),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn parses_labels() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 3];
        bytes.extend_from_slice(&[0, 1, 0]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn label_errors() {
        let truncated = [0, 0, 8, 1, 0, 0, 0, 3, 0, 1];
        assert!(matches!(
            parse_idx_labels(&truncated),
            Err(Error::TruncatedFile { .. })
        ));
        let out_of_range = [0, 0, 8, 1, 0, 0, 0, 2, 4, 10];
        assert!(matches!(
            parse_idx_labels(&out_of_range),
            Err(Error::LabelOutOfRange {
                index: 1,
                label: 10
            })
        ));
        let wrong = [0, 0, 8, 3, 0, 0, 0, 0];
        assert!(matches!(
            parse_idx_labels(&wrong),
            Err(Error::WrongMagic { .. })
        ));
    }

    #[test]
    fn gzip_files_are_inflated() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        use std::io::Write;

        let labels = write_idx_labels(&[3, 1, 4, 1, 5]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&labels).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        let bytes = read_maybe_gzip(&path).unwrap();
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![3, 1, 4, 1, 5]);
    }
}

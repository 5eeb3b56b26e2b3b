//! Big-endian IDX files (the MNIST/EMNIST container format).
//!
//! Images: magic `0x00000803`, then `count`, `rows`, `cols` as `u32`, then
//! `count * rows * cols` unsigned pixel bytes. Labels: magic `0x00000801`,
//! then `count`, then `count` label bytes.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded image tensor with pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Truncated {
                what: self.what,
                needed: self.pos.saturating_add(n),
                available: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::BadMagic {
                what: self.what,
                expected,
                found,
            });
        }
        Ok(())
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut r = Reader {
        what: "idx images",
        bytes,
        pos: 0,
    };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .unwrap_or(usize::MAX);
    let pixels = r.take(len)?.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader {
        what: "idx labels",
        bytes,
        pos: 0,
    };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32()? as usize;
    Ok(r.take(count)?.iter().map(|&b| usize::from(b)).collect())
}

/// Parses an image/label pair held in memory into a [`Dataset`] with
/// `distribution_id` 0.
pub fn parse_idx_pair(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let images = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if images.count != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    Dataset::new(images.rows * images.cols, images.pixels, labels, 0)
}

pub fn load_idx_pair(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    parse_idx_pair(&read(images_path.as_ref())?, &read(labels_path.as_ref())?)
}

#[cfg(test)]
pub(crate) fn encode_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for w in [IMAGES_MAGIC, count, rows, cols] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
pub(crate) fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_tiny_images() {
        let images = encode_images(2, 2, 2, &[0, 0, 0, 0, 255, 255, 255, 255]);
        let labels = encode_labels(&[3, 7]);
        let d = parse_idx_pair(&images, &labels).unwrap();
        assert_eq!(d.dim(), 4);
        assert_eq!(d.sample(0), &[0.0; 4]);
        assert_eq!(d.sample(1), &[1.0; 4]);
        assert_eq!(d.labels(), &[3, 7]);
    }

    #[test]
    fn bad_magic() {
        let mut images = encode_images(1, 1, 1, &[9]);
        images[3] = 0x01;
        let err = parse_idx_pair(&images, &encode_labels(&[0])).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found: 0x0000_0801, .. }));

        let labels = encode_images(1, 1, 1, &[9]);
        let err = parse_idx_labels(&labels).unwrap_err();
        assert!(matches!(err, Error::BadMagic { expected: LABELS_MAGIC, .. }));
    }

    #[test]
    fn truncated() {
        let images = encode_images(2, 2, 2, &[1, 2, 3]);
        assert!(matches!(parse_idx_images(&images), Err(Error::Truncated { .. })));
        assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(Error::Truncated { .. })));
        let mut labels = encode_labels(&[1, 2]);
        labels.pop();
        assert!(matches!(parse_idx_labels(&labels), Err(Error::Truncated { .. })));
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let images = encode_images(u32::MAX, u32::MAX, u32::MAX, &[]);
        assert!(matches!(parse_idx_images(&images), Err(Error::Truncated { .. })));
    }

    #[test]
    fn count_mismatch() {
        let images = encode_images(3, 1, 1, &[0, 1, 2]);
        let err = parse_idx_pair(&images, &encode_labels(&[0, 1])).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { images: 3, labels: 2 }));
    }

    #[test]
    fn load_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        std::fs::write(&ip, encode_images(1, 1, 2, &[51, 102])).unwrap();
        std::fs::write(&lp, encode_labels(&[5])).unwrap();
        let d = load_idx_pair(&ip, &lp).unwrap();
        assert_eq!(d.sample(0), &[0.2, 0.4]);
        assert!(matches!(
            load_idx_pair(dir.path().join("missing"), &lp),
            Err(Error::Io { .. })
        ));
    }
}

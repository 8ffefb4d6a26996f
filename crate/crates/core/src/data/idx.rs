//! Raw IDX file parsing and (for round-trip checks) re-serialization.
//!
//! The format is the classic big-endian layout: a u32 magic, u32 dimension sizes,
//! then the payload bytes. Images use magic 0x00000803 with dimensions
//! (count, rows, cols); labels use magic 0x00000801 with dimension (count).
//! Parsing consumes exactly the declared payload; trailing bytes are ignored.

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// The exact content of an IDX image file: header fields plus raw pixel bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub count: u32,
    pub rows: u32,
    pub cols: u32,
    pub pixels: Vec<u8>,
}

/// The exact content of an IDX label file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawLabels {
    pub labels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            field: field.to_string(),
            message: format!("file truncated at byte {offset}, expected a 4-byte value"),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

pub fn parse_images(bytes: &[u8]) -> Result<RawImages> {
    let magic = read_u32(bytes, 0, "images.magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            field: "images.magic".into(),
            message: format!("expected 0x{IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = read_u32(bytes, 4, "images.count")?;
    let rows = read_u32(bytes, 8, "images.rows")?;
    let cols = read_u32(bytes, 12, "images.cols")?;
    let payload = count as usize * rows as usize * cols as usize;
    let body = &bytes[16..];
    if body.len() < payload {
        return Err(Error::Format {
            field: "images.data".into(),
            message: format!("declared {payload} pixel bytes but only {} present", body.len()),
        });
    }
    Ok(RawImages { count, rows, cols, pixels: body[..payload].to_vec() })
}

pub fn parse_labels(bytes: &[u8]) -> Result<RawLabels> {
    let magic = read_u32(bytes, 0, "labels.magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            field: "labels.magic".into(),
            message: format!("expected 0x{LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = read_u32(bytes, 4, "labels.count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format {
            field: "labels.data".into(),
            message: format!("declared {count} labels but only {} present", body.len()),
        });
    }
    Ok(RawLabels { labels: body[..count].to_vec() })
}

/// Re-emits an image file byte-for-byte as [`parse_images`] consumed it.
pub fn write_images(images: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&images.count.to_be_bytes());
    out.extend_from_slice(&images.rows.to_be_bytes());
    out.extend_from_slice(&images.cols.to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

/// Re-emits a label file byte-for-byte as [`parse_labels`] consumed it.
pub fn write_labels(labels: &RawLabels) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.labels.len() as u32).to_be_bytes());
    out.extend_from_slice(&labels.labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A tiny 2x2-pixel corpus: `n` images whose pixels are i, i+1, i+2, i+3.
    fn sample_files(n: u8) -> (Vec<u8>, Vec<u8>) {
        let images = RawImages {
            count: n as u32,
            rows: 2,
            cols: 2,
            pixels: (0..n).flat_map(|i| [i, i + 1, i + 2, i + 3]).collect(),
        };
        let labels = RawLabels { labels: (0..n).map(|i| i % 3).collect() };
        (write_images(&images), write_labels(&labels))
    }

    #[test]
    fn parse_reads_header_and_payload() {
        let (img_bytes, lbl_bytes) = sample_files(5);
        let images = parse_images(&img_bytes).unwrap();
        assert_eq!((images.count, images.rows, images.cols), (5, 2, 2));
        assert_eq!(images.pixels.len(), 20);
        let labels = parse_labels(&lbl_bytes).unwrap();
        assert_eq!(labels.labels, vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn round_trip_reproduces_consumed_bytes_exactly() {
        let (img_bytes, lbl_bytes) = sample_files(4);
        assert_eq!(write_images(&parse_images(&img_bytes).unwrap()), img_bytes);
        assert_eq!(write_labels(&parse_labels(&lbl_bytes).unwrap()), lbl_bytes);

        // Trailing junk is not consumed and therefore not reproduced.
        let mut padded = img_bytes.clone();
        padded.extend_from_slice(b"junk");
        assert_eq!(write_images(&parse_images(&padded).unwrap()), img_bytes);
    }

    #[test]
    fn wrong_magic_is_rejected_with_field_name() {
        let (img_bytes, lbl_bytes) = sample_files(2);
        let err = parse_images(&lbl_bytes).unwrap_err();
        assert!(err.to_string().contains("images.magic"), "{err}");
        let err = parse_labels(&img_bytes).unwrap_err();
        assert!(err.to_string().contains("labels.magic"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let (img_bytes, _) = sample_files(3);
        let err = parse_images(&img_bytes[..img_bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("images.data"), "{err}");
        let err = parse_images(&img_bytes[..10]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}

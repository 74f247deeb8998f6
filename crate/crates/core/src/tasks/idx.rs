//! IDX image/label ingestion (the MNIST distribution format).
//!
//! Big-endian headers; image files carry magic 0x00000803 (2051) and label
//! files 0x00000801 (2049). Pixel bytes are scaled by 1/255 into [0, 1].

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{CoreError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

fn check_magic<R: Read>(r: &mut R, expected: u32, what: &str) -> Result<()> {
    let magic = read_u32_be(r)?;
    if magic != expected {
        return Err(CoreError::format(format!(
            "{what}: magic 0x{magic:08x}, expected 0x{expected:08x}"
        )));
    }
    Ok(())
}

/// Parse an IDX image/label file pair into inputs in [0, 1] and labels.
///
/// Returns `(inputs, input_dim, labels)` with inputs row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Vec<f64>, usize, Vec<usize>)> {
    let mut images = BufReader::new(File::open(images_path)?);
    check_magic(&mut images, IMAGE_MAGIC, "image file")?;
    let count = read_u32_be(&mut images)? as usize;
    let rows = read_u32_be(&mut images)? as usize;
    let cols = read_u32_be(&mut images)? as usize;
    let dim = rows * cols;
    let mut pixel_bytes = vec![0u8; count * dim];
    images.read_exact(&mut pixel_bytes)?;

    let mut labels_file = BufReader::new(File::open(labels_path)?);
    check_magic(&mut labels_file, LABEL_MAGIC, "label file")?;
    let label_count = read_u32_be(&mut labels_file)? as usize;
    if label_count != count {
        return Err(CoreError::format(format!(
            "count mismatch: {count} images vs {label_count} labels"
        )));
    }
    let mut label_bytes = vec![0u8; label_count];
    labels_file.read_exact(&mut label_bytes)?;

    let inputs = pixel_bytes.iter().map(|&b| b as f64 / 255.0).collect();
    let labels = label_bytes.iter().map(|&b| b as usize).collect();
    Ok((inputs, dim, labels))
}

/// Write an IDX image file (used for fixtures and round-trip tests).
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Write an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_image_fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        // 2 images of 2x2: known pixel bytes
        let pixels = [0u8, 51, 102, 255, 10, 20, 30, 40];
        write_idx_images(&img, 2, 2, &pixels).unwrap();
        write_idx_labels(&lab, &[7, 3]).unwrap();
        let (inputs, dim, labels) = load_idx(&img, &lab).unwrap();
        assert_eq!(dim, 4);
        assert_eq!(labels, vec![7, 3]);
        assert!((inputs[1] - 51.0 / 255.0).abs() < 1e-15);
        assert!((inputs[3] - 1.0).abs() < 1e-15);
        assert_eq!(inputs.len(), 8);
    }

    #[test]
    fn label_magic_in_image_slot_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx_labels(&img, &[1, 2]).unwrap(); // wrong magic for image slot
        write_idx_labels(&lab, &[1, 2]).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(CoreError::Format(_))));
    }

    #[test]
    fn count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx_images(&img, 1, 2, &[0, 0, 0, 0]).unwrap(); // 2 images of 1x2
        write_idx_labels(&lab, &[1]).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(CoreError::Format(_))));
    }

    #[test]
    fn truncated_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx_images(&img, 2, 2, &[0; 8]).unwrap();
        // truncate the pixel payload
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
        write_idx_labels(&lab, &[1, 2]).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(CoreError::Io(_))));
    }
}

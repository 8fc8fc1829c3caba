use std::path::Path;

use crate::data::dataset::ImageShape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images (and labels) read from an IDX pair, pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxData {
    pub shape: ImageShape,
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "truncated IDX header"))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<(ImageShape, Tensor)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)?;
    let cols = be_u32(bytes, 12)?;
    if rows > u16::MAX as u32 || cols > u16::MAX as u32 {
        return Err(Error::format(8, "IDX image dimensions too large"));
    }
    let shape = ImageShape::gray(rows as u16, cols as u16);
    let need = count * shape.dim();
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::format(
            (16 + payload.len()) as u64,
            format!(
                "truncated IDX images: header promises {count} images ({need} bytes), found {}",
                payload.len()
            ),
        ));
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((shape, Tensor::matrix(count, shape.dim(), data)?))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::format(
            (8 + payload.len()) as u64,
            format!(
                "truncated IDX labels: header promises {count}, found {}",
                payload.len()
            ),
        ));
    }
    Ok(payload[..count].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<IdxData> {
    let (shape, images) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = match labels {
        Some(p) => {
            let l = parse_idx_labels(&std::fs::read(p)?)?;
            if l.len() != images.rows() {
                return Err(Error::format(
                    4,
                    format!("{} labels for {} images", l.len(), images.rows()),
                ));
            }
            Some(l)
        }
        None => None,
    };
    Ok(IdxData {
        shape,
        images,
        labels,
    })
}

/// Encodes pixels in `[0, 1]` as an IDX image file (rounded to bytes).
pub fn encode_idx_images(shape: ImageShape, images: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend((images.rows() as u32).to_be_bytes());
    out.extend((shape.height as u32).to_be_bytes());
    out.extend((shape.width as u32).to_be_bytes());
    out.extend(
        images
            .data()
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend((n as u32).to_be_bytes());
        b.extend(28u32.to_be_bytes());
        b.extend(28u32.to_be_bytes());
        b.extend((0..n * 784).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn four_image_fixture() {
        let (shape, x) = parse_idx_images(&fixture(4)).unwrap();
        assert_eq!(shape.dim(), 784);
        assert_eq!(x.shape(), &[4, 784]);
        assert_eq!(x.data()[255], 1.0);
        assert!(x
            .data()
            .iter()
            .all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut b = fixture(1);
        b[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&b),
            Err(Error::Format { offset: 0, .. })
        ));
        let b = fixture(2);
        assert!(matches!(
            parse_idx_images(&b[..b.len() - 1]),
            Err(Error::Format { .. })
        ));
        assert!(parse_idx_images(&b[..10]).is_err());
    }

    #[test]
    fn label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        std::fs::write(&ip, fixture(3)).unwrap();
        std::fs::write(&lp, encode_idx_labels(&[1, 2])).unwrap();
        assert!(load_idx(&ip, Some(&lp)).is_err());
        std::fs::write(&lp, encode_idx_labels(&[1, 2, 9])).unwrap();
        assert_eq!(
            load_idx(&ip, Some(&lp)).unwrap().labels.unwrap(),
            vec![1, 2, 9]
        );
    }

    #[test]
    fn encode_round_trip() {
        let (shape, x) = parse_idx_images(&fixture(2)).unwrap();
        assert_eq!(encode_idx_images(shape, &x), fixture(2));
    }
}

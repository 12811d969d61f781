//! IDX files (big-endian, MNIST layout): unsigned-byte images of rank 3 and
//! unsigned-byte labels of rank 1.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let b = bytes
        .get(at..at + 4)
        .ok_or_else(|| fmt_err(path, "truncated header"))?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Returns `(count, rows, cols, pixels scaled by 1/255)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(fmt_err(
            path,
            format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| fmt_err(path, "image dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(fmt_err(
            path,
            format!(
                "truncated: {} pixel bytes, header promises {need}",
                body.len()
            ),
        ));
    }
    if body.len() > need {
        return Err(fmt_err(
            path,
            format!("{} trailing bytes", body.len() - need),
        ));
    }
    Ok((
        n,
        rows,
        cols,
        body.iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(fmt_err(
            path,
            format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(fmt_err(
            path,
            format!("{} label bytes, header promises {n}", body.len()),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Load an image/label IDX pair. The class count is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (n, rows, cols, px) = parse_idx_images(&ib, images)?;
    let ys = parse_idx_labels(&lb, labels)?;
    if ys.len() != n {
        return Err(fmt_err(
            labels,
            format!("{} labels for {n} images", ys.len()),
        ));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Data(format!(
            "{} holds no samples",
            images.display()
        )));
    }
    let classes = ys.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(&[n, 1, rows, cols], px)?, ys, classes)
}

/// Write a single-channel dataset as an IDX pair. Pixels are quantized to
/// `round(v * 255)`; labels must fit in a byte.
pub fn write_idx(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let s = data.images.shape();
    if s[1] != 1 {
        return Err(Error::Data(format!(
            "IDX images need one channel, got {}",
            s[1]
        )));
    }
    if data.labels.iter().any(|&y| y > 255) {
        return Err(Error::Data("IDX labels must be < 256".into()));
    }
    let mut ib = Vec::with_capacity(16 + data.images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(data.images.data().iter().map(|v| (v * 255.0).round() as u8));
    let mut lb = Vec::with_capacity(8 + data.len());
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lb.extend(data.labels.iter().map(|&y| y as u8));
    std::fs::write(images, ib).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, lb).map_err(|e| Error::io(labels, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn magics() {
        assert_eq!(IDX_IMAGES_MAGIC, 0x803);
        assert_eq!(IDX_LABELS_MAGIC, 0x801);
    }

    #[test]
    fn byte_255_is_one() {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 1, 1, 2] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend([255u8, 0]);
        let (_, _, _, px) = parse_idx_images(&b, Path::new("x")).unwrap();
        assert_eq!(px, vec![1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("x");
        assert!(parse_idx_images(&[0, 0, 8, 1, 0, 0, 0, 0], p).is_err());
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 2] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend([1u8; 7]);
        let e = parse_idx_images(&b, p).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
        let mut l = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        l.extend(3u32.to_be_bytes());
        l.extend([0u8, 1]);
        assert!(parse_idx_labels(&l, p).is_err());
    }

    #[test]
    fn round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        let mut rng = SeededRng::new(9);
        let n = 13;
        let px: Vec<f64> = (0..n * 5 * 4)
            .map(|_| rng.below(256) as f64 / 255.0)
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let d = Dataset::new(Tensor::new(&[n, 1, 5, 4], px).unwrap(), labels, 3).unwrap();
        write_idx(&d, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert!(back.images.bit_eq(&d.images));
        assert_eq!(back.labels, d.labels);
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        let d = Dataset::new(Tensor::zeros(&[2, 1, 1, 1]), vec![0, 1], 2).unwrap();
        write_idx(&d, &ip, &lp).unwrap();
        let mut l = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        l.extend(1u32.to_be_bytes());
        l.push(0);
        std::fs::write(&lp, l).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
    }
}

//! Plain-text (P2) PGM contact sheets.

use std::fmt::Write as _;
use std::path::Path;

use crate::datasets::{write_atomic, ImageSet};
use crate::error::{Error, Result};

/// Tiles images into a grid with `cols` columns separated by `pad` black
/// pixels. Images must carry a `(rows, cols)` shape or be square.
pub fn contact_sheet(images: &ImageSet, cols: usize, pad: usize) -> Result<String> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (h, w) = match images.shape() {
        Some(s) => s,
        None => {
            let side = (images.dim() as f64).sqrt().round() as usize;
            if side * side != images.dim() {
                return Err(Error::InvalidConfig(format!(
                    "cannot lay out {}-dimensional samples as an image",
                    images.dim()
                )));
            }
            (side, side)
        }
    };
    let cols = cols.clamp(1, images.count());
    let rows = images.count().div_ceil(cols);
    let width = cols * w + (cols + 1) * pad;
    let height = rows * h + (rows + 1) * pad;
    let mut px = vec![0u8; width * height];
    for (n, img) in images.rows().enumerate() {
        let (r, c) = (n / cols, n % cols);
        let y0 = pad + r * (h + pad);
        let x0 = pad + c * (w + pad);
        for y in 0..h {
            for x in 0..w {
                px[(y0 + y) * width + x0 + x] = (img[y * w + x] * 255.0).round() as u8;
            }
        }
    }
    let mut out = format!("P2\n{width} {height}\n255\n");
    for line in px.chunks(width) {
        let mut first = true;
        for v in line {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_contact_sheet(path: impl AsRef<Path>, images: &ImageSet, cols: usize) -> Result<()> {
    write_atomic(path.as_ref(), contact_sheet(images, cols, 1)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_images() {
        let imgs = ImageSet::new(vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5], 4).unwrap();
        let s = contact_sheet(&imgs, 2, 1).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("7 4"));
        assert_eq!(lines.next(), Some("255"));
        assert_eq!(lines.next(), Some("0 0 0 0 0 0 0"));
        assert_eq!(lines.next(), Some("0 255 0 0 128 128 0"));
        assert_eq!(lines.next(), Some("0 0 255 0 128 128 0"));
    }

    #[test]
    fn non_square_dim_needs_shape() {
        let imgs = ImageSet::new(vec![0.0; 3], 3).unwrap();
        assert!(contact_sheet(&imgs, 1, 0).is_err());
    }
}

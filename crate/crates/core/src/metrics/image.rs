use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "images have {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::contract("empty image"));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// The images matched exactly and `db` is the cap.
    pub exact: bool,
}

/// `10 log10(1 / mse)` for unit-range pixels.
pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse <= 0.0 {
        Psnr {
            db: PSNR_CAP_DB,
            exact: true,
        }
    } else {
        Psnr {
            db: (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB),
            exact: false,
        }
    }
}

pub fn psnr(a: &[f64], b: &[f64]) -> Result<Psnr> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Mean SSIM over 8x8 windows at stride 4, per channel. Images smaller
/// than a window are treated as a single window.
pub fn ssim(a: &[f64], b: &[f64], shape: ImageShape) -> Result<f64> {
    same_len(a, b)?;
    if a.len() != shape.dim() {
        return Err(Error::dim(format!(
            "{} pixels for a {:?} image",
            a.len(),
            shape
        )));
    }
    let (h, w, c) = (
        shape.height as usize,
        shape.width as usize,
        shape.channels as usize,
    );
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let starts =
        |n: usize, win: usize| -> Vec<usize> { (0..=n - win).step_by(SSIM_STRIDE).collect() };
    let (rows, cols) = (starts(h, wh), starts(w, ww));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for &r0 in &rows {
            for &c0 in &cols {
                let (mut sa, mut sb) = (0.0, 0.0);
                for r in r0..r0 + wh {
                    for k in c0..c0 + ww {
                        let i = (r * w + k) * c + ch;
                        sa += a[i];
                        sb += b[i];
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for r in r0..r0 + wh {
                    for k in c0..c0 + ww {
                        let i = (r * w + k) * c + ch;
                        let (da, db) = (a[i] - ma, b[i] - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

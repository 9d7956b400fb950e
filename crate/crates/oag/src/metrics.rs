//! Image quality metrics and the box-blur baseline defense.

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// PSNR value reported for identical images (MSE = 0).
pub const PSNR_CAP_DB: f64 = 99.0;

/// 10·log10(peak² / MSE), capped at [`PSNR_CAP_DB`] for identical inputs.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Per-pixel |A - B|, channel-max reduced, normalized to [0,1] by its maximum.
/// Stored as a single-channel image; all zeros when A == B exactly.
pub fn residual_map(a: &ImageTensor, b: &ImageTensor) -> Result<ImageTensor> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "residual shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (c, h, w) = a.shape();
    let mut out = ImageTensor::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let mut m = 0.0f64;
            for ch in 0..c {
                m = m.max((a.get(ch, y, x) - b.get(ch, y, x)).abs());
            }
            out.set(0, y, x, m);
        }
    }
    let max = out.data().iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in out.data_mut().iter_mut() {
            *v /= max;
        }
    }
    Ok(out)
}

/// Pearson correlation between two equally-shaped maps.
pub fn correlation(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::config("correlation shape mismatch"));
    }
    let n = a.len() as f64;
    let ma: f64 = a.data().iter().sum::<f64>() / n;
    let mb: f64 = b.data().iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Box-blur defense baseline: per-pixel window mean with edge replication.
pub fn mean_filter_defense(image: &ImageTensor, window: usize) -> Result<ImageTensor> {
    if window % 2 == 0 || window < 3 {
        return Err(Error::config(format!(
            "mean filter window must be an odd integer >= 3, got {window}"
        )));
    }
    let (c, h, w) = image.shape();
    let r = (window / 2) as isize;
    let mut out = ImageTensor::zeros(c, h, w);
    let area = (window * window) as f64;
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut sum = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        sum += image.get(ch, yy, xx);
                    }
                }
                out.set(ch, y as usize, x as usize, sum / area);
            }
        }
    }
    Ok(out)
}

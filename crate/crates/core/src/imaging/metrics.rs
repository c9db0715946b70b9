use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Returned for identical images so that PSNR rankings are total.
pub const PSNR_CAP: f64 = 100.0;

/// Which signal PSNR is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsnrChannels {
    /// Every channel jointly, on the `[0, 1]` scale.
    #[default]
    All,
    /// BT.601 luma of RGB inputs; grayscale images are used as-is.
    Luma,
}

fn luma(img: &Image) -> Vec<f64> {
    if img.channels() == 1 {
        return img.data().iter().map(|&v| v as f64).collect();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len())
        .map(|i| (16.0 + 65.481 * r[i] as f64 + 128.553 * g[i] as f64 + 24.966 * b[i] as f64) / 255.0)
        .collect()
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::shape(
            "psnr",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.height(),
                a.width(),
                a.channels(),
                b.height(),
                b.width(),
                b.channels()
            ),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

fn from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(from_mse(mse(a, b)?))
}

pub fn psnr_with(a: &Image, b: &Image, channels: PsnrChannels) -> Result<f64> {
    match channels {
        PsnrChannels::All => psnr(a, b),
        PsnrChannels::Luma => {
            check_dims(a, b)?;
            let (ya, yb) = (luma(a), luma(b));
            let sum: f64 = ya.iter().zip(&yb).map(|(x, y)| (x - y).powi(2)).sum();
            Ok(from_mse(sum / ya.len() as f64))
        }
    }
}

//! PSNR and SSIM on [0,1] images. All arithmetic runs in f64 regardless of
//! the tensor element type.

use serde::ser::Serializer;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 10·log10(1/MSE) over all pixels/channels; +∞ for identical images.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "psnr: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = Scalar::to_f64(*x) - Scalar::to_f64(*y);
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn ssim_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let (y, x) = ((i / SSIM_WINDOW) as f64 - c, (i % SSIM_WINDOW) as f64 - c);
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Channel-mean luma of a (3,H,W) image.
fn luma<T: Scalar>(img: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("ssim: expected (3,H,W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let y = (0..h * w)
        .map(|i| {
            (Scalar::to_f64(d[i]) + Scalar::to_f64(d[h * w + i]) + Scalar::to_f64(d[2 * h * w + i]))
                / 3.0
        })
        .collect();
    Ok((y, h, w))
}

/// Mean local SSIM over valid 11×11 Gaussian windows (σ=1.5, K1=0.01,
/// K2=0.03, L=1) of the channel-mean luma.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "ssim: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ya, h, w) = luma(a)?;
    let (yb, _, _) = luma(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "ssim: image {h}x{w} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = ssim_window();
    let c1 = K1 * K1; // L = 1
    let c2 = K2 * K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb) = (0.0, 0.0);
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let g = win[wy * SSIM_WINDOW + wx];
                    let pa = ya[(oy + wy) * w + ox + wx];
                    let pb = yb[(oy + wy) * w + ox + wx];
                    ma += g * pa;
                    mb += g * pb;
                    saa += g * pa * pa;
                    sbb += g * pb * pb;
                    sab += g * pa * pb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

/// Arithmetic means over images (not pixels globally), emitted as JSON.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(serialize_with = "serialize_db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub count: usize,
}

impl MetricReport {
    /// Average per-image (psnr, ssim) pairs.
    pub fn from_pairs(name: Option<String>, pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("metric report over zero images".into()));
        }
        let n = pairs.len() as f64;
        Ok(MetricReport {
            name,
            psnr_db: pairs.iter().map(|p| p.0).sum::<f64>() / n,
            ssim: pairs.iter().map(|p| p.1).sum::<f64>() / n,
            count: pairs.len(),
        })
    }
}

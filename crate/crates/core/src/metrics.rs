//! Full-reference quality metrics. PSNR, MAE and MSE are reported on the 8-bit scale.

use crate::error::{Error, Result};
use crate::image::Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    /// dB; `f64::INFINITY` for identical images.
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub mse: f64,
}

impl MetricReport {
    /// Tab-separated `psnr ssim mae mse`, infinite PSNR rendered as `inf`.
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.4}\t{:.4}\t{:.4}",
            format_psnr(self.psnr),
            self.ssim,
            self.mae,
            self.mse
        )
    }

    /// Component-wise mean over a set. Infinite PSNRs propagate.
    pub fn average(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            mae: avg(|r| r.mae),
            mse: avg(|r| r.mse),
        })
    }
}

pub fn format_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".to_string()
    } else {
        format!("{p:.4}")
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean squared error on the 8-bit scale.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = 255.0 * (x as f64 - y as f64);
            d * d
        })
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Mean absolute error on the 8-bit scale.
pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| 255.0 * (x as f64 - y as f64).abs())
        .sum();
    Ok(s / a.data().len() as f64)
}

pub fn psnr_from_mse(mse8: f64) -> f64 {
    if mse8 == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse8).log10()
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * p[y * w + x + i];
            }
            rows[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Single-scale SSIM: 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1,
/// evaluated per channel over the valid region and averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..a.channels() {
        let x: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let vx = sxx[i] - mu_x * mu_x;
            let vy = syy[i] - mu_y * mu_y;
            let cov = sxy[i] - mu_x * mu_y;
            acc += ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

pub fn evaluate(reference: &Image, test: &Image) -> Result<MetricReport> {
    let mse8 = mse(reference, test)?;
    Ok(MetricReport {
        psnr: psnr_from_mse(mse8),
        ssim: ssim(reference, test)?,
        mae: mae(reference, test)?,
        mse: mse8,
    })
}

//! Reference-based image quality metrics: PSNR over all channels and SSIM
//! over the BT.601 luma with the standard 11x11 Gaussian window. Both are
//! pure functions of the two images, with the zero-error PSNR case capped
//! so corpus means stay finite.

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR cap used when the images are bit-identical (MSE = 0).
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        return Err(Error::shape(
            "metric inputs",
            format!("{}x{}x{}", a.channels(), a.height(), a.width()),
            format!("{}x{}x{}", b.channels(), b.height(), b.width()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels jointly.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window_1d() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        total += *v;
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Separable valid-mode Gaussian filter: rows then columns.
fn gauss_filter_valid(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = gaussian_window_1d();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                acc += gk * src[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                acc += gk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity over the luma plane, Gaussian-weighted 11x11
/// windows, valid positions only.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let la: Vec<f64> = a.luma_bt601()?.iter().map(|&v| v as f64).collect();
    let lb: Vec<f64> = b.luma_bt601()?.iter().map(|&v| v as f64).collect();
    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
    let prod: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();

    let mu_a = gauss_filter_valid(&la, h, w);
    let mu_b = gauss_filter_valid(&lb, h, w);
    let m_aa = gauss_filter_valid(&sq(&la), h, w);
    let m_bb = gauss_filter_valid(&sq(&lb), h, w);
    let m_ab = gauss_filter_valid(&prod, h, w);

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Per-image and corpus-mean metrics over named pairs.
#[derive(Clone, Debug)]
pub struct MetricReport {
    /// (name, psnr dB, ssim)
    pub per_image: Vec<(String, f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

pub fn evaluate_pairs(pairs: &[(String, Image, Image)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Input("no image pairs to evaluate".into()));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    for (name, a, b) in pairs {
        per_image.push((name.clone(), psnr(a, b, 1.0)?, ssim(a, b)?));
    }
    let n = per_image.len() as f64;
    let mean_psnr = per_image.iter().map(|(_, p, _)| p).sum::<f64>() / n;
    let mean_ssim = per_image.iter().map(|(_, _, s)| s).sum::<f64>() / n;
    Ok(MetricReport { per_image, mean_psnr, mean_ssim })
}

impl MetricReport {
    /// Line-oriented report; the header records the metric conventions the
    /// numbers depend on.
    pub fn render(&self) -> String {
        let mut s = String::from(
            "# psnr: all channels, peak 1.0, cap 99 dB; ssim: luma(601), 11x11 gaussian sigma 1.5\n",
        );
        for (name, p, ss) in &self.per_image {
            s.push_str(&format!("{name}\tpsnr={p:.4}\tssim={ss:.6}\n"));
        }
        s.push_str(&format!(
            "mean\tpsnr={:.4}\tssim={:.6}\tn={}\n",
            self.mean_psnr,
            self.mean_ssim,
            self.per_image.len()
        ));
        s
    }
}

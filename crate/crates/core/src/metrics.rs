//! Image similarity metrics and test-set evaluation.

use serde::Serialize;

use crate::domain::DomainLabel;
use crate::error::{Error, Result};
use crate::inference::{impute, StyleSource};
use crate::networks::Model;
use crate::phantom::PhantomSample;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
pub const METRICS_HEADER: &str = "cohort,modality,ssim_mean,ssim_std,psnr_mean,psnr_std";

fn same_len(a: &[f32], b: &[f32], op: &str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Usage(format!("{op}: images have {} and {} pixels", a.len(), b.len())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f32], b: &[f32], data_range: f64) -> Result<f64> {
    same_len(a, b, "psnr")?;
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over all 7×7 windows (stride 1, no padding) of two
/// `height × width` images with dynamic range 1.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    same_len(a, b, "ssim")?;
    if a.len() != width * height {
        return Err(Error::Usage(format!("ssim: {} pixels for {width}x{height}", a.len())));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Usage(format!("ssim: {width}x{height} image is smaller than the window")));
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for i in 0..=height - SSIM_WINDOW {
        for j in 0..=width - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..SSIM_WINDOW {
                let row = (i + di) * width + j;
                for k in row..row + SSIM_WINDOW {
                    let (x, y) = (a[k] as f64, b[k] as f64);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Mean absolute pixel difference.
pub fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Mean pairwise mean-absolute pixel distance over all unordered pairs.
pub fn diversity_score(images: &[&[f32]]) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Usage("diversity needs at least two images".into()));
    }
    if images.iter().any(|i| i.len() != images[0].len()) {
        return Err(Error::Usage("diversity: images differ in size".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            total += mean_abs_diff(images[i], images[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub cohort: String,
    pub modality: DomainLabel,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.5},{:.5},{:.5},{:.5}",
            self.cohort, self.modality, self.ssim_mean, self.ssim_std, self.psnr_mean, self.psnr_std
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Style used when imputing during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalStyle {
    /// Style of the held-out true target image.
    Reference,
    /// Mapping-network style from a per-sample seed.
    Latent,
}

/// Imputes every modality of every sample from the other three and
/// aggregates SSIM and PSNR per target modality.
pub fn evaluate(model: &Model<f32>, test: &[PhantomSample], cohort: &str, style: EvalStyle) -> Result<Vec<MetricsRow>> {
    if test.is_empty() {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let size = model.arch().size;
    DomainLabel::ALL
        .iter()
        .map(|&t| {
            let mut ssims = Vec::with_capacity(test.len());
            let mut psnrs = Vec::with_capacity(test.len());
            for (k, sample) in test.iter().enumerate() {
                let truth = sample.image(t);
                let inputs: Vec<_> = DomainLabel::inputs_for(t).iter().map(|&d| sample.image(d).clone()).collect();
                let source = match style {
                    EvalStyle::Reference => StyleSource::Reference(truth),
                    EvalStyle::Latent => StyleSource::Latent(k as u64),
                };
                let fake = impute(model, &inputs, t, &source)?;
                ssims.push(ssim(fake.pixels(), truth.pixels(), size, size)?);
                psnrs.push(psnr(fake.pixels(), truth.pixels(), 1.0)?);
            }
            let (ssim_mean, ssim_std) = mean_std(&ssims);
            let (psnr_mean, psnr_std) = mean_std(&psnrs);
            Ok(MetricsRow {
                cohort: cohort.to_string(),
                modality: t,
                ssim_mean,
                ssim_std,
                psnr_mean,
                psnr_std,
            })
        })
        .collect()
}

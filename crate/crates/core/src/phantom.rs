//! Procedural multi-contrast head phantoms.
//!
//! A [`TissueMap`] holds the subject-specific anatomy (three relaxation-like
//! parameters per pixel plus lesion and fluid memberships). Each contrast is
//! a fixed transfer function of those parameters, and a per-image
//! [`StyleParams`] perturbs it with gain, gamma, a smooth bias field and noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::DomainLabel;
use crate::error::{Error, Result};
use crate::image::ModalityImage;

pub const MIN_SIZE: usize = 16;

/// Per-pixel anatomy shared by all contrasts of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueMap {
    pub seed: u64,
    pub size: usize,
    /// Proton density; zero outside the head.
    pub pd: Vec<f32>,
    pub t1p: Vec<f32>,
    pub t2p: Vec<f32>,
    /// Soft membership of enhancing lesion blobs.
    pub lesion: Vec<f32>,
    /// Soft membership of free fluid (suppressed in FLAIR).
    pub fluid: Vec<f32>,
}

/// Acquisition style of a single rendered image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub domain: DomainLabel,
    /// Contrast exponent in `[0.6, 1.6]`.
    pub gamma_exp: f64,
    /// Intensity gain in `[0.8, 1.2]`.
    pub gain: f64,
    /// Multiplicative bias-field amplitude in `[0, 0.15]`.
    pub bias_amp: f64,
    /// Additive Gaussian noise level in `[0, 0.02]`.
    pub noise_sigma: f64,
    /// Drives the bias-field orientation and the noise realization.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRanges {
    pub gamma_exp: (f64, f64),
    pub gain: (f64, f64),
    pub bias_amp: (f64, f64),
    pub noise_sigma: (f64, f64),
}

impl Default for StyleRanges {
    fn default() -> Self {
        Self {
            gamma_exp: (0.6, 1.6),
            gain: (0.8, 1.2),
            bias_amp: (0.0, 0.15),
            noise_sigma: (0.0, 0.02),
        }
    }
}

impl StyleParams {
    /// Style that leaves the base contrast untouched.
    pub fn identity(domain: DomainLabel) -> Self {
        Self {
            domain,
            gamma_exp: 1.0,
            gain: 1.0,
            bias_amp: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// One subject: its anatomy and the four contrasts rendered from it.
///
/// Samples ingested from disk have images only.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub seed: Option<u64>,
    pub tissue: Option<TissueMap>,
    pub images: [ModalityImage; 4],
    pub styles: Option<[StyleParams; 4]>,
}

impl PhantomSample {
    pub fn image(&self, d: DomainLabel) -> &ModalityImage {
        &self.images[d.index()]
    }

    pub fn size(&self) -> usize {
        self.images[0].size()
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Membership in `[0, 1]` with a smooth edge about `edge` wide
    /// (normalized units); exactly zero well outside.
    fn membership(&self, x: f64, y: f64, edge: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let r = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        let dist = (1.0 - r) * self.a.min(self.b);
        smoothstep((dist / edge + 0.5).clamp(0.0, 1.0))
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn ellipse(rng: &mut ChaCha8Rng, center_jitter: f64, cx: f64, cy: f64, a: f64, b: f64) -> Ellipse {
    let theta: f64 = rng.random_range(-0.4..0.4);
    Ellipse {
        cx: cx + rng.random_range(-center_jitter..=center_jitter),
        cy: cy + rng.random_range(-center_jitter..=center_jitter),
        a,
        b,
        cos: theta.cos(),
        sin: theta.sin(),
    }
}

/// Deterministic layered-ellipse anatomy for `(seed, size)`.
pub fn gen_tissue_map(seed: u64, size: usize) -> Result<TissueMap> {
    if size < MIN_SIZE {
        return Err(Error::Config(format!("phantom size must be at least {MIN_SIZE}, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let mut pd = vec![0.0f64; n];
    let mut t1p = vec![0.0f64; n];
    let mut t2p = vec![0.0f64; n];
    let mut lesion = vec![0.0f64; n];
    let mut fluid = vec![0.0f64; n];
    let edge = 1.5 * 2.0 / size as f64;

    let head_a = rng.random_range(0.70..0.80);
    let head_b = rng.random_range(0.78..0.86);
    let head = ellipse(&mut rng, 0.04, 0.0, 0.0, head_a, head_b);

    // (ellipse, pd, t1p, t2p, fluid?) painted in order, later layers on top.
    let mut layers: Vec<(Ellipse, [f64; 3], bool)> = Vec::new();
    layers.push((
        Ellipse { ..head },
        [rng.random_range(0.40..0.55), rng.random_range(0.15..0.30), rng.random_range(0.25..0.40)],
        false,
    ));
    let nested = rng.random_range(2..=4usize);
    for k in 0..nested {
        let scale = 0.88 - 0.42 * k as f64 / nested as f64 + rng.random_range(-0.03..0.03);
        let params = if k == 0 {
            // cortex-like band
            [rng.random_range(0.70..0.85), rng.random_range(0.55..0.70), rng.random_range(0.45..0.60)]
        } else {
            [rng.random_range(0.55..0.80), rng.random_range(0.20..0.50), rng.random_range(0.20..0.45)]
        };
        layers.push((
            ellipse(&mut rng, 0.03, head.cx, head.cy, head_a * scale, head_b * scale),
            params,
            false,
        ));
    }
    let ventricles = rng.random_range(1..=2usize);
    for k in 0..ventricles {
        let side = if ventricles == 2 { [-1.0, 1.0][k] * 0.12 } else { 0.0 };
        let (a, b) = (rng.random_range(0.06..0.11), rng.random_range(0.12..0.20));
        layers.push((
            ellipse(&mut rng, 0.03, head.cx + side, head.cy - 0.05, a, b),
            [0.95, 0.95, 0.95],
            true,
        ));
    }

    let coord = |i: usize| (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
    for (e, [p, a, b], is_fluid) in &layers {
        for i in 0..size {
            for j in 0..size {
                let m = e.membership(coord(j), coord(i), edge);
                if m == 0.0 {
                    continue;
                }
                let k = i * size + j;
                pd[k] = pd[k] * (1.0 - m) + p * m;
                t1p[k] = t1p[k] * (1.0 - m) + a * m;
                t2p[k] = t2p[k] * (1.0 - m) + b * m;
                fluid[k] = if *is_fluid { fluid[k] * (1.0 - m) + m } else { fluid[k] * (1.0 - m) };
            }
        }
    }

    let blobs = rng.random_range(0..=2usize);
    for _ in 0..blobs {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(0.15..0.45);
        let cx = head.cx + dist * head_a * angle.cos();
        let cy = head.cy + dist * head_b * angle.sin();
        let radius: f64 = rng.random_range(0.07..0.12);
        for i in 0..size {
            for j in 0..size {
                let d2 = (coord(j) - cx).powi(2) + (coord(i) - cy).powi(2);
                let m = (-d2 / (2.0 * (radius / 2.0).powi(2))).exp();
                if m < 1e-3 {
                    continue;
                }
                let k = i * size + j;
                pd[k] = pd[k] * (1.0 - m) + 0.85 * m;
                t1p[k] = t1p[k] * (1.0 - m) + 0.70 * m;
                t2p[k] = t2p[k] * (1.0 - m) + 0.85 * m;
                lesion[k] = lesion[k].max(m);
                fluid[k] *= 1.0 - m;
            }
        }
    }

    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, 1.0) as f32).collect();
    Ok(TissueMap {
        seed,
        size,
        pd: to_f32(pd),
        t1p: to_f32(t1p),
        t2p: to_f32(t2p),
        lesion: to_f32(lesion),
        fluid: to_f32(fluid),
    })
}

/// Style-free contrast of `domain` at pixel `k`.
pub fn base_contrast(t: &TissueMap, domain: DomainLabel, k: usize) -> f64 {
    let pd = t.pd[k] as f64;
    let t1 = pd * (1.0 - 0.8 * t.t1p[k] as f64);
    let t2 = pd * (0.2 + 0.8 * t.t2p[k] as f64);
    let v = match domain {
        DomainLabel::T1 => t1,
        DomainLabel::T1c => t1 + 0.5 * t.lesion[k] as f64,
        DomainLabel::T2 => t2,
        DomainLabel::Flair => t2 * (1.0 - 0.9 * t.fluid[k] as f64),
    };
    v.clamp(0.0, 1.0)
}

/// Renders one contrast of `t` under style `s`.
pub fn render_modality(t: &TissueMap, s: &StyleParams) -> ModalityImage {
    let size = t.size;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (fx, fy) = (angle.cos(), angle.sin());
    let coord = |i: usize| (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
    let mut pixels = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let k = i * size + j;
            let mut v = base_contrast(t, s.domain, k);
            if s.gamma_exp != 1.0 {
                v = v.powf(s.gamma_exp);
            }
            v *= s.gain;
            if s.bias_amp != 0.0 {
                let field = (std::f64::consts::FRAC_PI_2 * (fx * coord(j) + fy * coord(i)) + phase).sin();
                v *= 1.0 + s.bias_amp * field;
            }
            if s.noise_sigma != 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                v += s.noise_sigma * z;
            }
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    ModalityImage::new(s.domain, size, pixels).expect("rendered pixels are clamped")
}

/// Uniform draw of a style within `ranges`.
pub fn sample_style_params<R: Rng + ?Sized>(domain: DomainLabel, ranges: &StyleRanges, rng: &mut R) -> StyleParams {
    let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let gamma_exp = draw(ranges.gamma_exp);
    let gain = draw(ranges.gain);
    let bias_amp = draw(ranges.bias_amp);
    let noise_sigma = draw(ranges.noise_sigma);
    StyleParams {
        domain,
        gamma_exp,
        gain,
        bias_amp,
        noise_sigma,
        seed: rng.next_u64(),
    }
}

/// Generates subject `seed` with all four contrasts.
pub fn make_sample(seed: u64, size: usize, ranges: &StyleRanges) -> Result<PhantomSample> {
    let tissue = gen_tissue_map(seed, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F57_E1E5);
    let styles = DomainLabel::ALL.map(|d| sample_style_params(d, ranges, &mut rng));
    let images = styles.map(|s| render_modality(&tissue, &s));
    Ok(PhantomSample {
        seed: Some(seed),
        tissue: Some(tissue),
        images,
        styles: Some(styles),
    })
}

/// Bijective 64-bit mixer; distinct inputs give distinct outputs.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train/validation/test split sizes for `n` samples in the ratio 3:1:1,
/// with any remainder going to training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let fifth = n / 5;
    (n - 2 * fifth, fifth, fifth)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<PhantomSample>,
    pub val: Vec<PhantomSample>,
    pub test: Vec<PhantomSample>,
}

/// `n` phantom subjects split 3:1:1. Subject `i` uses seed
/// `splitmix64(seed + i * golden)`, so all subject seeds are distinct.
pub fn make_dataset(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    make_dataset_with(n, size, seed, &StyleRanges::default())
}

pub fn make_dataset_with(n: usize, size: usize, seed: u64, ranges: &StyleRanges) -> Result<Dataset> {
    if n < 5 {
        return Err(Error::Config(format!("n must be ≥ 5 to fill a 3:1:1 split, got {n}")));
    }
    let (train_n, val_n, _) = split_sizes(n);
    let mut all = (0..n as u64)
        .map(|i| make_sample(splitmix64(seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15))), size, ranges))
        .collect::<Result<Vec<_>>>()?;
    let test = all.split_off(train_n + val_n);
    let val = all.split_off(train_n);
    Ok(Dataset { train: all, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rounding() {
        assert_eq!(split_sizes(100), (60, 20, 20));
        assert_eq!(split_sizes(5), (3, 1, 1));
        assert_eq!(split_sizes(7), (5, 1, 1));
    }

    #[test]
    fn tiny_maps_are_rejected() {
        assert!(matches!(gen_tissue_map(1, 15), Err(Error::Config(_))));
    }

    #[test]
    fn splitmix_is_injective_on_a_sample() {
        let mut seen: Vec<u64> = (0..1000).map(splitmix64).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 1000);
    }
}

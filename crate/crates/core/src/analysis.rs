//! Style-space analysis: per-domain statistics, interpolation, 2-D
//! embedding and disentanglement measures.

use std::fmt::Write as _;

use impute_tensor::Graph;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::domain::DomainLabel;
use crate::error::{Error, Result};
use crate::image::ModalityImage;
use crate::metrics::mean_abs_diff;
use crate::networks::Model;
use crate::phantom::PhantomSample;

pub const EMBEDDING_HEADER: &str = "domain,pc1,pc2";
const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 10_000;

/// Style statistics of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain: DomainLabel,
    pub mean: Vec<f64>,
    /// Per-dimension population standard deviation.
    pub std: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleTable {
    pub style_dim: usize,
    pub domains: Vec<DomainStyle>,
}

impl StyleTable {
    pub fn get(&self, d: DomainLabel) -> Option<&DomainStyle> {
        self.domains.iter().find(|s| s.domain == d)
    }

    /// Accumulates codes labelled by domain; domains without codes are omitted.
    pub fn from_codes(style_dim: usize, codes: &[(DomainLabel, Vec<f64>)]) -> Result<Self> {
        if let Some((_, c)) = codes.iter().find(|(_, c)| c.len() != style_dim) {
            return Err(Error::Usage(format!("style code of length {}, expected {style_dim}", c.len())));
        }
        let domains = DomainLabel::ALL
            .iter()
            .filter_map(|&d| {
                let members: Vec<&Vec<f64>> = codes.iter().filter(|(l, _)| *l == d).map(|(_, c)| c).collect();
                if members.is_empty() {
                    return None;
                }
                let n = members.len() as f64;
                let mean: Vec<f64> = (0..style_dim).map(|k| members.iter().map(|c| c[k]).sum::<f64>() / n).collect();
                let std = (0..style_dim)
                    .map(|k| (members.iter().map(|c| (c[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt())
                    .collect();
                Some(DomainStyle {
                    domain: d,
                    mean,
                    std,
                    count: members.len(),
                })
            })
            .collect();
        Ok(Self { style_dim, domains })
    }
}

/// Style code of every image under its own domain, sample-major.
pub fn encode_styles(model: &Model<f32>, samples: &[PhantomSample]) -> Result<Vec<(DomainLabel, Vec<f64>)>> {
    let mut out = Vec::with_capacity(samples.len() * DomainLabel::COUNT);
    for sample in samples {
        for img in &sample.images {
            let mut g = Graph::no_grad();
            let x = g.constant(img.to_tensor())?;
            let s = model.style_encode(&mut g, x, img.domain)?;
            out.push((img.domain, g.value(s).to_f64_vec()));
        }
    }
    Ok(out)
}

pub fn style_table(model: &Model<f32>, samples: &[PhantomSample]) -> Result<StyleTable> {
    StyleTable::from_codes(model.arch().style_dim, &encode_styles(model, samples)?)
}

/// `(alpha, (1 - alpha) a + alpha b)` for `alpha = 0, step, 2 step, ..., 1`.
pub fn interpolate_styles(a: &[f64], b: &[f64], step: f64) -> Result<Vec<(f64, Vec<f64>)>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Usage(format!("interpolation step {step} must be in (0, 1]")));
    }
    if a.len() != b.len() {
        return Err(Error::Usage("interpolation endpoints differ in length".into()));
    }
    let mut alphas = Vec::new();
    let mut k = 0u32;
    loop {
        let alpha = k as f64 * step;
        if alpha >= 1.0 - 1e-9 {
            break;
        }
        alphas.push(alpha);
        k += 1;
    }
    alphas.push(1.0);
    Ok(alphas
        .into_iter()
        .map(|alpha| {
            let code = a.iter().zip(b).map(|(&x, &y)| (1.0 - alpha) * x + alpha * y).collect();
            (alpha, code)
        })
        .collect())
}

/// Whether each image is no farther from the last one than its predecessor,
/// up to `slack_fraction` of the total path length. Returns the verdict and
/// the largest violation relative to the path length.
pub fn monotone_approach(images: &[ModalityImage], slack_fraction: f64) -> (bool, f64) {
    let Some(last) = images.last() else {
        return (true, 0.0);
    };
    let path: f64 = images
        .windows(2)
        .map(|w| mean_abs_diff(w[0].pixels(), w[1].pixels()))
        .sum();
    let dist: Vec<f64> = images.iter().map(|i| mean_abs_diff(i.pixels(), last.pixels())).collect();
    let worst = dist.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    if path == 0.0 {
        return (true, 0.0);
    }
    (worst <= slack_fraction * path, worst / path)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Leading eigenvector of `cov` orthogonal to `exclude`, by power iteration.
fn power_iteration(cov: &[Vec<f64>], start: &[f64], exclude: Option<&[f64]>) -> Vec<f64> {
    let project = |v: &mut Vec<f64>| {
        if let Some(e) = exclude {
            let p = dot(v, e);
            v.iter_mut().zip(e).for_each(|(x, y)| *x -= p * y);
        }
    };
    let mut v = start.to_vec();
    project(&mut v);
    if normalize(&mut v) == 0.0 {
        // Start was parallel to `exclude`; any orthogonal direction works.
        v = vec![0.0; start.len()];
        let k = exclude.map_or(0, |e| {
            (0..e.len())
                .min_by(|&i, &j| e[i].abs().total_cmp(&e[j].abs()))
                .unwrap_or(0)
        });
        v[k] = 1.0;
        project(&mut v);
        normalize(&mut v);
    }
    for _ in 0..PCA_MAX_ITERS {
        let mut next: Vec<f64> = cov.iter().map(|row| dot(row, &v)).collect();
        project(&mut next);
        if normalize(&mut next) == 0.0 {
            return v;
        }
        // A second projection removes what cancellation left behind.
        project(&mut next);
        normalize(&mut next);
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < PCA_TOL {
            break;
        }
    }
    v
}

/// Projects mean-centered codes onto their first two principal axes.
/// Axis signs are fixed so the largest-magnitude loading is positive.
pub fn export_embedding(codes: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if codes.len() < 3 {
        return Err(Error::Usage("embedding needs at least three codes".into()));
    }
    let dim = codes[0].len();
    if dim == 0 || codes.iter().any(|c| c.len() != dim) {
        return Err(Error::Usage("embedding codes must share a positive length".into()));
    }
    let n = codes.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|k| codes.iter().map(|c| c[k]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = codes
        .iter()
        .map(|c| c.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for c in &centered {
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] += c[i] * c[j] / n;
            }
        }
    }
    if cov.iter().flatten().all(|&v| v == 0.0) {
        warn!("all style codes are identical; embedding collapses to the origin");
        return Ok(vec![[0.0, 0.0]; codes.len()]);
    }
    let start = centered
        .iter()
        .max_by(|a, b| dot(a, a).total_cmp(&dot(b, b)))
        .expect("at least three codes")
        .clone();
    let fix_sign = |mut v: Vec<f64>| {
        let k = (0..v.len()).max_by(|&i, &j| v[i].abs().total_cmp(&v[j].abs())).unwrap_or(0);
        if v[k] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let v1 = fix_sign(power_iteration(&cov, &start, None));
    let v2 = if dim > 1 {
        fix_sign(power_iteration(&cov, &start, Some(&v1)))
    } else {
        vec![0.0]
    };
    Ok(centered.iter().map(|c| [dot(c, &v1), dot(c, &v2)]).collect())
}

pub fn embedding_csv(labels: &[DomainLabel], points: &[[f64; 2]]) -> String {
    let mut out = String::from(EMBEDDING_HEADER);
    out.push('\n');
    for (d, p) in labels.iter().zip(points) {
        let _ = writeln!(out, "{},{:.6},{:.6}", d, p[0], p[1]);
    }
    out
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Fraction of codes whose nearest centroid in `table` has their label.
pub fn nearest_centroid_accuracy(table: &StyleTable, codes: &[(DomainLabel, Vec<f64>)]) -> f64 {
    if codes.is_empty() || table.domains.is_empty() {
        return 0.0;
    }
    let correct = codes
        .iter()
        .filter(|(label, code)| {
            let nearest = table
                .domains
                .iter()
                .min_by(|a, b| euclidean(code, &a.mean).total_cmp(&euclidean(code, &b.mean)))
                .expect("nonempty table");
            nearest.domain == *label
        })
        .count();
    correct as f64 / codes.len() as f64
}

/// Mean pairwise distance between domain centroids and mean distance of
/// codes to their own centroid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Separation {
    pub inter_centroid: f64,
    pub intra_spread: f64,
}

pub fn separation(codes: &[(DomainLabel, Vec<f64>)]) -> Result<Separation> {
    let dim = codes.first().map(|(_, c)| c.len()).unwrap_or(0);
    let table = StyleTable::from_codes(dim, codes)?;
    if table.domains.len() < 2 {
        return Err(Error::Usage("separation needs codes from at least two domains".into()));
    }
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..table.domains.len() {
        for j in i + 1..table.domains.len() {
            inter += euclidean(&table.domains[i].mean, &table.domains[j].mean);
            pairs += 1;
        }
    }
    let intra = codes
        .iter()
        .map(|(d, c)| euclidean(c, &table.get(*d).expect("domain present").mean))
        .sum::<f64>()
        / codes.len() as f64;
    Ok(Separation {
        inter_centroid: inter / pairs as f64,
        intra_spread: intra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_code_per_domain_has_zero_spread() {
        let t = StyleTable::from_codes(2, &[(DomainLabel::T1, vec![1.0, 2.0])]).unwrap();
        assert_eq!(t.domains.len(), 1);
        assert_eq!(t.domains[0].std, vec![0.0, 0.0]);
        assert_eq!(t.domains[0].count, 1);
    }

    #[test]
    fn uneven_steps_end_exactly_at_one() {
        let alphas: Vec<f64> = interpolate_styles(&[0.0], &[1.0], 0.3)
            .unwrap()
            .into_iter()
            .map(|(a, _)| a)
            .collect();
        assert_eq!(alphas.len(), 5);
        assert_eq!(*alphas.last().unwrap(), 1.0);
    }
}

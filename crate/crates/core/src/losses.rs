//! Generator and discriminator objectives.
//!
//! All L1 terms are means over elements, so magnitudes do not depend on
//! image resolution or code length.

use impute_tensor::{Element, Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adversarial loss family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvLoss {
    /// `|target - p|`: generator `1 - p_fake`, discriminator
    /// `(1 - p_real) + p_fake`.
    #[default]
    Linear,
    /// Binary cross-entropy against targets 1 (real) and 0 (fake).
    Bce,
}

/// Weights of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cyc: f64,
    pub adv: f64,
    pub ds: f64,
}

/// Per-iteration loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub csl: f64,
    pub ccl: f64,
    pub cl: f64,
    pub g_adv: f64,
    pub sdl: f64,
    pub g_total: f64,
    pub dsc_adv: f64,
}

pub const LOG_HEADER: &str = "iter,csl,ccl,cl,g_adv,sdl,g_total,dsc_adv";

impl LossBreakdown {
    /// Derives `cl` and `g_total` from the individual terms.
    pub fn assemble(csl: f64, ccl: f64, g_adv: f64, sdl: f64, dsc_adv: f64, w: LossWeights) -> Self {
        let cl = csl + ccl;
        Self {
            csl,
            ccl,
            cl,
            g_adv,
            sdl,
            g_total: generator_objective(cl, g_adv, sdl, w),
            dsc_adv,
        }
    }

    pub fn csv_row(&self, iter: u64) -> String {
        format!(
            "{iter},{},{},{},{},{},{},{}",
            self.csl, self.ccl, self.cl, self.g_adv, self.sdl, self.g_total, self.dsc_adv
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<(u64, Self)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return None;
        }
        let v = |i: usize| f[i].parse::<f64>().ok();
        Some((
            f[0].parse().ok()?,
            Self {
                csl: v(1)?,
                ccl: v(2)?,
                cl: v(3)?,
                g_adv: v(4)?,
                sdl: v(5)?,
                g_total: v(6)?,
                dsc_adv: v(7)?,
            },
        ))
    }
}

/// `cyc * cl + adv * g_adv - ds * sdl`.
pub fn generator_objective(cl: f64, g_adv: f64, sdl: f64, w: LossWeights) -> f64 {
    w.cyc * cl + w.adv * g_adv - w.ds * sdl
}

fn check_probabilities<T: Element>(g: &Graph<T>, p: Var, what: &str) -> Result<()> {
    if let Some(v) = g.value(p).data().iter().find(|v| !(0.0..=1.0).contains(&v.as_f64())) {
        return Err(Error::Usage(format!("{what}: probability {v} outside [0, 1]")));
    }
    Ok(())
}

/// Cyclic style loss: mean absolute difference of two style codes.
pub fn csl<T: Element>(g: &mut Graph<T>, s_real: Var, s_fake: Var) -> Result<Var> {
    Ok(g.mean_abs_diff(s_real, s_fake)?)
}

/// Cyclic content loss: sum over the three inputs of the per-image mean
/// absolute reconstruction error.
pub fn ccl<T: Element>(g: &mut Graph<T>, reconstructed: [Var; 3], originals: [Var; 3]) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for (r, o) in reconstructed.into_iter().zip(originals) {
        terms.push(g.mean_abs_diff(r, o)?);
    }
    let a = g.add(terms[0], terms[1])?;
    Ok(g.add(a, terms[2])?)
}

/// Generator adversarial term on discriminator outputs for fakes.
pub fn g_adv<T: Element>(g: &mut Graph<T>, p_fake: Var, kind: AdvLoss) -> Result<Var> {
    check_probabilities(g, p_fake, "g_adv")?;
    match kind {
        AdvLoss::Linear => {
            let m = g.mean(p_fake)?;
            let neg = g.scale(m, -1.0)?;
            Ok(g.add_scalar(neg, 1.0)?)
        }
        AdvLoss::Bce => Ok(g.bce(p_fake, 1.0)?),
    }
}

/// Discriminator objective on outputs for real and generated images.
pub fn dsc_adv<T: Element>(g: &mut Graph<T>, p_real: Var, p_fake: Var, kind: AdvLoss) -> Result<Var> {
    check_probabilities(g, p_real, "dsc_adv")?;
    check_probabilities(g, p_fake, "dsc_adv")?;
    match kind {
        AdvLoss::Linear => {
            let real = g.mean(p_real)?;
            let fake = g.mean(p_fake)?;
            let real_term = g.scale(real, -1.0)?;
            let real_term = g.add_scalar(real_term, 1.0)?;
            Ok(g.add(real_term, fake)?)
        }
        AdvLoss::Bce => {
            let real = g.bce(p_real, 1.0)?;
            let fake = g.bce(p_fake, 0.0)?;
            Ok(g.add(real, fake)?)
        }
    }
}

/// Style diversification: mean absolute difference of two generated images.
pub fn sdl<T: Element>(g: &mut Graph<T>, x_hat_1: Var, x_hat_2: Var) -> Result<Var> {
    Ok(g.mean_abs_diff(x_hat_1, x_hat_2)?)
}

/// Builds the generator objective on the graph. `sdl` may be absent when its
/// weight is zero.
pub fn generator_loss<T: Element>(
    g: &mut Graph<T>,
    cl: Var,
    g_adv: Var,
    sdl: Option<Var>,
    w: LossWeights,
) -> Result<Var> {
    let a = g.scale(cl, w.cyc)?;
    let b = g.scale(g_adv, w.adv)?;
    let mut total = g.add(a, b)?;
    if let Some(s) = sdl {
        let s = g.scale(s, -w.ds)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_round_trip() {
        let w = LossWeights {
            cyc: 10.0,
            adv: 1.0,
            ds: 0.5,
        };
        let b = LossBreakdown::assemble(0.1, 0.25, 0.6, 0.05, 1.1, w);
        let (iter, parsed) = LossBreakdown::parse_csv_row(&b.csv_row(42)).unwrap();
        assert_eq!((iter, parsed), (42, b));
    }
}

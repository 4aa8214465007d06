//! Imputation of a missing contrast from the other three.

use impute_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::domain::DomainLabel;
use crate::error::{Error, Result};
use crate::image::ModalityImage;
use crate::networks::{Content, Model};

/// Source of the target style code.
#[derive(Clone, Debug)]
pub enum StyleSource<'a> {
    /// Style encoded from a reference image of the target domain.
    Reference(&'a ModalityImage),
    /// Mapping-network style from standard normal noise seeded by the value.
    Latent(u64),
    /// An explicit code, e.g. a stored mean style.
    Code(Vec<f64>),
}

/// Orders `inputs` by domain index after checking they are exactly the
/// complement of `target`.
pub fn canonical_inputs(inputs: &[ModalityImage], target: DomainLabel) -> Result<[&ModalityImage; 3]> {
    let expected = DomainLabel::inputs_for(target);
    let mut got: Vec<DomainLabel> = inputs.iter().map(|i| i.domain).collect();
    got.sort();
    if got != expected {
        let names = |ds: &[DomainLabel]| ds.iter().map(|d| d.name()).collect::<Vec<_>>().join(", ");
        return Err(Error::Usage(format!(
            "target {target} needs inputs {} exactly once each, got [{}]",
            names(&expected),
            names(&got)
        )));
    }
    Ok(expected.map(|d| inputs.iter().find(|i| i.domain == d).expect("checked above")))
}

fn combined(model: &Model<f32>, g: &mut Graph<f32>, inputs: [&ModalityImage; 3]) -> Result<Content> {
    let mut contents = Vec::with_capacity(3);
    for img in inputs {
        let x = g.constant(img.to_tensor())?;
        contents.push(model.content_encode(g, x)?);
    }
    model.combine(g, [&contents[0], &contents[1], &contents[2]])
}

/// Style code for `target` from `source`.
pub fn style_code(model: &Model<f32>, source: &StyleSource<'_>, target: DomainLabel) -> Result<Vec<f64>> {
    let s = model.arch().style_dim;
    let mut g = Graph::no_grad();
    let code = match source {
        StyleSource::Reference(img) => {
            let x = g.constant(img.to_tensor())?;
            model.style_encode(&mut g, x, target)?
        }
        StyleSource::Latent(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let z: Vec<f32> = (0..model.arch().noise_dim)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                })
                .collect();
            let z = g.constant(Tensor::new(&[1, z.len()], z)?)?;
            model.map_noise(&mut g, z, target)?
        }
        StyleSource::Code(c) => {
            if c.len() != s {
                return Err(Error::Usage(format!("style code has length {}, expected {s}", c.len())));
            }
            return Ok(c.clone());
        }
    };
    Ok(g.value(code).to_f64_vec())
}

/// Decodes the combined content of `inputs` once per code.
pub fn decode_codes(
    model: &Model<f32>,
    inputs: &[ModalityImage],
    target: DomainLabel,
    codes: &[Vec<f64>],
) -> Result<Vec<ModalityImage>> {
    let inputs = canonical_inputs(inputs, target)?;
    let s = model.arch().style_dim;
    let mut g = Graph::no_grad();
    let cc = combined(model, &mut g, inputs)?;
    codes
        .iter()
        .map(|code| {
            if code.len() != s {
                return Err(Error::Usage(format!("style code has length {}, expected {s}", code.len())));
            }
            let sv = g.constant(Tensor::from_f64(&[1, s], code)?)?;
            let out = model.decode(&mut g, &cc, sv)?;
            ModalityImage::from_tensor(target, g.value(out))
        })
        .collect()
}

/// Generates `target` from the other three contrasts, in any order.
pub fn impute(
    model: &Model<f32>,
    inputs: &[ModalityImage],
    target: DomainLabel,
    source: &StyleSource<'_>,
) -> Result<ModalityImage> {
    let code = style_code(model, source, target)?;
    Ok(decode_codes(model, inputs, target, &[code])?.remove(0))
}

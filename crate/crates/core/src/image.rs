use impute_tensor::{Element, Tensor};

use crate::domain::DomainLabel;
use crate::error::{Error, Result};

/// Single-channel square image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityImage {
    pub domain: DomainLabel,
    size: usize,
    pixels: Vec<f32>,
}

impl ModalityImage {
    pub fn new(domain: DomainLabel, size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::Usage(format!(
                "image of size {size} needs {} pixels, got {}",
                size * size,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Usage(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { domain, size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn with_domain(mut self, domain: DomainLabel) -> Self {
        self.domain = domain;
        self
    }

    /// `[1, 1, size, size]` network input.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::new(&[1, 1, self.size, self.size], self.pixels.iter().map(|&v| T::of(v as f64)).collect())
            .expect("image is square")
    }

    /// Builds an image from a `[1, 1, H, W]` network output, clamping to `[0, 1]`.
    pub fn from_tensor<T: Element>(domain: DomainLabel, t: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4("image")?;
        if n != 1 || c != 1 || h != w {
            return Err(Error::Usage(format!("expected [1, 1, S, S] image tensor, got {:?}", t.shape())));
        }
        let pixels = t.data().iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect();
        Self::new(domain, h, pixels)
    }
}

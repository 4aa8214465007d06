//! Multiple-to-one MRI modality imputation with a style-conditioned GAN.
//!
//! [`phantom`] and [`dataset`] provide data, [`networks`] the generator and
//! discriminator modules, [`losses`] and [`training`] the objective and the
//! optimization loop, [`inference`] imputation, and [`metrics`] and
//! [`analysis`] the evaluation tools.

pub mod analysis;
pub mod dataset;
mod domain;
mod error;
mod image;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod pgm;
pub mod phantom;
pub mod training;

pub use domain::DomainLabel;
pub use error::{Error, Result};
pub use image::ModalityImage;
pub use phantom::{Dataset, PhantomSample, StyleParams, TissueMap};

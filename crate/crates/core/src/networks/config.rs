use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by all modules.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Square image side; a multiple of `2^levels`.
    pub size: usize,
    /// Down-sampling blocks in the content and style encoders.
    pub levels: usize,
    pub base_ch: usize,
    /// Channels of the content map (`C`).
    pub content_ch: usize,
    /// Style code length (`S`).
    pub style_dim: usize,
    /// Mapping-network noise length (`Z`).
    pub noise_dim: usize,
    pub map_width: usize,
    /// Length of the learned domain embedding used by the separator.
    pub domain_emb: usize,
    /// Strided blocks in the discriminator trunk.
    pub dsc_blocks: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            size: 64,
            levels: 3,
            base_ch: 32,
            content_ch: 128,
            style_dim: 64,
            noise_dim: 16,
            map_width: 128,
            domain_emb: 16,
            dsc_blocks: 4,
        }
    }
}

impl ArchConfig {
    /// Channel width entering encoder level `l` (`0..=levels`).
    pub fn width(&self, l: usize) -> usize {
        if l >= self.levels {
            self.content_ch
        } else {
            (self.base_ch << l).min(self.content_ch)
        }
    }

    /// Channel width after discriminator block `i`.
    pub fn dsc_width(&self, i: usize) -> usize {
        (self.base_ch << i).min(self.content_ch)
    }

    /// Side of the content map.
    pub fn content_size(&self) -> usize {
        self.size >> self.levels
    }

    /// Side of the discriminator's final feature map.
    pub fn dsc_size(&self) -> usize {
        let mut s = self.size;
        for _ in 0..self.dsc_blocks {
            s = (s - 1) / 2 + 1;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("size", self.size),
            ("levels", self.levels),
            ("base_ch", self.base_ch),
            ("content_ch", self.content_ch),
            ("style_dim", self.style_dim),
            ("noise_dim", self.noise_dim),
            ("map_width", self.map_width),
            ("domain_emb", self.domain_emb),
            ("dsc_blocks", self.dsc_blocks),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("arch.{name} must be positive")));
        }
        if self.levels >= usize::BITS as usize || !self.size.is_multiple_of(1 << self.levels) || self.content_size() < 2 {
            return Err(Error::Config(format!(
                "arch.size {} must be a multiple of 2^levels with a content map of at least 2x2 (levels = {})",
                self.size, self.levels
            )));
        }
        if self.size < 8 {
            return Err(Error::Config("arch.size must be at least 8".into()));
        }
        Ok(())
    }
}

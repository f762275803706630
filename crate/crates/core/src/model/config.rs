use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of the miniature segmenter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_twoway_blocks: usize,
    pub n_mask_tokens: usize,
    pub n_ips_tokens: usize,
    pub fourier_bands: usize,
    /// Hidden width of the pattern-embedding FFN; `0` selects `4 * decoder_dim`.
    pub pae_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch_size: 8,
            encoder_dim: 64,
            encoder_layers: 2,
            encoder_heads: 4,
            decoder_dim: 64,
            decoder_twoway_blocks: 2,
            n_mask_tokens: 4,
            n_ips_tokens: 4,
            fourier_bands: 8,
            pae_hidden: 0,
        }
    }
}

/// Number of `u32` words in the serialized config echo.
pub const CONFIG_WORDS: usize = 12;

impl ModelConfig {
    /// Very small dims for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            encoder_dim: 8,
            encoder_layers: 2,
            encoder_heads: 2,
            decoder_dim: 8,
            decoder_twoway_blocks: 1,
            n_mask_tokens: 2,
            n_ips_tokens: 2,
            fourier_bands: 2,
            pae_hidden: 0,
        }
    }

    /// 32px model that still learns in seconds; used by service fixtures.
    pub fn small() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            encoder_dim: 32,
            encoder_heads: 4,
            decoder_dim: 32,
            decoder_twoway_blocks: 2,
            n_mask_tokens: 4,
            n_ips_tokens: 4,
            fourier_bands: 8,
            ..Self::tiny()
        }
    }

    /// Token dims of the full-size foundation model (ViT-B SAM decoder), used
    /// only for trainable-parameter accounting.
    pub fn sam_scale() -> Self {
        Self {
            image_size: 1024,
            channels: 3,
            patch_size: 16,
            encoder_dim: 768,
            encoder_layers: 12,
            encoder_heads: 8,
            decoder_dim: 256,
            decoder_twoway_blocks: 2,
            n_mask_tokens: 4,
            n_ips_tokens: 4,
            fourier_bands: 64,
            pae_hidden: 0,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn pae_hidden_width(&self) -> usize {
        if self.pae_hidden == 0 {
            4 * self.decoder_dim
        } else {
            self.pae_hidden
        }
    }

    /// Side of the upscaled mask-feature map before the final resize.
    pub fn upscaled_size(&self) -> usize {
        4 * self.grid_size()
    }

    pub fn validate(&self) -> Result<()> {
        let fields = self.to_words();
        if fields[..11].contains(&0) {
            return Err(Error::Config(format!("all dimensions must be positive: {self:?}")));
        }
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{msg}: {self:?}")))
            }
        };
        check(self.image_size.is_multiple_of(self.patch_size), "image_size must be divisible by patch_size")?;
        check(self.encoder_dim.is_multiple_of(self.encoder_heads), "encoder_dim must be divisible by encoder_heads")?;
        check(self.n_ips_tokens == self.n_mask_tokens, "n_ips_tokens must equal n_mask_tokens")?;
        check(self.decoder_dim.is_multiple_of(8), "decoder_dim must be a multiple of 8")?;
        check(
            (self.decoder_dim / 2).is_multiple_of(self.encoder_heads),
            "decoder_dim / 2 must be divisible by the head count",
        )
    }

    pub fn to_words(&self) -> [u32; CONFIG_WORDS] {
        [
            self.image_size as u32,
            self.channels as u32,
            self.patch_size as u32,
            self.encoder_dim as u32,
            self.encoder_layers as u32,
            self.encoder_heads as u32,
            self.decoder_dim as u32,
            self.decoder_twoway_blocks as u32,
            self.n_mask_tokens as u32,
            self.n_ips_tokens as u32,
            self.fourier_bands as u32,
            self.pae_hidden as u32,
        ]
    }

    pub fn from_words(w: &[u32]) -> Result<Self> {
        if w.len() != CONFIG_WORDS {
            return Err(Error::Config(format!("expected {CONFIG_WORDS} config words, got {}", w.len())));
        }
        let v: Vec<usize> = w.iter().map(|&x| x as usize).collect();
        let cfg = Self {
            image_size: v[0],
            channels: v[1],
            patch_size: v[2],
            encoder_dim: v[3],
            encoder_layers: v[4],
            encoder_heads: v[5],
            decoder_dim: v[6],
            decoder_twoway_blocks: v[7],
            n_mask_tokens: v[8],
            n_ips_tokens: v[9],
            fourier_bands: v[10],
            pae_hidden: v[11],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

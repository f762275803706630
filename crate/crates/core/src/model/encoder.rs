use alloc::format;
use alloc::vec::Vec;

use super::nn::{Activation, Attention, Conv, Init, LayerNorm, Linear, Mlp, ParamBuilder};
use super::ModelConfig;
use crate::autodiff::{Graph, ParamId, Real, Var};
use crate::error::Result;

/// Pre-norm transformer layer over patch tokens.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl EncoderLayer {
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// Patchify-and-project ViT with learned 2-D position embeddings and a
/// linear neck into the decoder width.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    patch_embed: Conv,
    pos_embed: ParamId,
    layers: Vec<EncoderLayer>,
    neck: Linear,
    neck_norm: LayerNorm,
    cfg: ModelConfig,
}

/// Graph handles for an encoded image: the final grid and every layer's
/// output, each as `[g, g, C]`.
#[derive(Clone, Debug)]
pub struct EmbeddingVars {
    pub grid: Var,
    pub levels: Vec<Var>,
}

impl ImageEncoder {
    pub(crate) fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.encoder_dim;
        let p = cfg.patch_size;
        let patch_embed = b.conv("encoder.patch_embed", p, cfg.channels, d)?;
        let pos_embed = b.tensor("encoder.pos_embed", &[cfg.num_patches(), d], Init::Uniform(0.1))?;
        let layers = (0..cfg.encoder_layers)
            .map(|i| {
                let n = format!("encoder.layers.{i}");
                Ok(EncoderLayer {
                    norm1: b.layer_norm(&format!("{n}.norm1"), d)?,
                    attn: b.attention(&format!("{n}.attn"), d, d, cfg.encoder_heads)?,
                    norm2: b.layer_norm(&format!("{n}.norm2"), d)?,
                    mlp: b.mlp(&format!("{n}.mlp"), &[d, 4 * d, d], Activation::Gelu)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_embed,
            pos_embed,
            layers,
            neck: b.linear("encoder.neck", d, cfg.decoder_dim)?,
            neck_norm: b.layer_norm("encoder.neck_norm", cfg.decoder_dim)?,
            cfg: *cfg,
        })
    }

    /// `image` is `[S, S, channels]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<EmbeddingVars> {
        let gs = self.cfg.grid_size();
        let d = self.cfg.encoder_dim;
        let x = self.patch_embed.forward(g, image, self.cfg.patch_size, 0)?;
        let x = g.reshape(x, &[gs * gs, d])?;
        let pos = g.param(self.pos_embed);
        let mut x = g.add(x, pos)?;
        let mut levels = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(g, x)?;
            levels.push(g.reshape(x, &[gs, gs, d])?);
        }
        let y = self.neck.forward(g, x)?;
        let y = self.neck_norm.forward(g, y)?;
        let grid = g.reshape(y, &[gs, gs, self.cfg.decoder_dim])?;
        Ok(EmbeddingVars { grid, levels })
    }
}

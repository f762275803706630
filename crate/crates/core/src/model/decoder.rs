use alloc::format;
use alloc::vec::Vec;

use super::nn::{Activation, Attention, Conv, Init, LayerNorm, Mlp, ParamBuilder};
use super::ModelConfig;
use crate::autodiff::{Axis, Graph, ParamId, Real, Var};
use crate::error::{shape_err, Result};

/// One block of the two-way transformer: token self-attention, token-to-image
/// cross-attention, token MLP, then image-to-token cross-attention.
#[derive(Clone, Debug)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_image_to_token: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        keys: Var,
        query_pe: Var,
        key_pe: Var,
    ) -> Result<(Var, Var)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(g, queries, queries, queries)?
        } else {
            let q = g.add(queries, query_pe)?;
            let a = self.self_attn.forward(g, q, q, queries)?;
            g.add(queries, a)?
        };
        let queries = self.norm1.forward(g, queries)?;

        let q = g.add(queries, query_pe)?;
        let k = g.add(keys, key_pe)?;
        let a = self.cross_token_to_image.forward(g, q, k, keys)?;
        let queries = g.add(queries, a)?;
        let queries = self.norm2.forward(g, queries)?;

        let m = self.mlp.forward(g, queries)?;
        let queries = g.add(queries, m)?;
        let queries = self.norm3.forward(g, queries)?;

        let q = g.add(queries, query_pe)?;
        let k = g.add(keys, key_pe)?;
        let a = self.cross_image_to_token.forward(g, k, q, queries)?;
        let keys = g.add(keys, a)?;
        let keys = self.norm4.forward(g, keys)?;
        Ok((queries, keys))
    }
}

/// SAM-style mask decoder with output tokens (one IoU token, `n` mask tokens).
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub iou_token: ParamId,
    pub mask_tokens: ParamId,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
    upscale1: Conv,
    upscale2: Conv,
    hyper: Vec<Mlp>,
    iou_head: Mlp,
    cfg: ModelConfig,
}

/// Graph handles of a decoder pass.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    /// `[S, S, n_mask_tokens]` pre-sigmoid logits.
    pub masks: Var,
    /// `[S*S, 1]` logits of the primary mask (token 0).
    pub primary: Var,
    /// `[1, n_mask_tokens]` predicted IoU in `[0, 1]`.
    pub iou: Var,
}

impl MaskDecoder {
    pub(crate) fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_dim;
        let heads = cfg.encoder_heads;
        let n = cfg.n_mask_tokens;
        let blocks = (0..cfg.decoder_twoway_blocks)
            .map(|i| {
                let p = format!("decoder.transformer.layers.{i}");
                Ok(TwoWayBlock {
                    self_attn: b.attention(&format!("{p}.self_attn"), d, d, heads)?,
                    norm1: b.layer_norm(&format!("{p}.norm1"), d)?,
                    cross_token_to_image: b.attention(&format!("{p}.cross_attn_token_to_image"), d, d / 2, heads)?,
                    norm2: b.layer_norm(&format!("{p}.norm2"), d)?,
                    mlp: b.mlp(&format!("{p}.mlp"), &[d, 4 * d, d], Activation::Relu)?,
                    norm3: b.layer_norm(&format!("{p}.norm3"), d)?,
                    cross_image_to_token: b.attention(&format!("{p}.cross_attn_image_to_token"), d, d / 2, heads)?,
                    norm4: b.layer_norm(&format!("{p}.norm4"), d)?,
                    skip_first_pe: i == 0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            iou_token: b.tensor("decoder.iou_token", &[1, d], Init::Uniform(1.0))?,
            mask_tokens: b.tensor("decoder.mask_tokens", &[n, d], Init::Uniform(1.0))?,
            blocks,
            final_attn: b.attention("decoder.transformer.final_attn_token_to_image", d, d / 2, heads)?,
            norm_final: b.layer_norm("decoder.transformer.norm_final", d)?,
            upscale1: b.conv("decoder.upscale.0", 3, d, d / 4)?,
            upscale2: b.conv("decoder.upscale.1", 3, d / 4, d / 8)?,
            hyper: (0..n)
                .map(|t| b.mlp(&format!("decoder.hyper.{t}"), &[d, d, d, d / 8], Activation::Relu))
                .collect::<Result<_>>()?,
            iou_head: b.mlp("decoder.iou_head", &[d, d, d, n], Activation::Relu)?,
            cfg: *cfg,
        })
    }

    /// Run the decoder.
    ///
    /// `grid` is `[g, g, d]`, `image_pe` `[g*g, d]`, `dense` the `[d]`
    /// no-mask embedding, `pattern` the `[1 + n, d]` output-token block and
    /// `prompts` the `[k, d]` sparse prompt tokens.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        grid: Var,
        image_pe: Var,
        dense: Var,
        pattern: Var,
        prompts: Var,
    ) -> Result<DecoderVars> {
        let cfg = &self.cfg;
        let d = cfg.decoder_dim;
        let n = cfg.n_mask_tokens;
        let gs = cfg.grid_size();
        if g.shape(pattern) != [1 + n, d] {
            return Err(shape_err(
                "decode_masks",
                format!("pattern tokens {:?}, expected [{}, {d}]", g.shape(pattern), 1 + n),
            ));
        }
        if g.shape(prompts).len() != 2 || g.shape(prompts)[1] != d {
            return Err(shape_err("decode_masks", format!("prompt tokens {:?}", g.shape(prompts))));
        }
        if g.shape(grid) != [gs, gs, d] {
            return Err(shape_err("decode_masks", format!("image embedding {:?}", g.shape(grid))));
        }

        let tokens = g.concat(&[pattern, prompts], Axis::Rows)?;
        let keys = g.reshape(grid, &[gs * gs, d])?;
        let mut keys = g.add_row(keys, dense)?;
        let mut queries = tokens;
        for block in &self.blocks {
            (queries, keys) = block.forward(g, queries, keys, tokens, image_pe)?;
        }
        let q = g.add(queries, tokens)?;
        let k = g.add(keys, image_pe)?;
        let a = self.final_attn.forward(g, q, k, keys)?;
        let queries = g.add(queries, a)?;
        let queries = self.norm_final.forward(g, queries)?;

        let iou_out = g.slice(queries, Axis::Rows, 0, 1)?;
        let x = g.reshape(keys, &[gs, gs, d])?;
        let x = g.resize_bilinear(x, 2 * gs, 2 * gs)?;
        let x = self.upscale1.forward(g, x, 1, 1)?;
        let x = g.gelu(x);
        let x = g.resize_bilinear(x, 4 * gs, 4 * gs)?;
        let x = self.upscale2.forward(g, x, 1, 1)?;
        let x = g.gelu(x);
        let up = 4 * gs;
        let feat = g.reshape(x, &[up * up, d / 8])?;

        let mut hyper_rows = Vec::with_capacity(n);
        for (t, mlp) in self.hyper.iter().enumerate() {
            let row = g.slice(queries, Axis::Rows, 1 + t, 1)?;
            hyper_rows.push(mlp.forward(g, row)?);
        }
        let hyper = g.concat(&hyper_rows, Axis::Rows)?;
        let low = g.matmul_t(feat, hyper, false, true)?;
        let s = cfg.image_size;
        let masks = if up == s {
            g.reshape(low, &[s, s, n])?
        } else {
            let low = g.reshape(low, &[up, up, n])?;
            g.resize_bilinear(low, s, s)?
        };
        let flat = g.reshape(masks, &[s * s, n])?;
        let primary = if n == 1 { flat } else { g.slice(flat, Axis::Cols, 0, 1)? };

        let iou = self.iou_head.forward(g, iou_out)?;
        let iou = g.sigmoid(iou);
        Ok(DecoderVars { masks, primary, iou })
    }
}

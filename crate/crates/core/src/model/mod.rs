//! Miniature SAM-style promptable segmenter.

mod config;
mod decoder;
mod encoder;
pub mod nn;
mod prompt;

use alloc::format;
use alloc::vec::Vec;

pub use config::{ModelConfig, CONFIG_WORDS};
pub use decoder::{DecoderVars, MaskDecoder};
pub use encoder::{EmbeddingVars, ImageEncoder};
pub use prompt::{fourier_frequencies, PromptEncoder};

use crate::autodiff::{Graph, ParamStore, Real, Tensor, Var};
use crate::data::PointPrompt;
use crate::error::{shape_err, Error, Result};
use nn::ParamBuilder;

/// Base model: encoder, prompt encoder and mask decoder. Holds parameter
/// handles only; the weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MiniSam {
    pub cfg: ModelConfig,
    pub encoder: ImageEncoder,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
}

/// Materialized encoder output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    /// `[g, g, d]`.
    pub grid: Tensor,
    /// One `[g, g, d_enc]` map per encoder layer.
    pub levels: Vec<Tensor>,
}

impl ImageEmbedding {
    /// Re-enter the embedding into a graph as constants.
    pub fn to_graph<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<EmbeddingVars> {
        let grid = g.constant(self.grid.shape(), cast_vec(self.grid.data()))?;
        let levels = self
            .levels
            .iter()
            .map(|l| g.constant(l.shape(), cast_vec(l.data())))
            .collect::<Result<_>>()?;
        Ok(EmbeddingVars { grid, levels })
    }
}

pub(crate) fn cast_vec<T: Real>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::c(x as f64)).collect()
}

impl MiniSam {
    /// Register freshly initialized base weights.
    pub fn init(store: &mut ParamStore<f32>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::build(&mut ParamBuilder::init(store, seed), cfg)
    }

    /// Attach to base weights already in `store`.
    pub fn bind(store: &mut ParamStore<f32>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Self::build(&mut ParamBuilder::bind(store), cfg)
    }

    fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            cfg: *cfg,
            encoder: ImageEncoder::build(b, cfg)?,
            prompt: PromptEncoder::build(b, cfg)?,
            decoder: MaskDecoder::build(b, cfg)?,
        })
    }

    fn check_image(&self, image: &[f32]) -> Result<()> {
        let c = &self.cfg;
        let n = c.image_size * c.image_size * c.channels;
        if image.len() != n {
            return Err(shape_err(
                "encode_image",
                format!("{} values, expected {}x{}x{}", image.len(), c.image_size, c.image_size, c.channels),
            ));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image contains non-finite values".into()));
        }
        Ok(())
    }

    /// Encode an `[S, S, C]` image inside a graph.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, image: &[f32]) -> Result<EmbeddingVars> {
        self.check_image(image)?;
        let c = &self.cfg;
        let x = g.constant(&[c.image_size, c.image_size, c.channels], cast_vec(image))?;
        self.encoder.forward(g, x)
    }

    /// Encode an image to plain tensors.
    pub fn encode_image(&self, store: &ParamStore<f32>, image: &[f32]) -> Result<ImageEmbedding> {
        let mut g = Graph::new(store);
        let vars = self.embed(&mut g, image)?;
        let grab = |g: &Graph<'_, f32>, v: Var| Tensor::new(g.shape(v), g.value(v).to_vec());
        Ok(ImageEmbedding {
            grid: grab(&g, vars.grid)?,
            levels: vars.levels.iter().map(|&v| grab(&g, v)).collect::<Result<_>>()?,
        })
    }

    /// Sparse prompt tokens for fixed points.
    pub fn encode_points<T: Real>(&self, g: &mut Graph<'_, T>, points: &[PointPrompt]) -> Result<Var> {
        if points.is_empty() {
            return Err(Error::Prompt("empty point list".into()));
        }
        let mut coords = Vec::with_capacity(points.len() * 2);
        for p in points {
            coords.push(T::c(p.x as f64));
            coords.push(T::c(p.y as f64));
        }
        let labels: Vec<_> = points.iter().map(|p| p.label).collect();
        let coords = g.constant(&[points.len(), 2], coords)?;
        self.prompt.encode(g, coords, &labels)
    }

    /// Decode masks from an embedding, a composed pattern-token block and
    /// prompt tokens.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        emb: &EmbeddingVars,
        pattern: Var,
        prompts: Var,
    ) -> Result<DecoderVars> {
        let pe = self.prompt.image_pe(g)?;
        let dense = self.prompt.no_mask(g);
        self.decoder.forward(g, emb.grid, pe, dense, pattern, prompts)
    }
}

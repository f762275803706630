use alloc::vec;
use alloc::vec::Vec;

use super::nn::{Init, Linear, ParamBuilder};
use super::ModelConfig;
use crate::autodiff::{Axis, Graph, ParamId, Real, Var};
use crate::data::Label;
use crate::error::{Error, Result};

/// Point prompt encoder: Fourier features of continuous `(x, y)`, a learned
/// projection, plus an additive per-label embedding.
///
/// The encoding is smooth in the coordinates, so gradients reach whatever
/// produced them (the auto-prompting heads).
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    proj: Linear,
    /// Row 0: positive, row 1: negative.
    label_embed: ParamId,
    /// Dense embedding added to image tokens when no mask prompt is given.
    no_mask_embed: ParamId,
    freqs: Vec<f64>,
    cfg: ModelConfig,
}

/// Geometric frequency ladder from 1 to 16 cycles per unit.
pub fn fourier_frequencies(bands: usize) -> Vec<f64> {
    if bands == 1 {
        return vec![1.0];
    }
    (0..bands)
        .map(|k| libm::pow(16.0, k as f64 / (bands - 1) as f64))
        .collect()
}

impl PromptEncoder {
    pub(crate) fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_dim;
        Ok(Self {
            proj: b.linear("prompt.proj", 4 * cfg.fourier_bands, d)?,
            label_embed: b.tensor("prompt.label_embed", &[2, d], Init::Uniform(1.0))?,
            no_mask_embed: b.tensor("prompt.no_mask_embed", &[d], Init::Uniform(0.1))?,
            freqs: fourier_frequencies(cfg.fourier_bands),
            cfg: *cfg,
        })
    }

    /// `[k, 2]` coordinates to `[k, 4 * bands]` features
    /// `[sin(2 pi f x), sin(2 pi f y), cos(2 pi f x), cos(2 pi f y)]`.
    pub fn fourier<T: Real>(&self, g: &mut Graph<'_, T>, coords: Var) -> Result<Var> {
        let nb = self.freqs.len();
        let mut fm = vec![T::zero(); 2 * 2 * nb];
        for (j, f) in self.freqs.iter().enumerate() {
            fm[j] = T::c(core::f64::consts::TAU * f);
            fm[2 * nb + nb + j] = T::c(core::f64::consts::TAU * f);
        }
        let fm = g.constant(&[2, 2 * nb], fm)?;
        let phase = g.matmul(coords, fm)?;
        let s = g.sin(phase);
        let c = g.cos(phase);
        g.concat(&[s, c], Axis::Cols)
    }

    fn position<T: Real>(&self, g: &mut Graph<'_, T>, coords: Var) -> Result<Var> {
        let f = self.fourier(g, coords)?;
        self.proj.forward(g, f)
    }

    /// Sparse prompt tokens `[k, d]` for coordinates `[k, 2]` in `[0, 1]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, coords: Var, labels: &[Label]) -> Result<Var> {
        let k = labels.len();
        if k == 0 {
            return Err(Error::Prompt("empty point list".into()));
        }
        if g.shape(coords) != [k, 2] {
            return Err(Error::Prompt(alloc::format!(
                "coordinates {:?} do not match {k} labels",
                g.shape(coords)
            )));
        }
        if let Some(v) = g
            .value(coords)
            .iter()
            .map(|v| v.as_f64())
            .find(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Prompt(alloc::format!("coordinate {v} outside [0, 1]")));
        }
        let pe = self.position(g, coords)?;
        let mut onehot = vec![T::zero(); k * 2];
        for (i, l) in labels.iter().enumerate() {
            onehot[i * 2 + l.row()] = T::one();
        }
        let onehot = g.constant(&[k, 2], onehot)?;
        let table = g.param(self.label_embed);
        let lab = g.matmul(onehot, table)?;
        g.add(pe, lab)
    }

    /// Positional encoding of every grid cell center, `[g*g, d]`.
    pub fn image_pe<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let gs = self.cfg.grid_size();
        let mut c = Vec::with_capacity(gs * gs * 2);
        for i in 0..gs {
            for j in 0..gs {
                c.push(T::c((j as f64 + 0.5) / gs as f64));
                c.push(T::c((i as f64 + 0.5) / gs as f64));
            }
        }
        let coords = g.constant(&[gs * gs, 2], c)?;
        self.position(g, coords)
    }

    pub fn no_mask<T: Real>(&self, g: &mut Graph<'_, T>) -> Var {
        g.param(self.no_mask_embed)
    }
}

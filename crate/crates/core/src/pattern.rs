//! Incremental pattern shifting: shift tokens added onto the frozen
//! decoder's mask tokens, either free learned rows or generated per image by
//! a pattern-embedding FFN over the pooled image embedding.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, ParamId, ParamStore, Real, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::nn::{Init, Linear, ParamBuilder};
use crate::model::{MiniSam, ModelConfig};

pub const PAE_FC1: &str = "pattern.pae.fc1";
pub const PAE_FC2: &str = "pattern.pae.fc2";
pub const IPS_TOKENS: &str = "pattern.ips_tokens";
pub const MASK_TOKENS: &str = "decoder.mask_tokens";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IpsVariant {
    /// Vanilla frozen decoder.
    None,
    /// The decoder's own mask tokens are unfrozen.
    MaskTokens,
    /// Free learned shift tokens, independent of the image.
    IpsOnly,
    /// Shift tokens generated from the image embedding.
    IpsPae,
}

impl IpsVariant {
    pub const ALL: [IpsVariant; 4] = [
        IpsVariant::None,
        IpsVariant::MaskTokens,
        IpsVariant::IpsOnly,
        IpsVariant::IpsPae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IpsVariant::None => "none",
            IpsVariant::MaskTokens => "mask-tokens",
            IpsVariant::IpsOnly => "ips-only",
            IpsVariant::IpsPae => "ips-pae",
        }
    }
}

impl fmt::Display for IpsVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IpsVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ips variant {s:?}")))
    }
}

impl Serialize for IpsVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for IpsVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `FFN(GAP(grid))` reshaped to `[n, d]`.
#[derive(Clone, Debug)]
pub struct Pae {
    fc1: Linear,
    fc2: Linear,
    n: usize,
    d: usize,
}

impl Pae {
    fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_dim;
        let h = cfg.pae_hidden_width();
        let n = cfg.n_ips_tokens;
        Ok(Self {
            fc1: b.linear(PAE_FC1, d, h)?,
            fc2: b.linear_init(PAE_FC2, h, n * d, Init::Zeros, Init::Zeros)?,
            n,
            d,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, grid: Var) -> Result<Var> {
        let shape = g.shape(grid);
        if shape.len() != 3 || shape[2] != self.d {
            return Err(shape_err("pae_forward", format!("grid {shape:?}, expected [g, g, {}]", self.d)));
        }
        let pooled = g.global_avg_pool(grid)?;
        let pooled = g.reshape(pooled, &[1, self.d])?;
        let h = self.fc1.forward(g, pooled)?;
        let h = g.gelu(h);
        let out = self.fc2.forward(g, h)?;
        g.reshape(out, &[self.n, self.d])
    }
}

/// Adaptation state attached to a base model: the variant and the handles
/// of whatever it trains.
#[derive(Clone, Debug)]
pub struct PatternShift {
    pub variant: IpsVariant,
    pae: Option<Pae>,
    free: Option<ParamId>,
}

impl PatternShift {
    /// Register the variant's fresh parameters and mark its manifest
    /// trainable. Freezing the base beforehand is the caller's job.
    pub fn attach(store: &mut ParamStore<f32>, cfg: &ModelConfig, variant: IpsVariant, seed: u64) -> Result<Self> {
        let mut b = ParamBuilder::init(store, seed ^ 0x1b5);
        let shift = match variant {
            IpsVariant::None | IpsVariant::MaskTokens => Self {
                variant,
                pae: None,
                free: None,
            },
            IpsVariant::IpsOnly => Self {
                variant,
                pae: None,
                free: Some(b.tensor(IPS_TOKENS, &[cfg.n_ips_tokens, cfg.decoder_dim], Init::Zeros)?),
            },
            IpsVariant::IpsPae => Self {
                variant,
                pae: Some(Pae::build(&mut b, cfg)?),
                free: None,
            },
        };
        shift.set_trainable(store, true)?;
        Ok(shift)
    }

    /// Recover the variant from the tensors present in `store`.
    pub fn bind(store: &mut ParamStore<f32>, cfg: &ModelConfig) -> Result<Self> {
        let has_pae = store.contains(&format!("{PAE_FC1}.weight"));
        let has_free = store.contains(IPS_TOKENS);
        let mut b = ParamBuilder::bind(store);
        let (variant, pae, free) = match (has_pae, has_free) {
            (true, true) => return Err(Error::Config("both free and generated shift tokens present".into())),
            (true, false) => (IpsVariant::IpsPae, Some(Pae::build(&mut b, cfg)?), None),
            (false, true) => (
                IpsVariant::IpsOnly,
                None,
                Some(b.tensor(IPS_TOKENS, &[cfg.n_ips_tokens, cfg.decoder_dim], Init::Zeros)?),
            ),
            (false, false) => {
                let id = store.id(MASK_TOKENS)?;
                let v = if store.get(id).is_frozen() {
                    IpsVariant::None
                } else {
                    IpsVariant::MaskTokens
                };
                (v, None, None)
            }
        };
        Ok(Self { variant, pae, free })
    }

    /// Mark the variant's manifest tensors trainable (or frozen).
    pub fn set_trainable(&self, store: &mut ParamStore<f32>, trainable: bool) -> Result<()> {
        for name in manifest_names(self.variant) {
            let id = store.id(&name)?;
            store.set_trainable(id, trainable);
        }
        Ok(())
    }

    pub fn pae(&self) -> Option<&Pae> {
        self.pae.as_ref()
    }

    /// Shift tokens for one image, or `None` when the variant injects nothing.
    pub fn ips<T: Real>(&self, g: &mut Graph<'_, T>, grid: Var) -> Result<Option<Var>> {
        if let Some(p) = &self.pae {
            return p.forward(g, grid).map(Some);
        }
        Ok(self.free.map(|id| g.param(id)))
    }

    /// Composed token block for the decoder.
    pub fn pattern_tokens<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        model: &MiniSam,
        grid: Var,
        use_ips: bool,
    ) -> Result<Var> {
        let iou = g.param(model.decoder.iou_token);
        let mask = g.param(model.decoder.mask_tokens);
        let ips = if use_ips { self.ips(g, grid)? } else { None };
        compose_pattern_tokens(g, iou, mask, ips)
    }
}

/// `[iou; mask + ips]`; with no shift the mask rows pass through untouched.
pub fn compose_pattern_tokens<T: Real>(g: &mut Graph<'_, T>, iou: Var, mask: Var, ips: Option<Var>) -> Result<Var> {
    let mask = match ips {
        Some(ips) => {
            if g.shape(ips) != g.shape(mask) {
                return Err(shape_err(
                    "compose_pattern_tokens",
                    format!("shift tokens {:?} vs mask tokens {:?}", g.shape(ips), g.shape(mask)),
                ));
            }
            g.add(mask, ips)?
        }
        None => mask,
    };
    g.concat(&[iou, mask], Axis::Rows)
}

fn manifest_names(variant: IpsVariant) -> Vec<String> {
    match variant {
        IpsVariant::None => Vec::new(),
        IpsVariant::MaskTokens => vec![MASK_TOKENS.into()],
        IpsVariant::IpsOnly => vec![IPS_TOKENS.into()],
        IpsVariant::IpsPae => [PAE_FC1, PAE_FC2]
            .iter()
            .flat_map(|l| [format!("{l}.weight"), format!("{l}.bias")])
            .collect(),
    }
}

/// Trainable tensors of a variant as `(name, shape)`.
pub fn manifest(variant: IpsVariant, cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.decoder_dim;
    let n = cfg.n_ips_tokens;
    let h = cfg.pae_hidden_width();
    let shapes: Vec<Vec<usize>> = match variant {
        IpsVariant::None => Vec::new(),
        IpsVariant::MaskTokens => vec![vec![cfg.n_mask_tokens, d]],
        IpsVariant::IpsOnly => vec![vec![n, d]],
        IpsVariant::IpsPae => vec![vec![d, h], vec![h], vec![h, n * d], vec![n * d]],
    };
    manifest_names(variant).into_iter().zip(shapes).collect()
}

/// Exact trainable-parameter count of a variant.
pub fn trainable_params(variant: IpsVariant, cfg: &ModelConfig) -> usize {
    manifest(variant, cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Hidden width whose generated-token FFN count is closest to `target`.
pub fn solve_pae_hidden(cfg: &ModelConfig, target: usize) -> usize {
    let d = cfg.decoder_dim;
    let nd = cfg.n_ips_tokens * d;
    let per_unit = d + 1 + nd;
    let h = libm::round(target.saturating_sub(nd) as f64 / per_unit as f64) as usize;
    h.max(1)
}

/// Trainable-parameter budget of the generated-token variant at full scale.
pub const PAE_PARAM_TARGET: usize = 1_290_000;

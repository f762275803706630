//! Auto-prompting: predict point prompts from frozen encoder features.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::TAU;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, ParamId, ParamStore, Real, Var};
use crate::data::{Label, PointPrompt, PromptSetting};
use crate::error::{shape_err, Error, Result};
use crate::model::nn::{Attention, Conv, Init, LayerNorm, Linear, ParamBuilder};
use crate::model::ModelConfig;

pub const STRIDES: [usize; 4] = [1, 2, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ApmVariant {
    /// Residual convolution stack over channel-stacked encoder levels.
    Conv,
    /// Learned queries cross-attending to summed encoder levels.
    Cross,
}

impl ApmVariant {
    pub fn name(self) -> &'static str {
        match self {
            ApmVariant::Conv => "conv",
            ApmVariant::Cross => "cross",
        }
    }
}

impl fmt::Display for ApmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ApmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(ApmVariant::Conv),
            "cross" => Ok(ApmVariant::Cross),
            _ => Err(Error::Config(format!("unknown apm variant {s:?} (expected conv or cross)"))),
        }
    }
}

impl Serialize for ApmVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ApmVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
    stride: usize,
}

impl ResBlock {
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x, self.stride, 1)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h, 1, 1)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, x, self.stride, 0)?,
            None => x,
        };
        let y = g.add(h, s)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
enum Head {
    Conv {
        blocks: Vec<ResBlock>,
        fc: Linear,
    },
    Cross {
        queries: ParamId,
        attn: Attention,
        norm: LayerNorm,
        fc: Linear,
        slot_bias: ParamId,
    },
}

/// Trained prompt predictor for one prompt setting.
#[derive(Clone, Debug)]
pub struct AutoPrompter {
    pub variant: ApmVariant,
    pub setting: PromptSetting,
    head: Head,
    cfg: ModelConfig,
}

fn logit(p: f64) -> f32 {
    libm::log(p / (1.0 - p)) as f32
}

/// Starting layout in logit space: positives clustered at the center,
/// negatives on a ring near the border.
fn initial_layout(setting: PromptSetting) -> Vec<f32> {
    let mut v = Vec::with_capacity(setting.total() * 2);
    let ring = |n: usize, r: f64, phase: f64, v: &mut Vec<f32>| {
        for i in 0..n {
            let a = phase + TAU * i as f64 / n as f64;
            let rr = if n == 1 { 0.0 } else { r };
            v.push(logit(0.5 + rr * libm::cos(a)));
            v.push(logit(0.5 + rr * libm::sin(a)));
        }
    };
    ring(setting.n_pos(), 0.08, 0.0, &mut v);
    ring(setting.n_neg(), 0.4, 0.3, &mut v);
    v
}

impl AutoPrompter {
    /// Register fresh APM weights and mark them trainable.
    pub fn attach(
        store: &mut ParamStore<f32>,
        cfg: &ModelConfig,
        variant: ApmVariant,
        setting: PromptSetting,
        seed: u64,
    ) -> Result<Self> {
        let apm = Self::build(&mut ParamBuilder::init(store, seed ^ 0xa9a), cfg, variant, setting)?;
        for (_, name, _) in apm_names(store) {
            let id = store.id(&name)?;
            store.set_trainable(id, true);
        }
        Ok(apm)
    }

    /// Attach to APM weights already in `store`, if any.
    pub fn bind(store: &mut ParamStore<f32>, cfg: &ModelConfig) -> Result<Option<Self>> {
        let (variant, total) = if let Ok(id) = store.id("apm.conv.fc.bias") {
            (ApmVariant::Conv, store.get(id).numel() / 2)
        } else if let Ok(id) = store.id("apm.cross.slot_bias") {
            (ApmVariant::Cross, store.get(id).shape()[0])
        } else {
            return Ok(None);
        };
        let setting = PromptSetting::from_total(total)
            .ok_or_else(|| Error::Config(format!("apm head predicts {total} points, not a known setting")))?;
        Self::build(&mut ParamBuilder::bind(store), cfg, variant, setting).map(Some)
    }

    fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig, variant: ApmVariant, setting: PromptSetting) -> Result<Self> {
        let c = cfg.encoder_dim;
        let total = setting.total();
        let head = match variant {
            ApmVariant::Conv => {
                let mut cin = cfg.encoder_layers * c;
                let mut blocks = Vec::with_capacity(STRIDES.len());
                for (i, &stride) in STRIDES.iter().enumerate() {
                    let p = format!("apm.conv.blocks.{i}");
                    blocks.push(ResBlock {
                        conv1: b.conv(&format!("{p}.conv1"), 3, cin, c)?,
                        conv2: b.conv(&format!("{p}.conv2"), 3, c, c)?,
                        skip: if stride != 1 || cin != c {
                            Some(b.conv(&format!("{p}.skip"), 1, cin, c)?)
                        } else {
                            None
                        },
                        stride,
                    });
                    cin = c;
                }
                let fc = b.linear_init(
                    "apm.conv.fc",
                    c,
                    total * 2,
                    Init::Uniform(0.01),
                    Init::Values(initial_layout(setting)),
                )?;
                Head::Conv { blocks, fc }
            }
            ApmVariant::Cross => Head::Cross {
                queries: b.tensor("apm.cross.queries", &[total, c], Init::Uniform(1.0))?,
                attn: b.attention("apm.cross.attn", c, c, cfg.encoder_heads)?,
                norm: b.layer_norm("apm.cross.norm", c)?,
                fc: b.linear_init("apm.cross.fc", c, 2, Init::Uniform(0.01), Init::Zeros)?,
                slot_bias: b.tensor("apm.cross.slot_bias", &[total, 2], Init::Values(initial_layout(setting)))?,
            },
        };
        Ok(Self {
            variant,
            setting,
            head,
            cfg: *cfg,
        })
    }

    /// Predicted coordinates `[total, 2]` in `(0, 1)`; the first `n_pos`
    /// rows are positive prompts, the rest negative.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, levels: &[Var]) -> Result<Var> {
        let gs = self.cfg.grid_size();
        let c = self.cfg.encoder_dim;
        if levels.len() != self.cfg.encoder_layers {
            return Err(shape_err(
                "apm_forward",
                format!("{} levels, expected {}", levels.len(), self.cfg.encoder_layers),
            ));
        }
        for &l in levels {
            if g.shape(l) != [gs, gs, c] {
                return Err(shape_err("apm_forward", format!("level {:?}", g.shape(l))));
            }
        }
        let total = self.setting.total();
        let flat = levels
            .iter()
            .map(|&l| g.reshape(l, &[gs * gs, c]))
            .collect::<Result<Vec<_>>>()?;
        let raw = match &self.head {
            Head::Conv { blocks, fc } => {
                let stacked = if flat.len() == 1 { flat[0] } else { g.concat(&flat, Axis::Cols)? };
                let mut x = g.reshape(stacked, &[gs, gs, flat.len() * c])?;
                for blk in blocks {
                    x = blk.forward(g, x)?;
                }
                let pooled = g.global_avg_pool(x)?;
                let pooled = g.reshape(pooled, &[1, c])?;
                let out = fc.forward(g, pooled)?;
                g.reshape(out, &[total, 2])?
            }
            Head::Cross {
                queries,
                attn,
                norm,
                fc,
                slot_bias,
            } => {
                let mut keys = flat[0];
                for &l in &flat[1..] {
                    keys = g.add(keys, l)?;
                }
                let q = g.param(*queries);
                let a = attn.forward(g, q, keys, keys)?;
                let x = g.add(q, a)?;
                let x = norm.forward(g, x)?;
                let out = fc.forward(g, x)?;
                let sb = g.param(*slot_bias);
                g.add(out, sb)?
            }
        };
        Ok(g.sigmoid(raw))
    }

    /// Forward for a requested setting, which must match the trained head.
    pub fn forward_for<T: Real>(&self, g: &mut Graph<'_, T>, levels: &[Var], setting: PromptSetting) -> Result<Var> {
        if setting != self.setting {
            return Err(Error::Config(format!(
                "apm head was built for {}, requested {setting}",
                self.setting
            )));
        }
        self.forward(g, levels)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.setting.labels()
    }

    /// Turn evaluated coordinates into labeled point prompts.
    pub fn to_points<T: Real>(&self, coords: &[T]) -> Vec<PointPrompt> {
        coords
            .chunks_exact(2)
            .zip(self.labels())
            .map(|(xy, label)| PointPrompt {
                x: xy[0].as_f64() as f32,
                y: xy[1].as_f64() as f32,
                label,
            })
            .collect()
    }
}

fn apm_names(store: &ParamStore<f32>) -> Vec<(ParamId, String, usize)> {
    store
        .iter()
        .filter(|(_, n, _)| n.starts_with("apm."))
        .map(|(id, n, t)| (id, n.into(), t.numel()))
        .collect()
}

/// Exact APM parameter count for a variant and setting.
pub fn apm_param_count(variant: Option<ApmVariant>, cfg: &ModelConfig, setting: PromptSetting) -> usize {
    let c = cfg.encoder_dim;
    let total = setting.total();
    let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
    let lin = |i: usize, o: usize| i * o + o;
    match variant {
        None => 0,
        Some(ApmVariant::Conv) => {
            let mut cin = cfg.encoder_layers * c;
            let mut n = 0;
            for &s in &STRIDES {
                n += conv(3, cin, c) + conv(3, c, c);
                if s != 1 || cin != c {
                    n += conv(1, cin, c);
                }
                cin = c;
            }
            n + lin(c, total * 2)
        }
        Some(ApmVariant::Cross) => total * c + 4 * lin(c, c) + 2 * c + lin(c, 2) + total * 2,
    }
}

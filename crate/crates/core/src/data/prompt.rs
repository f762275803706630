use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// Row of the label-embedding table.
    pub fn row(self) -> usize {
        match self {
            Label::Positive => 0,
            Label::Negative => 1,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }

    pub fn from_sign(s: i64) -> Result<Self> {
        match s {
            1 => Ok(Label::Positive),
            -1 => Ok(Label::Negative),
            other => Err(Error::Prompt(format!("label must be 1 or -1, got {other}"))),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.sign())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_sign(v).map_err(serde::de::Error::custom)
    }
}

/// Point prompt in normalized image coordinates (`x` rightward, `y` downward).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f32,
    pub y: f32,
    pub label: Label,
}

impl PointPrompt {
    pub fn new(x: f32, y: f32, label: Label) -> Result<Self> {
        let p = Self { x, y, label };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.x) || !(0.0..=1.0).contains(&self.y) {
            return Err(Error::Prompt(format!("point ({}, {}) outside [0, 1]", self.x, self.y)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptSetting {
    P3,
    P5,
    P16,
}

impl PromptSetting {
    pub const ALL: [PromptSetting; 3] = [PromptSetting::P3, PromptSetting::P5, PromptSetting::P16];

    pub fn n_pos(self) -> usize {
        match self {
            PromptSetting::P3 => 1,
            PromptSetting::P5 => 2,
            PromptSetting::P16 => 8,
        }
    }

    pub fn n_neg(self) -> usize {
        match self {
            PromptSetting::P3 => 2,
            PromptSetting::P5 => 3,
            PromptSetting::P16 => 8,
        }
    }

    pub fn total(self) -> usize {
        self.n_pos() + self.n_neg()
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptSetting::P3 => "3P",
            PromptSetting::P5 => "5P",
            PromptSetting::P16 => "16P",
        }
    }

    pub fn from_total(total: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.total() == total)
    }

    /// Slot labels: `n_pos` positives followed by `n_neg` negatives.
    pub fn labels(self) -> Vec<Label> {
        let mut v = Vec::with_capacity(self.total());
        v.resize(self.n_pos(), Label::Positive);
        v.resize(self.total(), Label::Negative);
        v
    }
}

impl fmt::Display for PromptSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown prompt setting {s:?} (expected 3P, 5P or 16P)")))
    }
}

impl Serialize for PromptSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for PromptSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Sample `n_pos` foreground and `n_neg` background pixel centers without
/// replacement from a row-major `width x height` mask (nonzero = foreground).
pub fn sample_gt_points(
    mask: &[u8],
    width: usize,
    height: usize,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<Vec<PointPrompt>> {
    if mask.len() != width * height {
        return Err(Error::Input(format!("mask has {} pixels, expected {width}x{height}", mask.len())));
    }
    let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] != 0).collect();
    let bg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 0).collect();
    for (kind, needed, pool) in [("foreground", n_pos, &fg), ("background", n_neg, &bg)] {
        if pool.len() < needed {
            return Err(Error::InsufficientPixels {
                kind,
                needed,
                available: pool.len(),
            });
        }
    }
    let mut r = rng::stream(&[seed, 0x9e7]);
    let mut out = Vec::with_capacity(n_pos + n_neg);
    for (pool, n, label) in [(&fg, n_pos, Label::Positive), (&bg, n_neg, Label::Negative)] {
        for k in index::sample(&mut r, pool.len(), n) {
            let p = pool[k];
            out.push(PointPrompt {
                x: ((p % width) as f32 + 0.5) / width as f32,
                y: ((p / width) as f32 + 0.5) / height as f32,
                label,
            });
        }
    }
    Ok(out)
}

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Pixel counts of a binarized prediction against a binary mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl Overlap {
    pub fn union(&self) -> u64 {
        self.predicted + self.truth - self.intersection
    }

    /// Dice as an exact ratio `(numerator, denominator)`.
    pub fn dice_ratio(&self) -> (u64, u64) {
        if self.predicted + self.truth == 0 {
            (1, 1)
        } else {
            (2 * self.intersection, self.predicted + self.truth)
        }
    }

    /// IoU as an exact ratio `(numerator, denominator)`.
    pub fn iou_ratio(&self) -> (u64, u64) {
        if self.union() == 0 {
            (1, 1)
        } else {
            (self.intersection, self.union())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
}

/// Binarize at 0.5 and count.
pub fn overlap(pred: &[f32], gt: &[u8]) -> Result<Overlap> {
    if pred.len() != gt.len() {
        return Err(shape_err("compute_metrics", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    let mut o = Overlap::default();
    for (&p, &g) in pred.iter().zip(gt) {
        let p = p >= 0.5;
        let g = g != 0;
        o.intersection += (p && g) as u64;
        o.predicted += p as u64;
        o.truth += g as u64;
    }
    Ok(o)
}

/// Dice and IoU of the prediction binarized at 0.5 (both 1 when prediction
/// and mask are empty) and MAE of the probability map.
pub fn compute_metrics(pred: &[f32], gt: &[u8]) -> Result<Metrics> {
    let o = overlap(pred, gt)?;
    let (dn, dd) = o.dice_ratio();
    let (inum, iden) = o.iou_ratio();
    let mae = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p as f64 - if g != 0 { 1.0 } else { 0.0 }).abs())
        .sum::<f64>()
        / pred.len().max(1) as f64;
    Ok(Metrics {
        dice: dn as f64 / dd as f64,
        iou: inum as f64 / iden as f64,
        mae,
    })
}

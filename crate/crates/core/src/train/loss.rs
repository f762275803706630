use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Real, Var};
use crate::error::{shape_err, Error, Result};

pub const DICE_EPS: f64 = 1.0;

/// Soft Dice loss plus mean binary cross-entropy on logits, weighted 1:1.
///
/// `logits` holds one value per pixel (any shape), `gt` the matching binary
/// mask.
pub fn seg_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, gt: &[u8]) -> Result<Var> {
    let n = g.value(logits).len();
    if n != gt.len() {
        return Err(shape_err("seg_loss", format!("{n} logits vs {} mask pixels", gt.len())));
    }
    if g.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("seg_loss logits".into()));
    }
    let shape = g.shape(logits).to_vec();
    let target: Vec<T> = gt.iter().map(|&m| if m != 0 { T::one() } else { T::zero() }).collect();
    let gsum = target.iter().fold(T::zero(), |a, &b| a + b);
    let target = g.constant(&shape, target)?;

    let p = g.sigmoid(logits);
    let pg = g.mul(p, target)?;
    let inter = g.sum(pg);
    let psum = g.sum(p);
    let eps = g.constant(&[1], alloc::vec![T::c(DICE_EPS)])?;
    let num = g.scale(inter, 2.0);
    let num = g.add(num, eps)?;
    let den = g.constant(&[1], alloc::vec![gsum + T::c(DICE_EPS)])?;
    let den = g.add(psum, den)?;
    let ratio = g.div(num, den)?;
    let one = g.constant(&[1], alloc::vec![T::one()])?;
    let dice = g.sub(one, ratio)?;

    let sp = g.softplus(logits);
    let xg = g.mul(logits, target)?;
    let bce = g.sub(sp, xg)?;
    let bce = g.mean(bce);
    g.add(dice, bce)
}

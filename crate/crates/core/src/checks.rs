//! Finite-difference verification of every differentiable operation and of
//! the composite graphs the adaptation paths train through.
//!
//! All checks run in `f64` on small random shapes.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::apm::{ApmVariant, AutoPrompter};
use crate::autodiff::{finite_difference_check, Axis, Graph, ParamStore, Tensor, Var};
use crate::data::{Label, PromptSetting};
use crate::error::Result;
use crate::model::{MiniSam, ModelConfig};
use crate::pattern::{compose_pattern_tokens, IpsVariant, PatternShift, PAE_FC2};
use crate::rng::{self, ChaCha8Rng};
use crate::train::seg_loss;

/// Pass threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Central-difference step.
pub const FD_EPS: f64 = 1e-4;
/// Random shapes drawn per operation.
pub const CASES_PER_OP: usize = 10;

/// Every differentiable operation of the engine.
pub const OPS: [&str; 24] = [
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_row",
    "matmul",
    "conv2d",
    "resize_bilinear",
    "reshape",
    "transpose",
    "concat",
    "slice",
    "softmax",
    "layer_norm",
    "relu",
    "gelu",
    "sigmoid",
    "softplus",
    "sin",
    "cos",
    "global_avg_pool",
    "mean",
    "sum",
];

/// Composite graphs checked end to end.
pub const COMPOSITES: [&str; 3] = ["decoder", "pae", "apm_cross"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, cases: usize, err: f64) -> Self {
        Self {
            name: name.to_string(),
            cases,
            max_rel_error: err,
            passed: err < GRAD_TOLERANCE,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).expect("generated shapes are consistent")
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    tensor(shape, uniform(rng, n, -1.0, 1.0))
}

/// Reduce `y` to a scalar with fixed random weights so every output element
/// contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n = shape.iter().product();
    let w = uniform(&mut rng::stream(&[seed, 0x5e1]), n, -1.0, 1.0);
    let w = g.constant(&shape, w)?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[derive(Clone, Copy)]
struct Knobs {
    ta: bool,
    tb: bool,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    axis: Axis,
    start: usize,
    len: usize,
    factor: f64,
}

fn check_op_case(op: &str, seed: u64, case: u64) -> Result<f64> {
    let mut r = rng::stream(&[seed, rng::hash_str(op), case]);
    let rows = r.random_range(1..=4usize);
    let cols = r.random_range(2..=5usize);
    let mut k = Knobs {
        ta: r.random_bool(0.5),
        tb: r.random_bool(0.5),
        stride: r.random_range(1..=2),
        pad: r.random_range(0..=1),
        out_h: r.random_range(1..=7),
        out_w: r.random_range(1..=7),
        axis: if r.random_bool(0.5) { Axis::Rows } else { Axis::Cols },
        start: 0,
        len: 1,
        factor: r.random_range(-2.0..2.0),
    };
    let inputs: Vec<Tensor<f64>> = match op {
        "add" | "sub" | "mul" => vec![rand_tensor(&mut r, &[rows, cols]), rand_tensor(&mut r, &[rows, cols])],
        "div" => vec![
            rand_tensor(&mut r, &[rows, cols]),
            tensor(&[rows, cols], away_from_zero(&mut r, rows * cols, 0.5, 1.5)),
        ],
        "add_row" => vec![rand_tensor(&mut r, &[rows, cols]), rand_tensor(&mut r, &[cols])],
        "matmul" => {
            let inner = r.random_range(1..=4);
            let a = if k.ta { [inner, rows] } else { [rows, inner] };
            let b = if k.tb { [cols, inner] } else { [inner, cols] };
            vec![rand_tensor(&mut r, &a), rand_tensor(&mut r, &b)]
        }
        "conv2d" => {
            let ks = if r.random_bool(0.5) { 1 } else { 3 };
            let h = r.random_range(ks..=6);
            let w = r.random_range(ks..=6);
            let c = r.random_range(1..=3);
            let o = r.random_range(1..=3);
            vec![rand_tensor(&mut r, &[h, w, c]), rand_tensor(&mut r, &[ks, ks, c, o])]
        }
        "resize_bilinear" | "global_avg_pool" => {
            let h = r.random_range(1..=5);
            let w = r.random_range(1..=5);
            let c = r.random_range(1..=3);
            vec![rand_tensor(&mut r, &[h, w, c])]
        }
        "concat" => {
            let other = r.random_range(1..=3);
            let b = match k.axis {
                Axis::Rows => [other, cols],
                Axis::Cols => [rows, other],
            };
            vec![rand_tensor(&mut r, &[rows, cols]), rand_tensor(&mut r, &b)]
        }
        "slice" => {
            let n = match k.axis {
                Axis::Rows => rows,
                Axis::Cols => cols,
            };
            k.start = r.random_range(0..n);
            k.len = r.random_range(1..=n - k.start);
            vec![rand_tensor(&mut r, &[rows, cols])]
        }
        "layer_norm" => vec![
            tensor(&[rows, cols], uniform(&mut r, rows * cols, -2.0, 2.0)),
            rand_tensor(&mut r, &[cols]),
            rand_tensor(&mut r, &[cols]),
        ],
        "relu" => vec![tensor(&[rows, cols], away_from_zero(&mut r, rows * cols, 0.05, 1.0))],
        "softmax" | "gelu" | "sigmoid" | "softplus" => {
            vec![tensor(&[rows, cols], uniform(&mut r, rows * cols, -3.0, 3.0))]
        }
        _ => vec![rand_tensor(&mut r, &[rows, cols])],
    };
    let wseed = rng::derive(&[seed, case, 0x77]);
    let store = ParamStore::<f64>::new();
    let op = op.to_string();
    finite_difference_check(
        &store,
        &inputs,
        move |g, v| {
            let y = apply_op(g, &op, v, k)?;
            weighted_sum(g, y, wseed)
        },
        FD_EPS,
    )
}

fn apply_op(g: &mut Graph<'_, f64>, op: &str, v: &[Var], k: Knobs) -> Result<Var> {
    Ok(match op {
        "add" => g.add(v[0], v[1])?,
        "sub" => g.sub(v[0], v[1])?,
        "mul" => g.mul(v[0], v[1])?,
        "div" => g.div(v[0], v[1])?,
        "scale" => g.scale(v[0], k.factor),
        "add_row" => g.add_row(v[0], v[1])?,
        "matmul" => g.matmul_t(v[0], v[1], k.ta, k.tb)?,
        "conv2d" => g.conv2d(v[0], v[1], k.stride, k.pad)?,
        "resize_bilinear" => g.resize_bilinear(v[0], k.out_h, k.out_w)?,
        "reshape" => {
            let n: usize = g.shape(v[0]).iter().product();
            g.reshape(v[0], &[n])?
        }
        "transpose" => g.transpose(v[0])?,
        "concat" => g.concat(&[v[0], v[1]], k.axis)?,
        "slice" => g.slice(v[0], k.axis, k.start, k.len)?,
        "softmax" => g.softmax(v[0]),
        "layer_norm" => g.layer_norm(v[0], v[1], v[2])?,
        "relu" => g.relu(v[0]),
        "gelu" => g.gelu(v[0]),
        "sigmoid" => g.sigmoid(v[0]),
        "softplus" => g.softplus(v[0]),
        "sin" => g.sin(v[0]),
        "cos" => g.cos(v[0]),
        "global_avg_pool" => g.global_avg_pool(v[0])?,
        "mean" => g.mean(v[0]),
        "sum" => g.sum(v[0]),
        other => unreachable!("unknown op {other}"),
    })
}

/// Check one operation over [`CASES_PER_OP`] random shapes.
pub fn check_op(op: &str, seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for case in 0..CASES_PER_OP as u64 {
        worst = worst.max(check_op_case(op, seed, case)?);
    }
    Ok(CheckResult::new(op, CASES_PER_OP, worst))
}

fn random_mask(r: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| r.random_bool(0.3) as u8).collect()
}

fn tiny_base(seed: u64) -> Result<(ModelConfig, ParamStore<f32>, MiniSam)> {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let model = MiniSam::init(&mut store, &cfg, seed)?;
    store.freeze_all();
    Ok((cfg, store, model))
}

/// Decoder with every decoder weight trainable, image embedding and point
/// coordinates as inputs.
fn check_decoder(seed: u64) -> Result<f64> {
    let (cfg, mut store, model) = tiny_base(seed)?;
    store.freeze_prefix("decoder.", false);
    let store = store.cast::<f64>();
    let mut r = rng::stream(&[seed, 0xdec]);
    let gs = cfg.grid_size();
    let grid = rand_tensor(&mut r, &[gs, gs, cfg.decoder_dim]);
    let coords = tensor(&[3, 2], uniform(&mut r, 6, 0.1, 0.9));
    let labels = [Label::Positive, Label::Positive, Label::Negative];
    let gt = random_mask(&mut r, cfg.image_size * cfg.image_size);
    finite_difference_check(
        &store,
        &[grid, coords],
        |g, v| {
            let prompts = model.prompt.encode(g, v[1], &labels)?;
            let pe = model.prompt.image_pe(g)?;
            let dense = model.prompt.no_mask(g);
            let iou = g.param(model.decoder.iou_token);
            let mask = g.param(model.decoder.mask_tokens);
            let pattern = compose_pattern_tokens(g, iou, mask, None)?;
            let out = model.decoder.forward(g, v[0], pe, dense, pattern, prompts)?;
            let l = seg_loss(g, out.primary, &gt)?;
            let iou = weighted_sum(g, out.iou, seed)?;
            g.add(l, iou)
        },
        FD_EPS,
    )
}

/// Generated shift tokens through the frozen decoder into the loss.
fn check_pae(seed: u64) -> Result<f64> {
    let (cfg, mut store, model) = tiny_base(seed)?;
    let shift = PatternShift::attach(&mut store, &cfg, IpsVariant::IpsPae, seed)?;
    let mut r = rng::stream(&[seed, 0x9ae]);
    for suffix in [".weight", ".bias"] {
        let id = store.id(&[PAE_FC2, suffix].concat())?;
        for v in store.get_mut(id).data_mut() {
            *v = r.random_range(-0.3..0.3);
        }
    }
    let store = store.cast::<f64>();
    let gs = cfg.grid_size();
    let grid = rand_tensor(&mut r, &[gs, gs, cfg.decoder_dim]);
    let pts = uniform(&mut r, 4, 0.1, 0.9);
    let gt = random_mask(&mut r, cfg.image_size * cfg.image_size);
    finite_difference_check(
        &store,
        &[grid],
        |g, v| {
            let pattern = shift.pattern_tokens(g, &model, v[0], true)?;
            let coords = g.constant(&[2, 2], pts.clone())?;
            let prompts = model.prompt.encode(g, coords, &[Label::Positive, Label::Negative])?;
            let pe = model.prompt.image_pe(g)?;
            let dense = model.prompt.no_mask(g);
            let out = model.decoder.forward(g, v[0], pe, dense, pattern, prompts)?;
            seg_loss(g, out.primary, &gt)
        },
        FD_EPS,
    )
}

/// Cross-attention prompt head: encoder levels to coordinates, through the
/// prompt encoder and frozen decoder into the loss.
fn check_apm_cross(seed: u64) -> Result<f64> {
    let (cfg, mut store, model) = tiny_base(seed)?;
    let apm = AutoPrompter::attach(&mut store, &cfg, ApmVariant::Cross, PromptSetting::P3, seed)?;
    let store = store.cast::<f64>();
    let mut r = rng::stream(&[seed, 0xa9c]);
    let gs = cfg.grid_size();
    let mut inputs = vec![rand_tensor(&mut r, &[gs, gs, cfg.decoder_dim])];
    for _ in 0..cfg.encoder_layers {
        inputs.push(rand_tensor(&mut r, &[gs, gs, cfg.encoder_dim]));
    }
    let gt = random_mask(&mut r, cfg.image_size * cfg.image_size);
    let labels = apm.labels();
    finite_difference_check(
        &store,
        &inputs,
        |g, v| {
            let coords = apm.forward(g, &v[1..])?;
            let prompts = model.prompt.encode(g, coords, &labels)?;
            let pe = model.prompt.image_pe(g)?;
            let dense = model.prompt.no_mask(g);
            let iou = g.param(model.decoder.iou_token);
            let mask = g.param(model.decoder.mask_tokens);
            let pattern = compose_pattern_tokens(g, iou, mask, None)?;
            let out = model.decoder.forward(g, v[0], pe, dense, pattern, prompts)?;
            seg_loss(g, out.primary, &gt)
        },
        FD_EPS,
    )
}

/// Check one composite graph by name.
pub fn check_composite(name: &str, seed: u64) -> Result<CheckResult> {
    let err = match name {
        "decoder" => check_decoder(seed)?,
        "pae" => check_pae(seed)?,
        "apm_cross" => check_apm_cross(seed)?,
        other => return Err(crate::Error::Input(alloc::format!("unknown composite `{other}`"))),
    };
    Ok(CheckResult::new(name, 1, err))
}

/// Every operation followed by every composite.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::with_capacity(OPS.len() + COMPOSITES.len());
    for op in OPS {
        out.push(check_op(op, seed)?);
    }
    for c in COMPOSITES {
        out.push(check_composite(c, seed)?);
    }
    Ok(out)
}

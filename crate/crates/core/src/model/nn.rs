//! Parameter registration and the small layer vocabulary shared by every
//! network in the crate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Axis, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::rng::{self, ChaCha8Rng};

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-b, b]`.
    Uniform(f32),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    /// Explicit values.
    Values(Vec<f32>),
}

/// Either registers freshly initialized tensors or binds to tensors that
/// already exist in the store (loaded checkpoints). Both paths verify shapes.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: Option<ChaCha8Rng>,
}

impl<'a> ParamBuilder<'a> {
    pub fn init(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Self {
            store,
            rng: Some(rng::stream(&[seed, 0x1417])),
        }
    }

    pub fn bind(store: &'a mut ParamStore<f32>) -> Self {
        Self { store, rng: None }
    }

    pub fn is_init(&self) -> bool {
        self.rng.is_some()
    }

    pub fn store(&mut self) -> &mut ParamStore<f32> {
        self.store
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let Some(rng) = self.rng.as_mut() else {
            let id = self.store.id(name)?;
            if self.store.get(id).shape() != shape {
                return Err(shape_err(
                    "bind",
                    format!("{name}: expected {shape:?}, found {:?}", self.store.get(id).shape()),
                ));
            }
            return Ok(id);
        };
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::FanIn(fan) => {
                let b = 1.0 / libm::sqrtf(fan as f32);
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(shape_err("init", format!("{name}: {} values for {n}", v.len())));
                }
                v
            }
        };
        self.store.insert(name, Tensor::new(shape, data)?)
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.tensor(&format!("{name}.weight"), &[inp, out], Init::FanIn(inp))?,
            b: self.tensor(&format!("{name}.bias"), &[out], Init::FanIn(inp))?,
        })
    }

    pub fn linear_init(&mut self, name: &str, inp: usize, out: usize, w: Init, b: Init) -> Result<Linear> {
        Ok(Linear {
            w: self.tensor(&format!("{name}.weight"), &[inp, out], w)?,
            b: self.tensor(&format!("{name}.bias"), &[out], b)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, n: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.tensor(&format!("{name}.weight"), &[n], Init::Ones)?,
            beta: self.tensor(&format!("{name}.bias"), &[n], Init::Zeros)?,
        })
    }

    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<Conv> {
        let fan = k * k * cin;
        Ok(Conv {
            w: self.tensor(&format!("{name}.weight"), &[k, k, cin, cout], Init::FanIn(fan))?,
            b: self.tensor(&format!("{name}.bias"), &[cout], Init::FanIn(fan))?,
        })
    }

    pub fn attention(&mut self, name: &str, dim: usize, inner: usize, heads: usize) -> Result<Attention> {
        if !inner.is_multiple_of(heads) {
            return Err(shape_err("attention", format!("{name}: inner {inner} not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: self.linear(&format!("{name}.q_proj"), dim, inner)?,
            k: self.linear(&format!("{name}.k_proj"), dim, inner)?,
            v: self.linear(&format!("{name}.v_proj"), dim, inner)?,
            out: self.linear(&format!("{name}.out_proj"), inner, dim)?,
            heads,
        })
    }

    /// MLP with `dims.len() - 1` affine layers.
    pub fn mlp(&mut self, name: &str, dims: &[usize], act: Activation) -> Result<Mlp> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.linear(&format!("{name}.layers.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, act })
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Convolution over HxWxC maps with a `[k, k, C, O]` kernel plus bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.conv2d(x, w, stride, pad)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last {
                x = self.act.apply(g, x);
            }
        }
        Ok(x)
    }
}

/// Multi-head attention with separate query/key/value projections into an
/// inner width, and an output projection back to the model width.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
        let q = self.q.forward(g, q)?;
        let k = self.k.forward(g, k)?;
        let v = self.v.forward(g, v)?;
        let inner = g.shape(q)[1];
        let dh = inner / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, Axis::Cols, h * dh, dh)?,
                    g.slice(k, Axis::Cols, h * dh, dh)?,
                    g.slice(v, Axis::Cols, h * dh, dh)?,
                )
            };
            let scores = g.matmul_t(qh, kh, false, true)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores);
            outs.push(g.matmul(probs, vh)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, Axis::Cols)?
        };
        self.out.forward(g, o)
    }
}

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, View, ViewMut};
use super::{ParamId, ParamStore, Real};
use crate::error::{shape_err, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

/// Axis selector for 2-D concat and slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// The closed set of differentiable operations. Every variant has an adjoint
/// in `backward.rs`.
#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Resize(Var),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>, Axis),
    Slice {
        x: Var,
        axis: Axis,
        start: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sin(Var),
    Cos(Var),
    GlobalAvgPool(Var),
    Mean(Var),
    Sum(Var),
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize(_) => "resize_bilinear",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
        }
    }
}

pub(crate) struct Node<T> {
    pub op: Op<T>,
    pub shape: Vec<usize>,
    /// Empty for parameter nodes, whose values live in the store.
    pub value: Vec<T>,
    /// Saved forward state (im2col buffer, normalized activations, ...).
    pub aux: Vec<T>,
    pub needs_grad: bool,
}

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Parameter nodes borrow their values from the store, so building a graph
/// never copies weights. Graphs are single-writer; independent graphs over
/// the same store may run on different threads.
pub struct Graph<'s, T: Real = f32> {
    pub(crate) store: &'s ParamStore<T>,
    pub(crate) nodes: Vec<Node<T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(shape_err(op, format!("expected rank-2 tensor, got {shape:?}"))),
    }
}

fn dims3(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(shape_err(op, format!("expected HxWxC tensor, got {shape:?}"))),
    }
}

/// Per-output-index interpolation taps for half-pixel bilinear resize.
pub(crate) fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    x * T::c(0.5) * (T::one() + (x * T::c(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::c(0.5)).exp() * T::c(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// im2col for an HxWxC map: rows are output pixels, columns `(ky, kx, c)`.
pub(crate) fn im2col<T: Real>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let kc = k * k * c;
    let mut cols = vec![T::zero(); oh * ow * kc];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * kc..(oy * ow + ox + 1) * kc];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.get(id).data(),
            _ => &node.value,
        }
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>, aux: Vec<T>) -> Var {
        let needs_grad = match &op {
            Op::Input | Op::Param(_) => false,
            other => inputs_of(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            aux,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant or differentiable leaf.
    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() || shape.contains(&0) {
            return Err(shape_err(
                "input",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        self.nodes.push(Node {
            op: Op::Input,
            shape: shape.to_vec(),
            value: data,
            aux: Vec::new(),
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.store.get(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            shape: t.shape().to_vec(),
            value: Vec::new(),
            aux: Vec::new(),
            needs_grad: t.is_trainable(),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape, value, Vec::new()))
    }

    fn unary(&mut self, op: Op<T>, a: Var, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, value, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    /// Multiply by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::c(c);
        self.unary(Op::Scale(a, c), a, |x| x * c)
    }

    /// Add a row vector (shape `[n]` or `[1, n]`) to every last-axis slice.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&0);
        let rs = self.shape(row);
        let ok = matches!(rs, [m] if *m == n) || matches!(rs, [1, m] if *m == n);
        if !ok {
            return Err(shape_err(
                "add_row",
                format!("row {:?} does not match last axis of {:?}", rs, self.shape(a)),
            ));
        }
        let r = self.value(row);
        let value = self
            .value(a)
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::AddRow(a, row), shape, value, Vec::new()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = dims2(self.shape(a), "matmul")?;
        let (br, bc) = dims2(self.shape(b), "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!(
                    "{:?}{} x {:?}{}",
                    self.shape(a),
                    if ta { "^T" } else { "" },
                    self.shape(b),
                    if tb { "^T" } else { "" }
                ),
            ));
        }
        let mut value = vec![T::zero(); m * n];
        gemm(
            View::new(self.value(a), ar, ac).t_if(ta),
            View::new(self.value(b), br, bc).t_if(tb),
            ViewMut::new(&mut value, m, n, false),
            T::zero(),
        );
        Ok(self.push(Op::MatMul { a, b, ta, tb }, vec![m, n], value, Vec::new()))
    }

    /// 2-D convolution of an HxWxC map with a `[k, k, C, O]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, wd, c) = dims3(self.shape(x), "conv2d")?;
        let (k, k2, wc, o) = match self.shape(w) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(shape_err("conv2d", format!("kernel must be [k,k,C,O], got {s:?}"))),
        };
        if k != k2 || wc != c || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} kernel {:?} stride {stride} pad {pad}", self.shape(x), self.shape(w)),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(self.value(x), (h, wd, c), k, stride, pad, (oh, ow));
        let mut value = vec![T::zero(); oh * ow * o];
        gemm(
            View::new(&cols, oh * ow, k * k * c),
            View::new(self.value(w), k * k * c, o),
            ViewMut::new(&mut value, oh * ow, o, false),
            T::zero(),
        );
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, vec![oh, ow, o], value, cols))
    }

    /// Bilinear resize of an HxWxC map (half-pixel centers). The adjoint is
    /// the transposed interpolation.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, c) = dims3(self.shape(x), "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err("resize_bilinear", "empty output".into()));
        }
        let ty = resize_taps(h, out_h);
        let tx = resize_taps(w, out_w);
        let src = self.value(x);
        let mut value = vec![T::zero(); out_h * out_w * c];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let dst = &mut value[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wgt = T::c(wy * wx);
                        let s = &src[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wgt * v;
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::Resize(x), vec![out_h, out_w, c], value, Vec::new()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let value = self.value(a).to_vec();
        Ok(self.push(Op::Reshape(a), shape.to_vec(), value, Vec::new()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "transpose")?;
        let src = self.value(a);
        let mut value = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose(a), vec![c, r], value, Vec::new()))
    }

    /// Concatenate rank-2 tensors along rows or columns.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| dims2(self.shape(p), "concat"))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let shape = match axis {
            Axis::Rows => {
                if dims.iter().any(|&(_, c)| c != c0) {
                    return Err(shape_err("concat", format!("column mismatch {dims:?}")));
                }
                vec![dims.iter().map(|d| d.0).sum(), c0]
            }
            Axis::Cols => {
                if dims.iter().any(|&(r, _)| r != r0) {
                    return Err(shape_err("concat", format!("row mismatch {dims:?}")));
                }
                vec![r0, dims.iter().map(|d| d.1).sum()]
            }
        };
        let mut value = Vec::with_capacity(numel(&shape));
        match axis {
            Axis::Rows => {
                for &p in parts {
                    value.extend_from_slice(self.value(p));
                }
            }
            Axis::Cols => {
                for i in 0..r0 {
                    for (&p, &(_, c)) in parts.iter().zip(&dims) {
                        value.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                    }
                }
            }
        }
        Ok(self.push(Op::Concat(parts.to_vec(), axis), shape, value, Vec::new()))
    }

    /// Contiguous range `[start, start + len)` of rows or columns of a rank-2 tensor.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "slice")?;
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if len == 0 || start + len > extent {
            return Err(shape_err(
                "slice",
                format!("range {start}..{} out of {extent}", start + len),
            ));
        }
        let src = self.value(x);
        let (shape, value) = match axis {
            Axis::Rows => (vec![len, c], src[start * c..(start + len) * c].to_vec()),
            Axis::Cols => {
                let mut v = Vec::with_capacity(r * len);
                for i in 0..r {
                    v.extend_from_slice(&src[i * c + start..i * c + start + len]);
                }
                (vec![r, len], v)
            }
        };
        Ok(self.push(Op::Slice { x, axis, start }, shape, value, Vec::new()))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().expect("non-empty shape");
        let mut value = self.value(a).to_vec();
        for row in value.chunks_exact_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = T::one() / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax(a), shape, value, Vec::new())
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` (shape `[n]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("non-empty shape");
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(shape_err(
                    "layer_norm",
                    format!("affine {:?} vs last axis {n}", self.shape(p)),
                ));
            }
        }
        let src = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = src.len() / n;
        // aux: normalized activations followed by per-row inverse std
        let mut aux = vec![T::zero(); src.len() + rows];
        let mut value = vec![T::zero(); src.len()];
        let nf = T::c(n as f64);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + T::c(LN_EPS)).sqrt();
            for i in 0..n {
                let xh = (row[i] - mean) * rstd;
                aux[r * n + i] = xh;
                value[r * n + i] = xh * g[i] + b[i];
            }
            aux[src.len() + r] = rstd;
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, shape, value, aux))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu(a), a, |x| x.max(T::zero()))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Op::Gelu(a), a, gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a), a, softplus)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Op::Sin(a), a, |x| x.sin())
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Op::Cos(a), a, |x| x.cos())
    }

    /// Mean over the spatial axes of an HxWxC map, yielding `[C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = dims3(self.shape(a), "global_avg_pool")?;
        let mut value = vec![T::zero(); c];
        for px in self.value(a).chunks_exact(c) {
            for (d, &v) in value.iter_mut().zip(px) {
                *d += v;
            }
        }
        let inv = T::one() / T::c((h * w) as f64);
        for v in value.iter_mut() {
            *v *= inv;
        }
        Ok(self.push(Op::GlobalAvgPool(a), vec![c], value, Vec::new()))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::c(v.len() as f64);
        self.push(Op::Mean(a), vec![1], vec![s], Vec::new())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        self.push(Op::Sum(a), vec![1], vec![s], Vec::new())
    }
}

pub(crate) fn inputs_of<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => Vec::new(),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
        Op::Concat(parts, _) => parts.clone(),
        Op::Slice { x, .. } => vec![*x],
        Op::Scale(a, _)
        | Op::Resize(a)
        | Op::Reshape(a)
        | Op::Transpose(a)
        | Op::Softmax(a)
        | Op::Relu(a)
        | Op::Gelu(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::GlobalAvgPool(a)
        | Op::Mean(a)
        | Op::Sum(a) => vec![*a],
    }
}

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, View, ViewMut};
use super::graph::{gelu_grad, resize_taps, sigmoid, Axis, Graph, Op, Var};
use super::{ParamId, Real};
use crate::error::{Error, Result};

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Vec<T>>,
    inputs: BTreeMap<Var, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn input(&self, v: Var) -> Option<&[T]> {
        self.inputs.get(&v).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Sum parameter gradients of `other` into `self`.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(dst) => dst.iter_mut().zip(&g).for_each(|(d, v)| *d += *v),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
    }
}

type Slots<T> = Vec<Option<Vec<T>>>;

impl<T: Real> Graph<'_, T> {
    fn acc(&self, slots: &mut Slots<T>, v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let n = node.shape.iter().product();
        let slot = slots[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn acc_scaled(&self, slots: &mut Slots<T>, v: Var, g: &[T], sign: T) {
        self.acc(slots, v, |s| {
            for (d, &x) in s.iter_mut().zip(g) {
                *d += sign * x;
            }
        });
    }

    /// Reverse sweep from a scalar `loss`. Frozen parameters and constant
    /// inputs receive nothing; trainable parameters and differentiable inputs
    /// receive `d loss / d leaf`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        let mut out = Gradients::new();
        if !node.needs_grad {
            return Ok(out);
        }
        let mut slots: Slots<T> = (0..=loss.0).map(|_| None).collect();
        slots[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(dst) => dst.iter_mut().zip(&g).for_each(|(d, v)| *d += *v),
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                _ => self.backprop(i, &g, &mut slots),
            }
        }
        Ok(out)
    }

    fn backprop(&self, i: usize, g: &[T], slots: &mut Slots<T>) {
        let node = &self.nodes[i];
        let one = T::one();
        match &node.op {
            Op::Input | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::Add(a, b) => {
                self.acc_scaled(slots, *a, g, one);
                self.acc_scaled(slots, *b, g, one);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(slots, *a, g, one);
                self.acc_scaled(slots, *b, g, -one);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(slots, *a, |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                });
                self.acc(slots, *b, |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(slots, *a, |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(g).zip(vb) {
                        *d += x / y;
                    }
                });
                self.acc(slots, *b, |s| {
                    for (((d, &x), &y), &n) in s.iter_mut().zip(g).zip(vb).zip(va) {
                        *d -= x * n / (y * y);
                    }
                });
            }
            Op::Scale(a, c) => self.acc_scaled(slots, *a, g, *c),
            Op::AddRow(a, row) => {
                self.acc_scaled(slots, *a, g, one);
                let n = *node.shape.last().expect("shape");
                self.acc(slots, *row, |s| {
                    for chunk in g.chunks_exact(n) {
                        for (d, &x) in s.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                });
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (br, bc) = (self.shape(*b)[0], self.shape(*b)[1]);
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = if *ta { ar } else { ac };
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(slots, *a, |s| {
                    // d op(A) = dC * op(B)^T
                    gemm(
                        View::new(g, m, n),
                        View::new(vb, br, bc).t_if(*tb).t(),
                        ViewMut::new(s, m, k, *ta),
                        one,
                    );
                });
                self.acc(slots, *b, |s| {
                    // d op(B) = op(A)^T * dC
                    gemm(
                        View::new(va, ar, ac).t_if(*ta).t(),
                        View::new(g, m, n),
                        ViewMut::new(s, k, n, *tb),
                        one,
                    );
                });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (h, wd, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let k = self.shape(*w)[0];
                let (oh, ow, o) = (node.shape[0], node.shape[1], node.shape[2]);
                let kc = k * k * c;
                let cols = &node.aux;
                self.acc(slots, *w, |s| {
                    gemm(
                        View::new(cols, oh * ow, kc).t(),
                        View::new(g, oh * ow, o),
                        ViewMut::new(s, kc, o, false),
                        one,
                    );
                });
                let vw = self.value(*w);
                let (stride, pad) = (*stride, *pad);
                self.acc(slots, *x, |s| {
                    let mut dcols = vec![T::zero(); oh * ow * kc];
                    gemm(
                        View::new(g, oh * ow, o),
                        View::new(vw, kc, o).t(),
                        ViewMut::new(&mut dcols, oh * ow, kc, false),
                        T::zero(),
                    );
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let row = &dcols[(oy * ow + ox) * kc..(oy * ow + ox + 1) * kc];
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let dst = (iy as usize * wd + ix as usize) * c;
                                    let src = (ky * k + kx) * c;
                                    for (d, &v) in s[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                                        *d += v;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Resize(x) => {
                let (h, w, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (out_h, out_w) = (node.shape[0], node.shape[1]);
                let ty = resize_taps(h, out_h);
                let tx = resize_taps(w, out_w);
                self.acc(slots, *x, |s| {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let src = &g[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                            for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                                for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                                    let wgt = T::c(wy * wx);
                                    let dst = &mut s[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                                    for (d, &v) in dst.iter_mut().zip(src) {
                                        *d += wgt * v;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc_scaled(slots, *a, g, one),
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.acc(slots, *a, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let total_cols = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (self.shape(p)[0], self.shape(p)[1]);
                    self.acc(slots, p, |s| match axis {
                        Axis::Rows => {
                            for (d, &v) in s.iter_mut().zip(&g[offset * pc..(offset + pr) * pc]) {
                                *d += v;
                            }
                        }
                        Axis::Cols => {
                            for r in 0..pr {
                                let src = &g[r * total_cols + offset..r * total_cols + offset + pc];
                                for (d, &v) in s[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        }
                    });
                    offset += match axis {
                        Axis::Rows => pr,
                        Axis::Cols => pc,
                    };
                }
            }
            Op::Slice { x, axis, start } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (sr, sc) = (node.shape[0], node.shape[1]);
                let start = *start;
                self.acc(slots, *x, |s| match axis {
                    Axis::Rows => {
                        for (d, &v) in s[start * c..(start + sr) * c].iter_mut().zip(g) {
                            *d += v;
                        }
                    }
                    Axis::Cols => {
                        for i in 0..r {
                            let dst = &mut s[i * c + start..i * c + start + sc];
                            for (d, &v) in dst.iter_mut().zip(&g[i * sc..(i + 1) * sc]) {
                                *d += v;
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = *node.shape.last().expect("shape");
                let y = &node.value;
                self.acc(slots, *a, |s| {
                    for ((ds, gs), ys) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: T = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in ds.iter_mut().zip(gs).zip(ys) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let n = *node.shape.last().expect("shape");
                let total = node.value.len();
                let rows = total / n;
                let (xhat, rstd) = node.aux.split_at(total);
                let gam = self.value(*gamma);
                self.acc(slots, *beta, |s| {
                    for gs in g.chunks_exact(n) {
                        for (d, &v) in s.iter_mut().zip(gs) {
                            *d += v;
                        }
                    }
                });
                self.acc(slots, *gamma, |s| {
                    for (gs, xs) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((d, &v), &xh) in s.iter_mut().zip(gs).zip(xs) {
                            *d += v * xh;
                        }
                    }
                });
                let nf = T::c(n as f64);
                self.acc(slots, *x, |s| {
                    for r in 0..rows {
                        let gs = &g[r * n..(r + 1) * n];
                        let xs = &xhat[r * n..(r + 1) * n];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let gx = gs[j] * gam[j];
                            m1 += gx;
                            m2 += gx * xs[j];
                        }
                        m1 = m1 / nf;
                        m2 = m2 / nf;
                        for j in 0..n {
                            s[r * n + j] += rstd[r] * (gs[j] * gam[j] - m1 - xs[j] * m2);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.acc(slots, *a, |s| {
                    for ((d, &gv), &x) in s.iter_mut().zip(g).zip(va) {
                        if x > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Gelu(a) => self.elementwise_grad(slots, i, *a, g, |x, _| gelu_grad(x)),
            Op::Sigmoid(a) => self.elementwise_grad(slots, i, *a, g, |_, y| y * (T::one() - y)),
            Op::Softplus(a) => self.elementwise_grad(slots, i, *a, g, |x, _| sigmoid(x)),
            Op::Sin(a) => self.elementwise_grad(slots, i, *a, g, |x, _| x.cos()),
            Op::Cos(a) => self.elementwise_grad(slots, i, *a, g, |x, _| -x.sin()),
            Op::GlobalAvgPool(a) => {
                let c = node.shape[0];
                let hw = self.shape(*a)[0] * self.shape(*a)[1];
                let inv = T::one() / T::c(hw as f64);
                self.acc(slots, *a, |s| {
                    for px in s.chunks_exact_mut(c) {
                        for (d, &v) in px.iter_mut().zip(g) {
                            *d += v * inv;
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = g[0] / T::c(n as f64);
                self.acc(slots, *a, |s| s.iter_mut().for_each(|d| *d += v));
            }
            Op::Sum(a) => {
                let v = g[0];
                self.acc(slots, *a, |s| s.iter_mut().for_each(|d| *d += v));
            }
        }
    }

    /// `d x += g * f(x, y)` for unary elementwise ops with output `y`.
    fn elementwise_grad(&self, slots: &mut Slots<T>, i: usize, a: Var, g: &[T], f: impl Fn(T, T) -> T) {
        let x = self.value(a);
        let y = &self.nodes[i].value;
        self.acc(slots, a, |s| {
            for ((d, &gv), (&xv, &yv)) in s.iter_mut().zip(g).zip(x.iter().zip(y)) {
                *d += gv * f(xv, yv);
            }
        });
    }
}

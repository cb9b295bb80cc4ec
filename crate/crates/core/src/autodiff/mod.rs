//! Minimal reverse-mode autodiff over `ndarray`, generic over `f32`/`f64`.
//!
//! A [`Tape`] records eagerly-evaluated ops; [`Tape::backward`] walks the
//! record in reverse, accumulating gradients for every node that can reach a
//! trainable leaf. Parameter leaves are memoized per name, so weight-shared
//! branches (the two inpainters) reference a single node and fan-in their
//! gradients automatically.

pub mod kernels;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView4, ArrayViewD, Ix3, Ix4, IxDyn};

use crate::nn::ParamStore;
use crate::tensor::Real;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Probability clamp used inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

enum Op<F: Real> {
    Const,
    Param(String),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `(B,1,H,W) * (B,C,H,W)` with the single channel broadcast.
    MulBcastC(Var, Var),
    Scale(Var, F),
    Abs(Var),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    /// Gated linear unit over the channel axis: `a * sigmoid(g)` where the
    /// input is `cat(a, g)` with equal halves.
    Glu(Var),
    AvgPool2(Var),
    NearestUp2(Var),
    ResizeBilinear(Var),
    ConcatC(Vec<Var>),
    SumAll(Var),
    /// Mean binary cross-entropy with probability clamp; `target` gets no
    /// gradient.
    BceMean { pred: Var, target: Var },
    /// Mean squared error; `target` gets no gradient.
    MseMean { pred: Var, target: Var },
    /// Weighted sum of scalar nodes.
    WeightedSum(Vec<(Var, F)>),
    /// `(B,C,H,W)` -> `(B,H*W,C)`.
    SpatialToTokens(Var),
    /// `(B,H*W,C)` -> `(B,C,H,W)`.
    TokensToSpatial { x: Var, h: usize, w: usize },
    /// Batched `a @ b` (or `a @ b^T`); `a: (B,N,K)`.
    BatMatMul { a: Var, b: Var, transpose_b: bool },
    SoftmaxLast(Var),
}

impl<F: Real> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Const | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulBcastC(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Abs(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Silu(a)
            | Op::Glu(a)
            | Op::AvgPool2(a)
            | Op::NearestUp2(a)
            | Op::ResizeBilinear(a)
            | Op::SumAll(a)
            | Op::SpatialToTokens(a)
            | Op::TokensToSpatial { x: a, .. }
            | Op::SoftmaxLast(a) => vec![*a],
            Op::ConcatC(vs) => vs.clone(),
            Op::BceMean { pred, target } | Op::MseMean { pred, target } => vec![*pred, *target],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::BatMatMul { a, b, .. } => vec![*a, *b],
        }
    }
}

struct Node<F: Real> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    param_cache: BTreeMap<String, Var>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads[v.0].as_ref()
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_cache: BTreeMap::new() }
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> Var {
        let needs_grad = match &op {
            Op::Const => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf with no gradient tracking.
    pub fn constant(&mut self, v: ArrayD<F>) -> Var {
        self.push(v, Op::Const)
    }

    pub fn constant4(&mut self, v: Array4<F>) -> Var {
        self.constant(v.into_dyn())
    }

    /// Differentiable leaf not bound to a parameter store (used by the
    /// gradient-check oracles).
    pub fn var(&mut self, v: ArrayD<F>) -> Var {
        self.push(v, Op::Param(String::new()))
    }

    pub fn var4(&mut self, v: Array4<F>) -> Var {
        self.var(v.into_dyn())
    }

    /// Leaf bound to a named parameter. Memoized: repeated lookups of the
    /// same name return the same node, which is how weight sharing works.
    /// Frozen parameters become constants (gradients still flow *through*
    /// the ops that consume them, just not *into* them).
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Var {
        if let Some(&v) = self.param_cache.get(name) {
            return v;
        }
        let p = store.get(name);
        let var = if p.trainable {
            self.push(p.value.clone(), Op::Param(name.to_string()))
        } else {
            self.push(p.value.clone(), Op::Const)
        };
        self.param_cache.insert(name.to_string(), var);
        var
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn value4(&self, v: Var) -> ArrayView4<'_, F> {
        self.nodes[v.0].value.view().into_dimensionality::<Ix4>().unwrap()
    }

    pub fn scalar(&self, v: Var) -> F {
        *self.nodes[v.0].value.iter().next().expect("scalar node")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- ops ----------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let y = kernels::conv2d_forward(
            &self.value4(x),
            &self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap().to_owned(),
            &self.nodes[b.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned(),
            stride,
            pad,
        );
        self.push(y.into_dyn(), Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    /// Broadcast multiply: `q` has one channel, `f` has many.
    pub fn mul_bcast_c(&mut self, q: Var, f: Var) -> Var {
        let qv = self.value4(q);
        let fv = self.value4(f);
        assert_eq!(qv.shape()[1], 1, "broadcast side must have 1 channel");
        let (b, c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2], fv.shape()[3]);
        let mut out = Array4::<F>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[[bi, ci, y, x]] = qv[[bi, 0, y, x]] * fv[[bi, ci, y, x]];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::MulBcastC(q, f))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.abs());
        self.push(v, Op::Abs(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = F::one();
        let v = self.nodes[x.0].value.mapv(|e| one / (one + (-e).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let zero = F::zero();
        let v = self.nodes[x.0].value.mapv(|e| if e > zero { e } else { zero });
        self.push(v, Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let one = F::one();
        let v = self.nodes[x.0].value.mapv(|e| e / (one + (-e).exp()));
        self.push(v, Op::Silu(x))
    }

    pub fn glu(&mut self, x: Var) -> Var {
        let xv = self.value4(x);
        let (b, c2, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(c2 % 2, 0, "glu input channels must be even");
        let c = c2 / 2;
        let one = F::one();
        let mut out = Array4::<F>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x0 in 0..w {
                        let a = xv[[bi, ci, y, x0]];
                        let g = xv[[bi, c + ci, y, x0]];
                        out[[bi, ci, y, x0]] = a * (one / (one + (-g).exp()));
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Glu(x))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let v = kernels::avg_pool2_fwd(&self.value4(x));
        self.push(v.into_dyn(), Op::AvgPool2(x))
    }

    pub fn nearest_up2(&mut self, x: Var) -> Var {
        let v = kernels::nearest_up2_fwd(&self.value4(x));
        self.push(v.into_dyn(), Op::NearestUp2(x))
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let v = kernels::resize_bilinear_fwd(&self.value4(x), oh, ow);
        self.push(v.into_dyn(), Op::ResizeBilinear(x))
    }

    /// 2x bilinear upsampling (the cascade's `U`).
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (h, w) = (self.shape(x)[2], self.shape(x)[3]);
        self.resize_bilinear(x, h * 2, w * 2)
    }

    pub fn concat_c(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayView4<F>> = parts.iter().map(|v| self.value4(*v)).collect();
        let (b, h, w) = (views[0].shape()[0], views[0].shape()[2], views[0].shape()[3]);
        let total_c: usize = views.iter().map(|v| v.shape()[1]).sum();
        let mut out = Array4::<F>::zeros((b, total_c, h, w));
        let mut offset = 0;
        for v in &views {
            let c = v.shape()[1];
            out.slice_mut(ndarray::s![.., offset..offset + c, .., ..]).assign(v);
            offset += c;
        }
        self.push(out.into_dyn(), Op::ConcatC(parts.to_vec()))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: F = self.nodes[x.0].value.iter().copied().sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(x))
    }

    /// Mean binary cross-entropy between probabilities and a target map of
    /// the same shape. Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_mean(&mut self, pred: Var, target: Var) -> Var {
        let p = &self.nodes[pred.0].value;
        let t = &self.nodes[target.0].value;
        assert_eq!(p.shape(), t.shape(), "bce operand shapes");
        let eps = BCE_EPS;
        let mut acc = 0.0f64;
        for (&pi, &ti) in p.iter().zip(t.iter()) {
            let pc = pi.as_f64().clamp(eps, 1.0 - eps);
            let tf = ti.as_f64();
            acc -= tf * pc.ln() + (1.0 - tf) * (1.0 - pc).ln();
        }
        let mean = acc / p.len() as f64;
        self.push(
            ArrayD::from_elem(IxDyn(&[]), F::from_f64(mean)),
            Op::BceMean { pred, target },
        )
    }

    /// Mean squared error between prediction and a constant target of the
    /// same shape.
    pub fn mse_mean(&mut self, pred: Var, target: Var) -> Var {
        let p = &self.nodes[pred.0].value;
        let t = &self.nodes[target.0].value;
        assert_eq!(p.shape(), t.shape(), "mse operand shapes");
        let mut acc = 0.0f64;
        for (&pi, &ti) in p.iter().zip(t.iter()) {
            let d = pi.as_f64() - ti.as_f64();
            acc += d * d;
        }
        let mean = acc / p.len() as f64;
        self.push(
            ArrayD::from_elem(IxDyn(&[]), F::from_f64(mean)),
            Op::MseMean { pred, target },
        )
    }

    /// Weighted sum of scalar nodes: `sum_i w_i * x_i`.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Var {
        let mut acc = F::zero();
        for (v, w) in terms {
            acc = acc + self.scalar(*v) * *w;
        }
        self.push(ArrayD::from_elem(IxDyn(&[]), acc), Op::WeightedSum(terms.to_vec()))
    }

    pub fn spatial_to_tokens(&mut self, x: Var) -> Var {
        let xv = self.value4(x);
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = ndarray::Array3::<F>::zeros((b, h * w, c));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x0 in 0..w {
                        out[[bi, y * w + x0, ci]] = xv[[bi, ci, y, x0]];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::SpatialToTokens(x))
    }

    pub fn tokens_to_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (b, n, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(n, h * w);
        let mut out = Array4::<F>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x0 in 0..w {
                        out[[bi, ci, y, x0]] = xv[[bi, y * w + x0, ci]];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::TokensToSpatial { x, h, w })
    }

    pub fn bat_mat_mul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (bs, n, _k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let m = if transpose_b { bv.shape()[1] } else { bv.shape()[2] };
        let mut out = ndarray::Array3::<F>::zeros((bs, n, m));
        for bi in 0..bs {
            let ai = av.index_axis(ndarray::Axis(0), bi);
            let bi_m = bv.index_axis(ndarray::Axis(0), bi);
            let mut oi = out.index_axis_mut(ndarray::Axis(0), bi);
            if transpose_b {
                ndarray::linalg::general_mat_mul(F::one(), &ai, &bi_m.t(), F::zero(), &mut oi);
            } else {
                ndarray::linalg::general_mat_mul(F::one(), &ai, &bi_m, F::zero(), &mut oi);
            }
        }
        self.push(out.into_dyn(), Op::BatMatMul { a, b, transpose_b })
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (b, n, m) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = ndarray::Array3::<F>::zeros((b, n, m));
        for bi in 0..b {
            for ni in 0..n {
                let row = xv.slice(ndarray::s![bi, ni, ..]);
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for mi in 0..m {
                    let e = (row[mi] - max).exp();
                    out[[bi, ni, mi]] = e;
                    sum += e;
                }
                for mi in 0..m {
                    out[[bi, ni, mi]] = out[[bi, ni, mi]] / sum;
                }
            }
        }
        self.push(out.into_dyn(), Op::SoftmaxLast(x))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar root. Returns per-node gradients; combine
    /// with [`Tape::export_param_grads`] to push them into a store.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one()));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Adds every named parameter's gradient into the store.
    pub fn export_param_grads(&self, grads: &Gradients<F>, store: &mut ParamStore<F>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if name.is_empty() {
                    continue;
                }
                if let Some(g) = &grads.grads[i] {
                    store.accumulate_grad(name, g);
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(grads: &mut [Option<ArrayD<F>>], v: Var, delta: ArrayD<F>) {
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, idx: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let gout = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.value4(*x);
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let (gx, gw, gb) = kernels::conv2d_backward(
                    &xv,
                    &wv,
                    &gout,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                    self.needs(*b),
                );
                if let Some(gx) = gx {
                    Self::accumulate(grads, *x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    Self::accumulate(grads, *w, gw.into_dyn());
                }
                if let Some(gb) = gb {
                    Self::accumulate(grads, *b, gb.into_dyn());
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.mapv(|e| -e));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g * &self.nodes[b.0].value);
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g * &self.nodes[a.0].value);
                }
            }
            Op::MulBcastC(q, f) => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let qv = self.value4(*q);
                let fv = self.value4(*f);
                let (b, c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2], fv.shape()[3]);
                if self.needs(*q) {
                    let mut gq = Array4::<F>::zeros((b, 1, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    gq[[bi, 0, y, x]] += gv[[bi, ci, y, x]] * fv[[bi, ci, y, x]];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *q, gq.into_dyn());
                }
                if self.needs(*f) {
                    let mut gf = Array4::<F>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    gf[[bi, ci, y, x]] = gv[[bi, ci, y, x]] * qv[[bi, 0, y, x]];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *f, gf.into_dyn());
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.mapv(|e| e * *c));
                }
            }
            Op::Abs(x) => {
                if self.needs(*x) {
                    // Subgradient 0 at zero.
                    let zero = F::zero();
                    let one = F::one();
                    let sign = self.nodes[x.0].value.mapv(|e| {
                        if e > zero {
                            one
                        } else if e < zero {
                            -one
                        } else {
                            zero
                        }
                    });
                    Self::accumulate(grads, *x, g * &sign);
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let one = F::one();
                    let y = &node.value;
                    Self::accumulate(grads, *x, g * &y.mapv(|s| s * (one - s)));
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let zero = F::zero();
                    let one = F::one();
                    let mask = self.nodes[x.0].value.mapv(|e| if e > zero { one } else { zero });
                    Self::accumulate(grads, *x, g * &mask);
                }
            }
            Op::Silu(x) => {
                if self.needs(*x) {
                    let one = F::one();
                    let deriv = self.nodes[x.0].value.mapv(|e| {
                        let s = one / (one + (-e).exp());
                        s * (one + e * (one - s))
                    });
                    Self::accumulate(grads, *x, g * &deriv);
                }
            }
            Op::Glu(x) => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let xv = self.value4(*x);
                    let (b, c2, h, w) =
                        (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let c = c2 / 2;
                    let one = F::one();
                    let mut gx = Array4::<F>::zeros((b, c2, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for x0 in 0..w {
                                    let a = xv[[bi, ci, y, x0]];
                                    let gate = xv[[bi, c + ci, y, x0]];
                                    let s = one / (one + (-gate).exp());
                                    let go = gv[[bi, ci, y, x0]];
                                    gx[[bi, ci, y, x0]] = go * s;
                                    gx[[bi, c + ci, y, x0]] = go * a * s * (one - s);
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *x, gx.into_dyn());
                }
            }
            Op::AvgPool2(x) => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    Self::accumulate(grads, *x, kernels::avg_pool2_bwd(&gv).into_dyn());
                }
            }
            Op::NearestUp2(x) => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    Self::accumulate(grads, *x, kernels::nearest_up2_bwd(&gv).into_dyn());
                }
            }
            Op::ResizeBilinear(x) => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (h, w) = (self.shape(*x)[2], self.shape(*x)[3]);
                    Self::accumulate(grads, *x, kernels::resize_bilinear_bwd(&gv, h, w).into_dyn());
                }
            }
            Op::ConcatC(parts) => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if self.needs(*p) {
                        let slice = gv.slice(ndarray::s![.., offset..offset + c, .., ..]);
                        Self::accumulate(grads, *p, slice.to_owned().into_dyn());
                    }
                    offset += c;
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let gs = *g.iter().next().unwrap();
                    Self::accumulate(
                        grads,
                        *x,
                        ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gs),
                    );
                }
            }
            Op::BceMean { pred, target } => {
                if self.needs(*pred) {
                    let gs = g.iter().next().unwrap().as_f64();
                    let p = &self.nodes[pred.0].value;
                    let t = &self.nodes[target.0].value;
                    let n = p.len() as f64;
                    let eps = BCE_EPS;
                    let mut gp = ArrayD::<F>::zeros(p.raw_dim());
                    for ((gpe, &pe), &te) in gp.iter_mut().zip(p.iter()).zip(t.iter()) {
                        let pf = pe.as_f64();
                        // The clamp is flat outside [eps, 1-eps]: no gradient.
                        if pf < eps || pf > 1.0 - eps {
                            continue;
                        }
                        let tf = te.as_f64();
                        let d = (-tf / pf + (1.0 - tf) / (1.0 - pf)) / n;
                        *gpe = F::from_f64(gs * d);
                    }
                    Self::accumulate(grads, *pred, gp);
                }
            }
            Op::MseMean { pred, target } => {
                if self.needs(*pred) {
                    let gs = g.iter().next().unwrap().as_f64();
                    let p = &self.nodes[pred.0].value;
                    let t = &self.nodes[target.0].value;
                    let scale = 2.0 * gs / p.len() as f64;
                    let mut gp = ArrayD::<F>::zeros(p.raw_dim());
                    for ((gpe, &pe), &te) in gp.iter_mut().zip(p.iter()).zip(t.iter()) {
                        *gpe = F::from_f64(scale * (pe.as_f64() - te.as_f64()));
                    }
                    Self::accumulate(grads, *pred, gp);
                }
            }
            Op::WeightedSum(terms) => {
                let gs = *g.iter().next().unwrap();
                for (v, w) in terms {
                    if self.needs(*v) {
                        Self::accumulate(
                            grads,
                            *v,
                            ArrayD::from_elem(IxDyn(&[]), gs * *w),
                        );
                    }
                }
            }
            Op::SpatialToTokens(x) => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let xs = self.shape(*x);
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let mut gx = Array4::<F>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for x0 in 0..w {
                                    gx[[bi, ci, y, x0]] = gv[[bi, y * w + x0, ci]];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *x, gx.into_dyn());
                }
            }
            Op::TokensToSpatial { x, h, w } => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let xs = self.shape(*x);
                    let (b, n, c) = (xs[0], xs[1], xs[2]);
                    let mut gx = ndarray::Array3::<F>::zeros((b, n, c));
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..*h {
                                for x0 in 0..*w {
                                    gx[[bi, y * w + x0, ci]] = gv[[bi, ci, y, x0]];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *x, gx.into_dyn());
                }
            }
            Op::BatMatMul { a, b, transpose_b } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let bs = av.shape()[0];
                if self.needs(*a) {
                    let mut ga = ndarray::Array3::<F>::zeros(av.raw_dim());
                    for bi in 0..bs {
                        let gi = gv.index_axis(ndarray::Axis(0), bi);
                        let bi_m = bv.index_axis(ndarray::Axis(0), bi);
                        let mut gai = ga.index_axis_mut(ndarray::Axis(0), bi);
                        if *transpose_b {
                            // y = a b^T  =>  ga = g b
                            ndarray::linalg::general_mat_mul(F::one(), &gi, &bi_m, F::zero(), &mut gai);
                        } else {
                            // y = a b    =>  ga = g b^T
                            ndarray::linalg::general_mat_mul(F::one(), &gi, &bi_m.t(), F::zero(), &mut gai);
                        }
                    }
                    Self::accumulate(grads, *a, ga.into_dyn());
                }
                if self.needs(*b) {
                    let mut gb = ndarray::Array3::<F>::zeros(bv.raw_dim());
                    for bi in 0..bs {
                        let gi = gv.index_axis(ndarray::Axis(0), bi);
                        let ai = av.index_axis(ndarray::Axis(0), bi);
                        let mut gbi = gb.index_axis_mut(ndarray::Axis(0), bi);
                        if *transpose_b {
                            // y = a b^T  =>  gb = g^T a
                            ndarray::linalg::general_mat_mul(F::one(), &gi.t(), &ai, F::zero(), &mut gbi);
                        } else {
                            // y = a b    =>  gb = a^T g
                            ndarray::linalg::general_mat_mul(F::one(), &ai.t(), &gi, F::zero(), &mut gbi);
                        }
                    }
                    Self::accumulate(grads, *b, gb.into_dyn());
                }
            }
            Op::SoftmaxLast(x) => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let yv = node.value.view().into_dimensionality::<Ix3>().unwrap();
                    let (b, n, m) = (yv.shape()[0], yv.shape()[1], yv.shape()[2]);
                    let mut gx = ndarray::Array3::<F>::zeros((b, n, m));
                    for bi in 0..b {
                        for ni in 0..n {
                            let mut dot = F::zero();
                            for mi in 0..m {
                                dot += gv[[bi, ni, mi]] * yv[[bi, ni, mi]];
                            }
                            for mi in 0..m {
                                gx[[bi, ni, mi]] =
                                    yv[[bi, ni, mi]] * (gv[[bi, ni, mi]] - dot);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, gx.into_dyn());
                }
            }
        }
    }
}

/// Central finite-difference gradient of `f` with respect to `x`,
/// element by element. Test/oracle helper; `f` must be deterministic.
pub fn finite_difference<F, Func>(x: &ArrayD<F>, step: f64, mut f: Func) -> ArrayD<F>
where
    F: Real,
    Func: FnMut(&ArrayD<F>) -> F,
{
    let mut grad = ArrayD::<F>::zeros(x.raw_dim());
    let h = F::from_f64(step);
    let two_h = F::from_f64(2.0 * step);
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (plus - minus) / two_h;
    }
    grad
}

/// Maximum relative error between analytic and reference gradients, with an
/// absolute floor so that near-zero pairs compare as equal.
pub fn max_relative_error<F: Real>(analytic: &ArrayD<F>, reference: &ArrayD<F>) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &r) in analytic.iter().zip(reference.iter()) {
        let (a, r) = (a.as_f64(), r.as_f64());
        let denom = a.abs().max(r.abs()).max(1e-9);
        let rel = (a - r).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests;

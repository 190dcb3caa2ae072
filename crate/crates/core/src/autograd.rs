//! Minimal reverse-mode differentiation over [`Tensor`]s.
//!
//! Model code is written once against [`Ctx`]. [`Eval`] runs it without
//! recording anything; [`Tape`] records every op so [`Tape::backward`] can
//! return gradients for the parameters that were touched.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use indexmap::IndexMap;

use crate::ops::{self, ResamplePlan};
use crate::params::ParameterSet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Conv2d { bias: bool },
    Relu,
    Sigmoid,
    Add,
    /// `[C,H,W] * [C]`
    ScaleChannels,
    /// `[C,H,W] -> [C]`
    GlobalAvgPool,
    Softmax,
    /// Along the leading axis.
    Concat,
    PixelShuffle(usize),
    /// Flattened input times `[m, n]` weight.
    Linear { bias: bool },
    /// `[C] -> [C,H,W]`
    RepeatSpatial(usize, usize),
    DynamicConv(usize),
    /// Image, flattened `k x k` kernel; reflect padding.
    Blur(usize),
    Resample(Arc<ResamplePlan>),
    /// Mean of all entries, shape `[1]`.
    Mean,
    /// `[1] -> shape`
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    Detach,
    L1Mean,
    MseMean,
    WeightedSum(Vec<f64>),
}

fn forward<T: Real>(op: &Op, xs: &[&Tensor<T>]) -> Tensor<T> {
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Conv2d { bias } => ops::conv2d(xs[0], xs[1], bias.then(|| xs[2])),
        Op::Relu => xs[0].map(|v| v.max(T::zero())),
        Op::Sigmoid => xs[0].map(|v| T::one() / (T::one() + (-v).exp())),
        Op::Add => {
            assert_eq!(xs[0].shape(), xs[1].shape(), "add shapes");
            let mut out = xs[0].clone();
            out.add_assign(xs[1]);
            out
        }
        Op::ScaleChannels => {
            let (c, h, w) = xs[0].chw();
            assert_eq!(xs[1].len(), c);
            let mut out = xs[0].clone();
            for (plane, &s) in out.data_mut().chunks_exact_mut(h * w).zip(xs[1].data()) {
                plane.iter_mut().for_each(|v| *v *= s);
            }
            out
        }
        Op::GlobalAvgPool => {
            let (c, h, w) = xs[0].chw();
            let n = T::of((h * w) as f64);
            let data = xs[0].data().chunks_exact(h * w).map(|p| p.iter().copied().sum::<T>() / n).collect();
            Tensor::from_vec(&[c], data)
        }
        Op::Softmax => {
            let m = xs[0].data().iter().copied().fold(T::neg_infinity(), T::max);
            let mut out = xs[0].map(|v| (v - m).exp());
            let s: T = out.data().iter().copied().sum();
            out.data_mut().iter_mut().for_each(|v| *v = *v / s);
            out
        }
        Op::Concat => {
            let rest = &xs[0].shape()[1..];
            let mut lead = 0;
            let mut data = Vec::with_capacity(xs.iter().map(|x| x.len()).sum());
            for x in xs {
                assert_eq!(&x.shape()[1..], rest, "concat trailing dims");
                lead += x.shape()[0];
                data.extend_from_slice(x.data());
            }
            let mut shape = vec![lead];
            shape.extend_from_slice(rest);
            Tensor::from_vec(&shape, data)
        }
        Op::PixelShuffle(r) => ops::pixel_shuffle(xs[0], *r),
        Op::Linear { bias } => {
            let (m, n) = (xs[1].shape()[0], xs[1].shape()[1]);
            assert_eq!(xs[0].len(), n, "linear input width");
            let mut out = if *bias { xs[2].data().to_vec() } else { vec![T::zero(); m] };
            let beta = if *bias { T::one() } else { T::zero() };
            T::gemm(m, n, 1, T::one(), xs[1].data(), n as isize, 1, xs[0].data(), 1, 1, beta, &mut out, 1, 1);
            Tensor::from_vec(&[m], out)
        }
        Op::RepeatSpatial(h, w) => {
            let c = xs[0].len();
            let mut data = Vec::with_capacity(c * h * w);
            for &v in xs[0].data() {
                data.extend(std::iter::repeat(v).take(h * w));
            }
            Tensor::from_vec(&[c, *h, *w], data)
        }
        Op::DynamicConv(k) => ops::dynamic_conv(xs[0], xs[1], *k),
        Op::Blur(k) => ops::blur(xs[0], xs[1].data(), *k),
        Op::Resample(plan) => plan.apply(xs[0]),
        Op::Mean => {
            let n = T::of(xs[0].len() as f64);
            Tensor::scalar(xs[0].data().iter().copied().sum::<T>() / n)
        }
        Op::Broadcast(shape) => Tensor::full(shape, xs[0].item()),
        Op::Reshape(shape) => xs[0].clone().reshape(shape),
        Op::Detach => xs[0].clone(),
        Op::L1Mean => {
            assert_eq!(xs[0].shape(), xs[1].shape(), "l1 shapes");
            let n = T::of(xs[0].len() as f64);
            let s: T = xs[0].data().iter().zip(xs[1].data()).map(|(&a, &b)| (a - b).abs()).sum();
            Tensor::scalar(s / n)
        }
        Op::MseMean => {
            assert_eq!(xs[0].shape(), xs[1].shape(), "mse shapes");
            let n = T::of(xs[0].len() as f64);
            let s: T = xs[0].data().iter().zip(xs[1].data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
            Tensor::scalar(s / n)
        }
        Op::WeightedSum(ws) => {
            let s = xs.iter().zip(ws).map(|(x, &w)| x.item() * T::of(w)).fold(T::zero(), |a, b| a + b);
            Tensor::scalar(s)
        }
    }
}

/// Gradients for each input given the output gradient `g`. Entries for
/// inputs with `need[i] == false` may be `None`.
fn backward<T: Real>(op: &Op, xs: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
    match op {
        Op::Leaf | Op::Detach => vec![None; xs.len()],
        Op::Conv2d { bias } => {
            let (dx, dw, db) = ops::conv2d_backward(xs[0], xs[1], g, need[0]);
            let mut v = vec![dx, Some(dw)];
            if *bias {
                v.push(Some(db));
            }
            v
        }
        Op::Relu => {
            let mut d = g.clone();
            for (dv, &o) in d.data_mut().iter_mut().zip(out.data()) {
                if o <= T::zero() {
                    *dv = T::zero();
                }
            }
            vec![Some(d)]
        }
        Op::Sigmoid => {
            let mut d = g.clone();
            for (dv, &o) in d.data_mut().iter_mut().zip(out.data()) {
                *dv *= o * (T::one() - o);
            }
            vec![Some(d)]
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::ScaleChannels => {
            let (c, h, w) = xs[0].chw();
            let mut dx = g.clone();
            let mut ds = vec![T::zero(); c];
            for ci in 0..c {
                let s = xs[1].data()[ci];
                let gp = &g.data()[ci * h * w..(ci + 1) * h * w];
                let xp = &xs[0].data()[ci * h * w..(ci + 1) * h * w];
                ds[ci] = gp.iter().zip(xp).map(|(&a, &b)| a * b).sum();
                dx.data_mut()[ci * h * w..(ci + 1) * h * w].iter_mut().for_each(|v| *v *= s);
            }
            vec![Some(dx), Some(Tensor::from_vec(&[c], ds))]
        }
        Op::GlobalAvgPool => {
            let (c, h, w) = xs[0].chw();
            let n = T::of((h * w) as f64);
            let mut d = Vec::with_capacity(c * h * w);
            for &gv in g.data() {
                d.extend(std::iter::repeat(gv / n).take(h * w));
            }
            vec![Some(Tensor::from_vec(&[c, h, w], d))]
        }
        Op::Softmax => {
            let dotp: T = g.data().iter().zip(out.data()).map(|(&a, &b)| a * b).sum();
            let d = Tensor::from_vec(
                out.shape(),
                g.data().iter().zip(out.data()).map(|(&gv, &y)| y * (gv - dotp)).collect(),
            );
            vec![Some(d)]
        }
        Op::Concat => {
            let mut off = 0;
            xs.iter()
                .map(|x| {
                    let part = Tensor::from_vec(x.shape(), g.data()[off..off + x.len()].to_vec());
                    off += x.len();
                    Some(part)
                })
                .collect()
        }
        Op::PixelShuffle(r) => vec![Some(ops::pixel_unshuffle(g, *r))],
        Op::Linear { bias } => {
            let (m, n) = (xs[1].shape()[0], xs[1].shape()[1]);
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); n];
                T::gemm(n, m, 1, T::one(), xs[1].data(), 1, n as isize, g.data(), 1, 1, T::zero(), &mut dx, 1, 1);
                Tensor::from_vec(xs[0].shape(), dx)
            });
            let mut dw = vec![T::zero(); m * n];
            for (i, &gv) in g.data().iter().enumerate() {
                for (d, &xv) in dw[i * n..(i + 1) * n].iter_mut().zip(xs[0].data()) {
                    *d = gv * xv;
                }
            }
            let mut v = vec![dx, Some(Tensor::from_vec(&[m, n], dw))];
            if *bias {
                v.push(Some(g.clone()));
            }
            v
        }
        Op::RepeatSpatial(h, w) => {
            let d = g.data().chunks_exact(h * w).map(|p| p.iter().copied().sum()).collect();
            vec![Some(Tensor::from_vec(xs[0].shape(), d))]
        }
        Op::DynamicConv(k) => {
            let (dx, dw) = ops::dynamic_conv_backward(xs[0], xs[1], g, *k);
            vec![Some(dx), Some(dw)]
        }
        Op::Blur(k) => {
            let dx = need[0].then(|| ops::blur_backward_input(g, xs[1].data(), *k));
            let dk = need[1].then(|| Tensor::from_vec(xs[1].shape(), ops::blur_backward_kernel(xs[0], g, *k)));
            vec![dx, dk]
        }
        Op::Resample(plan) => vec![Some(plan.apply_transpose(g))],
        Op::Mean => {
            let n = T::of(xs[0].len() as f64);
            vec![Some(Tensor::full(xs[0].shape(), g.item() / n))]
        }
        Op::Broadcast(_) => vec![Some(Tensor::scalar(g.data().iter().copied().sum()))],
        Op::Reshape(_) => vec![Some(g.clone().reshape(xs[0].shape()))],
        Op::L1Mean => {
            let n = T::of(xs[0].len() as f64);
            let s = g.item() / n;
            let d: Vec<T> = xs[0]
                .data()
                .iter()
                .zip(xs[1].data())
                .map(|(&a, &b)| {
                    let diff = a - b;
                    if diff > T::zero() {
                        s
                    } else if diff < T::zero() {
                        -s
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let da = Tensor::from_vec(xs[0].shape(), d);
            let db = need[1].then(|| da.map(|v| -v));
            vec![Some(da), db]
        }
        Op::MseMean => {
            let n = T::of(xs[0].len() as f64);
            let s = T::of(2.0) * g.item() / n;
            let d: Vec<T> = xs[0].data().iter().zip(xs[1].data()).map(|(&a, &b)| s * (a - b)).collect();
            let da = Tensor::from_vec(xs[0].shape(), d);
            let db = need[1].then(|| da.map(|v| -v));
            vec![Some(da), db]
        }
        Op::WeightedSum(ws) => ws.iter().map(|&w| Some(Tensor::scalar(g.item() * T::of(w)))).collect(),
    }
}

/// Execution context for model code. Each op is a thin wrapper around
/// [`Ctx::apply`].
pub trait Ctx<T: Real> {
    type Var: Clone;

    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Self::Var;
    fn constant(&mut self, t: Tensor<T>) -> Self::Var;
    /// Panics when the name is absent; model builders guarantee presence.
    fn param(&mut self, name: &str) -> Self::Var;
    fn value<'b>(&'b self, v: &'b Self::Var) -> &'b Tensor<T>;

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>) -> Self::Var {
        match b {
            Some(b) => self.apply(Op::Conv2d { bias: true }, &[x, w, b]),
            None => self.apply(Op::Conv2d { bias: false }, &[x, w]),
        }
    }
    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        self.apply(Op::Relu, &[x])
    }
    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var {
        self.apply(Op::Sigmoid, &[x])
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        self.apply(Op::Add, &[a, b])
    }
    fn scale_channels(&mut self, x: &Self::Var, s: &Self::Var) -> Self::Var {
        self.apply(Op::ScaleChannels, &[x, s])
    }
    fn global_avg_pool(&mut self, x: &Self::Var) -> Self::Var {
        self.apply(Op::GlobalAvgPool, &[x])
    }
    fn softmax(&mut self, x: &Self::Var) -> Self::Var {
        self.apply(Op::Softmax, &[x])
    }
    fn concat(&mut self, xs: &[&Self::Var]) -> Self::Var {
        self.apply(Op::Concat, xs)
    }
    fn pixel_shuffle(&mut self, x: &Self::Var, r: usize) -> Self::Var {
        self.apply(Op::PixelShuffle(r), &[x])
    }
    fn linear(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>) -> Self::Var {
        match b {
            Some(b) => self.apply(Op::Linear { bias: true }, &[x, w, b]),
            None => self.apply(Op::Linear { bias: false }, &[x, w]),
        }
    }
    fn repeat_spatial(&mut self, x: &Self::Var, h: usize, w: usize) -> Self::Var {
        self.apply(Op::RepeatSpatial(h, w), &[x])
    }
    fn dynamic_conv(&mut self, x: &Self::Var, wf: &Self::Var, k: usize) -> Self::Var {
        self.apply(Op::DynamicConv(k), &[x, wf])
    }
    fn blur(&mut self, x: &Self::Var, kernel: &Self::Var, k: usize) -> Self::Var {
        self.apply(Op::Blur(k), &[x, kernel])
    }
    fn resample(&mut self, x: &Self::Var, plan: Arc<ResamplePlan>) -> Self::Var {
        self.apply(Op::Resample(plan), &[x])
    }
    fn mean(&mut self, x: &Self::Var) -> Self::Var {
        self.apply(Op::Mean, &[x])
    }
    fn broadcast(&mut self, s: &Self::Var, shape: &[usize]) -> Self::Var {
        self.apply(Op::Broadcast(shape.to_vec()), &[s])
    }
    fn reshape(&mut self, x: &Self::Var, shape: &[usize]) -> Self::Var {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }
    fn detach(&mut self, x: &Self::Var) -> Self::Var {
        self.apply(Op::Detach, &[x])
    }
    fn l1_mean(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        self.apply(Op::L1Mean, &[a, b])
    }
    fn mse_mean(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        self.apply(Op::MseMean, &[a, b])
    }
    fn weighted_sum(&mut self, terms: &[(&Self::Var, f64)]) -> Self::Var {
        let vars: Vec<&Self::Var> = terms.iter().map(|(v, _)| *v).collect();
        let ws = terms.iter().map(|(_, w)| *w).collect();
        self.apply(Op::WeightedSum(ws), &vars)
    }
}

// ---------------------------------------------------------------------------

/// Value handle for [`Eval`]: parameters are borrowed, intermediates shared.
#[derive(Clone, Debug)]
pub enum EvalVar<'p, T> {
    Param(&'p Tensor<T>),
    Owned(Rc<Tensor<T>>),
}

/// Forward-only context; intermediates are freed as soon as the model code
/// drops its handles.
pub struct Eval<'p, T> {
    params: Option<&'p ParameterSet<T>>,
}

impl<'p, T: Real> Eval<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Self { params: Some(params) }
    }

    pub fn without_params() -> Self {
        Self { params: None }
    }
}

impl<'p, T: Real> Ctx<T> for Eval<'p, T> {
    type Var = EvalVar<'p, T>;

    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Self::Var {
        let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(v)).collect();
        EvalVar::Owned(Rc::new(forward(&op, &xs)))
    }

    fn constant(&mut self, t: Tensor<T>) -> Self::Var {
        EvalVar::Owned(Rc::new(t))
    }

    fn param(&mut self, name: &str) -> Self::Var {
        let t = self
            .params
            .and_then(|p| p.get(name))
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        EvalVar::Param(t)
    }

    fn value<'b>(&'b self, v: &'b Self::Var) -> &'b Tensor<T> {
        match v {
            EvalVar::Param(t) => t,
            EvalVar::Owned(t) => t,
        }
    }
}

// ---------------------------------------------------------------------------

enum Stored<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

struct Node<'p, T> {
    value: Stored<'p, T>,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

pub type NodeId = usize;

/// Recording context. Every parameter requested through [`Ctx::param`]
/// becomes a single leaf, so repeated use accumulates into one gradient.
pub struct Tape<'p, T> {
    params: Option<&'p ParameterSet<T>>,
    nodes: Vec<Node<'p, T>>,
    param_nodes: IndexMap<String, NodeId>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: IndexMap::new(),
        }
    }

    pub fn without_params() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_nodes: IndexMap::new(),
        }
    }

    /// A leaf that receives a gradient but is not a named parameter.
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Stored::Owned(t), Op::Leaf, Vec::new(), true)
    }

    fn push(&mut self, value: Stored<'p, T>, op: Op, inputs: Vec<usize>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Reverse sweep from a scalar node. Returns the gradient of every node
    /// that received one.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.value(&root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(T::one()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.inputs.is_empty() && node.requires_grad {
                let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|i| self.value(i)).collect();
                let need: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
                let out = self.value(&id);
                let dins = backward(&node.op, &xs, out, &g, &need);
                for ((&inp, d), &nd) in node.inputs.iter().zip(dins).zip(&need) {
                    if let (Some(d), true) = (d, nd) {
                        match &mut grads[inp] {
                            Some(acc) => acc.add_assign(&d),
                            slot => *slot = Some(d),
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every parameter leaf touched by the recording, zero-filled
    /// for leaves the root does not depend on.
    pub fn param_grads(&self, grads: &Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.param_nodes
            .iter()
            .map(|(name, &id)| {
                let g = grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(&id).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl<'p, T: Real> Ctx<T> for Tape<'p, T> {
    type Var = NodeId;

    fn apply(&mut self, op: Op, inputs: &[&NodeId]) -> NodeId {
        let ids: Vec<usize> = inputs.iter().map(|&&i| i).collect();
        let value = {
            let xs: Vec<&Tensor<T>> = ids.iter().map(|i| self.value(i)).collect();
            forward(&op, &xs)
        };
        let requires_grad = !matches!(op, Op::Detach) && ids.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(Stored::Owned(value), op, ids, requires_grad)
    }

    fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Stored::Owned(t), Op::Leaf, Vec::new(), false)
    }

    fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.param_nodes.get(name) {
            return id;
        }
        let t = self
            .params
            .and_then(|p| p.get(name))
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let id = self.push(Stored::Borrowed(t), Op::Leaf, Vec::new(), true);
        self.param_nodes.insert(name.to_string(), id);
        id
    }

    fn value<'b>(&'b self, v: &'b NodeId) -> &'b Tensor<T> {
        match &self.nodes[*v].value {
            Stored::Owned(t) => t,
            Stored::Borrowed(t) => t,
        }
    }
}

/// Maps parameter names to the leaf ids of a tape; convenience for tests.
pub fn leaf_map<T: Real>(tape: &Tape<'_, T>) -> HashMap<String, NodeId> {
    tape.param_nodes.iter().map(|(k, &v)| (k.clone(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape<'_, f64>, NodeId) -> NodeId, x0: Tensor<f64>) {
        let mut tape = Tape::without_params();
        let x = tape.variable(x0.clone());
        let y = build(&mut tape, x);
        let grads = tape.backward(y);
        let gx = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::without_params();
                let v = t.variable(xp);
                let out = build(&mut t, v);
                t.value(&out).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = gx.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "entry {i}: fd {fd} vs analytic {an}");
        }
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 9.0).collect())
    }

    #[test]
    fn softmax_and_pool_gradients() {
        fd_check(
            |t, x| {
                let p = t.global_avg_pool(&x);
                let s = t.softmax(&p);
                let target = t.constant(Tensor::from_vec(&[3], vec![0.2, 0.5, 0.3]));
                t.mse_mean(&s, &target)
            },
            ramp(&[3, 2, 2]),
        );
    }

    #[test]
    fn shuffle_concat_scale_gradients() {
        fd_check(
            |t, x| {
                let ps = t.pixel_shuffle(&x, 2);
                let cat = t.concat(&[&ps, &ps]);
                let g = t.global_avg_pool(&cat);
                let sg = t.sigmoid(&g);
                let sc = t.scale_channels(&cat, &sg);
                let m = t.mean(&sc);
                let b = t.broadcast(&m, &[2, 4, 4]);
                let tgt = t.constant(Tensor::full(&[2, 4, 4], 0.3));
                let s = t.add(&b, &sc);
                t.l1_mean(&s, &tgt)
            },
            ramp(&[4, 2, 2]),
        );
    }

    #[test]
    fn linear_and_repeat_gradients() {
        fd_check(
            |t, x| {
                let w = t.constant(ramp(&[3, 4]));
                let y = t.linear(&x, &w, None);
                let r = t.repeat_spatial(&y, 2, 3);
                let rl = t.relu(&r);
                let z = t.constant(Tensor::zeros(&[3, 2, 3]));
                let a = t.mse_mean(&rl, &z);
                let b = t.mean(&y);
                t.weighted_sum(&[(&a, 1.5), (&b, -0.5)])
            },
            ramp(&[4]),
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::without_params();
        let x = t.variable(ramp(&[4]));
        let d = t.detach(&x);
        let m = t.mean(&d);
        let g = t.backward(m);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn eval_and_tape_agree() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert("w", ramp(&[2, 3, 3, 3]), crate::params::Init::Zeros);
        let x0 = ramp(&[3, 4, 5]);
        let mut e = Eval::new(&ps);
        let x = e.constant(x0.clone());
        let w = e.param("w");
        let y = e.conv2d(&x, &w, None);
        let mut t = Tape::new(&ps);
        let xt = t.constant(x0);
        let wt = t.param("w");
        let yt = t.conv2d(&xt, &wt, None);
        assert_eq!(e.value(&y), t.value(&yt));
    }
}

//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamSet`] rather than copied; [`Graph::backward`] walks
//! the tape in reverse and returns one gradient per parameter.

use std::sync::Arc;

use rand::Rng;

use super::tensor::{
    add_row_bias, attention_segment, attention_segment_backward, gemm, layernorm, layernorm_backward, silu,
    silu_grad, AttnSegment, AttnShape, Mat, Real,
};
use crate::par;

/// Named learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Mat<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Mat::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Mat::cast).collect() }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Silu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<T>, rstds: Vec<T> },
    Attention { q: Var, k: Var, v: Var, segs: Arc<Vec<AttnSegment>>, shape: AttnShape, probs: Vec<Vec<T>> },
    Embed { table: Var, ids: Vec<u32> },
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<u32>, weights: Vec<T>, probs: Mat<T>, norm: T },
}

struct Node<T> {
    op: Op<T>,
    /// `None` for parameters, whose value lives in the borrowed set.
    value: Option<Mat<T>>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(i)) => &self.params.tensors[*i],
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Option<Mat<T>>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, m: Mat<T>) -> Var {
        self.push(Op::Input, Some(m), false)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.push(Op::Param(index), None, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut c = Mat::zeros(va.rows, vb.cols);
        gemm(T::one(), va, false, vb, false, T::zero(), &mut c);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), Some(c), ng)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let mut y = self.value(x).clone();
        add_row_bias(&mut y, &self.value(b).data);
        let ng = self.needs(x) || self.needs(b);
        self.push(Op::AddBias(x, b), Some(y), ng)
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), Some(y), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let y = Mat::from_vec(vx.rows, vx.cols, vx.data.iter().map(|&v| silu(v)).collect());
        let ng = self.needs(x);
        self.push(Op::Silu(x), Some(y), ng)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (y, means, rstds) = layernorm(self.value(x), &self.value(gamma).data, &self.value(beta).data);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::LayerNorm { x, gamma, beta, means, rstds }, Some(y), ng)
    }

    /// Multi-head attention over a packed batch. Segments must cover disjoint
    /// query rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segs: Arc<Vec<AttnSegment>>, shape: AttnShape) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(vq.cols % shape.heads, 0, "width not divisible by heads");
        let results = par::map(&segs, |&seg| attention_segment(vq, vk, vv, seg, shape));
        let mut out = Mat::zeros(vq.rows, vq.cols);
        let mut probs = Vec::with_capacity(segs.len());
        for (seg, (block, p)) in segs.iter().zip(results) {
            let d = vq.cols;
            out.data[seg.q_start * d..(seg.q_start + seg.q_len) * d].copy_from_slice(&block);
            probs.push(p);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Op::Attention { q, k, v, segs, shape, probs }, Some(out), ng)
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        let ng = self.needs(table);
        self.push(Op::Embed { table, ids: ids.to_vec() }, Some(out), ng)
    }

    /// Inverted dropout. A rate of zero records no node.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let vx = self.value(x);
        let mask: Vec<T> =
            (0..vx.data.len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let y = Mat::from_vec(vx.rows, vx.cols, vx.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect());
        let ng = self.needs(x);
        self.push(Op::Dropout { x, mask }, Some(y), ng)
    }

    /// Weighted mean negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`. Returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[T]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows, targets.len());
        assert_eq!(vl.rows, weights.len());
        let norm = weights.iter().copied().sum::<T>();
        assert!(norm > T::zero(), "cross entropy over an empty mask");
        let mut probs = vl.clone();
        let mut total = T::zero();
        for r in 0..vl.rows {
            let row = probs.row_mut(r);
            let n = row.len();
            super::tensor::softmax_prefix(row, n);
            if weights[r] != T::zero() {
                let lrow = vl.row(r);
                let max = lrow.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = lrow.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
                total += weights[r] * (lse - lrow[targets[r] as usize]);
            }
        }
        let loss = Mat::from_vec(1, 1, vec![total / norm]);
        let ng = self.needs(logits);
        self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs, norm },
            Some(loss),
            ng,
        )
    }

    /// Reverse pass from a scalar node. Returns one gradient per parameter in
    /// the borrowed set (zero for parameters the loss does not touch).
    pub fn backward(&self, loss: Var) -> Vec<Mat<T>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![T::one()]));
        let mut param_grads: Vec<Mat<T>> =
            self.params.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();

        fn acc<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(i) => param_grads[*i].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let mut da = Mat::zeros(va.rows, va.cols);
                        gemm(T::one(), &g, false, vb, true, T::zero(), &mut da);
                        acc(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = Mat::zeros(vb.rows, vb.cols);
                        gemm(T::one(), va, true, &g, false, T::zero(), &mut db);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(*b) {
                        let mut db = Mat::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, &v) in db.data.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *b, db);
                    }
                    if self.needs(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) && self.needs(*b) {
                        acc(&mut grads, *a, g.clone());
                        acc(&mut grads, *b, g);
                    } else if self.needs(*a) {
                        acc(&mut grads, *a, g);
                    } else if self.needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Silu(x) => {
                    let vx = self.value(*x);
                    let dx = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&vx.data).map(|(&d, &v)| d * silu_grad(v)).collect(),
                    );
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gamma, beta, means, rstds } => {
                    let (dx, dg, db) =
                        layernorm_backward(self.value(*x), &self.value(*gamma).data, means, rstds, &g);
                    if self.needs(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        acc(&mut grads, *gamma, Mat::from_vec(1, dg.len(), dg));
                    }
                    if self.needs(*beta) {
                        acc(&mut grads, *beta, Mat::from_vec(1, db.len(), db));
                    }
                }
                Op::Attention { q, k, v, segs, shape, probs } => {
                    let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = vq.cols;
                    let pieces: Vec<(AttnSegment, &Vec<T>)> = segs.iter().copied().zip(probs.iter()).collect();
                    let results = par::map(&pieces, |(seg, p)| {
                        attention_segment_backward(vq, vk, vv, *seg, *shape, p, &g)
                    });
                    let mut dq = Mat::zeros(vq.rows, d);
                    let mut dk = Mat::zeros(vk.rows, d);
                    let mut dv = Mat::zeros(vv.rows, d);
                    for (seg, (bq, bk, bv)) in segs.iter().zip(results) {
                        for (o, x) in dq.data[seg.q_start * d..(seg.q_start + seg.q_len) * d].iter_mut().zip(bq) {
                            *o += x;
                        }
                        for (o, x) in dk.data[seg.k_start * d..(seg.k_start + seg.k_len) * d].iter_mut().zip(bk) {
                            *o += x;
                        }
                        for (o, x) in dv.data[seg.k_start * d..(seg.k_start + seg.k_len) * d].iter_mut().zip(bv) {
                            *o += x;
                        }
                    }
                    if self.needs(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if self.needs(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if self.needs(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in dt.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Dropout { x, mask } => {
                    let dx =
                        Mat::from_vec(g.rows, g.cols, g.data.iter().zip(mask).map(|(&d, &m)| d * m).collect());
                    acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, targets, weights, probs, norm } => {
                    let upstream = g.data[0];
                    let mut dl = probs.clone();
                    for r in 0..dl.rows {
                        let w = weights[r] * upstream / *norm;
                        let row = dl.row_mut(r);
                        if w == T::zero() {
                            row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        row[targets[r] as usize] -= T::one();
                        row.iter_mut().for_each(|v| *v *= w);
                    }
                    acc(&mut grads, *logits, dl);
                }
            }
        }
        param_grads
    }
}

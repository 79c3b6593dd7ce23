use super::graph::{Graph, Node, Op, Var};
use super::ops;
use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient for `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.take(v).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

struct Acc<'a, T> {
    nodes: &'a [Node<T>],
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Acc<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, contrib: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }
}

impl<T: Scalar> Graph<T> {
    /// Reverse-mode sweep from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes;
        if nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                nodes[loss.0].value.shape().to_vec(),
            ));
        }
        let mut acc = Acc {
            nodes: &nodes,
            grads: vec![None; nodes.len()],
        };
        acc.grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = acc.grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g,
                    });
                }
                Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    let (a, b) = (*a, *b);
                    if acc.wants(a) {
                        let d = if acc.shape(a) == node.value.shape() {
                            g.clone()
                        } else {
                            ops::reduce_broadcast(plan, acc.val(a).len(), true, |o, _, _| g[o])
                        };
                        acc.add(a, d);
                    }
                    if acc.wants(b) {
                        let d = if acc.shape(b) == node.value.shape() {
                            g.iter().map(|&v| v * sign).collect()
                        } else {
                            ops::reduce_broadcast(plan, acc.val(b).len(), false, |o, _, _| {
                                g[o] * sign
                            })
                        };
                        acc.add(b, d);
                    }
                }
                Op::Mul(a, b, plan) => {
                    let (a, b) = (*a, *b);
                    if acc.wants(a) {
                        let bv = acc.val(b);
                        let d = ops::reduce_broadcast(plan, acc.val(a).len(), true, |o, _, r| {
                            g[o] * bv[r]
                        });
                        acc.add(a, d);
                    }
                    if acc.wants(b) {
                        let av = acc.val(a);
                        let d = ops::reduce_broadcast(plan, acc.val(b).len(), false, |o, l, _| {
                            g[o] * av[l]
                        });
                        acc.add(b, d);
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc.add(*x, g.iter().map(|&v| v * c).collect());
                }
                Op::Shift(x) | Op::Reshape(x) => acc.add(*x, g),
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (acc.shape(a)[0], acc.shape(a)[1]);
                    let n = acc.shape(b)[1];
                    if acc.wants(a) {
                        let mut d = vec![T::zero(); m * k];
                        T::gemm(m, n, k, &g, false, acc.val(b), true, &mut d, false);
                        acc.add(a, d);
                    }
                    if acc.wants(b) {
                        let mut d = vec![T::zero(); k * n];
                        T::gemm(k, m, n, acc.val(a), true, &g, false, &mut d, false);
                        acc.add(b, d);
                    }
                }
                Op::Conv2d { x, w, b, dims } => {
                    let (x, w, b) = (*x, *w, *b);
                    let want_db = b.is_some_and(|b| acc.wants(b));
                    let (dx, dw, db) = ops::conv2d_backward(
                        *dims,
                        acc.val(x),
                        acc.val(w),
                        &g,
                        acc.wants(x),
                        acc.wants(w),
                        want_db,
                    );
                    if let Some(dx) = dx {
                        acc.add(x, dx);
                    }
                    if let Some(dw) = dw {
                        acc.add(w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        acc.add(b, db);
                    }
                }
                Op::AvgPool2(x) => {
                    let s = acc.shape(*x);
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let planes = s[..s.len() - 2].iter().product();
                    acc.add(*x, ops::avg_pool2_backward(&g, planes, h, w));
                }
                Op::Upsample2(x) => {
                    let s = acc.shape(*x);
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let planes = s[..s.len() - 2].iter().product();
                    acc.add(*x, ops::upsample2_backward(&g, planes, h, w));
                }
                Op::Relu(x) => {
                    let xv = acc.val(*x);
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    acc.add(*x, d);
                }
                Op::Gelu(x) => {
                    let xv = acc.val(*x);
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| gv * ops::gelu_grad(v))
                        .collect();
                    acc.add(*x, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    saved,
                } => {
                    let s = acc.shape(*x);
                    let (n, c) = (s[0], s[1]);
                    let inner = s[2..].iter().product();
                    let (dx, dg, db) =
                        ops::layer_norm_channels_backward(&g, saved, n, c, inner, acc.val(*gain));
                    acc.add(*x, dx);
                    acc.add(*gain, dg);
                    acc.add(*bias, db);
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().expect("softmax has an axis");
                    let mut d = vec![T::zero(); g.len()];
                    for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(d.chunks_mut(cols))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc.add(*x, d);
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().expect("log_softmax has an axis");
                    let mut d = vec![T::zero(); g.len()];
                    for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(d.chunks_mut(cols))
                    {
                        let total: T = gr.iter().copied().sum();
                        for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    acc.add(*x, d);
                }
                Op::Gather { x, index } => {
                    let cols = *acc.shape(*x).last().expect("gather has an axis");
                    let mut d = vec![T::zero(); acc.val(*x).len()];
                    for (r, (&i, &gv)) in index.iter().zip(&g).enumerate() {
                        d[r * cols + i] += gv;
                    }
                    acc.add(*x, d);
                }
                Op::Concat { parts, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let chunk = acc.shape(p)[*axis] * inner;
                        if acc.wants(p) {
                            let mut d = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                d.extend_from_slice(
                                    &g[o * total + offset..o * total + offset + chunk],
                                );
                            }
                            acc.add(p, d);
                        }
                        offset += chunk;
                    }
                }
                Op::Permute { x, perm } => {
                    let inv = ops::inverse_permutation(perm);
                    let (d, _) = ops::permute(&g, node.value.shape(), &inv);
                    acc.add(*x, d);
                }
                Op::Sum(x) => {
                    let n = acc.val(*x).len();
                    acc.add(*x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = acc.val(*x).len();
                    acc.add(*x, vec![g[0] / T::lit(n as f64); n]);
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

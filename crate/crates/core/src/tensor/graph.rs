use super::ops::{self, Broadcast, ConvDims, LayerNormSaved};
use super::{invalid, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    /// Input, parameter, or a value computed without any grad-requiring input.
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    Shift(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        saved: LayerNormSaved<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// A computation tape. Operations append nodes in execution order, so the
/// node list is always topologically sorted. Nodes that do not depend on any
/// grad-requiring leaf are stored as plain values.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = self.rg(inputs);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Tensor { shape, data },
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let plan = Broadcast::new(sa, sb).ok_or_else(|| mismatch(name, sa, sb))?;
        let data = ops::broadcast_binary(&plan, self.value(a).data(), self.value(b).data(), f);
        let shape = plan.out.clone();
        Ok(self.push(shape, data, make(a, b, plan), &[a, b]))
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * c).collect();
        let shape = v.shape().to_vec();
        self.push(shape, data, Op::Scale(x, c), &[x])
    }

    pub fn shift(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e + c).collect();
        let shape = v.shape().to_vec();
        self.push(shape, data, Op::Shift(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Stride-1 convolution with zero "same" padding. `x: [n, c_in, h, w]`,
    /// `w: [c_out, c_in, k, k]` with odd `k`, optional `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(mismatch("conv2d", sx, sw));
        }
        let dims = ConvDims {
            n: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            h: sx[2],
            w: sx[3],
            k: sw[2],
        };
        if let Some(b) = b {
            if self.shape(b) != [dims.c_out] {
                return Err(mismatch("conv2d bias", self.shape(b), &[dims.c_out]));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let out = ops::conv2d_forward(dims, self.value(x).data(), self.value(w).data(), bias);
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(
            vec![dims.n, dims.c_out, dims.h, dims.w],
            out,
            Op::Conv2d { x, w, b, dims },
            &inputs,
        ))
    }

    fn spatial(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, Vec<usize>)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(invalid(op, format!("need at least 2 dims, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product();
        Ok((planes, h, w, s.to_vec()))
    }

    /// 2×2 average pooling over the last two axes (both must be even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w, mut shape) = self.spatial("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid(
                "avg_pool2",
                format!("spatial dims must be even, got {shape:?}"),
            ));
        }
        let out = ops::avg_pool2(self.value(x).data(), planes, h, w);
        let r = shape.len();
        shape[r - 2] /= 2;
        shape[r - 1] /= 2;
        Ok(self.push(shape, out, Op::AvgPool2(x), &[x]))
    }

    /// Nearest-neighbour 2× upsampling over the last two axes.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w, mut shape) = self.spatial("upsample2", x)?;
        let out = ops::upsample2(self.value(x).data(), planes, h, w);
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        Ok(self.push(shape, out, Op::Upsample2(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e.max(T::zero())).collect();
        let shape = v.shape().to_vec();
        self.push(shape, data, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| ops::gelu(e)).collect();
        let shape = v.shape().to_vec();
        self.push(shape, data, Op::Gelu(x), &[x])
    }

    /// Layer normalization over axis 1 (channels) of an `[n, c, ...]` tensor,
    /// with per-channel `gain` and `bias` of shape `[c]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid(
                "layer_norm",
                format!("need [n, c, ...], got {s:?}"),
            ));
        }
        let c = s[1];
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(mismatch("layer_norm", &s, self.shape(p)));
            }
        }
        let inner = s[2..].iter().product();
        let (y, saved) = ops::layer_norm_channels(
            self.value(x).data(),
            s[0],
            c,
            inner,
            self.value(gain).data(),
            self.value(bias).data(),
        );
        Ok(self.push(
            s,
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                saved,
            },
            &[x, gain, bias],
        ))
    }

    fn last_dim(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(invalid(
                op,
                format!("need a nonempty last axis, got {:?}", self.shape(x)),
            )),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_dim("softmax", x)?;
        let v = self.value(x);
        let out = ops::softmax_rows(v.data(), cols);
        let shape = v.shape().to_vec();
        Ok(self.push(shape, out, Op::Softmax(x), &[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_dim("log_softmax", x)?;
        let v = self.value(x);
        let out = ops::log_softmax_rows(v.data(), cols);
        let shape = v.shape().to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax(x), &[x]))
    }

    /// Picks one entry of the last axis per row: `[..., k] -> [...]`.
    pub fn gather_last(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let cols = self.last_dim("gather", x)?;
        let s = self.shape(x);
        let rows = s[..s.len() - 1].iter().product::<usize>();
        if index.len() != rows {
            return Err(mismatch("gather", s, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(invalid(
                "gather",
                format!("index {bad} out of range for last axis {cols}"),
            ));
        }
        let shape = s[..s.len() - 1].to_vec();
        let data = self.value(x).data();
        let out = index
            .iter()
            .enumerate()
            .map(|(r, &i)| data[r * cols + i])
            .collect();
        Ok(self.push(
            shape,
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))
            .map(|&p| self.shape(p).to_vec())?;
        if axis >= first.len() {
            return Err(invalid(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !agrees {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(mismatch("reshape", v.shape(), shape));
        }
        let data = v.data().to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm
                .iter()
                .all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(invalid(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", s.len()),
            ));
        }
        let (out, shape) = ops::permute(self.value(x).data(), s, perm);
        Ok(self.push(
            shape,
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel().max(1) as f64);
        self.push(Vec::new(), vec![s], Op::Mean(x), &[x])
    }
}

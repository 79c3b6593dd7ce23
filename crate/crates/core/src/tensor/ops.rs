//! Slice-level kernels. Everything here is shape-checked by the caller.

use crate::scalar::Scalar;

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes (aligned on trailing dimensions).
#[derive(Debug, Clone)]
pub(crate) struct Broadcast {
    pub out: Vec<usize>,
    lhs_strides: Vec<usize>,
    rhs_strides: Vec<usize>,
}

impl Broadcast {
    pub fn new(lhs: &[usize], rhs: &[usize]) -> Option<Self> {
        let rank = lhs.len().max(rhs.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (l, r) = (pad(lhs), pad(rhs));
        let mut out = Vec::with_capacity(rank);
        for (&a, &b) in l.iter().zip(&r) {
            if a == b || b == 1 {
                out.push(a);
            } else if a == 1 {
                out.push(b);
            } else {
                return None;
            }
        }
        let masked = |s: &[usize]| -> Vec<usize> {
            contiguous_strides(s)
                .into_iter()
                .zip(s.iter().zip(&out))
                .map(|(st, (&d, &o))| if d == 1 && o != 1 { 0 } else { st })
                .collect()
        };
        Some(Self {
            lhs_strides: masked(&l),
            rhs_strides: masked(&r),
            out,
        })
    }

    pub fn numel(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(out_index, lhs_index, rhs_index)` for every output element in
    /// row-major order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let last = self.out[rank - 1];
        let (ls, rs) = (self.lhs_strides[rank - 1], self.rhs_strides[rank - 1]);
        let outer: usize = self.out[..rank - 1].iter().product();
        let mut idx = vec![0usize; rank - 1];
        for o in 0..outer {
            let mut lb = 0;
            let mut rb = 0;
            for (d, &i) in idx.iter().enumerate() {
                lb += i * self.lhs_strides[d];
                rb += i * self.rhs_strides[d];
            }
            let ob = o * last;
            for j in 0..last {
                f(ob + j, lb + j * ls, rb + j * rs);
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < self.out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

pub(crate) fn broadcast_binary<T: Scalar>(
    plan: &Broadcast,
    lhs: &[T],
    rhs: &[T],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if lhs.len() == rhs.len() && lhs.len() == plan.numel() {
        return lhs.iter().zip(rhs).map(|(&a, &b)| f(a, b)).collect();
    }
    let mut out = vec![T::zero(); plan.numel()];
    plan.for_each(|o, l, r| out[o] = f(lhs[l], rhs[r]));
    out
}

/// Sums a gradient over the output shape back down to one operand's shape.
/// `per_elem(o, l, r)` gives the contribution of output element `o`.
pub(crate) fn reduce_broadcast<T: Scalar>(
    plan: &Broadcast,
    operand_len: usize,
    lhs_side: bool,
    per_elem: impl Fn(usize, usize, usize) -> T,
) -> Vec<T> {
    let mut acc = vec![T::zero(); operand_len];
    plan.for_each(|o, l, r| {
        let v = per_elem(o, l, r);
        if lhs_side {
            acc[l] += v;
        } else {
            acc[r] += v;
        }
    });
    acc
}

/// Unfolds one `[c, h, w]` image into `[c*k*k, h*w]` patches with zero "same"
/// padding.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out_row[..x_lo].fill(T::zero());
                    out_row[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
#[cfg(test)]
pub(crate) fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    dx_img: &mut [T],
) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx_img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst =
                        &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, &g) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Cache-blocked transpose of a row-major `rows×cols` matrix.
pub(crate) fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    d: ConvDims,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = d.h * d.w;
    let patch = d.patch();
    let mut out = vec![T::zero(); d.n * d.c_out * hw];
    let mut col = if d.k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); patch * hw]
    };
    for b in 0..d.n {
        let xb = &x[b * d.c_in * hw..(b + 1) * d.c_in * hw];
        let ob = &mut out[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        let cols: &[T] = if d.k == 1 {
            xb
        } else {
            im2col(xb, d.c_in, d.h, d.w, d.k, &mut col);
            &col
        };
        T::gemm(d.c_out, patch, hw, weight, false, cols, false, ob, false);
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(hw).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// `[c_out, c_in, k, k]` -> `[c_in, c_out, k, k]` with both spatial axes
/// reversed: the kernel of the adjoint ("transposed") convolution.
fn flip_transpose_kernel<T: Scalar>(w: &[T], c_out: usize, c_in: usize, k: usize) -> Vec<T> {
    let kk = k * k;
    let mut out = vec![T::zero(); w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            let src = &w[(co * c_in + ci) * kk..(co * c_in + ci + 1) * kk];
            let dst = &mut out[(ci * c_out + co) * kk..(ci * c_out + co + 1) * kk];
            for (i, &v) in src.iter().enumerate() {
                dst[kk - 1 - i] = v;
            }
        }
    }
    out
}

/// Returns (dx, dweight, dbias) for the requested parts.
///
/// The input gradient is computed as a same-padded convolution of the
/// upstream gradient with the flipped, transposed kernel.
pub(crate) fn conv2d_backward<T: Scalar>(
    d: ConvDims,
    x: &[T],
    weight: &[T],
    grad: &[T],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = d.h * d.w;
    let patch = d.patch();
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); weight.len()]);
    let mut db = want_db.then(|| vec![T::zero(); d.c_out]);
    // matrixmultiply packs a transposed right operand slowly, so the weight
    // gradient uses an explicitly transposed patch matrix instead.
    let mut col = if d.k == 1 || !want_dw {
        Vec::new()
    } else {
        vec![T::zero(); patch * hw]
    };
    let mut col_t = if want_dw {
        vec![T::zero(); patch * hw]
    } else {
        Vec::new()
    };
    let adjoint = (want_dx && d.k > 1).then(|| flip_transpose_kernel(weight, d.c_out, d.c_in, d.k));
    let mut gcol = if adjoint.is_some() {
        vec![T::zero(); d.c_out * d.k * d.k * hw]
    } else {
        Vec::new()
    };
    for b in 0..d.n {
        let xb = &x[b * d.c_in * hw..(b + 1) * d.c_in * hw];
        let gb = &grad[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if d.k == 1 {
                xb
            } else {
                im2col(xb, d.c_in, d.h, d.w, d.k, &mut col);
                &col
            };
            transpose_into(cols, patch, hw, &mut col_t);
            T::gemm(d.c_out, hw, patch, gb, false, &col_t, false, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * d.c_in * hw..(b + 1) * d.c_in * hw];
            match &adjoint {
                None => T::gemm(d.c_in, d.c_out, hw, weight, true, gb, false, dxb, false),
                Some(wt) => {
                    im2col(gb, d.c_out, d.h, d.w, d.k, &mut gcol);
                    T::gemm(
                        d.c_in,
                        d.c_out * d.k * d.k,
                        hw,
                        wt,
                        false,
                        &gcol,
                        false,
                        dxb,
                        false,
                    );
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in gb.chunks(hw).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 mean pooling over the last two axes of `[planes, h, w]`.
pub(crate) fn avg_pool2<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let r0 = &src[2 * y * w..(2 * y + 1) * w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
            for xo in 0..ow {
                dst[y * ow + xo] =
                    (r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1]) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling of `[planes, h, w]`.
pub(crate) fn upsample2<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xo, v) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = srow[xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    dx
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes `[n, c, inner]` over `c` independently at every `(n, inner)`
/// position, then applies the per-channel affine `gain`, `bias`.
pub(crate) fn layer_norm_channels<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    inner: usize,
    gain: &[T],
    bias: &[T],
) -> (Vec<T>, LayerNormSaved<T>) {
    let inv_c = T::one() / T::lit(c as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n * inner];
    let mut mean = vec![T::zero(); inner];
    for b in 0..n {
        let base = b * c * inner;
        let xs = &x[base..base + c * inner];
        mean.fill(T::zero());
        for row in xs.chunks(inner) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let rs = &mut rstd[b * inner..(b + 1) * inner];
        rs.fill(T::zero());
        for row in xs.chunks(inner) {
            for ((r, &v), &m) in rs.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *r += d * d;
            }
        }
        rs.iter_mut()
            .for_each(|r| *r = T::one() / (*r * inv_c + eps).sqrt());
        for ci in 0..c {
            let off = base + ci * inner;
            let (g, bb) = (gain[ci], bias[ci]);
            for p in 0..inner {
                let xh = (x[off + p] - mean[p]) * rs[p];
                xhat[off + p] = xh;
                y[off + p] = xh * g + bb;
            }
        }
    }
    (y, LayerNormSaved { xhat, rstd })
}

/// Returns (dx, dgain, dbias).
pub(crate) fn layer_norm_channels_backward<T: Scalar>(
    g: &[T],
    saved: &LayerNormSaved<T>,
    n: usize,
    c: usize,
    inner: usize,
    gain: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_c = T::one() / T::lit(c as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dgain = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    let mut mean_d = vec![T::zero(); inner];
    let mut mean_dx = vec![T::zero(); inner];
    for b in 0..n {
        let base = b * c * inner;
        mean_d.fill(T::zero());
        mean_dx.fill(T::zero());
        for ci in 0..c {
            let off = base + ci * inner;
            let gc = gain[ci];
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for p in 0..inner {
                let gv = g[off + p];
                let xh = saved.xhat[off + p];
                sg += gv;
                sgx += gv * xh;
                let dxh = gv * gc;
                mean_d[p] += dxh;
                mean_dx[p] += dxh * xh;
            }
            dbias[ci] += sg;
            dgain[ci] += sgx;
        }
        let rs = &saved.rstd[b * inner..(b + 1) * inner];
        for ci in 0..c {
            let off = base + ci * inner;
            let gc = gain[ci];
            for p in 0..inner {
                let dxh = g[off + p] * gc;
                dx[off + p] =
                    rs[p] * (dxh - mean_d[p] * inv_c - saved.xhat[off + p] * mean_dx[p] * inv_c);
            }
        }
    }
    (dx, dgain, dbias)
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            s += *d;
        }
        let inv = T::one() / s;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

pub(crate) fn log_softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

/// Gathers `x[perm-applied index]`: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let plan = Broadcast {
        out: out_shape.clone(),
        lhs_strides: src_strides,
        rhs_strides: vec![0; perm.len()],
    };
    let mut out = vec![T::zero(); x.len()];
    plan.for_each(|o, s, _| out[o] = x[s]);
    (out, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

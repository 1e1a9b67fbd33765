//! Differentiable operations. Every op validates shapes up front, computes
//! the forward value eagerly, and attaches a backward closure producing the
//! vector-Jacobian product for each parent.

use std::sync::Arc;

use super::{strides_of, Scalar, Tensor};
use crate::error::{Error, Result};

/// numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(
    a: &[usize],
    b: &[usize],
    op: &'static str,
) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides into a (right-aligned, broadcast) operand of `out`-shaped walks;
/// broadcast dimensions get stride 0.
fn bcast_strides(shape: &[usize], out_nd: usize) -> Vec<usize> {
    let real = strides_of(shape);
    let mut s = vec![0usize; out_nd];
    let off = out_nd - shape.len();
    for i in 0..shape.len() {
        s[off + i] = if shape[i] == 1 { 0 } else { real[i] };
    }
    s
}

/// Odometer walk over `out_shape` calling `f(out_idx, a_idx, b_idx)`.
fn for_each_bcast2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    let nd = out_shape.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; nd];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..numel {
        f(oi, ai, bi);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ai -= sa[d] * out_shape[d];
            bi -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

macro_rules! binary_bcast {
    ($name:ident, $opname:literal, $fwd:expr, $bwd_a:expr, $bwd_b:expr) => {
        pub fn $name(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
            let out_shape = broadcast_shape(self.shape(), rhs.shape(), $opname)?;
            let numel: usize = out_shape.iter().product();
            let fwd: fn(T, T) -> T = $fwd;
            let mut data = vec![T::zero(); numel];
            if self.shape() == rhs.shape() {
                for ((o, &a), &b) in data.iter_mut().zip(self.data()).zip(rhs.data()) {
                    *o = fwd(a, b);
                }
            } else {
                let sa = bcast_strides(self.shape(), out_shape.len());
                let sb = bcast_strides(rhs.shape(), out_shape.len());
                let (ad, bd) = (self.data(), rhs.data());
                for_each_bcast2(&out_shape, &sa, &sb, |oi, ai, bi| {
                    data[oi] = fwd(ad[ai], bd[bi]);
                });
            }
            let (a, b) = (self.clone(), rhs.clone());
            let shape_c = out_shape.clone();
            Ok(Tensor::from_op(
                data,
                out_shape,
                vec![self.clone(), rhs.clone()],
                move |_out, g| {
                    let bwd_a: fn(T, T, T) -> T = $bwd_a;
                    let bwd_b: fn(T, T, T) -> T = $bwd_b;
                    let mut ga = if a.requires_grad() {
                        Some(vec![T::zero(); a.numel()])
                    } else {
                        None
                    };
                    let mut gb = if b.requires_grad() {
                        Some(vec![T::zero(); b.numel()])
                    } else {
                        None
                    };
                    let sa = bcast_strides(a.shape(), shape_c.len());
                    let sb = bcast_strides(b.shape(), shape_c.len());
                    let (ad, bd) = (a.data(), b.data());
                    for_each_bcast2(&shape_c, &sa, &sb, |oi, ai, bi| {
                        if let Some(ga) = ga.as_mut() {
                            ga[ai] += bwd_a(g[oi], ad[ai], bd[bi]);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[bi] += bwd_b(g[oi], ad[ai], bd[bi]);
                        }
                    });
                    vec![ga, gb]
                },
            ))
        }
    };
}

macro_rules! unary_op {
    ($name:ident, $fwd:expr, $bwd:expr) => {
        pub fn $name(&self) -> Tensor<T> {
            let fwd: fn(T) -> T = $fwd;
            let data: Vec<T> = self.data().iter().map(|&x| fwd(x)).collect();
            let x = self.clone();
            Tensor::from_op(
                data,
                self.shape().to_vec(),
                vec![self.clone()],
                move |out, g| {
                    let bwd: fn(T, T, T) -> T = $bwd; // (x, y, g) -> dx
                    let xd = x.data();
                    let yd = out.data();
                    let dx = g
                        .iter()
                        .zip(xd.iter().zip(yd.iter()))
                        .map(|(&gi, (&xi, &yi))| bwd(xi, yi, gi))
                        .collect();
                    vec![Some(dx)]
                },
            )
        }
    };
}

impl<T: Scalar> Tensor<T> {
    binary_bcast!(add, "add", |a, b| a + b, |g, _a, _b| g, |g, _a, _b| g);
    binary_bcast!(sub, "sub", |a, b| a - b, |g, _a, _b| g, |g, _a, _b| -g);
    binary_bcast!(mul, "mul", |a, b| a * b, |g, _a, b| g * b, |g, a, _b| g * a);
    binary_bcast!(
        div,
        "div",
        |a, b| a / b,
        |g, _a, b| g / b,
        |g, a, b| -g * a / (b * b)
    );

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::fr(c);
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |_o, g| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::fr(c);
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |_o, g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    // GELU, tanh approximation. The 0.044715 cubic constant is part of the
    // contract so independent ports agree to 1e-6.
    unary_op!(gelu, gelu_fwd, |x, _y, g| g * gelu_grad(x));
    unary_op!(sigmoid, sigmoid_fwd, |_x, y, g| g * y * (T::one() - y));
    unary_op!(tanh_act, |x| x.tanh(), |_x, y, g| g * (T::one() - y * y));
    unary_op!(softplus, softplus_fwd, |x, _y, g| g * sigmoid_fwd(x));
    unary_op!(abs, |x| x.abs(), |x, _y, g| g * sign_of(x));
    unary_op!(sqrt, |x| x.sqrt(), |_x, y: T, g: T| g
        / (T::fr(2.0) * y.max(T::fr(1e-12))));

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let s = T::fr(slope);
        let data = self
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { x * s })
            .collect();
        let x = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |_o, g| {
            let dx = g
                .iter()
                .zip(x.data())
                .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * s })
                .collect();
            vec![Some(dx)]
        })
    }

    /// Hard clamp; gradient passes only inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::fr(lo), T::fr(hi));
        let data = self.data().iter().map(|&x| x.max(lo).min(hi)).collect();
        let x = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |_o, g| {
            let dx = g
                .iter()
                .zip(x.data())
                .map(|(&gi, &xi)| if xi > lo && xi < hi { gi } else { T::zero() })
                .collect();
            vec![Some(dx)]
        })
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], move |_o, g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Sum over `axes`. With `keepdims` the reduced extents stay as 1.
    pub fn sum_axes(&self, axes: &[usize], keepdims: bool) -> Result<Tensor<T>> {
        let nd = self.ndim();
        for &ax in axes {
            if ax >= nd {
                return Err(Error::Dim(format!(
                    "sum_axes: axis {ax} out of range for shape {:?}",
                    self.shape()
                )));
            }
        }
        let mut reduced = vec![false; nd];
        for &ax in axes {
            reduced[ax] = true;
        }
        let kept_shape: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &d)| if reduced[i] { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = if keepdims {
            kept_shape.clone()
        } else {
            let s: Vec<usize> = self
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !reduced[*i])
                .map(|(_, &d)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };

        // Map every input element to its slot in the kept-dims layout.
        let out_numel: usize = kept_shape.iter().product();
        let kept_strides = strides_of(&kept_shape);
        let in_shape = self.shape().to_vec();
        let mut data = vec![T::zero(); out_numel];
        {
            let xd = self.data();
            let mut idx = vec![0usize; nd];
            let mut oi = 0usize;
            for &v in xd.iter() {
                data[oi] += v;
                for d in (0..nd).rev() {
                    idx[d] += 1;
                    if !reduced[d] {
                        oi += kept_strides[d];
                    }
                    if idx[d] < in_shape[d] {
                        break;
                    }
                    if !reduced[d] {
                        oi -= kept_strides[d] * in_shape[d];
                    }
                    idx[d] = 0;
                }
            }
        }

        let n_in = self.numel();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            move |_o, g| {
                let mut dx = vec![T::zero(); n_in];
                let mut idx = vec![0usize; nd];
                let mut oi = 0usize;
                for slot in dx.iter_mut() {
                    *slot = g[oi];
                    for d in (0..nd).rev() {
                        idx[d] += 1;
                        if !reduced[d] {
                            oi += kept_strides[d];
                        }
                        if idx[d] < in_shape[d] {
                            break;
                        }
                        if !reduced[d] {
                            oi -= kept_strides[d] * in_shape[d];
                        }
                        idx[d] = 0;
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdims: bool) -> Result<Tensor<T>> {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        Ok(self.sum_axes(axes, keepdims)?.scale(1.0 / count as f64))
    }

    /// Spatial mean of a `[b,c,h,w]` map, yielding `[b,c]`.
    pub fn avgpool_global(&self) -> Result<Tensor<T>> {
        if self.ndim() != 4 {
            return Err(Error::Dim(format!(
                "avgpool_global expects [b,c,h,w], got {:?}",
                self.shape()
            )));
        }
        self.mean_axes(&[2, 3], false)
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dim(format!(
                "reshape: {:?} ({} elems) -> {:?} ({} elems)",
                self.shape(),
                self.numel(),
                shape,
                numel
            )));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |_o, g| vec![Some(g.to_vec())],
        ))
    }

    /// Materialized axis permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Dim(format!(
                "permute: invalid axes {:?} for shape {:?}",
                axes,
                self.shape()
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_copy(self.data(), self.shape(), axes);
        let inv: Vec<usize> = {
            let mut inv = vec![0usize; nd];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            inv
        };
        let out_shape_c = out_shape.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            move |_o, g| vec![Some(permute_copy(g, &out_shape_c, &inv))],
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::Dim("transpose needs ndim >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let nd = self.ndim();
        if axis >= nd || start + len > self.shape()[axis] || len == 0 {
            return Err(Error::Dim(format!(
                "narrow: axis {axis} range {start}..{} out of bounds for {:?}",
                start + len,
                self.shape()
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let full = self.shape()[axis];
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        let xd = self.data();
        for o in 0..outer {
            let src = (o * full + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
        let n_in = self.numel();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            move |_o, g| {
                let mut dx = vec![T::zero(); n_in];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Gather by a precomputed flat-index map; entries `< 0` produce zeros.
    /// The adjoint is scatter-add over the same map.
    pub fn gather_flat(&self, map: Arc<Vec<i64>>, out_shape: &[usize]) -> Tensor<T> {
        debug_assert_eq!(map.len(), out_shape.iter().product::<usize>());
        let xd = self.data();
        let data: Vec<T> = map
            .iter()
            .map(|&m| if m < 0 { T::zero() } else { xd[m as usize] })
            .collect();
        let n_in = self.numel();
        let map_b = Arc::clone(&map);
        Tensor::from_op(
            data,
            out_shape.to_vec(),
            vec![self.clone()],
            move |_o, g| {
                let mut dx = vec![T::zero(); n_in];
                for (gi, &m) in g.iter().zip(map_b.iter()) {
                    if m >= 0 {
                        dx[m as usize] += *gi;
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    /// Repeat along a new leading batch axis.
    pub fn tile_batch(&self, b: usize) -> Tensor<T> {
        let n = self.numel();
        let map: Vec<i64> = (0..b * n).map(|i| (i % n) as i64).collect();
        let mut shape = vec![b];
        shape.extend_from_slice(self.shape());
        self.gather_flat(Arc::new(map), &shape)
    }

    // ── matmul / linear ─────────────────────────────────────────────────

    /// Batched matmul: `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcastable leading dims.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (ashape, bshape) = (self.shape(), rhs.shape());
        if ashape.len() < 2 || bshape.len() < 2 || ashape[ashape.len() - 1] != bshape[bshape.len() - 2]
        {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let m = ashape[ashape.len() - 2];
        let k = ashape[ashape.len() - 1];
        let n = bshape[bshape.len() - 1];
        let batch =
            broadcast_shape(&ashape[..ashape.len() - 2], &bshape[..bshape.len() - 2], "matmul")?;
        let nbatch: usize = batch.iter().product();

        let sa = bcast_strides(&ashape[..ashape.len() - 2], batch.len())
            .iter()
            .map(|&s| s * m * k)
            .collect::<Vec<_>>();
        let sb = bcast_strides(&bshape[..bshape.len() - 2], batch.len())
            .iter()
            .map(|&s| s * k * n)
            .collect::<Vec<_>>();

        let mut out = vec![T::zero(); nbatch * m * n];
        let (ad, bd) = (self.data(), rhs.data());
        let mut offsets = Vec::with_capacity(nbatch);
        for_each_bcast2(&batch, &sa, &sb, |oi, ai, bi| offsets.push((oi, ai, bi)));
        for &(oi, ai, bi) in &offsets {
            T::gemm(
                false,
                false,
                m,
                k,
                n,
                T::one(),
                &ad[ai..ai + m * k],
                &bd[bi..bi + k * n],
                T::zero(),
                &mut out[oi * m * n..(oi + 1) * m * n],
            );
        }

        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), rhs.clone()],
            move |_o, g| {
                let (ad, bd) = (a.data(), b.data());
                let ga = if a.requires_grad() {
                    let mut da = vec![T::zero(); a.numel()];
                    for &(oi, ai, bi) in &offsets {
                        // dA = dC . B^T
                        T::gemm(
                            false,
                            true,
                            m,
                            n,
                            k,
                            T::one(),
                            &g[oi * m * n..(oi + 1) * m * n],
                            &bd[bi..bi + k * n],
                            T::one(),
                            &mut da[ai..ai + m * k],
                        );
                    }
                    Some(da)
                } else {
                    None
                };
                let gb = if b.requires_grad() {
                    let mut db = vec![T::zero(); b.numel()];
                    for &(oi, ai, bi) in &offsets {
                        // dB = A^T . dC
                        T::gemm(
                            true,
                            false,
                            k,
                            m,
                            n,
                            T::one(),
                            &ad[ai..ai + m * k],
                            &g[oi * m * n..(oi + 1) * m * n],
                            T::one(),
                            &mut db[bi..bi + k * n],
                        );
                    }
                    Some(db)
                } else {
                    None
                };
                vec![ga, gb]
            },
        ))
    }

    /// Affine map over the trailing axis: `y = x . w^T + b` with `w: [out, in]`.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let in_dim = *self.shape().last().ok_or_else(|| Error::Dim("linear: empty shape".into()))?;
        if w.ndim() != 2 || w.shape()[1] != in_dim {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let out_dim = w.shape()[0];
        if let Some(b) = b {
            if b.shape() != [out_dim] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![out_dim],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let rows = self.numel() / in_dim;
        let mut out = vec![T::zero(); rows * out_dim];
        // y[rows, out] = x[rows, in] . w[out, in]^T
        T::gemm(
            false,
            true,
            rows,
            in_dim,
            out_dim,
            T::one(),
            self.data(),
            w.data(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bd = b.data();
            for r in 0..rows {
                for (o, &bv) in out[r * out_dim..(r + 1) * out_dim].iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = out_dim;

        let x = self.clone();
        let wt = w.clone();
        let mut parents = vec![self.clone(), w.clone()];
        let bias = b.cloned();
        if let Some(b) = b {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(out, out_shape, parents, move |_o, g| {
            let mut grads = Vec::with_capacity(3);
            if x.requires_grad() {
                // dx[rows, in] = g[rows, out] . w[out, in]
                let mut dx = vec![T::zero(); rows * in_dim];
                T::gemm(false, false, rows, out_dim, in_dim, T::one(), g, wt.data(), T::zero(), &mut dx);
                grads.push(Some(dx));
            } else {
                grads.push(None);
            }
            if wt.requires_grad() {
                // dw[out, in] = g^T[out, rows] . x[rows, in]
                let mut dw = vec![T::zero(); out_dim * in_dim];
                T::gemm(true, false, out_dim, rows, in_dim, T::one(), g, x.data(), T::zero(), &mut dw);
                grads.push(Some(dw));
            } else {
                grads.push(None);
            }
            if let Some(b) = bias.as_ref() {
                if b.requires_grad() {
                    let mut db = vec![T::zero(); out_dim];
                    for r in 0..rows {
                        for (slot, &gv) in db.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]) {
                            *slot += gv;
                        }
                    }
                    grads.push(Some(db));
                } else {
                    grads.push(None);
                }
            }
            grads
        }))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// 2-D cross-correlation with zero padding.
    /// `x: [b,c,h,w]`, `kernel: [o,c,kh,kw]` (odd extents), optional bias `[o]`.
    pub fn conv2d(
        &self,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        if self.ndim() != 4 || kernel.ndim() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let (b, c, h, w) = dims4(self.shape());
        let (o, kc, kh, kw) = dims4(kernel.shape());
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Dim(format!("conv2d: kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Dim("conv2d: stride must be positive".into()));
        }
        let oh_num = (h + 2 * pad) as isize - kh as isize;
        let ow_num = (w + 2 * pad) as isize - kw as isize;
        if oh_num < 0 || ow_num < 0 {
            return Err(Error::Dim(format!(
                "conv2d: kernel {kh}x{kw} with pad {pad} exceeds input {h}x{w}"
            )));
        }
        let oh = oh_num as usize / stride + 1;
        let ow = ow_num as usize / stride + 1;
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: bias.shape().to_vec(),
                });
            }
        }

        let ckk = c * kh * kw;
        let mut out = vec![T::zero(); b * o * oh * ow];
        let mut cols = vec![T::zero(); oh * ow * ckk];
        let xd = self.data();
        let kd = kernel.data();
        for bi in 0..b {
            im2col(&xd[bi * c * h * w..], c, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
            // out_b[o, oh*ow] = w[o, ckk] . cols^T
            T::gemm(
                false,
                true,
                o,
                ckk,
                oh * ow,
                T::one(),
                kd,
                &cols,
                T::zero(),
                &mut out[bi * o * oh * ow..(bi + 1) * o * oh * ow],
            );
        }
        if let Some(bias) = bias {
            let bd = bias.data();
            for bi in 0..b {
                for oc in 0..o {
                    let base = (bi * o + oc) * oh * ow;
                    let bv = bd[oc];
                    for v in &mut out[base..base + oh * ow] {
                        *v += bv;
                    }
                }
            }
        }

        let x = self.clone();
        let k = kernel.clone();
        let bias_t = bias.cloned();
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![b, o, oh, ow],
            parents,
            move |_out, g| {
                let xd = x.data();
                let kd = k.data();
                let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(3);
                let mut dx = if x.requires_grad() {
                    Some(vec![T::zero(); x.numel()])
                } else {
                    None
                };
                let mut dk = if k.requires_grad() {
                    Some(vec![T::zero(); k.numel()])
                } else {
                    None
                };
                let mut cols = vec![T::zero(); oh * ow * ckk];
                let mut dcols = vec![T::zero(); ckk * oh * ow];
                for bi in 0..b {
                    let gb = &g[bi * o * oh * ow..(bi + 1) * o * oh * ow];
                    if let Some(dk) = dk.as_mut() {
                        im2col(&xd[bi * c * h * w..], c, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
                        // dw[o, ckk] += g_b[o, ohow] . cols[ohow, ckk]
                        T::gemm(false, false, o, oh * ow, ckk, T::one(), gb, &cols, T::one(), dk);
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols[ckk, ohow] = w^T[ckk, o] . g_b[o, ohow]
                        T::gemm(true, false, ckk, o, oh * ow, T::one(), kd, gb, T::zero(), &mut dcols);
                        col2im_add(
                            &dcols,
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            pad,
                            oh,
                            ow,
                            &mut dx[bi * c * h * w..(bi + 1) * c * h * w],
                        );
                    }
                }
                grads.push(dx);
                grads.push(dk);
                if let Some(bias) = bias_t.as_ref() {
                    if bias.requires_grad() {
                        let mut db = vec![T::zero(); o];
                        for bi in 0..b {
                            for oc in 0..o {
                                let base = (bi * o + oc) * oh * ow;
                                let mut s = T::zero();
                                for &gv in &g[base..base + oh * ow] {
                                    s += gv;
                                }
                                db[oc] += s;
                            }
                        }
                        grads.push(Some(db));
                    } else {
                        grads.push(None);
                    }
                }
                grads
            },
        ))
    }

    // ── softmax ─────────────────────────────────────────────────────────

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(Error::Dim(format!(
                "softmax: axis {axis} out of range for {:?}",
                self.shape()
            )));
        }
        let l = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let xd = self.data();
        let mut data = vec![T::zero(); self.numel()];
        for ou in 0..outer {
            for i in 0..inner {
                let base = ou * l * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..l {
                    mx = mx.max(xd[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..l {
                    let e = (xd[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    s += e;
                }
                for j in 0..l {
                    data[base + j * inner] /= s;
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |out, g| {
                let yd = out.data();
                let mut dx = vec![T::zero(); yd.len()];
                for ou in 0..outer {
                    for i in 0..inner {
                        let base = ou * l * inner + i;
                        let mut dot = T::zero();
                        for j in 0..l {
                            dot += g[base + j * inner] * yd[base + j * inner];
                        }
                        for j in 0..l {
                            let idx = base + j * inner;
                            dx[idx] = yd[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    // ── resampling ──────────────────────────────────────────────────────

    /// x2 bilinear upsampling of `[b,c,h,w]` (half-pixel centers).
    pub fn upsample_bilinear2x(&self) -> Result<Tensor<T>> {
        let (b, c, h, w) = dims4_checked(self.shape(), "upsample_bilinear2x")?;
        let ty = axis_taps_2x(h);
        let tx = axis_taps_2x(w);
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.data();
        let mut data = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1, wy) = ty[oy];
                let wyt = T::fr(wy);
                for ox in 0..ow {
                    let (x0, x1, wx) = tx[ox];
                    let wxt = T::fr(wx);
                    let a = src[y0 * w + x0]
                        + (src[y0 * w + x1] - src[y0 * w + x0]) * wxt;
                    let bv = src[y1 * w + x0]
                        + (src[y1 * w + x1] - src[y1 * w + x0]) * wxt;
                    dst[oy * ow + ox] = a + (bv - a) * wyt;
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![b, c, oh, ow],
            vec![self.clone()],
            move |_o, g| {
                let mut dx = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    let gsl = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let dsl = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1, wy) = ty[oy];
                        let wy = T::fr(wy);
                        for ox in 0..ow {
                            let (x0, x1, wx) = tx[ox];
                            let wx = T::fr(wx);
                            let gv = gsl[oy * ow + ox];
                            dsl[y0 * w + x0] += gv * (T::one() - wy) * (T::one() - wx);
                            dsl[y0 * w + x1] += gv * (T::one() - wy) * wx;
                            dsl[y1 * w + x0] += gv * wy * (T::one() - wx);
                            dsl[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// x2 nearest upsampling (ablation alternative to bilinear).
    pub fn upsample_nearest2x(&self) -> Result<Tensor<T>> {
        let (b, c, h, w) = dims4_checked(self.shape(), "upsample_nearest2x")?;
        let (oh, ow) = (2 * h, 2 * w);
        let map: Vec<i64> = (0..b * c * oh * ow)
            .map(|i| {
                let ox = i % ow;
                let oy = (i / ow) % oh;
                let bc = i / (oh * ow);
                ((bc * h + oy / 2) * w + ox / 2) as i64
            })
            .collect();
        Ok(self.gather_flat(Arc::new(map), &[b, c, oh, ow]))
    }

    /// Bilinear resample of a fractional box `(x0,y0,x1,y1)` to `oh x ow`.
    pub fn bilinear_resize_box(
        &self,
        oh: usize,
        ow: usize,
        bx: (f64, f64, f64, f64),
    ) -> Result<Tensor<T>> {
        let (b, c, h, w) = dims4_checked(self.shape(), "bilinear_resize_box")?;
        let (x0, y0, x1, y1) = bx;
        if !(x1 > x0 && y1 > y0) || oh == 0 || ow == 0 {
            return Err(Error::Config(format!(
                "degenerate resize box ({x0},{y0},{x1},{y1}) or empty output"
            )));
        }
        let ty = box_axis_taps(h, y0, y1, oh);
        let tx = box_axis_taps(w, x0, x1, ow);
        let xd = self.data();
        let mut data = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                let (yl, yh, wy) = ty[oy];
                let wy = T::fr(wy);
                for ox in 0..ow {
                    let (xl, xh, wx) = tx[ox];
                    let wx = T::fr(wx);
                    let a = src[yl * w + xl] + (src[yl * w + xh] - src[yl * w + xl]) * wx;
                    let bv = src[yh * w + xl] + (src[yh * w + xh] - src[yh * w + xl]) * wx;
                    dst[oy * ow + ox] = a + (bv - a) * wy;
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![b, c, oh, ow],
            vec![self.clone()],
            move |_o, g| {
                let mut dx = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    let gsl = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let dsl = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        let (yl, yh, wy) = ty[oy];
                        let wy = T::fr(wy);
                        for ox in 0..ow {
                            let (xl, xh, wx) = tx[ox];
                            let wx = T::fr(wx);
                            let gv = gsl[oy * ow + ox];
                            dsl[yl * w + xl] += gv * (T::one() - wy) * (T::one() - wx);
                            dsl[yl * w + xh] += gv * (T::one() - wy) * wx;
                            dsl[yh * w + xl] += gv * wy * (T::one() - wx);
                            dsl[yh * w + xh] += gv * wy * wx;
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Non-overlapping k x k average pooling; extents must divide.
    pub fn avgpool2d(&self, k: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = dims4_checked(self.shape(), "avgpool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Dim(format!("avgpool2d: {k} does not divide {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::fr(1.0 / (k * k) as f64);
        let xd = self.data();
        let mut data = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            s += src[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    dst[oy * ow + ox] = s * inv;
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![b, c, oh, ow],
            vec![self.clone()],
            move |_o, g| {
                let mut dx = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    let gsl = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let dsl = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gsl[oy * ow + ox] * inv;
                            for dy in 0..k {
                                for ddx in 0..k {
                                    dsl[(oy * k + dy) * w + ox * k + ddx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    // ── Haar transforms (orthonormal per 2x2 block) ─────────────────────

    /// Forward Haar step: `[b,c,h,w] -> [b,4c,h/2,w/2]` with subband blocks
    /// ordered `[ll | lh | hl | hh]` along the channel axis. The transform is
    /// orthonormal, so the backward pass is the inverse transform.
    pub fn dwt2_stack(&self) -> Result<Tensor<T>> {
        let (b, c, h, w) = dims4_checked(self.shape(), "dwt2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dim(format!("dwt2: extents must be even, got {h}x{w}")));
        }
        let data = dwt2_raw(self.data(), b, c, h, w);
        Ok(Tensor::from_op(
            data,
            vec![b, 4 * c, h / 2, w / 2],
            vec![self.clone()],
            move |_o, g| vec![Some(idwt2_raw(g, b, c, h, w))],
        ))
    }

    /// Inverse Haar step: `[b,4c,h/2,w/2] -> [b,c,h,w]`.
    pub fn idwt2_stack(&self) -> Result<Tensor<T>> {
        let (b, c4, h2, w2) = dims4_checked(self.shape(), "idwt2")?;
        if c4 % 4 != 0 {
            return Err(Error::Dim(format!("idwt2: channel count {c4} is not 4*c")));
        }
        let c = c4 / 4;
        let (h, w) = (2 * h2, 2 * w2);
        let data = idwt2_raw(self.data(), b, c, h, w);
        Ok(Tensor::from_op(
            data,
            vec![b, c, h, w],
            vec![self.clone()],
            move |_o, g| vec![Some(dwt2_raw(g, b, c, h, w))],
        ))
    }
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Dim("concat: no inputs".into()));
    }
    let nd = parts[0].ndim();
    if axis >= nd {
        return Err(Error::Dim(format!("concat: axis {axis} out of range")));
    }
    for p in parts {
        if p.ndim() != nd
            || p.shape()
                .iter()
                .zip(parts[0].shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let axis_total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = axis_total;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();

    let mut data = vec![T::zero(); outer * axis_total * inner];
    let mut offset = 0usize;
    let mut spans = Vec::with_capacity(parts.len());
    for p in parts {
        let len = p.shape()[axis];
        let pd = p.data();
        for o in 0..outer {
            let dst = (o * axis_total + offset) * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&pd[src..src + len * inner]);
        }
        spans.push((offset, len));
        offset += len;
    }

    let parents: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
    let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
    Ok(Tensor::from_op(data, out_shape, parents, move |_o, g| {
        spans
            .iter()
            .zip(&needs)
            .map(|(&(off, len), &need)| {
                if !need {
                    return None;
                }
                let mut dp = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = (o * axis_total + off) * inner;
                    let dst = o * len * inner;
                    dp[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                Some(dp)
            })
            .collect()
    }))
}

// ── scalar kernels ──────────────────────────────────────────────────────

const GELU_C: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let k = T::fr(SQRT_2_OVER_PI);
    let c = T::fr(GELU_C);
    let half = T::fr(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::fr(SQRT_2_OVER_PI);
    let c = T::fr(GELU_C);
    let half = T::fr(0.5);
    let three = T::fr(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

fn sigmoid_fwd<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_fwd<T: Scalar>(x: T) -> T {
    let hi = T::fr(20.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        (T::one() + x.exp()).ln()
    }
}

fn sign_of<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn dims4_checked(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::Dim(format!("{op}: expected 4-D input, got {shape:?}")));
    }
    Ok(dims4(shape))
}

fn permute_copy<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![T::zero(); data.len()];
    let mut idx = vec![0usize; nd];
    let mut ii = 0usize;
    for slot in out.iter_mut() {
        *slot = data[ii];
        for d in (0..nd).rev() {
            idx[d] += 1;
            ii += walk[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ii -= walk[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let ckk = c * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * ckk;
            let iy0 = (oy * stride) as isize - pad as isize;
            let ix0 = (ox * stride) as isize - pad as isize;
            let mut col = row;
            for ci in 0..c {
                let plane = ci * h * w;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        for slot in &mut cols[col..col + kw] {
                            *slot = T::zero();
                        }
                        col += kw;
                        continue;
                    }
                    let base = plane + iy as usize * w;
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        cols[col] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            x[base + ix as usize]
                        };
                        col += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col for `dcols` laid out `[ckk, oh*ow]`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    dcols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ohow = oh * ow;
    for ci in 0..c {
        let plane = ci * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = ((ci * kh + ky) * kw + kx) * ohow;
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = plane + iy as usize * w;
                    let grow = krow + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[base + ix as usize] += dcols[grow + ox];
                    }
                }
            }
        }
    }
}

/// (i0, i1, frac) taps for x2 upsampling with half-pixel centers.
fn axis_taps_2x(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let i0 = f.max(0.0) as usize;
            let i1 = ((f + 1.0).min(n as f64 - 1.0)).max(0.0) as usize;
            let frac = if f < 0.0 { 0.0 } else { src - f };
            (i0.min(n - 1), i1, frac)
        })
        .collect()
}

/// Taps for resampling the fractional interval [a0, a1) of an `n`-extent axis
/// to `out` samples.
fn box_axis_taps(n: usize, a0: f64, a1: f64, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let t = a0 + (o as f64 + 0.5) / out as f64 * (a1 - a0);
            let src = (t * n as f64 - 0.5).clamp(0.0, n as f64 - 1.0);
            let f = src.floor();
            let i0 = f as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - f)
        })
        .collect()
}

fn dwt2_raw<T: Scalar>(x: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let half = T::fr(0.5);
    let plane = h2 * w2;
    let mut out = vec![T::zero(); b * 4 * c * plane];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * h * w..];
            let obase = bi * 4 * c * plane;
            let (ll, lh) = (obase + ci * plane, obase + (c + ci) * plane);
            let (hl, hh) = (obase + (2 * c + ci) * plane, obase + (3 * c + ci) * plane);
            for y in 0..h2 {
                for xq in 0..w2 {
                    let a = src[2 * y * w + 2 * xq];
                    let bv = src[2 * y * w + 2 * xq + 1];
                    let cv = src[(2 * y + 1) * w + 2 * xq];
                    let d = src[(2 * y + 1) * w + 2 * xq + 1];
                    let o = y * w2 + xq;
                    out[ll + o] = (a + bv + cv + d) * half;
                    out[lh + o] = (a + bv - cv - d) * half;
                    out[hl + o] = (a - bv + cv - d) * half;
                    out[hh + o] = (a - bv - cv + d) * half;
                }
            }
        }
    }
    out
}

fn idwt2_raw<T: Scalar>(q: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let half = T::fr(0.5);
    let plane = h2 * w2;
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let dst = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let ibase = bi * 4 * c * plane;
            let (ll, lh) = (ibase + ci * plane, ibase + (c + ci) * plane);
            let (hl, hh) = (ibase + (2 * c + ci) * plane, ibase + (3 * c + ci) * plane);
            for y in 0..h2 {
                for xq in 0..w2 {
                    let o = y * w2 + xq;
                    let (l, v, hz, d) = (q[ll + o], q[lh + o], q[hl + o], q[hh + o]);
                    dst[2 * y * w + 2 * xq] = (l + v + hz + d) * half;
                    dst[2 * y * w + 2 * xq + 1] = (l + v - hz - d) * half;
                    dst[(2 * y + 1) * w + 2 * xq] = (l - v + hz - d) * half;
                    dst[(2 * y + 1) * w + 2 * xq + 1] = (l - v - hz + d) * half;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(data: Vec<f32>, shape: &[usize]) -> Tensor<f32> {
        Tensor::new(data, shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t32(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let y = i2.matmul(&i2).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = t32(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = a.matmul(&i2).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t32(vec![0.0; 6], &[2, 3]);
        let b = t32(vec![0.0; 8], &[2, 4]);
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 4]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_grad_of_sum_equals_b_row_sums() {
        // loss = sum(a.b) => da[i,j] = sum_n b[j,n]
        let a = Tensor::<f64>::var((0..12).map(|v| v as f64 * 0.1).collect(), &[3, 4]).unwrap();
        let b = Tensor::<f64>::var((0..8).map(|v| v as f64 * 0.25 - 0.6).collect(), &[4, 2]).unwrap();
        a.matmul(&b).unwrap().sum_all().backward().unwrap();
        let ga = a.grad().unwrap();
        let bd = b.data();
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|n| bd[j * 2 + n]).sum();
                assert!((ga[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_matmul_broadcasts_lhs() {
        let a = t32(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]); // broadcast over batch
        let b = t32(
            vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0],
            &[2, 2, 2],
        );
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_eq!(&y.data()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&y.data()[4..], &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = t32((0..9).map(|v| v as f32).collect(), &[1, 1, 3, 3]);
        let k = t32(vec![1.0], &[1, 1, 1, 1]);
        let y = x.conv2d(&k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_ones_kernel_counts_neighbors() {
        // Hand oracle: all-ones 3x3 kernel over an all-ones 5x5 input with
        // pad 1 counts the in-bounds taps: 9 interior, 6 edge, 4 corner.
        let x = t32(vec![1.0; 25], &[1, 1, 5, 5]);
        let k = t32(vec![1.0; 9], &[1, 1, 3, 3]);
        let y = x.conv2d(&k, None, 1, 1).unwrap();
        let d = y.data();
        assert_eq!(d[2 * 5 + 2], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[4], 4.0);
        assert_eq!(d[20], 4.0);
        assert_eq!(d[24], 4.0);
        assert_eq!(d[2], 6.0);
    }

    #[test]
    fn conv2d_rejects_bad_geometry() {
        let x = t32(vec![1.0; 16], &[1, 1, 4, 4]);
        let k_even = t32(vec![1.0; 4], &[1, 1, 2, 2]);
        assert!(x.conv2d(&k_even, None, 1, 0).is_err());
        let k_big = t32(vec![1.0; 49], &[1, 1, 7, 7]);
        assert!(x.conv2d(&k_big, None, 1, 0).is_err());
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let x = t32(vec![3.25; 4], &[1, 4]);
        let y = x.softmax(1).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // [0, ln 3] -> [1/4, 3/4]
        let x = Tensor::<f64>::new(vec![0.0, 3f64.ln()], &[2]).unwrap();
        let y = x.softmax(0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = t32(vec![0.3, -1.2, 2.0, 0.7], &[4]);
        let y0 = x.softmax(0).unwrap();
        let y1 = x.add_scalar(7.5).softmax(0).unwrap();
        for (a, b) in y0.data().iter().zip(y1.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t32((0..24).map(|v| (v as f32 * 0.37).sin()).collect(), &[2, 3, 4]);
        let y = x.softmax(1).unwrap();
        for b in 0..2 {
            for i in 0..4 {
                let s: f32 = (0..3).map(|j| y.data()[b * 12 + j * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gelu_at_zero() {
        let x = t32(vec![0.0], &[1]);
        assert_eq!(x.gelu().data()[0], 0.0);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = t32(vec![0.75; 16], &[1, 1, 4, 4]);
        let y = x.upsample_bilinear2x().unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
        for &v in y.data() {
            assert!((v - 0.75).abs() < 1e-6);
        }
        let yn = x.upsample_nearest2x().unwrap();
        for &v in yn.data() {
            assert_eq!(v, 0.75);
        }
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let a = t32(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t32(vec![5.0, 6.0], &[2, 1]);
        let y = concat(&[&a, &b], 1).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = y.narrow(1, 0, 2).unwrap();
        assert_eq!(back.data(), a.data());
    }

    #[test]
    fn concat_rejects_mismatched_offaxis() {
        let a = t32(vec![0.0; 4], &[2, 2]);
        let b = t32(vec![0.0; 3], &[3, 1]);
        assert!(concat(&[&a, &b], 1).is_err());
    }

    #[test]
    fn mean_axes_keepdims() {
        let x = t32(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let m = x.mean_axes(&[1], true).unwrap();
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.data(), &[1.5, 3.5]);
    }

    #[test]
    fn broadcast_add_bias_pattern() {
        let x = t32(vec![1.0; 12], &[2, 3, 2]);
        let b = t32(vec![1.0, 2.0, 3.0], &[1, 3, 1]);
        let y = x.add(&b).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert_eq!(y.data()[0], 2.0);
        assert_eq!(y.data()[2], 3.0);
        assert_eq!(y.data()[4], 4.0);
    }

    #[test]
    fn avgpool_global_shape_and_value() {
        let x = t32((0..8).map(|v| v as f32).collect(), &[1, 2, 2, 2]);
        let y = x.avgpool_global().unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[1.5, 5.5]);
    }
}

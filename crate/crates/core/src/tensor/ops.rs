//! Differentiable kernels.
//!
//! Broadcasting is limited to a trailing-suffix operand (`[.., d] + [d]`,
//! `[b, t, d] + [t, d]`); everything else requires equal shapes.

use std::sync::Arc;

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Row-major GEMM over slices: `c = op(a) · op(b) + beta · c`, with `op(a)`
/// of shape `m×k` and `op(b)` of shape `k×n`. A transposed operand is read
/// from its untransposed storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access implied by the strides,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// (outer, len, inner) decomposition around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn last_dim<T: Real>(op: &str, x: &Tensor<T>, d: usize) -> Result<()> {
    if x.shape().last() != Some(&d) {
        return Err(Error::Shape(format!(
            "{op}: last dimension of {:?} must equal parameter width {d}",
            x.shape()
        )));
    }
    Ok(())
}

fn std_normal_cdf<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Real>(x: T) -> T {
    T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * T::of(0.5)).exp()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g, needs| {
                vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|&x| -x).collect()),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect()),
                ]
            }),
        ))
    }

    /// Adds `other` to every trailing block of matching shape.
    pub fn add_broadcast(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, o) = (self.shape(), other.shape());
        if o.len() > s.len() || s[s.len() - o.len()..] != *o {
            return Err(Error::Shape(format!(
                "add_broadcast: {o:?} is not a trailing suffix of {s:?}"
            )));
        }
        let block = other.len();
        let od = other.data();
        let data = self
            .data()
            .chunks_exact(block)
            .flat_map(|row| row.iter().zip(od).map(|(&a, &b)| a + b))
            .collect();
        Ok(Tensor::from_op(
            "add_broadcast",
            s.to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::zero(); block];
                    for row in g.chunks_exact(block) {
                        acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x);
                    }
                    acc
                });
                vec![needs[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        let s = T::of(s);
        let data = self.data().iter().map(|&x| x * s).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| vec![Some(g.iter().map(|&x| x * s).collect())]),
        )
    }

    /// Matrix product. `self` is `[.., m, k]`; `other` is either a shared
    /// `[k, n]` matrix (leading axes of `self` are flattened into rows) or a
    /// batched `[b, k, n]` matching a `[b, m, k]` left operand.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.bmm(other, false)
    }

    /// `self · otherᵀ` on the last two axes, without materializing the transpose.
    pub fn matmul_bt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.bmm(other, true)
    }

    fn bmm(&self, other: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || {
            Error::Shape(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}{}",
                if trans_b { " (transposed)" } else { "" }
            ))
        };
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let (batch, m, shared) = if sb.len() == 2 {
            (1, self.len() / k, true)
        } else {
            if sa.len() != 3 || sa[0] != sb[0] {
                return Err(mismatch());
            }
            (sa[0], sa[1], false)
        };
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(), other.data());
        for i in 0..batch {
            let b_off = if shared { 0 } else { i * k * n };
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[b_off..],
                trans_b,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            if trans_b { "matmul_bt" } else { "matmul" },
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g, needs| {
                let (ad, bd) = (a.data(), b.data());
                let ga = needs[0].then(|| {
                    // dA = G · op(B)ᵀ
                    let mut ga = vec![T::zero(); ad.len()];
                    for i in 0..batch {
                        let b_off = if shared { 0 } else { i * k * n };
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &bd[b_off..],
                            !trans_b,
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    // dB = Aᵀ · G, or Gᵀ · A when B enters transposed.
                    let mut gb = vec![T::zero(); bd.len()];
                    for i in 0..batch {
                        let (b_off, beta) = if shared {
                            (0, T::one())
                        } else {
                            (i * k * n, T::zero())
                        };
                        let dst = &mut gb[b_off..b_off + k * n];
                        if trans_b {
                            gemm(n, m, k, &g[i * m * n..], true, &ad[i * m * k..], false, beta, dst);
                        } else {
                            gemm(k, m, n, &ad[i * m * k..], true, &g[i * m * n..], false, beta, dst);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, got {:?}", self.shape())));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute: {perm:?} is not a permutation of rank {r}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1usize; r];
        for i in (0..r.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        // Source offset of each output element, in output order.
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut index = Vec::with_capacity(self.len());
        let mut counter = vec![0usize; r];
        for _ in 0..self.len() {
            index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum::<usize>());
            for ax in (0..r).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        let src = self.data();
        let data = index.iter().map(|&i| src[i]).collect();
        let index = Arc::new(index);
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); g.len()];
                for (&i, &gv) in index.iter().zip(g) {
                    gx[i] = gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "reshape: {:?} cannot become {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|_, g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// `len` consecutive entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis("slice", self.shape(), axis)?;
        let shape = self.shape();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice: [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_at_axis(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let total = self.len();
        Ok(Tensor::from_op(
            "slice",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); total];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.len();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |_, g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.len() as f64)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + j;
                let max = (0..len).map(|i| x[at(i)]).fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for i in 0..len {
                    let e = (x[at(i)] - max).exp();
                    y[at(i)] = e;
                    denom += e;
                }
                for i in 0..len {
                    y[at(i)] = y[at(i)] / denom;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |y, g, _| {
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + j;
                        let dot: T = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            gx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tensor<T> {
        let d = *self.shape().last().expect("non-scalar shape");
        let mut y = self.data().to_vec();
        for row in y.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        Tensor::from_op(
            "log_softmax",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |y, g, _| {
                let mut gx = vec![T::zero(); y.len()];
                for ((gx, y), g) in gx.chunks_exact_mut(d).zip(y.chunks_exact(d)).zip(g.chunks_exact(d)) {
                    let gsum: T = g.iter().copied().sum();
                    for i in 0..d {
                        gx[i] = g[i] - y[i].exp() * gsum;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Standardizes over the last axis, then applies `weight` and `bias`.
    pub fn layer_norm(&self, weight: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = weight.len();
        last_dim("layer_norm", self, d)?;
        last_dim("layer_norm", bias, d)?;
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let x = self.data();
        let (w, b) = (weight.data(), bias.data());
        let rows = x.len() / d;
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mu = xr.iter().copied().sum::<T>() / dt;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dt;
            let s = T::one() / (var + eps).sqrt();
            inv[r] = s;
            for i in 0..d {
                let h = (xr[i] - mu) * s;
                xhat[r * d + i] = h;
                y[r * d + i] = h * w[i] + b[i];
            }
        }
        let wt = weight.clone();
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            y,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |_, g, needs| {
                let w = wt.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for i in 0..d {
                            let dh = gr[i] * w[i];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[i];
                        }
                        mean_dh = mean_dh / dt;
                        mean_dh_h = mean_dh_h / dt;
                        for i in 0..d {
                            gx[r * d + i] = inv[r] * (gr[i] * w[i] - mean_dh - hr[i] * mean_dh_h);
                        }
                    }
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        gw.iter_mut().zip(gr.iter().zip(hr)).for_each(|(a, (&g, &h))| *a += g * h);
                    }
                    gw
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![T::zero(); d];
                    for gr in g.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, &g)| *a += g);
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Scales each last-axis vector by `1/sqrt(mean(x²) + eps)`, then by `weight`.
    pub fn rms_norm(&self, weight: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = weight.len();
        last_dim("rms_norm", self, d)?;
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let x = self.data();
        let w = weight.data();
        let rows = x.len() / d;
        let mut inv = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let ms = xr.iter().map(|&v| v * v).sum::<T>() / dt;
            let s = T::one() / (ms + eps).sqrt();
            inv[r] = s;
            for i in 0..d {
                y[r * d + i] = xr[i] * s * w[i];
            }
        }
        let (xt, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            "rms_norm",
            self.shape().to_vec(),
            y,
            vec![self.clone(), weight.clone()],
            Box::new(move |_, g, needs| {
                let (x, w) = (xt.data(), wt.data());
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let (gr, xr) = (&g[r * d..(r + 1) * d], &x[r * d..(r + 1) * d]);
                        let s = inv[r];
                        let dot = (0..d).map(|i| gr[i] * w[i] * xr[i]).sum::<T>() / dt;
                        for i in 0..d {
                            gx[r * d + i] = s * (gr[i] * w[i] - xr[i] * s * s * dot);
                        }
                    }
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            gw[i] += g[r * d + i] * x[r * d + i] * inv[r];
                        }
                    }
                    gw
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Elementwise map with a caller-supplied derivative `df(x)`.
    pub fn map_unary<F, D>(&self, name: &'static str, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T) -> T + Send + Sync + 'static,
    {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let xt = self.clone();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| {
                vec![Some(g.iter().zip(xt.data()).map(|(&g, &x)| g * df(x)).collect())]
            }),
        )
    }

    /// Exact GELU, `x·Φ(x)` with the erf form of Φ.
    pub fn gelu(&self) -> Tensor<T> {
        self.map_unary(
            "gelu",
            |x| x * std_normal_cdf(x),
            |x| std_normal_cdf(x) + x * std_normal_pdf(x),
        )
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        self.map_unary(
            "silu",
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map_unary(
            "relu",
            |x| x.max(T::zero()),
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Rows of a `[n, d]` table selected by `index`, shape `[index.len(), d]`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 || index.is_empty() {
            return Err(Error::Shape(format!(
                "gather_rows needs a rank-2 table and a nonempty index, got {:?}",
                self.shape()
            )));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather_rows: row {bad} out of range for {n} rows")));
        }
        let src = self.data();
        let data = index.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect();
        let index = index.to_vec();
        let total = self.len();
        Ok(Tensor::from_op(
            "gather_rows",
            vec![index.len(), d],
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); total];
                for (row, &i) in index.iter().enumerate() {
                    for j in 0..d {
                        gx[i * d + j] += g[row * d + j];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Joins tensors along `axis`; all other dimensions must agree.
pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    check_axis("concat", first.shape(), axis)?;
    for p in parts {
        let (a, b) = (p.shape(), first.shape());
        if a.len() != b.len() || a.iter().zip(b).enumerate().any(|(i, (x, y))| i != axis && x != y) {
            return Err(Error::Shape(format!("concat: {a:?} incompatible with {b:?} on axis {axis}")));
        }
    }
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &l) in parts.iter().zip(&lens) {
            data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    Ok(Tensor::from_op(
        "concat",
        out_shape,
        data,
        parts.iter().map(|&p| p.clone()).collect(),
        Box::new(move |_, g, needs| {
            let mut grads: Vec<Option<Vec<T>>> =
                needs.iter().zip(&lens).map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner))).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        }),
    ))
}

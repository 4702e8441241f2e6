//! Dense row-major matrices and the numeric kernels shared by the autodiff
//! graph and the incremental inference path.

use num_traits::Float;

/// Scalar type the model can be instantiated with.
///
/// Training runs in `f32`; gradient verification runs the same code in `f64`.
pub trait Real:
    Float
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C <- alpha * A * B + beta * C` over strided operands.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// regions of the stated shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} does not match buffer");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn rows_range(&self, start: usize, len: usize) -> Mat<T> {
        Mat::from_vec(len, self.cols, self.data[start * self.cols..(start + len) * self.cols].to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| U::of(x.as_f64())).collect() }
    }
}

/// `c <- alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub fn gemm<T: Real>(alpha: T, a: &Mat<T>, trans_a: bool, b: &Mat<T>, trans_b: bool, beta: T, c: &mut Mat<T>) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: shapes were checked above and `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn matmul<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(T::one(), a, false, b, false, T::zero(), &mut c);
    c
}

pub fn add_row_bias<T: Real>(x: &mut Mat<T>, bias: &[T]) {
    assert_eq!(x.cols, bias.len());
    for r in 0..x.rows {
        for (v, &b) in x.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// d silu(x) / dx
#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalisation. Returns output plus per-row mean and
/// reciprocal standard deviation for the backward pass.
pub fn layernorm<T: Real>(x: &Mat<T>, gamma: &[T], beta: &[T]) -> (Mat<T>, Vec<T>, Vec<T>) {
    let d = x.cols;
    let dn = T::of(d as f64);
    let eps = T::of(LN_EPS);
    let mut y = Mat::zeros(x.rows, d);
    let mut means = Vec::with_capacity(x.rows);
    let mut rstds = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rstd = T::one() / (var + eps).sqrt();
        for ((o, &v), (&g, &b)) in y.row_mut(r).iter_mut().zip(row).zip(gamma.iter().zip(beta)) {
            *o = (v - mean) * rstd * g + b;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

/// Backward of [`layernorm`]: returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward<T: Real>(
    x: &Mat<T>,
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dy: &Mat<T>,
) -> (Mat<T>, Vec<T>, Vec<T>) {
    let d = x.cols;
    let dn = T::of(d as f64);
    let mut dx = Mat::zeros(x.rows, d);
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut g = vec![T::zero(); d];
    for r in 0..x.rows {
        let (mean, rstd) = (means[r], rstds[r]);
        let row = x.row(r);
        let drow = dy.row(r);
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            g[j] = drow[j] * gamma[j];
            dgamma[j] += drow[j] * xhat[j];
            dbeta[j] += drow[j];
        }
        let g_mean = g.iter().copied().sum::<T>() / dn;
        let gx_mean = g.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rstd * (g[j] - g_mean - xhat[j] * gx_mean);
        }
    }
    (dx, dgamma, dbeta)
}

/// In-place softmax over the first `valid` entries of `row`; the remainder is
/// set to exactly zero.
pub fn softmax_prefix<T: Real>(row: &mut [T], valid: usize) {
    let max = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in &mut row[..valid] {
        *v *= inv;
    }
    for v in &mut row[valid..] {
        *v = T::zero();
    }
}

/// Numerically stable `log_softmax` of a single row, in `f64`.
pub fn log_softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x.as_f64() - lse).collect()
}

/// One attention problem inside a packed batch: a block of query rows that
/// attends to a block of key/value rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub heads: usize,
    pub causal: bool,
}

/// Multi-head attention for a single segment. Returns the `(q_len x d)` output
/// block and the `heads x q_len x k_len` probabilities.
pub fn attention_segment<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    seg: AttnSegment,
    shape: AttnShape,
) -> (Vec<T>, Vec<T>) {
    let d = q.cols;
    let dh = d / shape.heads;
    let (ql, kl) = (seg.q_len, seg.k_len);
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); ql * d];
    let mut probs = vec![T::zero(); shape.heads * ql * kl];
    if ql == 0 || kl == 0 {
        return (out, probs);
    }
    for h in 0..shape.heads {
        let p = &mut probs[h * ql * kl..(h + 1) * ql * kl];
        // SAFETY: offsets stay within the segment's rows and the head's columns.
        unsafe {
            T::gemm_raw(
                ql,
                dh,
                kl,
                scale,
                q.data.as_ptr().add(seg.q_start * d + h * dh),
                d as isize,
                1,
                k.data.as_ptr().add(seg.k_start * d + h * dh),
                1,
                d as isize,
                T::zero(),
                p.as_mut_ptr(),
                kl as isize,
                1,
            );
        }
        for i in 0..ql {
            let valid = if shape.causal { (i + 1).min(kl) } else { kl };
            softmax_prefix(&mut p[i * kl..(i + 1) * kl], valid);
        }
        unsafe {
            T::gemm_raw(
                ql,
                kl,
                dh,
                T::one(),
                p.as_ptr(),
                kl as isize,
                1,
                v.data.as_ptr().add(seg.k_start * d + h * dh),
                d as isize,
                1,
                T::zero(),
                out.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
    }
    (out, probs)
}

/// Backward of [`attention_segment`]. Returns `(dq, dk, dv)` blocks of shape
/// `q_len x d`, `k_len x d`, `k_len x d`.
#[allow(clippy::too_many_arguments)]
pub fn attention_segment_backward<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    seg: AttnSegment,
    shape: AttnShape,
    probs: &[T],
    dout: &Mat<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = q.cols;
    let dh = d / shape.heads;
    let (ql, kl) = (seg.q_len, seg.k_len);
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); ql * d];
    let mut dk = vec![T::zero(); kl * d];
    let mut dv = vec![T::zero(); kl * d];
    if ql == 0 || kl == 0 {
        return (dq, dk, dv);
    }
    let mut dp = vec![T::zero(); ql * kl];
    for h in 0..shape.heads {
        let p = &probs[h * ql * kl..(h + 1) * ql * kl];
        let do_ptr = unsafe { dout.data.as_ptr().add(seg.q_start * d + h * dh) };
        unsafe {
            // dP = dO_h V_h^T
            T::gemm_raw(
                ql,
                dh,
                kl,
                T::one(),
                do_ptr,
                d as isize,
                1,
                v.data.as_ptr().add(seg.k_start * d + h * dh),
                1,
                d as isize,
                T::zero(),
                dp.as_mut_ptr(),
                kl as isize,
                1,
            );
            // dV_h = P^T dO_h
            T::gemm_raw(
                kl,
                ql,
                dh,
                T::one(),
                p.as_ptr(),
                1,
                kl as isize,
                do_ptr,
                d as isize,
                1,
                T::zero(),
                dv.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
        // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
        for i in 0..ql {
            let prow = &p[i * kl..(i + 1) * kl];
            let drow = &mut dp[i * kl..(i + 1) * kl];
            let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for (g, &pv) in drow.iter_mut().zip(prow) {
                *g = pv * (*g - dot) * scale;
            }
        }
        unsafe {
            // dQ_h = dS K_h
            T::gemm_raw(
                ql,
                kl,
                dh,
                T::one(),
                dp.as_ptr(),
                kl as isize,
                1,
                k.data.as_ptr().add(seg.k_start * d + h * dh),
                d as isize,
                1,
                T::zero(),
                dq.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
            // dK_h = dS^T Q_h
            T::gemm_raw(
                kl,
                ql,
                dh,
                T::one(),
                dp.as_ptr(),
                1,
                kl as isize,
                q.data.as_ptr().add(seg.q_start * d + h * dh),
                d as isize,
                1,
                T::zero(),
                dk.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
    }
    (dq, dk, dv)
}

/// Sinusoidal position table with positions restarting at every segment.
pub fn positional_rows<T: Real>(lengths: &[usize], dim: usize) -> Mat<T> {
    let total: usize = lengths.iter().sum();
    let mut m = Mat::zeros(total, dim);
    let mut r = 0;
    for &len in lengths {
        for pos in 0..len {
            write_position(m.row_mut(r), pos);
            r += 1;
        }
    }
    m
}

pub fn write_position<T: Real>(row: &mut [T], pos: usize) {
    let dim = row.len();
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = pos as f64 * freq;
        row[2 * i] = T::of(angle.sin());
        row[2 * i + 1] = T::of(angle.cos());
    }
}

//! Raw numeric kernels shared by the tape operators.

use super::Scalar;

/// Strided matrix view: offset into a slice plus row and column strides.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub const fn row_major(offset: usize, cols: usize) -> Self {
        View {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` block.
    pub const fn transposed(offset: usize, cols: usize) -> Self {
        View {
            offset,
            rs: 1,
            cs: cols,
        }
    }

    pub const fn strided(offset: usize, rs: usize) -> Self {
        View { offset, rs, cs: 1 }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c(m x n)` on strided views.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: all three views were bounds-checked above and `c` is uniquely
    // borrowed, so it cannot alias `a` or `b`.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Shapes of one batched multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub n_q: usize,
    pub n_kv: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn probs_offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.n_q * self.n_kv
    }
}

/// Softmax attention forward. Returns the output and, when `keep_probs`, the
/// attention probabilities laid out `[batch, heads, n_q, n_kv]`.
pub fn attention_forward<T: Scalar>(
    dims: AttnDims,
    q: &[T],
    k: &[T],
    v: &[T],
    keep_probs: bool,
) -> (Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        n_q,
        n_kv,
        dim,
        heads,
    } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); batch * n_q * dim];
    let mut probs = if keep_probs {
        vec![T::zero(); batch * heads * n_q * n_kv]
    } else {
        Vec::new()
    };
    let mut scratch = vec![T::zero(); n_q * n_kv];
    for b in 0..batch {
        for h in 0..heads {
            let p: &mut [T] = if keep_probs {
                let off = dims.probs_offset(b, h);
                &mut probs[off..off + n_q * n_kv]
            } else {
                &mut scratch
            };
            gemm(
                n_q,
                dh,
                n_kv,
                scale,
                q,
                View::strided(b * n_q * dim + h * dh, dim),
                k,
                View {
                    offset: b * n_kv * dim + h * dh,
                    rs: 1,
                    cs: dim,
                },
                T::zero(),
                p,
                View::row_major(0, n_kv),
            );
            for row in p.chunks_exact_mut(n_kv) {
                softmax_in_place(row);
            }
            gemm(
                n_q,
                n_kv,
                dh,
                T::one(),
                p,
                View::row_major(0, n_kv),
                v,
                View::strided(b * n_kv * dim + h * dh, dim),
                T::zero(),
                &mut out,
                View::strided(b * n_q * dim + h * dh, dim),
            );
        }
    }
    (out, probs)
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Gradients of the attention inputs, accumulated into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    dims: AttnDims,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d_out: &[T],
    dq: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    dv: Option<&mut [T]>,
) {
    let AttnDims {
        batch,
        n_q,
        n_kv,
        dim,
        heads,
    } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut d_scores = vec![T::zero(); n_q * n_kv];
    let (mut dq, mut dk, mut dv) = (dq, dk, dv);
    for b in 0..batch {
        for h in 0..heads {
            let p_off = dims.probs_offset(b, h);
            let p = &probs[p_off..p_off + n_q * n_kv];
            let q_view = View::strided(b * n_q * dim + h * dh, dim);
            let kv_view = View::strided(b * n_kv * dim + h * dh, dim);
            if let Some(dv) = dv.as_deref_mut() {
                gemm(
                    n_kv,
                    n_q,
                    dh,
                    T::one(),
                    p,
                    View::transposed(0, n_kv),
                    d_out,
                    q_view,
                    T::one(),
                    dv,
                    kv_view,
                );
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            // dP = dO V^T
            gemm(
                n_q,
                dh,
                n_kv,
                T::one(),
                d_out,
                q_view,
                v,
                View {
                    offset: kv_view.offset,
                    rs: 1,
                    cs: dim,
                },
                T::zero(),
                &mut d_scores,
                View::row_major(0, n_kv),
            );
            for (ds_row, p_row) in d_scores.chunks_exact_mut(n_kv).zip(p.chunks_exact(n_kv)) {
                let dot: T = ds_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
                for (ds, &pp) in ds_row.iter_mut().zip(p_row) {
                    *ds = pp * (*ds - dot) * scale;
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                gemm(
                    n_q,
                    n_kv,
                    dh,
                    T::one(),
                    &d_scores,
                    View::row_major(0, n_kv),
                    k,
                    kv_view,
                    T::one(),
                    dq,
                    q_view,
                );
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm(
                    n_kv,
                    n_q,
                    dh,
                    T::one(),
                    &d_scores,
                    View::transposed(0, n_kv),
                    q,
                    q_view,
                    T::one(),
                    dk,
                    kv_view,
                );
            }
        }
    }
}

/// Multiplies every consecutive 4-channel group of each row by that row's
/// 4x4 matrix (row-major). `transpose` applies the transposed matrices.
pub fn rho_rows<T: Scalar>(x: &[T], dim: usize, mats: &[[T; 16]], transpose: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ((row_in, row_out), m) in x
        .chunks_exact(dim)
        .zip(out.chunks_exact_mut(dim))
        .zip(mats)
    {
        for (g_in, g_out) in row_in.chunks_exact(4).zip(row_out.chunks_exact_mut(4)) {
            for (r, o) in g_out.iter_mut().enumerate() {
                let mut acc = T::zero();
                for c in 0..4 {
                    let m_rc = if transpose { m[c * 4 + r] } else { m[r * 4 + c] };
                    acc += m_rc * g_in[c];
                }
                *o = acc;
            }
        }
    }
    out
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let t = (c * (x + a * x * x * x)).tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

/// Geometry of a frozen 2-D convolution on channels-last images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    /// Calls `f(col_row, col_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let in_base =
                                ((b * self.h + iy as usize) * self.w + ix as usize) * self.c_in;
                            let col_base = (ky * self.kernel + kx) * self.c_in;
                            for c in 0..self.c_in {
                                f(row, col_base + c, in_base + c);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let pl = self.patch_len();
        let mut cols = vec![T::zero(); self.batch * self.out_h() * self.out_w() * pl];
        self.for_each_tap(|row, col, idx| cols[row * pl + col] = x[idx]);
        cols
    }

    pub fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let pl = self.patch_len();
        self.for_each_tap(|row, col, idx| dx[idx] += cols[row * pl + col]);
    }
}

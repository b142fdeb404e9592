use std::sync::Arc;

use super::kernels::{self, AttnDims, ConvGeom, View};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiply-add work performed by the dense and attention operators,
/// counted as two FLOPs per multiply-add.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub dense: u64,
    pub attention: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.dense + self.attention
    }
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddScaled {
        x: Var,
        f: Var,
        scale: T,
    },
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<T>,
    },
    Rho {
        x: Var,
        mats: Arc<[[T; 16]]>,
    },
    Gather {
        x: Var,
        block: usize,
        index: Arc<[usize]>,
    },
    Concat {
        parts: Vec<Var>,
        batch: usize,
        inner: usize,
    },
    Reshape(Var),
    Mse(Var, Var),
    Conv {
        x: Var,
        weight: Arc<Tensor<T>>,
        geom: ConvGeom,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operators with the saved state their backward
/// rules need. A tape is consumed by a single [`Tape::backward`] call.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
    counting: bool,
    flops: FlopCounter,
}

/// Gradients of every leaf that requires them, produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// A tape that records backward state.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            counting: true,
            flops: FlopCounter::default(),
        }
    }

    /// A forward-only tape: no backward state is saved.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops
    }

    /// Enables or disables FLOP counting for subsequent operators. Returns the
    /// previous setting.
    pub fn set_counting(&mut self, on: bool) -> bool {
        std::mem::replace(&mut self.counting, on)
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x[.., in] * w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || wv.shape()[0] != xv.last_dim() {
            return Err(Error::dim(format!(
                "linear: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.rows();
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != d_out {
                return Err(Error::dim(format!(
                    "linear: bias {:?} vs output width {d_out}",
                    bv.shape()
                )));
            }
            for row in out.chunks_exact_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm(
            rows,
            d_in,
            d_out,
            T::one(),
            xv.data(),
            View::row_major(0, d_in),
            wv.data(),
            View::row_major(0, d_out),
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            View::row_major(0, d_out),
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        if self.counting {
            self.flops.dense += 2 * (rows * d_in * d_out) as u64;
        }
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `x + scale * f`.
    pub fn add_scaled(&mut self, x: Var, f: Var, scale: T) -> Result<Var> {
        let (xv, fv) = (self.value(x), self.value(f));
        same_shape(xv, fv, "add_scaled")?;
        let data = xv
            .data()
            .iter()
            .zip(fv.data())
            .map(|(&a, &b)| a + scale * b)
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::AddScaled { x, f, scale }, &[x, f]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * c).collect())
            .expect("shape preserved");
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        self.push(value, op, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Per-row standardization over the trailing axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::dim(format!(
                "layer_norm: width {d} vs gain {:?} / bias {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); xv.numel()];
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let keep = self.grad_enabled;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: if keep { xhat } else { Vec::new() },
            rstd: if keep { rstd } else { Vec::new() },
        };
        Ok(self.push(value, op, &[x, gain, bias]))
    }

    /// Multi-head softmax attention on already projected `q [B, n_q, d]`,
    /// `k, v [B, n_kv, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(Error::dim(format!(
                "attention: q {qs:?}, k {ks:?}, v {vs:?}"
            )));
        }
        let dims = AttnDims {
            batch: qs[0],
            n_q: qs[1],
            n_kv: ks[1],
            dim: qs[2],
            heads,
        };
        if heads == 0 || !dims.dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention: {heads} heads do not divide width {}",
                dims.dim
            )));
        }
        let keep = self.grad_enabled
            && [q, k, v].iter().any(|&x| self.nodes[x.0].requires_grad);
        let (out, probs) = kernels::attention_forward(
            dims,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            keep,
        );
        if self.counting {
            self.flops.attention += 4 * (dims.batch * dims.n_q * dims.n_kv * dims.dim) as u64;
        }
        let value = Tensor::new(&[dims.batch, dims.n_q, dims.dim], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Block-diagonal transform: each 4-channel group of row `r` is multiplied
    /// by `mats[r]` (row-major 4x4).
    pub fn rho(&mut self, x: Var, mats: Arc<[[T; 16]]>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if !d.is_multiple_of(4) {
            return Err(Error::config(format!(
                "rho: width {d} is not a multiple of 4"
            )));
        }
        if mats.len() != xv.rows() {
            return Err(Error::dim(format!(
                "rho: {} matrices for {} rows",
                mats.len(),
                xv.rows()
            )));
        }
        let out = kernels::rho_rows(xv.data(), d, &mats, false);
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::Rho { x, mats }, &[x]))
    }

    /// Output block `i` is input block `index[i]`, where a block is `block`
    /// contiguous elements.
    pub fn gather(&mut self, x: Var, block: usize, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if block == 0 || !xv.numel().is_multiple_of(block) {
            return Err(Error::dim(format!("gather: block {block} vs {:?}", xv.shape())));
        }
        let n_blocks = xv.numel() / block;
        if let Some(&bad) = index.iter().find(|&&i| i >= n_blocks) {
            return Err(Error::dim(format!("gather: block {bad} out of {n_blocks}")));
        }
        let mut out = Vec::with_capacity(index.len() * block);
        for &i in index.iter() {
            out.extend_from_slice(&xv.data()[i * block..(i + 1) * block]);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Gather { x, block, index }, &[x]))
    }

    /// Concatenates `[B, n_i, d]` tensors along the token axis.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 3 {
            return Err(Error::dim(format!("concat_tokens: rank of {first:?}")));
        }
        let (batch, d) = (first[0], first[2]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != batch || s[2] != d {
                return Err(Error::dim(format!("concat_tokens: {first:?} vs {s:?}")));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(batch * total * d);
        for b in 0..batch {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[1] * d;
                out.extend_from_slice(&pv.data()[b * chunk..(b + 1) * chunk]);
            }
        }
        let value = Tensor::new(&[batch, total, d], out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                batch,
                inner: d,
            },
            parts,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "mse")?;
        let n = T::of(av.numel() as f64);
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    /// Convolution of channels-last `x [B, H, W, C_in]` with frozen weights
    /// `[k, k, C_in, C_out]`; gradients flow to `x` only.
    pub fn conv2d_frozen(
        &mut self,
        x: Var,
        weight: Arc<Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[3] {
            return Err(Error::dim(format!("conv2d: input {xs:?} vs weight {ws:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            h: xs[1],
            w: xs[2],
            c_in: xs[3],
            c_out: ws[3],
            kernel: ws[0],
            stride,
            pad,
        };
        if geom.h + 2 * pad < geom.kernel || geom.w + 2 * pad < geom.kernel {
            return Err(Error::dim("conv2d: kernel larger than padded input"));
        }
        let cols = geom.im2col(self.value(x).data());
        let rows = geom.batch * geom.out_h() * geom.out_w();
        let mut out = vec![T::zero(); rows * geom.c_out];
        kernels::gemm(
            rows,
            geom.patch_len(),
            geom.c_out,
            T::one(),
            &cols,
            View::row_major(0, geom.patch_len()),
            weight.data(),
            View::row_major(0, geom.c_out),
            T::zero(),
            &mut out,
            View::row_major(0, geom.c_out),
        );
        let value = Tensor::new(&[geom.batch, geom.out_h(), geom.out_w(), geom.c_out], out)?;
        Ok(self.push(value, Op::Conv { x, weight, geom }, &[x]))
    }

    /// Reverse pass from a one-element `loss`. The tape may only be replayed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on the same tape".into()));
        }
        if !self.grad_enabled {
            return Err(Error::Usage("backward on an inference tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                acc(*x, &mut |dx| {
                    kernels::gemm(
                        rows,
                        d_out,
                        d_in,
                        T::one(),
                        g,
                        View::row_major(0, d_out),
                        wv.data(),
                        View::transposed(0, d_out),
                        T::one(),
                        dx,
                        View::row_major(0, d_in),
                    )
                });
                acc(*w, &mut |dw| {
                    kernels::gemm(
                        d_in,
                        rows,
                        d_out,
                        T::one(),
                        xv.data(),
                        View::transposed(0, d_in),
                        g,
                        View::row_major(0, d_out),
                        T::one(),
                        dw,
                        View::row_major(0, d_out),
                    )
                });
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks_exact(d_out) {
                            for (d, &r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                }
            }
            Op::AddScaled { x, f, scale } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*f, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += *scale * g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv.data()) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av.data()) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += *c * g));
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv.data()) {
                        *d += g * kernels::gelu_grad(x);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &nodes[i].value;
                acc(*x, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y.data()) {
                        *d += g * y * (T::one() - y);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &nodes[i].value;
                acc(*x, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y.data()) {
                        *d += g * (T::one() - y * y);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain);
                let d = gv.numel();
                let inv_d = T::one() / T::of(d as f64);
                acc(*x, &mut |dx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv.data()[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = gr[j] * gv.data()[j];
                            dx[r * d + j] += *rs * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for (gr, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for gr in g.chunks_exact(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            } => {
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = nodes[q.0].requires_grad.then(|| vec![T::zero(); qd.len()]);
                let mut dk = nodes[k.0].requires_grad.then(|| vec![T::zero(); kd.len()]);
                let mut dv = nodes[v.0].requires_grad.then(|| vec![T::zero(); vd.len()]);
                kernels::attention_backward(
                    *dims,
                    qd,
                    kd,
                    vd,
                    probs,
                    g,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, part) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(part) = part {
                        acc(var, &mut |d| {
                            d.iter_mut().zip(&part).for_each(|(d, &p)| *d += p)
                        });
                    }
                }
            }
            Op::Rho { x, mats } => {
                let d = val(*x).last_dim();
                let back = kernels::rho_rows(g, d, mats, true);
                acc(*x, &mut |dx| dx.iter_mut().zip(&back).for_each(|(d, &b)| *d += b));
            }
            Op::Gather { x, block, index } => {
                acc(*x, &mut |dx| {
                    for (o, &src) in index.iter().enumerate() {
                        let gs = &g[o * block..(o + 1) * block];
                        let ds = &mut dx[src * block..(src + 1) * block];
                        ds.iter_mut().zip(gs).for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::Concat {
                parts,
                batch,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| val(*p).shape()[1]).sum();
                let mut start = 0;
                for &p in parts {
                    let n = val(p).shape()[1];
                    acc(p, &mut |dp| {
                        for b in 0..*batch {
                            let src = &g[(b * total + start) * inner..(b * total + start + n) * inner];
                            let dst = &mut dp[b * n * inner..(b + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    });
                    start += n;
                }
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = g[0] * T::of(2.0) / T::of(av.numel() as f64);
                acc(*a, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(av.data()).zip(bv.data()) {
                        *d += c * (x - y);
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(av.data()).zip(bv.data()) {
                        *d -= c * (x - y);
                    }
                });
            }
            Op::Conv { x, weight, geom } => {
                let rows = geom.batch * geom.out_h() * geom.out_w();
                let mut dcols = vec![T::zero(); rows * geom.patch_len()];
                kernels::gemm(
                    rows,
                    geom.c_out,
                    geom.patch_len(),
                    T::one(),
                    g,
                    View::row_major(0, geom.c_out),
                    weight.data(),
                    View::transposed(0, geom.c_out),
                    T::zero(),
                    &mut dcols,
                    View::row_major(0, geom.patch_len()),
                );
                acc(*x, &mut |dx| geom.col2im_add(&dcols, dx));
            }
        }
    }
}

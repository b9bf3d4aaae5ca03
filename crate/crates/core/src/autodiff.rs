//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order and backward is a single reverse sweep.

use crate::blas::gemm;
use crate::dihedral::Dihedral;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        ksize: usize,
        /// im2col buffers, one per batch image; kept only when the kernel needs a gradient.
        cols: Vec<Vec<f64>>,
    },
    Relu(Var),
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Log {
        x: Var,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Dot(Var, Var),
    Norm(Var),
    Transform(Var, Dihedral),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Accumulated gradient of `var`; all zeros if no backward pass reached it.
    pub fn grad(&self, var: Var) -> Tensor {
        let node = &self.nodes[var.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: name.to_string(),
                context: format!(" (output shape {:?})", value.shape()),
            });
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `input`: `N x C x H x W`, `kernel`: `O x C x k x k` with odd `k`, `bias`: `[O]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (o, kc, kh, kw) = self.value(kernel).dims4()?;
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {kc}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be odd and square, got {kh}x{kw}"),
            ));
        }
        if self.value(bias).numel() != o {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias has {} values for {o} output channels",
                    self.value(bias).numel()
                ),
            ));
        }
        let k = kh;
        let ckk = c * k * k;
        let hw = h * w;
        let keep_cols = self.nodes[kernel.0].requires_grad;
        let mut out = vec![0.0; n * o * hw];
        let mut all_cols = Vec::new();
        {
            let x = self.value(input).data();
            let kdata = self.value(kernel).data();
            let bdata = self.value(bias).data();
            for b in 0..n {
                let cols = im2col(&x[b * c * hw..(b + 1) * c * hw], c, h, w, k);
                let dst = &mut out[b * o * hw..(b + 1) * o * hw];
                for (oc, row) in dst.chunks_mut(hw).enumerate() {
                    row.fill(bdata[oc]);
                }
                gemm(o, ckk, hw, kdata, (ckk, 1), &cols, (hw, 1), 1.0, dst);
                if keep_cols {
                    all_cols.push(cols);
                }
            }
        }
        let value = Tensor::new(&[n, o, h, w], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        self.push_checked(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                ksize: k,
                cols: all_cols,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push_checked("relu", value, Op::Relu(x), rg)
    }

    /// Softmax over the channel axis of an `N x C x H x W` tensor, per pixel.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        let (n, c, h, w) = t.dims4()?;
        let hw = h * w;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; c];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    buf[ch] = src[base + ch * hw + p];
                    max = max.max(buf[ch]);
                }
                let mut total = 0.0;
                for v in buf.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for ch in 0..c {
                    out[base + ch * hw + p] = buf[ch] / total;
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(&[logits]);
        self.push_checked("softmax_channels", value, Op::Softmax(logits), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        self.push_checked(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push_checked("scale", value, Op::Scale(x, factor), rg)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(eps).ln());
        let rg = self.rg(&[x]);
        self.push_checked("log", value, Op::Log { x, eps }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push_checked("sum", Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push_checked("mean", Tensor::scalar(mean), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push_checked("reshape", value, Op::Reshape(x), rg)
    }

    /// Rank-1 view of all elements.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, &[n])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::shape(
                "dot",
                format!(
                    "{} vs {} elements",
                    self.value(a).numel(),
                    self.value(b).numel()
                ),
            ));
        }
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.rg(&[a, b]);
        self.push_checked("dot", Tensor::scalar(total), Op::Dot(a, b), rg)
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let sq: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push_checked("l2_norm", Tensor::scalar(sq.sqrt()), Op::Norm(x), rg)
    }

    /// Applies a dihedral pixel permutation to every plane of a rank-4 tensor.
    pub fn transform(&mut self, x: Var, t: Dihedral) -> Result<Var> {
        let value = t.apply_tensor(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push_checked("transform", value, Op::Transform(x, t), rg)
    }

    /// Accumulates `d loss / d node` into the gradient slot of every node
    /// that requires a gradient. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut send = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                send(*x, &|s| {
                    for i in 0..s.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (n, c, h, w) = node.value.dims4()?;
                let hw = h * w;
                send(*x, &|s| {
                    for b in 0..n {
                        let base = b * c * hw;
                        for p in 0..hw {
                            let mut inner = 0.0;
                            for ch in 0..c {
                                let i = base + ch * hw + p;
                                inner += g[i] * out[i];
                            }
                            for ch in 0..c {
                                let i = base + ch * hw + p;
                                s[i] += out[i] * (g[i] - inner);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &|s| add_into(s, g));
                send(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                send(*a, &|s| add_into(s, g));
                send(*b, &|s| {
                    for (d, v) in s.iter_mut().zip(g) {
                        *d -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                send(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / bv[i];
                    }
                });
                send(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(x, f) => {
                send(*x, &|s| {
                    for (d, v) in s.iter_mut().zip(g) {
                        *d += v * f;
                    }
                });
            }
            Op::Log { x, eps } => {
                let xv = self.value(*x).data();
                send(*x, &|s| {
                    for i in 0..s.len() {
                        if xv[i] > *eps {
                            s[i] += g[i] / xv[i];
                        }
                    }
                });
            }
            Op::Sum(x) | Op::Mean(x) => {
                let scale = if matches!(node.op, Op::Mean(_)) {
                    g[0] / self.value(*x).numel() as f64
                } else {
                    g[0]
                };
                send(*x, &|s| s.iter_mut().for_each(|d| *d += scale));
            }
            Op::Reshape(x) => send(*x, &|s| add_into(s, g)),
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * bv[i];
                    }
                });
                send(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * av[i];
                    }
                });
            }
            Op::Norm(x) => {
                let norm = out[0];
                let xv = self.value(*x).data();
                if norm > 0.0 {
                    send(*x, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[0] * xv[i] / norm;
                        }
                    });
                }
            }
            Op::Transform(x, t) => {
                let (_, _, h, w) = node.value.dims4()?;
                let map = t.source_map(h, w)?;
                let plane = h * w;
                send(*x, &|s| {
                    for p in 0..s.len() / plane {
                        let base = p * plane;
                        for (dst, &src) in map.iter().enumerate() {
                            s[base + src] += g[base + dst];
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                ksize,
                cols,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let o = self.value(*kernel).shape()[0];
                let hw = h * w;
                let ckk = c * ksize * ksize;
                send(*bias, &|s| {
                    for b in 0..n {
                        for (oc, d) in s.iter_mut().enumerate() {
                            let start = (b * o + oc) * hw;
                            *d += g[start..start + hw].iter().sum::<f64>();
                        }
                    }
                });
                send(*kernel, &|s| {
                    for (b, col) in cols.iter().enumerate() {
                        let gb = &g[b * o * hw..(b + 1) * o * hw];
                        // dK (O x CKK) += dOut (O x HW) * cols^T
                        gemm(o, hw, ckk, gb, (hw, 1), col, (1, hw), 1.0, s);
                    }
                });
                let kdata = self.value(*kernel).data();
                send(*input, &|s| {
                    let mut dcols = vec![0.0; ckk * hw];
                    for b in 0..n {
                        let gb = &g[b * o * hw..(b + 1) * o * hw];
                        // dcols (CKK x HW) = K^T * dOut
                        gemm(ckk, o, hw, kdata, (1, ckk), gb, (hw, 1), 0.0, &mut dcols);
                        col2im_add(
                            &dcols,
                            &mut s[b * c * hw..(b + 1) * c * hw],
                            c,
                            h,
                            w,
                            *ksize,
                        );
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += v;
    }
}

/// Unfolds one `C x H x W` image into a `(C k k) x (H W)` patch matrix.
///
/// Every entry is written exactly once (padding included), which avoids a
/// separate zeroing pass over what is the largest buffer of a forward pass.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k as isize / 2;
    let hw = h * w;
    let mut cols = Vec::with_capacity(c * k * k * hw);
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k as isize {
            for kj in 0..k as isize {
                let shift = kj - pad;
                let lo = (-shift).max(0) as usize;
                let hi = (w as isize - shift).min(w as isize) as usize;
                for r in 0..h as isize {
                    let sr = r + ki - pad;
                    if sr < 0 || sr >= h as isize {
                        cols.resize(cols.len() + w, 0.0);
                        continue;
                    }
                    let src = &plane[sr as usize * w..(sr as usize + 1) * w];
                    cols.resize(cols.len() + lo, 0.0);
                    cols.extend_from_slice(
                        &src[(lo as isize + shift) as usize..(hi as isize + shift) as usize],
                    );
                    cols.resize(cols.len() + (w - hi), 0.0);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im_add(cols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, k: usize) {
    let pad = k / 2;
    let hw = h * w;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * hw;
                let src = &cols[row..row + hw];
                for r in 0..h {
                    let sr = r as isize + ki as isize - pad as isize;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let dst_row =
                        &mut dx[ch * hw + sr as usize * w..ch * hw + (sr as usize + 1) * w];
                    let src_row = &src[r * w..(r + 1) * w];
                    let shift = kj as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize) as usize;
                    for cc in lo..hi {
                        dst_row[(cc as isize + shift) as usize] += src_row[cc];
                    }
                }
            }
        }
    }
}

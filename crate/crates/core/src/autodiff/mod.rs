//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its value and the handles of its inputs,
//! so the node order is already a topological order. [`Tape::backward`] walks
//! it once in reverse.

mod adam;
mod checkpoint;
mod kernels;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor};
pub use tensor::Tensor;

use kernels::ConvGeom;

use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding mode of [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

pub const LEAKY_SLOPE: f64 = 0.1;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AddBias(Var, Var),
    ConcatChannels(Var, Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Upsample2(Var),
    Downsample2(Var),
    ForwardDiff(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed ops. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|x| x.is_finite()),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    /// Adds a non-differentiated constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let g = self.ng(x);
        self.push(out, op, g)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(ta, tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "hadamard")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.map(x, |v| k * v, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.map(x, |v| v + k, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    /// Square root; the input must be strictly positive.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidParameter("sqrt of a nonpositive value".into()));
        }
        Ok(self.map(x, f64::sqrt, Op::Sqrt(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let g = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let g = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), g)
    }

    /// 2-D cross-correlation of `x: [N,H,W,Cin]` with `k: [kh,kw,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: Padding) -> Result<Var> {
        let [n, h, w, cin] = self.nodes[x.0].value.nhwc()?;
        let [kh, kw, kc, cout] = self.nodes[k.0].value.nhwc()?;
        if kc != cin {
            return Err(shape_err(format!("conv2d: kernel expects {kc} input channels, got {cin}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err(format!("conv2d: kernel {kh}x{kw} must have odd sides")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidParameter(format!("conv2d: stride {stride} not in {{1, 2}}")));
        }
        let (pad_h, pad_w) = match pad {
            Padding::Same => (kh / 2, kw / 2),
            Padding::Valid => (0, 0),
        };
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return Err(shape_err("conv2d: kernel larger than padded input"));
        }
        let geom = ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_h,
            pad_w,
            ho: (h + 2 * pad_h - kh) / stride + 1,
            wo: (w + 2 * pad_w - kw) / stride + 1,
        };
        let (rows, patch) = (geom.rows(), geom.patch());
        let mut cols = vec![0.0; n * rows * patch];
        let mut out = vec![0.0; n * rows * cout];
        {
            let xd = self.nodes[x.0].value.data();
            let kd = self.nodes[k.0].value.data();
            for b in 0..n {
                let c = &mut cols[b * rows * patch..][..rows * patch];
                kernels::im2col(&geom, &xd[b * h * w * cin..][..h * w * cin], c);
                kernels::gemm(rows, patch, cout, c, false, kd, false, 0.0, &mut out[b * rows * cout..][..rows * cout]);
            }
        }
        let g = self.ng(x) || self.ng(k);
        let t = Tensor::new(vec![n, geom.ho, geom.wo, cout], out)?;
        // patches are only needed to form the kernel gradient
        let cols = if self.ng(k) { cols } else { Vec::new() };
        Ok(self.push(t, Op::Conv2d { x, k, geom, cols }, g))
    }

    /// Adds a per-channel bias `b: [C]` to `x: [N,H,W,C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [_, _, _, c] = self.nodes[x.0].value.nhwc()?;
        let bt = &self.nodes[b.0].value;
        if bt.numel() != c {
            return Err(shape_err(format!("add_bias: {} biases for {c} channels", bt.numel())));
        }
        let bias = bt.data().to_vec();
        let xt = &self.nodes[x.0].value;
        let data = xt.data().iter().enumerate().map(|(i, v)| v + bias[i % c]).collect();
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        let g = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias(x, b), g))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, h, w, ca] = self.nodes[a.0].value.nhwc()?;
        let [nb, hb, wb, cb] = self.nodes[b.0].value.nhwc()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err("concat_channels: spatial shapes differ"));
        }
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut data = Vec::with_capacity(n * h * w * (ca + cb));
        for p in 0..n * h * w {
            data.extend_from_slice(&da[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&db[p * cb..(p + 1) * cb]);
        }
        let out = Tensor::new(vec![n, h, w, ca + cb], data)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatChannels(a, b), g))
    }

    /// Per-sample, per-channel normalisation over the spatial axes.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.nodes[x.0].value.nhwc()?;
        let xd = self.nodes[x.0].value.data();
        let hw = (h * w) as f64;
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; n * c];
        for b in 0..n {
            let xs = &xd[b * h * w * c..][..h * w * c];
            let mut mean = vec![0.0; c];
            for p in xs.chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(p) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= hw);
            let mut var = vec![0.0; c];
            for p in xs.chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(p).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s / hw + INSTANCE_NORM_EPS).sqrt()).collect();
            let ys = &mut out[b * h * w * c..][..h * w * c];
            for (yp, xp) in ys.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                for ch in 0..c {
                    yp[ch] = (xp[ch] - mean[ch]) * inv[ch];
                }
            }
            inv_std[b * c..(b + 1) * c].copy_from_slice(&inv);
        }
        let out = Tensor::new(vec![n, h, w, c], out)?;
        let g = self.ng(x);
        Ok(self.push(out, Op::InstanceNorm { x, inv_std }, g))
    }

    /// ×2 bilinear upsampling (half-pixel centres, clamped borders).
    pub fn bilinear_upsample(&mut self, x: Var) -> Result<Var> {
        let dims @ [n, h, w, c] = self.nodes[x.0].value.nhwc()?;
        let mut out = vec![0.0; n * 4 * h * w * c];
        kernels::upsample2(self.nodes[x.0].value.data(), dims, &mut out);
        let out = Tensor::new(vec![n, 2 * h, 2 * w, c], out)?;
        let g = self.ng(x);
        Ok(self.push(out, Op::Upsample2(x), g))
    }

    /// 2×2 mean pooling.
    pub fn avg_downsample(&mut self, x: Var) -> Result<Var> {
        let dims @ [n, h, w, c] = self.nodes[x.0].value.nhwc()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!("avg_downsample: {h}x{w} is not divisible by 2")));
        }
        let mut out = vec![0.0; n * h / 2 * w / 2 * c];
        kernels::downsample2(self.nodes[x.0].value.data(), dims, &mut out);
        let out = Tensor::new(vec![n, h / 2, w / 2, c], out)?;
        let g = self.ng(x);
        Ok(self.push(out, Op::Downsample2(x), g))
    }

    /// Forward difference along rows (`axis = 1`) or columns (`axis = 2`),
    /// zero on the last row/column.
    pub fn forward_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.nodes[x.0].value.nhwc()?;
        if axis != 1 && axis != 2 {
            return Err(Error::InvalidParameter(format!("forward_diff: axis {axis} is not spatial")));
        }
        let mut out = vec![0.0; self.nodes[x.0].value.numel()];
        kernels::forward_diff(self.nodes[x.0].value.data(), dims, axis, &mut out);
        let out = Tensor::new(dims.to_vec(), out)?;
        let g = self.ng(x);
        Ok(self.push(out, Op::ForwardDiff(x, axis), g))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let sizes = self.nodes.iter().map(|n| n.value.numel()).collect();
        Ok(Gradients { grads, sizes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = self.acc(grads, *b) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).to_vec(), val(*b));
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(vb) {
                        *g += d * y;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(&va) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += k * d);
                }
            }
            Op::AddScalar(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Square(x) => {
                let vx = val(*x);
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(vx) {
                        *g += 2.0 * v * d;
                    }
                }
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(y) {
                        *g += 0.5 * d / y;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(y) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(vx) {
                        *g += if *v > 0.0 { *d } else { slope * d };
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    let s = gy[0] / g.len() as f64;
                    g.iter_mut().for_each(|g| *g += s);
                }
            }
            Op::Conv2d { x, k, geom, cols } => {
                let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
                let per_in = geom.h * geom.w * geom.cin;
                if let Some(gk) = self.acc(grads, *k) {
                    for b in 0..geom.n {
                        kernels::gemm(
                            patch,
                            rows,
                            cout,
                            &cols[b * rows * patch..][..rows * patch],
                            true,
                            &gy[b * rows * cout..][..rows * cout],
                            false,
                            1.0,
                            gk,
                        );
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let kd = val(*k);
                    let mut dcols = vec![0.0; rows * patch];
                    let gx = self.acc(grads, *x).expect("needs grad");
                    for b in 0..geom.n {
                        kernels::gemm(rows, cout, patch, &gy[b * rows * cout..][..rows * cout], false, kd, true, 0.0, &mut dcols);
                        kernels::col2im(geom, &dcols, &mut gx[b * per_in..][..per_in]);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = self.acc(grads, *b) {
                    let c = g.len();
                    for (i, d) in gy.iter().enumerate() {
                        g[i % c] += d;
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let ca = *self.nodes[a.0].value.shape().last().expect("rank 4");
                let cb = *self.nodes[b.0].value.shape().last().expect("rank 4");
                let npix = gy.len() / (ca + cb);
                if let Some(g) = self.acc(grads, *a) {
                    for p in 0..npix {
                        for ch in 0..ca {
                            g[p * ca + ch] += gy[p * (ca + cb) + ch];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for p in 0..npix {
                        for ch in 0..cb {
                            g[p * cb + ch] += gy[p * (ca + cb) + ca + ch];
                        }
                    }
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let [n, h, w, c] = node.value.nhwc().expect("rank 4");
                let y = node.value.data();
                let hw = (h * w) as f64;
                if let Some(g) = self.acc(grads, *x) {
                    for b in 0..n {
                        let off = b * h * w * c;
                        let mut mdy = vec![0.0; c];
                        let mut mdyy = vec![0.0; c];
                        for p in 0..h * w {
                            for ch in 0..c {
                                let i = off + p * c + ch;
                                mdy[ch] += gy[i];
                                mdyy[ch] += gy[i] * y[i];
                            }
                        }
                        for p in 0..h * w {
                            for ch in 0..c {
                                let i = off + p * c + ch;
                                g[i] += inv_std[b * c + ch] * (gy[i] - mdy[ch] / hw - y[i] * mdyy[ch] / hw);
                            }
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let dims = self.nodes[x.0].value.nhwc().expect("rank 4");
                if let Some(g) = self.acc(grads, *x) {
                    kernels::upsample2_adjoint(gy, dims, g);
                }
            }
            Op::Downsample2(x) => {
                let dims = self.nodes[x.0].value.nhwc().expect("rank 4");
                if let Some(g) = self.acc(grads, *x) {
                    kernels::downsample2_adjoint(gy, dims, g);
                }
            }
            Op::ForwardDiff(x, axis) => {
                let dims = self.nodes[x.0].value.nhwc().expect("rank 4");
                if let Some(g) = self.acc(grads, *x) {
                    kernels::forward_diff_adjoint(gy, dims, *axis, g);
                }
            }
        }
    }
}

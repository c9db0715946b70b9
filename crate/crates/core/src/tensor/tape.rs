use super::conv::{self, Geometry};
use super::gemm::gemm;
use super::{ensure_finite, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    Prelu {
        input: Var,
        slope: Var,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Column(Var, usize),
    ScaleRows(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation so that gradients can be pulled back from a scalar.
///
/// Nodes are appended in execution order, so the record is always acyclic and
/// a reverse sweep is a valid topological order.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Gradients are only produced for leaves with
    /// `requires_grad` and for nodes that depend on one.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        ensure_finite(&value, "leaf")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op, name: &'static str) -> Result<Var> {
        ensure_finite(&value, name)?;
        let needs_grad = inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [channels] {
                return Err(Error::shape(
                    op,
                    format!("bias {:?}, expected [{channels}]", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    /// 2-D convolution. `input` is NCHW, `weight` is `[Cout, Cin, K, K]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w}"),
            ));
        }
        self.check_bias("conv2d", bias, cout)?;
        let geom = Geometry {
            channels: cin,
            wide_h: h,
            wide_w: w,
            narrow_h: (h + 2 * padding - k) / stride + 1,
            narrow_w: (w + 2 * padding - k) / stride + 1,
            kernel: k,
            stride,
            padding,
        };
        let out_len = cout * geom.narrow_len();
        let mut out = Tensor::zeros(&[n, cout, geom.narrow_h, geom.narrow_w]);
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let mut scratch = Vec::new();
            let od = out.data_mut();
            for s in 0..n {
                conv::conv_forward(
                    &geom,
                    &x[s * geom.wide_len()..(s + 1) * geom.wide_len()],
                    wt,
                    cout,
                    &mut od[s * out_len..(s + 1) * out_len],
                    &mut scratch,
                );
            }
        }
        if let Some(b) = bias {
            add_channel_bias(out.data_mut(), self.value(b).data(), geom.narrow_len());
        }
        self.record(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            "conv2d",
        )
    }

    /// Transposed 2-D convolution. `weight` is `[Cin, Cout, K, K]`; the output
    /// side is `(H - 1) * stride - 2 * padding + K + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {xs:?}, weight {ws:?}"),
            ));
        }
        if xs[1] != ws[0] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {} channels, weight expects {}", xs[1], ws[0]),
            ));
        }
        if stride == 0 || output_padding >= stride {
            return Err(Error::InvalidArgument(format!(
                "conv_transpose2d needs stride >= 1 and output_padding < stride (got {stride}, {output_padding})"
            )));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        let wide = |d: usize| ((d - 1) * stride + k + output_padding).checked_sub(2 * padding);
        let (Some(wide_h), Some(wide_w)) = (wide(h), wide(w)) else {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("padding {padding} too large for {h}x{w}"),
            ));
        };
        self.check_bias("conv_transpose2d", bias, cout)?;
        let geom = Geometry {
            channels: cout,
            wide_h,
            wide_w,
            narrow_h: h,
            narrow_w: w,
            kernel: k,
            stride,
            padding,
        };
        let in_len = cin * geom.narrow_len();
        let mut out = Tensor::zeros(&[n, cout, wide_h, wide_w]);
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let mut scratch = Vec::new();
            let od = out.data_mut();
            for s in 0..n {
                conv::conv_transpose_forward(
                    &geom,
                    &x[s * in_len..(s + 1) * in_len],
                    wt,
                    cin,
                    &mut od[s * geom.wide_len()..(s + 1) * geom.wide_len()],
                    &mut scratch,
                );
            }
        }
        if let Some(b) = bias {
            add_channel_bias(out.data_mut(), self.value(b).data(), wide_h * wide_w);
        }
        self.record(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            "conv_transpose2d",
        )
    }

    /// `max(0, x) + a_c * min(0, x)` with one slope per channel (axis 1).
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ss = self.shape(slope).to_vec();
        if xs.len() < 2 || ss != [xs[1]] {
            return Err(Error::shape("prelu", format!("input {xs:?}, slope {ss:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let a = self.value(slope).data();
        let x = self.value(input);
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if *v < T::zero() {
                *v = *v * a[(i / inner) % xs[1]];
            }
        }
        self.record(out, Op::Prelu { input, slope }, "prelu")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v = v.max(T::zero());
        }
        self.record(out, Op::Relu(input), "relu")
    }

    /// NCHW -> NC mean over the spatial axes.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let scale = T::from_f64(1.0 / hw as f64);
        let x = self.value(input).data();
        let data = x.chunks(hw).map(|c| c.iter().copied().sum::<T>() * scale).collect();
        let out = Tensor::new(vec![xs[0], xs[1]], data)?;
        self.record(out, Op::GlobalAvgPool(input), "global_avg_pool")
    }

    /// `x W^T + b` for `x [N, In]`, `W [Out, In]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        self.check_bias("linear", bias, ws[0])?;
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, fout]);
        gemm(
            n,
            fin,
            fout,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            out.data_mut(),
            T::zero(),
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.data_mut().chunks_mut(fout) {
                for (v, b) in row.iter_mut().zip(bd) {
                    *v = *v + *b;
                }
            }
        }
        self.record(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            "linear",
        )
    }

    /// Row-wise softmax of a `[N, K]` tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("softmax", format!("{xs:?}")));
        }
        ensure_finite(self.value(input), "softmax")?;
        let mut out = self.value(input).clone();
        for row in out.data_mut().chunks_mut(xs[1]) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.record(out, Op::Softmax(input), "softmax")
    }

    fn zip_with(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(name, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        self.record(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        self.record(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        self.record(out, Op::Mul(a, b), "mul")
    }

    /// `x * c` for a constant `c`.
    pub fn scale(&mut self, input: Var, c: f64) -> Result<Var> {
        let k = T::from_f64(c);
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v = *v * k;
        }
        self.record(out, Op::Scale(input, c), "scale")
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, input: Var, c: f64) -> Result<Var> {
        let k = T::from_f64(c);
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v = *v + k;
        }
        self.record(out, Op::Shift(input), "shift")
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, input: Var) -> Result<Var> {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v = v.abs();
        }
        self.record(out, Op::Abs(input), "abs")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().copied().sum();
        self.record(Tensor::scalar(total), Op::Sum(input), "sum")
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let total: T = x.data().iter().copied().sum();
        let out = Tensor::scalar(total / T::from_f64(x.len() as f64));
        self.record(out, Op::Mean(input), "mean")
    }

    /// Column `index` of a `[N, K]` tensor, as `[N]`.
    pub fn column(&mut self, input: Var, index: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("column", format!("{xs:?}")));
        }
        if index >= xs[1] {
            return Err(Error::IndexOutOfRange {
                index,
                len: xs[1],
            });
        }
        let data = self.value(input).data().chunks(xs[1]).map(|r| r[index]).collect();
        let out = Tensor::new(vec![xs[0]], data)?;
        self.record(out, Op::Column(input, index), "column")
    }

    /// Scales sample `b` of `x [N, ...]` by `s[b]` for `s [N]`.
    pub fn scale_rows(&mut self, input: Var, scales: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ss = self.shape(scales).to_vec();
        if xs.is_empty() || ss != [xs[0]] {
            return Err(Error::shape("scale_rows", format!("input {xs:?}, scales {ss:?}")));
        }
        let inner = self.value(input).len() / xs[0].max(1);
        let s = self.value(scales).data().to_vec();
        let mut out = self.value(input).clone();
        if inner > 0 {
            for (row, k) in out.data_mut().chunks_mut(inner).zip(&s) {
                for v in row {
                    *v = *v * *k;
                }
            }
        }
        self.record(out, Op::ScaleRows(input, scales), "scale_rows")
    }

    /// Pulls gradients back from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, T::one()));
        let mut scratch = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads, &mut scratch)?;
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].needs_grad {
                *g = None;
            } else if let Some(g) = g {
                ensure_finite(g, "backward")?;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        scratch: &mut Vec<T>,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(input).data();
                let wt = self.value(weight);
                let cout = wt.shape()[0];
                let n = self.shape(input)[0];
                let out_len = cout * geom.narrow_len();
                let mut gx = self.wants(input).then(|| Tensor::zeros(self.shape(input)));
                let mut gw = self.wants(weight).then(|| Tensor::zeros(wt.shape()));
                for s in 0..n {
                    let wl = geom.wide_len();
                    conv::conv_backward(
                        &geom,
                        &x[s * wl..(s + 1) * wl],
                        wt.data(),
                        cout,
                        &g.data()[s * out_len..(s + 1) * out_len],
                        gx.as_mut().map(|t| &mut t.data_mut()[s * wl..(s + 1) * wl]),
                        gw.as_mut().map(|t| t.data_mut()),
                        scratch,
                    );
                }
                if let Some(t) = gx {
                    accumulate(grads, input, t);
                }
                if let Some(t) = gw {
                    accumulate(grads, weight, t);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    accumulate(grads, b, channel_sums(g.data(), cout, geom.narrow_len()));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(input).data();
                let wt = self.value(weight);
                let cin = wt.shape()[0];
                let n = self.shape(input)[0];
                let in_len = cin * geom.narrow_len();
                let wl = geom.wide_len();
                let mut gx = self.wants(input).then(|| Tensor::zeros(self.shape(input)));
                let mut gw = self.wants(weight).then(|| Tensor::zeros(wt.shape()));
                for s in 0..n {
                    conv::conv_transpose_backward(
                        &geom,
                        &x[s * in_len..(s + 1) * in_len],
                        wt.data(),
                        cin,
                        &g.data()[s * wl..(s + 1) * wl],
                        gx.as_mut().map(|t| &mut t.data_mut()[s * in_len..(s + 1) * in_len]),
                        gw.as_mut().map(|t| t.data_mut()),
                        scratch,
                    );
                }
                if let Some(t) = gx {
                    accumulate(grads, input, t);
                }
                if let Some(t) = gw {
                    accumulate(grads, weight, t);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    accumulate(
                        grads,
                        b,
                        channel_sums(g.data(), geom.channels, geom.wide_h * geom.wide_w),
                    );
                }
            }
            Op::Prelu { input, slope } => {
                let x = self.value(input);
                let a = self.value(slope).data();
                let channels = a.len();
                let inner: usize = x.shape()[2..].iter().product();
                if self.wants(input) {
                    let mut gx = g.clone();
                    for (i, (gv, xv)) in gx.data_mut().iter_mut().zip(x.data()).enumerate() {
                        if *xv < T::zero() {
                            *gv = *gv * a[(i / inner) % channels];
                        }
                    }
                    accumulate(grads, input, gx);
                }
                if self.wants(slope) {
                    let mut ga = Tensor::zeros(&[channels]);
                    let gad = ga.data_mut();
                    for (i, (gv, xv)) in g.data().iter().zip(x.data()).enumerate() {
                        if *xv < T::zero() {
                            let c = (i / inner) % channels;
                            gad[c] = gad[c] + *gv * *xv;
                        }
                    }
                    accumulate(grads, slope, ga);
                }
            }
            Op::Relu(input) => {
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(self.value(input).data()) {
                    if *xv <= T::zero() {
                        *gv = T::zero();
                    }
                }
                accumulate(grads, input, gx);
            }
            Op::GlobalAvgPool(input) => {
                let xs = self.shape(input);
                let hw = xs[2] * xs[3];
                let scale = T::from_f64(1.0 / hw as f64);
                let gx = Tensor::from_fn(xs, |i| g.data()[i / hw] * scale);
                accumulate(grads, input, gx);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(input);
                let wt = self.value(weight);
                let (n, fin, fout) = (x.shape()[0], x.shape()[1], wt.shape()[0]);
                if self.wants(input) {
                    let mut gx = Tensor::zeros(x.shape());
                    gemm(n, fout, fin, g.data(), false, wt.data(), false, gx.data_mut(), T::zero());
                    accumulate(grads, input, gx);
                }
                if self.wants(weight) {
                    let mut gw = Tensor::zeros(wt.shape());
                    gemm(fout, n, fin, g.data(), true, x.data(), false, gw.data_mut(), T::zero());
                    accumulate(grads, weight, gw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut gb = Tensor::zeros(&[fout]);
                    for row in g.data().chunks(fout) {
                        for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                            *acc = *acc + *v;
                        }
                    }
                    accumulate(grads, b, gb);
                }
            }
            Op::Softmax(input) => {
                let y = &node.value;
                let k = y.shape()[1];
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                    let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = *yv * (*gv - dot);
                    }
                }
                accumulate(grads, input, gx);
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, map(g, |v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, zip(g, self.value(b), |p, q| p * q));
                }
                if self.wants(b) {
                    accumulate(grads, b, zip(g, self.value(a), |p, q| p * q));
                }
            }
            Op::Scale(input, c) => {
                let k = T::from_f64(c);
                accumulate(grads, input, map(g, |v| v * k));
            }
            Op::Shift(input) => accumulate(grads, input, g.clone()),
            Op::Abs(input) => {
                let gx = zip(g, self.value(input), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                accumulate(grads, input, gx);
            }
            Op::Sum(input) => {
                let gv = g.data()[0];
                accumulate(grads, input, Tensor::full(self.shape(input), gv));
            }
            Op::Mean(input) => {
                let x = self.value(input);
                let gv = g.data()[0] / T::from_f64(x.len() as f64);
                accumulate(grads, input, Tensor::full(x.shape(), gv));
            }
            Op::Column(input, index) => {
                let xs = self.shape(input);
                let k = xs[1];
                let gx = Tensor::from_fn(xs, |i| {
                    if i % k == index {
                        g.data()[i / k]
                    } else {
                        T::zero()
                    }
                });
                accumulate(grads, input, gx);
            }
            Op::ScaleRows(input, scales) => {
                let x = self.value(input);
                let s = self.value(scales).data();
                let inner = x.len() / s.len().max(1);
                if self.wants(input) {
                    let gx = Tensor::from_fn(x.shape(), |i| g.data()[i] * s[i / inner]);
                    accumulate(grads, input, gx);
                }
                if self.wants(scales) && inner > 0 {
                    let data = g
                        .data()
                        .chunks(inner)
                        .zip(x.data().chunks(inner))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| *a * *b).sum())
                        .collect();
                    accumulate(grads, scales, Tensor::new(vec![s.len()], data)?);
                }
            }
        }
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::Conv2d {
            input,
            weight,
            bias,
            ..
        }
        | Op::ConvTranspose2d {
            input,
            weight,
            bias,
            ..
        }
        | Op::Linear {
            input,
            weight,
            bias,
        } => {
            let mut v = vec![input, weight];
            v.extend(bias);
            v
        }
        Op::Prelu { input, slope } => vec![input, slope],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleRows(a, b) => vec![a, b],
        Op::Relu(x)
        | Op::GlobalAvgPool(x)
        | Op::Softmax(x)
        | Op::Scale(x, _)
        | Op::Shift(x)
        | Op::Abs(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Column(x, _) => vec![x],
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_fn(t.shape(), |i| f(t.data()[i]))
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    let channels = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % channels];
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn channel_sums<T: Real>(g: &[T], channels: usize, plane: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[channels]);
    for (i, chunk) in g.chunks(plane).enumerate() {
        let s: T = chunk.iter().copied().sum();
        let d = out.data_mut();
        d[i % channels] = d[i % channels] + s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_identity_and_hand_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[5.0])).unwrap();
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);

        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv2d_output_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        let w = tape.constant(Tensor::zeros(&[16, 3, 3, 3])).unwrap();
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 16, 32, 32]);
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 16, 16, 16]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        assert!(matches!(
            tape.conv2d(x, w, None, 1, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_transpose_expands_single_pixel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
        let y = tape.conv_transpose2d(x, w, None, 4, 0, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
        assert!(tape.value(y).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn conv_transpose_output_padding_reaches_exact_upscale() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 56, 32, 32])).unwrap();
        let w = tape.constant(Tensor::zeros(&[56, 1, 9, 9])).unwrap();
        let y = tape.conv_transpose2d(x, w, None, 4, 4, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 125, 125]);
        let y = tape.conv_transpose2d(x, w, None, 4, 4, 3).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 128, 128]);
        assert!(tape.conv_transpose2d(x, w, None, 4, 4, 4).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1], &[-2.0])).unwrap();
        let a = tape.constant(t(&[1], &[0.25])).unwrap();
        let y = tape.prelu(x, a).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.5]);

        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0])).unwrap();
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let bad = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(tape.constant(bad), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_simple_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_requires_scalar_and_is_not_cumulative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.scale(x, 3.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(y).unwrap();
        let first = tape.backward(s).unwrap();
        let second = tape.backward(s).unwrap();
        assert_eq!(first.get(x).unwrap(), second.get(x).unwrap());
        assert_eq!(second.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let c = tape.constant(t(&[2], &[5.0, 6.0])).unwrap();
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 6.0]);
        assert!(g.get(c).is_none());
    }
}

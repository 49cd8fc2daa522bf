//! Forward construction of graph operations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::conv;
use super::{Op, Var};

impl Var {
    fn rg_with(&self, other: &Var) -> bool {
        self.requires_grad() || other.requires_grad()
    }

    fn check_same_shape(&self, other: &Var, op: &'static str) -> Result<()> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(Error::Dim {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_graph_as(other, "add")?;
        self.check_same_shape(other, "add")?;
        let t = self.value().zip(&other.value(), |a, b| a + b);
        self.graph
            .push(t, Op::Add(self.id, other.id), self.rg_with(other), "add")
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_graph_as(other, "sub")?;
        self.check_same_shape(other, "sub")?;
        let t = self.value().zip(&other.value(), |a, b| a - b);
        self.graph
            .push(t, Op::Sub(self.id, other.id), self.rg_with(other), "sub")
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_graph_as(other, "mul")?;
        self.check_same_shape(other, "mul")?;
        let t = self.value().zip(&other.value(), |a, b| a * b);
        self.graph
            .push(t, Op::Mul(self.id, other.id), self.rg_with(other), "mul")
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        let t = self.value().map(|v| v * c);
        self.graph
            .push(t, Op::Scale(self.id, c), self.requires_grad(), "scale")
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn recip(&self) -> Result<Var> {
        let t = self.value().map(|v| 1.0 / v);
        self.graph
            .push(t, Op::Recip(self.id), self.requires_grad(), "recip")
    }

    pub fn exp(&self) -> Result<Var> {
        let t = self.value().map(f64::exp);
        self.graph
            .push(t, Op::Exp(self.id), self.requires_grad(), "exp")
    }

    pub fn log(&self) -> Result<Var> {
        let t = self.value().map(f64::ln);
        self.graph
            .push(t, Op::Log(self.id), self.requires_grad(), "log")
    }

    pub fn sqrt(&self) -> Result<Var> {
        let t = self.value().map(f64::sqrt);
        self.graph
            .push(t, Op::Sqrt(self.id), self.requires_grad(), "sqrt")
    }

    pub fn relu(&self) -> Result<Var> {
        let t = self.value().map(|v| v.max(0.0));
        self.graph
            .push(t, Op::Relu(self.id), self.requires_grad(), "relu")
    }

    /// max(x, c) with gradient mask `x > c`; composed from relu so it stays
    /// differentiable to any order.
    pub fn clamp_min(&self, c: f64) -> Result<Var> {
        let shift = self.graph.constant(Tensor::full(self.value().shape(), c))?;
        self.sub(&shift)?.relu()?.add(&shift)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_graph_as(other, "matmul")?;
        let a = self.value();
        let b = other.value();
        let mismatch = |op| Error::Dim {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(mismatch("matmul: operands must be 2-D"));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(mismatch("matmul: inner dimensions disagree"));
        }
        let t = Tensor::new(vec![m, n], conv::matmul(a.data(), b.data(), m, k, n))?;
        self.graph.push(
            t,
            Op::Matmul(self.id, other.id),
            self.rg_with(other),
            "matmul",
        )
    }

    pub fn transpose(&self) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                shape: a.shape().to_vec(),
                msg: "expected 2-D".into(),
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let src = a.data();
        let t = Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r]);
        self.graph
            .push(t, Op::Transpose(self.id), self.requires_grad(), "transpose")
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let t = self.value().reshaped(shape)?;
        self.graph
            .push(t, Op::Reshape(self.id), self.requires_grad(), "reshape")
    }

    /// [N, d1, d2, ...] -> [N, d1*d2*...]
    pub fn flatten(&self) -> Result<Var> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::Shape {
                op: "flatten",
                shape: s,
                msg: "expected at least 1-D".into(),
            });
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(vec![s[0], rest])
    }

    pub fn sum(&self) -> Result<Var> {
        let a = self.value();
        if a.numel() == 0 {
            return Err(Error::EmptyInput { op: "sum" });
        }
        let t = Tensor::scalar(a.data().iter().sum());
        self.graph
            .push(t, Op::Sum(self.id), self.requires_grad(), "sum")
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::EmptyInput { op: "mean" });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Scalar -> filled tensor of `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let a = self.value();
        if a.numel() != 1 {
            return Err(Error::Shape {
                op: "broadcast_to",
                shape: a.shape().to_vec(),
                msg: "expected scalar".into(),
            });
        }
        let t = Tensor::full(shape, a.item());
        self.graph.push(
            t,
            Op::BroadcastScalar(self.id),
            self.requires_grad(),
            "broadcast_to",
        )
    }

    /// [R, L] -> [R], summing along axis 1.
    pub fn sum_axis1(&self) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(Error::Shape {
                op: "sum_axis1",
                shape: a.shape().to_vec(),
                msg: "expected 2-D".into(),
            });
        }
        if a.numel() == 0 {
            return Err(Error::EmptyInput { op: "sum_axis1" });
        }
        let (r, l) = (a.shape()[0], a.shape()[1]);
        let d = a.data();
        let t = Tensor::from_fn(&[r], |i| d[i * l..(i + 1) * l].iter().sum());
        self.graph
            .push(t, Op::SumAxis1(self.id), self.requires_grad(), "sum_axis1")
    }

    /// [R] -> [R, cols], repeating each entry along a new axis 1.
    pub fn broadcast_axis1(&self, cols: usize) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 1 || cols == 0 {
            return Err(Error::Shape {
                op: "broadcast_axis1",
                shape: a.shape().to_vec(),
                msg: format!("expected 1-D and cols >= 1, cols = {cols}"),
            });
        }
        let r = a.shape()[0];
        let d = a.data();
        let t = Tensor::from_fn(&[r, cols], |i| d[i / cols]);
        self.graph.push(
            t,
            Op::BroadcastAxis1(self.id),
            self.requires_grad(),
            "broadcast_axis1",
        )
    }

    /// [N, F] -> [F], summing along axis 0.
    pub fn sum_rows(&self) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(Error::Shape {
                op: "sum_rows",
                shape: a.shape().to_vec(),
                msg: "expected 2-D".into(),
            });
        }
        if a.numel() == 0 {
            return Err(Error::EmptyInput { op: "sum_rows" });
        }
        let (n, f) = (a.shape()[0], a.shape()[1]);
        let d = a.data();
        let mut out = vec![0.0; f];
        for row in 0..n {
            for (o, &v) in out.iter_mut().zip(&d[row * f..(row + 1) * f]) {
                *o += v;
            }
        }
        let t = Tensor::new(vec![f], out)?;
        self.graph
            .push(t, Op::SumRows(self.id), self.requires_grad(), "sum_rows")
    }

    /// [F] -> [n, F], repeating the vector as rows.
    pub fn broadcast_rows(&self, n: usize) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 1 || n == 0 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                shape: a.shape().to_vec(),
                msg: format!("expected 1-D and n >= 1, n = {n}"),
            });
        }
        let f = a.shape()[0];
        let d = a.data();
        let t = Tensor::from_fn(&[n, f], |i| d[i % f]);
        self.graph.push(
            t,
            Op::BroadcastRows(self.id),
            self.requires_grad(),
            "broadcast_rows",
        )
    }

    /// Rows `[start, end)` along axis 0, trailing dims preserved.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var> {
        let a = self.value();
        let s = a.shape();
        if s.is_empty() || start >= end || end > s[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                shape: s.to_vec(),
                msg: format!("invalid row range {start}..{end}"),
            });
        }
        let stride: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = end - start;
        let t = Tensor::new(shape, a.data()[start * stride..end * stride].to_vec())?;
        self.graph.push(
            t,
            Op::SliceRows(self.id, start),
            self.requires_grad(),
            "slice_rows",
        )
    }

    /// Inverse of `slice_rows`: embed into `total` rows of zeros at `start`.
    pub fn pad_rows(&self, total: usize, start: usize) -> Result<Var> {
        let a = self.value();
        let s = a.shape();
        if s.is_empty() || start + s[0] > total {
            return Err(Error::Shape {
                op: "pad_rows",
                shape: s.to_vec(),
                msg: format!("rows do not fit: start {start}, total {total}"),
            });
        }
        let stride: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = total;
        let mut data = vec![0.0; total * stride];
        data[start * stride..(start + s[0]) * stride].copy_from_slice(a.data());
        let t = Tensor::new(shape, data)?;
        self.graph.push(
            t,
            Op::PadRows(self.id, start),
            self.requires_grad(),
            "pad_rows",
        )
    }

    fn conv_dims(&self, kernel: &Var, stride: usize, pad: usize) -> Result<[usize; 7]> {
        let x = self.value();
        let w = kernel.value();
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dim {
                op: "conv2d: expected 4-D input and kernel",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if xs[1] != ws[1] {
            return Err(Error::Dim {
                op: "conv2d: channel mismatch",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                shape: xs.to_vec(),
                msg: "stride must be >= 1".into(),
            });
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::Shape {
                op: "conv2d",
                shape: xs.to_vec(),
                msg: format!("kernel {:?} larger than padded input", ws),
            });
        }
        Ok([xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3]])
    }

    /// 2-D cross-correlation, input [N,Cin,H,W] with kernel [Cout,Cin,kh,kw].
    pub fn conv2d(&self, kernel: &Var, stride: usize, pad: usize) -> Result<Var> {
        self.same_graph_as(kernel, "conv2d")?;
        let [n, cin, h, w, cout, kh, kw] = self.conv_dims(kernel, stride, pad)?;
        let ho = conv::out_dim(h, kh, stride, pad);
        let wo = conv::out_dim(w, kw, stride, pad);
        let y = conv::forward(
            self.value().data(),
            kernel.value().data(),
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
        );
        let t = Tensor::new(vec![n, cout, ho, wo], y)?;
        self.graph.push(
            t,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                stride,
                pad,
            },
            self.rg_with(kernel),
            "conv2d",
        )
    }

    /// Adjoint of conv2d in the image slot: `self` is an output-shaped
    /// gradient, result has `x_shape`.
    pub(crate) fn conv2d_grad_input(
        &self,
        kernel: &Var,
        stride: usize,
        pad: usize,
        x_shape: &[usize],
    ) -> Result<Var> {
        self.same_graph_as(kernel, "conv2d_grad_input")?;
        let ws = kernel.shape();
        let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let gx = conv::grad_input(
            self.value().data(),
            kernel.value().data(),
            n,
            cin,
            h,
            w,
            ws[0],
            ws[2],
            ws[3],
            stride,
            pad,
        );
        let t = Tensor::new(x_shape.to_vec(), gx)?;
        self.graph.push(
            t,
            Op::ConvDx {
                gy: self.id,
                w: kernel.id,
                stride,
                pad,
            },
            self.rg_with(kernel),
            "conv2d_grad_input",
        )
    }

    /// Adjoint of conv2d in the kernel slot: `self` is the image, `gy` an
    /// output-shaped gradient, result has `w_shape`.
    pub(crate) fn conv2d_grad_kernel(
        &self,
        gy: &Var,
        stride: usize,
        pad: usize,
        w_shape: &[usize],
    ) -> Result<Var> {
        self.same_graph_as(gy, "conv2d_grad_kernel")?;
        let xs = self.shape();
        let gw = conv::grad_kernel(
            self.value().data(),
            gy.value().data(),
            xs[0],
            xs[1],
            xs[2],
            xs[3],
            w_shape[0],
            w_shape[2],
            w_shape[3],
            stride,
            pad,
        );
        let t = Tensor::new(w_shape.to_vec(), gw)?;
        self.graph.push(
            t,
            Op::ConvDw {
                x: self.id,
                gy: gy.id,
                stride,
                pad,
            },
            self.rg_with(gy),
            "conv2d_grad_kernel",
        )
    }

    /// Non-overlapping k x k mean pooling over [N,C,H,W].
    pub fn avg_pool2d(&self, k: usize) -> Result<Var> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::Shape {
                op: "avg_pool2d",
                shape: s.to_vec(),
                msg: format!("need 4-D with spatial dims >= k = {k}"),
            });
        }
        let y = conv::avg_pool(a.data(), s[0], s[1], s[2], s[3], k);
        let t = Tensor::new(vec![s[0], s[1], s[2] / k, s[3] / k], y)?;
        self.graph
            .push(t, Op::AvgPool(self.id, k), self.requires_grad(), "avg_pool2d")
    }

    pub(crate) fn avg_unpool(&self, k: usize, target_shape: &[usize]) -> Result<Var> {
        let a = self.value();
        let (n, c, h, w) = (
            target_shape[0],
            target_shape[1],
            target_shape[2],
            target_shape[3],
        );
        debug_assert_eq!(a.shape(), &[n, c, h / k, w / k]);
        let y = conv::avg_unpool(a.data(), n, c, h, w, k);
        let t = Tensor::new(target_shape.to_vec(), y)?;
        self.graph
            .push(t, Op::AvgUnpool(self.id, k), self.requires_grad(), "avg_unpool")
    }

    /// [N,C,H,W] -> [C], summing batch and spatial dims.
    pub fn sum_channels(&self) -> Result<Var> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 4 {
            return Err(Error::Shape {
                op: "sum_channels",
                shape: s.to_vec(),
                msg: "expected 4-D".into(),
            });
        }
        if a.numel() == 0 {
            return Err(Error::EmptyInput { op: "sum_channels" });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let d = a.data();
        let mut out = vec![0.0; c];
        for img in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                *o += d[(img * c + ch) * hw..(img * c + ch + 1) * hw]
                    .iter()
                    .sum::<f64>();
            }
        }
        let t = Tensor::new(vec![c], out)?;
        self.graph
            .push(t, Op::SumChannels(self.id), self.requires_grad(), "sum_channels")
    }

    /// [C] -> [N,C,H,W], repeating per channel.
    pub fn broadcast_channels(&self, n: usize, h: usize, w: usize) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 1 || n * h * w == 0 {
            return Err(Error::Shape {
                op: "broadcast_channels",
                shape: a.shape().to_vec(),
                msg: "expected 1-D bias and nonzero target dims".into(),
            });
        }
        let c = a.shape()[0];
        let d = a.data();
        let hw = h * w;
        let t = Tensor::from_fn(&[n, c, h, w], |i| d[(i / hw) % c]);
        self.graph.push(
            t,
            Op::BroadcastChannels(self.id),
            self.requires_grad(),
            "broadcast_channels",
        )
    }

    /// Row-wise dot product of two [R, L] matrices -> [R].
    pub fn dot_rows(&self, other: &Var) -> Result<Var> {
        self.mul(other)?.sum_axis1()
    }

    /// Row-wise Euclidean norm of an [R, L] matrix -> [R].
    pub fn l2_norm_rows(&self) -> Result<Var> {
        self.mul(self)?.sum_axis1()?.sqrt()
    }

    /// Euclidean norm of a 1-D vector -> scalar.
    pub fn l2_norm(&self) -> Result<Var> {
        if self.shape().len() != 1 {
            return Err(Error::Shape {
                op: "l2_norm",
                shape: self.shape(),
                msg: "expected 1-D".into(),
            });
        }
        if self.numel() == 0 {
            return Err(Error::EmptyInput { op: "l2_norm" });
        }
        self.mul(self)?.sum()?.sqrt()
    }

    /// Dot product of two 1-D vectors -> scalar.
    pub fn dot(&self, other: &Var) -> Result<Var> {
        if self.shape().len() != 1 {
            return Err(Error::Shape {
                op: "dot",
                shape: self.shape(),
                msg: "expected 1-D".into(),
            });
        }
        if self.numel() == 0 {
            return Err(Error::EmptyInput { op: "dot" });
        }
        self.mul(other)?.sum()
    }

    /// x + b with b broadcast over rows: x [N,F], b [F].
    pub fn add_row_bias(&self, bias: &Var) -> Result<Var> {
        let n = *self.shape().first().ok_or(Error::Shape {
            op: "add_row_bias",
            shape: vec![],
            msg: "scalar input".into(),
        })?;
        self.add(&bias.broadcast_rows(n)?)
    }

    /// x + b with b broadcast over batch and spatial dims: x [N,C,H,W], b [C].
    pub fn add_channel_bias(&self, bias: &Var) -> Result<Var> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape {
                op: "add_channel_bias",
                shape: s,
                msg: "expected 4-D".into(),
            });
        }
        self.add(&bias.broadcast_channels(s[0], s[2], s[3])?)
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
/// row-max subtraction. Gradient w.r.t. logits is `(softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let lv = logits.value();
    let s = lv.shape();
    if s.len() != 2 {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            shape: s.to_vec(),
            msg: "expected [N, C] logits".into(),
        });
    }
    let (n, c) = (s[0], s[1]);
    if n == 0 {
        return Err(Error::EmptyInput {
            op: "softmax_cross_entropy",
        });
    }
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "softmax_cross_entropy: {} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label {
            label: bad,
            classes: c,
        });
    }
    let g = logits.graph();
    let d = lv.data();
    // Row maxima are treated as constants: they cancel in the forward value,
    // so the gradient is unchanged at every order.
    let rowmax = Tensor::from_fn(&[n], |i| {
        d[i * c..(i + 1) * c].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    });
    let shifted = logits.sub(&g.constant(rowmax)?.broadcast_axis1(c)?)?;
    let lse = shifted.exp()?.sum_axis1()?.log()?;
    let onehot = Tensor::from_fn(&[n, c], |i| if labels[i / c] == i % c { 1.0 } else { 0.0 });
    let picked = shifted.mul(&g.constant(onehot)?)?.sum_axis1()?;
    lse.sub(&picked)?.sum()?.scale(1.0 / n as f64)
}

//! Forward primitives and their reverse rules.
//!
//! The op set is exactly what the rendering pipeline needs: elementwise
//! arithmetic, dense linear algebra, pointwise nonlinearities, softmax,
//! gather/concat/slice plumbing, sinusoidal encoding, and the 2-d conv /
//! upsample pair for the feature renderer.

use std::rc::Rc;

use super::kernels;
use super::tape::{buf_for, AutodiffError, Op, Result, Tape};
use super::tensor::Tensor;

impl Tape {
    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (ia, ib) = (self.node_of(a), self.node_of(b));
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(ia) || self.rg(ib);
        let idx = self.push(op(ia, ib), a.shape().to_vec(), Rc::new(data), rg);
        Ok(self.handle(idx, a.shape().to_vec()))
    }

    fn unary_elementwise(
        &mut self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Tensor {
        let ia = self.node_of(a);
        let data: Vec<f64> = a.data().iter().map(|x| f(*x)).collect();
        let rg = self.rg(ia);
        let idx = self.push(op(ia), a.shape().to_vec(), Rc::new(data), rg);
        self.handle(idx, a.shape().to_vec())
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        self.unary_elementwise(a, |x| c * x, |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        self.unary_elementwise(a, |x| x + c, Op::AddScalar)
    }

    pub fn sin(&mut self, a: &Tensor) -> Tensor {
        self.unary_elementwise(a, f64::sin, Op::Sin)
    }

    pub fn cos(&mut self, a: &Tensor) -> Tensor {
        self.unary_elementwise(a, f64::cos, Op::Cos)
    }

    pub fn exp(&mut self, a: &Tensor) -> Tensor {
        self.unary_elementwise(a, f64::exp, Op::Exp)
    }

    /// Values outside `[lo, hi]` are pinned; their gradient is zero (the
    /// clamp leaves the gradient path only when saturated).
    pub fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Tensor {
        self.unary_elementwise(a, |x| x.clamp(lo, hi), |i| Op::Clamp(i, lo, hi))
    }

    pub fn leaky_relu(&mut self, a: &Tensor, slope: f64) -> Tensor {
        self.unary_elementwise(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            |i| Op::LeakyRelu(i, slope),
        )
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        self.unary_elementwise(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    /// `a(m×k) · b(k×n)`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (ia, ib) = (self.node_of(a), self.node_of(b));
        let mut data = vec![0.0; m * n];
        kernels::matmul(a.data(), b.data(), &mut data, m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        let idx = self.push(Op::Matmul(ia, ib), vec![m, n], Rc::new(data), rg);
        Ok(self.handle(idx, vec![m, n]))
    }

    /// Inner product of two equal-length vectors; scalar result.
    pub fn inner(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 || a.shape() != b.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "inner",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (ia, ib) = (self.node_of(a), self.node_of(b));
        let v: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(ia) || self.rg(ib);
        let idx = self.push(Op::Inner(ia, ib), vec![], Rc::new(vec![v]), rg);
        Ok(self.handle(idx, vec![]))
    }

    /// Euclidean norm of a vector; scalar result.
    pub fn norm(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 {
            return Err(AutodiffError::BadShape {
                op: "norm",
                expected: "1-d vector".into(),
                got: a.shape().to_vec(),
            });
        }
        let ia = self.node_of(a);
        let v = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(ia);
        let idx = self.push(Op::Norm(ia), vec![], Rc::new(vec![v]), rg);
        Ok(self.handle(idx, vec![]))
    }

    /// Softmax along `axis` of a 1-d or 2-d tensor, stabilised by max
    /// subtraction.
    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = a.shape().to_vec();
        let (rows, cols) = match (shape.len(), axis) {
            (1, 0) => (1, shape[0]),
            (2, 1) => (shape[0], shape[1]),
            (2, 0) => (shape[0], shape[1]),
            _ => {
                return Err(AutodiffError::BadShape {
                    op: "softmax",
                    expected: format!("1-d or 2-d tensor with axis {axis} in range"),
                    got: shape,
                })
            }
        };
        let ia = self.node_of(a);
        let src = a.data();
        let mut data = vec![0.0; src.len()];
        // Lanes run along the requested axis: row lanes are contiguous,
        // column lanes stride by `cols`.
        let row_lanes = shape.len() == 1 || axis == 1;
        let (lanes, lane_len, step) = if row_lanes { (rows, cols, 1) } else { (cols, rows, cols) };
        for lane in 0..lanes {
            let base = if row_lanes { lane * cols } else { lane };
            let mut max = f64::NEG_INFINITY;
            for i in 0..lane_len {
                max = max.max(src[base + i * step]);
            }
            let mut sum = 0.0;
            for i in 0..lane_len {
                let e = (src[base + i * step] - max).exp();
                data[base + i * step] = e;
                sum += e;
            }
            for i in 0..lane_len {
                data[base + i * step] /= sum;
            }
        }
        let rg = self.rg(ia);
        let idx = self.push(Op::Softmax(ia, axis), shape.clone(), Rc::new(data), rg);
        Ok(self.handle(idx, shape))
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = parts[0].shape().len();
        let mut out_shape = parts[0].shape().to_vec();
        if axis >= rank {
            return Err(AutodiffError::BadShape {
                op: "concat",
                expected: format!("axis < rank {rank}"),
                got: out_shape,
            });
        }
        for p in &parts[1..] {
            if p.shape().len() != rank
                || p.shape()[..axis] != out_shape[..axis]
                || p.shape()[axis + 1..] != out_shape[axis + 1..]
            {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: out_shape,
                    rhs: p.shape().to_vec(),
                });
            }
            out_shape[axis] += p.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total: usize = out_shape.iter().product();
        let mut data = vec![0.0; total];
        let out_block = out_shape[axis] * inner;
        let mut offset = 0;
        let mut ids = Vec::with_capacity(parts.len());
        let mut rg = false;
        for p in parts {
            let i = self.node_of(p);
            rg |= self.rg(i);
            ids.push(i);
            let block = p.shape()[axis] * inner;
            let src = p.data();
            for o in 0..outer {
                data[o * out_block + offset..o * out_block + offset + block]
                    .copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let idx = self.push(Op::Concat(ids, axis), out_shape.clone(), Rc::new(data), rg);
        Ok(self.handle(idx, out_shape))
    }

    /// Columns `from..to` of the last axis.
    pub fn slice_cols(&mut self, a: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let shape = a.shape().to_vec();
        let cols = *shape.last().ok_or_else(|| AutodiffError::BadShape {
            op: "slice_cols",
            expected: "rank >= 1".into(),
            got: shape.clone(),
        })?;
        if from >= to || to > cols {
            return Err(AutodiffError::BadShape {
                op: "slice_cols",
                expected: format!("0 <= from < to <= {cols}"),
                got: vec![from, to],
            });
        }
        let rows = a.len() / cols;
        let ia = self.node_of(a);
        let width = to - from;
        let mut data = vec![0.0; rows * width];
        let src = a.data();
        for r in 0..rows {
            data[r * width..(r + 1) * width].copy_from_slice(&src[r * cols + from..r * cols + to]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = width;
        let rg = self.rg(ia);
        let idx = self.push(Op::SliceCols(ia, from, to), out_shape.clone(), Rc::new(data), rg);
        Ok(self.handle(idx, out_shape))
    }

    /// Same storage, new shape (element count must match).
    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        if count != a.len() {
            return Err(AutodiffError::BadShape {
                op: "reshape",
                expected: format!("{} elements", a.len()),
                got: shape,
            });
        }
        let ia = self.node_of(a);
        let rg = self.rg(ia);
        let idx = self.push(Op::Reshape(ia), shape.clone(), self.nodes[ia].value_rc(), rg);
        Ok(self.handle(idx, shape))
    }

    /// Rows of a 2-d tensor selected by index (repeats allowed). Gradient
    /// scatter-adds back onto the source rows.
    pub fn gather_rows(&mut self, a: &Tensor, indices: Rc<Vec<usize>>) -> Result<Tensor> {
        if a.shape().len() != 2 {
            return Err(AutodiffError::BadShape {
                op: "gather_rows",
                expected: "2-d tensor".into(),
                got: a.shape().to_vec(),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        for &i in indices.iter() {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: i, rows });
            }
        }
        let ia = self.node_of(a);
        let src = a.data();
        let mut data = vec![0.0; indices.len() * cols];
        for (j, &i) in indices.iter().enumerate() {
            data[j * cols..(j + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let shape = vec![indices.len(), cols];
        let rg = self.rg(ia);
        let idx = self.push(Op::GatherRows(ia, indices), shape.clone(), Rc::new(data), rg);
        Ok(self.handle(idx, shape))
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Tensor {
        let ia = self.node_of(a);
        let v: f64 = a.data().iter().sum();
        let rg = self.rg(ia);
        let idx = self.push(Op::SumAll(ia), vec![], Rc::new(vec![v]), rg);
        self.handle(idx, vec![])
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Tensor {
        let ia = self.node_of(a);
        let v: f64 = a.data().iter().sum::<f64>() / a.len() as f64;
        let rg = self.rg(ia);
        let idx = self.push(Op::MeanAll(ia), vec![], Rc::new(vec![v]), rg);
        self.handle(idx, vec![])
    }

    /// Reduction over one axis of a 2-d tensor: axis 0 gives `[cols]`,
    /// axis 1 keeps rows as `[rows, 1]`.
    pub fn sum_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if a.shape().len() != 2 || axis > 1 {
            return Err(AutodiffError::BadShape {
                op: "sum_axis",
                expected: "2-d tensor, axis 0 or 1".into(),
                got: a.shape().to_vec(),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let ia = self.node_of(a);
        let src = a.data();
        let (shape, data) = if axis == 0 {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += src[r * cols + c];
                }
            }
            (vec![cols], out)
        } else {
            let mut out = vec![0.0; rows];
            for r in 0..rows {
                out[r] = src[r * cols..(r + 1) * cols].iter().sum();
            }
            (vec![rows, 1], out)
        };
        let rg = self.rg(ia);
        let idx = self.push(Op::SumAxis(ia, axis), shape.clone(), Rc::new(data), rg);
        Ok(self.handle(idx, shape))
    }

    /// `m[r, c] + b[c]`.
    pub fn add_bias(&mut self, m: &Tensor, b: &Tensor) -> Result<Tensor> {
        let cols = m.cols();
        if m.shape().len() != 2 || b.len() != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: m.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (im, ib) = (self.node_of(m), self.node_of(b));
        let rows = m.rows();
        let (src, bias) = (m.data(), b.data());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = src[r * cols + c] + bias[c];
            }
        }
        let rg = self.rg(im) || self.rg(ib);
        let idx = self.push(Op::AddBias(im, ib), m.shape().to_vec(), Rc::new(data), rg);
        Ok(self.handle(idx, m.shape().to_vec()))
    }

    /// `m[r, c] * s[c]` — channel-wise scaling.
    pub fn scale_cols(&mut self, m: &Tensor, s: &Tensor) -> Result<Tensor> {
        let cols = m.cols();
        if m.shape().len() != 2 || s.len() != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_cols",
                lhs: m.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let (im, is) = (self.node_of(m), self.node_of(s));
        let rows = m.rows();
        let (src, sc) = (m.data(), s.data());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = src[r * cols + c] * sc[c];
            }
        }
        let rg = self.rg(im) || self.rg(is);
        let idx = self.push(Op::ScaleCols(im, is), m.shape().to_vec(), Rc::new(data), rg);
        Ok(self.handle(idx, m.shape().to_vec()))
    }

    /// `m[r, c] * s[r]` — per-row scaling by a column vector.
    pub fn scale_rows(&mut self, m: &Tensor, s: &Tensor) -> Result<Tensor> {
        let rows = m.rows();
        if m.shape().len() != 2 || s.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_rows",
                lhs: m.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let (im, is) = (self.node_of(m), self.node_of(s));
        let cols = m.cols();
        let (src, sc) = (m.data(), s.data());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let f = sc[r];
            for c in 0..cols {
                data[r * cols + c] = src[r * cols + c] * f;
            }
        }
        let rg = self.rg(im) || self.rg(is);
        let idx = self.push(Op::ScaleRows(im, is), m.shape().to_vec(), Rc::new(data), rg);
        Ok(self.handle(idx, m.shape().to_vec()))
    }

    /// Sums each consecutive group of `k` rows: `(n·k)×c → n×c`.
    pub fn sum_groups(&mut self, a: &Tensor, k: usize) -> Result<Tensor> {
        if a.shape().len() != 2 || k == 0 || a.shape()[0] % k != 0 {
            return Err(AutodiffError::BadShape {
                op: "sum_groups",
                expected: format!("2-d tensor with rows divisible by {k}"),
                got: a.shape().to_vec(),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let groups = rows / k;
        let ia = self.node_of(a);
        let src = a.data();
        let mut data = vec![0.0; groups * cols];
        for g in 0..groups {
            for i in 0..k {
                let base = (g * k + i) * cols;
                for c in 0..cols {
                    data[g * cols + c] += src[base + c];
                }
            }
        }
        let shape = vec![groups, cols];
        let rg = self.rg(ia);
        let idx = self.push(Op::SumGroups(ia, k), shape.clone(), Rc::new(data), rg);
        Ok(self.handle(idx, shape))
    }

    /// Sinusoidal positional encoding of the last axis: each coordinate
    /// becomes `2·bands` values, coordinate-major.
    pub fn posenc(&mut self, a: &Tensor, bands: usize) -> Result<Tensor> {
        if a.shape().is_empty() || bands == 0 {
            return Err(AutodiffError::BadShape {
                op: "posenc",
                expected: "rank >= 1 and bands >= 1".into(),
                got: a.shape().to_vec(),
            });
        }
        let ia = self.node_of(a);
        let mut data = vec![0.0; a.len() * 2 * bands];
        kernels::posenc_forward(a.data(), bands, &mut data);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() *= 2 * bands;
        let rg = self.rg(ia);
        let idx = self.push(Op::Posenc(ia, bands), shape.clone(), Rc::new(data), rg);
        Ok(self.handle(idx, shape))
    }

    /// Zero-padded 2-d convolution of `[h, w, c_in]` with a kernel
    /// `[kh, kw, c_in, c_out]` at stride 1 or 2; spatial size is preserved
    /// at stride 1 and halved (rounding up) at stride 2.
    pub fn conv2d(&mut self, input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
        if input.shape().len() != 3 || kernel.shape().len() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: input.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let (h, w, c_in) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (kh, kw, kc_in, c_out) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        if kc_in != c_in {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: input.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(AutodiffError::BadShape {
                op: "conv2d",
                expected: "stride 1 or 2".into(),
                got: vec![stride],
            });
        }
        let (ii, ik) = (self.node_of(input), self.node_of(kernel));
        let mut cols = Vec::new();
        let (oh, ow) = kernels::im2col(input.data(), h, w, c_in, kh, kw, stride, &mut cols);
        let mut data = vec![0.0; oh * ow * c_out];
        kernels::matmul(&cols, kernel.data(), &mut data, oh * ow, kh * kw * c_in, c_out);
        let shape = vec![oh, ow, c_out];
        let rg = self.rg(ii) || self.rg(ik);
        let idx = self.push(
            Op::Conv2d {
                input: ii,
                kernel: ik,
                stride,
            },
            shape.clone(),
            Rc::new(data),
            rg,
        );
        Ok(self.handle(idx, shape))
    }

    /// Nearest-neighbour 2× upsample of `[h, w, c]`.
    pub fn upsample2(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 3 {
            return Err(AutodiffError::BadShape {
                op: "upsample2",
                expected: "[h, w, c] tensor".into(),
                got: a.shape().to_vec(),
            });
        }
        let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let ia = self.node_of(a);
        let mut data = vec![0.0; 4 * h * w * c];
        kernels::upsample2(a.data(), h, w, c, &mut data);
        let shape = vec![2 * h, 2 * w, c];
        let rg = self.rg(ia);
        let idx = self.push(Op::Upsample2(ia), shape.clone(), Rc::new(data), rg);
        Ok(self.handle(idx, shape))
    }
}

impl super::tape::Node {
    pub(crate) fn value_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.value)
    }
}

/// Routes the output gradient of node `idx` to its inputs.
pub(crate) fn backward_op(tape: &Tape, idx: usize, grad: &[f64], bufs: &mut [Option<Vec<f64>>]) {
    let node = &tape.nodes[idx];
    macro_rules! acc {
        ($input:expr, $f:expr) => {
            if tape.rg($input) {
                let len = tape.value($input).len();
                let buf = buf_for(bufs, $input, len);
                $f(buf);
            }
        };
    }
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc!(*a, |buf: &mut Vec<f64>| kernels::axpy(buf, grad));
            acc!(*b, |buf: &mut Vec<f64>| kernels::axpy(buf, grad));
        }
        Op::Sub(a, b) => {
            acc!(*a, |buf: &mut Vec<f64>| kernels::axpy(buf, grad));
            acc!(*b, |buf: &mut Vec<f64>| {
                for (d, g) in buf.iter_mut().zip(grad) {
                    *d -= g;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (tape.value(*a), tape.value(*b));
            acc!(*a, |buf: &mut Vec<f64>| {
                for i in 0..grad.len() {
                    buf[i] += grad[i] * vb[i];
                }
            });
            acc!(*b, |buf: &mut Vec<f64>| {
                for i in 0..grad.len() {
                    buf[i] += grad[i] * va[i];
                }
            });
        }
        Op::Scale(a, c) => {
            acc!(*a, |buf: &mut Vec<f64>| {
                for (d, g) in buf.iter_mut().zip(grad) {
                    *d += c * g;
                }
            });
        }
        Op::AddScalar(a) => {
            acc!(*a, |buf: &mut Vec<f64>| kernels::axpy(buf, grad));
        }
        Op::Matmul(a, b) => {
            let (va, vb) = (tape.value(*a), tape.value(*b));
            let (m, k) = (tape.nodes[*a].shape[0], tape.nodes[*a].shape[1]);
            let n = tape.nodes[*b].shape[1];
            acc!(*a, |buf: &mut Vec<f64>| {
                kernels::matmul_nt(grad, vb, buf, m, n, k, 1.0);
            });
            acc!(*b, |buf: &mut Vec<f64>| {
                kernels::matmul_tn(va, grad, buf, m, k, n, 1.0);
            });
        }
        Op::Inner(a, b) => {
            let (va, vb) = (tape.value(*a), tape.value(*b));
            let g = grad[0];
            acc!(*a, |buf: &mut Vec<f64>| {
                for i in 0..vb.len() {
                    buf[i] += g * vb[i];
                }
            });
            acc!(*b, |buf: &mut Vec<f64>| {
                for i in 0..va.len() {
                    buf[i] += g * va[i];
                }
            });
        }
        Op::Norm(a) => {
            let va = tape.value(*a);
            let out = node.value[0];
            if out > 0.0 {
                let g = grad[0] / out;
                acc!(*a, |buf: &mut Vec<f64>| {
                    for i in 0..va.len() {
                        buf[i] += g * va[i];
                    }
                });
            }
        }
        Op::Sin(a) => {
            let va = tape.value(*a);
            acc!(*a, |buf: &mut Vec<f64>| {
                for i in 0..grad.len() {
                    buf[i] += grad[i] * va[i].cos();
                }
            });
        }
        Op::Cos(a) => {
            let va = tape.value(*a);
            acc!(*a, |buf: &mut Vec<f64>| {
                for i in 0..grad.len() {
                    buf[i] -= grad[i] * va[i].sin();
                }
            });
        }
        Op::Exp(a) => {
            let out = &node.value;
            acc!(*a, |buf: &mut Vec<f64>| {
                for i in 0..grad.len() {
                    buf[i] += grad[i] * out[i];
                }
            });
        }
        Op::Clamp(a, lo, hi) => {
            let va = tape.value(*a);
            acc!(*a, |buf: &mut Vec<f64>| {
                for i in 0..grad.len() {
                    if va[i] >= *lo && va[i] <= *hi {
                        buf[i] += grad[i];
                    }
                }
            });
        }
        Op::LeakyRelu(a, slope) => {
            let va = tape.value(*a);
            acc!(*a, |buf: &mut Vec<f64>| {
                for i in 0..grad.len() {
                    buf[i] += grad[i] * if va[i] > 0.0 { 1.0 } else { *slope };
                }
            });
        }
        Op::Sigmoid(a) => {
            let out = &node.value;
            acc!(*a, |buf: &mut Vec<f64>| {
                for i in 0..grad.len() {
                    buf[i] += grad[i] * out[i] * (1.0 - out[i]);
                }
            });
        }
        Op::Softmax(a, axis) => {
            let out = &node.value;
            let shape = &node.shape;
            let (rows, cols) = if shape.len() == 1 {
                (1, shape[0])
            } else {
                (shape[0], shape[1])
            };
            let (lanes, lane_len, step): (usize, usize, usize) = if shape.len() == 1 || *axis == 1 {
                (rows, cols, 1)
            } else {
                (cols, rows, cols)
            };
            acc!(*a, |buf: &mut Vec<f64>| {
                for lane in 0..lanes {
                    let base = if step == 1 { lane * cols } else { lane };
                    let mut dot = 0.0;
                    for i in 0..lane_len {
                        dot += grad[base + i * step] * out[base + i * step];
                    }
                    for i in 0..lane_len {
                        let o = out[base + i * step];
                        buf[base + i * step] += o * (grad[base + i * step] - dot);
                    }
                }
            });
        }
        Op::Concat(parts, axis) => {
            let out_shape = &node.shape;
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let out_block = out_shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let block = tape.nodes[p].shape[*axis] * inner;
                acc!(p, |buf: &mut Vec<f64>| {
                    for o in 0..outer {
                        let src = &grad[o * out_block + offset..o * out_block + offset + block];
                        kernels::axpy(&mut buf[o * block..(o + 1) * block], src);
                    }
                });
                offset += block;
            }
        }
        Op::SliceCols(a, from, to) => {
            let cols = *tape.nodes[*a].shape.last().unwrap();
            let width = to - from;
            let rows = tape.value(*a).len() / cols;
            acc!(*a, |buf: &mut Vec<f64>| {
                for r in 0..rows {
                    for j in 0..width {
                        buf[r * cols + from + j] += grad[r * width + j];
                    }
                }
            });
        }
        Op::Reshape(a) => {
            acc!(*a, |buf: &mut Vec<f64>| kernels::axpy(buf, grad));
        }
        Op::GatherRows(a, indices) => {
            let cols = tape.nodes[*a].shape[1];
            acc!(*a, |buf: &mut Vec<f64>| {
                for (j, &i) in indices.iter().enumerate() {
                    kernels::axpy(&mut buf[i * cols..(i + 1) * cols], &grad[j * cols..(j + 1) * cols]);
                }
            });
        }
        Op::SumAll(a) => {
            let g = grad[0];
            acc!(*a, |buf: &mut Vec<f64>| {
                for d in buf.iter_mut() {
                    *d += g;
                }
            });
        }
        Op::MeanAll(a) => {
            let n = tape.value(*a).len() as f64;
            let g = grad[0] / n;
            acc!(*a, |buf: &mut Vec<f64>| {
                for d in buf.iter_mut() {
                    *d += g;
                }
            });
        }
        Op::SumAxis(a, axis) => {
            let (rows, cols) = (tape.nodes[*a].shape[0], tape.nodes[*a].shape[1]);
            acc!(*a, |buf: &mut Vec<f64>| {
                if *axis == 0 {
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[r * cols + c] += grad[c];
                        }
                    }
                } else {
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[r * cols + c] += grad[r];
                        }
                    }
                }
            });
        }
        Op::AddBias(m, b) => {
            let cols = tape.nodes[*b].shape.iter().product::<usize>();
            let rows = grad.len() / cols;
            acc!(*m, |buf: &mut Vec<f64>| kernels::axpy(buf, grad));
            acc!(*b, |buf: &mut Vec<f64>| {
                for r in 0..rows {
                    for c in 0..cols {
                        buf[c] += grad[r * cols + c];
                    }
                }
            });
        }
        Op::ScaleCols(m, s) => {
            let (vm, vs) = (tape.value(*m), tape.value(*s));
            let cols = vs.len();
            let rows = grad.len() / cols;
            acc!(*m, |buf: &mut Vec<f64>| {
                for r in 0..rows {
                    for c in 0..cols {
                        buf[r * cols + c] += grad[r * cols + c] * vs[c];
                    }
                }
            });
            acc!(*s, |buf: &mut Vec<f64>| {
                for r in 0..rows {
                    for c in 0..cols {
                        buf[c] += grad[r * cols + c] * vm[r * cols + c];
                    }
                }
            });
        }
        Op::ScaleRows(m, s) => {
            let (vm, vs) = (tape.value(*m), tape.value(*s));
            let rows = vs.len();
            let cols = grad.len() / rows;
            acc!(*m, |buf: &mut Vec<f64>| {
                for r in 0..rows {
                    let f = vs[r];
                    for c in 0..cols {
                        buf[r * cols + c] += grad[r * cols + c] * f;
                    }
                }
            });
            acc!(*s, |buf: &mut Vec<f64>| {
                for r in 0..rows {
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += grad[r * cols + c] * vm[r * cols + c];
                    }
                    buf[r] += dot;
                }
            });
        }
        Op::SumGroups(a, k) => {
            let cols = tape.nodes[*a].shape[1];
            let groups = node.shape[0];
            acc!(*a, |buf: &mut Vec<f64>| {
                for g in 0..groups {
                    for i in 0..*k {
                        kernels::axpy(
                            &mut buf[(g * k + i) * cols..(g * k + i + 1) * cols],
                            &grad[g * cols..(g + 1) * cols],
                        );
                    }
                }
            });
        }
        Op::Posenc(a, bands) => {
            let out = &node.value;
            acc!(*a, |buf: &mut Vec<f64>| {
                kernels::posenc_backward(out, grad, *bands, buf);
            });
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
        } => {
            let ishape = &tape.nodes[*input].shape;
            let kshape = &tape.nodes[*kernel].shape;
            let (h, w, c_in) = (ishape[0], ishape[1], ishape[2]);
            let (kh, kw, c_out) = (kshape[0], kshape[1], kshape[3]);
            let (oh, ow) = (node.shape[0], node.shape[1]);
            let patch = kh * kw * c_in;
            if tape.rg(*kernel) {
                // dK = patchesᵀ · g, re-unfolding the input.
                let mut cols = Vec::new();
                kernels::im2col(tape.value(*input), h, w, c_in, kh, kw, *stride, &mut cols);
                let buf = buf_for(bufs, *kernel, patch * c_out);
                kernels::matmul_tn(&cols, grad, buf, oh * ow, patch, c_out, 1.0);
            }
            if tape.rg(*input) {
                let vk = tape.value(*kernel);
                let mut dpatches = vec![0.0; oh * ow * patch];
                kernels::matmul_nt(grad, vk, &mut dpatches, oh * ow, c_out, patch, 0.0);
                let buf = buf_for(bufs, *input, h * w * c_in);
                kernels::col2im_accumulate(&dpatches, h, w, c_in, kh, kw, *stride, buf);
            }
        }
        Op::Upsample2(a) => {
            let ishape = &tape.nodes[*a].shape;
            let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
            acc!(*a, |buf: &mut Vec<f64>| {
                kernels::upsample2_backward(grad, h, w, c, buf);
            });
        }
    }
}

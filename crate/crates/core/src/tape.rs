//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node whose inputs all have smaller
//! ids, so a single descending sweep in [`Tape::backward`] visits each node
//! once in reverse topological order. Tapes are cheap to build and are
//! rebuilt for every forward pass.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Conv1d {
        x: Var,
        w: Var,
        pad: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        cols: Vec<f64>,
        out_hw: (usize, usize),
        in_hw: (usize, usize),
        kernel: (usize, usize),
    },
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_sigma: Vec<f64>,
    },
    Softmax(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Grl(Var, f64),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RepeatRows {
        x: Var,
        counts: Vec<usize>,
    },
    MeanRows(Var),
    SliceRows {
        x: Var,
        lo: usize,
    },
    SliceCols {
        x: Var,
        lo: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Abs(Var),
    Pick {
        x: Var,
        index: usize,
    },
    LogClamped {
        x: Var,
        floor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zero when unreachable.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Sum of several same-shaped tensors.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all needs at least one term".into()))?;
        rest.iter().try_fold(*first, |acc, &t| self.add(acc, t))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Adds a per-column vector (numel == trailing dim) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.last_dim();
        if tr.numel() != c {
            return Err(dim_err("add_row", tx, tr));
        }
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    /// Multiplies every row of `x` elementwise by a per-column vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.last_dim();
        if tr.numel() != c {
            return Err(dim_err("mul_row", tx, tr));
        }
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, s) in chunk.iter_mut().zip(tr.data()) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulRow(x, row), &[x, row]))
    }

    /// Adds `bias[c]` to every element of channel `c` of a channels-first `x`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.shape()[0];
        if tb.numel() != c {
            return Err(dim_err("add_channel_bias", tx, tb));
        }
        let block = tx.numel() / c;
        let mut out = tx.clone();
        for (chunk, b) in out.data_mut().chunks_mut(block).zip(tb.data()) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(dim_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Mat::row_major(ta.data(), k),
            Mat::transposed(tb.data(), k),
            &mut out,
            n,
            false,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt(a, b),
            &[a, b],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    /// 1-d cross-correlation over a channels-first input `[c_in × time]` with
    /// kernels `[c_out × c_in × k]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, padding: Padding) -> Result<Var> {
        let xt = self.transpose(x)?;
        let y = self.conv1d_time_major(xt, kernels, padding)?;
        self.transpose(y)
    }

    /// Same operation as [`Tape::conv1d`] on a time-major input `[time × c_in]`,
    /// producing `[time' × c_out]`.
    pub fn conv1d_time_major(&mut self, x: Var, kernels: Var, padding: Padding) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(kernels));
        if tx.rank() != 2 || tw.rank() != 3 || tw.shape()[1] != tx.shape()[1] {
            return Err(dim_err("conv1d", tx, tw));
        }
        let (time, c_in) = (tx.shape()[0], tx.shape()[1]);
        let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
        let (pad, t_out) = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(Error::Config(format!(
                        "same padding requires an odd kernel, got {k}"
                    )));
                }
                ((k - 1) / 2, time)
            }
            Padding::Valid => {
                if time < k {
                    return Err(dim_err("conv1d(valid)", tx, tw));
                }
                (0, time - k + 1)
            }
        };
        let mut out = vec![0.0; t_out * c_out];
        for j in 0..k {
            // output t reads input t + j - pad
            let (t_lo, t_hi) = shifted_range(t_out, time, j, pad);
            if t_lo >= t_hi {
                continue;
            }
            let src = t_lo + j - pad;
            gemm(
                t_hi - t_lo,
                c_in,
                c_out,
                Mat::row_major(&tx.data()[src * c_in..], c_in),
                Mat::strided(&tw.data()[j..], k, c_in * k),
                &mut out[t_lo * c_out..],
                c_out,
                true,
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![t_out, c_out], out),
            Op::Conv1d { x, w: kernels, pad },
            &[x, kernels],
        ))
    }

    /// 2-d cross-correlation with same padding over `[c_in × h × w]` using
    /// kernels `[c_out × c_in × kh × kw]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(kernels));
        if tx.rank() != 3 || tw.rank() != 4 || tw.shape()[1] != tx.shape()[0] {
            return Err(dim_err("conv2d", tx, tw));
        }
        let (c_in, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "same padding requires odd kernels, got {kh}x{kw}"
            )));
        }
        if h < kh || w < kw {
            return Err(dim_err("conv2d(input shorter than kernel)", tx, tw));
        }
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let patch = c_in * kh * kw;
        let hw = h * w;
        let mut cols = vec![0.0; patch * hw];
        let xd = tx.data();
        for c in 0..c_in {
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + i as isize - ph as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &xd[(c * h + sy as usize) * w..(c * h + sy as usize + 1) * w];
                        for xo in 0..w {
                            let sx = xo as isize + j as isize - pw as isize;
                            if sx >= 0 && sx < w as isize {
                                dst[y * w + xo] = src_row[sx as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; c_out * hw];
        gemm(
            c_out,
            patch,
            hw,
            Mat::row_major(tw.data(), patch),
            Mat::row_major(&cols, hw),
            &mut out,
            hw,
            false,
        );
        Ok(self.push(
            Tensor::from_parts(vec![c_out, h, w], out),
            Op::Conv2d {
                x,
                w: kernels,
                cols,
                out_hw: (h, w),
                in_hw: (h, w),
                kernel: (kh, kw),
            },
            &[x, kernels],
        ))
    }

    /// Normalizes each trailing-axis vector to zero mean and unit population
    /// variance, with `epsilon` added to the variance under the square root.
    pub fn layer_norm(&mut self, x: Var, epsilon: f64) -> Var {
        let tx = self.value(x);
        let stats = layer_norm_stats(tx, epsilon);
        let d = tx.last_dim();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_sigma = Vec::with_capacity(stats.mean.len());
        for (r, (src, dst)) in tx.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let inv = 1.0 / stats.sigma[r];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - stats.mean[r]) * inv;
            }
            inv_sigma.push(inv);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), xhat.clone());
        self.push(value, Op::LayerNorm { x, xhat, inv_sigma }, &[x])
    }

    /// Softmax along the trailing axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::Softmax(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(x, slope), &[x])
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Grl(x, lambda), &[x])
    }

    /// Row lookup into a `[rows × d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], table_name: &str) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(dim_err("gather_rows", tt, tt));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Lookup {
                    table: table_name.to_string(),
                    id,
                    size: rows,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Repeats row `t` of `x` `counts[t]` times.
    pub fn repeat_rows(&mut self, x: Var, counts: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape()[0] != counts.len() {
            return Err(Error::Contract(format!(
                "repeat_rows: {} counts for input of shape {:?}",
                counts.len(),
                tx.shape()
            )));
        }
        if let Some(pos) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!(
                "repeat_rows: duration at position {pos} must be >= 1"
            )));
        }
        let d = tx.shape()[1];
        let total: usize = counts.iter().sum();
        let mut out = Vec::with_capacity(total * d);
        for (t, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                out.extend_from_slice(tx.row(t));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![total, d], out),
            Op::RepeatRows {
                x,
                counts: counts.to_vec(),
            },
            &[x],
        ))
    }

    /// Arithmetic mean over rows: `[r × c] -> [1 × c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; c];
        for row in tx.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || lo >= hi || hi > tx.shape()[0] {
            return Err(Error::Contract(format!(
                "slice_rows {lo}..{hi} of shape {:?}",
                tx.shape()
            )));
        }
        let c = tx.shape()[1];
        let v = Tensor::from_parts(vec![hi - lo, c], tx.data()[lo * c..hi * c].to_vec());
        Ok(self.push(v, Op::SliceRows { x, lo }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || lo >= hi || hi > tx.shape()[1] {
            return Err(Error::Contract(format!(
                "slice_cols {lo}..{hi} of shape {:?}",
                tx.shape()
            )));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut out = Vec::with_capacity(r * (hi - lo));
        for row in tx.data().chunks(c) {
            out.extend_from_slice(&row[lo..hi]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, hi - lo], out),
            Op::SliceCols { x, lo },
            &[x],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols with no parts".into()))?;
        let r = self.value(*first).rows();
        for p in parts {
            let t = self.value(*p);
            if t.rank() != 2 || t.shape()[0] != r {
                return Err(dim_err("concat_cols", self.value(*first), t));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x), &[x])
    }

    /// Scalar element at flat `index`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = self.value(x);
        if index >= tx.numel() {
            return Err(Error::Contract(format!(
                "pick index {index} out of range for {} elements",
                tx.numel()
            )));
        }
        let v = Tensor::scalar(tx.data()[index]);
        Ok(self.push(v, Op::Pick { x, index }, &[x]))
    }

    /// Elementwise `ln(max(x, floor))`; clamped entries pass no gradient.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let v = self.value(x).map(|a| a.max(floor).ln());
        self.push(v, Op::LogClamped { x, floor }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contribution: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Adds into a target gradient in place through `f`, allocating zeros first.
    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        target: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[target.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(vb, |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(va, |x, y| x * y));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                let c = g.last_dim();
                self.accumulate_with(grads, *row, |dst| {
                    for chunk in g.data().chunks(c) {
                        for (d, v) in dst.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                });
            }
            Op::AddChannelBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                let c = self.value(*bias).numel();
                let block = g.numel() / c;
                self.accumulate_with(grads, *bias, |dst| {
                    for (d, chunk) in dst.iter_mut().zip(g.data().chunks(block)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (self.value(*x), self.value(*row));
                let c = g.last_dim();
                self.accumulate_with(grads, *x, |dst| {
                    for (dchunk, gchunk) in dst.chunks_mut(c).zip(g.data().chunks(c)) {
                        for ((d, gv), s) in dchunk.iter_mut().zip(gchunk).zip(vr.data()) {
                            *d += gv * s;
                        }
                    }
                });
                self.accumulate_with(grads, *row, |dst| {
                    for (gchunk, xchunk) in g.data().chunks(c).zip(vx.data().chunks(c)) {
                        for ((d, gv), xv) in dst.iter_mut().zip(gchunk).zip(xchunk) {
                            *d += gv * xv;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                self.accumulate_with(grads, *a, |dst| {
                    gemm(m, n, k, Mat::row_major(g.data(), n), Mat::transposed(vb.data(), n), dst, k, true)
                });
                self.accumulate_with(grads, *b, |dst| {
                    gemm(k, m, n, Mat::transposed(va.data(), k), Mat::row_major(g.data(), n), dst, n, true)
                });
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                // C = A·Bᵀ: dA = dC · B, dB = dCᵀ · A
                self.accumulate_with(grads, *a, |dst| {
                    gemm(m, n, k, Mat::row_major(g.data(), n), Mat::row_major(vb.data(), k), dst, k, true)
                });
                self.accumulate_with(grads, *b, |dst| {
                    gemm(n, m, k, Mat::transposed(g.data(), n), Mat::row_major(va.data(), k), dst, k, true)
                });
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose().expect("rank-2 gradient"));
            }
            Op::Conv1d { x, w, pad } => self.backprop_conv1d(*x, *w, *pad, g, grads),
            Op::Conv2d {
                x,
                w,
                cols,
                out_hw,
                in_hw,
                kernel,
            } => self.backprop_conv2d(*x, *w, cols, *out_hw, *in_hw, *kernel, g, grads),
            Op::LayerNorm { x, xhat, inv_sigma } => {
                let d = g.last_dim();
                let inv_d = 1.0 / d as f64;
                self.accumulate_with(grads, *x, |dst| {
                    for (r, ((dchunk, gchunk), hchunk)) in dst
                        .chunks_mut(d)
                        .zip(g.data().chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mean_g: f64 = gchunk.iter().sum::<f64>() * inv_d;
                        let mean_gh: f64 =
                            gchunk.iter().zip(hchunk).map(|(a, b)| a * b).sum::<f64>() * inv_d;
                        for ((o, gv), hv) in dchunk.iter_mut().zip(gchunk).zip(hchunk) {
                            *o += inv_sigma[r] * (gv - mean_g - hv * mean_gh);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                self.accumulate_with(grads, *x, |dst| {
                    for ((dchunk, gchunk), ychunk) in dst
                        .chunks_mut(d)
                        .zip(g.data().chunks(d))
                        .zip(y.data().chunks(d))
                    {
                        let dot: f64 = gchunk.iter().zip(ychunk).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, g.zip_map(vx, |gv, a| if a > 0.0 { gv } else { 0.0 }));
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    g.zip_map(vx, |gv, a| if a > 0.0 { gv } else { slope * gv }),
                );
            }
            Op::Grl(x, lambda) => self.accumulate(grads, *x, g.map(|v| -lambda * v)),
            Op::Gather { table, ids } => {
                let d = g.last_dim();
                self.accumulate_with(grads, *table, |dst| {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g.data()[i * d..(i + 1) * d];
                        for (o, v) in dst[id * d..(id + 1) * d].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                });
            }
            Op::RepeatRows { x, counts } => {
                let d = g.last_dim();
                self.accumulate_with(grads, *x, |dst| {
                    let mut src_row = 0;
                    for (t, &c) in counts.iter().enumerate() {
                        let out = &mut dst[t * d..(t + 1) * d];
                        for _ in 0..c {
                            for (o, v) in out.iter_mut().zip(&g.data()[src_row * d..(src_row + 1) * d]) {
                                *o += v;
                            }
                            src_row += 1;
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let inv = 1.0 / vx.rows() as f64;
                let c = vx.cols();
                self.accumulate_with(grads, *x, |dst| {
                    for chunk in dst.chunks_mut(c) {
                        for (o, v) in chunk.iter_mut().zip(g.data()) {
                            *o += v * inv;
                        }
                    }
                });
            }
            Op::SliceRows { x, lo } => {
                let c = g.last_dim();
                self.accumulate_with(grads, *x, |dst| {
                    for (o, v) in dst[lo * c..lo * c + g.numel()].iter_mut().zip(g.data()) {
                        *o += v;
                    }
                });
            }
            Op::SliceCols { x, lo } => {
                let c = self.value(*x).cols();
                let w = g.cols();
                self.accumulate_with(grads, *x, |dst| {
                    for (dchunk, gchunk) in dst.chunks_mut(c).zip(g.data().chunks(w)) {
                        for (o, v) in dchunk[*lo..lo + w].iter_mut().zip(gchunk) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accumulate_with(grads, *p, |dst| {
                        for (dchunk, gchunk) in dst.chunks_mut(w).zip(g.data().chunks(total)) {
                            for (o, v) in dchunk.iter_mut().zip(&gchunk[offset..offset + w]) {
                                *o += v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate_with(grads, *x, |dst| dst.iter_mut().for_each(|o| *o += gv));
            }
            Op::Mean(x) => {
                let gv = g.data()[0] / self.value(*x).numel() as f64;
                self.accumulate_with(grads, *x, |dst| dst.iter_mut().for_each(|o| *o += gv));
            }
            Op::Square(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, g.zip_map(vx, |gv, a| 2.0 * a * gv));
            }
            Op::Abs(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, g.zip_map(vx, |gv, a| gv * sign(a)));
            }
            Op::Pick { x, index } => {
                let gv = g.data()[0];
                self.accumulate_with(grads, *x, |dst| dst[*index] += gv);
            }
            Op::LogClamped { x, floor } => {
                let vx = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    g.zip_map(vx, |gv, a| if a > *floor { gv / a } else { 0.0 }),
                );
            }
        }
    }

    fn backprop_conv1d(&self, x: Var, w: Var, pad: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (time, c_in) = (tx.shape()[0], tx.shape()[1]);
        let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
        let t_out = g.shape()[0];
        self.accumulate_with(grads, x, |dst| {
            for j in 0..k {
                let (t_lo, t_hi) = shifted_range(t_out, time, j, pad);
                if t_lo >= t_hi {
                    continue;
                }
                let src = t_lo + j - pad;
                // dX[src..] += dY[t_lo..t_hi] · W_j   (W_j[o, c] = w[o, c, j])
                gemm(
                    t_hi - t_lo,
                    c_out,
                    c_in,
                    Mat::row_major(&g.data()[t_lo * c_out..], c_out),
                    Mat::strided(&tw.data()[j..], c_in * k, k),
                    &mut dst[src * c_in..],
                    c_in,
                    true,
                );
            }
        });
        self.accumulate_with(grads, w, |dst| {
            let mut tmp = vec![0.0; c_out * c_in];
            for j in 0..k {
                let (t_lo, t_hi) = shifted_range(t_out, time, j, pad);
                if t_lo >= t_hi {
                    continue;
                }
                let src = t_lo + j - pad;
                // dW_j = dY[t_lo..t_hi]ᵀ · X[src..]
                gemm(
                    c_out,
                    t_hi - t_lo,
                    c_in,
                    Mat::transposed(&g.data()[t_lo * c_out..], c_out),
                    Mat::row_major(&tx.data()[src * c_in..], c_in),
                    &mut tmp,
                    c_in,
                    false,
                );
                for o in 0..c_out {
                    for c in 0..c_in {
                        dst[(o * c_in + c) * k + j] += tmp[o * c_in + c];
                    }
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv2d(
        &self,
        x: Var,
        w: Var,
        cols: &[f64],
        out_hw: (usize, usize),
        in_hw: (usize, usize),
        kernel: (usize, usize),
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let tw = self.value(w);
        let c_out = tw.shape()[0];
        let c_in = tw.shape()[1];
        let (kh, kw) = kernel;
        let (h, wd) = in_hw;
        let hw = out_hw.0 * out_hw.1;
        let patch = c_in * kh * kw;
        self.accumulate_with(grads, w, |dst| {
            gemm(c_out, hw, patch, Mat::row_major(g.data(), hw), Mat::transposed(cols, hw), dst, patch, true)
        });
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let mut dcols = vec![0.0; patch * hw];
        gemm(patch, c_out, hw, Mat::transposed(tw.data(), patch), Mat::row_major(g.data(), hw), &mut dcols, hw, false);
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        self.accumulate_with(grads, x, |dst| {
            for c in 0..c_in {
                for i in 0..kh {
                    for j in 0..kw {
                        let row = (c * kh + i) * kw + j;
                        let src = &dcols[row * hw..(row + 1) * hw];
                        for y in 0..h {
                            let sy = y as isize + i as isize - ph as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let base = (c * h + sy as usize) * wd;
                            for xo in 0..wd {
                                let sx = xo as isize + j as isize - pw as isize;
                                if sx >= 0 && sx < wd as isize {
                                    dst[base + sx as usize] += src[y * wd + xo];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

fn sign(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Output rows `[lo, hi)` whose source row `t + j - pad` lies inside `[0, time)`.
fn shifted_range(t_out: usize, time: usize, j: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j);
    let hi = (time + pad).saturating_sub(j).min(t_out);
    (lo, hi.max(lo))
}

/// Per-vector statistics of a layer normalization over the trailing axis.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// `sqrt(population variance + epsilon)`
    pub sigma: Vec<f64>,
}

pub fn layer_norm_stats(x: &Tensor, epsilon: f64) -> NormStats {
    let d = x.last_dim();
    let inv_d = 1.0 / d as f64;
    let mut mean = Vec::with_capacity(x.outer_len());
    let mut sigma = Vec::with_capacity(x.outer_len());
    for chunk in x.data().chunks(d) {
        let mu = chunk.iter().sum::<f64>() * inv_d;
        let var = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() * inv_d;
        mean.push(mu);
        sigma.push((var + epsilon).sqrt());
    }
    NormStats { mean, sigma }
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for chunk in out.chunks_mut(d) {
        let max = chunk.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in chunk.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = 1.0 / total;
        chunk.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tape::{Axis, GradAcc, Node, Tape, Var};
use super::Tensor;
use crate::error::{invalid, Error, Result};
use crate::math;

/// Probability clamp applied inside [`Tape::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannel(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Matmul(Var, Var),
    Conv1d {
        signal: Var,
        kernel: Var,
        used: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax(Var, Axis),
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Bce {
        p: Var,
        target: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        beta: f64,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
    },
    GradReversal(Var),
    BilinearCrop {
        feature: Var,
        taps: Vec<[(u32, f64); 4]>,
        channels: usize,
    },
    GatherRows(Var, Vec<usize>),
    Columns {
        src: Var,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    ScatterPairs {
        src: Var,
        cols: usize,
        pattern: Vec<(usize, usize)>,
    },
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

impl Tape {
    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(src.shape().to_vec(), data);
        let g = self.grad_any(&[a]);
        self.push(out, op, g)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn channel_op(&mut self, x: Var, w: Var, mul: bool) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let c = *tx.shape().last().unwrap_or(&0);
        if tw.len() != c {
            return Err(Error::ShapeMismatch {
                expected: vec![c],
                actual: tw.shape().to_vec(),
            });
        }
        let wd = tw.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, &wc) in row.iter_mut().zip(wd) {
                if mul {
                    *v *= wc;
                } else {
                    *v += wc;
                }
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let g = self.grad_any(&[x, w]);
        let op = if mul { Op::MulChannel(x, w) } else { Op::AddChannel(x, w) };
        Ok(self.push(out, op, g))
    }

    /// Multiplies every trailing-axis slice of `x` elementwise by `w`.
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        self.channel_op(x, w, true)
    }

    /// Adds `b` to every trailing-axis slice of `x`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        self.channel_op(x, b, false)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(invalid(format!(
                "matmul of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for (arow, orow) in ad.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
            for (&aik, brow) in arow.iter().zip(bd.chunks_exact(n)) {
                if aik != 0.0 {
                    axpy(aik, brow, orow);
                }
            }
        }
        let out = Tensor::from_parts(vec![m, n], out);
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), g))
    }

    /// Same-length 1-D convolution with zero padding `(k-1)/2`.
    ///
    /// A kernel longer than the signal is cropped to its central taps, the
    /// largest odd count not exceeding the signal length.
    pub fn conv1d(&mut self, signal: Var, kernel: Var) -> Result<Var> {
        let (ts, tk) = (&self.nodes[signal.0].value, &self.nodes[kernel.0].value);
        if ts.rank() != 1 || tk.rank() != 1 {
            return Err(invalid("conv1d expects 1-D signal and kernel"));
        }
        let k = tk.len();
        if k % 2 == 0 {
            return Err(invalid(format!("conv1d kernel length {k} is even")));
        }
        let c = ts.len();
        let used = if k > c { c - (1 - c % 2) } else { k };
        let skip = (k - used) / 2;
        let pad = (used - 1) / 2;
        let (sd, kd) = (ts.data(), &tk.data()[skip..skip + used]);
        let mut out = vec![0.0; c];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &w) in kd.iter().enumerate() {
                let idx = i + j;
                if idx >= pad && idx - pad < c {
                    acc += w * sd[idx - pad];
                }
            }
            *o = acc;
        }
        let out = Tensor::from_parts(vec![c], out);
        let g = self.grad_any(&[signal, kernel]);
        Ok(self.push(
            out,
            Op::Conv1d {
                signal,
                kernel,
                used,
            },
            g,
        ))
    }

    /// 2-D convolution over an `H×W×Cin` map with a `K×K×Cin×Cout` weight.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let ti = &self.nodes[input.0].value;
        let tw = &self.nodes[weight.0].value;
        let tb = &self.nodes[bias.0].value;
        if ti.rank() != 3 || tw.rank() != 4 {
            return Err(invalid("conv2d expects H×W×C input and K×K×Cin×Cout weight"));
        }
        if stride == 0 {
            return Err(invalid("conv2d stride must be positive"));
        }
        let (h, w, cin) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (kh, kw, wcin, cout) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if wcin != cin || tb.len() != cout {
            return Err(invalid(format!(
                "conv2d channel mismatch: input {:?}, weight {:?}, bias {:?}",
                ti.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let (Some(ho), Some(wo)) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad))
        else {
            return Err(invalid("conv2d kernel larger than padded input"));
        };
        let (id, wd, bd) = (ti.data(), tw.data(), tb.data());
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[(oy * wo + ox) * cout..][..cout];
                o.copy_from_slice(bd);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &id[(iy as usize * w + ix as usize) * cin..][..cin];
                        let wbase = (ky * kw + kx) * cin * cout;
                        for (ci, &a) in px.iter().enumerate() {
                            if a != 0.0 {
                                axpy(a, &wd[wbase + ci * cout..][..cout], o);
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![ho, wo, cout], out);
        let g = self.grad_any(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            g,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, math::ln, Op::Log(a))
    }

    /// Max-stabilized softmax of a rank-2 tensor along `axis`.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(invalid("softmax expects a rank-2 tensor"));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = t.data().to_vec();
        match axis {
            Axis::Row => {
                for row in out.chunks_exact_mut(cols) {
                    softmax_strided(row, 0, 1, cols);
                }
            }
            Axis::Column => {
                for c in 0..cols {
                    softmax_strided(&mut out, c, cols, rows);
                }
            }
        }
        let out = Tensor::from_parts(vec![rows, cols], out);
        let g = self.grad_any(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), g))
    }

    /// Channel-wise mean over the spatial extent of an `H×W×C` map.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 3 {
            return Err(invalid("global_avg_pool expects H×W×C"));
        }
        let c = t.shape()[2];
        let n = (t.shape()[0] * t.shape()[1]) as f64;
        let d = t.data();
        let out: Vec<f64> = (0..c).map(|k| order_free_sum(d[k..].iter().step_by(c).copied()) / n).collect();
        let out = Tensor::from_parts(vec![c], out);
        let g = self.grad_any(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let g = self.grad_any(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let g = self.grad_any(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), g)
    }

    /// Sums a rank-2 tensor over its rows, giving one value per column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(invalid("sum_rows expects a rank-2 tensor"));
        }
        let cols = t.shape()[1];
        let d = t.data();
        let out: Vec<f64> = (0..cols).map(|k| order_free_sum(d[k..].iter().step_by(cols).copied())).collect();
        let out = Tensor::from_parts(vec![cols], out);
        let g = self.grad_any(&[a]);
        Ok(self.push(out, Op::SumRows(a), g))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`,
    /// with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_loss(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let pd = self.data(p);
        if pd.len() != target.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![pd.len()],
                actual: vec![target.len()],
            });
        }
        let n = pd.len() as f64;
        let loss = pd
            .iter()
            .zip(target)
            .map(|(&pi, &y)| {
                let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * math::ln(pc) + (1.0 - y) * math::ln(1.0 - pc))
            })
            .sum::<f64>()
            / n;
        let g = self.grad_any(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            g,
        ))
    }

    /// Summed smooth-L1 (Huber) distance to `target` with transition `beta`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], beta: f64) -> Result<Var> {
        let pd = self.data(pred);
        if pd.len() != target.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![pd.len()],
                actual: vec![target.len()],
            });
        }
        if beta <= 0.0 {
            return Err(invalid("smooth_l1 beta must be positive"));
        }
        let loss = pd
            .iter()
            .zip(target)
            .map(|(&x, &t)| {
                let d = math::abs(x - t);
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let g = self.grad_any(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                beta,
            },
            g,
        ))
    }

    /// Mean softmax cross-entropy of `N×K` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(invalid(format!(
                "cross-entropy logits {:?} vs {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let k = t.shape()[1];
        if labels.iter().any(|&l| l >= k) {
            return Err(invalid("cross-entropy label out of range"));
        }
        let mut loss = 0.0;
        for (row, &l) in t.data().chunks_exact(k).zip(labels) {
            loss += log_sum_exp(row) - row[l];
        }
        loss /= labels.len() as f64;
        let g = self.grad_any(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
            },
            g,
        ))
    }

    /// Identity forward; negates the gradient on the way back.
    pub fn gradient_reversal(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.clone();
        let g = self.grad_any(&[a]);
        self.push(out, Op::GradReversal(a), g)
    }

    /// Bilinear crop-resize of an `H×W×C` map into one `size×size` grid per
    /// box, sampled at cell centres. Boxes are `[x1, y1, x2, y2]` in feature
    /// coordinates where cell `j` spans `[j, j+1)`; samples outside the map
    /// clamp to the border. Output shape is `[boxes, size*size*C]`.
    pub fn bilinear_crop(&mut self, feature: Var, boxes: &[[f64; 4]], size: usize) -> Result<Var> {
        let t = &self.nodes[feature.0].value;
        if t.rank() != 3 {
            return Err(invalid("bilinear_crop expects H×W×C"));
        }
        if boxes.is_empty() || size == 0 {
            return Err(invalid("bilinear_crop needs at least one box and size ≥ 1"));
        }
        let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut taps = Vec::with_capacity(boxes.len() * size * size);
        for b in boxes {
            let (bw, bh) = ((b[2] - b[0]) / size as f64, (b[3] - b[1]) / size as f64);
            for a in 0..size {
                let v = b[1] + (a as f64 + 0.5) * bh - 0.5;
                let (y0, y1, fy) = bilinear_axis(v, h);
                for bb in 0..size {
                    let u = b[0] + (bb as f64 + 0.5) * bw - 0.5;
                    let (x0, x1, fx) = bilinear_axis(u, w);
                    taps.push([
                        ((y0 * w + x0) as u32, (1.0 - fy) * (1.0 - fx)),
                        ((y0 * w + x1) as u32, (1.0 - fy) * fx),
                        ((y1 * w + x0) as u32, fy * (1.0 - fx)),
                        ((y1 * w + x1) as u32, fy * fx),
                    ]);
                }
            }
        }
        let fd = t.data();
        let mut out = vec![0.0; taps.len() * c];
        for (cell, o) in taps.iter().zip(out.chunks_exact_mut(c)) {
            for &(pix, wgt) in cell {
                if wgt != 0.0 {
                    axpy(wgt, &fd[pix as usize * c..][..c], o);
                }
            }
        }
        let out = Tensor::from_parts(vec![boxes.len(), size * size * c], out);
        let g = self.grad_any(&[feature]);
        Ok(self.push(
            out,
            Op::BilinearCrop {
                feature,
                taps,
                channels: c,
            },
            g,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(invalid("gather_rows expects a rank-2 tensor"));
        }
        let (n, k) = (t.shape()[0], t.shape()[1]);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(invalid("gather_rows index out of range"));
        }
        let mut out = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * k..(r + 1) * k]);
        }
        let out = Tensor::from_parts(vec![rows.len(), k], out);
        let g = self.grad_any(&[a]);
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec()), g))
    }

    /// Column slice `[start, end)` of a rank-2 tensor.
    pub fn columns(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        if t.rank() != 2 || start >= end || end > t.shape()[1] {
            return Err(invalid("column range out of bounds"));
        }
        let k = t.shape()[1];
        let mut out = Vec::with_capacity(t.shape()[0] * (end - start));
        for row in t.data().chunks_exact(k) {
            out.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::from_parts(vec![t.shape()[0], end - start], out);
        let g = self.grad_any(&[src]);
        Ok(self.push(out, Op::Columns { src, start, end }, g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.reshaped(shape)?;
        let g = self.grad_any(&[a]);
        Ok(self.push(out, Op::Reshape(a), g))
    }

    /// Builds an `N×cols` matrix whose row `n` holds `src[n]` at column
    /// `pattern[n].0`, `-src[n]` at column `pattern[n].1`, and zero elsewhere.
    pub fn scatter_pairs(
        &mut self,
        src: Var,
        cols: usize,
        pattern: &[(usize, usize)],
    ) -> Result<Var> {
        let sd = self.data(src);
        if sd.len() != pattern.len() {
            return Err(invalid("scatter_pairs needs one pattern entry per element"));
        }
        if pattern.iter().any(|&(p, q)| p >= cols || q >= cols || p == q) {
            return Err(invalid("scatter_pairs columns must be distinct and in range"));
        }
        let mut out = vec![0.0; sd.len() * cols];
        for (n, (&v, &(p, q))) in sd.iter().zip(pattern).enumerate() {
            out[n * cols + p] = v;
            out[n * cols + q] = -v;
        }
        let out = Tensor::from_parts(vec![sd.len(), cols], out);
        let g = self.grad_any(&[src]);
        Ok(self.push(
            out,
            Op::ScatterPairs {
                src,
                cols,
                pattern: pattern.to_vec(),
            },
            g,
        ))
    }
}

fn bilinear_axis(u: f64, len: usize) -> (usize, usize, f64) {
    let u = u.clamp(0.0, (len - 1) as f64);
    let i0 = math::floor(u) as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, u - i0 as f64)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + math::ln(row.iter().map(|&v| math::exp(v - m)).sum::<f64>())
}

/// Sum that does not depend on the order of its terms: they are added in
/// ascending order, so permuted inputs give bit-identical results.
fn order_free_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum()
}

fn softmax_strided(buf: &mut [f64], start: usize, stride: usize, count: usize) {
    let idx = |i: usize| start + i * stride;
    let m = (0..count).map(|i| buf[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
    for i in 0..count {
        buf[idx(i)] = math::exp(buf[idx(i)] - m);
    }
    let total = order_free_sum((0..count).map(|i| buf[idx(i)]));
    for i in 0..count {
        buf[idx(i)] /= total;
    }
}

impl Op {
    /// Accumulates input gradients given the output gradient `g`.
    pub(crate) fn backprop(&self, nodes: &[Node], out: &Tensor, g: &[f64], acc: &mut GradAcc) {
        let val = |v: Var| nodes[v.0].value.data();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = acc.slot(v, g.len()) {
                        axpy(1.0, g, s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = acc.slot(*a, g.len()) {
                    axpy(1.0, g, s);
                }
                if let Some(s) = acc.slot(*b, g.len()) {
                    axpy(-1.0, g, s);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                if let Some(s) = acc.slot(*a, g.len()) {
                    for ((si, gi), bi) in s.iter_mut().zip(g).zip(bd) {
                        *si += gi * bi;
                    }
                }
                if let Some(s) = acc.slot(*b, g.len()) {
                    for ((si, gi), ai) in s.iter_mut().zip(g).zip(ad) {
                        *si += gi * ai;
                    }
                }
            }
            Op::MulChannel(x, w) => {
                let (xd, wd) = (val(*x), val(*w));
                let c = wd.len();
                if let Some(s) = acc.slot(*x, g.len()) {
                    for (srow, grow) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((si, gi), wi) in srow.iter_mut().zip(grow).zip(wd) {
                            *si += gi * wi;
                        }
                    }
                }
                if let Some(s) = acc.slot(*w, c) {
                    for (xrow, grow) in xd.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for ((si, gi), xi) in s.iter_mut().zip(grow).zip(xrow) {
                            *si += gi * xi;
                        }
                    }
                }
            }
            Op::AddChannel(x, b) => {
                let c = nodes[b.0].value.len();
                if let Some(s) = acc.slot(*x, g.len()) {
                    axpy(1.0, g, s);
                }
                if let Some(s) = acc.slot(*b, c) {
                    for grow in g.chunks_exact(c) {
                        axpy(1.0, grow, s);
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = acc.slot(*a, g.len()) {
                    axpy(*f, g, s);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(s) = acc.slot(*a, g.len()) {
                    axpy(1.0, g, s);
                }
            }
            Op::GradReversal(a) => {
                if let Some(s) = acc.slot(*a, g.len()) {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si -= gi;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (ad, bd) = (ta.data(), tb.data());
                if let Some(s) = acc.slot(*a, m * k) {
                    for (srow, grow) in s.chunks_exact_mut(k).zip(g.chunks_exact(n)) {
                        for (si, brow) in srow.iter_mut().zip(bd.chunks_exact(n)) {
                            *si += dot(grow, brow);
                        }
                    }
                }
                if let Some(s) = acc.slot(*b, k * n) {
                    for (arow, grow) in ad.chunks_exact(k).zip(g.chunks_exact(n)) {
                        for (&aik, srow) in arow.iter().zip(s.chunks_exact_mut(n)) {
                            if aik != 0.0 {
                                axpy(aik, grow, srow);
                            }
                        }
                    }
                }
            }
            Op::Conv1d {
                signal,
                kernel,
                used,
            } => {
                let (sd, kd_full) = (val(*signal), val(*kernel));
                let (c, k) = (sd.len(), kd_full.len());
                let skip = (k - used) / 2;
                let pad = (used - 1) / 2;
                let kd = &kd_full[skip..skip + used];
                if let Some(s) = acc.slot(*signal, c) {
                    for (i, &gi) in g.iter().enumerate() {
                        for (j, &w) in kd.iter().enumerate() {
                            let idx = i + j;
                            if idx >= pad && idx - pad < c {
                                s[idx - pad] += gi * w;
                            }
                        }
                    }
                }
                if let Some(s) = acc.slot(*kernel, k) {
                    for (i, &gi) in g.iter().enumerate() {
                        for j in 0..*used {
                            let idx = i + j;
                            if idx >= pad && idx - pad < c {
                                s[skip + j] += gi * sd[idx - pad];
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => conv2d_backward(nodes, out, g, acc, *input, *weight, *bias, *stride, *pad),
            Op::Relu(a) => {
                let ad = val(*a);
                if let Some(s) = acc.slot(*a, g.len()) {
                    for ((si, gi), &x) in s.iter_mut().zip(g).zip(ad) {
                        if x > 0.0 {
                            *si += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(s) = acc.slot(*a, g.len()) {
                    for ((si, gi), &y) in s.iter_mut().zip(g).zip(out.data()) {
                        *si += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Log(a) => {
                let ad = val(*a);
                if let Some(s) = acc.slot(*a, g.len()) {
                    for ((si, gi), &x) in s.iter_mut().zip(g).zip(ad) {
                        *si += gi / x;
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let (rows, cols) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                if let Some(s) = acc.slot(*a, g.len()) {
                    let (outer, inner, outer_step, inner_step) = match axis {
                        Axis::Row => (rows, cols, cols, 1),
                        Axis::Column => (cols, rows, 1, cols),
                    };
                    for o in 0..outer {
                        let at = |i: usize| o * outer_step + i * inner_step;
                        let inner_dot: f64 = (0..inner).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..inner {
                            s[at(i)] += y[at(i)] * (g[at(i)] - inner_dot);
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let t = &nodes[x.0].value;
                let c = t.shape()[2];
                let n = (t.shape()[0] * t.shape()[1]) as f64;
                if let Some(s) = acc.slot(*x, t.len()) {
                    for srow in s.chunks_exact_mut(c) {
                        for (si, gi) in srow.iter_mut().zip(g) {
                            *si += gi / n;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let len = nodes[a.0].value.len();
                if let Some(s) = acc.slot(*a, len) {
                    for si in s.iter_mut() {
                        *si += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let len = nodes[a.0].value.len();
                if let Some(s) = acc.slot(*a, len) {
                    let v = g[0] / len as f64;
                    for si in s.iter_mut() {
                        *si += v;
                    }
                }
            }
            Op::SumRows(a) => {
                let len = nodes[a.0].value.len();
                let cols = g.len();
                if let Some(s) = acc.slot(*a, len) {
                    for srow in s.chunks_exact_mut(cols) {
                        axpy(1.0, g, srow);
                    }
                }
            }
            Op::Bce { p, target } => {
                let pd = val(*p);
                let n = pd.len() as f64;
                if let Some(s) = acc.slot(*p, pd.len()) {
                    for ((si, &pi), &y) in s.iter_mut().zip(pd).zip(target) {
                        if (BCE_EPS..=1.0 - BCE_EPS).contains(&pi) {
                            *si += g[0] * (-y / pi + (1.0 - y) / (1.0 - pi)) / n;
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                let pd = val(*pred);
                if let Some(s) = acc.slot(*pred, pd.len()) {
                    for ((si, &x), &t) in s.iter_mut().zip(pd).zip(target) {
                        let d = x - t;
                        let dd = if math::abs(d) < *beta {
                            d / beta
                        } else if d > 0.0 {
                            1.0
                        } else {
                            -1.0
                        };
                        *si += g[0] * dd;
                    }
                }
            }
            Op::SoftmaxCe { logits, labels } => {
                let t = &nodes[logits.0].value;
                let k = t.shape()[1];
                let n = labels.len() as f64;
                if let Some(s) = acc.slot(*logits, t.len()) {
                    for ((srow, row), &l) in s.chunks_exact_mut(k).zip(t.data().chunks_exact(k)).zip(labels) {
                        let lse = log_sum_exp(row);
                        for (j, (si, &v)) in srow.iter_mut().zip(row).enumerate() {
                            let p = math::exp(v - lse);
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            *si += g[0] * (p - onehot) / n;
                        }
                    }
                }
            }
            Op::BilinearCrop {
                feature,
                taps,
                channels,
            } => {
                let len = nodes[feature.0].value.len();
                let c = *channels;
                if let Some(s) = acc.slot(*feature, len) {
                    for (cell, grow) in taps.iter().zip(g.chunks_exact(c)) {
                        for &(pix, wgt) in cell {
                            if wgt != 0.0 {
                                axpy(wgt, grow, &mut s[pix as usize * c..][..c]);
                            }
                        }
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                let t = &nodes[a.0].value;
                let k = t.shape()[1];
                if let Some(s) = acc.slot(*a, t.len()) {
                    for (&r, grow) in rows.iter().zip(g.chunks_exact(k)) {
                        axpy(1.0, grow, &mut s[r * k..(r + 1) * k]);
                    }
                }
            }
            Op::Columns { src, start, end } => {
                let t = &nodes[src.0].value;
                let k = t.shape()[1];
                let w = end - start;
                if let Some(s) = acc.slot(*src, t.len()) {
                    for (srow, grow) in s.chunks_exact_mut(k).zip(g.chunks_exact(w)) {
                        axpy(1.0, grow, &mut srow[*start..*end]);
                    }
                }
            }
            Op::ScatterPairs { src, cols, pattern } => {
                if let Some(s) = acc.slot(*src, pattern.len()) {
                    for (n, (si, &(p, q))) in s.iter_mut().zip(pattern).enumerate() {
                        *si += g[n * cols + p] - g[n * cols + q];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    out: &Tensor,
    g: &[f64],
    acc: &mut GradAcc,
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    pad: usize,
) {
    let ti = &nodes[input.0].value;
    let tw = &nodes[weight.0].value;
    let (h, w, cin) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
    let (kh, kw, cout) = (tw.shape()[0], tw.shape()[1], tw.shape()[3]);
    let (ho, wo) = (out.shape()[0], out.shape()[1]);
    let (id, wd) = (ti.data(), tw.data());

    if let Some(s) = acc.slot(bias, cout) {
        for grow in g.chunks_exact(cout) {
            axpy(1.0, grow, s);
        }
    }
    let taps = |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<usize> {
        let iy = (oy * stride + ky) as isize - pad as isize;
        let ix = (ox * stride + kx) as isize - pad as isize;
        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
            None
        } else {
            Some(iy as usize * w + ix as usize)
        }
    };
    if let Some(s) = acc.slot(weight, tw.len()) {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = &g[(oy * wo + ox) * cout..][..cout];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let Some(pix) = taps(oy, ox, ky, kx) else {
                            continue;
                        };
                        let px = &id[pix * cin..][..cin];
                        let wbase = (ky * kw + kx) * cin * cout;
                        for (ci, &a) in px.iter().enumerate() {
                            if a != 0.0 {
                                axpy(a, go, &mut s[wbase + ci * cout..][..cout]);
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(s) = acc.slot(input, ti.len()) {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = &g[(oy * wo + ox) * cout..][..cout];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let Some(pix) = taps(oy, ox, ky, kx) else {
                            continue;
                        };
                        let wbase = (ky * kw + kx) * cin * cout;
                        let srow = &mut s[pix * cin..][..cin];
                        for (ci, si) in srow.iter_mut().enumerate() {
                            *si += dot(&wd[wbase + ci * cout..][..cout], go);
                        }
                    }
                }
            }
        }
    }
}

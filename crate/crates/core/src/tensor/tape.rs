//! Gradient tape: eager operation recording and reverse-mode backward.

use super::adam::{Gradients, ParamId, ParamStore};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    OneMinus(Var),
    Scale(Var, T),
    AddBias { x: Var, bias: Var },
    MatMul { a: Var, b: Var },
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose2(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    Conv2d { input: Var, weight: Var, stride: usize, padding: usize },
    AvgPool2d { input: Var, kernel: usize, stride: usize },
    BucketPool1d { input: Var, out_len: usize },
    L2Normalize(Var),
    LogClamp { x: Var, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Eager gradient tape. Built per forward pass, consumed by [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            check_finite: false,
        }
    }

    /// Enable per-op scanning for non-finite outputs (debug aid).
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::ConsumedTape);
        }
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a constant; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, false, Op::Leaf { param: None }, "constant")
    }

    /// Record a differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, true, Op::Leaf { param: None }, "input")
    }

    /// Record a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push(
            store.get(id).clone(),
            true,
            Op::Leaf { param: Some(id) },
            "param",
        )
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, rg, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, rg, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, rg, Op::Mul(a, b), "mul")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|&x| -x).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Neg(a), "neg")
    }

    /// 1 - x elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| T::one() - x)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::OneMinus(a), "one_minus")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Relu(a), "relu")
    }

    /// ln(max(x, eps)); the gradient is 1/x where x > eps and 0 below the clamp.
    pub fn log_clamp(&mut self, a: Var, eps: T) -> Result<Var> {
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| x.max(eps).ln())
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::LogClamp { x: a, eps }, "log_clamp")
    }

    /// Broadcast-add `bias` (shape `[d]`) to every row of `x` (shape `[.., d]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.nodes[x.0].value.last_dim();
        if self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let xb = &self.nodes[x.0].value;
        let bb = self.nodes[bias.0].value.data();
        let data = xb
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bb[i % d])
            .collect();
        let value = Tensor::new(xb.shape().to_vec(), data)?;
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        self.push(value, rg, Op::AddBias { x, bias }, "add_bias")
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + av * brow[j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, rg, Op::MatMul { a, b }, "matmul")
    }

    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Transpose2(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let value = Tensor::new(new_shape.to_vec(), self.nodes[a.0].value.data().to_vec())?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Reshape(a), "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total_axis = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); numel];
        let mut offset = 0usize;
        for &p in parts {
            let s_axis = self.shape(p)[axis];
            let src = self.nodes[p.0].value.data();
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * s_axis * inner;
                out[dst_base..dst_base + s_axis * inner]
                    .copy_from_slice(&src[src_base..src_base + s_axis * inner]);
            }
            offset += s_axis;
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(
            value,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Gather rows of `table` (shape `[v, d]`) at `ids`, producing `[len, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: format!("table must be rank 2, got {s:?}"),
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: format!("id {bad} out of range for table with {v} rows"),
            });
        }
        let src = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.requires_grad(table);
        self.push(
            value,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    // ── Row-wise nonlinearities (last axis) ──────────────────────────

    fn rows_of(&self, a: Var) -> (usize, usize) {
        let t = &self.nodes[a.0].value;
        let d = t.last_dim();
        (t.numel() / d.max(1), d)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = self.rows_of(a);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..d {
                let e = (row[j] - m).exp();
                out[r * d + j] = e;
                sum = sum + e;
            }
            for j in 0..d {
                out[r * d + j] = out[r * d + j] / sum;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::SoftmaxRows(a), "softmax")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = self.rows_of(a);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..d {
                sum = sum + (row[j] - m).exp();
            }
            let lse = m + sum.ln();
            for j in 0..d {
                out[r * d + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::LogSoftmaxRows(a), "log_softmax")
    }

    /// Layer normalization over the last axis with learned affine parameters.
    /// Variance uses the population convention with `eps` inside the root, so
    /// a zero-variance slice maps to zeros before the affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (rows, d) = self.rows_of(x);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let dn = T::from_usize_lossy(d);
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().cloned().sum::<T>() / dn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / dn;
            let inv = (var + eps).sqrt().recip();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(value, rg, Op::LayerNorm { x, gamma, beta, eps }, "layer_norm")
    }

    /// Normalize the whole tensor to unit Euclidean norm (zero stays zero).
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let src = self.nodes[a.0].value.data();
        let norm = src.iter().map(|&v| v * v).sum::<T>().sqrt();
        let data = if norm > T::zero() {
            src.iter().map(|&v| v / norm).collect()
        } else {
            vec![T::zero(); src.len()]
        };
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::L2Normalize(a), "l2_normalize")
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: T = self.nodes[a.0].value.data().iter().cloned().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a), "sum")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s: T = self.nodes[a.0].value.data().iter().cloned().sum();
        let v = s / T::from_usize_lossy(n);
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(v), rg, Op::MeanAll(a), "mean")
    }

    /// Column means of a `[n, d]` tensor, producing `[d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean_rows",
                msg: format!("expected non-empty rank-2 input, got {s:?}"),
            });
        }
        let (n, d) = (s[0], s[1]);
        let src = self.nodes[a.0].value.data();
        let nn = T::from_usize_lossy(n);
        let mut out = vec![T::zero(); d];
        for i in 0..n {
            for j in 0..d {
                out[j] = out[j] + src[i * d + j];
            }
        }
        for j in 0..d {
            out[j] = out[j] / nn;
        }
        let value = Tensor::new(vec![d], out)?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::MeanRows(a), "mean_rows")
    }

    // ── Convolution and pooling ──────────────────────────────────────

    /// 2-D convolution of `input [c, h, w]` with `weight [o, c, kh, kw]`,
    /// zero padding, producing `[o, h', w']`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 4 || si[0] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let xd = self.nodes[input.0].value.data();
        let wd = self.nodes[weight.0].value.data();
        let mut out = vec![T::zero(); o * oh * ow];
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = T::zero();
                    for ic in 0..c {
                        for u in 0..kh {
                            let y = (i * stride + u) as isize - padding as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let x = (j * stride + v) as isize - padding as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                acc = acc
                                    + xd[(ic * h + y as usize) * w + x as usize]
                                        * wd[((oc * c + ic) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[(oc * oh + i) * ow + j] = acc;
                }
            }
        }
        let value = Tensor::new(vec![o, oh, ow], out)?;
        let rg = self.requires_grad(input) || self.requires_grad(weight);
        self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
            "conv2d",
        )
    }

    /// Average pooling of `[c, h, w]` with a square kernel, no padding.
    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || kernel == 0 || stride == 0 || s[1] < kernel || s[2] < kernel {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool2d",
                msg: format!("input {s:?}, kernel {kernel}, stride {stride}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let k2 = T::from_usize_lossy(kernel * kernel);
        let xd = self.nodes[input.0].value.data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ic in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = T::zero();
                    for u in 0..kernel {
                        for v in 0..kernel {
                            acc = acc + xd[(ic * h + i * stride + u) * w + j * stride + v];
                        }
                    }
                    out[(ic * oh + i) * ow + j] = acc / k2;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        let rg = self.requires_grad(input);
        self.push(
            value,
            rg,
            Op::AvgPool2d {
                input,
                kernel,
                stride,
            },
            "avg_pool2d",
        )
    }

    /// Reduce a vector `[n]` to `[m]` by averaging buckets with boundaries
    /// `floor(i*n/m)`; realizes non-divisible pooling reductions.
    pub fn bucket_pool1d(&mut self, input: Var, out_len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 1 || out_len == 0 || out_len > s[0] {
            return Err(TensorError::InvalidArgument {
                op: "bucketed_avg_pool1d",
                msg: format!("cannot pool {s:?} to length {out_len}"),
            });
        }
        let n = s[0];
        let xd = self.nodes[input.0].value.data();
        let mut out = vec![T::zero(); out_len];
        for i in 0..out_len {
            let lo = i * n / out_len;
            let hi = (i + 1) * n / out_len;
            let mut acc = T::zero();
            for j in lo..hi {
                acc = acc + xd[j];
            }
            out[i] = acc / T::from_usize_lossy(hi - lo);
        }
        let value = Tensor::new(vec![out_len], out)?;
        let rg = self.requires_grad(input);
        self.push(
            value,
            rg,
            Op::BucketPool1d { input, out_len },
            "bucketed_avg_pool1d",
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape and returns the
    /// gradient map of every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::ConsumedTape);
        }
        let loss_val = &self.nodes[loss.0].value;
        if !loss_val.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_val.shape().to_vec(),
            });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, &g);
                    self.accumulate(&mut grads, b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, &g);
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accumulate(&mut grads, b, &neg);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let bv = self.nodes[b.0].value.data();
                        let ga: Vec<T> = g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect();
                        self.accumulate(&mut grads, a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let av = self.nodes[a.0].value.data();
                        let gb: Vec<T> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                        self.accumulate(&mut grads, b, &gb);
                    }
                }
                Op::Neg(a) => {
                    let ga: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::OneMinus(a) => {
                    let ga: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<T> = g.iter().map(|&v| v * c).collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::AddBias { x, bias } => {
                    if self.nodes[x.0].requires_grad {
                        self.accumulate(&mut grads, x, &g);
                    }
                    if self.nodes[bias.0].requires_grad {
                        let d = self.nodes[bias.0].value.numel();
                        let mut gb = vec![T::zero(); d];
                        for (i, &gi) in g.iter().enumerate() {
                            gb[i % d] = gb[i % d] + gi;
                        }
                        self.accumulate(&mut grads, bias, &gb);
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = {
                        let s = self.nodes[a.0].value.shape();
                        (s[0], s[1])
                    };
                    let n2 = self.nodes[b.0].value.shape()[1];
                    if self.nodes[a.0].requires_grad {
                        // dA = G * B^T
                        let bd = self.nodes[b.0].value.data();
                        let mut ga = vec![T::zero(); m * k];
                        for i in 0..m {
                            for j in 0..n2 {
                                let gij = g[i * n2 + j];
                                if gij == T::zero() {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[i * k + p] = ga[i * k + p] + gij * bd[p * n2 + j];
                                }
                            }
                        }
                        self.accumulate(&mut grads, a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T * G
                        let ad = self.nodes[a.0].value.data();
                        let mut gb = vec![T::zero(); k * n2];
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == T::zero() {
                                    continue;
                                }
                                for j in 0..n2 {
                                    gb[p * n2 + j] = gb[p * n2 + j] + av * g[i * n2 + j];
                                }
                            }
                        }
                        self.accumulate(&mut grads, b, &gb);
                    }
                }
                Op::Relu(a) => {
                    let av = self.nodes[a.0].value.data();
                    let ga: Vec<T> = g
                        .iter()
                        .zip(av)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::LogClamp { x, eps } => {
                    let xv = self.nodes[x.0].value.data();
                    let ga: Vec<T> = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi > eps { gi / xi } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, x, &ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[idx].value.data();
                    let d = self.nodes[idx].value.last_dim();
                    let rows = y.len() / d;
                    let mut ga = vec![T::zero(); y.len()];
                    for r in 0..rows {
                        let base = r * d;
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot = dot + g[base + j] * y[base + j];
                        }
                        for j in 0..d {
                            ga[base + j] = y[base + j] * (g[base + j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let ls = self.nodes[idx].value.data();
                    let d = self.nodes[idx].value.last_dim();
                    let rows = ls.len() / d;
                    let mut ga = vec![T::zero(); ls.len()];
                    for r in 0..rows {
                        let base = r * d;
                        let mut gsum = T::zero();
                        for j in 0..d {
                            gsum = gsum + g[base + j];
                        }
                        for j in 0..d {
                            ga[base + j] = g[base + j] - ls[base + j].exp() * gsum;
                        }
                    }
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let gv = self.nodes[gamma.0].value.data().to_vec();
                    let d = self.nodes[x.0].value.last_dim();
                    let rows = xv.len() / d;
                    let dn = T::from_usize_lossy(d);
                    let mut gx = vec![T::zero(); xv.len()];
                    let mut ggamma = vec![T::zero(); d];
                    let mut gbeta = vec![T::zero(); d];
                    for r in 0..rows {
                        let base = r * d;
                        let row = &xv[base..base + d];
                        let mean = row.iter().cloned().sum::<T>() / dn;
                        let var = row
                            .iter()
                            .map(|&v| (v - mean) * (v - mean))
                            .sum::<T>()
                            / dn;
                        let inv = (var + eps).sqrt().recip();
                        // x_hat and the two row means needed by the input grad
                        let mut mean_gp = T::zero();
                        let mut mean_gpx = T::zero();
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv;
                            let gp = g[base + j] * gv[j];
                            mean_gp = mean_gp + gp;
                            mean_gpx = mean_gpx + gp * xh;
                            ggamma[j] = ggamma[j] + g[base + j] * xh;
                            gbeta[j] = gbeta[j] + g[base + j];
                        }
                        mean_gp = mean_gp / dn;
                        mean_gpx = mean_gpx / dn;
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv;
                            let gp = g[base + j] * gv[j];
                            gx[base + j] = (gp - mean_gp - xh * mean_gpx) * inv;
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        self.accumulate(&mut grads, x, &gx);
                    }
                    if self.nodes[gamma.0].requires_grad {
                        self.accumulate(&mut grads, gamma, &ggamma);
                    }
                    if self.nodes[beta.0].requires_grad {
                        self.accumulate(&mut grads, beta, &gbeta);
                    }
                }
                Op::Embedding { table, ids } => {
                    if self.nodes[table.0].requires_grad {
                        let d = self.nodes[table.0].value.shape()[1];
                        let v = self.nodes[table.0].value.shape()[0];
                        let mut gt = vec![T::zero(); v * d];
                        for (pos, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                gt[id * d + j] = gt[id * d + j] + g[pos * d + j];
                            }
                        }
                        self.accumulate(&mut grads, table, &gt);
                    }
                }
                Op::Concat { parts, axis } => {
                    let out_shape = self.nodes[idx].value.shape().to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total_axis = out_shape[axis];
                    let mut offset = 0usize;
                    for &p in &parts {
                        let s_axis = self.nodes[p.0].value.shape()[axis];
                        if self.nodes[p.0].requires_grad {
                            let mut gp = vec![T::zero(); self.nodes[p.0].value.numel()];
                            for o in 0..outer {
                                let src_base = (o * total_axis + offset) * inner;
                                let dst_base = o * s_axis * inner;
                                gp[dst_base..dst_base + s_axis * inner]
                                    .copy_from_slice(&g[src_base..src_base + s_axis * inner]);
                            }
                            self.accumulate(&mut grads, p, &gp);
                        }
                        offset += s_axis;
                    }
                }
                Op::Reshape(a) => {
                    self.accumulate(&mut grads, a, &g);
                }
                Op::Transpose2(a) => {
                    let s = self.nodes[a.0].value.shape();
                    let (m, n2) = (s[0], s[1]);
                    let mut ga = vec![T::zero(); m * n2];
                    for i in 0..m {
                        for j in 0..n2 {
                            ga[i * n2 + j] = g[j * m + i];
                        }
                    }
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::SumAll(a) => {
                    let ga = vec![g[0]; self.nodes[a.0].value.numel()];
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::MeanAll(a) => {
                    let n2 = self.nodes[a.0].value.numel();
                    let ga = vec![g[0] / T::from_usize_lossy(n2); n2];
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::MeanRows(a) => {
                    let s = self.nodes[a.0].value.shape();
                    let (n2, d) = (s[0], s[1]);
                    let inv = T::from_usize_lossy(n2).recip();
                    let mut ga = vec![T::zero(); n2 * d];
                    for i in 0..n2 {
                        for j in 0..d {
                            ga[i * d + j] = g[j] * inv;
                        }
                    }
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::L2Normalize(a) => {
                    let xv = self.nodes[a.0].value.data();
                    let norm = xv.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let ga: Vec<T> = if norm > T::zero() {
                        let y = self.nodes[idx].value.data();
                        let dot = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum::<T>();
                        g.iter()
                            .zip(y)
                            .map(|(&gi, &yi)| (gi - yi * dot) / norm)
                            .collect()
                    } else {
                        vec![T::zero(); xv.len()]
                    };
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Conv2d {
                    input,
                    weight,
                    stride,
                    padding,
                } => {
                    let si = self.nodes[input.0].value.shape().to_vec();
                    let sw = self.nodes[weight.0].value.shape().to_vec();
                    let (c, h, w) = (si[0], si[1], si[2]);
                    let (o, kh, kw) = (sw[0], sw[2], sw[3]);
                    let oh = (h + 2 * padding - kh) / stride + 1;
                    let ow = (w + 2 * padding - kw) / stride + 1;
                    let need_gi = self.nodes[input.0].requires_grad;
                    let need_gw = self.nodes[weight.0].requires_grad;
                    let xd = self.nodes[input.0].value.data();
                    let wd = self.nodes[weight.0].value.data();
                    let mut gi = vec![T::zero(); c * h * w];
                    let mut gw = vec![T::zero(); o * c * kh * kw];
                    for oc in 0..o {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = g[(oc * oh + i) * ow + j];
                                if go == T::zero() {
                                    continue;
                                }
                                for ic in 0..c {
                                    for u in 0..kh {
                                        let y = (i * stride + u) as isize - padding as isize;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let x = (j * stride + v) as isize - padding as isize;
                                            if x < 0 || x >= w as isize {
                                                continue;
                                            }
                                            let xi = (ic * h + y as usize) * w + x as usize;
                                            let wi = ((oc * c + ic) * kh + u) * kw + v;
                                            if need_gi {
                                                gi[xi] = gi[xi] + go * wd[wi];
                                            }
                                            if need_gw {
                                                gw[wi] = gw[wi] + go * xd[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_gi {
                        self.accumulate(&mut grads, input, &gi);
                    }
                    if need_gw {
                        self.accumulate(&mut grads, weight, &gw);
                    }
                }
                Op::AvgPool2d {
                    input,
                    kernel,
                    stride,
                } => {
                    let s = self.nodes[input.0].value.shape().to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let oh = (h - kernel) / stride + 1;
                    let ow = (w - kernel) / stride + 1;
                    let k2 = T::from_usize_lossy(kernel * kernel);
                    let mut gi = vec![T::zero(); c * h * w];
                    for ic in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = g[(ic * oh + i) * ow + j] / k2;
                                for u in 0..kernel {
                                    for v in 0..kernel {
                                        let xi = (ic * h + i * stride + u) * w + j * stride + v;
                                        gi[xi] = gi[xi] + go;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, input, &gi);
                }
                Op::BucketPool1d { input, out_len } => {
                    let n2 = self.nodes[input.0].value.numel();
                    let mut gi = vec![T::zero(); n2];
                    for i in 0..out_len {
                        let lo = i * n2 / out_len;
                        let hi = (i + 1) * n2 / out_len;
                        let share = g[i] / T::from_usize_lossy(hi - lo);
                        for j in lo..hi {
                            gi[j] = gi[j] + share;
                        }
                    }
                    self.accumulate(&mut grads, input, &gi);
                }
            }
        }

        // Retain gradients for differentiable leaves only; free the rest.
        let mut out = Gradients::with_capacity(n);
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param } = node.op {
                if node.requires_grad {
                    if let Some(g) = grads[idx].take() {
                        let t = Tensor::new(node.value.shape().to_vec(), g)?;
                        out.set(Var(idx), param, t);
                    }
                }
            }
        }
        self.nodes.clear();
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: Var, g: &[T]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b = *b + v;
                }
            }
            None => {
                grads[target.0] = Some(g.to_vec());
            }
        }
    }
}

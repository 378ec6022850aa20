use super::conv::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Elementwise(ElementwiseKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Abs(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        // (outer, channels, inner): channel stats span outer x inner
        layout: (usize, usize, usize),
    },
    Upsample2x(Var),
    CosineRows {
        a: Var,
        b: Var,
        eps: f64,
    },
    Softmax(Var),
    CrossEntropy2 {
        logits: Var,
        target: Vec<u8>,
    },
    StopGradient(Var),
    Gather {
        x: Var,
        coords: Vec<(usize, usize, usize)>,
    },
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Elementwise(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CosineRows { a, b, .. } => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Upsample2x(x)
            | Op::Softmax(x)
            | Op::StopGradient(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::CrossEntropy2 { logits, .. } => vec![*logits],
            Op::Gather { x, .. } => vec![*x],
            Op::SliceRows { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations.
///
/// Node ids are handed out in creation order, so every node's inputs precede
/// it and a reverse sweep over the node list is a valid reverse topological
/// order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, indexed by node.
///
/// Nodes that the loss does not depend on (including everything cut off by a
/// stop-gradient) have no entry; [`Gradients::wrt`] reports them as zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::StopGradient(_) => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Direct inputs of a node.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn is_stop_gradient(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::StopGradient(_))
    }

    /// Marks every node `root` depends on. With `cut_stop_gradient`, edges
    /// leaving a stop-gradient node are not followed, which yields exactly the
    /// set of nodes that can receive gradient from `root`.
    pub fn ancestors(&self, root: Var, cut_stop_gradient: bool) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        seen[root.0] = true;
        while let Some(v) = stack.pop() {
            if cut_stop_gradient && self.is_stop_gradient(v) {
                continue;
            }
            for input in self.nodes[v.0].op.inputs() {
                if !seen[input.0] {
                    seen[input.0] = true;
                    stack.push(input);
                }
            }
        }
        seen
    }

    /// Pre-activation values of every ReLU on the tape, in recording order.
    /// Used by the gradient checker to detect kink crossings.
    pub fn relu_inputs(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend_from_slice(self.nodes[x.0].value.data());
            }
        }
        out
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: ElementwiseKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let trailing_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !trailing_ok || tb.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let nb = tb.len();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % nb];
                match kind {
                    ElementwiseKind::Add => x + y,
                    ElementwiseKind::Sub => x - y,
                    ElementwiseKind::Mul => x * y,
                }
            })
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(out, Op::Elementwise(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out =
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect()).expect("same shape");
        self.push(out, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Zero-padded cross-correlation of `input[B,Cin,H,W]` with
    /// `kernel[Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: ti.shape().to_vec(),
            rhs: tk.shape().to_vec(),
        };
        if ti.rank() != 4 || tk.rank() != 4 || ti.shape()[1] != tk.shape()[1] {
            return Err(mismatch());
        }
        let k = tk.shape()[2];
        if tk.shape()[3] != k || k == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel must be square and non-empty, got {:?}", tk.shape()),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be >= 1".into(),
            });
        }
        let (b, c_in, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("input {h}x{w} with pad {pad} smaller than kernel {k}"),
            });
        }
        let geom = ConvGeom {
            batch: b,
            c_in,
            h,
            w,
            c_out: tk.shape()[0],
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        };
        let data = conv::forward(&geom, ti.data(), tk.data());
        let out = Tensor::new(vec![b, geom.c_out, geom.out_h, geom.out_w], data)?;
        Ok(self.push(out, Op::Conv2d { input, kernel, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out =
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.abs()).collect()).expect("same shape");
        self.push(out, Op::Abs(x))
    }

    /// Batch normalization of `x[B,F]` with batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: format!("expected [B, F], got {shape:?}"),
            });
        }
        self.norm_impl("batch_norm", x, gamma, beta, eps, (shape[0], shape[1], 1))
    }

    /// Per-channel normalization of `x[B,C,H,W]` with statistics over B, H, W.
    pub fn batch_norm2d(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::Invalid {
                op: "batch_norm2d",
                msg: format!("expected [B, C, H, W], got {shape:?}"),
            });
        }
        self.norm_impl(
            "batch_norm2d",
            x,
            gamma,
            beta,
            eps,
            (shape[0], shape[1], shape[2] * shape[3]),
        )
    }

    fn norm_impl(
        &mut self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        layout: (usize, usize, usize),
    ) -> Result<Var> {
        let (outer, ch, inner) = layout;
        let count = outer * inner;
        if count < 2 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("batch statistics need at least 2 values per feature, got {count}"),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op,
                msg: "eps must be positive".into(),
            });
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tg.shape() != [ch] || tb.shape() != [ch] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let xd = tx.data();
        let idx = |o: usize, c: usize, i: usize| (o * ch + c) * inner + i;
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for c in 0..ch {
            let mut s = 0.0;
            for o in 0..outer {
                for i in 0..inner {
                    s += xd[idx(o, c, i)];
                }
            }
            mean[c] = s / count as f64;
            let mut v = 0.0;
            for o in 0..outer {
                for i in 0..inner {
                    let d = xd[idx(o, c, i)] - mean[c];
                    v += d * d;
                }
            }
            var[c] = v / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for c in 0..ch {
                for i in 0..inner {
                    let j = idx(o, c, i);
                    xhat[j] = (xd[j] - mean[c]) * inv_std[c];
                    out[j] = tg.data()[c] * xhat[j] + tb.data()[c];
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
            },
        ))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(TensorError::Invalid {
                op: "upsample_nearest2x",
                msg: format!("expected [B, C, H, W], got {:?}", t.shape()),
            });
        }
        let (b, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let mut out = vec![0.0; b * c * 4 * h * w];
        let src = t.data();
        for plane in 0..b * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x(x)))
    }

    /// Row-wise cosine similarity of `a[M,C]` and `b[M,C]`, giving `[M]`.
    ///
    /// Each row is scaled by `1 / (norm + eps)` before the dot product.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("cosine_rows", ta, tb)?;
        if ta.rank() != 2 || ta.shape()[1] == 0 {
            return Err(TensorError::Invalid {
                op: "cosine_rows",
                msg: format!("expected [M, C] with C >= 1, got {:?}", ta.shape()),
            });
        }
        let (m, c) = (ta.shape()[0], ta.shape()[1]);
        let out: Vec<f64> = (0..m)
            .map(|r| {
                let ra = &ta.data()[r * c..(r + 1) * c];
                let rb = &tb.data()[r * c..(r + 1) * c];
                let na = norm(ra);
                let nb = norm(rb);
                dot(ra, rb) / ((na + eps) * (nb + eps))
            })
            .collect();
        Ok(self.push(Tensor::vector(out), Op::CosineRows { a, b, eps }))
    }

    /// Cosine similarity of two vectors `[C]`, giving a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let c = self.shape(a).iter().product::<usize>();
        let ra = self.reshape(a, &[1, c])?;
        let cb = self.shape(b).iter().product::<usize>();
        let rb = self.reshape(b, &[1, cb])?;
        let rows = self.cosine_rows(ra, rb, eps)?;
        self.reshape(rows, &[])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or(TensorError::Invalid {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: "empty axis".into(),
            });
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// Mean per-pixel cross-entropy of two-class `logits[B,2,H,W]` against a
    /// `{0,1}` target laid out as `[B,H,W]`.
    pub fn cross_entropy_2class(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 4 || t.shape()[1] != 2 {
            return Err(TensorError::Invalid {
                op: "cross_entropy_2class",
                msg: format!("expected [B, 2, H, W], got {:?}", t.shape()),
            });
        }
        let (b, h, w) = (t.shape()[0], t.shape()[2], t.shape()[3]);
        if target.len() != b * h * w {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_2class",
                lhs: t.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        if let Some(bad) = target.iter().find(|&&v| v > 1) {
            return Err(TensorError::Invalid {
                op: "cross_entropy_2class",
                msg: format!("target value {bad} outside {{0, 1}}"),
            });
        }
        let hw = h * w;
        let d = t.data();
        let mut total = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                let l0 = d[(bi * 2) * hw + p];
                let l1 = d[(bi * 2 + 1) * hw + p];
                // -log softmax = softplus(l_other - l_target)
                let d = if target[bi * hw + p] == 1 {
                    l0 - l1
                } else {
                    l1 - l0
                };
                total += if d > 0.0 {
                    d + (-d).exp().ln_1p()
                } else {
                    d.exp().ln_1p()
                };
            }
        }
        let value = Tensor::scalar(total / (b * hw) as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy2 {
                logits,
                target: target.to_vec(),
            },
        ))
    }

    /// Forward identity; contributes no gradient to anything upstream.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient(x))
    }

    /// Gathers `x[b, :, r, c]` for each coordinate into rows of `[M, C]`.
    pub fn gather(&mut self, x: Var, coords: &[(usize, usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("expected [B, C, H, W], got {:?}", t.shape()),
            });
        }
        let (nb, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let mut out = Vec::with_capacity(coords.len() * c);
        for &(b, r, col) in coords {
            if b >= nb || r >= h || col >= w {
                return Err(TensorError::OutOfBounds {
                    b,
                    r,
                    c: col,
                    shape: t.shape().to_vec(),
                });
            }
            for ch in 0..c {
                out.push(t.data()[((b * c + ch) * h + r) * w + col]);
            }
        }
        let value = Tensor::new(vec![coords.len(), c], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                coords: coords.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            })?)
            .shape()
            .to_vec();
        if first.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "cannot concatenate scalars".into(),
            });
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != first.len() || t.shape()[1..] != first[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = rows;
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec())))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || start + len > t.shape()[0] {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} of {:?}", start + len, t.shape()),
            });
        }
        let row: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * row..(start + len) * row].to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceRows { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Elementwise(kind, a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let nb = bd.len();
                self.accumulate(grads, *a, |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += match kind {
                            ElementwiseKind::Mul => gi * bd[i % nb],
                            _ => *gi,
                        };
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % nb] += match kind {
                            ElementwiseKind::Add => *gi,
                            ElementwiseKind::Sub => -gi,
                            ElementwiseKind::Mul => gi * ad[i],
                        };
                    }
                });
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, |gx| {
                for (acc, gi) in gx.iter_mut().zip(g) {
                    *acc += gi * f;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, |gx| {
                for (acc, gi) in gx.iter_mut().zip(g) {
                    *acc += gi;
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.accumulate(grads, *a, |ga| {
                    // dA = dC * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    // dB = A^T * dC
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (acc, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *acc += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel, geom } => {
                if self.nodes[input.0].requires_grad {
                    let gin = conv::backward_input(geom, g, self.value(*kernel).data());
                    self.accumulate(grads, *input, |acc| add_into(acc, &gin));
                }
                if self.nodes[kernel.0].requires_grad {
                    let gk = conv::backward_kernel(geom, g, self.value(*input).data());
                    self.accumulate(grads, *kernel, |acc| add_into(acc, &gk));
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        } else if xd[i] < 0.0 {
                            gx[i] -= g[i];
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
            } => {
                let (outer, ch, inner) = *layout;
                let count = (outer * inner) as f64;
                let idx = |o: usize, c: usize, i: usize| (o * ch + c) * inner + i;
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        for i in 0..inner {
                            let j = idx(o, c, i);
                            sum_g[c] += g[j];
                            sum_gx[c] += g[j] * xhat[j];
                        }
                    }
                }
                let gd = self.value(*gamma).data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for c in 0..ch {
                            let k = gd[c] * inv_std[c] / count;
                            for i in 0..inner {
                                let j = idx(o, c, i);
                                gx[j] += k * (count * g[j] - sum_g[c] - xhat[j] * sum_gx[c]);
                            }
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| add_into(gg, &sum_gx));
                self.accumulate(grads, *beta, |gb| add_into(gb, &sum_g));
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                self.accumulate(grads, *x, |gx| {
                    for plane in 0..s[0] * s[1] {
                        let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::CosineRows { a, b, eps } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.shape()[1];
                let row_grad = |r: usize, this: &[f64], other: &[f64]| -> Vec<f64> {
                    let nt = norm(this);
                    let no = norm(other);
                    let uo: Vec<f64> = other.iter().map(|v| v / (no + eps)).collect();
                    let dt = nt + eps;
                    let coef = if nt > 0.0 {
                        dot(this, &uo) / (nt * dt * dt)
                    } else {
                        0.0
                    };
                    this.iter()
                        .zip(&uo)
                        .map(|(t, u)| g[r] * (u / dt - t * coef))
                        .collect()
                };
                self.accumulate(grads, *a, |ga| {
                    for r in 0..g.len() {
                        let ra = &ta.data()[r * c..(r + 1) * c];
                        let rb = &tb.data()[r * c..(r + 1) * c];
                        add_into(&mut ga[r * c..(r + 1) * c], &row_grad(r, ra, rb));
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for r in 0..g.len() {
                        let ra = &ta.data()[r * c..(r + 1) * c];
                        let rb = &tb.data()[r * c..(r + 1) * c];
                        add_into(&mut gb[r * c..(r + 1) * c], &row_grad(r, rb, ra));
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("softmax rank");
                self.accumulate(grads, *x, |gx| {
                    for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let s = dot(yr, gr);
                        for i in 0..n {
                            gxr[i] += yr[i] * (gr[i] - s);
                        }
                    }
                });
            }
            Op::CrossEntropy2 { logits, target } => {
                let t = self.value(*logits);
                let (b, h, w) = (t.shape()[0], t.shape()[2], t.shape()[3]);
                let hw = h * w;
                let scale = g[0] / (b * hw) as f64;
                let d = t.data();
                self.accumulate(grads, *logits, |gl| {
                    for bi in 0..b {
                        for p in 0..hw {
                            let i0 = (bi * 2) * hw + p;
                            let i1 = (bi * 2 + 1) * hw + p;
                            let mut pr = [d[i0], d[i1]];
                            softmax_in_place(&mut pr);
                            let tv = target[bi * hw + p] as usize;
                            gl[i0] += scale * (pr[0] - if tv == 0 { 1.0 } else { 0.0 });
                            gl[i1] += scale * (pr[1] - if tv == 1 { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
            Op::Gather { x, coords } => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[1], s[2], s[3]);
                self.accumulate(grads, *x, |gx| {
                    for (m, &(b, r, col)) in coords.iter().enumerate() {
                        for ch in 0..c {
                            gx[((b * c + ch) * h + r) * w + col] += g[m * c + ch];
                        }
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |gx| {
                for acc in gx.iter_mut() {
                    *acc += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                self.accumulate(grads, *x, |gx| {
                    for acc in gx.iter_mut() {
                        *acc += g[0] / n;
                    }
                })
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let row: usize = t.shape()[1..].iter().product();
                let off = start * row;
                self.accumulate(grads, *x, |gx| add_into(&mut gx[off..off + g.len()], g));
            }
        }
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{central_difference, rel_error};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Compares the tape gradient of `build` wrt its single parameter with
    /// central differences at every coordinate.
    fn check_unary(x0: Tensor, build: impl Fn(&mut Tape, Var) -> Var, tol: f64) -> f64 {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = build(&mut tape, x);
        let analytic = tape.backward(loss).unwrap().wrt(x);
        let f = |data: &[f64]| {
            let mut tp = Tape::new();
            let v = tp.param(Tensor::new(x0.shape().to_vec(), data.to_vec()).unwrap());
            let l = build(&mut tp, v);
            tp.value(l).item()
        };
        let mut worst: f64 = 0.0;
        for i in 0..x0.len() {
            let num = central_difference(f, x0.data(), i, 1e-5);
            let e = rel_error(analytic.data()[i], num);
            assert!(
                e <= tol,
                "coord {i}: analytic {} numeric {num}",
                analytic.data()[i]
            );
            worst = worst.max(e);
        }
        worst
    }

    #[test]
    fn add_direct() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zeros_annihilates_value_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5, -2.0, 3.0]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let y = tape.mul(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sub_gradients_match_finite_differences() {
        let a0 = t(&[2, 3], &lcg(1, 6));
        let b0 = t(&[2, 3], &lcg(2, 6));
        let mut tape = Tape::new();
        let a = tape.param(a0.clone());
        let b = tape.param(b0.clone());
        let d = tape.sub(a, b).unwrap();
        let w = tape.constant(t(&[2, 3], &lcg(3, 6)));
        let dw = tape.mul(d, w).unwrap();
        let l = tape.sum(dw);
        let g = tape.backward(l).unwrap();
        let wv = lcg(3, 6);
        for i in 0..6 {
            let fa = |x: &[f64]| (0..6).map(|j| (x[j] - b0.data()[j]) * wv[j]).sum::<f64>();
            let fb = |x: &[f64]| (0..6).map(|j| (a0.data()[j] - x[j]) * wv[j]).sum::<f64>();
            let na = central_difference(fa, a0.data(), i, 1e-5);
            let nb = central_difference(fb, b0.data(), i, 1e-5);
            assert!(rel_error(g.wrt(a).data()[i], na) < 1e-8);
            assert!(rel_error(g.wrt(b).data()[i], nb) < 1e-8);
            assert!((g.wrt(a).data()[i] - wv[i]).abs() < 1e-15);
            assert!((g.wrt(b).data()[i] + wv[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcast_over_trailing_axes() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(Tensor::vector(vec![10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).data(), &[2.0, 2.0, 2.0]);
        let bad = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.add(a, bad), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_values_and_errors() {
        let mut tape = Tape::new();
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = tape.matmul(id, m).unwrap();
        assert_eq!(tape.value(r).data(), tape.value(m).data());
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let r = tape.matmul(m, ones).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 7.0]);
        let bad = tape.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        assert!(tape.matmul(m, bad).is_err());
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a0 = t(&[3, 4], &lcg(4, 12));
        let b0 = t(&[4, 2], &lcg(5, 8));
        let w = t(&[3, 2], &lcg(6, 6));
        let bb = b0.clone();
        let ww = w.clone();
        let e = check_unary(
            a0.clone(),
            move |tp, a| {
                let b = tp.constant(bb.clone());
                let c = tp.matmul(a, b).unwrap();
                let wv = tp.constant(ww.clone());
                let cw = tp.mul(c, wv).unwrap();
                tp.sum(cw)
            },
            1e-6,
        );
        assert!(e <= 1e-6);
        let aa = a0.clone();
        check_unary(
            b0,
            move |tp, b| {
                let a = tp.constant(aa.clone());
                let c = tp.matmul(a, b).unwrap();
                let wv = tp.constant(w.clone());
                let cw = tp.mul(c, wv).unwrap();
                tp.sum(cw)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_sum_of_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 4.0);
    }

    #[test]
    fn conv_1x1_is_per_pixel_linear_map() {
        let input = t(&[1, 3, 2, 2], &lcg(7, 12));
        let w = [0.5, -1.0, 2.0];
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let k = tape.constant(t(&[1, 3, 1, 1], &w));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        for p in 0..4 {
            let expect: f64 = (0..3).map(|c| w[c] * input.data()[c * 4 + p]).sum();
            assert!((tape.value(y).data()[p] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_rejects_input_smaller_than_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(x, k, 1, 1).is_err());
        assert!(tape.conv2d(x, k, 1, 2).is_ok());
    }

    #[test]
    fn conv_strided_gradients_match_finite_differences() {
        let input = t(&[2, 3, 8, 8], &lcg(8, 384));
        let kernel = t(&[4, 3, 3, 3], &lcg(9, 108));
        let w = t(&[2, 4, 4, 4], &lcg(10, 128));
        let mut tape = Tape::new();
        let x = tape.param(input.clone());
        let k = tape.param(kernel.clone());
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 4]);

        let (kk, ww) = (kernel.clone(), w.clone());
        check_unary(
            input.clone(),
            move |tp, x| {
                let k = tp.constant(kk.clone());
                let y = tp.conv2d(x, k, 2, 1).unwrap();
                let wv = tp.constant(ww.clone());
                let yw = tp.mul(y, wv).unwrap();
                tp.sum(yw)
            },
            1e-6,
        );
        check_unary(
            kernel,
            move |tp, k| {
                let x = tp.constant(input.clone());
                let y = tp.conv2d(x, k, 2, 1).unwrap();
                let wv = tp.constant(w.clone());
                let yw = tp.mul(y, wv).unwrap();
                tp.sum(yw)
            },
            1e-6,
        );
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 2.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_after_conv_matches_finite_differences_away_from_kinks() {
        use crate::tensor::gradcheck::{finite_diff_check, FdConfig};
        let input = t(&[1, 2, 6, 6], &lcg(11, 72));
        let kernel = t(&[3, 2, 3, 3], &lcg(12, 54));
        let w = lcg(13, 108);
        let eval = |k: &[f64]| {
            let mut tp = Tape::new();
            let x = tp.constant(input.clone());
            let kv = tp.param(t(&[3, 2, 3, 3], k));
            let y = tp.conv2d(x, kv, 1, 1).unwrap();
            let r = tp.relu(y);
            let wv = tp.constant(t(&[1, 3, 6, 6], &w));
            let rw = tp.mul(r, wv).unwrap();
            let l = tp.sum(rw);
            let g = tp.backward(l).unwrap().wrt(kv);
            (tp.value(l).item(), g.into_data(), tp.relu_inputs())
        };
        let (_, analytic, _) = eval(kernel.data());
        let report = finite_diff_check(
            |p| {
                let (v, _, probe) = eval(p);
                (v, probe)
            },
            kernel.data(),
            &analytic,
            &FdConfig::default(),
        );
        assert!(report.checked > 40);
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let g = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0]));
        let y = tape.batch_norm(x, g, b, 1e-12).unwrap();
        let expect = (1.0 - 2.0) / (1.0f64 + 1e-12).sqrt();
        assert!((tape.value(y).data()[0] - expect).abs() < 1e-12);
        assert!((tape.value(y).data()[1] + expect).abs() < 1e-12);

        let x = tape.constant(t(&[3, 2], &lcg(14, 6)));
        let g0 = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let b0 = tape.constant(Tensor::vector(vec![0.25, -0.5]));
        let y = tape.batch_norm(x, g0, b0, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -0.5, 0.25, -0.5, 0.25, -0.5]);

        let single = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        assert!(tape.batch_norm(single, g0, b0, 1e-5).is_err());
    }

    #[test]
    fn batch_norm_output_statistics() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[5, 3], &lcg(15, 15)));
        let gamma = [0.5, 2.0, -1.5];
        let beta = [0.1, -0.2, 3.0];
        let g = tape.constant(Tensor::vector(gamma.to_vec()));
        let b = tape.constant(Tensor::vector(beta.to_vec()));
        let y = tape.batch_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        for f in 0..3 {
            let col: Vec<f64> = (0..5).map(|r| d[r * 3 + f]).collect();
            let mean = col.iter().sum::<f64>() / 5.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!((mean - beta[f]).abs() < 1e-9);
            assert!((var - gamma[f] * gamma[f]).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let w = t(&[4, 3], &lcg(16, 12));
        check_unary(
            t(&[4, 3], &lcg(17, 12)),
            move |tp, x| {
                let g = tp.constant(Tensor::vector(vec![1.2, -0.7, 0.4]));
                let b = tp.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
                let y = tp.batch_norm(x, g, b, 1e-5).unwrap();
                let wv = tp.constant(w.clone());
                let yw = tp.mul(y, wv).unwrap();
                let sq = tp.mul(yw, yw).unwrap();
                tp.sum(sq)
            },
            1e-6,
        );
        let w2 = t(&[2, 2, 2, 2], &lcg(18, 16));
        check_unary(
            t(&[2, 2, 2, 2], &lcg(19, 16)),
            move |tp, x| {
                let g = tp.constant(Tensor::vector(vec![0.9, 1.3]));
                let b = tp.constant(Tensor::vector(vec![0.0, 0.5]));
                let y = tp.batch_norm2d(x, g, b, 1e-5).unwrap();
                let wv = tp.constant(w2.clone());
                let yw = tp.mul(y, wv).unwrap();
                let sq = tp.mul(yw, yw).unwrap();
                tp.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample_nearest2x(x).unwrap();
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(tape.value(y).data(), &expect);
        let total: f64 = tape.value(y).data().iter().sum();
        assert_eq!(total, 4.0 * 10.0);
        let w = t(&[1, 2, 6, 6], &lcg(20, 72));
        check_unary(
            t(&[1, 2, 3, 3], &lcg(21, 18)),
            move |tp, x| {
                let y = tp.upsample_nearest2x(x).unwrap();
                let wv = tp.constant(w.clone());
                let yw = tp.mul(y, wv).unwrap();
                tp.mean(yw)
            },
            1e-6,
        );
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::new();
        let mut cos = |a: Vec<f64>, b: Vec<f64>| {
            let a = tape.constant(Tensor::vector(a));
            let b = tape.constant(Tensor::vector(b));
            let c = tape.cosine_similarity(a, b, 1e-8).unwrap();
            tape.value(c).item()
        };
        assert_eq!(cos(vec![1.0, 0.0], vec![0.0, 1.0]), 0.0);
        assert!((cos(vec![1.0, 2.0], vec![2.0, 4.0]) - 1.0).abs() < 1e-6);
        assert!((cos(vec![1.0, 0.0], vec![1.0, 1.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        // zero vector is guarded by eps
        assert_eq!(cos(vec![0.0, 0.0], vec![1.0, 1.0]), 0.0);
    }

    #[test]
    fn cosine_gradients_match_finite_differences() {
        let other = t(&[3, 4], &lcg(22, 12));
        check_unary(
            t(&[3, 4], &lcg(23, 12)),
            move |tp, a| {
                let b = tp.constant(other.clone());
                let c = tp.cosine_rows(a, b, 1e-8).unwrap();
                let w = tp.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
                let cw = tp.mul(c, w).unwrap();
                tp.sum(cw)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(Tensor::vector(vec![7.5, 7.5, 7.5]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![1.0f64.ln(), 3.0f64.ln()]));
        let y = tape.softmax(x).unwrap();
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-15);
        let w = Tensor::vector(lcg(24, 5));
        check_unary(
            Tensor::vector(lcg(25, 5)),
            move |tp, x| {
                let y = tp.softmax(x).unwrap();
                let wv = tp.constant(w.clone());
                let yw = tp.mul(y, wv).unwrap();
                tp.sum(yw)
            },
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let ce = tape.cross_entropy_2class(l, &[0, 1, 1, 0]).unwrap();
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(tape.cross_entropy_2class(l, &[0, 2, 1, 0]).is_err());

        // increasingly confident correct logits drive the loss towards zero
        let mut last = f64::INFINITY;
        for s in [0.0, 1.0, 4.0, 16.0, 64.0] {
            let l = tape.constant(t(&[1, 2, 1, 1], &[0.0, s]));
            let ce = tape.cross_entropy_2class(l, &[1]).unwrap();
            let v = tape.value(ce).item();
            assert!(v > 0.0 && v < last);
            last = v;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let logits = lcg(26, 8);
        let target = [1u8, 0, 0, 1];
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2, 2, 2], &logits));
        let ce = tape.cross_entropy_2class(l, &target).unwrap();
        // scalar re-implementation: -log(e^{l_t} / (e^{l_0} + e^{l_1}))
        let mut expect = 0.0;
        for p in 0..4 {
            let (l0, l1) = (logits[p], logits[4 + p]);
            let lt = if target[p] == 1 { l1 } else { l0 };
            expect += -(lt.exp() / (l0.exp() + l1.exp())).ln();
        }
        expect /= 4.0;
        assert!((tape.value(ce).item() - expect).abs() < 1e-14);
        check_unary(
            t(&[1, 2, 2, 2], &logits),
            move |tp, x| tp.cross_entropy_2class(x, &target).unwrap(),
            1e-6,
        );
    }

    #[test]
    fn stop_gradient_is_identity_without_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(lcg(27, 4)));
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s).data(), tape.value(x).data());
        let total = tape.sum(s);
        let g = tape.backward(total).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.wrt(x).data(), &[0.0; 4]);
    }

    #[test]
    fn gather_indexes_and_scatters() {
        let mut data = vec![0.0; 3 * 2 * 2];
        // one-hot at (r=1, c=0): vector [1, 2, 3]
        for ch in 0..3 {
            data[ch * 4 + 2] = (ch + 1) as f64;
        }
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 3, 2, 2], &data));
        let g = tape.gather(x, &[(0, 1, 0), (0, 1, 0), (0, 0, 1)]).unwrap();
        assert_eq!(tape.shape(g), &[3, 3]);
        assert_eq!(&tape.value(g).data()[0..3], &[1.0, 2.0, 3.0]);
        assert_eq!(&tape.value(g).data()[3..6], &[1.0, 2.0, 3.0]);
        let s = tape.sum(g);
        let grad = tape.backward(s).unwrap().wrt(x);
        for ch in 0..3 {
            assert_eq!(grad.data()[ch * 4 + 2], 2.0);
            assert_eq!(grad.data()[ch * 4 + 1], 1.0);
            assert_eq!(grad.data()[ch * 4], 0.0);
        }
        assert!(tape.gather(x, &[(0, 2, 0)]).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 6.0);

        let c = tape.constant(Tensor::scalar(2.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(x).item(), 0.0);

        let v = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let w = Tensor::vector(lcg(28, 5));
        check_unary(
            t(&[5, 2], &lcg(29, 10)),
            move |tp, x| {
                let a = tp.slice_rows(x, 0, 2).unwrap();
                let b = tp.slice_rows(x, 2, 3).unwrap();
                let c = tp.concat(&[b, a]).unwrap();
                let sq = tp.mul(c, c).unwrap();
                let r = tp.reshape(sq, &[10]).unwrap();
                let s = tp.slice_rows(r, 0, 5).unwrap();
                let wv = tp.constant(w.clone());
                let sw = tp.mul(s, wv).unwrap();
                tp.sum(sw)
            },
            1e-6,
        );
    }
}

//! Dense tensors with reverse-mode differentiation.
//!
//! A `Tape` records every operation of a forward pass; `backward` walks the
//! recorded nodes in reverse, accumulating gradients. The op set is exactly
//! what the deformation model needs: matmul, elementwise arithmetic, GELU,
//! row softmax, layer normalization, 2D convolution, nearest upsampling,
//! reductions, concatenation, slicing, and row repetition. Accumulation
//! order is fixed, so identical inputs give bit-identical outputs and
//! gradients. f32 is the training precision; f64 is used by the
//! finite-difference gradient checks.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {a:?} vs {b:?}")]
    ShapeMismatch { op: &'static str, a: Vec<usize>, b: Vec<usize> },
    #[error("{op}: expected rank-{rank} tensor, got shape {shape:?}")]
    BadRank { op: &'static str, rank: usize, shape: Vec<usize> },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("conv2d: (in + 2*pad - k) = {0} is not divisible by stride {1}")]
    NonIntegralConvOutput(usize, usize),
    #[error("reshape: cannot view {from:?} as {to:?}")]
    BadReshape { from: Vec<usize>, to: Vec<usize> },
}

/// Floating scalar used by tensors; f32 for training, f64 for checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + Default
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::ZERO; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a rank-2 tensor at (row, col).
    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn scalar_value(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRowBroadcast(NodeId, NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    UpsampleNearest(NodeId, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    SqrtElem(NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    Reshape(NodeId),
    Transpose(NodeId),
    RepeatRows(NodeId, usize),
    MeanHW(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Per-node gradients returned by `Tape::backward`.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c0 * (T::ONE + three * c1 * x * x)
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: false }
    }

    /// Enables NaN/Inf detection after every recorded op.
    pub fn with_checking() -> Self {
        Self { nodes: Vec::new(), check_finite: true }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, name: &'static str) -> Result<NodeId, TensorError> {
        if self.check_finite && value.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Introduces an input tensor (gradient tracked, not a parameter).
    pub fn var(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    /// Introduces a constant; identical to `var` except in intent. Gradients
    /// still accumulate on it but are simply unused (and it cuts no edges).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.var(value)
    }

    /// Introduces a parameter node tied to `store_index` in a `ParamStore`.
    pub fn param(&mut self, store_index: usize, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Param(store_index) });
        NodeId(self.nodes.len() - 1)
    }

    /// Re-introduces a node's value detached from its history.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.var(v)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn rank2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(TensorError::BadRank { op, rank: 2, shape: s.to_vec() });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k1) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k1 != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k1, n);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        let mut out = self.nodes[a.0].value.clone();
        for (o, &v) in out.data.iter_mut().zip(&self.nodes[b.0].value.data) {
            *o += v;
        }
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        let mut out = self.nodes[a.0].value.clone();
        for (o, &v) in out.data.iter_mut().zip(&self.nodes[b.0].value.data) {
            *o = *o - v;
        }
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul_elem",
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        let mut out = self.nodes[a.0].value.clone();
        for (o, &v) in out.data.iter_mut().zip(&self.nodes[b.0].value.data) {
            *o = *o * v;
        }
        self.push(out, Op::MulElem(a, b), "mul_elem")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let f = T::from_f64(c);
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data.iter_mut() {
            *o = *o * f;
        }
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// Adds a 1 x c row vector to every row of an n x c matrix.
    pub fn add_row_broadcast(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (_, c) = self.rank2(mat, "add_row_broadcast")?;
        let (r1, c1) = self.rank2(row, "add_row_broadcast")?;
        if r1 != 1 || c1 != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                a: self.shape(mat).to_vec(),
                b: self.shape(row).to_vec(),
            });
        }
        let mut out = self.nodes[mat.0].value.clone();
        let rowv = &self.nodes[row.0].value.data;
        for chunk in out.data.chunks_mut(c) {
            for (o, &v) in chunk.iter_mut().zip(rowv) {
                *o += v;
            }
        }
        self.push(out, Op::AddRowBroadcast(mat, row), "add_row_broadcast")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data.iter_mut() {
            *o = gelu_scalar(*o);
        }
        self.push(out, Op::Gelu(a), "gelu")
    }

    /// Numerically-stable per-row softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (_, c) = self.rank2(a, "softmax_rows")?;
        let mut out = self.nodes[a.0].value.clone();
        for row in out.data.chunks_mut(c) {
            let mut maxv = row[0];
            for &v in row.iter() {
                maxv = maxv.maximum(v);
            }
            let mut sum = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - maxv).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Per-row mean/variance normalization with affine gain and bias.
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let (n, c) = self.rank2(x, "layernorm")?;
        let gs = self.shape(gain).to_vec();
        let bs = self.shape(bias).to_vec();
        if gs != [1, c] || bs != [1, c] {
            return Err(TensorError::ShapeMismatch { op: "layernorm", a: gs, b: bs });
        }
        let epsv = T::from_f64(eps);
        let cn = T::from_f64(c as f64);
        let mut out = Tensor::zeros(&[n, c]);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value.data;
        let bv = &self.nodes[bias.0].value.data;
        for r in 0..n {
            let row = &xv.data[r * c..(r + 1) * c];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean / cn;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var / cn;
            let inv = T::ONE / (var + epsv).sqrt();
            for j in 0..c {
                out.data[r * c + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, eps }, "layernorm")
    }

    /// Cross-correlation with per-output-channel bias.
    /// x: [c_in, h, w], w: [c_out, c_in, kh, kw], b: [c_out].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::BadRank { op: "conv2d input", rank: 3, shape: xs });
        }
        if ws.len() != 4 || ws[1] != xs[0] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", a: xs, b: ws });
        }
        let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if self.shape(b) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                a: self.shape(b).to_vec(),
                b: vec![cout],
            });
        }
        let span_h = h + 2 * pad - kh;
        let span_w = wdt + 2 * pad - kw;
        if span_h % stride != 0 {
            return Err(TensorError::NonIntegralConvOutput(span_h, stride));
        }
        if span_w % stride != 0 {
            return Err(TensorError::NonIntegralConvOutput(span_w, stride));
        }
        let oh = span_h / stride + 1;
        let ow = span_w / stride + 1;
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bv[o];
                    for ci in 0..cin {
                        for u in 0..kh {
                            let y = (i * stride + u) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let xx = (j * stride + v) as isize - pad as isize;
                                if xx < 0 || xx >= wdt as isize {
                                    continue;
                                }
                                acc += xv[(ci * h + y as usize) * wdt + xx as usize]
                                    * wv[((o * cin + ci) * kh + u) * kw + v];
                            }
                        }
                    }
                    out.data[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, "conv2d")
    }

    /// Nearest-neighbor spatial upsampling of a [c, h, w] tensor.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::BadRank { op: "upsample_nearest", rank: 3, shape: xs });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h * factor, w * factor);
        let xv = &self.nodes[x.0].value.data;
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out.data[(ci * oh + i) * ow + j] = xv[(ci * h + i / factor) * w + j / factor];
                }
            }
        }
        self.push(out, Op::UpsampleNearest(x, factor), "upsample_nearest")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let mut acc = T::ZERO;
        for &v in &self.nodes[x.0].value.data {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll(x), "sum_all")
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.nodes[x.0].value.numel();
        let mut acc = T::ZERO;
        for &v in &self.nodes[x.0].value.data {
            acc += v;
        }
        let mean = acc / T::from_f64(n as f64);
        self.push(Tensor::scalar(mean), Op::MeanAll(x), "mean_all")
    }

    pub fn sqrt_elem(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data.iter_mut() {
            *v = v.sqrt();
        }
        self.push(out, Op::SqrtElem(x), "sqrt")
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (n1, c1) = self.rank2(a, "concat_cols")?;
        let (n2, c2) = self.rank2(b, "concat_cols")?;
        if n1 != n2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = Tensor::zeros(&[n1, c1 + c2]);
        for r in 0..n1 {
            out.data[r * (c1 + c2)..r * (c1 + c2) + c1].copy_from_slice(&av[r * c1..(r + 1) * c1]);
            out.data[r * (c1 + c2) + c1..(r + 1) * (c1 + c2)]
                .copy_from_slice(&bv[r * c2..(r + 1) * c2]);
        }
        self.push(out, Op::ConcatCols(a, b), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty());
        let (_, c) = self.rank2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, cp) = self.rank2(p, "concat_rows")?;
            if cp != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    a: self.shape(parts[0]).to_vec(),
                    b: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        self.push(Tensor::from_vec(&[rows, c], data), Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (n, c) = self.rank2(x, "slice_rows")?;
        assert!(start + len <= n, "slice_rows out of range");
        let xv = &self.nodes[x.0].value.data;
        let data = xv[start * c..(start + len) * c].to_vec();
        self.push(Tensor::from_vec(&[len, c], data), Op::SliceRows { x, start, len }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (n, c) = self.rank2(x, "slice_cols")?;
        assert!(start + len <= c, "slice_cols out of range");
        let xv = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&xv[r * c + start..r * c + start + len]);
        }
        self.push(Tensor::from_vec(&[n, len], data), Op::SliceCols { x, start, len }, "slice_cols")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let from = self.shape(x).to_vec();
        if from.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(TensorError::BadReshape { from, to: shape.to_vec() });
        }
        let data = self.nodes[x.0].value.data.clone();
        self.push(Tensor::from_vec(shape, data), Op::Reshape(x), "reshape")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (n, c) = self.rank2(x, "transpose")?;
        let xv = &self.nodes[x.0].value.data;
        let mut out = Tensor::zeros(&[c, n]);
        for r in 0..n {
            for j in 0..c {
                out.data[j * n + r] = xv[r * c + j];
            }
        }
        self.push(out, Op::Transpose(x), "transpose")
    }

    /// Repeats a 1 x c row n times into an n x c matrix.
    pub fn repeat_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.rank2(x, "repeat_rows")?;
        if r != 1 {
            return Err(TensorError::BadRank { op: "repeat_rows", rank: 2, shape: self.shape(x).to_vec() });
        }
        let xv = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(xv);
        }
        self.push(Tensor::from_vec(&[n, c], data), Op::RepeatRows(x, n), "repeat_rows")
    }

    /// Spatial mean of a [c, h, w] tensor into [1, c].
    pub fn mean_hw(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::BadRank { op: "mean_hw", rank: 3, shape: xs });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = &self.nodes[x.0].value.data;
        let mut out = Tensor::zeros(&[1, c]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        for ci in 0..c {
            let mut acc = T::ZERO;
            for &v in &xv[ci * h * w..(ci + 1) * h * w] {
                acc += v;
            }
            out.data[ci] = acc * inv;
        }
        self.push(out, Op::MeanHW(x), "mean_hw")
    }

    /// Reverse pass from a scalar loss; returns per-node gradients scaled by
    /// `seed` (1 for a plain gradient, 1/batch for averaged batch losses).
    pub fn backward(&self, loss: NodeId, seed: T) -> Result<Gradients<T>, TensorError> {
        let loss_shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.clone()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(loss_shape, vec![seed]));
        for idx in (0..=loss.0).rev() {
            let Some(g_out) = grads[idx].take() else { continue };
            self.backward_one(idx, &g_out, &mut grads);
            grads[idx] = Some(g_out);
        }
        if self.check_finite {
            for (i, g) in grads.iter().enumerate() {
                if let Some(g) = g {
                    if g.data.iter().any(|v| !v.is_finite()) {
                        let _ = i;
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_one(&self, idx: usize, g_out: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = bv.shape[1];
                // dA = dC . B^T
                let mut da = Tensor::zeros(&[m, k]);
                for i in 0..m {
                    for j in 0..n {
                        let g = g_out.data[i * n + j];
                        if g.to_f64() == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            da.data[i * k + kk] += g * bv.data[kk * n + j];
                        }
                    }
                }
                Self::accum(grads, *a, da);
                // dB = A^T . dC
                let mut db = Tensor::zeros(&[k, n]);
                for i in 0..m {
                    for kk in 0..k {
                        let aik = av.data[i * k + kk];
                        if aik.to_f64() == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db.data[kk * n + j] += aik * g_out.data[i * n + j];
                        }
                    }
                }
                Self::accum(grads, *b, db);
            }
            Op::Add(a, b) => {
                Self::accum(grads, *a, g_out.clone());
                Self::accum(grads, *b, g_out.clone());
            }
            Op::Sub(a, b) => {
                Self::accum(grads, *a, g_out.clone());
                let mut neg = g_out.clone();
                for v in neg.data.iter_mut() {
                    *v = -*v;
                }
                Self::accum(grads, *b, neg);
            }
            Op::MulElem(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let mut da = g_out.clone();
                for (v, &w) in da.data.iter_mut().zip(&bv.data) {
                    *v = *v * w;
                }
                Self::accum(grads, *a, da);
                let mut db = g_out.clone();
                for (v, &w) in db.data.iter_mut().zip(&av.data) {
                    *v = *v * w;
                }
                Self::accum(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let f = T::from_f64(*c);
                let mut da = g_out.clone();
                for v in da.data.iter_mut() {
                    *v = *v * f;
                }
                Self::accum(grads, *a, da);
            }
            Op::AddRowBroadcast(mat, row) => {
                Self::accum(grads, *mat, g_out.clone());
                let c = self.nodes[row.0].value.shape[1];
                let mut drow = Tensor::zeros(&[1, c]);
                for chunk in g_out.data.chunks(c) {
                    for (o, &v) in drow.data.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                Self::accum(grads, *row, drow);
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                let mut da = g_out.clone();
                for (v, &x) in da.data.iter_mut().zip(&av.data) {
                    *v = *v * gelu_grad_scalar(x);
                }
                Self::accum(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let c = y.shape[1];
                let mut da = Tensor::zeros(&y.shape);
                for r in 0..y.shape[0] {
                    let yr = &y.data[r * c..(r + 1) * c];
                    let gr = &g_out.data[r * c..(r + 1) * c];
                    let mut dot = T::ZERO;
                    for j in 0..c {
                        dot += yr[j] * gr[j];
                    }
                    for j in 0..c {
                        da.data[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accum(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value.data;
                let (n, c) = (xv.shape[0], xv.shape[1]);
                let cn = T::from_f64(c as f64);
                let epsv = T::from_f64(*eps);
                let mut dx = Tensor::zeros(&[n, c]);
                let mut dg = Tensor::zeros(&[1, c]);
                let mut db = Tensor::zeros(&[1, c]);
                for r in 0..n {
                    let row = &xv.data[r * c..(r + 1) * c];
                    let gr = &g_out.data[r * c..(r + 1) * c];
                    let mut mean = T::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean / cn;
                    let mut var = T::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var / cn;
                    let inv = T::ONE / (var + epsv).sqrt();
                    // xhat, then the two projection terms of the LN jacobian
                    let mut sum_gdy = T::ZERO;
                    let mut sum_gdy_xhat = T::ZERO;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let gdy = gv[j] * gr[j];
                        sum_gdy += gdy;
                        sum_gdy_xhat += gdy * xhat;
                        dg.data[j] += gr[j] * xhat;
                        db.data[j] += gr[j];
                    }
                    let m1 = sum_gdy / cn;
                    let m2 = sum_gdy_xhat / cn;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        dx.data[r * c + j] = (gv[j] * gr[j] - m1 - xhat * m2) * inv;
                    }
                }
                Self::accum(grads, *x, dx);
                Self::accum(grads, *gain, dg);
                Self::accum(grads, *bias, db);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (cin, h, wdt) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let (cout, kh, kw) = (wv.shape[0], wv.shape[2], wv.shape[3]);
                let (oh, ow) = (g_out.shape[1], g_out.shape[2]);
                let mut dx = Tensor::zeros(&xv.shape);
                let mut dw = Tensor::zeros(&wv.shape);
                let mut db = Tensor::zeros(&[cout]);
                for o in 0..cout {
                    for i in 0..oh {
                        for j in 0..ow {
                            let g = g_out.data[(o * oh + i) * ow + j];
                            if g.to_f64() == 0.0 {
                                continue;
                            }
                            db.data[o] += g;
                            for ci in 0..cin {
                                for u in 0..kh {
                                    let y = (i * stride + u) as isize - *pad as isize;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for v in 0..kw {
                                        let xx = (j * stride + v) as isize - *pad as isize;
                                        if xx < 0 || xx >= wdt as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + y as usize) * wdt + xx as usize;
                                        let wi = ((o * cin + ci) * kh + u) * kw + v;
                                        dx.data[xi] += g * wv.data[wi];
                                        dw.data[wi] += g * xv.data[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accum(grads, *x, dx);
                Self::accum(grads, *w, dw);
                Self::accum(grads, *b, db);
            }
            Op::UpsampleNearest(x, factor) => {
                let xs = &self.nodes[x.0].value.shape;
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = Tensor::zeros(xs);
                for ci in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            dx.data[(ci * h + i / factor) * w + j / factor] +=
                                g_out.data[(ci * oh + i) * ow + j];
                        }
                    }
                }
                Self::accum(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let g = g_out.data[0];
                let mut dx = Tensor::zeros(&self.nodes[x.0].value.shape);
                for v in dx.data.iter_mut() {
                    *v = g;
                }
                Self::accum(grads, *x, dx);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel();
                let g = g_out.data[0] / T::from_f64(n as f64);
                let mut dx = Tensor::zeros(&self.nodes[x.0].value.shape);
                for v in dx.data.iter_mut() {
                    *v = g;
                }
                Self::accum(grads, *x, dx);
            }
            Op::SqrtElem(x) => {
                let y = &self.nodes[idx].value;
                let half = T::from_f64(0.5);
                let mut dx = g_out.clone();
                for (v, &yv) in dx.data.iter_mut().zip(&y.data) {
                    *v = *v * half / yv;
                }
                Self::accum(grads, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let c1 = self.nodes[a.0].value.shape[1];
                let c2 = self.nodes[b.0].value.shape[1];
                let n = self.nodes[a.0].value.shape[0];
                let mut da = Tensor::zeros(&[n, c1]);
                let mut db = Tensor::zeros(&[n, c2]);
                for r in 0..n {
                    da.data[r * c1..(r + 1) * c1]
                        .copy_from_slice(&g_out.data[r * (c1 + c2)..r * (c1 + c2) + c1]);
                    db.data[r * c2..(r + 1) * c2]
                        .copy_from_slice(&g_out.data[r * (c1 + c2) + c1..(r + 1) * (c1 + c2)]);
                }
                Self::accum(grads, *a, da);
                Self::accum(grads, *b, db);
            }
            Op::ConcatRows(parts) => {
                let c = self.nodes[parts[0].0].value.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let r = self.nodes[p.0].value.shape[0];
                    let data = g_out.data[offset * c..(offset + r) * c].to_vec();
                    Self::accum(grads, p, Tensor::from_vec(&[r, c], data));
                    offset += r;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (n, c) = (self.nodes[x.0].value.shape[0], self.nodes[x.0].value.shape[1]);
                let mut dx = Tensor::zeros(&[n, c]);
                dx.data[start * c..(start + len) * c].copy_from_slice(&g_out.data);
                Self::accum(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let (n, c) = (self.nodes[x.0].value.shape[0], self.nodes[x.0].value.shape[1]);
                let mut dx = Tensor::zeros(&[n, c]);
                for r in 0..n {
                    for j in 0..*len {
                        dx.data[r * c + start + j] = g_out.data[r * len + j];
                    }
                }
                Self::accum(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.shape.clone();
                Self::accum(grads, *x, Tensor::from_vec(&shape, g_out.data.clone()));
            }
            Op::Transpose(x) => {
                let (n, c) = (self.nodes[x.0].value.shape[0], self.nodes[x.0].value.shape[1]);
                let mut dx = Tensor::zeros(&[n, c]);
                for r in 0..n {
                    for j in 0..c {
                        dx.data[r * c + j] = g_out.data[j * n + r];
                    }
                }
                Self::accum(grads, *x, dx);
            }
            Op::RepeatRows(x, n) => {
                let c = self.nodes[x.0].value.shape[1];
                let mut dx = Tensor::zeros(&[1, c]);
                for r in 0..*n {
                    for j in 0..c {
                        dx.data[j] += g_out.data[r * c + j];
                    }
                }
                Self::accum(grads, *x, dx);
            }
            Op::MeanHW(x) => {
                let xs = &self.nodes[x.0].value.shape;
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut dx = Tensor::zeros(xs);
                for ci in 0..c {
                    let g = g_out.data[ci] * inv;
                    for v in dx.data[ci * h * w..(ci + 1) * h * w].iter_mut() {
                        *v = g;
                    }
                }
                Self::accum(grads, *x, dx);
            }
        }
    }

    /// Adds this tape's parameter-node gradients into the store accumulators.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut crate::model::ParamStore<T>) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pi) = node.op {
                if let Some(g) = &grads.grads[idx] {
                    store.add_grad(pi, g);
                }
            }
        }
    }
}

fn matmul_raw<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, m: usize, k: usize, n: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik.to_f64() == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// Maximum relative error between the analytic gradient of `f` (a scalar
/// function built on the tape) and central finite differences over every
/// coordinate of every input.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], h: f64) -> Result<f64, TensorError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let grads = tape.backward(out, T::ONE)?;

    let eval = |tensors: &[Tensor<T>]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|x| t.var(x.clone())).collect();
        let out = f(&mut t, &ids)?;
        Ok(t.value(out).scalar_value().to_f64())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let orig = work[i].data[k];
            work[i].data[k] = orig + T::from_f64(h);
            let fp = eval(&work)?;
            work[i].data[k] = orig - T::from_f64(h);
            let fm = eval(&work)?;
            work[i].data[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.of(ids[i]).map(|g| g.data[k].to_f64()).unwrap_or(0.0);
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], r: &mut ChaCha12Rng, scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect())
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut t: Tape<f64> = Tape::new();
        let eye = t.var(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let x = t.var(Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 2.0, 5.0]));
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.value(y).data, vec![3.0, -1.0, 2.0, 5.0]);

        let a = t.var(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.var(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.var(Tensor::zeros(&[2, 3]));
        let b = t.var(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_gradient() {
        let mut r = rng(1);
        let a = rand_tensor(&[3, 4], &mut r, 1.0);
        let b = rand_tensor(&[4, 2], &mut r, 1.0);
        let err = grad_check(
            |t, ids| {
                let c = t.matmul(ids[0], ids[1])?;
                let sq = t.mul_elem(c, c)?;
                t.sum_all(sq)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "matmul grad err {err}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]));
        let y = t.softmax_rows(x).unwrap();
        assert!((t.value(y).data[0] - 0.5).abs() < 1e-12);

        let big = t.var(Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]));
        let yb = t.softmax_rows(big).unwrap();
        assert!(t.value(yb).data.iter().all(|v| v.is_finite()));
        assert!((t.value(yb).data[0] - 1.0).abs() < 1e-12);
        assert!(t.value(yb).data[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(2);
        let x = rand_tensor(&[7, 9], &mut r, 5.0);
        let mut t = Tape::new();
        let id = t.var(x);
        let y = t.softmax_rows(id).unwrap();
        for row in t.value(y).data.chunks(9) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_gradient() {
        let mut r = rng(3);
        let x = rand_tensor(&[4, 5], &mut r, 2.0);
        let w = rand_tensor(&[4, 5], &mut r, 1.0);
        let err = grad_check(
            |t, ids| {
                let y = t.softmax_rows(ids[0])?;
                let wy = t.mul_elem(y, ids[1])?;
                t.sum_all(wy)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "softmax grad err {err}");
    }

    #[test]
    fn layernorm_constant_row_and_moments() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(Tensor::from_vec(&[1, 4], vec![5.0; 4]));
        let g = t.var(Tensor::from_vec(&[1, 4], vec![1.0; 4]));
        let b = t.var(Tensor::zeros(&[1, 4]));
        let y = t.layernorm(x, g, b, 1e-5).unwrap();
        for &v in &t.value(y).data {
            assert!(v.abs() < 1e-9);
        }

        let mut r = rng(4);
        let x2 = t.var(rand_tensor(&[3, 16], &mut r, 2.0));
        let g2 = t.var(Tensor::from_vec(&[1, 16], vec![1.0; 16]));
        let b2 = t.var(Tensor::zeros(&[1, 16]));
        let y2 = t.layernorm(x2, g2, b2, 1e-9).unwrap();
        for row in t.value(y2).data.chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layernorm_gradient() {
        let mut r = rng(5);
        let x = rand_tensor(&[3, 8], &mut r, 2.0);
        let g = rand_tensor(&[1, 8], &mut r, 1.0);
        let b = rand_tensor(&[1, 8], &mut r, 1.0);
        let w = rand_tensor(&[3, 8], &mut r, 1.0);
        let err = grad_check(
            |t, ids| {
                let y = t.layernorm(ids[0], ids[1], ids[2], 1e-5)?;
                let wy = t.mul_elem(y, ids[3])?;
                t.sum_all(wy)
            },
            &[x, g, b, w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "layernorm grad err {err}");
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()));
        let w = t.var(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]));
        let b = t.var(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.value(y).shape, vec![1, 3, 3]);
        assert_eq!(t.value(y).data, (1..=9).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn conv2d_all_ones() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(Tensor::from_vec(&[1, 5, 5], vec![1.0; 25]));
        let w = t.var(Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]));
        let b = t.var(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.value(y).shape, vec![1, 3, 3]);
        assert!(t.value(y).data.iter().all(|&v| (v - 9.0).abs() < 1e-12));
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(Tensor::zeros(&[1, 5, 5]));
        let w = t.var(Tensor::zeros(&[1, 1, 2, 2]));
        let b = t.var(Tensor::zeros(&[1]));
        assert!(matches!(
            t.conv2d(x, w, b, 2, 0),
            Err(TensorError::NonIntegralConvOutput(3, 2))
        ));
    }

    #[test]
    fn conv2d_gradient() {
        let mut r = rng(6);
        let x = rand_tensor(&[2, 8, 8], &mut r, 1.0);
        let w = rand_tensor(&[3, 2, 3, 3], &mut r, 0.5);
        let b = rand_tensor(&[3], &mut r, 0.5);
        let err = grad_check(
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                let sq = t.mul_elem(y, y)?;
                t.mean_all(sq)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "conv grad err {err}");
    }

    #[test]
    fn conv2d_strided_gradient() {
        let mut r = rng(7);
        let x = rand_tensor(&[1, 8, 6], &mut r, 1.0);
        let w = rand_tensor(&[2, 1, 4, 4], &mut r, 0.5);
        let b = rand_tensor(&[2], &mut r, 0.5);
        let err = grad_check(
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
                let sq = t.mul_elem(y, y)?;
                t.sum_all(sq)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "strided conv grad err {err}");
    }

    #[test]
    fn upsample_block_replication() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y1 = t.upsample_nearest(x, 1).unwrap();
        assert_eq!(t.value(y1).data, vec![1.0, 2.0, 3.0, 4.0]);
        let y2 = t.upsample_nearest(x, 2).unwrap();
        assert_eq!(t.value(y2).shape, vec![1, 4, 4]);
        assert_eq!(
            t.value(y2).data,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn upsample_gradient() {
        let mut r = rng(8);
        let x = rand_tensor(&[2, 3, 3], &mut r, 1.0);
        let w = rand_tensor(&[2, 6, 6], &mut r, 1.0);
        let err = grad_check(
            |t, ids| {
                let y = t.upsample_nearest(ids[0], 2)?;
                let wy = t.mul_elem(y, ids[1])?;
                t.sum_all(wy)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "upsample grad err {err}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t: Tape<f64> = Tape::new();
        let w = t.var(Tensor::from_vec(&[1, 3], vec![2.0, -1.0, 0.5]));
        let s = t.sum_all(w).unwrap();
        let g = t.backward(s, 1.0).unwrap();
        assert_eq!(g.of(w).unwrap().data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_closed_form() {
        // loss = ||A.x||^2, grad_x = 2 A^T A x
        let mut r = rng(9);
        let a = rand_tensor(&[4, 3], &mut r, 1.0);
        let x = rand_tensor(&[3, 1], &mut r, 1.0);
        let mut t = Tape::new();
        let aid = t.var(a.clone());
        let xid = t.var(x.clone());
        let ax = t.matmul(aid, xid).unwrap();
        let sq = t.mul_elem(ax, ax).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let g = t.backward(loss, 1.0).unwrap();
        let gx = g.of(xid).unwrap();
        for i in 0..3 {
            let mut want = 0.0;
            for j in 0..4 {
                let mut axj = 0.0;
                for k in 0..3 {
                    axj += a.at2(j, k) * x.data[k];
                }
                want += 2.0 * a.at2(j, i) * axj;
            }
            assert!((gx.data[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x, 1.0), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn composite_two_layer_net_gradient() {
        let mut r = rng(10);
        let x = rand_tensor(&[4, 6], &mut r, 1.0);
        let w1 = rand_tensor(&[6, 8], &mut r, 0.5);
        let b1 = rand_tensor(&[1, 8], &mut r, 0.5);
        let w2 = rand_tensor(&[8, 3], &mut r, 0.5);
        let b2 = rand_tensor(&[1, 3], &mut r, 0.5);
        let err = grad_check(
            |t, ids| {
                let h = t.matmul(ids[0], ids[1])?;
                let h = t.add_row_broadcast(h, ids[2])?;
                let h = t.gelu(h)?;
                let o = t.matmul(h, ids[3])?;
                let o = t.add_row_broadcast(o, ids[4])?;
                let sq = t.mul_elem(o, o)?;
                t.mean_all(sq)
            },
            &[x, w1, b1, w2, b2],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "2-layer net grad err {err}");
    }

    #[test]
    fn structural_ops_gradients() {
        let mut r = rng(11);
        let x = rand_tensor(&[6, 4], &mut r, 1.0);
        let y = rand_tensor(&[6, 3], &mut r, 1.0);
        let w = rand_tensor(&[4, 7], &mut r, 1.0);
        let err = grad_check(
            |t, ids| {
                let cat = t.concat_cols(ids[0], ids[1])?; // 6x7
                let catt = t.transpose(cat)?; // 7x6
                let sl = t.slice_rows(catt, 1, 4)?; // 4x6
                let sl2 = t.slice_cols(sl, 0, 4)?; // 4x4
                let first = t.slice_rows(sl2, 0, 1)?; // 1x4
                let rep = t.repeat_rows(first, 5)?; // 5x4
                let resh = t.reshape(rep, &[4, 5])?;
                let prod = t.matmul(resh, ids[2])?; // wrong dims? 4x5 . 4x7 -> mismatch
                t.sum_all(prod)
            },
            &[x.clone(), y.clone(), w.clone()],
            1e-5,
        );
        // the deliberate mismatch above must error, not panic
        assert!(err.is_err());

        let err = grad_check(
            |t, ids| {
                let cat = t.concat_cols(ids[0], ids[1])?; // 6x7
                let sl = t.slice_rows(cat, 1, 4)?; // 4x7
                let slc = t.slice_cols(sl, 2, 4)?; // 4x4
                let first = t.slice_rows(slc, 0, 1)?; // 1x4
                let rep = t.repeat_rows(first, 3)?; // 3x4
                let prod = t.matmul(rep, ids[2])?; // 3x7
                let tt = t.transpose(prod)?; // 7x3
                let resh = t.reshape(tt, &[3, 7])?;
                let sq = t.mul_elem(resh, resh)?;
                let parts = [t.slice_rows(sq, 0, 1).unwrap(), t.slice_rows(sq, 1, 2).unwrap()];
                let cat2 = t.concat_rows(&parts)?;
                t.mean_all(cat2)
            },
            &[x, y, w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "structural ops grad err {err}");
    }

    #[test]
    fn scalar_chain_gradient() {
        let mut r = rng(12);
        let x = rand_tensor(&[5, 3], &mut r, 1.0);
        let y = rand_tensor(&[5, 3], &mut r, 1.0);
        let err = grad_check(
            |t, ids| {
                let d = t.sub(ids[0], ids[1])?;
                let sq = t.mul_elem(d, d)?;
                let s = t.sum_all(sq)?;
                let rt = t.sqrt_elem(s)?;
                t.scale(rt, 0.37)
            },
            &[x, y],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "scalar chain grad err {err}");
    }

    #[test]
    fn mean_hw_and_gelu_gradient() {
        let mut r = rng(13);
        let x = rand_tensor(&[3, 4, 5], &mut r, 1.5);
        let w = rand_tensor(&[1, 3], &mut r, 1.0);
        let err = grad_check(
            |t, ids| {
                let g = t.gelu(ids[0])?;
                let m = t.mean_hw(g)?;
                let wy = t.mul_elem(m, ids[1])?;
                t.sum_all(wy)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "mean_hw/gelu grad err {err}");
    }

    #[test]
    fn linear_function_gradient_exact() {
        let mut r = rng(14);
        let x = rand_tensor(&[4, 4], &mut r, 1.0);
        let err = grad_check(
            |t, ids| {
                let s = t.scale(ids[0], 3.5)?;
                t.sum_all(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "linear grad err {err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(Tensor::from_vec(&[1, 2], vec![2.0, 3.0]));
        let d = t.detach(x);
        let sq = t.mul_elem(d, d).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let g = t.backward(loss, 1.0).unwrap();
        assert!(g.of(x).is_none(), "gradient must not flow through detach");
        assert_eq!(g.of(d).unwrap().data, vec![4.0, 6.0]);
    }

    #[test]
    fn nan_detection_mode() {
        let mut t: Tape<f64> = Tape::with_checking();
        let x = t.var(Tensor::from_vec(&[1, 1], vec![-1.0]));
        // sqrt of a negative value produces NaN and must be caught
        assert!(matches!(t.sqrt_elem(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn deterministic_forward_backward() {
        let mut r1 = rng(15);
        let run = |r: &mut ChaCha12Rng| -> (Vec<f64>, Vec<f64>) {
            let x = rand_tensor(&[8, 8], r, 1.0);
            let w = rand_tensor(&[8, 8], r, 1.0);
            let mut t = Tape::new();
            let xi = t.var(x);
            let wi = t.var(w);
            let h = t.matmul(xi, wi).unwrap();
            let s = t.softmax_rows(h).unwrap();
            let l = t.mean_all(s).unwrap();
            let g = t.backward(l, 1.0).unwrap();
            (t.value(s).data.clone(), g.of(wi).unwrap().data.clone())
        };
        let mut r2 = rng(15);
        let (v1, g1) = run(&mut r1);
        let (v2, g2) = run(&mut r2);
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}

//! Dense f64 tensors and a record-replay reverse-mode differentiation graph.
//!
//! Forward operations append nodes to a [`Graph`]; creation order is
//! topological by construction, so [`Graph::backward`] replays each node's
//! local gradient rule in reverse index order. A graph and its nodes belong
//! to one unit of execution; tensors without a graph attached are plain
//! immutable values.

use crate::{Error, Result};

/// Dense row-major f64 array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Accumulated gradient; same length as `values` when present.
    pub grad: Option<Vec<f64>>,
    /// Whether this tensor participates in differentiation when used as a leaf.
    pub tracked: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeLenMismatch {
                shape,
                len: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            tracked: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            grad: None,
            tracked: false,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; numel],
            grad: None,
            tracked: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
            tracked: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    /// Row vector `[1, d]` from a slice.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            values: values.to_vec(),
            grad: None,
            tracked: false,
        }
    }

    /// Marks the tensor as a differentiation leaf.
    pub fn tracked(mut self) -> Self {
        self.tracked = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn item(&self) -> Result<f64> {
        if self.values.len() == 1 {
            Ok(self.values[0])
        } else {
            Err(Error::NotScalar {
                op: "item",
                shape: self.shape.clone(),
            })
        }
    }

    /// Reinterprets the buffer under a new shape of equal volume.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.values.len() {
            return Err(Error::ShapeLenMismatch {
                shape,
                len: self.values.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// The same values viewed as a single row `[1, numel]`.
    pub fn flattened_row(&self) -> Tensor {
        Tensor {
            shape: vec![1, self.values.len()],
            values: self.values.clone(),
            grad: None,
            tracked: self.tracked,
        }
    }

    /// Resets the gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.values.len()]);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node inside one [`Graph`]. Ids are not transferable between
/// graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    /// Elementwise add; `b` may also be a `[1, n]` bias row added to every
    /// row of a `[m, n]` left operand.
    Add { a: NodeId, b: NodeId, bias_row: bool },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// `mul * x + add`, elementwise with scalar constants.
    AffineScalar { x: NodeId, mul: f64 },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Abs { x: NodeId },
    /// Row-wise softmax over the last dimension of a 2-D input.
    Softmax { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    /// Selects one element of the flattened input as a scalar.
    Get { x: NodeId, index: usize },
    /// Mean of squared Sobel responses over the valid region of each image.
    Sobel { x: NodeId, h: usize, w: usize },
    /// Binary cross entropy from logits, summed per row and averaged over rows.
    BceLogits { logits: NodeId, targets: NodeId },
    /// Softmax cross entropy from logits against class indices, averaged over rows.
    CrossEntropyLogits { logits: NodeId, labels: Vec<usize> },
    /// KL(N(mu, exp(logvar)) || N(0, I)), summed per row and averaged over rows.
    KlStdNormal { mu: NodeId, logvar: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Persistent accumulated gradient; grows only via `backward`.
    grad: Vec<f64>,
    tracked: bool,
}

/// Record of executed operations; replaying it in reverse yields gradients
/// for every tracked leaf.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += av * row[j];
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Registers a leaf; it is differentiated through iff `t.tracked`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push_node(Op::Leaf, t.shape.clone(), t.values.clone(), t.tracked)
    }

    /// Registers an untracked leaf regardless of the tensor's flag.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push_node(Op::Leaf, t.shape.clone(), t.values.clone(), false)
    }

    fn push_node(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, tracked: bool) -> NodeId {
        let id = self.nodes.len();
        let n = values.len();
        self.nodes.push(Node {
            op,
            shape,
            values,
            grad: vec![0.0; n],
            tracked,
        });
        NodeId(id)
    }

    fn check(&self, op: &'static str, id: NodeId) -> Result<usize> {
        if id.0 < self.nodes.len() {
            Ok(id.0)
        } else {
            Err(Error::InvalidNode { op, id: id.0 })
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn item(&self, id: NodeId) -> Result<f64> {
        let node = &self.nodes[id.0];
        if node.values.len() == 1 {
            Ok(node.values[0])
        } else {
            Err(Error::NotScalar {
                op: "item",
                shape: node.shape.clone(),
            })
        }
    }

    /// Accumulated gradient of a node (zeros before any backward pass).
    pub fn grad(&self, id: NodeId) -> Result<&[f64]> {
        let idx = self.check("grad", id)?;
        Ok(&self.nodes[idx].grad)
    }

    /// Extracts a node as a tensor, with its accumulated gradient attached.
    pub fn extract(&self, id: NodeId) -> Result<Tensor> {
        let idx = self.check("extract", id)?;
        let node = &self.nodes[idx];
        Ok(Tensor {
            shape: node.shape.clone(),
            values: node.values.clone(),
            grad: Some(node.grad.clone()),
            tracked: node.tracked,
        })
    }

    /// Adds a node's accumulated gradient into `t.grad`, allocating it if
    /// absent. Shapes must agree.
    pub fn accumulate_grad(&self, id: NodeId, t: &mut Tensor) -> Result<()> {
        let idx = self.check("accumulate_grad", id)?;
        let node = &self.nodes[idx];
        if node.shape != t.shape {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: node.shape.clone(),
                right: t.shape.clone(),
            });
        }
        let dst = t.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
        for (d, g) in dst.iter_mut().zip(&node.grad) {
            *d += g;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let node = &self.nodes[id.0];
        if node.shape.len() == 2 {
            Ok((node.shape[0], node.shape[1]))
        } else {
            Err(Error::InvalidArgument {
                op,
                msg: format!("expected a 2-D tensor, got shape {:?}", node.shape),
            })
        }
    }

    // ── forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let values = matmul_raw(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n);
        Ok(self.push_node(Op::Matmul { a, b }, vec![m, n], values, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check("add", a)?;
        self.check("add", b)?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let bias_row = sa != sb;
        if bias_row {
            // only [m, n] + [1, n] broadcasting is supported
            let ok = sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sa[1] == sb[1];
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "add",
                    left: sa.clone(),
                    right: sb.clone(),
                });
            }
        }
        let n = self.nodes[b.0].values.len();
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| v + self.nodes[b.0].values[if bias_row { i % n } else { i }])
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push_node(Op::Add { a, b, bias_row }, shape, values, false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check("sub", a)?;
        self.check("sub", b)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push_node(Op::Sub { a, b }, shape, values, false))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check("mul", a)?;
        self.check("mul", b)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push_node(Op::Mul { a, b }, shape, values, false))
    }

    /// `mul * x + add` elementwise, with f64 constants.
    pub fn affine_scalar(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        self.check("affine_scalar", x)?;
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| mul * v + add).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push_node(Op::AffineScalar { x, mul }, shape, values, false))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.affine_scalar(x, factor, 0.0)
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(NodeId) -> Op,
    ) -> Result<NodeId> {
        self.check(op_name, x)?;
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push_node(op(x), shape, values, false))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("relu", x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("tanh", x, f64::tanh, |x| Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", x, sigmoid_scalar, |x| Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("exp", x, f64::exp, |x| Op::Exp { x })
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("log", x, f64::ln, |x| Op::Log { x })
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("abs", x, f64::abs, |x| Op::Abs { x })
    }

    /// Row-wise softmax of a 2-D tensor, numerically stabilised per row.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check("softmax", x)?;
        let (m, n) = self.dims2("softmax", x)?;
        let src = &self.nodes[x.0].values;
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                values[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                values[i * n + j] /= sum;
            }
        }
        Ok(self.push_node(Op::Softmax { x }, vec![m, n], values, false))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check("sum", x)?;
        let s: f64 = self.nodes[x.0].values.iter().sum();
        Ok(self.push_node(Op::Sum { x }, vec![1], vec![s], false))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check("mean", x)?;
        let n = self.nodes[x.0].values.len() as f64;
        let s: f64 = self.nodes[x.0].values.iter().sum();
        Ok(self.push_node(Op::Mean { x }, vec![1], vec![s / n], false))
    }

    /// Sum of absolute values.
    pub fn l1_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let a = self.abs(x)?;
        self.sum(a)
    }

    /// One element of the flattened input, as a scalar node.
    pub fn get(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.check("get", x)?;
        let node = &self.nodes[x.0];
        if index >= node.values.len() {
            return Err(Error::InvalidArgument {
                op: "get",
                msg: format!("index {index} out of bounds for {} values", node.values.len()),
            });
        }
        let v = node.values[index];
        Ok(self.push_node(Op::Get { x, index }, vec![1], vec![v], false))
    }

    /// Mean of squared Sobel responses over the valid region of an `[h, w]`
    /// image. Both the horizontal and vertical kernels contribute.
    pub fn sobel(&mut self, x: NodeId) -> Result<NodeId> {
        self.check("sobel", x)?;
        let (h, w) = self.dims2("sobel", x)?;
        self.sobel_with_dims(x, h, w, 1)
    }

    /// Same penalty applied per row of an `[m, h*w]` batch of flattened
    /// images; the mean runs over every response of every image.
    pub fn sobel_batch(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        self.check("sobel_batch", x)?;
        let (m, cols) = self.dims2("sobel_batch", x)?;
        if cols != h * w {
            return Err(Error::InvalidArgument {
                op: "sobel_batch",
                msg: format!("rows of length {cols} cannot be {h}x{w} images"),
            });
        }
        self.sobel_with_dims(x, h, w, m)
    }

    fn sobel_with_dims(&mut self, x: NodeId, h: usize, w: usize, m: usize) -> Result<NodeId> {
        if h < 3 || w < 3 {
            return Err(Error::ImageTooSmall {
                op: "sobel",
                min: 3,
                h,
                w,
            });
        }
        let count = (2 * m * (h - 2) * (w - 2)) as f64;
        let src = &self.nodes[x.0].values;
        let mut acc = 0.0;
        for img in 0..m {
            let base = img * h * w;
            for i in 0..h - 2 {
                for j in 0..w - 2 {
                    let mut rx = 0.0;
                    let mut ry = 0.0;
                    for u in 0..3 {
                        for v in 0..3 {
                            let p = src[base + (i + u) * w + (j + v)];
                            rx += SOBEL_X[u][v] * p;
                            ry += SOBEL_Y[u][v] * p;
                        }
                    }
                    acc += rx * rx + ry * ry;
                }
            }
        }
        Ok(self.push_node(Op::Sobel { x, h, w }, vec![1], vec![acc / count], false))
    }

    /// Binary cross entropy computed from logits: per-element
    /// `softplus(l) - t*l`, summed over each row and averaged over rows.
    /// Targets are treated as constants.
    pub fn bce_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.check("bce_logits", logits)?;
        self.check("bce_logits", targets)?;
        let (m, _) = self.dims2("bce_logits", logits)?;
        if self.nodes[logits.0].shape != self.nodes[targets.0].shape {
            return Err(Error::ShapeMismatch {
                op: "bce_logits",
                left: self.nodes[logits.0].shape.clone(),
                right: self.nodes[targets.0].shape.clone(),
            });
        }
        let total: f64 = self.nodes[logits.0]
            .values
            .iter()
            .zip(&self.nodes[targets.0].values)
            .map(|(&l, &t)| softplus(l) - t * l)
            .sum();
        Ok(self.push_node(
            Op::BceLogits { logits, targets },
            vec![1],
            vec![total / m as f64],
            false,
        ))
    }

    /// Softmax cross entropy from logits against class indices, averaged
    /// over rows.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check("cross_entropy_logits", logits)?;
        let (m, n) = self.dims2("cross_entropy_logits", logits)?;
        if labels.len() != m {
            return Err(Error::InvalidArgument {
                op: "cross_entropy_logits",
                msg: format!("{} labels for {} rows", labels.len(), m),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: n,
            });
        }
        let src = &self.nodes[logits.0].values;
        let mut total = 0.0;
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        Ok(self.push_node(
            Op::CrossEntropyLogits {
                logits,
                labels: labels.to_vec(),
            },
            vec![1],
            vec![total / m as f64],
            false,
        ))
    }

    /// KL divergence of a diagonal Gaussian posterior from the standard
    /// normal prior, summed per row and averaged over rows.
    pub fn kl_std_normal(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        self.check("kl_std_normal", mu)?;
        self.check("kl_std_normal", logvar)?;
        let (m, _) = self.dims2("kl_std_normal", mu)?;
        if self.nodes[mu.0].shape != self.nodes[logvar.0].shape {
            return Err(Error::ShapeMismatch {
                op: "kl_std_normal",
                left: self.nodes[mu.0].shape.clone(),
                right: self.nodes[logvar.0].shape.clone(),
            });
        }
        let total: f64 = self.nodes[mu.0]
            .values
            .iter()
            .zip(&self.nodes[logvar.0].values)
            .map(|(&mu, &lv)| -0.5 * (1.0 + lv - mu * mu - lv.exp()))
            .sum();
        Ok(self.push_node(
            Op::KlStdNormal { mu, logvar },
            vec![1],
            vec![total / m as f64],
            false,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Replays the record in reverse, accumulating `d loss / d node` into
    /// every node's persistent gradient buffer. Repeated calls accumulate;
    /// use [`Graph::zero_grads`] to reset.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let idx = self.check("backward", loss)?;
        if self.nodes[idx].values.len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.nodes[idx].shape.clone(),
            });
        }
        // Fresh adjoints per call so repeated backward passes accumulate
        // exactly (grad += fresh adjoint).
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        adj[idx][0] = 1.0;
        for i in (0..=idx).rev() {
            self.backprop_node(i, &mut adj);
        }
        for (node, a) in self.nodes.iter_mut().zip(&adj) {
            for (g, d) in node.grad.iter_mut().zip(a) {
                *g += d;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, adj: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        if adj[i].iter().all(|&g| g == 0.0) {
            return;
        }
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let g = adj[i].clone();
                // dA = G . B^T
                let bv = &self.nodes[b.0].values;
                let mut bt = vec![0.0; n * k];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = bv[p * n + j];
                    }
                }
                let da = matmul_raw(&g, &bt, m, n, k);
                for (dst, src) in adj[a.0].iter_mut().zip(&da) {
                    *dst += src;
                }
                // dB = A^T . G
                let av = &self.nodes[a.0].values;
                let mut at = vec![0.0; k * m];
                for r in 0..m {
                    for p in 0..k {
                        at[p * m + r] = av[r * k + p];
                    }
                }
                let db = matmul_raw(&at, &g, k, m, n);
                for (dst, src) in adj[b.0].iter_mut().zip(&db) {
                    *dst += src;
                }
            }
            Op::Add { a, b, bias_row } => {
                let n = adj[b.0].len();
                for e in 0..adj[i].len() {
                    let g = adj[i][e];
                    adj[a.0][e] += g;
                    adj[b.0][if *bias_row { e % n } else { e }] += g;
                }
            }
            Op::Sub { a, b } => {
                for e in 0..adj[i].len() {
                    let g = adj[i][e];
                    adj[a.0][e] += g;
                    adj[b.0][e] -= g;
                }
            }
            Op::Mul { a, b } => {
                for e in 0..adj[i].len() {
                    let g = adj[i][e];
                    adj[a.0][e] += g * self.nodes[b.0].values[e];
                    adj[b.0][e] += g * self.nodes[a.0].values[e];
                }
            }
            Op::AffineScalar { x, mul } => {
                for e in 0..adj[i].len() {
                    adj[x.0][e] += adj[i][e] * mul;
                }
            }
            Op::Relu { x } => {
                for e in 0..adj[i].len() {
                    if self.nodes[x.0].values[e] > 0.0 {
                        adj[x.0][e] += adj[i][e];
                    }
                }
            }
            Op::Tanh { x } => {
                for e in 0..adj[i].len() {
                    let y = node.values[e];
                    adj[x.0][e] += adj[i][e] * (1.0 - y * y);
                }
            }
            Op::Sigmoid { x } => {
                for e in 0..adj[i].len() {
                    let y = node.values[e];
                    adj[x.0][e] += adj[i][e] * y * (1.0 - y);
                }
            }
            Op::Exp { x } => {
                for e in 0..adj[i].len() {
                    adj[x.0][e] += adj[i][e] * node.values[e];
                }
            }
            Op::Log { x } => {
                for e in 0..adj[i].len() {
                    adj[x.0][e] += adj[i][e] / self.nodes[x.0].values[e];
                }
            }
            Op::Abs { x } => {
                for e in 0..adj[i].len() {
                    let v = self.nodes[x.0].values[e];
                    let s = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    adj[x.0][e] += adj[i][e] * s;
                }
            }
            Op::Softmax { x } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let g_all = adj[i].clone();
                for r in 0..m {
                    let y = &node.values[r * n..(r + 1) * n];
                    let g = &g_all[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(g).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        adj[x.0][r * n + j] += y[j] * (g[j] - dot);
                    }
                }
            }
            Op::Sum { x } => {
                let g = adj[i][0];
                for d in adj[x.0].iter_mut() {
                    *d += g;
                }
            }
            Op::Mean { x } => {
                let g = adj[i][0] / adj[x.0].len() as f64;
                for d in adj[x.0].iter_mut() {
                    *d += g;
                }
            }
            Op::Get { x, index } => {
                adj[x.0][*index] += adj[i][0];
            }
            Op::Sobel { x, h, w } => {
                let (h, w) = (*h, *w);
                let m = self.nodes[x.0].values.len() / (h * w);
                let count = (2 * m * (h - 2) * (w - 2)) as f64;
                let g = adj[i][0];
                let src = &self.nodes[x.0].values;
                for img in 0..m {
                    let base = img * h * w;
                    for r in 0..h - 2 {
                        for c in 0..w - 2 {
                            let mut rx = 0.0;
                            let mut ry = 0.0;
                            for u in 0..3 {
                                for v in 0..3 {
                                    let p = src[base + (r + u) * w + (c + v)];
                                    rx += SOBEL_X[u][v] * p;
                                    ry += SOBEL_Y[u][v] * p;
                                }
                            }
                            let fx = 2.0 * rx * g / count;
                            let fy = 2.0 * ry * g / count;
                            for u in 0..3 {
                                for v in 0..3 {
                                    adj[x.0][base + (r + u) * w + (c + v)] +=
                                        fx * SOBEL_X[u][v] + fy * SOBEL_Y[u][v];
                                }
                            }
                        }
                    }
                }
            }
            Op::BceLogits { logits, targets } => {
                let m = self.nodes[logits.0].shape[0] as f64;
                let g = adj[i][0];
                for e in 0..adj[logits.0].len() {
                    let l = self.nodes[logits.0].values[e];
                    let t = self.nodes[targets.0].values[e];
                    adj[logits.0][e] += g * (sigmoid_scalar(l) - t) / m;
                }
            }
            Op::CrossEntropyLogits { logits, labels } => {
                let (m, n) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let g = adj[i][0];
                let src = &self.nodes[logits.0].values;
                for r in 0..m {
                    let row = &src[r * n..(r + 1) * n];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    for j in 0..n {
                        let p = (row[j] - max).exp() / sum;
                        let y = if labels[r] == j { 1.0 } else { 0.0 };
                        adj[logits.0][r * n + j] += g * (p - y) / m as f64;
                    }
                }
            }
            Op::KlStdNormal { mu, logvar } => {
                let m = self.nodes[mu.0].shape[0] as f64;
                let g = adj[i][0];
                for e in 0..adj[mu.0].len() {
                    adj[mu.0][e] += g * self.nodes[mu.0].values[e] / m;
                    adj[logvar.0][e] += g * 0.5 * (self.nodes[logvar.0].values[e].exp() - 1.0) / m;
                }
            }
        }
    }
}

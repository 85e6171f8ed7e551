use rand::Rng;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{Tensor, TensorError, PROB_EPS};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Activation(NodeId, Activation),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        keep_scale: Vec<T>,
    },
    Softmax {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(NodeId),
    SwapMiddle {
        x: NodeId,
        dims: [usize; 4],
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    KlDivergence {
        p: NodeId,
        q: NodeId,
    },
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Tape of operations recorded in topological order.
///
/// Every op appends a node whose inputs were created earlier, so a reverse
/// sweep over the tape visits each node after all of its consumers.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `node`, if it participates.
    pub fn get(&self, node: NodeId) -> Option<Tensor<T>> {
        let g = self.grads.get(node.0)?.as_ref()?;
        Tensor::new(self.shapes[node.0].clone(), g.clone()).ok()
    }

    /// Borrowed flat gradient.
    pub fn data(&self, node: NodeId) -> Option<&[T]> {
        self.grads.get(node.0)?.as_deref()
    }

    /// Takes ownership of the flat gradient.
    pub fn take(&mut self, node: NodeId) -> Option<Vec<T>> {
        self.grads.get_mut(node.0)?.take()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let u = c * (x + a * x3);
    let t = u.tanh();
    let y = half * x * (one + t);
    let du = c * (one + T::of(3.0) * a * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * du;
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let rg = tensor.requires_grad();
        self.push(Op::Leaf, tensor, rg)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, tensor.with_grad(true), true)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, tensor.with_grad(false), false)
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::MatMul { a, b, m, k, n },
            Tensor::new(vec![m, n], out)?,
            rg,
        ))
    }

    /// Batched product of `[batch,m,k]` with `[batch,k,n]`, or with
    /// `[batch,n,k]` transposed when `transpose_b` is set.
    pub fn batch_matmul(
        &mut self,
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    ) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let aa = &ad[bi * m * k..(bi + 1) * m * k];
            let bb = &bd[bi * k * n..(bi + 1) * k * n];
            let cc = &mut out[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                matmul_nt(aa, bb, cc, m, k, n);
            } else {
                matmul_nn(aa, bb, cc, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::BatchMatMul {
                a,
                b,
                transpose_b,
                batch,
                m,
                k,
                n,
            },
            Tensor::new(vec![batch, m, n], out)?,
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, value, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sb != [n] {
            return Err(shape_err("add_bias", sx, sb));
        }
        let bd = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(&bd) {
                *v += b;
            }
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddBias { x, bias }, value, rg))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Gelu)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Relu)
    }

    fn activation(&mut self, x: NodeId, act: Activation) -> NodeId {
        let value = match act {
            Activation::Gelu => self.value(x).map(|v| gelu_parts(v).0),
            Activation::Relu => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
        };
        let rg = self.rg(x);
        self.push(Op::Activation(x, act), value, rg)
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", &sx, self.shape(gamma)));
        }
        let rows = self.value(x).numel() / n.max(1);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nt = T::of(n as f64);
        let eps = T::of(eps);
        let mut normalized = vec![T::zero(); rows * n];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rstd = T::one() / (var + eps).sqrt();
            inv_std[r] = rstd;
            for j in 0..n {
                let xh = (row[j] - mean) * rstd;
                normalized[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            value,
            rg,
        ))
    }

    /// Gathers rows of a `[rows, cols]` table; the gradient scatter-adds.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("gather_rows", &st, &[]));
        }
        let (rows, cols) = (st[0], st[1]);
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    what: "embedding table",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&td[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Inverted dropout; `rng` fully determines the mask.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> NodeId {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let keep_scale: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&keep_scale).map(|(&a, &s)| a * s).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Dropout { x, keep_scale }, value, rg)
    }

    /// Numerically stable softmax along `axis`.
    ///
    /// NaN inputs propagate NaN along the affected slice.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(TensorError::Index {
                what: "softmax axis",
                index: axis,
                bound: sx.len(),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        softmax_strided(xd, &mut out, outer, len, inner);
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            value,
            rg,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// `[a,b,c,d] -> [a,c,b,d]`, used to split and merge attention heads.
    pub fn swap_middle(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("swap_middle", &sx, &[]));
        }
        let dims = [sx[0], sx[1], sx[2], sx[3]];
        let out = swap_middle_data(self.value(x).data(), dims);
        let value = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SwapMiddle { x, dims }, value, rg))
    }

    /// Mean cross-entropy of `[batch, classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(shape_err("cross_entropy", &sl, &[labels.len()]));
        }
        let (rows, classes) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Index {
                what: "class label",
                index: bad,
                bound: classes,
            });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        softmax_strided(ld, &mut probs, rows, classes, 1);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &ld[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[label];
        }
        let loss = total / T::of(rows.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Batch-mean `Σ p·ln(p/q)` over the last axis, with both arguments
    /// clamped to `[1e-12, 1]` before the logarithm.
    pub fn kl_divergence(&mut self, p: NodeId, q: NodeId) -> Result<NodeId, TensorError> {
        let (sp, sq) = (self.shape(p), self.shape(q));
        if sp != sq || sp.is_empty() {
            return Err(shape_err("kl_divergence", sp, sq));
        }
        let classes = *sp.last().unwrap();
        let rows = self.value(p).numel() / classes.max(1);
        let eps = T::of(PROB_EPS);
        let pd = self.value(p).data();
        let qd = self.value(q).data();
        let mut total = T::zero();
        for (&pv, &qv) in pd.iter().zip(qd) {
            if pv > T::zero() {
                total += pv * (pv.max(eps).ln() - qv.max(eps).ln());
            }
        }
        let value = Tensor::scalar(total / T::of(rows.max(1) as f64));
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Op::KlDivergence { p, q }, value, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel().max(1) as f64);
        let rg = self.rg(x);
        self.push(Op::Mean(x), Tensor::scalar(s), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let acc = |grads: &mut [Option<Vec<T>>], id: NodeId| -> bool { self.rg(id) && grads.len() > id.0 };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if acc(grads, *a) {
                    let ga = slot(grads, *a, m * k);
                    matmul_nt(gy, self.value(*b).data(), ga, m, n, k);
                }
                if acc(grads, *b) {
                    let gb = slot(grads, *b, k * n);
                    matmul_tn(self.value(*a).data(), gy, gb, k, m, n);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                transpose_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if acc(grads, *a) {
                    let ga = slot(grads, *a, batch * m * k);
                    for bi in 0..*batch {
                        let g = &gy[bi * m * n..(bi + 1) * m * n];
                        let bb = &bd[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *transpose_b {
                            // b is [n,k]
                            matmul_nn(g, bb, out, m, n, k);
                        } else {
                            matmul_nt(g, bb, out, m, n, k);
                        }
                    }
                }
                if acc(grads, *b) {
                    let gb = slot(grads, *b, batch * k * n);
                    for bi in 0..*batch {
                        let g = &gy[bi * m * n..(bi + 1) * m * n];
                        let aa = &ad[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *transpose_b {
                            // d(b)[n,k] = gᵀ[n,m] · a[m,k]
                            matmul_tn(g, aa, out, n, m, k);
                        } else {
                            matmul_tn(aa, g, out, k, m, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if acc(grads, id) {
                        let g = slot(grads, id, gy.len());
                        for (x, &d) in g.iter_mut().zip(gy) {
                            *x += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if acc(grads, *a) {
                    let g = slot(grads, *a, gy.len());
                    for i in 0..gy.len() {
                        g[i] += gy[i] * bd[i];
                    }
                }
                if acc(grads, *b) {
                    let g = slot(grads, *b, gy.len());
                    for i in 0..gy.len() {
                        g[i] += gy[i] * ad[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if acc(grads, *a) {
                    let g = slot(grads, *a, gy.len());
                    for (x, &d) in g.iter_mut().zip(gy) {
                        *x += d * *c;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if acc(grads, *x) {
                    let g = slot(grads, *x, gy.len());
                    for (v, &d) in g.iter_mut().zip(gy) {
                        *v += d;
                    }
                }
                if acc(grads, *bias) {
                    let n = self.value(*bias).numel();
                    let g = slot(grads, *bias, n);
                    for row in gy.chunks(n) {
                        for (v, &d) in g.iter_mut().zip(row) {
                            *v += d;
                        }
                    }
                }
            }
            Op::Activation(x, act) => {
                if acc(grads, *x) {
                    let xd = self.value(*x).data();
                    let g = slot(grads, *x, gy.len());
                    match act {
                        Activation::Gelu => {
                            for i in 0..gy.len() {
                                g[i] += gy[i] * gelu_parts(xd[i]).1;
                            }
                        }
                        Activation::Relu => {
                            for i in 0..gy.len() {
                                if xd[i] > T::zero() {
                                    g[i] += gy[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let n = self.value(*gamma).numel();
                let rows = inv_std.len();
                let gd = self.value(*gamma).data();
                if acc(grads, *gamma) {
                    let g = slot(grads, *gamma, n);
                    for r in 0..rows {
                        for j in 0..n {
                            g[j] += gy[r * n + j] * normalized[r * n + j];
                        }
                    }
                }
                if acc(grads, *beta) {
                    let g = slot(grads, *beta, n);
                    for r in 0..rows {
                        for j in 0..n {
                            g[j] += gy[r * n + j];
                        }
                    }
                }
                if acc(grads, *x) {
                    let nt = T::of(n as f64);
                    let g = slot(grads, *x, rows * n);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let xh = &normalized[r * n..(r + 1) * n];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..n {
                            dxhat[j] = gy[r * n + j] * gd[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xh[j];
                        }
                        let scale = inv_std[r] / nt;
                        for j in 0..n {
                            g[r * n + j] += scale * (nt * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if acc(grads, *table) {
                    let st = self.shape(*table);
                    let cols = st[1];
                    let g = slot(grads, *table, st[0] * cols);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut g[id * cols..(id + 1) * cols];
                        for (v, &d) in dst.iter_mut().zip(&gy[r * cols..(r + 1) * cols]) {
                            *v += d;
                        }
                    }
                }
            }
            Op::Dropout { x, keep_scale } => {
                if acc(grads, *x) {
                    let g = slot(grads, *x, gy.len());
                    for i in 0..gy.len() {
                        g[i] += gy[i] * keep_scale[i];
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if acc(grads, *x) {
                    let y = node.value.data();
                    let g = slot(grads, *x, gy.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..*len {
                                let ix = base + j * inner;
                                dot += gy[ix] * y[ix];
                            }
                            for j in 0..*len {
                                let ix = base + j * inner;
                                g[ix] += y[ix] * (gy[ix] - dot);
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if acc(grads, *x) {
                    let g = slot(grads, *x, gy.len());
                    for (v, &d) in g.iter_mut().zip(gy) {
                        *v += d;
                    }
                }
            }
            Op::SwapMiddle { x, dims } => {
                if acc(grads, *x) {
                    let back = swap_middle_data(gy, [dims[0], dims[2], dims[1], dims[3]]);
                    let g = slot(grads, *x, gy.len());
                    for (v, d) in g.iter_mut().zip(back) {
                        *v += d;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if acc(grads, *logits) {
                    let rows = labels.len();
                    let classes = probs.len() / rows.max(1);
                    let scale = gy[0] / T::of(rows.max(1) as f64);
                    let g = slot(grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            g[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::KlDivergence { p, q } => {
                let pd = self.value(*p).data();
                let qd = self.value(*q).data();
                let classes = *self.shape(*p).last().unwrap();
                let rows = pd.len() / classes.max(1);
                let scale = gy[0] / T::of(rows.max(1) as f64);
                let eps = T::of(PROB_EPS);
                if acc(grads, *p) {
                    let g = slot(grads, *p, pd.len());
                    for i in 0..pd.len() {
                        if pd[i] > T::zero() {
                            let dlogp = if pd[i] > eps { T::one() } else { T::zero() };
                            g[i] += scale * (pd[i].max(eps).ln() + dlogp - qd[i].max(eps).ln());
                        }
                    }
                }
                if acc(grads, *q) {
                    let g = slot(grads, *q, qd.len());
                    for i in 0..qd.len() {
                        if pd[i] > T::zero() && qd[i] > eps {
                            g[i] -= scale * pd[i] / qd[i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if acc(grads, *x) {
                    let n = self.value(*x).numel();
                    let g = slot(grads, *x, n);
                    for v in g.iter_mut() {
                        *v += gy[0];
                    }
                }
            }
            Op::Mean(x) => {
                if acc(grads, *x) {
                    let n = self.value(*x).numel();
                    let d = gy[0] / T::of(n.max(1) as f64);
                    let g = slot(grads, *x, n);
                    for v in g.iter_mut() {
                        *v += d;
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn softmax_strided<T: Scalar>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            if x[base..].iter().step_by(inner).take(len).any(|v| v.is_nan()) {
                max = T::nan();
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
}

fn swap_middle_data<T: Scalar>(x: &[T], dims: [usize; 4]) -> Vec<T> {
    let [a, b, c, d] = dims;
    let mut out = vec![T::zero(); x.len()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let src = ((ia * b + ib) * c + ic) * d;
                let dst = ((ia * c + ic) * b + ib) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

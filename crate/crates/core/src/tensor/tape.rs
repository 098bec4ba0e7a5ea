//! Operation tape for reverse-mode differentiation.
//!
//! Every differentiable primitive is a method on [`Tape`]: the forward value
//! is computed eagerly and a node describing the op is recorded. [`Tape::backward`]
//! walks the nodes in reverse creation order, which is a valid reverse
//! topological order because an op can only consume tensors that already
//! exist.

use super::ops::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{softmax_rows, Scalar, Tensor, TensorError};

enum Node<T> {
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
        out: Tensor<T>,
    },
    Add {
        a: Tensor<T>,
        b: Tensor<T>,
        out: Tensor<T>,
    },
    Mul {
        a: Tensor<T>,
        b: Tensor<T>,
        out: Tensor<T>,
    },
    /// `a: rows x cols` plus a `cols` vector broadcast over rows — the only
    /// broadcasting form the engine supports.
    AddBias {
        a: Tensor<T>,
        bias: Tensor<T>,
        out: Tensor<T>,
    },
    Sigmoid {
        x: Tensor<T>,
        out: Tensor<T>,
    },
    Tanh {
        x: Tensor<T>,
        out: Tensor<T>,
    },
    Concat {
        parts: Vec<Tensor<T>>,
        axis: usize,
        out: Tensor<T>,
    },
    EmbeddingLookup {
        table: Tensor<T>,
        indices: Vec<usize>,
        out: Tensor<T>,
    },
    /// Weighted multi-row cross entropy; `probs` caches the row softmax.
    SoftmaxCrossEntropy {
        logits: Tensor<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        out: Tensor<T>,
    },
    Sum {
        x: Tensor<T>,
        out: Tensor<T>,
    },
    Scale {
        x: Tensor<T>,
        factor: T,
        out: Tensor<T>,
    },
}

/// Record of one forward pass. Create one per training step and drop it
/// after `backward`; nothing is retained across steps.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn record(&mut self, make: impl FnOnce(Tensor<T>) -> Node<T>, out: Tensor<T>) -> Tensor<T> {
        self.nodes.push(make(out.clone()));
        out
    }

    /// Matrix product of `a: m x k` and `b: k x n`.
    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut data = vec![T::zero(); m * n];
        matmul_acc(
            &a.inner.borrow().data,
            &b.inner.borrow().data,
            m,
            k,
            n,
            &mut data,
        );
        let rg = a.requires_grad() || b.requires_grad();
        let out = Tensor::from_op(data, vec![m, n], rg);
        Ok(self.record(
            |out| Node::Matmul {
                a: a.clone(),
                b: b.clone(),
                out,
            },
            out,
        ))
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Tensor<T>) -> Node<T>,
    ) -> Result<Tensor<T>, TensorError> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash != bsh {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ash,
                rhs: bsh,
            });
        }
        let data: Vec<T> = {
            let ad = a.inner.borrow();
            let bd = b.inner.borrow();
            ad.data
                .iter()
                .zip(bd.data.iter())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let rg = a.requires_grad() || b.requires_grad();
        let out = Tensor::from_op(data, ash, rg);
        Ok(self.record(make, out))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, |out| Node::Add {
            a: a.clone(),
            b: b.clone(),
            out,
        })
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |out| Node::Mul {
            a: a.clone(),
            b: b.clone(),
            out,
        })
    }

    /// `a + bias` where `a: rows x cols` and `bias: [cols]`.
    pub fn add_bias(&mut self, a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (ash, bsh) = (a.shape(), bias.shape());
        if ash.len() != 2 || bsh.len() != 1 || bsh[0] != ash[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (rows, cols) = (ash[0], ash[1]);
        let mut data = a.to_vec();
        {
            let bd = bias.inner.borrow();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] = data[r * cols + c] + bd.data[c];
                }
            }
        }
        let rg = a.requires_grad() || bias.requires_grad();
        let out = Tensor::from_op(data, ash, rg);
        Ok(self.record(
            |out| Node::AddBias {
                a: a.clone(),
                bias: bias.clone(),
                out,
            },
            out,
        ))
    }

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let data: Vec<T> = x
            .inner
            .borrow()
            .data
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let out = Tensor::from_op(data, x.shape(), x.requires_grad());
        self.record(|out| Node::Sigmoid { x: x.clone(), out }, out)
    }

    pub fn tanh(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let data: Vec<T> = x.inner.borrow().data.iter().map(|&v| v.tanh()).collect();
        let out = Tensor::from_op(data, x.shape(), x.requires_grad());
        self.record(|out| Node::Tanh { x: x.clone(), out }, out)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of an empty tensor list".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "concat",
                index: axis,
                bound: base.len(),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let sh = p.shape();
            let compatible = sh.len() == base.len()
                && sh
                    .iter()
                    .zip(base.iter())
                    .enumerate()
                    .all(|(d, (&a, &b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: sh,
                });
            }
            axis_total += sh[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;

        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut data = vec![T::zero(); numel];
        let mut offset = 0;
        for p in parts {
            let psh = p.shape();
            let pax = psh[axis];
            let pd = p.inner.borrow();
            for o in 0..outer {
                let src = &pd.data[o * pax * inner..(o + 1) * pax * inner];
                let dst_start = o * axis_total * inner + offset * inner;
                data[dst_start..dst_start + pax * inner].copy_from_slice(src);
            }
            offset += pax;
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let out = Tensor::from_op(data, out_shape, rg);
        Ok(self.record(
            |out| Node::Concat {
                parts: parts.to_vec(),
                axis,
                out,
            },
            out,
        ))
    }

    /// Gather rows of `table: vocab x dim` producing `len x dim`. The
    /// backward pass scatter-adds into the table rows.
    pub fn embedding_lookup(
        &mut self,
        table: &Tensor<T>,
        indices: &[usize],
    ) -> Result<Tensor<T>, TensorError> {
        let tsh = table.shape();
        if tsh.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_lookup",
                lhs: tsh,
                rhs: vec![indices.len()],
            });
        }
        let (vocab, dim) = (tsh[0], tsh[1]);
        let mut data = vec![T::zero(); indices.len() * dim];
        {
            let td = table.inner.borrow();
            for (r, &ix) in indices.iter().enumerate() {
                if ix >= vocab {
                    return Err(TensorError::IndexOutOfRange {
                        op: "embedding_lookup",
                        index: ix,
                        bound: vocab,
                    });
                }
                data[r * dim..(r + 1) * dim].copy_from_slice(&td.data[ix * dim..(ix + 1) * dim]);
            }
        }
        let out = Tensor::from_op(data, vec![indices.len(), dim], table.requires_grad());
        Ok(self.record(
            |out| Node::EmbeddingLookup {
                table: table.clone(),
                indices: indices.to_vec(),
                out,
            },
            out,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor<T>,
        targets: &[usize],
    ) -> Result<Tensor<T>, TensorError> {
        let rows = logits.shape().first().copied().unwrap_or(0);
        let w = T::one() / T::from_f64(rows as f64);
        let weights = vec![w; rows];
        self.softmax_cross_entropy_weighted(logits, targets, &weights)
    }

    /// `sum_r weights[r] * (-log softmax(logits[r])[targets[r]])`. The plain
    /// batch-mean form is this with uniform weights `1/rows`; the sequence
    /// loss uses per-row weights to mask padding.
    pub fn softmax_cross_entropy_weighted(
        &mut self,
        logits: &Tensor<T>,
        targets: &[usize],
        weights: &[T],
    ) -> Result<Tensor<T>, TensorError> {
        let lsh = logits.shape();
        if lsh.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lsh,
                rhs: vec![targets.len()],
            });
        }
        let (rows, classes) = (lsh[0], lsh[1]);
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lsh,
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= classes {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: classes,
                });
            }
        }
        let probs = softmax_rows(&logits.inner.borrow().data, rows, classes);
        let mut loss = T::zero();
        for r in 0..rows {
            let p = probs[r * classes + targets[r]];
            // Clamp keeps the loss finite on saturated rows.
            let p = if p < T::from_f64(1e-30) {
                T::from_f64(1e-30)
            } else {
                p
            };
            loss = loss - weights[r] * p.ln();
        }
        let out = Tensor::from_op(vec![loss], vec![1], logits.requires_grad());
        Ok(self.record(
            |out| Node::SoftmaxCrossEntropy {
                logits: logits.clone(),
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                out,
            },
            out,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let total = x
            .inner
            .borrow()
            .data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let out = Tensor::from_op(vec![total], vec![1], x.requires_grad());
        self.record(|out| Node::Sum { x: x.clone(), out }, out)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: &Tensor<T>, factor: T) -> Tensor<T> {
        let data: Vec<T> = x.inner.borrow().data.iter().map(|&v| v * factor).collect();
        let out = Tensor::from_op(data, x.shape(), x.requires_grad());
        self.record(
            |out| Node::Scale {
                x: x.clone(),
                factor,
                out,
            },
            out,
        )
    }

    /// Reverse pass from a scalar loss. Adjoints of intermediate results are
    /// reset on every call; adjoints of leaves accumulate until the caller
    /// zeroes them, so two passes without zeroing double the leaf gradients.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<(), TensorError> {
        if loss.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        for node in &self.nodes {
            let out = node_output(node);
            if out.requires_grad() {
                out.reset_grad_zero();
            }
        }
        loss.accumulate_grad(&[T::one()]);

        for node in self.nodes.iter().rev() {
            let out = node_output(node);
            if !out.requires_grad() {
                continue;
            }
            let g = match out.inner.borrow().grad.clone() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &[T]) {
        match node {
            Node::Matmul { a, b, .. } => {
                let ash = a.shape();
                let bsh = b.shape();
                let (m, k, n) = (ash[0], ash[1], bsh[1]);
                if self.wants_grad(a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_bt_acc(g, &b.inner.borrow().data, m, k, n, &mut da);
                    a.accumulate_grad(&da);
                }
                if self.wants_grad(b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_at_acc(&a.inner.borrow().data, g, m, k, n, &mut db);
                    b.accumulate_grad(&db);
                }
            }
            Node::Add { a, b, .. } => {
                if self.wants_grad(a) {
                    a.accumulate_grad(g);
                }
                if self.wants_grad(b) {
                    b.accumulate_grad(g);
                }
            }
            Node::Mul { a, b, .. } => {
                if self.wants_grad(a) {
                    let bd = b.inner.borrow();
                    let da: Vec<T> = g.iter().zip(bd.data.iter()).map(|(&x, &y)| x * y).collect();
                    drop(bd);
                    a.accumulate_grad(&da);
                }
                if self.wants_grad(b) {
                    let ad = a.inner.borrow();
                    let db: Vec<T> = g.iter().zip(ad.data.iter()).map(|(&x, &y)| x * y).collect();
                    drop(ad);
                    b.accumulate_grad(&db);
                }
            }
            Node::AddBias { a, bias, .. } => {
                if self.wants_grad(a) {
                    a.accumulate_grad(g);
                }
                if self.wants_grad(bias) {
                    let cols = bias.numel();
                    let rows = g.len() / cols;
                    let mut db = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] = db[c] + g[r * cols + c];
                        }
                    }
                    bias.accumulate_grad(&db);
                }
            }
            Node::Sigmoid { x, out } => {
                if self.wants_grad(x) {
                    let od = out.inner.borrow();
                    let dx: Vec<T> = g
                        .iter()
                        .zip(od.data.iter())
                        .map(|(&gv, &s)| gv * s * (T::one() - s))
                        .collect();
                    drop(od);
                    x.accumulate_grad(&dx);
                }
            }
            Node::Tanh { x, out } => {
                if self.wants_grad(x) {
                    let od = out.inner.borrow();
                    let dx: Vec<T> = g
                        .iter()
                        .zip(od.data.iter())
                        .map(|(&gv, &t)| gv * (T::one() - t * t))
                        .collect();
                    drop(od);
                    x.accumulate_grad(&dx);
                }
            }
            Node::Concat { parts, axis, out } => {
                let osh = out.shape();
                let axis_total = osh[*axis];
                let outer: usize = osh[..*axis].iter().product();
                let inner: usize = osh[*axis + 1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let pax = p.shape()[*axis];
                    if self.wants_grad(p) {
                        let mut dp = vec![T::zero(); p.numel()];
                        for o in 0..outer {
                            let src_start = o * axis_total * inner + offset * inner;
                            dp[o * pax * inner..(o + 1) * pax * inner]
                                .copy_from_slice(&g[src_start..src_start + pax * inner]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    offset += pax;
                }
            }
            Node::EmbeddingLookup { table, indices, .. } => {
                if self.wants_grad(table) {
                    let dim = table.shape()[1];
                    let mut dt = vec![T::zero(); table.numel()];
                    for (r, &ix) in indices.iter().enumerate() {
                        for d in 0..dim {
                            dt[ix * dim + d] = dt[ix * dim + d] + g[r * dim + d];
                        }
                    }
                    table.accumulate_grad(&dt);
                }
            }
            Node::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
                ..
            } => {
                if self.wants_grad(logits) {
                    let classes = logits.shape()[1];
                    let mut dl = probs.clone();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let row = &mut dl[r * classes..(r + 1) * classes];
                        row[t] = row[t] - T::one();
                        for v in row.iter_mut() {
                            *v = *v * w * g[0];
                        }
                    }
                    logits.accumulate_grad(&dl);
                }
            }
            Node::Sum { x, .. } => {
                if self.wants_grad(x) {
                    let dx = vec![g[0]; x.numel()];
                    x.accumulate_grad(&dx);
                }
            }
            Node::Scale { x, factor, .. } => {
                if self.wants_grad(x) {
                    let dx: Vec<T> = g.iter().map(|&v| v * *factor).collect();
                    x.accumulate_grad(&dx);
                }
            }
        }
    }

    /// Adjoints flow into every input that requires grad. Tensors produced
    /// by a different tape behave as leaves here: they receive adjoints but
    /// nothing propagates through them, since their producing nodes are not
    /// on this tape.
    fn wants_grad(&self, t: &Tensor<T>) -> bool {
        t.requires_grad()
    }
}

fn node_output<T>(node: &Node<T>) -> &Tensor<T> {
    match node {
        Node::Matmul { out, .. }
        | Node::Add { out, .. }
        | Node::Mul { out, .. }
        | Node::AddBias { out, .. }
        | Node::Sigmoid { out, .. }
        | Node::Tanh { out, .. }
        | Node::Concat { out, .. }
        | Node::EmbeddingLookup { out, .. }
        | Node::SoftmaxCrossEntropy { out, .. }
        | Node::Sum { out, .. }
        | Node::Scale { out, .. } => out,
    }
}

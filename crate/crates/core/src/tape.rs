//! Wengert tape: reverse-mode differentiation over dense tensors.
//!
//! Forward ops append nodes to the tape; `backward` consumes the tape and
//! replays it in reverse, visiting each node exactly once and summing the
//! contributions from all consumers. Every reduction uses a fixed sequential
//! order, so forward and backward are deterministic.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    AddRowBroadcast { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    Transpose { a: NodeId },
    SoftmaxRows { a: NodeId, mask: Option<Vec<bool>> },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Gelu { a: NodeId },
    Gather { table: NodeId, ids: Vec<usize> },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    CeMaskedSum { logits: NodeId, labels: Vec<usize>, positions: Vec<usize> },
    MseVsConst { a: NodeId, target: Vec<F>, mask: Option<Vec<bool>>, denom: f64 },
    SumScalars { parts: Vec<NodeId> },
    SumAll { a: NodeId },
    Dropout { a: NodeId, keep: Vec<F> },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads[id.0].take()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a leaf tensor. Gradient flows into it iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> NodeId {
        let ng = tensor.requires_grad;
        self.push(tensor, Op::Leaf, ng)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> NodeId {
        self.push(tensor.requires_grad(false), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} * {}x{}", m, k, k2, n),
            });
        }
        let data = kernels::matmul(&self.value(a).data, &self.value(b).data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: vec![m, n], data, requires_grad: false }, Op::Matmul { a, b }, ng))
    }

    fn elementwise2(&mut self, a: NodeId, b: NodeId, name: &'static str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "add")?;
        let data: Vec<F> =
            self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| x + y).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data, requires_grad: false }, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "sub")?;
        let data: Vec<F> =
            self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| x - y).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data, requires_grad: false }, Op::Sub { a, b }, ng))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "mul_elem")?;
        let data: Vec<F> =
            self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| x * y).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data, requires_grad: false }, Op::MulElem { a, b }, ng))
    }

    /// a[m x n] + bias[n], broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("bias len {} vs {} cols", self.value(bias).numel(), n),
            });
        }
        let mut data = self.value(a).data.clone();
        let bv = &self.value(bias).data;
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = data[i * n + j] + bv[j];
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(
            Tensor { shape: vec![m, n], data, requires_grad: false },
            Op::AddRowBroadcast { a, bias },
            ng,
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cf = F::from_f64(c);
        let data: Vec<F> = self.value(a).data.iter().map(|&x| x * cf).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a);
        self.push(Tensor { shape, data, requires_grad: false }, Op::Scale { a, c }, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        let data = kernels::transpose(&self.value(a).data, m, n);
        let ng = self.needs(a);
        self.push(Tensor { shape: vec![n, m], data, requires_grad: false }, Op::Transpose { a }, ng)
    }

    /// Row-wise softmax. Entries where `mask` is false get exactly 0 and the
    /// distribution is renormalized over the valid positions. A row with no
    /// valid position is an error.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if let Some(msk) = mask {
            if msk.len() != m * n {
                return Err(Error::ShapeMismatch {
                    op: "softmax_rows",
                    detail: format!("mask len {} vs {}x{}", msk.len(), m, n),
                });
            }
        }
        let x = &self.value(a).data;
        let mut y = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let valid = |j: usize| mask.map_or(true, |msk| msk[i * n + j]);
            let mut mx: Option<F> = None;
            for j in 0..n {
                if valid(j) && mx.map_or(true, |v| row[j] > v) {
                    mx = Some(row[j]);
                }
            }
            let mx = mx.ok_or(Error::DegenerateRow { row: i })?;
            let mut sum = F::zero();
            for j in 0..n {
                if valid(j) {
                    let e = (row[j] - mx).exp();
                    y[i * n + j] = e;
                    sum = sum + e;
                }
            }
            for j in 0..n {
                if valid(j) {
                    y[i * n + j] = y[i * n + j] / sum;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: y, requires_grad: false },
            Op::SoftmaxRows { a, mask: mask.map(|msk| msk.to_vec()) },
            ng,
        ))
    }

    /// Row-wise layer norm with learned gain/bias (each of length n).
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {} / bias {} vs {} cols",
                    self.value(gain).numel(),
                    self.value(bias).numel(),
                    n
                ),
            });
        }
        let x = &self.value(a).data;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let nf = F::from_f64(n as f64);
        let epsf = F::from_f64(eps);
        let mut y = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mut mean = F::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / nf;
            let mut var = F::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / nf;
            let s = (var + epsf).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) / s;
                y[i * n + j] = xhat * g[j] + b[j];
            }
        }
        let ng = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: y, requires_grad: false },
            Op::LayerNorm { a, gain, bias, eps },
            ng,
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<F> = self.value(a).data.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a);
        self.push(Tensor { shape, data, requires_grad: false }, Op::Gelu { a }, ng)
    }

    /// Gather rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.value(table).dims2();
        for &id in ids {
            if id >= v {
                return Err(Error::VocabId { id, vocab_size: v });
            }
        }
        let t = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor { shape: vec![ids.len(), d], data, requires_grad: false },
            Op::Gather { table, ids: ids.to_vec() },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols [{}, {}) of {}", start, start + len, n),
            });
        }
        let x = &self.value(a).data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor { shape: vec![m, len], data, requires_grad: false },
            Op::SliceCols { a, start, len },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).dims2().0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2();
            if pm != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", m, pm),
                });
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, pn) = self.value(p).dims2();
                let x = &self.value(p).data;
                data.extend_from_slice(&x[i * pn..(i + 1) * pn]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor { shape: vec![m, total], data, requires_grad: false },
            Op::ConcatCols { parts: parts.to_vec() },
            ng,
        ))
    }

    /// Sum over `positions` of the cross-entropy between `logits` rows and the
    /// integer `labels`. Mean-per-position is obtained by scaling afterwards.
    pub fn ce_masked_sum(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        positions: &[usize],
    ) -> Result<NodeId> {
        let (m, v) = self.value(logits).dims2();
        if positions.is_empty() {
            return Err(Error::EmptyMask);
        }
        if labels.len() != m {
            return Err(Error::ShapeMismatch {
                op: "ce_masked_sum",
                detail: format!("{} labels vs {} rows", labels.len(), m),
            });
        }
        let x = &self.value(logits).data;
        let mut total = F::zero();
        for &p in positions {
            assert!(p < m, "masked position {} out of {} rows", p, m);
            let label = labels[p];
            if label >= v {
                return Err(Error::VocabId { id: label, vocab_size: v });
            }
            let row = &x[p * v..(p + 1) * v];
            total = total + kernels::log_sum_exp(row) - row[label];
        }
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "ce_masked_sum" });
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CeMaskedSum { logits, labels: labels.to_vec(), positions: positions.to_vec() },
            ng,
        ))
    }

    /// Masked sum of squared differences against a constant target, divided by
    /// `denom`. With a full mask and `denom = numel` this is the mean-squared
    /// error over matrix entries.
    pub fn mse_vs_const(
        &mut self,
        a: NodeId,
        target: &Tensor<F>,
        mask: Option<&[bool]>,
        denom: f64,
    ) -> Result<NodeId> {
        if self.value(a).shape != target.shape {
            return Err(Error::ShapeMismatch {
                op: "mse_vs_const",
                detail: format!("{:?} vs {:?}", self.value(a).shape, target.shape),
            });
        }
        let x = &self.value(a).data;
        let mut total = F::zero();
        for (idx, (&xv, &tv)) in x.iter().zip(&target.data).enumerate() {
            if mask.map_or(true, |msk| msk[idx]) {
                let d = xv - tv;
                total = total + d * d;
            }
        }
        let out = total / F::from_f64(denom);
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "mse_vs_const" });
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::scalar(out),
            Op::MseVsConst {
                a,
                target: target.data.clone(),
                mask: mask.map(|msk| msk.to_vec()),
                denom,
            },
            ng,
        ))
    }

    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut total = F::zero();
        for &p in parts {
            total = total + self.value(p).item();
        }
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "sum_scalars" });
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::scalar(total), Op::SumScalars { parts: parts.to_vec() }, ng))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut total = F::zero();
        for &v in &self.value(a).data {
            total = total + v;
        }
        let ng = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll { a }, ng)
    }

    /// Elementwise multiply by a precomputed keep mask (0 or 1/(1-p) entries).
    pub fn dropout(&mut self, a: NodeId, keep: Vec<F>) -> NodeId {
        assert_eq!(keep.len(), self.value(a).numel());
        let data: Vec<F> =
            self.value(a).data.iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a);
        self.push(Tensor { shape, data, requires_grad: false }, Op::Dropout { a, keep }, ng)
    }

    pub fn all_values_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.all_finite())
    }

    /// Reverse pass from a scalar root. Consumes the tape.
    pub fn backward(mut self, root: NodeId) -> Result<Gradients<F>> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot { shape: self.value(root).shape.clone() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Inputs always precede outputs on the tape, so borrowing the
            // current node's op while mutating earlier grads is safe.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(&op, idx, &g, &mut grads);
            if let Op::Leaf = op {
                // keep leaf grads
                grads[idx] = Some(g);
            }
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[i].value.shape.clone(),
                    data,
                    requires_grad: false,
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accum(&self, grads: &mut [Option<Vec<F>>], id: NodeId, contrib: impl Fn(&mut [F])) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![F::zero(); self.nodes[id.0].value.numel()]);
        }
        contrib(slot.as_mut().unwrap());
    }

    fn propagate(&self, op: &Op<F>, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                if self.needs(*a) {
                    let bt = kernels::transpose(&self.value(*b).data, k, n);
                    let ga = kernels::matmul(g, &bt, m, n, k);
                    self.accum(grads, *a, |acc| kernels::axpy_inplace(acc, &ga));
                }
                if self.needs(*b) {
                    let at = kernels::transpose(&self.value(*a).data, m, k);
                    let gb = kernels::matmul(&at, g, k, m, n);
                    self.accum(grads, *b, |acc| kernels::axpy_inplace(acc, &gb));
                }
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, |acc| kernels::axpy_inplace(acc, g));
                self.accum(grads, *b, |acc| kernels::axpy_inplace(acc, g));
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, |acc| kernels::axpy_inplace(acc, g));
                self.accum(grads, *b, |acc| {
                    for (y, &x) in acc.iter_mut().zip(g) {
                        *y = *y - x;
                    }
                });
            }
            Op::MulElem { a, b } => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                self.accum(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] = acc[i] + g[i] * bv[i];
                    }
                });
                self.accum(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] = acc[i] + g[i] * av[i];
                    }
                });
            }
            Op::AddRowBroadcast { a, bias } => {
                let (m, n) = self.value(*a).dims2();
                self.accum(grads, *a, |acc| kernels::axpy_inplace(acc, g));
                self.accum(grads, *bias, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            acc[j] = acc[j] + g[i * n + j];
                        }
                    }
                });
            }
            Op::Scale { a, c } => {
                let cf = F::from_f64(*c);
                self.accum(grads, *a, |acc| {
                    for (y, &x) in acc.iter_mut().zip(g) {
                        *y = *y + x * cf;
                    }
                });
            }
            Op::Transpose { a } => {
                let (m, n) = self.value(*a).dims2();
                // output is n x m, so g is n x m
                let gt = kernels::transpose(g, n, m);
                self.accum(grads, *a, |acc| kernels::axpy_inplace(acc, &gt));
            }
            Op::SoftmaxRows { a, mask } => {
                let y = &self.nodes[idx].value.data;
                let (m, n) = self.value(*a).dims2();
                self.accum(grads, *a, |acc| {
                    for i in 0..m {
                        let valid = |j: usize| mask.as_ref().map_or(true, |msk| msk[i * n + j]);
                        let mut dot = F::zero();
                        for j in 0..n {
                            if valid(j) {
                                dot = dot + g[i * n + j] * y[i * n + j];
                            }
                        }
                        for j in 0..n {
                            if valid(j) {
                                acc[i * n + j] =
                                    acc[i * n + j] + y[i * n + j] * (g[i * n + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let (m, n) = self.value(*a).dims2();
                let x = &self.value(*a).data;
                let gv = &self.value(*gain).data;
                let nf = F::from_f64(n as f64);
                let epsf = F::from_f64(*eps);
                // Recompute row stats from the cached input.
                let mut xhat = vec![F::zero(); m * n];
                let mut inv_s = vec![F::zero(); m];
                for i in 0..m {
                    let row = &x[i * n..(i + 1) * n];
                    let mut mean = F::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean / nf;
                    let mut var = F::zero();
                    for &v in row {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var / nf;
                    let s = (var + epsf).sqrt();
                    inv_s[i] = F::one() / s;
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mean) * inv_s[i];
                    }
                }
                self.accum(grads, *bias, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            acc[j] = acc[j] + g[i * n + j];
                        }
                    }
                });
                self.accum(grads, *gain, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            acc[j] = acc[j] + g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                self.accum(grads, *a, |acc| {
                    for i in 0..m {
                        let mut mean_gy = F::zero();
                        let mut mean_gy_xhat = F::zero();
                        for j in 0..n {
                            let gy = g[i * n + j] * gv[j];
                            mean_gy = mean_gy + gy;
                            mean_gy_xhat = mean_gy_xhat + gy * xhat[i * n + j];
                        }
                        mean_gy = mean_gy / nf;
                        mean_gy_xhat = mean_gy_xhat / nf;
                        for j in 0..n {
                            let gy = g[i * n + j] * gv[j];
                            acc[i * n + j] = acc[i * n + j]
                                + inv_s[i] * (gy - mean_gy - xhat[i * n + j] * mean_gy_xhat);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let x = &self.value(*a).data;
                self.accum(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] = acc[i] + g[i] * gelu_bwd(x[i]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let (_, d) = self.value(*table).dims2();
                self.accum(grads, *table, |acc| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            acc[id * d + j] = acc[id * d + j] + g[row * d + j];
                        }
                    }
                });
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = self.value(*a).dims2();
                self.accum(grads, *a, |acc| {
                    for i in 0..m {
                        for j in 0..*len {
                            acc[i * n + start + j] = acc[i * n + start + j] + g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let m = self.value(parts[0]).dims2().0;
                let total: usize = parts.iter().map(|&p| self.value(p).dims2().1).sum();
                let mut offset = 0;
                for &p in parts {
                    let (_, pn) = self.value(p).dims2();
                    self.accum(grads, p, |acc| {
                        for i in 0..m {
                            for j in 0..pn {
                                acc[i * pn + j] = acc[i * pn + j] + g[i * total + offset + j];
                            }
                        }
                    });
                    offset += pn;
                }
            }
            Op::CeMaskedSum { logits, labels, positions } => {
                let (_, v) = self.value(*logits).dims2();
                let x = &self.value(*logits).data;
                let gs = g[0];
                self.accum(grads, *logits, |acc| {
                    for &p in positions {
                        let row = &x[p * v..(p + 1) * v];
                        let lse = kernels::log_sum_exp(row);
                        for j in 0..v {
                            let prob = (row[j] - lse).exp();
                            acc[p * v + j] = acc[p * v + j] + gs * prob;
                        }
                        acc[p * v + labels[p]] = acc[p * v + labels[p]] - gs;
                    }
                });
            }
            Op::MseVsConst { a, target, mask, denom } => {
                let x = &self.value(*a).data;
                let gs = g[0];
                let two_over = F::from_f64(2.0 / denom);
                self.accum(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        if mask.as_ref().map_or(true, |msk| msk[i]) {
                            acc[i] = acc[i] + gs * two_over * (x[i] - target[i]);
                        }
                    }
                });
            }
            Op::SumScalars { parts } => {
                for &p in parts {
                    self.accum(grads, p, |acc| {
                        acc[0] = acc[0] + g[0];
                    });
                }
            }
            Op::SumAll { a } => {
                let gs = g[0];
                self.accum(grads, *a, |acc| {
                    for y in acc.iter_mut() {
                        *y = *y + gs;
                    }
                });
            }
            Op::Dropout { a, keep } => {
                self.accum(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] = acc[i] + g[i] * keep[i];
                    }
                });
            }
        }
    }
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad(true));
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_norm_sq_is_w() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap().requires_grad(true));
        let sq = tape.mul_elem(w, w).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().requires_grad(true));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![0.0, 0.0]]));
        let y = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(y).data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_single_valid_position() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![5.0, 123.0]]));
        let y = tape.softmax_rows(x, Some(&[true, false])).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_closed_form() {
        // row [0, ln 3] -> [0.25, 0.75]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![0.0, 3.0f64.ln()]]));
        let y = tape.softmax_rows(x, None).unwrap();
        let out = &tape.value(y).data;
        assert!((out[0] - 0.25).abs() < 1e-12);
        assert!((out[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_degenerate_row_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0]]));
        assert!(matches!(
            tape.softmax_rows(x, Some(&[false, false])),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_bounded() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![0.3, -1.2, 4.0, 0.0], vec![-3.0, 2.0, 2.0, -0.5]]));
        let y = tape.softmax_rows(x, Some(&[true, true, true, false, true, true, true, true])).unwrap();
        let out = tape.value(y);
        for i in 0..2 {
            let mut s = 0.0;
            for j in 0..4 {
                let v = out.get2(i, j);
                assert!((0.0..=1.0).contains(&v));
                s += v;
            }
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.get2(0, 3), 0.0);
    }

    #[test]
    fn ce_uniform_logits_is_ln_v() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t2(&[vec![0.0; 4]]));
        let loss = tape.ce_masked_sum(logits, &[2], &[0]).unwrap();
        assert!((tape.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_saturated_is_near_zero() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t2(&[vec![0.0, 20.0, 0.0, 0.0]]));
        let loss = tape.ce_masked_sum(logits, &[1], &[0]).unwrap();
        assert!(tape.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn ce_two_positions_matches_per_position_oracle() {
        let rows = [vec![0.1, -0.4, 0.9], vec![1.2, 0.0, -0.3]];
        let labels = [2usize, 0usize];
        // per-position oracle via direct log-softmax
        let mut expected = 0.0;
        for (row, &lab) in rows.iter().zip(&labels) {
            let lse = crate::kernels::log_sum_exp(row.as_slice());
            expected += lse - row[lab];
        }
        expected /= 2.0;
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t2(&rows));
        let sum = tape.ce_masked_sum(logits, &labels, &[0, 1]).unwrap();
        let mean = tape.scale(sum, 0.5);
        assert!((tape.scalar_value(mean) - expected).abs() < 1e-12);
    }

    #[test]
    fn ce_empty_mask_errors() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t2(&[vec![0.0; 4]]));
        assert!(matches!(tape.ce_masked_sum(logits, &[0], &[]), Err(Error::EmptyMask)));
    }

    #[test]
    fn mse_identical_is_zero_and_uniform_vs_first_quarter() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(t2(&[vec![0.5, 0.5], vec![0.5, 0.5]]));
        let p_same = tape.value(h).clone();
        let z = tape.mse_vs_const(h, &p_same, None, 4.0).unwrap();
        assert_eq!(tape.scalar_value(z), 0.0);
        // H uniform vs [First] pattern: (4 * 0.25) / 4 = 0.25
        let first = t2(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let m = tape.mse_vs_const(h, &first, None, 4.0).unwrap();
        assert_eq!(tape.scalar_value(m), 0.25);
    }

    #[test]
    fn mse_matches_entrywise_oracle() {
        let mut rng_state = 12345u64;
        let mut next = || {
            // xorshift, keeps the test free of RNG deps
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state % 1000) as f64 / 1000.0
        };
        let h: Vec<f64> = (0..9).map(|_| next()).collect();
        let p: Vec<f64> = (0..9).map(|_| next()).collect();
        let expected: f64 =
            h.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 9.0;
        let mut tape = Tape::<f64>::new();
        let hn = tape.leaf(Tensor::new(vec![3, 3], h).unwrap());
        let pt = Tensor::new(vec![3, 3], p).unwrap();
        let m = tape.mse_vs_const(hn, &pt, None, 9.0).unwrap();
        assert!((tape.scalar_value(m) - expected).abs() < 1e-15);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gather_out_of_range_errors() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(Tensor::zeros(vec![4, 2]));
        assert!(matches!(tape.gather(table, &[5]), Err(Error::VocabId { id: 5, vocab_size: 4 })));
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]));
        let a = tape.slice_cols(x, 0, 2).unwrap();
        let b = tape.slice_cols(x, 2, 2).unwrap();
        let back = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(back).data, tape.value(x).data);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let a = tape.leaf(t2(&[vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]]).cast::<f32>());
            let b = tape.leaf(t2(&[vec![0.7, 0.8], vec![0.9, 1.0], vec![1.1, 1.2]]).cast::<f32>());
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(c, None).unwrap();
            tape.value(s).data.clone()
        };
        assert_eq!(run(), run());
    }
}

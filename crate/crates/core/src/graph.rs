//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Graph`] records every operation eagerly (forward values are computed
//! at insertion) and replays the tape backwards to accumulate gradients.
//! Every node is a rank-2 matrix; scalars are `1 x 1`. The op set is exactly
//! what the model needs — no general broadcasting.
//!
//! Batching convention: rows are (scene, agent) or (scene, hyperedge) pairs,
//! columns are feature channels. The indexed ops ([`Graph::gather_rows`],
//! [`Graph::indexed_sum`]) carry their index lists in `Rc` so a topology can
//! be reused across message-passing iterations without copies.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::{Real, Scalar};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf { param: Option<usize> },
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, k: S },
    AddScalar { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    SumAll { a: Var },
    SumCols { a: Var },
    SoftmaxRows { a: Var },
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Rc<Vec<usize>> },
    IndexedSum { a: Var, groups: Rc<Vec<Vec<usize>>> },
    RowScale { a: Var, s: Var },
    MinStack { parts: Vec<Var> },
}

#[derive(Debug)]
struct Node<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
    op: Op<S>,
}

/// Operation tape with eager forward evaluation.
#[derive(Debug, Default)]
pub struct Graph<S = Real> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    /// `(rows, cols)` of a node.
    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> Result<S> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar node, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.data[0])
    }

    /// Gradient buffer of a node after [`Graph::backward`]. `None` when the
    /// node is unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            data,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // -- leaves -------------------------------------------------------------

    /// Constant input (no gradient tracked beyond this node).
    pub fn input(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.rows(), t.cols(), t.data.clone(), Op::Leaf { param: None })
    }

    pub fn input_from(&mut self, rows: usize, cols: usize, data: Vec<S>) -> Var {
        assert_eq!(data.len(), rows * cols, "input_from shape mismatch");
        self.push(rows, cols, data, Op::Leaf { param: None })
    }

    /// Parameter leaf; `param_index` links the node back to its store slot so
    /// gradients can be exported after `backward`.
    pub fn param_leaf(&mut self, param_index: usize, t: &Tensor<S>) -> Var {
        self.push(
            t.rows(),
            t.cols(),
            t.data.clone(),
            Op::Leaf {
                param: Some(param_index),
            },
        )
    }

    // -- ops ----------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim(format!("matmul {m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::Matmul { a, b }))
    }

    fn elementwise_check(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (m, n) = self.shape(a);
        let (m2, n2) = self.shape(b);
        if (m, n) != (m2, n2) {
            return Err(Error::dim(format!("{what}: {m}x{n} vs {m2}x{n2}")));
        }
        Ok((m, n))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.elementwise_check(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(m, n, data, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.elementwise_check(a, b, "sub")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(m, n, data, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.elementwise_check(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(m, n, data, Op::Mul { a, b }))
    }

    /// `a + bias` where `bias` is `1 x cols`, broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(bias);
        if bm != 1 || bn != n {
            return Err(Error::dim(format!("add_bias: {m}x{n} + {bm}x{bn}")));
        }
        let mut data = self.data(a).to_vec();
        let b = self.data(bias);
        for row in data.chunks_mut(n) {
            for (x, &bv) in row.iter_mut().zip(b) {
                *x += bv;
            }
        }
        Ok(self.push(m, n, data, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let (m, n) = self.shape(a);
        let data = self.data(a).iter().map(|&x| x * k).collect();
        self.push(m, n, data, Op::Scale { a, k })
    }

    pub fn add_scalar(&mut self, a: Var, k: S) -> Var {
        let (m, n) = self.shape(a);
        let data = self.data(a).iter().map(|&x| x + k).collect();
        self.push(m, n, data, Op::AddScalar { a })
    }

    /// `1 - a`, a common gate complement.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, S::of(-1.0));
        self.add_scalar(neg, S::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        self.push(m, n, data, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data = self
            .data(a)
            .iter()
            .map(|&x| S::one() / (S::one() + (-x).exp()))
            .collect();
        self.push(m, n, data, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data = self.data(a).iter().map(|&x| x.tanh()).collect();
        self.push(m, n, data, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data = self.data(a).iter().map(|&x| x.exp()).collect();
        self.push(m, n, data, Op::Exp { a })
    }

    /// Sum of all elements, producing a `1 x 1` scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(1, 1, vec![s], Op::SumAll { a })
    }

    /// Row sums: `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data = self
            .data(a)
            .chunks(n)
            .map(|row| row.iter().copied().sum())
            .collect();
        self.push(m, 1, data, Op::SumCols { a })
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut data = vec![S::zero(); m * n];
        for (out_row, row) in data.chunks_mut(n).zip(self.data(a).chunks(n)) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (o, &x) in out_row.iter_mut().zip(row) {
                *o = (x - max).exp();
                z += *o;
            }
            for o in out_row.iter_mut() {
                *o = *o / z;
            }
        }
        self.push(m, n, data, Op::SoftmaxRows { a })
    }

    /// Column-wise concatenation of same-row-count nodes.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts"));
        }
        let m = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                return Err(Error::dim(format!("concat_cols: rows {pm} != {m} for part")));
            }
            total += pn;
        }
        let mut data = vec![S::zero(); m * total];
        let mut col0 = 0;
        for &p in parts {
            let (_, pn) = self.shape(p);
            let src = self.data(p);
            for i in 0..m {
                data[i * total + col0..i * total + col0 + pn]
                    .copy_from_slice(&src[i * pn..(i + 1) * pn]);
            }
            col0 += pn;
        }
        Ok(self.push(
            m,
            total,
            data,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Column window `[start, start + len)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(Error::dim(format!(
                "slice_cols [{start}, {}) of {n} cols",
                start + len
            )));
        }
        let src = self.data(a);
        let mut data = vec![S::zero(); m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(m, len, data, Op::SliceCols { a, start }))
    }

    /// Row gather: `out[p, :] = a[idx[p], :]`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (m, n) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim(format!("gather_rows index {bad} >= {m}")));
        }
        let src = self.data(a);
        let mut data = vec![S::zero(); idx.len() * n];
        for (p, &i) in idx.iter().enumerate() {
            data[p * n..(p + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(idx.len(), n, data, Op::GatherRows { a, idx }))
    }

    /// Grouped row sums: `out[g, :] = sum_{i in groups[g]} a[i, :]`.
    /// An empty group yields a zero row.
    pub fn indexed_sum(&mut self, a: Var, groups: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let (m, n) = self.shape(a);
        for grp in groups.iter() {
            if let Some(&bad) = grp.iter().find(|&&i| i >= m) {
                return Err(Error::dim(format!("indexed_sum index {bad} >= {m}")));
            }
        }
        let src = self.data(a);
        let mut data = vec![S::zero(); groups.len() * n];
        for (g, grp) in groups.iter().enumerate() {
            let out_row = &mut data[g * n..(g + 1) * n];
            for &i in grp {
                for (o, &x) in out_row.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                    *o += x;
                }
            }
        }
        Ok(self.push(groups.len(), n, data, Op::IndexedSum { a, groups }))
    }

    /// Scale each row of `a` (`m x n`) by the matching entry of `s` (`m x 1`).
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (sm, sn) = self.shape(s);
        if sm != m || sn != 1 {
            return Err(Error::dim(format!("row_scale: {m}x{n} by {sm}x{sn}")));
        }
        let mut data = self.data(a).to_vec();
        let sv = self.data(s);
        for (row, &k) in data.chunks_mut(n).zip(sv) {
            for x in row.iter_mut() {
                *x = *x * k;
            }
        }
        Ok(self.push(m, n, data, Op::RowScale { a, s }))
    }

    /// Element-wise minimum across a stack of `m x 1` nodes.
    /// Gradient flows to the argmin part only (first on ties).
    pub fn min_stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("min_stack of zero parts"));
        }
        let (m, n) = self.shape(parts[0]);
        if n != 1 {
            return Err(Error::dim("min_stack parts must be m x 1".to_string()));
        }
        for &p in parts {
            if self.shape(p) != (m, 1) {
                return Err(Error::dim("min_stack shape mismatch".to_string()));
            }
        }
        let mut data = self.data(parts[0]).to_vec();
        for &p in &parts[1..] {
            for (o, &x) in data.iter_mut().zip(self.data(p)) {
                if x < *o {
                    *o = x;
                }
            }
        }
        Ok(self.push(
            m,
            1,
            data,
            Op::MinStack {
                parts: parts.to_vec(),
            },
        ))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates per-node gradient buffers;
    /// parameter gradients are then exported by the caller.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got {}x{}",
                n.rows, n.cols
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            let dout = self.grads[id].take().expect("checked above");
            apply_vjp(&self.nodes, &mut self.grads, id, &dout);
            self.grads[id] = Some(dout);
        }
        Ok(())
    }

    /// Visit `(param_index, grad_slice)` for every parameter leaf that
    /// received a gradient.
    pub fn for_each_param_grad(&self, mut f: impl FnMut(usize, &[S])) {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                if let Some(Some(g)) = self.grads.get(id) {
                    f(p, g);
                }
            }
        }
    }
}

fn buf<'a, S: Scalar>(
    grads: &'a mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    v: Var,
) -> &'a mut [S] {
    let len = nodes[v.0].data.len();
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn apply_vjp<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    id: usize,
    dout: &[S],
) {
    match &nodes[id].op {
        Op::Leaf { .. } => {}
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let n = nodes[b.0].cols;
            // da += dout @ b^T ; db += a^T @ dout
            matmul_bt_acc(dout, &nodes[b.0].data, buf(grads, nodes, *a), m, n, k);
            matmul_at_acc(&nodes[a.0].data, dout, buf(grads, nodes, *b), k, m, n);
        }
        Op::Add { a, b } => {
            for (g, &d) in buf(grads, nodes, *a).iter_mut().zip(dout) {
                *g += d;
            }
            for (g, &d) in buf(grads, nodes, *b).iter_mut().zip(dout) {
                *g += d;
            }
        }
        Op::Sub { a, b } => {
            for (g, &d) in buf(grads, nodes, *a).iter_mut().zip(dout) {
                *g += d;
            }
            for (g, &d) in buf(grads, nodes, *b).iter_mut().zip(dout) {
                *g -= d;
            }
        }
        Op::Mul { a, b } => {
            for ((g, &d), &y) in buf(grads, nodes, *a)
                .iter_mut()
                .zip(dout)
                .zip(&nodes[b.0].data)
            {
                *g += d * y;
            }
            for ((g, &d), &x) in buf(grads, nodes, *b)
                .iter_mut()
                .zip(dout)
                .zip(&nodes[a.0].data)
            {
                *g += d * x;
            }
        }
        Op::AddBias { a, bias } => {
            for (g, &d) in buf(grads, nodes, *a).iter_mut().zip(dout) {
                *g += d;
            }
            let n = nodes[bias.0].cols;
            let gb = buf(grads, nodes, *bias);
            for row in dout.chunks(n) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        Op::Scale { a, k } => {
            let k = *k;
            for (g, &d) in buf(grads, nodes, *a).iter_mut().zip(dout) {
                *g += d * k;
            }
        }
        Op::AddScalar { a } => {
            for (g, &d) in buf(grads, nodes, *a).iter_mut().zip(dout) {
                *g += d;
            }
        }
        Op::Relu { a } => {
            // Derivative at the kink is taken as 0.
            let x = &nodes[a.0].data;
            for ((g, &d), &xv) in buf(grads, nodes, *a).iter_mut().zip(dout).zip(x) {
                if xv > S::zero() {
                    *g += d;
                }
            }
        }
        Op::Sigmoid { a } => {
            let y = &nodes[id].data;
            for ((g, &d), &yv) in buf(grads, nodes, *a).iter_mut().zip(dout).zip(y) {
                *g += d * yv * (S::one() - yv);
            }
        }
        Op::Tanh { a } => {
            let y = &nodes[id].data;
            for ((g, &d), &yv) in buf(grads, nodes, *a).iter_mut().zip(dout).zip(y) {
                *g += d * (S::one() - yv * yv);
            }
        }
        Op::Exp { a } => {
            let y = &nodes[id].data;
            for ((g, &d), &yv) in buf(grads, nodes, *a).iter_mut().zip(dout).zip(y) {
                *g += d * yv;
            }
        }
        Op::SumAll { a } => {
            let d = dout[0];
            for g in buf(grads, nodes, *a).iter_mut() {
                *g += d;
            }
        }
        Op::SumCols { a } => {
            let n = nodes[a.0].cols;
            for (row, &d) in buf(grads, nodes, *a).chunks_mut(n).zip(dout) {
                for g in row.iter_mut() {
                    *g += d;
                }
            }
        }
        Op::SoftmaxRows { a } => {
            let n = nodes[a.0].cols;
            let y = &nodes[id].data;
            let ga = buf(grads, nodes, *a);
            for ((grow, yrow), drow) in ga.chunks_mut(n).zip(y.chunks(n)).zip(dout.chunks(n)) {
                let dot: S = drow.iter().zip(yrow).map(|(&d, &yv)| d * yv).sum();
                for ((g, &d), &yv) in grow.iter_mut().zip(drow).zip(yrow) {
                    *g += yv * (d - dot);
                }
            }
        }
        Op::ConcatCols { parts } => {
            let total = nodes[id].cols;
            let m = nodes[id].rows;
            let mut col0 = 0;
            for &p in parts {
                let pn = nodes[p.0].cols;
                let gp = buf(grads, nodes, p);
                for i in 0..m {
                    for c in 0..pn {
                        gp[i * pn + c] += dout[i * total + col0 + c];
                    }
                }
                col0 += pn;
            }
        }
        Op::SliceCols { a, start } => {
            let n = nodes[a.0].cols;
            let len = nodes[id].cols;
            let ga = buf(grads, nodes, *a);
            for (i, drow) in dout.chunks(len).enumerate() {
                for (c, &d) in drow.iter().enumerate() {
                    ga[i * n + start + c] += d;
                }
            }
        }
        Op::GatherRows { a, idx } => {
            let n = nodes[a.0].cols;
            let ga = buf(grads, nodes, *a);
            for (p, &i) in idx.iter().enumerate() {
                for (g, &d) in ga[i * n..(i + 1) * n]
                    .iter_mut()
                    .zip(&dout[p * n..(p + 1) * n])
                {
                    *g += d;
                }
            }
        }
        Op::IndexedSum { a, groups } => {
            let n = nodes[a.0].cols;
            let ga = buf(grads, nodes, *a);
            for (g_idx, grp) in groups.iter().enumerate() {
                let drow = &dout[g_idx * n..(g_idx + 1) * n];
                for &i in grp {
                    for (g, &d) in ga[i * n..(i + 1) * n].iter_mut().zip(drow) {
                        *g += d;
                    }
                }
            }
        }
        Op::RowScale { a, s } => {
            let n = nodes[a.0].cols;
            let sv = &nodes[s.0].data;
            let adat = &nodes[a.0].data;
            {
                let ga = buf(grads, nodes, *a);
                for ((row, drow), &k) in ga.chunks_mut(n).zip(dout.chunks(n)).zip(sv) {
                    for (g, &d) in row.iter_mut().zip(drow) {
                        *g += d * k;
                    }
                }
            }
            let gs = buf(grads, nodes, *s);
            for ((g, drow), arow) in gs.iter_mut().zip(dout.chunks(n)).zip(adat.chunks(n)) {
                let mut acc = S::zero();
                for (&d, &x) in drow.iter().zip(arow) {
                    acc += d * x;
                }
                *g += acc;
            }
        }
        Op::MinStack { parts } => {
            let m = nodes[id].rows;
            for i in 0..m {
                let mut best = 0usize;
                let mut best_val = nodes[parts[0].0].data[i];
                for (k, &p) in parts.iter().enumerate().skip(1) {
                    let v = nodes[p.0].data[i];
                    if v < best_val {
                        best_val = v;
                        best = k;
                    }
                }
                buf(grads, nodes, parts[best])[i] += dout[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, rows: usize, cols: usize, data: &[f64]) -> Var {
        g.input_from(rows, cols, data.to_vec())
    }

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> df/dx = 6
        let mut g = Graph::<f64>::new();
        let x = g.param_leaf(0, &Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum x_i^2 for x = (1, 2) -> grad (2, 4)
        let mut g = Graph::<f64>::new();
        let x = g.param_leaf(0, &Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, 1, 2, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_forward_and_grads() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, 2, 1, &[5.0, 6.0]);
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.data(y), &[17.0, 39.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_rows_is_a_distribution() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, 2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 100.0]);
        let y = g.softmax_rows(x);
        for row in g.data(y).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn min_stack_routes_gradient_to_argmin() {
        let mut g = Graph::<f64>::new();
        let a = g.param_leaf(0, &Tensor::from_vec(&[2, 1], vec![1.0, 5.0]).unwrap());
        let b = g.param_leaf(1, &Tensor::from_vec(&[2, 1], vec![2.0, 4.0]).unwrap());
        let m = g.min_stack(&[a, b]).unwrap();
        assert_eq!(g.data(m), &[1.0, 4.0]);
        let loss = g.sum_all(m);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn indexed_sum_and_gather_roundtrip_grads() {
        let mut g = Graph::<f64>::new();
        let v = g.param_leaf(
            0,
            &Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let groups = Rc::new(vec![vec![0, 2], vec![], vec![1, 1]]);
        let s = g.indexed_sum(v, groups).unwrap();
        assert_eq!(g.data(s), &[6.0, 8.0, 0.0, 0.0, 6.0, 8.0]);
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        // row 1 participates twice in group 2
        assert_eq!(g.grad(v).unwrap(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_slice_inverse() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, 2, 1, &[9.0, 8.0]);
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = g.slice_cols(c, 2, 1).unwrap();
        assert_eq!(g.data(back), &[9.0, 8.0]);
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param_leaf(0, &Tensor::scalar(1.0));
        let y = g.param_leaf(1, &Tensor::scalar(2.0));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(y).is_none());
    }
}

//! Tape-based reverse-mode differentiation over a fixed operator set.
//!
//! The operator set is exactly what the policy network and the PPO loss
//! need: matmul, bias add, tanh, log-softmax, gather, elementwise arithmetic,
//! clamp, min, square, row-sum, and mean. No general autodiff; every
//! operator's backward rule is written out and checked against finite
//! differences in the tests.

/// Dense row-major matrix of f64. Vectors are `(n, 1)` or `(1, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Tanh(NodeId),
    LogSoftmax(NodeId),
    GatherCols(NodeId, Vec<usize>),
    SliceCols(NodeId, usize, usize),
    Exp(NodeId),
    Scale(NodeId, f64),
    MulElem(NodeId, NodeId),
    MulConst(NodeId, Vec<f64>),
    MinElem(NodeId, NodeId),
    Clamp(NodeId, f64, f64),
    Square(NodeId),
    RowSum(NodeId),
    MeanAll(NodeId),
    Neg(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The recording tape. Build a graph forward, then call `backward` on a
/// scalar node to get gradients for every leaf created with `param`.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.len(), 1, "not a scalar node");
        t.data[0]
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// A differentiable leaf (parameter).
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// `[B,I] x [I,O] -> [B,O]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.cols, tb.rows, "matmul shape mismatch");
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        self.push(Tensor::new(m, n, out), Op::MatMul(a, b))
    }

    /// `[B,O] + [1,O]` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        assert_eq!(tb.rows, 1);
        assert_eq!(tx.cols, tb.cols, "bias width mismatch");
        let mut out = tx.data.clone();
        for r in 0..tx.rows {
            for c in 0..tx.cols {
                out[r * tx.cols + c] += tb.data[c];
            }
        }
        self.push(Tensor::new(tx.rows, tx.cols, out), Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        self.push(Tensor::new(ta.rows, ta.cols, data), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        self.push(Tensor::new(ta.rows, ta.cols, data), Op::Sub(a, b))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|v| v.tanh()).collect();
        self.push(Tensor::new(t.rows, t.cols, data), Op::Tanh(x))
    }

    /// Row-wise log-softmax with the usual max-shift for stability.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows {
            let row = &t.data[r * t.cols..(r + 1) * t.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for c in 0..t.cols {
                out[r * t.cols + c] = row[c] - log_sum;
            }
        }
        self.push(Tensor::new(t.rows, t.cols, out), Op::LogSoftmax(x))
    }

    /// Pick one column per row: `[B,C], idx[B] -> [B,1]`.
    pub fn gather_cols(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let t = &self.nodes[x.0].value;
        assert_eq!(idx.len(), t.rows);
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < t.cols, "gather index out of range");
                t.at(r, c)
            })
            .collect();
        self.push(Tensor::new(t.rows, 1, data), Op::GatherCols(x, idx))
    }

    /// Columns `[start, end)` of every row.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let t = &self.nodes[x.0].value;
        assert!(start < end && end <= t.cols);
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows * w);
        for r in 0..t.rows {
            data.extend_from_slice(&t.data[r * t.cols + start..r * t.cols + end]);
        }
        self.push(Tensor::new(t.rows, w, data), Op::SliceCols(x, start, end))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|v| v.exp()).collect();
        self.push(Tensor::new(t.rows, t.cols, data), Op::Exp(x))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|v| v * k).collect();
        self.push(Tensor::new(t.rows, t.cols, data), Op::Scale(x, k))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        self.push(Tensor::new(ta.rows, ta.cols, data), Op::MulElem(a, b))
    }

    /// Elementwise multiply by a constant vector (not differentiated).
    pub fn mul_const(&mut self, x: NodeId, k: Vec<f64>) -> NodeId {
        let t = &self.nodes[x.0].value;
        assert_eq!(t.len(), k.len());
        let data = t.data.iter().zip(&k).map(|(x, y)| x * y).collect();
        self.push(Tensor::new(t.rows, t.cols, data), Op::MulConst(x, k))
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        self.push(Tensor::new(ta.rows, ta.cols, data), Op::MinElem(a, b))
    }

    /// Clamp into `[lo, hi]`; gradient passes inside the closed interval.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(Tensor::new(t.rows, t.cols, data), Op::Clamp(x, lo, hi))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|v| v * v).collect();
        self.push(Tensor::new(t.rows, t.cols, data), Op::Square(x))
    }

    /// Sum along each row: `[B,C] -> [B,1]`.
    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let data = (0..t.rows)
            .map(|r| t.data[r * t.cols..(r + 1) * t.cols].iter().sum())
            .collect();
        self.push(Tensor::new(t.rows, 1, data), Op::RowSum(x))
    }

    /// Mean over all entries: `-> [1,1]`.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(x))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|v| -v).collect();
        self.push(Tensor::new(t.rows, t.cols, data), Op::Neg(x))
    }

    /// Reverse pass from a scalar node. Returns one gradient tensor per node;
    /// look up leaves by their `NodeId`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            // Re-insert so callers can read intermediate grads too.
            grads[i] = Some(g.clone());
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                    // dA = dC * B^T
                    let mut da = Tensor::zeros(m, k);
                    for i2 in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g.data[i2 * n + j] * tb.data[p * n + j];
                            }
                            da.data[i2 * k + p] = acc;
                        }
                    }
                    // dB = A^T * dC
                    let mut db = Tensor::zeros(k, n);
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i2 in 0..m {
                                acc += ta.data[i2 * k + p] * g.data[i2 * n + j];
                            }
                            db.data[p * n + j] = acc;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let tb = &self.nodes[b.0].value;
                    let mut db = Tensor::zeros(1, tb.cols);
                    let tx = &self.nodes[x.0].value;
                    for r in 0..tx.rows {
                        for c in 0..tx.cols {
                            db.data[c] += g.data[r * tx.cols + c];
                        }
                    }
                    accumulate(&mut grads, *x, g.clone());
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    let neg = Tensor::new(g.rows, g.cols, g.data.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *b, neg);
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let data = g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(g.rows, g.cols, data));
                }
                Op::LogSoftmax(x) => {
                    // d x_j = g_j - softmax_j * sum(g)
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let gs: f64 = g.data[r * y.cols..(r + 1) * y.cols].iter().sum();
                        for c in 0..y.cols {
                            let p = y.at(r, c).exp();
                            dx.data[r * y.cols + c] = g.at(r, c) - p * gs;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherCols(x, idx) => {
                    let tx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(tx.rows, tx.cols);
                    for (r, &c) in idx.iter().enumerate() {
                        dx.data[r * tx.cols + c] = g.data[r];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols(x, start, _end) => {
                    let tx = &self.nodes[x.0].value;
                    let w = node.value.cols;
                    let mut dx = Tensor::zeros(tx.rows, tx.cols);
                    for r in 0..tx.rows {
                        for c in 0..w {
                            dx.data[r * tx.cols + start + c] = g.data[r * w + c];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    let data = g.data.iter().zip(&y.data).map(|(gv, yv)| gv * yv).collect();
                    accumulate(&mut grads, *x, Tensor::new(g.rows, g.cols, data));
                }
                Op::Scale(x, k) => {
                    let data = g.data.iter().map(|v| v * k).collect();
                    accumulate(&mut grads, *x, Tensor::new(g.rows, g.cols, data));
                }
                Op::MulElem(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = g.data.iter().zip(&tb.data).map(|(gv, bv)| gv * bv).collect();
                    let db = g.data.iter().zip(&ta.data).map(|(gv, av)| gv * av).collect();
                    accumulate(&mut grads, *a, Tensor::new(g.rows, g.cols, da));
                    accumulate(&mut grads, *b, Tensor::new(g.rows, g.cols, db));
                }
                Op::MulConst(x, k) => {
                    let data = g.data.iter().zip(k).map(|(gv, kv)| gv * kv).collect();
                    accumulate(&mut grads, *x, Tensor::new(g.rows, g.cols, data));
                }
                Op::MinElem(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut da = Tensor::zeros(g.rows, g.cols);
                    let mut db = Tensor::zeros(g.rows, g.cols);
                    for i2 in 0..g.data.len() {
                        if ta.data[i2] <= tb.data[i2] {
                            da.data[i2] = g.data[i2];
                        } else {
                            db.data[i2] = g.data[i2];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Clamp(x, lo, hi) => {
                    let tx = &self.nodes[x.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&tx.data)
                        .map(|(gv, xv)| if *xv >= *lo && *xv <= *hi { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(g.rows, g.cols, data));
                }
                Op::Square(x) => {
                    let tx = &self.nodes[x.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&tx.data)
                        .map(|(gv, xv)| 2.0 * gv * xv)
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(g.rows, g.cols, data));
                }
                Op::RowSum(x) => {
                    let tx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(tx.rows, tx.cols);
                    for r in 0..tx.rows {
                        for c in 0..tx.cols {
                            dx.data[r * tx.cols + c] = g.data[r];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanAll(x) => {
                    let tx = &self.nodes[x.0].value;
                    let k = g.data[0] / tx.len() as f64;
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(tx.rows, tx.cols, vec![k; tx.len()]),
                    );
                }
                Op::Neg(x) => {
                    let data = g.data.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *x, Tensor::new(g.rows, g.cols, data));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data.iter_mut().zip(&g.data) {
                *e += v;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node; zeros if the node was unused.
    pub fn of(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(like.rows, like.cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng::CounterRng;

    /// Central finite differences of an arbitrary scalar function of a flat
    /// parameter vector. Used as the gradient oracle throughout.
    pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, at: &[f64], step: f64) -> Vec<f64> {
        let mut grad = vec![0.0; at.len()];
        let mut x = at.to_vec();
        for i in 0..at.len() {
            let orig = x[i];
            x[i] = orig + step;
            let hi = f(&x);
            x[i] = orig - step;
            let lo = f(&x);
            x[i] = orig;
            grad[i] = (hi - lo) / (2.0 * step);
        }
        grad
    }

    fn composite_loss(params: &[f64]) -> f64 {
        // 2-layer net into a PPO-flavored loss, exercising every operator.
        let mut tape = Tape::new();
        let w1 = tape.param(Tensor::new(3, 4, params[0..12].to_vec()));
        let b1 = tape.param(Tensor::new(1, 4, params[12..16].to_vec()));
        let w2 = tape.param(Tensor::new(4, 3, params[16..28].to_vec()));
        let b2 = tape.param(Tensor::new(1, 3, params[28..31].to_vec()));

        let x = tape.constant(Tensor::new(2, 3, vec![0.3, -0.2, 0.9, -0.5, 0.1, 0.4]));
        let h_pre = tape.matmul(x, w1);
        let h_pre = tape.add_bias(h_pre, b1);
        let h = tape.tanh(h_pre);
        let out = tape.matmul(h, w2);
        let out = tape.add_bias(out, b2);
        let logits = tape.slice_cols(out, 0, 2);
        let values = tape.slice_cols(out, 2, 3);

        let lp = tape.log_softmax(logits);
        let lp_a = tape.gather_cols(lp, vec![1, 0]);
        let old = tape.constant(Tensor::new(2, 1, vec![-0.7, -0.6]));
        let diff = tape.sub(lp_a, old);
        let ratio = tape.exp(diff);
        let adv = vec![0.8, -1.2];
        let surr1 = tape.mul_const(ratio, adv.clone());
        let clipped = tape.clamp(ratio, 0.8, 1.2);
        let surr2 = tape.mul_const(clipped, adv);
        let min = tape.min(surr1, surr2);
        let mean_surr = tape.mean_all(min);
        let pol = tape.neg(mean_surr);

        let ret = tape.constant(Tensor::new(2, 1, vec![0.5, -0.5]));
        let verr = tape.sub(values, ret);
        let vsq = tape.square(verr);
        let vloss = tape.mean_all(vsq);

        let p = tape.exp(lp);
        let plp = tape.mul(p, lp);
        let rs = tape.row_sum(plp);
        let negent = tape.mean_all(rs);

        let vscaled = tape.scale(vloss, 0.5);
        let escaled = tape.scale(negent, 0.01);
        let a = tape.add(pol, vscaled);
        let loss = tape.add(a, escaled);
        tape.scalar_value(loss)
    }

    #[test]
    fn composite_loss_matches_finite_differences() {
        let mut rng = CounterRng::from_key(&[0xabc]);
        for case in 0..5 {
            let params: Vec<f64> = (0..31).map(|_| rng.normal() * 0.5).collect();

            // Rebuild the tape to extract analytic grads.
            let mut tape = Tape::new();
            let w1 = tape.param(Tensor::new(3, 4, params[0..12].to_vec()));
            let b1 = tape.param(Tensor::new(1, 4, params[12..16].to_vec()));
            let w2 = tape.param(Tensor::new(4, 3, params[16..28].to_vec()));
            let b2 = tape.param(Tensor::new(1, 3, params[28..31].to_vec()));
            let x = tape.constant(Tensor::new(2, 3, vec![0.3, -0.2, 0.9, -0.5, 0.1, 0.4]));
            let h_pre = tape.matmul(x, w1);
            let h_pre = tape.add_bias(h_pre, b1);
            let h = tape.tanh(h_pre);
            let out = tape.matmul(h, w2);
            let out = tape.add_bias(out, b2);
            let logits = tape.slice_cols(out, 0, 2);
            let values = tape.slice_cols(out, 2, 3);
            let lp = tape.log_softmax(logits);
            let lp_a = tape.gather_cols(lp, vec![1, 0]);
            let old = tape.constant(Tensor::new(2, 1, vec![-0.7, -0.6]));
            let diff = tape.sub(lp_a, old);
            let ratio = tape.exp(diff);
            let adv = vec![0.8, -1.2];
            let surr1 = tape.mul_const(ratio, adv.clone());
            let clipped = tape.clamp(ratio, 0.8, 1.2);
            let surr2 = tape.mul_const(clipped, adv);
            let min = tape.min(surr1, surr2);
            let mean_surr = tape.mean_all(min);
            let pol = tape.neg(mean_surr);
            let ret = tape.constant(Tensor::new(2, 1, vec![0.5, -0.5]));
            let verr = tape.sub(values, ret);
            let vsq = tape.square(verr);
            let vloss = tape.mean_all(vsq);
            let p = tape.exp(lp);
            let plp = tape.mul(p, lp);
            let rs = tape.row_sum(plp);
            let negent = tape.mean_all(rs);
            let vscaled = tape.scale(vloss, 0.5);
            let escaled = tape.scale(negent, 0.01);
            let aa = tape.add(pol, vscaled);
            let loss = tape.add(aa, escaled);
            let grads = tape.backward(loss);

            let mut analytic = Vec::new();
            analytic.extend(grads.of(w1, tape.value(w1)).data);
            analytic.extend(grads.of(b1, tape.value(b1)).data);
            analytic.extend(grads.of(w2, tape.value(w2)).data);
            analytic.extend(grads.of(b2, tape.value(b2)).data);

            let numeric = finite_diff(&mut composite_loss, &params, 1e-5);
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let denom = n.abs().max(1e-8);
                assert!(
                    (a - n).abs() / denom < 1e-6,
                    "case {case} coord {i}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn constant_loss_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.mean_all(c);
        let grads = tape.backward(loss);
        assert_eq!(grads.of(w, tape.value(w)).data, vec![0.0; 4]);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let build = |combine: bool, pick_first: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let w = tape.param(Tensor::new(1, 3, vec![0.2, -0.4, 0.6]));
            let sq = tape.square(w);
            let l1 = tape.mean_all(sq);
            let th = tape.tanh(w);
            let l2 = tape.mean_all(th);
            let loss = if combine {
                tape.add(l1, l2)
            } else if pick_first {
                l1
            } else {
                l2
            };
            let grads = tape.backward(loss);
            grads.of(w, tape.value(w)).data
        };
        let combined = build(true, false);
        let g1 = build(false, true);
        let g2 = build(false, false);
        for i in 0..3 {
            assert!((combined[i] - (g1[i] + g2[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_scale_linearity() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let s = tape.scale(w, 3.0);
        let loss = tape.mean_all(s);
        let grads = tape.backward(loss);
        assert_eq!(grads.of(w, tape.value(w)).data, vec![0.75; 4]);
    }
}

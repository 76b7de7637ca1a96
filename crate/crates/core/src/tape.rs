//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! Operations evaluate eagerly and record themselves; `backward` replays the
//! tape in reverse. A tape lives for one training step and is then dropped,
//! so there is no checkpointing and no graph reuse.
//!
//! The fake-quantization op carries its own gradient rules:
//! - input: straight-through, blocked where the index clips,
//! - interval: `index - z` (the dequantized lattice coordinate), which is
//!   the exact local derivative both inside the range and at saturation,
//! - zero offset: `-s` at saturation, zero inside the range where the
//!   offset cancels out of the dequantization.

use crate::error::{Error, Result};
use crate::parallel::for_each_row;
use crate::param::{ParamId, ParamStore};
use crate::quant::{round_half_away, QuantSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Leaf(ParamId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Silu(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    ConcatCols(NodeId, NodeId),
    Reshape(NodeId),
    FakeQuant { x: NodeId, s: NodeId, z: Option<NodeId>, spec: QuantSpec },
    /// Mean over batch rows of the squared row difference (training loss).
    MseBatchMean(NodeId, NodeId),
    /// Mean over all elements of the squared difference (reconstruction loss).
    MseMean(NodeId, NodeId),
    Sum(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus, clamped away from zero so downstream
/// interval math never sees a non-positive value.
#[inline]
pub fn softplus(x: f32) -> f32 {
    let y = x.max(0.0) + (-x.abs()).exp().ln_1p();
    y.max(f32::MIN_POSITIVE)
}

/// Inverse of softplus, computed in f64.
pub fn softplus_inv(y: f32) -> f32 {
    let y = y as f64;
    assert!(y > 0.0, "softplus_inv needs a positive argument");
    if y > 30.0 {
        return y as f32;
    }
    (y.exp_m1()).ln() as f32
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to a node.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    /// Register a parameter leaf; its value is snapshotted onto the tape.
    pub fn leaf(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Leaf(id), store.value(id).clone())
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (batch, in_dim) = self.value(x).dims2()?;
        let (out_dim, w_in) = self.value(w).dims2()?;
        if w_in != in_dim {
            return Err(Error::Shape(format!(
                "linear: input width {in_dim} vs weight width {w_in}"
            )));
        }
        if self.value(b).numel() != out_dim {
            return Err(Error::Shape(format!(
                "linear: bias length {} vs {out_dim} outputs",
                self.value(b).numel()
            )));
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let mut out = vec![0.0f32; batch * out_dim];
        for_each_row(&mut out, out_dim, |r, slot| {
            let xr = &xs[r * in_dim..(r + 1) * in_dim];
            for (o, y) in slot.iter_mut().enumerate() {
                let wr = &ws[o * in_dim..(o + 1) * in_dim];
                let mut acc = bs[o] as f64;
                for i in 0..in_dim {
                    acc += xr[i] as f64 * wr[i] as f64;
                }
                *y = acc as f32;
            }
        });
        let value = Tensor::matrix(batch, out_dim, out)?;
        Ok(self.push(Op::Linear { x, w, b }, value))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(Op::Silu(x), value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(softplus);
        self.push(Op::Softplus(x), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let value = self.value(x).map(|v| c * v);
        self.push(Op::Scale(x, c), value)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::Shape(format!("concat_cols: {ra} rows vs {rb}")));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        let value = Tensor::matrix(ra, ca + cb, out)?;
        Ok(self.push(Op::ConcatCols(a, b), value))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Fake quantization. `s` has one entry (per-tensor) or one per row of
    /// `x` (per-channel / per-sample); `z` defaults to zero and may have one
    /// entry or match `s`.
    pub fn fake_quant(
        &mut self,
        x: NodeId,
        s: NodeId,
        z: Option<NodeId>,
        spec: QuantSpec,
    ) -> Result<NodeId> {
        let (rows, cols) = fq_rows_cols(self.value(x));
        let s_len = self.value(s).numel();
        if s_len != 1 && s_len != rows {
            return Err(Error::Shape(format!(
                "fake_quant: interval count {s_len} must be 1 or match {rows} rows"
            )));
        }
        for &sv in self.value(s).data() {
            if !(sv > 0.0) || !sv.is_finite() {
                return Err(Error::Invalid(format!("fake_quant: interval {sv} must be positive")));
            }
        }
        if let Some(z) = z {
            let z_len = self.value(z).numel();
            if z_len != 1 && z_len != s_len {
                return Err(Error::Shape(format!(
                    "fake_quant: offset count {z_len} must be 1 or match intervals ({s_len})"
                )));
            }
        }
        let (n, p) = (spec.n() as f32, spec.p() as f32);
        let xs = self.value(x).data();
        let ss = self.value(s).data();
        let zs = z.map(|id| self.value(id).data().to_vec()).unwrap_or_else(|| vec![0.0]);
        let mut out = vec![0.0f32; xs.len()];
        for r in 0..rows {
            let sv = ss[if s_len == 1 { 0 } else { r }];
            let zv = zs[zi(zs.len(), s_len, r)];
            for c in 0..cols {
                let v = xs[r * cols + c];
                let q = (round_half_away(v / sv) + zv).clamp(n, p);
                out[r * cols + c] = sv * (q - zv);
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(Op::FakeQuant { x, s, z, spec }, value))
    }

    pub fn mse_batch_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mse_batch_mean: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let rows = ta.shape()[0].max(1);
        let mut acc = 0.0f64;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = (x - y) as f64;
            acc += d * d;
        }
        let value = Tensor::scalar((acc / rows as f64) as f32);
        Ok(self.push(Op::MseBatchMean(a, b), value))
    }

    pub fn mse_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mse_mean: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let n = ta.numel().max(1);
        let mut acc = 0.0f64;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = (x - y) as f64;
            acc += d * d;
        }
        let value = Tensor::scalar((acc / n as f64) as f32);
        Ok(self.push(Op::MseMean(a, b), value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for &v in self.value(x).data() {
            acc += v as f64;
        }
        let value = Tensor::scalar(acc as f32);
        self.push(Op::Sum(x), value)
    }

    /// Reverse pass from a scalar root. Gradients stay on the tape; use
    /// [`Tape::grads_into`] to push them into parameter accumulators.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = self.grads[idx].clone() else { continue };
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, &op, &gout);
        }
        Ok(())
    }

    /// Accumulate leaf gradients into their parameters.
    pub fn grads_into(&self, store: &mut ParamStore) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(pid) = node.op {
                if let Some(g) = &self.grads[idx] {
                    store.accumulate_grad(pid, g);
                }
            }
        }
    }

    fn add_grad(&mut self, id: NodeId, contribution: Vec<f32>) {
        debug_assert_eq!(self.nodes[id.0].value.numel(), contribution.len());
        match &mut self.grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn backward_op(&mut self, idx: usize, op: &Op, gout: &[f32]) {
        match *op {
            Op::Const | Op::Leaf(_) => {}
            Op::Linear { x, w, b } => {
                let (batch, in_dim) = self.value(x).dims2().unwrap();
                let out_dim = self.value(b).numel();
                let xs = self.value(x).data();
                let ws = self.value(w).data();

                let mut dx = vec![0.0f32; batch * in_dim];
                for_each_row(&mut dx, in_dim, |r, slot| {
                    let gr = &gout[r * out_dim..(r + 1) * out_dim];
                    for (i, d) in slot.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for o in 0..out_dim {
                            acc += gr[o] as f64 * ws[o * in_dim + i] as f64;
                        }
                        *d = acc as f32;
                    }
                });

                let mut dw = vec![0.0f32; out_dim * in_dim];
                for_each_row(&mut dw, in_dim, |o, slot| {
                    for (i, d) in slot.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for r in 0..batch {
                            acc += gout[r * out_dim + o] as f64 * xs[r * in_dim + i] as f64;
                        }
                        *d = acc as f32;
                    }
                });

                let mut db = vec![0.0f32; out_dim];
                for (o, d) in db.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for r in 0..batch {
                        acc += gout[r * out_dim + o] as f64;
                    }
                    *d = acc as f32;
                }

                self.add_grad(x, dx);
                self.add_grad(w, dw);
                self.add_grad(b, db);
            }
            Op::Silu(x) => {
                let dx: Vec<f32> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                self.add_grad(x, dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f32> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_grad(x, dx);
            }
            Op::Softplus(x) => {
                let dx: Vec<f32> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| g * sigmoid(v))
                    .collect();
                self.add_grad(x, dx);
            }
            Op::Add(a, b) => {
                self.add_grad(a, gout.to_vec());
                self.add_grad(b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                self.add_grad(a, gout.to_vec());
                self.add_grad(b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let da: Vec<f32> = self.value(b).data().iter().zip(gout).map(|(&v, &g)| g * v).collect();
                let db: Vec<f32> = self.value(a).data().iter().zip(gout).map(|(&v, &g)| g * v).collect();
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            Op::Scale(x, c) => {
                self.add_grad(x, gout.iter().map(|g| c * g).collect());
            }
            Op::ConcatCols(a, b) => {
                let (ra, ca) = self.value(a).dims2().unwrap();
                let (_, cb) = self.value(b).dims2().unwrap();
                let mut da = vec![0.0f32; ra * ca];
                let mut db = vec![0.0f32; ra * cb];
                for r in 0..ra {
                    let g = &gout[r * (ca + cb)..(r + 1) * (ca + cb)];
                    da[r * ca..(r + 1) * ca].copy_from_slice(&g[..ca]);
                    db[r * cb..(r + 1) * cb].copy_from_slice(&g[ca..]);
                }
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            Op::Reshape(x) => {
                self.add_grad(x, gout.to_vec());
            }
            Op::FakeQuant { x, s, z, spec } => {
                let (rows, cols) = fq_rows_cols(self.value(x));
                let s_len = self.value(s).numel();
                let z_vals = z
                    .map(|id| self.value(id).data().to_vec())
                    .unwrap_or_else(|| vec![0.0]);
                let (n, p) = (spec.n() as f32, spec.p() as f32);
                let xs = self.value(x).data();
                let ss = self.value(s).data();

                let mut dx = vec![0.0f32; xs.len()];
                let mut ds64 = vec![0.0f64; s_len];
                let mut dz64 = vec![0.0f64; z_vals.len()];
                for r in 0..rows {
                    let si = if s_len == 1 { 0 } else { r };
                    let sv = ss[si];
                    let zidx = zi(z_vals.len(), s_len, r);
                    let zv = z_vals[zidx];
                    for c in 0..cols {
                        let e = r * cols + c;
                        let g = gout[e];
                        let q = round_half_away(xs[e] / sv) + zv;
                        let clipped = q < n || q > p;
                        let qc = q.clamp(n, p);
                        // d(dequant)/ds is the lattice coordinate qc - zv in
                        // every branch; rounding holds it constant locally.
                        ds64[si] += g as f64 * (qc - zv) as f64;
                        if clipped {
                            dz64[zidx] += g as f64 * -(sv as f64);
                        } else {
                            dx[e] = g;
                        }
                    }
                }
                self.add_grad(x, dx);
                self.add_grad(s, ds64.iter().map(|&v| v as f32).collect());
                if let Some(z) = z {
                    self.add_grad(z, dz64.iter().map(|&v| v as f32).collect());
                }
            }
            Op::MseBatchMean(a, b) => {
                let rows = self.value(a).shape()[0].max(1) as f32;
                let g = gout[0];
                let da: Vec<f32> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| g * 2.0 * (x - y) / rows)
                    .collect();
                let db: Vec<f32> = da.iter().map(|&v| -v).collect();
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            Op::MseMean(a, b) => {
                let count = self.value(a).numel().max(1) as f32;
                let g = gout[0];
                let da: Vec<f32> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| g * 2.0 * (x - y) / count)
                    .collect();
                let db: Vec<f32> = da.iter().map(|&v| -v).collect();
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            Op::Sum(x) => {
                let g = gout[0];
                self.add_grad(x, vec![g; self.value(x).numel()]);
            }
        }
    }
}

/// Rows/cols view for fake quantization: 2-D tensors as-is, 1-D as one row.
fn fq_rows_cols(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        other => panic!("fake_quant expects 1-D or 2-D tensors, got {other:?}"),
    }
}

#[inline]
fn zi(z_len: usize, s_len: usize, row: usize) -> usize {
    if z_len == 1 {
        0
    } else if s_len == 1 {
        0
    } else {
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamStore;
    use crate::quant::QuantState;
    use crate::reference::{central_difference, relative_error};
    use crate::rng::RandomStream;

    #[test]
    fn linear_identity_and_bias() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = store.add("b", Tensor::vector(vec![0.0, 0.0]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let (wn, bn) = (tape.leaf(&store, w), tape.leaf(&store, b));
        let y = tape.linear(x, wn, bn).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let mut store2 = ParamStore::new();
        let w2 = store2.add("w", Tensor::matrix(2, 2, vec![5.0, -1.0, 2.0, 0.5]).unwrap());
        let b2 = store2.add("b", Tensor::vector(vec![2.0, 3.0]));
        let mut tape2 = Tape::new();
        let x0 = tape2.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let (wn2, bn2) = (tape2.leaf(&store2, w2), tape2.leaf(&store2, b2));
        let y2 = tape2.linear(x0, wn2, bn2).unwrap();
        assert_eq!(tape2.value(y2).data(), &[2.0, 3.0]);
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        let mut rng = RandomStream::seed(3);
        let x = rng.normal_tensor(vec![3, 4]);
        let w = rng.normal_tensor(vec![5, 4]);
        let b = rng.normal_tensor(vec![5]);
        let mut store = ParamStore::new();
        let wid = store.add("w", w.clone());
        let bid = store.add("b", b.clone());
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let (wn, bn) = (tape.leaf(&store, wid), tape.leaf(&store, bid));
        let y = tape.linear(xn, wn, bn).unwrap();
        for r in 0..3 {
            for o in 0..5 {
                let mut want = b.data()[o] as f64;
                for i in 0..4 {
                    want += x.data()[r * 4 + i] as f64 * w.data()[o * 4 + i] as f64;
                }
                let got = tape.value(y).data()[r * 5 + o];
                assert!((got as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn linear_rejects_mismatched_shapes() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = store.add("b", Tensor::vector(vec![0.0; 2]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.0; 2]).unwrap());
        let (wn, bn) = (tape.leaf(&store, w), tape.leaf(&store, b));
        assert!(tape.linear(x, wn, bn).is_err());
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - 2.0f32.ln()).abs() < 1e-6);
        assert!((softplus(100.0) - 100.0).abs() < 1e-4);
        let tiny = softplus(-100.0);
        assert!(tiny > 0.0 && tiny < 1e-6);
        assert!(softplus(-300.0) > 0.0);
    }

    #[test]
    fn softplus_inv_round_trips() {
        for s in [0.1f32, 0.693147, 2.0, 40.0] {
            let b = softplus_inv(s);
            assert!((softplus(b) - s).abs() / s < 1e-5, "s={s} b={b}");
        }
        assert!((softplus_inv(0.1) + 2.2522).abs() < 1e-3);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let wn = tape.leaf(&store, w);
        let sq = tape.mul(wn, wn).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        tape.grads_into(&mut store);
        assert_eq!(store.param(w).grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_param_grad_stays_zero() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0]));
        let b = store.add("b", Tensor::vector(vec![5.0]));
        let mut tape = Tape::new();
        let an = tape.leaf(&store, a);
        let _unused = tape.leaf(&store, b);
        let loss = tape.sum(an);
        tape.backward(loss).unwrap();
        tape.grads_into(&mut store);
        assert_eq!(store.param(b).grad.data(), &[0.0]);
        assert_eq!(store.param(a).grad.data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates_in_store() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![3.0]));
        let mut tape = Tape::new();
        let wn = tape.leaf(&store, w);
        let loss = tape.sum(wn);
        tape.backward(loss).unwrap();
        tape.grads_into(&mut store);
        tape.grads_into(&mut store);
        assert_eq!(store.param(w).grad.data(), &[2.0]);
    }

    /// Finite-difference check for a 2-layer MLP: every parameter of
    /// y = W2 silu(W1 x + b1) + b2 against the analytic gradient.
    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = RandomStream::seed(17);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", rng.normal_tensor(vec![4, 3]));
        let b1 = store.add("b1", rng.normal_tensor(vec![4]));
        let w2 = store.add("w2", rng.normal_tensor(vec![2, 4]));
        let b2 = store.add("b2", rng.normal_tensor(vec![2]));
        let x = rng.normal_tensor(vec![5, 3]);
        let target = rng.normal_tensor(vec![5, 2]);

        let loss_fn = |store: &ParamStore| -> f32 {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let (w1n, b1n) = (tape.leaf(store, w1), tape.leaf(store, b1));
            let (w2n, b2n) = (tape.leaf(store, w2), tape.leaf(store, b2));
            let h = tape.linear(xn, w1n, b1n).unwrap();
            let h = tape.silu(h);
            let y = tape.linear(h, w2n, b2n).unwrap();
            let tn = tape.constant(target.clone());
            let loss = tape.mse_batch_mean(y, tn).unwrap();
            tape.value(loss).item()
        };

        store.zero_grads();
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let (w1n, b1n) = (tape.leaf(&store, w1), tape.leaf(&store, b1));
        let (w2n, b2n) = (tape.leaf(&store, w2), tape.leaf(&store, b2));
        let h = tape.linear(xn, w1n, b1n).unwrap();
        let h = tape.silu(h);
        let y = tape.linear(h, w2n, b2n).unwrap();
        let tn = tape.constant(target.clone());
        let loss = tape.mse_batch_mean(y, tn).unwrap();
        tape.backward(loss).unwrap();
        tape.grads_into(&mut store);

        for pid in [w1, b1, w2, b2] {
            let numel = store.value(pid).numel();
            for i in (0..numel).step_by(2) {
                let analytic = store.param(pid).grad.data()[i] as f64;
                let x0 = store.value(pid).data()[i];
                let mut probe = |v: f32| {
                    let mut s2 = ParamStore::new();
                    let ids = [w1, b1, w2, b2];
                    for id in ids {
                        let mut t = store.value(id).clone();
                        if id == pid {
                            t.data_mut()[i] = v;
                        }
                        s2.add(store.name(id), t);
                    }
                    loss_fn(&s2)
                };
                let fd = central_difference(&mut probe, x0, 1e-3);
                let err = relative_error(analytic, fd);
                assert!(err < 1e-3, "param {} idx {i}: analytic {analytic} fd {fd}", store.name(pid));
            }
        }
    }

    #[test]
    fn fake_quant_forward_and_ste_branches() {
        let spec = QuantSpec::symmetric(3).unwrap();
        let mut store = ParamStore::new();
        let s = store.add("s", Tensor::scalar(0.1));
        let mut tape = Tape::new();
        // 0.37 -> lattice 4 -> clipped to 3; -0.04 -> 0; 0.25 -> ties away to 3.
        let x = tape.constant(Tensor::vector(vec![0.37, -0.04, 0.25, -100.0]));
        let sn = tape.leaf(&store, s);
        let y = tape.fake_quant(x, sn, None, spec).unwrap();
        let got = tape.value(y).data().to_vec();
        assert!((got[0] - 0.3).abs() < 1e-7);
        assert!((got[1] - 0.0).abs() < 1e-7);
        assert!((got[2] - 0.3).abs() < 1e-7);
        assert!((got[3] + 0.3).abs() < 1e-7);

        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let dx = tape.grad(x).unwrap();
        // Clipped entries block the straight-through path.
        assert_eq!(dx, &[0.0, 1.0, 1.0, 0.0]);
        let ds = tape.grad(sn).unwrap();
        // Lattice coordinates: 3 (clipped high), 0, 3, -3 (clipped low).
        assert!((ds[0] - (3.0 + 0.0 + 3.0 - 3.0)).abs() < 1e-6);
    }

    #[test]
    fn fake_quant_saturation_offset_gradient() {
        let spec = QuantSpec::asymmetric(4).unwrap();
        let mut store = ParamStore::new();
        let s = store.add("s", Tensor::scalar(0.5));
        let z = store.add("z", Tensor::scalar(7.0));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![100.0, -100.0, 0.2]));
        let sn = tape.leaf(&store, s);
        let zn = tape.leaf(&store, z);
        let y = tape.fake_quant(x, sn, Some(zn), spec).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        // dz = -s for each clipped element, 0 inside the range.
        assert!((tape.grad(zn).unwrap()[0] - (-0.5 - 0.5)).abs() < 1e-6);
        // ds = (p - z) + (n - z) + round(0.4) = 8 + (-7) + 0.
        assert!((tape.grad(sn).unwrap()[0] - (8.0 - 7.0 + 0.0)).abs() < 1e-6);
    }

    #[test]
    fn fake_quant_interval_gradient_matches_fd() {
        let spec = QuantSpec::symmetric(4).unwrap();
        let mut rng = RandomStream::seed(23);
        let mut checked = 0;
        while checked < 40 {
            let x = rng.normal_tensor(vec![16]);
            let s0 = 0.2 + 0.3 * rng.uniform();
            // Keep every element away from rounding and clipping boundaries.
            let eps = 1e-3;
            let safe = x.data().iter().all(|&v| {
                let t = v / s0;
                (t.fract().abs() - 0.5).abs() > 0.05 && (t.abs() - 7.5).abs() > 0.2
            });
            if !safe {
                continue;
            }
            checked += 1;
            let target = rng.normal_tensor(vec![16]);

            let loss_at = |s: f32| {
                let mut store = ParamStore::new();
                let sid = store.add("s", Tensor::scalar(s));
                let mut tape = Tape::new();
                let xn = tape.constant(x.clone());
                let sn = tape.leaf(&store, sid);
                let y = tape.fake_quant(xn, sn, None, spec).unwrap();
                let tn = tape.constant(target.clone());
                let l = tape.mse_mean(y, tn).unwrap();
                tape.value(l).item()
            };

            let mut store = ParamStore::new();
            let sid = store.add("s", Tensor::scalar(s0));
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let sn = tape.leaf(&store, sid);
            let y = tape.fake_quant(xn, sn, None, spec).unwrap();
            let tn = tape.constant(target.clone());
            let l = tape.mse_mean(y, tn).unwrap();
            tape.backward(l).unwrap();
            let analytic = tape.grad(sn).unwrap()[0] as f64;
            let fd = central_difference(loss_at, s0, eps * s0);
            let err = relative_error(analytic, fd);
            assert!(err < 1e-3, "s0={s0} analytic={analytic} fd={fd}");
        }
    }

    #[test]
    fn per_row_intervals_quantize_rows_independently() {
        let spec = QuantSpec::symmetric(4).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![0.6, -0.6, 0.6, -0.6]).unwrap());
        let s = tape.constant(Tensor::vector(vec![0.1, 0.4]));
        let y = tape.fake_quant(x, s, None, spec).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] - 0.6).abs() < 1e-6); // 6 * 0.1
        assert!((got[2] - 0.8).abs() < 1e-6); // round(1.5) ties away -> 2 * 0.4
    }

    #[test]
    fn fake_quant_rejects_nonpositive_interval() {
        let spec = QuantSpec::symmetric(4).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0]));
        let s = tape.constant(Tensor::scalar(0.0));
        assert!(tape.fake_quant(x, s, None, spec).is_err());
    }

    #[test]
    fn mse_batch_mean_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let l = tape.mse_batch_mean(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let same = tape.mse_batch_mean(a, a).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }
}

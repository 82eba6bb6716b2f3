//! Recording tape and reverse-mode gradients.
//!
//! Every operation validates shapes, computes its forward value, checks the
//! result is finite and appends a record. `backward` walks the records in
//! exact reverse order, so identical tapes yield bit-identical gradients.
//! Tapes are rebuilt per forward pass and are single-threaded; distinct
//! tapes are independent.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::gemm::{count_nonzero, gemm_nn, gemm_nt, gemm_tn};
use super::{check_finite, NodeRef, Tensor};
use crate::error::{Error, Result};
use crate::geometry::IndexMatrix;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Elementwise nonlinearities available on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

/// Pooling modes for grouped reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Mean,
}

struct Value {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

enum Op {
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Activation {
        x: usize,
        kind: Activation,
    },
    LinearAct {
        x: usize,
        w: usize,
        b: usize,
        kind: Activation,
    },
    EdgeConv {
        f: usize,
        w: usize,
        b: usize,
        /// Reference row that won the channelwise max, per (point, channel).
        argmax: Arc<[u32]>,
    },
    GatherGroup {
        x: usize,
        idx: Arc<IndexMatrix>,
    },
    ReduceGroup {
        x: usize,
        kind: Reduce,
        /// Winning in-group position per (group, channel); Max only.
        argmax: Option<Arc<[u32]>>,
    },
    ConcatCols {
        a: usize,
        b: usize,
    },
    Hadamard {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    MeanRows {
        x: usize,
    },
    BroadcastRows {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
    ChamferToFixed {
        s: usize,
        target: Arc<[[f64; 3]]>,
        /// Nearest target row per sample row.
        nearest_target: Arc<[u32]>,
        /// Nearest sample row per target row.
        nearest_sample: Arc<[u32]>,
    },
    OffsetMean {
        from: usize,
        to: usize,
    },
    CrossEntropyLogits {
        logits: usize,
        label: usize,
        softmax: Arc<Vec<f64>>,
    },
}

struct Record {
    op: Op,
    out: usize,
}

struct Inner {
    values: Vec<Value>,
    records: Vec<Record>,
}

/// Recorded computation graph for one forward pass.
pub struct Tape {
    id: u64,
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner {
                values: Vec::new(),
                records: Vec::new(),
            }),
        }
    }

    /// Registers a trainable leaf; gradients will be available for it.
    pub fn param(&self, t: &Tensor) -> Tensor {
        self.push_leaf(t, true)
    }

    /// Registers a non-trainable leaf. Gradients still flow through it to
    /// tracked inputs of downstream ops, but none are accumulated for it.
    pub fn constant(&self, t: &Tensor) -> Tensor {
        self.push_leaf(t, false)
    }

    pub fn record_count(&self) -> usize {
        self.inner.borrow().records.len()
    }

    fn push_leaf(&self, t: &Tensor, requires_grad: bool) -> Tensor {
        let shape = t.shape().to_vec();
        let data = t.storage();
        let index = self.push_value(shape.clone(), data.clone(), requires_grad);
        Tensor::from_parts(
            shape,
            data,
            Some(NodeRef {
                tape: self.id,
                index,
            }),
        )
    }

    fn push_value(&self, shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(Value {
            shape,
            data,
            requires_grad,
        });
        inner.values.len() - 1
    }

    fn intern(&self, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(nr) if nr.tape == self.id => Ok(nr.index),
            Some(_) => Err(Error::Tape("tensor belongs to a different tape".into())),
            None => Ok(self.push_value(t.shape().to_vec(), t.storage(), false)),
        }
    }

    fn requires_grad(&self, idx: usize) -> bool {
        self.inner.borrow().values[idx].requires_grad
    }

    fn push_output(&self, shape: Vec<usize>, data: Vec<f64>, rg: bool, op: Op) -> Tensor {
        let data = Arc::new(data);
        let index = self.push_value(shape.clone(), data.clone(), rg);
        self.inner.borrow_mut().records.push(Record { op, out: index });
        Tensor::from_parts(
            shape,
            data,
            Some(NodeRef {
                tape: self.id,
                index,
            }),
        )
    }

    /// y = x * w + bias, rows of x against columns of w.
    pub fn linear(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (r, a) = rank2(x, "linear input")?;
        let (wa, wb) = rank2(w, "linear weight")?;
        if a != wa {
            return Err(Error::Dimension(format!(
                "linear: input width {a} vs weight rows {wa}"
            )));
        }
        if b.shape() != [wb] {
            return Err(Error::Dimension(format!(
                "linear: bias shape {:?}, expected [{wb}]",
                b.shape()
            )));
        }
        let mut out = vec![0.0; r * wb];
        for row in out.chunks_exact_mut(wb) {
            row.copy_from_slice(b.data());
        }
        gemm_nn(r, a, wb, 1.0, x.data(), w.data(), 1.0, &mut out);
        check_finite(&out, "linear")?;
        let (xi, wi, bi) = (self.intern(x)?, self.intern(w)?, self.intern(b)?);
        let rg = self.requires_grad(xi) || self.requires_grad(wi) || self.requires_grad(bi);
        Ok(self.push_output(
            vec![r, wb],
            out,
            rg,
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
            },
        ))
    }

    /// Fused linear layer and elementwise activation; numerically identical
    /// to `linear` followed by `activation` while skipping the intermediate
    /// tensor and its gradient buffer.
    pub fn linear_act(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        kind: Activation,
    ) -> Result<Tensor> {
        let (r, a) = rank2(x, "linear input")?;
        let (wa, wb) = rank2(w, "linear weight")?;
        if a != wa {
            return Err(Error::Dimension(format!(
                "linear: input width {a} vs weight rows {wa}"
            )));
        }
        if b.shape() != [wb] {
            return Err(Error::Dimension(format!(
                "linear: bias shape {:?}, expected [{wb}]",
                b.shape()
            )));
        }
        let mut out = vec![0.0; r * wb];
        for row in out.chunks_exact_mut(wb) {
            row.copy_from_slice(b.data());
        }
        gemm_nn(r, a, wb, 1.0, x.data(), w.data(), 1.0, &mut out);
        match kind {
            Activation::Relu => {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            Activation::Sigmoid => {
                for v in out.iter_mut() {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
            }
            Activation::Tanh => {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
        }
        check_finite(&out, "linear_act")?;
        let (xi, wi, bi) = (self.intern(x)?, self.intern(w)?, self.intern(b)?);
        let rg = self.requires_grad(xi) || self.requires_grad(wi) || self.requires_grad(bi);
        Ok(self.push_output(
            vec![r, wb],
            out,
            rg,
            Op::LinearAct {
                x: xi,
                w: wi,
                b: bi,
                kind,
            },
        ))
    }

    /// Elementwise activation of any-shaped tensor.
    pub fn activation(&self, x: &Tensor, kind: Activation) -> Result<Tensor> {
        let out: Vec<f64> = match kind {
            Activation::Relu => x.data().iter().map(|v| v.max(0.0)).collect(),
            Activation::Sigmoid => x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            Activation::Tanh => x.data().iter().map(|v| v.tanh()).collect(),
        };
        check_finite(&out, "activation")?;
        let xi = self.intern(x)?;
        let rg = self.requires_grad(xi);
        Ok(self.push_output(x.shape().to_vec(), out, rg, Op::Activation { x: xi, kind }))
    }

    /// Edge convolution with channelwise max over neighbors.
    ///
    /// Per point i and neighbor j the edge feature is concat(f_i, f_j - f_i);
    /// it passes through one linear layer and relu, then the k neighbor
    /// responses are max-pooled per channel. The weight holds the two halves
    /// stacked: rows 0..c_in act on f_i, rows c_in..2c_in on f_j - f_i.
    pub fn edge_conv(
        &self,
        f: &Tensor,
        w: &Tensor,
        b: &Tensor,
        neighbors: &IndexMatrix,
    ) -> Result<Tensor> {
        let (n, c_in) = rank2(f, "edge_conv features")?;
        let (wr, c_out) = rank2(w, "edge_conv weight")?;
        if wr != 2 * c_in {
            return Err(Error::Dimension(format!(
                "edge_conv: weight rows {wr}, expected {}",
                2 * c_in
            )));
        }
        if b.shape() != [c_out] {
            return Err(Error::Dimension(format!(
                "edge_conv: bias shape {:?}, expected [{c_out}]",
                b.shape()
            )));
        }
        if neighbors.rows() != n {
            return Err(Error::Dimension(format!(
                "edge_conv: {} neighbor rows for {n} points",
                neighbors.rows()
            )));
        }
        neighbors.check_bounds(n)?;

        // relu(max_j([f_i, f_j - f_i] W + b)) == relu(A_i + max_j B_j + b)
        // with A = F (Wt - Wb) and B = F Wb; the pooled max and argmax only
        // depend on B since A_i is constant over j.
        let wt = &w.data()[..c_in * c_out];
        let wb = &w.data()[c_in * c_out..];
        let mut contrast = vec![0.0; c_in * c_out];
        for (c, (t, bo)) in contrast.iter_mut().zip(wt.iter().zip(wb.iter())) {
            *c = t - bo;
        }
        let mut a_mat = vec![0.0; n * c_out];
        gemm_nn(n, c_in, c_out, 1.0, f.data(), &contrast, 0.0, &mut a_mat);
        let mut b_mat = vec![0.0; n * c_out];
        gemm_nn(n, c_in, c_out, 1.0, f.data(), wb, 0.0, &mut b_mat);

        let bias = b.data();
        let mut out = vec![0.0; n * c_out];
        let mut argmax = vec![0u32; n * c_out];
        for i in 0..n {
            let nbrs = neighbors.row(i);
            let oi = &mut out[i * c_out..(i + 1) * c_out];
            let am = &mut argmax[i * c_out..(i + 1) * c_out];
            let first = nbrs[0] as usize;
            oi.copy_from_slice(&b_mat[first * c_out..(first + 1) * c_out]);
            am.fill(nbrs[0]);
            for &r in &nbrs[1..] {
                let row = &b_mat[r as usize * c_out..(r as usize + 1) * c_out];
                for (o, &v) in row.iter().enumerate() {
                    if v > oi[o] {
                        oi[o] = v;
                        am[o] = r;
                    }
                }
            }
            let ai = &a_mat[i * c_out..(i + 1) * c_out];
            for o in 0..c_out {
                oi[o] = (oi[o] + ai[o] + bias[o]).max(0.0);
            }
        }
        drop(a_mat);
        drop(b_mat);
        check_finite(&out, "edge_conv")?;
        let (fi, wi, bi) = (self.intern(f)?, self.intern(w)?, self.intern(b)?);
        let rg = self.requires_grad(fi) || self.requires_grad(wi) || self.requires_grad(bi);
        Ok(self.push_output(
            vec![n, c_out],
            out,
            rg,
            Op::EdgeConv {
                f: fi,
                w: wi,
                b: bi,
                argmax: argmax.into(),
            },
        ))
    }

    /// out[i, j, :] = x[idx[i, j], :]
    pub fn gather_group(&self, x: &Tensor, idx: &IndexMatrix) -> Result<Tensor> {
        let (n, c) = rank2(x, "gather_group input")?;
        idx.check_bounds(n)?;
        let (m, k) = (idx.rows(), idx.k());
        let mut out = vec![0.0; m * k * c];
        let data = x.data();
        for (slot, &r) in out.chunks_exact_mut(c).zip(idx.entries()) {
            slot.copy_from_slice(&data[r as usize * c..(r as usize + 1) * c]);
        }
        let xi = self.intern(x)?;
        let rg = self.requires_grad(xi);
        Ok(self.push_output(
            vec![m, k, c],
            out,
            rg,
            Op::GatherGroup {
                x: xi,
                idx: Arc::new(idx.clone()),
            },
        ))
    }

    /// Pools a grouped m x k x c tensor over its k axis.
    pub fn reduce_group(&self, x: &Tensor, kind: Reduce) -> Result<Tensor> {
        let dims = x.shape();
        if dims.len() != 3 {
            return Err(Error::Dimension(format!(
                "reduce_group: expected rank-3 input, got {dims:?}"
            )));
        }
        let (m, k, c) = (dims[0], dims[1], dims[2]);
        if k == 0 {
            return Err(Error::Dimension("reduce_group: empty group".into()));
        }
        let data = x.data();
        let mut out = vec![0.0; m * c];
        let argmax = match kind {
            Reduce::Max => {
                let mut arg = vec![0u32; m * c];
                for i in 0..m {
                    let oi = &mut out[i * c..(i + 1) * c];
                    let ai = &mut arg[i * c..(i + 1) * c];
                    oi.copy_from_slice(&data[i * k * c..i * k * c + c]);
                    for j in 1..k {
                        let row = &data[(i * k + j) * c..(i * k + j + 1) * c];
                        for (o, &v) in row.iter().enumerate() {
                            if v > oi[o] {
                                oi[o] = v;
                                ai[o] = j as u32;
                            }
                        }
                    }
                }
                Some(Arc::from(arg))
            }
            Reduce::Mean => {
                let inv = 1.0 / k as f64;
                for i in 0..m {
                    let oi = &mut out[i * c..(i + 1) * c];
                    for j in 0..k {
                        let row = &data[(i * k + j) * c..(i * k + j + 1) * c];
                        for o in 0..c {
                            oi[o] += row[o];
                        }
                    }
                    for v in oi.iter_mut() {
                        *v *= inv;
                    }
                }
                None
            }
        };
        let xi = self.intern(x)?;
        let rg = self.requires_grad(xi);
        Ok(self.push_output(
            vec![m, c],
            out,
            rg,
            Op::ReduceGroup {
                x: xi,
                kind,
                argmax,
            },
        ))
    }

    /// Concatenates along the last axis; leading dims must agree.
    /// Accepts rank-2 (columns) or rank-3 (channels) operands.
    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(Error::Dimension(format!(
                "concat_cols: incompatible ranks {sa:?} vs {sb:?}"
            )));
        }
        if sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Dimension(format!(
                "concat_cols: row mismatch {sa:?} vs {sb:?}"
            )));
        }
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            out.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let (ai, bi) = (self.intern(a)?, self.intern(b)?);
        let rg = self.requires_grad(ai) || self.requires_grad(bi);
        Ok(self.push_output(shape, out, rg, Op::ConcatCols { a: ai, b: bi }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn hadamard(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "hadamard")?;
        let out: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x * y)
            .collect();
        check_finite(&out, "hadamard")?;
        let (ai, bi) = (self.intern(a)?, self.intern(b)?);
        let rg = self.requires_grad(ai) || self.requires_grad(bi);
        Ok(self.push_output(a.shape().to_vec(), out, rg, Op::Hadamard { a: ai, b: bi }))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "add")?;
        let out: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x + y)
            .collect();
        check_finite(&out, "add")?;
        let (ai, bi) = (self.intern(a)?, self.intern(b)?);
        let rg = self.requires_grad(ai) || self.requires_grad(bi);
        Ok(self.push_output(a.shape().to_vec(), out, rg, Op::Add { a: ai, b: bi }))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, x: &Tensor, factor: f64) -> Result<Tensor> {
        if !factor.is_finite() {
            return Err(Error::Numeric("scale: non-finite factor".into()));
        }
        let out: Vec<f64> = x.data().iter().map(|v| v * factor).collect();
        check_finite(&out, "scale")?;
        let xi = self.intern(x)?;
        let rg = self.requires_grad(xi);
        Ok(self.push_output(x.shape().to_vec(), out, rg, Op::Scale { x: xi, factor }))
    }

    /// Column means over all rows: m x c -> 1 x c.
    pub fn mean_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (m, c) = rank2(x, "mean_rows input")?;
        if m == 0 {
            return Err(Error::Dimension("mean_rows: no rows".into()));
        }
        let mut out = vec![0.0; c];
        for row in x.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
        let xi = self.intern(x)?;
        let rg = self.requires_grad(xi);
        Ok(self.push_output(vec![1, c], out, rg, Op::MeanRows { x: xi }))
    }

    /// Duplicates a 1 x c row m times.
    pub fn broadcast_rows(&self, x: &Tensor, m: usize) -> Result<Tensor> {
        let (r, c) = rank2(x, "broadcast_rows input")?;
        if r != 1 {
            return Err(Error::Dimension(format!(
                "broadcast_rows: expected one row, got {r}"
            )));
        }
        if m == 0 {
            return Err(Error::Dimension("broadcast_rows: zero rows requested".into()));
        }
        let mut out = Vec::with_capacity(m * c);
        for _ in 0..m {
            out.extend_from_slice(x.data());
        }
        let xi = self.intern(x)?;
        let rg = self.requires_grad(xi);
        Ok(self.push_output(vec![m, c], out, rg, Op::BroadcastRows { x: xi }))
    }

    /// Reinterprets the same values under a new shape.
    pub fn reshape(&self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {:?} changes element count",
                x.shape(),
                shape
            )));
        }
        let xi = self.intern(x)?;
        let rg = self.requires_grad(xi);
        let data: Arc<Vec<f64>> = x.storage();
        let index = self.push_value(shape.clone(), data.clone(), rg);
        self.inner
            .borrow_mut()
            .records
            .push(Record {
                op: Op::Reshape { x: xi },
                out: index,
            });
        Ok(Tensor::from_parts(
            shape,
            data,
            Some(NodeRef {
                tape: self.id,
                index,
            }),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let total: f64 = x.data().iter().sum();
        check_finite(std::slice::from_ref(&total), "sum")?;
        let xi = self.intern(x)?;
        let rg = self.requires_grad(xi);
        Ok(self.push_output(vec![1], vec![total], rg, Op::Sum { x: xi }))
    }

    /// Symmetric mean-of-squared-nearest-distances between the tracked
    /// sample rows and a fixed target set; gradients flow to the samples.
    pub fn chamfer_to_fixed(&self, s: &Tensor, target: &[[f64; 3]]) -> Result<Tensor> {
        let (m, c) = rank2(s, "chamfer sample")?;
        if c != 3 {
            return Err(Error::Dimension(format!(
                "chamfer: expected 3 columns, got {c}"
            )));
        }
        if m == 0 || target.is_empty() {
            return Err(Error::Contract("chamfer: empty point set".into()));
        }
        let rows = s.to_rows3()?;
        let (sum_s, nearest_target) = nearest_sum(&rows, target);
        let (sum_t, nearest_sample) = nearest_sum(target, &rows);
        let value = sum_s / m as f64 + sum_t / target.len() as f64;
        check_finite(std::slice::from_ref(&value), "chamfer")?;
        let si = self.intern(s)?;
        let rg = self.requires_grad(si);
        Ok(self.push_output(
            vec![1],
            vec![value],
            rg,
            Op::ChamferToFixed {
                s: si,
                target: target.to_vec().into(),
                nearest_target: nearest_target.into(),
                nearest_sample: nearest_sample.into(),
            },
        ))
    }

    /// Mean Euclidean length of paired row displacements, smoothed at zero.
    pub fn offset_mean(&self, from: &Tensor, to: &Tensor) -> Result<Tensor> {
        same_shape(from, to, "offset_mean")?;
        let (m, c) = rank2(from, "offset_mean input")?;
        if m == 0 {
            return Err(Error::Dimension("offset_mean: no rows".into()));
        }
        let mut total = 0.0;
        for i in 0..m {
            let mut d2 = 0.0;
            for j in 0..c {
                let d = to.data()[i * c + j] - from.data()[i * c + j];
                d2 += d * d;
            }
            total += (d2 + OFFSET_EPS).sqrt();
        }
        let value = total / m as f64;
        check_finite(std::slice::from_ref(&value), "offset_mean")?;
        let (fi, ti) = (self.intern(from)?, self.intern(to)?);
        let rg = self.requires_grad(fi) || self.requires_grad(ti);
        Ok(self.push_output(vec![1], vec![value], rg, Op::OffsetMean { from: fi, to: ti }))
    }

    /// Cross-entropy of one logit row against a class index, computed via a
    /// numerically stable log-softmax.
    pub fn cross_entropy_logits(&self, logits: &Tensor, label: usize) -> Result<Tensor> {
        let n = logits.numel();
        if logits.shape().len() > 2 || (logits.shape().len() == 2 && logits.shape()[0] != 1) {
            return Err(Error::Dimension(format!(
                "cross_entropy: expected a single logit row, got {:?}",
                logits.shape()
            )));
        }
        if label >= n {
            return Err(Error::Contract(format!(
                "cross_entropy: label {label} out of range for {n} classes"
            )));
        }
        let z = logits.data();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in z {
            denom += (v - max).exp();
        }
        let lse = max + denom.ln();
        let value = lse - z[label];
        check_finite(std::slice::from_ref(&value), "cross_entropy")?;
        let softmax: Vec<f64> = z.iter().map(|v| (v - max).exp() / denom).collect();
        let li = self.intern(logits)?;
        let rg = self.requires_grad(li);
        Ok(self.push_output(
            vec![1],
            vec![value],
            rg,
            Op::CrossEntropyLogits {
                logits: li,
                label,
                softmax: softmax.into(),
            },
        ))
    }

    /// Reverse-mode gradients of a scalar loss for every leaf on this tape.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let node = match loss.node() {
            Some(nr) if nr.tape == self.id => nr.index,
            Some(_) => return Err(Error::Tape("loss belongs to a different tape".into())),
            None => return Err(Error::Tape("loss was not produced on this tape".into())),
        };
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..inner.values.len()).map(|_| None).collect();
        grads[node] = Some(vec![1.0]);

        for rec in inner.records.iter().rev() {
            let Some(go) = grads[rec.out].take() else {
                continue;
            };
            backward_op(&inner, &rec.op, rec.out, &go, &mut grads);
        }

        let shapes = inner.values.iter().map(|v| v.shape.clone()).collect();
        Ok(Gradients {
            tape: self.id,
            entries: grads,
            shapes,
        })
    }
}

const OFFSET_EPS: f64 = 1e-12;

/// Gradients produced by [`Tape::backward`], queryable per leaf tensor.
pub struct Gradients {
    tape: u64,
    entries: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`. Leaves the loss never
    /// touched get zero gradients of the matching shape.
    pub fn get(&self, t: &Tensor) -> Result<Tensor> {
        let node = match t.node() {
            Some(nr) if nr.tape == self.tape => nr.index,
            Some(_) => return Err(Error::Tape("tensor belongs to a different tape".into())),
            None => return Err(Error::Tape("tensor is not a tape node".into())),
        };
        match &self.entries[node] {
            Some(g) => Tensor::new(self.shapes[node].clone(), g.clone()),
            None => Ok(Tensor::zeros(self.shapes[node].clone())),
        }
    }
}

fn rank2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!(
            "{what}: expected rank-2 tensor, got {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// One-directional nearest squared distances: for each row of `from`, the
/// min squared distance to `to`, summed, plus the winning indices.
fn nearest_sum(from: &[[f64; 3]], to: &[[f64; 3]]) -> (f64, Vec<u32>) {
    let mut total = 0.0;
    let mut nearest = Vec::with_capacity(from.len());
    for p in from {
        let mut best = f64::INFINITY;
        let mut best_i = 0u32;
        for (i, q) in to.iter().enumerate() {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let dz = p[2] - q[2];
            let d2 = dx * dx + dy * dy + dz * dz;
            if d2 < best {
                best = d2;
                best_i = i as u32;
            }
        }
        total += best;
        nearest.push(best_i);
    }
    (total, nearest)
}

fn acc<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    idx: usize,
    numel: usize,
) -> &'a mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; numel])
}

/// Shared backward for the (fused) linear layers. When the upstream
/// gradient is mostly zeros (typical below a max pool) the per-entry path
/// beats the dense GEMMs by orders of magnitude.
fn linear_backward(
    inner: &Inner,
    x: usize,
    w: usize,
    b: usize,
    go: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let val = |i: usize| -> &Arc<Vec<f64>> { &inner.values[i].data };
    let rg = |i: usize| -> bool { inner.values[i].requires_grad };
    let (r, a) = (inner.values[x].shape[0], inner.values[x].shape[1]);
    let bdim = inner.values[w].shape[1];

    let nnz = count_nonzero(go);
    let sparse = nnz * 8 < r * bdim && (rg(x) || rg(w));
    if sparse {
        let wv = val(w);
        let xv = val(x);
        // Transposed weight grad buffer keeps per-entry updates contiguous.
        let mut wt: Vec<f64> = Vec::new();
        if rg(x) {
            wt = vec![0.0; a * bdim];
            for q in 0..a {
                for j in 0..bdim {
                    wt[j * a + q] = wv[q * bdim + j];
                }
            }
        }
        let mut dwt = vec![0.0; bdim * a];
        for i in 0..r {
            let row = &go[i * bdim..(i + 1) * bdim];
            for (j, &v) in row.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                if rg(x) {
                    let dst = acc(grads, x, r * a);
                    let src = &wt[j * a..(j + 1) * a];
                    for (d, s) in dst[i * a..(i + 1) * a].iter_mut().zip(src) {
                        *d += v * s;
                    }
                }
                if rg(w) {
                    let src = &xv[i * a..(i + 1) * a];
                    for (d, s) in dwt[j * a..(j + 1) * a].iter_mut().zip(src) {
                        *d += v * s;
                    }
                }
            }
        }
        if rg(w) {
            let dw = acc(grads, w, a * bdim);
            for q in 0..a {
                for j in 0..bdim {
                    dw[q * bdim + j] += dwt[j * a + q];
                }
            }
        }
    } else {
        if rg(x) {
            let wv = val(w).clone();
            let dx = acc(grads, x, r * a);
            gemm_nt(r, bdim, a, 1.0, go, &wv, 1.0, dx);
        }
        if rg(w) {
            let xv = val(x).clone();
            let dw = acc(grads, w, a * bdim);
            gemm_tn(a, r, bdim, 1.0, &xv, go, 1.0, dw);
        }
    }
    if rg(b) {
        let db = acc(grads, b, bdim);
        for row in go.chunks_exact(bdim) {
            for (d, v) in db.iter_mut().zip(row.iter()) {
                *d += v;
            }
        }
    }
}

fn backward_op(inner: &Inner, op: &Op, out: usize, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| -> &Arc<Vec<f64>> { &inner.values[i].data };
    let shape = |i: usize| -> &[usize] { &inner.values[i].shape };
    let rg = |i: usize| -> bool { inner.values[i].requires_grad };

    match op {
        Op::Linear { x, w, b } => {
            linear_backward(inner, *x, *w, *b, go, grads);
        }
        Op::LinearAct { x, w, b, kind } => {
            // Fold the activation derivative into the upstream gradient,
            // then reuse the plain linear backward.
            let out_v = val(out);
            let mut g = vec![0.0; go.len()];
            match kind {
                Activation::Relu => {
                    for (d, (&y, &u)) in g.iter_mut().zip(out_v.iter().zip(go.iter())) {
                        if y > 0.0 {
                            *d = u;
                        }
                    }
                }
                Activation::Sigmoid => {
                    for (d, (&y, &u)) in g.iter_mut().zip(out_v.iter().zip(go.iter())) {
                        *d = u * y * (1.0 - y);
                    }
                }
                Activation::Tanh => {
                    for (d, (&y, &u)) in g.iter_mut().zip(out_v.iter().zip(go.iter())) {
                        *d = u * (1.0 - y * y);
                    }
                }
            }
            linear_backward(inner, *x, *w, *b, &g, grads);
        }
        Op::Activation { x, kind } => {
            if !rg(*x) {
                return;
            }
            let out_v = val(out).clone();
            let dx = acc(grads, *x, out_v.len());
            match kind {
                Activation::Relu => {
                    for (i, (&y, &g)) in out_v.iter().zip(go.iter()).enumerate() {
                        if y > 0.0 {
                            dx[i] += g;
                        }
                    }
                }
                Activation::Sigmoid => {
                    for (i, (&y, &g)) in out_v.iter().zip(go.iter()).enumerate() {
                        dx[i] += g * y * (1.0 - y);
                    }
                }
                Activation::Tanh => {
                    for (i, (&y, &g)) in out_v.iter().zip(go.iter()).enumerate() {
                        dx[i] += g * (1.0 - y * y);
                    }
                }
            }
        }
        Op::EdgeConv { f, w, b, argmax } => {
            let (n, c_in) = (shape(*f)[0], shape(*f)[1]);
            let c_out = shape(*w)[1];
            let out_v = val(out);
            let wv = val(*w);
            let fv = val(*f);
            let wt = &wv[..c_in * c_out];
            let wb = &wv[c_in * c_out..];

            // Count surviving gradient entries after the relu mask.
            let mut nnz = 0usize;
            for (y, g) in out_v.iter().zip(go.iter()) {
                if *y > 0.0 && *g != 0.0 {
                    nnz += 1;
                }
            }
            if rg(*b) {
                let db = acc(grads, *b, c_out);
                for (i, (y, g)) in out_v.iter().zip(go.iter()).enumerate() {
                    if *y > 0.0 {
                        db[i % c_out] += *g;
                    }
                }
            }
            if !(rg(*f) || rg(*w)) {
                return;
            }

            if nnz * 8 < n * c_out {
                // Entry-sparse path: contiguous per-entry updates against
                // transposed weight views.
                let mut contrast_t = vec![0.0; c_out * c_in];
                let mut wb_t = vec![0.0; c_out * c_in];
                for q in 0..c_in {
                    for o in 0..c_out {
                        contrast_t[o * c_in + q] = wt[q * c_out + o] - wb[q * c_out + o];
                        wb_t[o * c_in + q] = wb[q * c_out + o];
                    }
                }
                let mut dcontrast_t = vec![0.0; c_out * c_in];
                let mut dwb_t = vec![0.0; c_out * c_in];
                let fv = fv.clone();
                for i in 0..n {
                    for o in 0..c_out {
                        let y = out_v[i * c_out + o];
                        let g = go[i * c_out + o];
                        if y <= 0.0 || g == 0.0 {
                            continue;
                        }
                        let r = argmax[i * c_out + o] as usize;
                        if rg(*f) {
                            let df = acc(grads, *f, n * c_in);
                            for (d, s) in df[i * c_in..(i + 1) * c_in]
                                .iter_mut()
                                .zip(&contrast_t[o * c_in..(o + 1) * c_in])
                            {
                                *d += g * s;
                            }
                            for (d, s) in df[r * c_in..(r + 1) * c_in]
                                .iter_mut()
                                .zip(&wb_t[o * c_in..(o + 1) * c_in])
                            {
                                *d += g * s;
                            }
                        }
                        if rg(*w) {
                            for (d, s) in dcontrast_t[o * c_in..(o + 1) * c_in]
                                .iter_mut()
                                .zip(&fv[i * c_in..(i + 1) * c_in])
                            {
                                *d += g * s;
                            }
                            for (d, s) in dwb_t[o * c_in..(o + 1) * c_in]
                                .iter_mut()
                                .zip(&fv[r * c_in..(r + 1) * c_in])
                            {
                                *d += g * s;
                            }
                        }
                    }
                }
                if rg(*w) {
                    let dw = acc(grads, *w, 2 * c_in * c_out);
                    for q in 0..c_in {
                        for o in 0..c_out {
                            let dc = dcontrast_t[o * c_in + q];
                            dw[q * c_out + o] += dc;
                            dw[(c_in + q) * c_out + o] += dwb_t[o * c_in + q] - dc;
                        }
                    }
                }
            } else {
                // Dense path: masked gradient, scatter, then four GEMMs.
                let mut g_mask = vec![0.0; n * c_out];
                let mut db_mat = vec![0.0; n * c_out];
                for i in 0..n * c_out {
                    if out_v[i] > 0.0 && go[i] != 0.0 {
                        g_mask[i] = go[i];
                        let r = argmax[i] as usize;
                        db_mat[r * c_out + i % c_out] += go[i];
                    }
                }
                let mut contrast = vec![0.0; c_in * c_out];
                for (c, (t, bo)) in contrast.iter_mut().zip(wt.iter().zip(wb.iter())) {
                    *c = t - bo;
                }
                if rg(*f) {
                    let wb_owned = wb.to_vec();
                    let df = acc(grads, *f, n * c_in);
                    gemm_nt(n, c_out, c_in, 1.0, &g_mask, &contrast, 1.0, df);
                    gemm_nt(n, c_out, c_in, 1.0, &db_mat, &wb_owned, 1.0, df);
                }
                if rg(*w) {
                    let fv = fv.clone();
                    let mut dcontrast = vec![0.0; c_in * c_out];
                    gemm_tn(c_in, n, c_out, 1.0, &fv, &g_mask, 0.0, &mut dcontrast);
                    let mut dwb = vec![0.0; c_in * c_out];
                    gemm_tn(c_in, n, c_out, 1.0, &fv, &db_mat, 0.0, &mut dwb);
                    let dw = acc(grads, *w, 2 * c_in * c_out);
                    for i in 0..c_in * c_out {
                        dw[i] += dcontrast[i];
                        dw[c_in * c_out + i] += dwb[i] - dcontrast[i];
                    }
                }
            }
        }
        Op::GatherGroup { x, idx } => {
            if !rg(*x) {
                return;
            }
            let (n, c) = (shape(*x)[0], shape(*x)[1]);
            let dx = acc(grads, *x, n * c);
            for (slot, &r) in go.chunks_exact(c).zip(idx.entries()) {
                for (d, v) in dx[r as usize * c..(r as usize + 1) * c]
                    .iter_mut()
                    .zip(slot)
                {
                    *d += v;
                }
            }
        }
        Op::ReduceGroup { x, kind, argmax } => {
            if !rg(*x) {
                return;
            }
            let dims = shape(*x);
            let (m, k, c) = (dims[0], dims[1], dims[2]);
            let dx = acc(grads, *x, m * k * c);
            match kind {
                Reduce::Max => {
                    let arg = argmax.as_ref().expect("max reduce saves argmax");
                    for i in 0..m {
                        for o in 0..c {
                            let j = arg[i * c + o] as usize;
                            dx[(i * k + j) * c + o] += go[i * c + o];
                        }
                    }
                }
                Reduce::Mean => {
                    let inv = 1.0 / k as f64;
                    for i in 0..m {
                        for j in 0..k {
                            for o in 0..c {
                                dx[(i * k + j) * c + o] += go[i * c + o] * inv;
                            }
                        }
                    }
                }
            }
        }
        Op::ConcatCols { a, b } => {
            let sa = shape(*a);
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let ca = sa[sa.len() - 1];
            let cb = shape(*b)[shape(*b).len() - 1];
            if rg(*a) {
                let da = acc(grads, *a, rows * ca);
                for i in 0..rows {
                    for j in 0..ca {
                        da[i * ca + j] += go[i * (ca + cb) + j];
                    }
                }
            }
            if rg(*b) {
                let db = acc(grads, *b, rows * cb);
                for i in 0..rows {
                    for j in 0..cb {
                        db[i * cb + j] += go[i * (ca + cb) + ca + j];
                    }
                }
            }
        }
        Op::Hadamard { a, b } => {
            if rg(*a) {
                let bv = val(*b).clone();
                let da = acc(grads, *a, bv.len());
                for ((d, g), v) in da.iter_mut().zip(go).zip(bv.iter()) {
                    *d += g * v;
                }
            }
            if rg(*b) {
                let av = val(*a).clone();
                let db = acc(grads, *b, av.len());
                for ((d, g), v) in db.iter_mut().zip(go).zip(av.iter()) {
                    *d += g * v;
                }
            }
        }
        Op::Add { a, b } => {
            for idx in [*a, *b] {
                if rg(idx) {
                    let d = acc(grads, idx, go.len());
                    for (d, g) in d.iter_mut().zip(go) {
                        *d += g;
                    }
                }
            }
        }
        Op::Scale { x, factor } => {
            if rg(*x) {
                let dx = acc(grads, *x, go.len());
                for (d, g) in dx.iter_mut().zip(go) {
                    *d += g * factor;
                }
            }
        }
        Op::MeanRows { x } => {
            if !rg(*x) {
                return;
            }
            let (m, c) = (shape(*x)[0], shape(*x)[1]);
            let inv = 1.0 / m as f64;
            let dx = acc(grads, *x, m * c);
            for i in 0..m {
                for j in 0..c {
                    dx[i * c + j] += go[j] * inv;
                }
            }
        }
        Op::BroadcastRows { x } => {
            if !rg(*x) {
                return;
            }
            let c = shape(*x)[1];
            let dx = acc(grads, *x, c);
            for row in go.chunks_exact(c) {
                for (d, g) in dx.iter_mut().zip(row) {
                    *d += g;
                }
            }
        }
        Op::Reshape { x } => {
            if !rg(*x) {
                return;
            }
            let dx = acc(grads, *x, go.len());
            for (d, g) in dx.iter_mut().zip(go) {
                *d += g;
            }
        }
        Op::Sum { x } => {
            if !rg(*x) {
                return;
            }
            let numel = val(*x).len();
            let g = go[0];
            let dx = acc(grads, *x, numel);
            for d in dx.iter_mut() {
                *d += g;
            }
        }
        Op::ChamferToFixed {
            s,
            target,
            nearest_target,
            nearest_sample,
        } => {
            if !rg(*s) {
                return;
            }
            let m = shape(*s)[0];
            let n = target.len();
            let g = go[0];
            let sv = val(*s).clone();
            let ds = acc(grads, *s, m * 3);
            let cm = g * 2.0 / m as f64;
            for (j, &ti) in nearest_target.iter().enumerate() {
                let p = &target[ti as usize];
                for d in 0..3 {
                    ds[j * 3 + d] += cm * (sv[j * 3 + d] - p[d]);
                }
            }
            let cn = g * 2.0 / n as f64;
            for (i, &sj) in nearest_sample.iter().enumerate() {
                let j = sj as usize;
                let p = &target[i];
                for d in 0..3 {
                    ds[j * 3 + d] += cn * (sv[j * 3 + d] - p[d]);
                }
            }
        }
        Op::OffsetMean { from, to } => {
            let (m, c) = (shape(*from)[0], shape(*from)[1]);
            let g = go[0];
            let fv = val(*from).clone();
            let tv = val(*to).clone();
            let inv_m = 1.0 / m as f64;
            for i in 0..m {
                let mut d2 = 0.0;
                for j in 0..c {
                    let d = tv[i * c + j] - fv[i * c + j];
                    d2 += d * d;
                }
                let coeff = g * inv_m / (d2 + OFFSET_EPS).sqrt();
                if rg(*to) {
                    let dt = acc(grads, *to, m * c);
                    for j in 0..c {
                        dt[i * c + j] += coeff * (tv[i * c + j] - fv[i * c + j]);
                    }
                }
                if rg(*from) {
                    let df = acc(grads, *from, m * c);
                    for j in 0..c {
                        df[i * c + j] -= coeff * (tv[i * c + j] - fv[i * c + j]);
                    }
                }
            }
        }
        Op::CrossEntropyLogits {
            logits,
            label,
            softmax,
        } => {
            if !rg(*logits) {
                return;
            }
            let g = go[0];
            let dz = acc(grads, *logits, softmax.len());
            for (i, (d, p)) in dz.iter_mut().zip(softmax.iter()).enumerate() {
                let onehot = if i == *label { 1.0 } else { 0.0 };
                *d += g * (p - onehot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn linear_identity_case() {
        let tape = Tape::new();
        let x = t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let w = t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let y = tape.linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_hand_arithmetic() {
        // [[1,2]] * [[3],[4]] + [1] = [[12]]
        let tape = Tape::new();
        let x = t2(1, 2, vec![1.0, 2.0]);
        let w = t2(2, 1, vec![3.0, 4.0]);
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        let y = tape.linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[12.0]);
    }

    #[test]
    fn linear_zero_input_gives_bias_rows() {
        let tape = Tape::new();
        let x = Tensor::zeros(vec![3, 2]);
        let w = t2(2, 2, vec![5.0, -1.0, 2.0, 7.0]);
        let b = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let y = tape.linear(&x, &w, &b).unwrap();
        for row in y.data().chunks_exact(2) {
            assert_eq!(row, &[0.5, -0.25]);
        }
    }

    #[test]
    fn linear_shape_mismatch_errors() {
        let tape = Tape::new();
        let x = t2(1, 3, vec![1.0, 2.0, 3.0]);
        let w = t2(2, 1, vec![3.0, 4.0]);
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(matches!(
            tape.linear(&x, &w, &b),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn linear_overflow_is_numeric_error() {
        let tape = Tape::new();
        let x = t2(1, 1, vec![1e308]);
        let w = t2(1, 1, vec![1e308]);
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(matches!(tape.linear(&x, &w, &b), Err(Error::Numeric(_))));
    }

    #[test]
    fn activation_values() {
        let tape = Tape::new();
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        let y = tape.activation(&x, Activation::Relu).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);

        let z = Tensor::new(vec![1], vec![0.0]).unwrap();
        let s = tape.activation(&z, Activation::Sigmoid).unwrap();
        assert_eq!(s.data(), &[0.5]);

        let big = Tensor::new(vec![1], vec![1e6]).unwrap();
        let t = tape.activation(&big, Activation::Tanh).unwrap();
        assert!((t.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_group_self_and_lookup() {
        let tape = Tape::new();
        let x = t2(3, 1, vec![1.0, 2.0, 3.0]);
        // Self-gather with k=1 reproduces x as n x 1 x c.
        let idx = IndexMatrix::from_rows(3, 1, vec![0, 1, 2]).unwrap();
        let y = tape.gather_group(&x, &idx).unwrap();
        assert_eq!(y.shape(), &[3, 1, 1]);
        assert_eq!(y.data(), x.data());

        let idx = IndexMatrix::from_rows(1, 2, vec![2, 0]).unwrap();
        let y = tape.gather_group(&x, &idx).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1]);
        assert_eq!(y.data(), &[3.0, 1.0]);
    }

    #[test]
    fn gather_group_out_of_range_errors() {
        let tape = Tape::new();
        let x = t2(2, 1, vec![1.0, 2.0]);
        let idx = IndexMatrix::from_rows(1, 1, vec![5]).unwrap();
        assert!(matches!(
            tape.gather_group(&x, &idx),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn gather_duplicate_indices_scatter_add() {
        // A row gathered twice receives gradient 2 from a sum loss.
        let tape = Tape::new();
        let x = tape.param(&t2(2, 1, vec![1.0, 2.0]));
        let idx = IndexMatrix::from_rows(1, 2, vec![1, 1]).unwrap();
        let y = tape.gather_group(&x, &idx).unwrap();
        let loss = tape.sum(&y).unwrap();
        let g = tape.backward(&loss).unwrap().get(&x).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0]);
    }

    #[test]
    fn reduce_group_max_and_mean() {
        let tape = Tape::new();
        // One group, two members, two channels: rows (1,5) and (3,2).
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let y = tape.reduce_group(&x, Reduce::Max).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);

        // k=1 is an identity squeeze.
        let x1 = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y1 = tape.reduce_group(&x1, Reduce::Max).unwrap();
        assert_eq!(y1.data(), &[1.0, 2.0, 3.0, 4.0]);

        // Mean of equal rows is the row.
        let xm = Tensor::new(vec![1, 2, 2], vec![7.0, -1.0, 7.0, -1.0]).unwrap();
        let ym = tape.reduce_group(&xm, Reduce::Mean).unwrap();
        assert_eq!(ym.data(), &[7.0, -1.0]);
    }

    #[test]
    fn reduce_group_max_ties_route_to_first() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![1, 2, 1], vec![4.0, 4.0]).unwrap());
        let y = tape.reduce_group(&x, Reduce::Max).unwrap();
        let loss = tape.sum(&y).unwrap();
        let g = tape.backward(&loss).unwrap().get(&x).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn concat_cols_cases() {
        let tape = Tape::new();
        let empty = Tensor::new(vec![1, 0], vec![]).unwrap();
        let b = t2(1, 2, vec![2.0, 3.0]);
        let y = tape.concat_cols(&empty, &b).unwrap();
        assert_eq!(y.data(), b.data());

        let a = t2(1, 1, vec![1.0]);
        let y = tape.concat_cols(&a, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);

        let a = Tensor::zeros(vec![5, 3]);
        let b = Tensor::zeros(vec![5, 128]);
        let y = tape.concat_cols(&a, &b).unwrap();
        assert_eq!(y.shape(), &[5, 131]);

        let bad = Tensor::zeros(vec![4, 2]);
        assert!(matches!(
            tape.concat_cols(&a, &bad),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn hadamard_cases() {
        let tape = Tape::new();
        let a = t2(1, 2, vec![2.0, 3.0]);
        let ones = t2(1, 2, vec![1.0, 1.0]);
        assert_eq!(tape.hadamard(&a, &ones).unwrap().data(), a.data());

        let b = t2(1, 2, vec![4.0, -1.0]);
        assert_eq!(tape.hadamard(&a, &b).unwrap().data(), &[8.0, -3.0]);

        let a = tape.param(&t2(1, 2, vec![2.0, 3.0]));
        let zero = Tensor::zeros(vec![1, 2]);
        let y = tape.hadamard(&a, &zero).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let loss = tape.sum(&y).unwrap();
        let g = tape.backward(&loss).unwrap().get(&a).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.param(&t2(2, 2, vec![1.0, -2.0, 3.0, 4.0]));
        let loss = tape.sum(&x).unwrap();
        let g = tape.backward(&loss).unwrap().get(&x).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_hadamard_product_rule() {
        let tape = Tape::new();
        let a = tape.param(&t2(1, 3, vec![1.0, 2.0, 3.0]));
        let b = t2(1, 3, vec![5.0, -6.0, 7.0]);
        let y = tape.hadamard(&a, &b).unwrap();
        let loss = tape.sum(&y).unwrap();
        let g = tape.backward(&loss).unwrap().get(&a).unwrap();
        assert_eq!(g.data(), b.data());
    }

    #[test]
    fn backward_untouched_param_gets_zeros() {
        let tape = Tape::new();
        let a = tape.param(&t2(1, 2, vec![1.0, 2.0]));
        let unused = tape.param(&t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let loss = tape.sum(&a).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.get(&unused).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.param(&t2(1, 2, vec![1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_tape_tensor_is_rejected() {
        let t1 = Tape::new();
        let t2_ = Tape::new();
        let x = t1.param(&t2(1, 1, vec![1.0]));
        assert!(matches!(t2_.sum(&x), Err(Error::Tape(_))));
        assert!(matches!(t2_.backward(&x), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let tape = Tape::new();
            let x = tape.param(&t2(2, 3, vec![0.3, -1.7, 2.9, 0.11, 5.3, -0.2]));
            let w = tape.param(&t2(3, 2, vec![1.0, 0.5, -0.25, 2.0, 0.125, -1.0]));
            let b = tape.param(&Tensor::new(vec![2], vec![0.1, -0.1]).unwrap());
            let h = tape.linear(&x, &w, &b).unwrap();
            let a = tape.activation(&h, Activation::Tanh).unwrap();
            let loss = tape.sum(&a).unwrap();
            let g = tape.backward(&loss).unwrap();
            (
                g.get(&x).unwrap().data().to_vec(),
                g.get(&w).unwrap().data().to_vec(),
                g.get(&b).unwrap().data().to_vec(),
            )
        };
        let (x1, w1, b1) = build();
        let (x2, w2, b2) = build();
        assert!(x1.iter().zip(&x2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(w1.iter().zip(&w2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn edge_conv_identity_weights_give_relu_features() {
        // k=1 self neighbors: edge = concat(f_i, 0); a weight selecting the
        // first c_in columns as identity with zero bias yields relu(f_i).
        let tape = Tape::new();
        let f = t2(3, 2, vec![1.0, -2.0, 0.5, 3.0, -0.25, 0.0]);
        let mut w = vec![0.0; 4 * 2];
        w[0] = 1.0; // row 0 -> col 0
        w[3] = 1.0; // row 1 -> col 1
        let w = t2(4, 2, w);
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let idx = IndexMatrix::from_rows(3, 1, vec![0, 1, 2]).unwrap();
        let y = tape.edge_conv(&f, &w, &b, &idx).unwrap();
        let expect: Vec<f64> = f.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn edge_conv_zero_input_zero_bias_is_zero() {
        let tape = Tape::new();
        let f = Tensor::zeros(vec![4, 3]);
        let w = t2(6, 5, (0..30).map(|i| i as f64 * 0.1 - 1.0).collect());
        let b = Tensor::new(vec![5], vec![0.0; 5]).unwrap();
        let idx = IndexMatrix::from_rows(4, 2, vec![0, 1, 1, 2, 2, 3, 3, 0]).unwrap();
        let y = tape.edge_conv(&f, &w, &b, &idx).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn edge_conv_is_permutation_equivariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let (c_in, c_out, k) = (3, 4, 2);
        let f: Vec<f64> = (0..n * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..2 * c_in * c_out)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let b: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let idx: Vec<u32> = (0..n)
            .flat_map(|i| [(i as u32 + 1) % n as u32, (i as u32 + 3) % n as u32])
            .collect();

        let tape = Tape::new();
        let y = tape
            .edge_conv(
                &t2(n, c_in, f.clone()),
                &t2(2 * c_in, c_out, w.clone()),
                &Tensor::new(vec![c_out], b.clone()).unwrap(),
                &IndexMatrix::from_rows(n, k, idx.clone()).unwrap(),
            )
            .unwrap();

        // Reverse the point order and relabel neighbor indices consistently.
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut f_p = vec![0.0; n * c_in];
        let mut idx_p = vec![0u32; n * k];
        for new in 0..n {
            let old = perm[new];
            f_p[new * c_in..(new + 1) * c_in]
                .copy_from_slice(&f[old * c_in..(old + 1) * c_in]);
            for j in 0..k {
                idx_p[new * k + j] = inv[idx[old * k + j] as usize] as u32;
            }
        }
        let y_p = tape
            .edge_conv(
                &t2(n, c_in, f_p),
                &t2(2 * c_in, c_out, w),
                &Tensor::new(vec![c_out], b).unwrap(),
                &IndexMatrix::from_rows(n, k, idx_p).unwrap(),
            )
            .unwrap();
        for new in 0..n {
            let old = perm[new];
            assert_eq!(
                &y.data()[old * c_out..(old + 1) * c_out],
                &y_p.data()[new * c_out..(new + 1) * c_out]
            );
        }
    }

    #[test]
    fn linear_act_matches_composition_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let x = t2(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = t2(3, 5, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = Tensor::new(vec![5], (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        for kind in [Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
            let tape = Tape::new();
            let fused = tape.linear_act(&x, &w, &b, kind).unwrap();
            let composed = tape
                .activation(&tape.linear(&x, &w, &b).unwrap(), kind)
                .unwrap();
            for (a, c) in fused.data().iter().zip(composed.data()) {
                assert_eq!(a.to_bits(), c.to_bits());
            }

            // Identical gradients through both spellings.
            let tape = Tape::new();
            let wx = tape.param(&w);
            let f1 = tape.linear_act(&x, &wx, &b, kind).unwrap();
            let l1 = tape.sum(&f1).unwrap();
            let g1 = tape.backward(&l1).unwrap().get(&wx).unwrap();

            let tape = Tape::new();
            let wx2 = tape.param(&w);
            let f2 = tape
                .activation(&tape.linear(&x, &wx2, &b).unwrap(), kind)
                .unwrap();
            let l2 = tape.sum(&f2).unwrap();
            let g2 = tape.backward(&l2).unwrap().get(&wx2).unwrap();
            for (a, c) in g1.data().iter().zip(g2.data()) {
                assert!((a - c).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        // Uniform logits over 4 classes -> ln 4.
        let z = Tensor::new(vec![4], vec![0.5; 4]).unwrap();
        let l = tape.cross_entropy_logits(&z, 2).unwrap();
        assert!((l.item().unwrap() - 4.0f64.ln()).abs() < 1e-12);

        // 50/50 over two classes -> ln 2.
        let z = Tensor::new(vec![2], vec![1.3, 1.3]).unwrap();
        let l = tape.cross_entropy_logits(&z, 0).unwrap();
        assert!((l.item().unwrap() - 2.0f64.ln()).abs() < 1e-12);

        let z = Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            tape.cross_entropy_logits(&z, 3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn offset_mean_examples() {
        let tape = Tape::new();
        let a = t2(1, 3, vec![0.0, 0.0, 0.0]);
        let b = t2(1, 3, vec![3.0, 4.0, 0.0]);
        let l = tape.offset_mean(&a, &b).unwrap();
        assert!((l.item().unwrap() - 5.0).abs() < 1e-9);

        let same = tape.offset_mean(&a, &a).unwrap();
        assert!(same.item().unwrap() < 1e-5);
    }

    #[test]
    fn mean_and_broadcast_rows() {
        let tape = Tape::new();
        let x = tape.param(&t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean_rows(&x).unwrap();
        assert_eq!(m.data(), &[2.0, 3.0]);
        let b = tape.broadcast_rows(&m, 3).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        let loss = tape.sum(&b).unwrap();
        let g = tape.backward(&loss).unwrap().get(&x).unwrap();
        // Each input element feeds 3 broadcast rows scaled by 1/2.
        assert_eq!(g.data(), &[1.5, 1.5, 1.5, 1.5]);
    }
}

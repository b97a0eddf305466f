//! Arena tape for reverse-mode automatic differentiation.
//!
//! Each node holds a dense tensor value plus the primitive that produced it.
//! Recording is append-only; the backward pass walks nodes in exact reverse
//! order of recording and accumulates gradients per node. A tape lives for
//! one forward/backward cycle (typically one training batch) and is dropped
//! afterwards.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{KerbsError, Result};
use crate::head::kernel;
use crate::numerics::tensor::{dot, norm, Tensor};

/// Norms below this are clamped before dividing (cosine similarity on
/// near-zero vectors); the clamped region contributes no norm gradient.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Matmul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    VecMat(NodeId, NodeId),
    Row(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    Gather(NodeId, Vec<usize>),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    LogSumExp(NodeId),
    Softmax(NodeId),
    /// Kernel similarity of one context vector against every sense row.
    /// `dots[m]` and the context norm are saved at record time so backward
    /// does not redo the O(M·d) inner products.
    KernelScores {
        ctx: NodeId,
        embeds: NodeId,
        thetas: NodeId,
        dots: Vec<f64>,
        ctx_norm: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-(slot) quantities that stay fixed for the lifetime of a tape: row
/// norms of an embedding matrix node and the kernel normalization factor
/// (with its derivative) per theta. Keyed by node id; nodes are immutable
/// once written, so entries never go stale.
#[derive(Default)]
struct KernelCaches {
    row_norms: HashMap<usize, Rc<Vec<f64>>>,
    norm_factors: HashMap<usize, Rc<Vec<(f64, f64)>>>,
}

pub struct Tape {
    nodes: Vec<Node>,
    caches: RefCell<KernelCaches>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id. Nodes the
/// loss does not depend on have no entry.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, or zeros of the given shape if the loss never
    /// touched it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            caches: RefCell::new(KernelCaches::default()),
        }
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Register an input tensor (parameter or constant) on the tape.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), Op::Leaf)
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(KerbsError::Dimension(format!(
                "{name}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = map(self.value(a), |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = map(self.value(a), |x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(KerbsError::Dimension(format!(
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let v = matmul_values(va, vb);
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    /// `m [r,c] * v [c] -> [r]`.
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (vm, vv) = (self.value(m), self.value(v));
        if vm.shape().len() != 2 || vv.shape().len() != 1 || vm.cols() != vv.numel() {
            return Err(KerbsError::Dimension(format!(
                "matvec: {:?} x {:?}",
                vm.shape(),
                vv.shape()
            )));
        }
        let out: Vec<f64> = (0..vm.rows()).map(|r| dot(vm.row(r), vv.data())).collect();
        Ok(self.push(Tensor::vector(out), Op::MatVec(m, v)))
    }

    /// `v [r] * m [r,c] -> [c]` (row vector times matrix).
    pub fn vecmat(&mut self, v: NodeId, m: NodeId) -> Result<NodeId> {
        let (vv, vm) = (self.value(v), self.value(m));
        if vm.shape().len() != 2 || vv.shape().len() != 1 || vm.rows() != vv.numel() {
            return Err(KerbsError::Dimension(format!(
                "vecmat: {:?} x {:?}",
                vv.shape(),
                vm.shape()
            )));
        }
        let cols = vm.cols();
        let mut out = vec![0.0; cols];
        for (r, &w) in vv.data().iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(vm.row(r)) {
                *o += w * x;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::VecMat(v, m)))
    }

    /// One row of a rank-2 tensor as a vector.
    pub fn row(&mut self, m: NodeId, r: usize) -> Result<NodeId> {
        let vm = self.value(m);
        if vm.shape().len() != 2 || r >= vm.rows() {
            return Err(KerbsError::Dimension(format!(
                "row {r} of {:?}",
                vm.shape()
            )));
        }
        let v = Tensor::vector(vm.row(r).to_vec());
        Ok(self.push(v, Op::Row(m, r)))
    }

    /// Selected rows of a rank-2 tensor, stacked in the given order.
    pub fn gather_rows(&mut self, m: NodeId, rows: &[usize]) -> Result<NodeId> {
        let vm = self.value(m);
        if vm.shape().len() != 2 || rows.iter().any(|&r| r >= vm.rows()) {
            return Err(KerbsError::Dimension(format!(
                "gather_rows {:?} of {:?}",
                rows,
                vm.shape()
            )));
        }
        let cols = vm.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(vm.row(r));
        }
        let v = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(v, Op::GatherRows(m, rows.to_vec())))
    }

    /// Selected entries of a vector, in the given order.
    pub fn gather(&mut self, v: NodeId, idx: &[usize]) -> Result<NodeId> {
        let vv = self.value(v);
        if vv.shape().len() != 1 || idx.iter().any(|&i| i >= vv.numel()) {
            return Err(KerbsError::Dimension(format!(
                "gather {:?} of {:?}",
                idx,
                vv.shape()
            )));
        }
        let data: Vec<f64> = idx.iter().map(|&i| vv.data()[i]).collect();
        Ok(self.push(Tensor::vector(data), Op::Gather(v, idx.to_vec())))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Stable log-sum-exp of a vector, as a scalar node.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 1 || va.numel() == 0 {
            return Err(KerbsError::Dimension(format!(
                "log_sum_exp of {:?}",
                va.shape()
            )));
        }
        let v = super::log_sum_exp(va.data());
        Ok(self.push(Tensor::scalar(v), Op::LogSumExp(a)))
    }

    /// Stable softmax of a vector node.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 1 || va.numel() == 0 {
            return Err(KerbsError::Dimension(format!("softmax of {:?}", va.shape())));
        }
        let v = Tensor::vector(super::softmax_stable(va.data())?);
        Ok(self.push(v, Op::Softmax(a)))
    }

    fn row_norms_of(&self, embeds: NodeId) -> Rc<Vec<f64>> {
        let mut caches = self.caches.borrow_mut();
        caches
            .row_norms
            .entry(embeds.0)
            .or_insert_with(|| {
                let m = &self.nodes[embeds.0].value;
                Rc::new(
                    (0..m.rows())
                        .map(|r| norm(m.row(r)).max(NORM_FLOOR))
                        .collect(),
                )
            })
            .clone()
    }

    fn norm_factors_of(&self, thetas: NodeId) -> Rc<Vec<(f64, f64)>> {
        let mut caches = self.caches.borrow_mut();
        caches
            .norm_factors
            .entry(thetas.0)
            .or_insert_with(|| {
                let t = &self.nodes[thetas.0].value;
                Rc::new(
                    t.data()
                        .iter()
                        .map(|&th| kernel::norm_factor_with_grad(th))
                        .collect(),
                )
            })
            .clone()
    }

    /// Kernel similarity scores of `ctx` against each row of `embeds` with
    /// per-row `thetas`: `score[m] = |ctx| |w_m| (a e^{-theta_m cos_m} - a)`.
    pub fn kernel_scores(&mut self, ctx: NodeId, embeds: NodeId, thetas: NodeId) -> Result<NodeId> {
        let (vc, ve, vt) = (self.value(ctx), self.value(embeds), self.value(thetas));
        if vc.shape().len() != 1
            || ve.shape().len() != 2
            || vt.shape().len() != 1
            || ve.cols() != vc.numel()
            || ve.rows() != vt.numel()
        {
            return Err(KerbsError::Dimension(format!(
                "kernel_scores: ctx {:?}, embeds {:?}, thetas {:?}",
                vc.shape(),
                ve.shape(),
                vt.shape()
            )));
        }
        let row_norms = self.row_norms_of(embeds);
        let (vc, ve, vt) = (self.value(ctx), self.value(embeds), self.value(thetas));
        let ctx_norm = norm(vc.data()).max(NORM_FLOOR);
        let m = ve.rows();
        let mut dots = Vec::with_capacity(m);
        let mut scores = Vec::with_capacity(m);
        for r in 0..m {
            let d = dot(vc.data(), ve.row(r));
            let cos = d / (ctx_norm * row_norms[r]);
            let g = kernel::kernel_shape(vt.data()[r], cos);
            dots.push(d);
            scores.push(ctx_norm * row_norms[r] * g);
        }
        Ok(self.push(
            Tensor::vector(scores),
            Op::KernelScores {
                ctx,
                embeds,
                thetas,
                dots,
                ctx_norm,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar loss node. Visits nodes in exact
    /// reverse order of recording.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(KerbsError::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g_out) = grads[i].take() else {
                continue;
            };
            self.accumulate_inputs(i, &g_out, &mut grads);
            grads[i] = Some(g_out);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(&self, i: usize, g_out: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, self.value(*a).shape(), |d| {
                    axpy(d, 1.0, g_out.data())
                });
                acc(grads, *b, self.value(*b).shape(), |d| {
                    axpy(d, 1.0, g_out.data())
                });
            }
            Op::Sub(a, b) => {
                acc(grads, *a, self.value(*a).shape(), |d| {
                    axpy(d, 1.0, g_out.data())
                });
                acc(grads, *b, self.value(*b).shape(), |d| {
                    axpy(d, -1.0, g_out.data())
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, va.shape(), |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g_out.data()).zip(vb.data()) {
                        *d += g * y;
                    }
                });
                acc(grads, *b, vb.shape(), |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g_out.data()).zip(va.data()) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(grads, *a, self.value(*a).shape(), |d| {
                    axpy(d, *c, g_out.data())
                });
            }
            Op::AddScalar(a, _) => {
                acc(grads, *a, self.value(*a).shape(), |d| {
                    axpy(d, 1.0, g_out.data())
                });
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA += G B^T
                acc(grads, *a, va.shape(), |d| {
                    for r in 0..m {
                        for j in 0..k {
                            let mut s = 0.0;
                            for l in 0..n {
                                s += g_out.data()[r * n + l] * vb.data()[j * n + l];
                            }
                            d[r * k + j] += s;
                        }
                    }
                });
                // dB += A^T G
                acc(grads, *b, vb.shape(), |d| {
                    for j in 0..k {
                        for l in 0..n {
                            let mut s = 0.0;
                            for r in 0..m {
                                s += va.data()[r * k + j] * g_out.data()[r * n + l];
                            }
                            d[j * n + l] += s;
                        }
                    }
                });
            }
            Op::MatVec(mid, vid) => {
                let (vm, vv) = (self.value(*mid), self.value(*vid));
                let cols = vm.cols();
                acc(grads, *mid, vm.shape(), |d| {
                    for (r, &g) in g_out.data().iter().enumerate() {
                        for (dd, &x) in d[r * cols..(r + 1) * cols].iter_mut().zip(vv.data()) {
                            *dd += g * x;
                        }
                    }
                });
                acc(grads, *vid, vv.shape(), |d| {
                    for (r, &g) in g_out.data().iter().enumerate() {
                        for (dd, &w) in d.iter_mut().zip(vm.row(r)) {
                            *dd += g * w;
                        }
                    }
                });
            }
            Op::VecMat(vid, mid) => {
                let (vv, vm) = (self.value(*vid), self.value(*mid));
                let cols = vm.cols();
                acc(grads, *vid, vv.shape(), |d| {
                    for (r, dd) in d.iter_mut().enumerate() {
                        *dd += dot(vm.row(r), g_out.data());
                    }
                });
                acc(grads, *mid, vm.shape(), |d| {
                    for (r, &w) in vv.data().iter().enumerate() {
                        for (dd, &g) in d[r * cols..(r + 1) * cols].iter_mut().zip(g_out.data()) {
                            *dd += w * g;
                        }
                    }
                });
            }
            Op::Row(mid, r) => {
                let vm = self.value(*mid);
                let cols = vm.cols();
                acc(grads, *mid, vm.shape(), |d| {
                    for (dd, &g) in d[r * cols..(r + 1) * cols].iter_mut().zip(g_out.data()) {
                        *dd += g;
                    }
                });
            }
            Op::GatherRows(mid, rows) => {
                let vm = self.value(*mid);
                let cols = vm.cols();
                acc(grads, *mid, vm.shape(), |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (dd, &g) in d[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&g_out.data()[k * cols..(k + 1) * cols])
                        {
                            *dd += g;
                        }
                    }
                });
            }
            Op::Gather(vid, idx) => {
                let vv = self.value(*vid);
                acc(grads, *vid, vv.shape(), |d| {
                    for (k, &i) in idx.iter().enumerate() {
                        d[i] += g_out.data()[k];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(grads, *a, self.value(*a).shape(), |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g_out.data()).zip(y.data()) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(grads, *a, self.value(*a).shape(), |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g_out.data()).zip(y.data()) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Sum(a) => {
                let g = g_out.scalar_value();
                acc(grads, *a, self.value(*a).shape(), |d| {
                    for dd in d.iter_mut() {
                        *dd += g;
                    }
                });
            }
            Op::LogSumExp(a) => {
                let g = g_out.scalar_value();
                let lse = node.value.scalar_value();
                let va = self.value(*a);
                acc(grads, *a, va.shape(), |d| {
                    for (dd, &x) in d.iter_mut().zip(va.data()) {
                        *dd += g * (x - lse).exp();
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let gdoty = dot(g_out.data(), y);
                acc(grads, *a, self.value(*a).shape(), |d| {
                    for ((dd, &g), &yy) in d.iter_mut().zip(g_out.data()).zip(y) {
                        *dd += yy * (g - gdoty);
                    }
                });
            }
            Op::KernelScores {
                ctx,
                embeds,
                thetas,
                dots,
                ctx_norm,
            } => {
                self.backward_kernel_scores(
                    i, *ctx, *embeds, *thetas, dots, *ctx_norm, g_out, grads,
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_kernel_scores(
        &self,
        out: usize,
        ctx: NodeId,
        embeds: NodeId,
        thetas: NodeId,
        dots: &[f64],
        ctx_norm: f64,
        g_out: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let row_norms = self.row_norms_of(embeds);
        let factors = self.norm_factors_of(thetas);
        let vc = self.value(ctx);
        let ve = self.value(embeds);
        let vt = self.value(thetas);
        let scores = self.nodes[out].value.data();
        let d = vc.numel();
        let ctx_floored = norm(vc.data()) <= NORM_FLOOR;

        let mut d_ctx = vec![0.0; d];
        // Allocate all three gradient slots up front; the per-slot loop then
        // writes into them by raw index.
        acc(grads, ctx, vc.shape(), |_| {});
        acc(grads, embeds, ve.shape(), |_| {});
        acc(grads, thetas, vt.shape(), |_| {});

        for m in 0..ve.rows() {
            let g = g_out.data()[m];
            if g == 0.0 {
                continue;
            }
            let nw = row_norms[m];
            let theta = vt.data()[m];
            let (a, a_prime) = factors[m];
            let cos = dots[m] / (ctx_norm * nw);
            let shape = scores[m] / (ctx_norm * nw); // kernel shape g(theta, cos)
            let (dg_dtheta, dg_dcos) =
                kernel::kernel_shape_grads(theta, cos, shape, a, a_prime);

            // d theta
            if let Some(t) = &mut grads[thetas.0] {
                t.data_mut()[m] += g * ctx_norm * nw * dg_dtheta;
            }

            // dK/d dot and the norm-direction terms.
            let dk_ddot = dg_dcos;
            let dk_dnh = nw * shape - dg_dcos * dots[m] / ctx_norm;
            let dk_dnw = ctx_norm * shape - dg_dcos * dots[m] / nw;

            let w_row = ve.row(m);
            let row_floored = norm(w_row) <= NORM_FLOOR;

            for j in 0..d {
                let mut t = dk_ddot * w_row[j];
                if !ctx_floored {
                    t += dk_dnh * vc.data()[j] / ctx_norm;
                }
                d_ctx[j] += g * t;
            }
            if let Some(t) = &mut grads[embeds.0] {
                let de = &mut t.data_mut()[m * d..(m + 1) * d];
                for j in 0..d {
                    let mut t = dk_ddot * vc.data()[j];
                    if !row_floored {
                        t += dk_dnw * w_row[j] / nw;
                    }
                    de[j] += g * t;
                }
            }
        }
        if let Some(t) = &mut grads[ctx.0] {
            axpy(t.data_mut(), 1.0, &d_ctx);
        }
    }

    /// Re-run every recorded primitive in order and check that it reproduces
    /// the stored forward values bit-exactly. Returns the first mismatching
    /// node, if any.
    pub fn replay_check(&self) -> Option<usize> {
        for (i, node) in self.nodes.iter().enumerate() {
            let recomputed = match &node.op {
                Op::Leaf => continue,
                Op::Add(a, b) => zip_map(self.value(*a), self.value(*b), |x, y| x + y),
                Op::Sub(a, b) => zip_map(self.value(*a), self.value(*b), |x, y| x - y),
                Op::Mul(a, b) => zip_map(self.value(*a), self.value(*b), |x, y| x * y),
                Op::Scale(a, c) => map(self.value(*a), |x| x * c),
                Op::AddScalar(a, c) => map(self.value(*a), |x| x + c),
                Op::Matmul(a, b) => matmul_values(self.value(*a), self.value(*b)),
                Op::MatVec(m, v) => {
                    let (vm, vv) = (self.value(*m), self.value(*v));
                    Tensor::vector((0..vm.rows()).map(|r| dot(vm.row(r), vv.data())).collect())
                }
                Op::VecMat(v, m) => {
                    let (vv, vm) = (self.value(*v), self.value(*m));
                    let mut out = vec![0.0; vm.cols()];
                    for (r, &w) in vv.data().iter().enumerate() {
                        for (o, &x) in out.iter_mut().zip(vm.row(r)) {
                            *o += w * x;
                        }
                    }
                    Tensor::vector(out)
                }
                Op::Row(m, r) => Tensor::vector(self.value(*m).row(*r).to_vec()),
                Op::GatherRows(m, rows) => {
                    let vm = self.value(*m);
                    let mut data = Vec::new();
                    for &r in rows {
                        data.extend_from_slice(vm.row(r));
                    }
                    Tensor::matrix(rows.len(), vm.cols(), data).unwrap()
                }
                Op::Gather(v, idx) => {
                    let vv = self.value(*v);
                    Tensor::vector(idx.iter().map(|&i| vv.data()[i]).collect())
                }
                Op::Sigmoid(a) => map(self.value(*a), sigmoid),
                Op::Tanh(a) => map(self.value(*a), f64::tanh),
                Op::Sum(a) => Tensor::scalar(self.value(*a).data().iter().sum()),
                Op::LogSumExp(a) => Tensor::scalar(super::log_sum_exp(self.value(*a).data())),
                Op::Softmax(a) => {
                    Tensor::vector(super::softmax_stable(self.value(*a).data()).unwrap())
                }
                Op::KernelScores {
                    ctx,
                    embeds,
                    thetas,
                    ..
                } => {
                    let (vc, ve, vt) = (self.value(*ctx), self.value(*embeds), self.value(*thetas));
                    let row_norms = self.row_norms_of(*embeds);
                    let nh = norm(vc.data()).max(NORM_FLOOR);
                    let mut scores = Vec::with_capacity(ve.rows());
                    for r in 0..ve.rows() {
                        let cos = dot(vc.data(), ve.row(r)) / (nh * row_norms[r]);
                        scores.push(nh * row_norms[r] * kernel::kernel_shape(vt.data()[r], cos));
                    }
                    Tensor::vector(scores)
                }
            };
            if recomputed.data() != node.value.data() {
                return Some(i);
            }
        }
        None
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .unwrap()
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..k {
            let aij = a.data()[i * k + j];
            let brow = &b.data()[j * n..(j + 1) * n];
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += aij * x;
            }
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

fn axpy(dst: &mut [f64], c: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    f(slot.as_mut().unwrap().data_mut());
}

//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse. Graphs are built fresh for every forward pass.

use std::cell::RefCell;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{FsdError, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Permute { a: NodeId, index_map: Vec<usize> },
    Select { a: NodeId, index: usize },
    Sum(NodeId),
    Mean(NodeId),
    Trace(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Softmax { a: NodeId, tau: f64 },
    LogSoftmax { a: NodeId, tau: f64 },
    MaskedSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    MaskRows { a: NodeId, keep: Vec<bool> },
    MaskedMeanPool {
        a: NodeId,
        keep: Vec<bool>,
        seq: usize,
    },
    Dropout { a: NodeId, factors: Vec<f64> },
    PairwiseSqDist(NodeId, NodeId),
    PairwiseCosine { a: NodeId, b: NodeId, eps: f64 },
    Nll { logp: NodeId, labels: Vec<usize> },
    L2Norm(NodeId),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) => vec![*a, *b],
            PairwiseSqDist(a, b) => vec![*a, *b],
            PairwiseCosine { a, b, .. } => vec![*a, *b],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Gather { table, .. } => vec![*table],
            Nll { logp, .. } => vec![*logp],
            Scale(a, _) | Transpose(a) | Reshape(a) | Sum(a) | Mean(a) | Trace(a) | Log(a)
            | Sqrt(a) | Gelu(a) | L2Norm(a) | MaskedSoftmax(a) => vec![*a],
            Permute { a, .. }
            | Select { a, .. }
            | Clamp { a, .. }
            | Softmax { a, .. }
            | LogSoftmax { a, .. }
            | MaskRows { a, .. }
            | MaskedMeanPool { a, .. }
            | Dropout { a, .. } => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; see [`Var`] for the handle type.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Tensor>>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, op: Op, value: Tensor) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(FsdError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn value_of(&self, id: NodeId) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Accumulates d(root)/d(node) for every node on the tape.
    ///
    /// Fails when called a second time before [`Graph::zero_grad`].
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(FsdError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(FsdError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let mut out = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.iter().zip(grads) {
            match g {
                Some(g) if node.requires_grad => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(FsdError::NonFinite { op: "backward" });
                    }
                    out.push(Some(Tensor::from_parts(node.value.shape().to_vec(), g)));
                }
                _ => out.push(None),
            }
        }
        *self.grads.borrow_mut() = Some(out);
        Ok(())
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Gradient of the last backward root w.r.t. `var`, if it requires one.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads
            .borrow()
            .as_ref()
            .and_then(|g| g.get(var.id).cloned().flatten())
    }
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: NodeId,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn backprop(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: NodeId| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            ta,
            tb,
        } => {
            let (av, bv) = (val(a).data(), val(b).data());
            if let Some(da) = slot(nodes, grads, a) {
                for bi in 0..batch {
                    let (ao, bo, co) = (bi * m * k, bi * k * n, bi * m * n);
                    let gc = &g[co..co + m * n];
                    let bb = &bv[bo..bo + k * n];
                    let dst = &mut da[ao..ao + m * k];
                    if ta {
                        gemm(k, n, m, bb, tb, gc, true, dst, true);
                    } else {
                        gemm(m, n, k, gc, false, bb, !tb, dst, true);
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for bi in 0..batch {
                    let (ao, bo, co) = (bi * m * k, bi * k * n, bi * m * n);
                    let gc = &g[co..co + m * n];
                    let aa = &av[ao..ao + m * k];
                    let dst = &mut db[bo..bo + k * n];
                    if tb {
                        gemm(n, m, k, gc, true, aa, ta, dst, true);
                    } else {
                        gemm(k, m, n, aa, !ta, gc, false, dst, true);
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(d) = slot(nodes, grads, a) {
                axpy(d, g, 1.0);
            }
            if let Some(d) = slot(nodes, grads, b) {
                axpy(d, g, 1.0);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, a) {
                axpy(d, g, 1.0);
            }
            if let Some(d) = slot(nodes, grads, b) {
                axpy(d, g, -1.0);
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            if let Some(d) = slot(nodes, grads, a) {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            }
            if let Some(d) = slot(nodes, grads, b) {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            }
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            if let Some(d) = slot(nodes, grads, a) {
                for i in 0..d.len() {
                    d[i] += g[i] / bv[i];
                }
            }
            if let Some(d) = slot(nodes, grads, b) {
                for i in 0..d.len() {
                    d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(d) = slot(nodes, grads, a) {
                axpy(d, g, c);
            }
        }
        &Op::AddRow(a, bias) => {
            if let Some(d) = slot(nodes, grads, a) {
                axpy(d, g, 1.0);
            }
            if let Some(d) = slot(nodes, grads, bias) {
                let w = d.len();
                for row in g.chunks(w) {
                    axpy(d, row, 1.0);
                }
            }
        }
        &Op::Transpose(a) => {
            let (m, n) = (val(a).shape()[0], val(a).shape()[1]);
            if let Some(d) = slot(nodes, grads, a) {
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        &Op::Reshape(a) => {
            if let Some(d) = slot(nodes, grads, a) {
                axpy(d, g, 1.0);
            }
        }
        Op::Permute { a, index_map } => {
            if let Some(d) = slot(nodes, grads, *a) {
                for (o, &i) in index_map.iter().enumerate() {
                    d[i] += g[o];
                }
            }
        }
        &Op::Select { a, index } => {
            if let Some(d) = slot(nodes, grads, a) {
                let w = g.len();
                axpy(&mut d[index * w..(index + 1) * w], g, 1.0);
            }
        }
        &Op::Sum(a) => {
            if let Some(d) = slot(nodes, grads, a) {
                d.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        &Op::Mean(a) => {
            if let Some(d) = slot(nodes, grads, a) {
                let c = g[0] / d.len() as f64;
                d.iter_mut().for_each(|x| *x += c);
            }
        }
        &Op::Trace(a) => {
            let n = val(a).shape()[0];
            if let Some(d) = slot(nodes, grads, a) {
                for i in 0..n {
                    d[i * n + i] += g[0];
                }
            }
        }
        &Op::Log(a) => {
            let av = val(a).data();
            if let Some(d) = slot(nodes, grads, a) {
                for i in 0..d.len() {
                    d[i] += g[i] / av[i];
                }
            }
        }
        &Op::Sqrt(a) => {
            let ov = out.data();
            if let Some(d) = slot(nodes, grads, a) {
                for i in 0..d.len() {
                    d[i] += g[i] / (2.0 * ov[i]);
                }
            }
        }
        &Op::Clamp { a, lo, hi } => {
            let av = val(a).data();
            if let Some(d) = slot(nodes, grads, a) {
                for i in 0..d.len() {
                    if av[i] >= lo && av[i] <= hi {
                        d[i] += g[i];
                    }
                }
            }
        }
        &Op::Softmax { a, tau } => {
            let y = out.data();
            let w = *out.shape().last().unwrap();
            if let Some(d) = slot(nodes, grads, a) {
                for r in 0..y.len() / w {
                    let s = r * w;
                    let dot: f64 = (s..s + w).map(|i| y[i] * g[i]).sum();
                    for i in s..s + w {
                        d[i] += y[i] * (g[i] - dot) / tau;
                    }
                }
            }
        }
        &Op::LogSoftmax { a, tau } => {
            let y = out.data();
            let w = *out.shape().last().unwrap();
            if let Some(d) = slot(nodes, grads, a) {
                for r in 0..y.len() / w {
                    let s = r * w;
                    let gsum: f64 = g[s..s + w].iter().sum();
                    for i in s..s + w {
                        d[i] += (g[i] - y[i].exp() * gsum) / tau;
                    }
                }
            }
        }
        &Op::MaskedSoftmax(a) => {
            let y = out.data();
            let w = *out.shape().last().unwrap();
            if let Some(d) = slot(nodes, grads, a) {
                for r in 0..y.len() / w {
                    let s = r * w;
                    let dot: f64 = (s..s + w).map(|i| y[i] * g[i]).sum();
                    for i in s..s + w {
                        d[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        }
        &Op::LayerNorm { x, gain, bias, eps } => {
            let xv = val(x).data();
            let gv = val(gain).data();
            let w = gv.len();
            let rows = xv.len() / w;
            let mut xhat = vec![0.0; xv.len()];
            let mut inv = vec![0.0; rows];
            for r in 0..rows {
                let row = &xv[r * w..(r + 1) * w];
                let mu = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
                inv[r] = 1.0 / (var + eps).sqrt();
                for j in 0..w {
                    xhat[r * w + j] = (row[j] - mu) * inv[r];
                }
            }
            if let Some(d) = slot(nodes, grads, gain) {
                for r in 0..rows {
                    for j in 0..w {
                        d[j] += g[r * w + j] * xhat[r * w + j];
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, bias) {
                for r in 0..rows {
                    axpy(d, &g[r * w..(r + 1) * w], 1.0);
                }
            }
            if let Some(d) = slot(nodes, grads, x) {
                let mut dxhat = vec![0.0; w];
                for r in 0..rows {
                    let s = r * w;
                    for j in 0..w {
                        dxhat[j] = g[s + j] * gv[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / w as f64;
                    let m2 = (0..w).map(|j| dxhat[j] * xhat[s + j]).sum::<f64>() / w as f64;
                    for j in 0..w {
                        d[s + j] += inv[r] * (dxhat[j] - m1 - xhat[s + j] * m2);
                    }
                }
            }
        }
        &Op::Gelu(a) => {
            let av = val(a).data();
            if let Some(d) = slot(nodes, grads, a) {
                for i in 0..d.len() {
                    d[i] += g[i] * gelu_grad(av[i]);
                }
            }
        }
        Op::Gather { table, ids } => {
            if let Some(d) = slot(nodes, grads, *table) {
                let w = nodes[*table].value.row_len();
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut d[id * w..(id + 1) * w], &g[r * w..(r + 1) * w], 1.0);
                }
            }
        }
        Op::MaskRows { a, keep } => {
            if let Some(d) = slot(nodes, grads, *a) {
                let w = d.len() / keep.len();
                for (r, &k) in keep.iter().enumerate() {
                    if k {
                        axpy(&mut d[r * w..(r + 1) * w], &g[r * w..(r + 1) * w], 1.0);
                    }
                }
            }
        }
        Op::MaskedMeanPool { a, keep, seq } => {
            if let Some(d) = slot(nodes, grads, *a) {
                let w = d.len() / keep.len();
                for (b, chunk) in keep.chunks(*seq).enumerate() {
                    let count = chunk.iter().filter(|&&k| k).count() as f64;
                    for (t, &k) in chunk.iter().enumerate() {
                        if k {
                            let r = b * seq + t;
                            axpy(&mut d[r * w..(r + 1) * w], &g[b * w..(b + 1) * w], 1.0 / count);
                        }
                    }
                }
            }
        }
        Op::Dropout { a, factors } => {
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] * factors[i];
                }
            }
        }
        &Op::PairwiseSqDist(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let w = val(a).row_len();
            let (n, m) = (av.len() / w, bv.len() / w);
            if let Some(d) = slot(nodes, grads, a) {
                for i in 0..n {
                    for j in 0..m {
                        let c = 2.0 * g[i * m + j];
                        for t in 0..w {
                            d[i * w + t] += c * (av[i * w + t] - bv[j * w + t]);
                        }
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, b) {
                for i in 0..n {
                    for j in 0..m {
                        let c = 2.0 * g[i * m + j];
                        for t in 0..w {
                            d[j * w + t] -= c * (av[i * w + t] - bv[j * w + t]);
                        }
                    }
                }
            }
        }
        &Op::PairwiseCosine { a, b, eps } => {
            let (av, bv) = (val(a).data(), val(b).data());
            let w = val(a).row_len();
            let (n, m) = (av.len() / w, bv.len() / w);
            let (na, a_live) = guarded_norms(&av, w, eps);
            let (nb, b_live) = guarded_norms(&bv, w, eps);
            let c = out.data();
            if let Some(d) = slot(nodes, grads, a) {
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        let s = gij / (na[i] * nb[j]);
                        let r = if a_live[i] { gij * c[i * m + j] / (na[i] * na[i]) } else { 0.0 };
                        for t in 0..w {
                            d[i * w + t] += s * bv[j * w + t] - r * av[i * w + t];
                        }
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, b) {
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        let s = gij / (na[i] * nb[j]);
                        let r = if b_live[j] { gij * c[i * m + j] / (nb[j] * nb[j]) } else { 0.0 };
                        for t in 0..w {
                            d[j * w + t] += s * av[i * w + t] - r * bv[j * w + t];
                        }
                    }
                }
            }
        }
        Op::Nll { logp, labels } => {
            if let Some(d) = slot(nodes, grads, *logp) {
                let k = d.len() / labels.len();
                let c = -g[0] / labels.len() as f64;
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] += c;
                }
            }
        }
        &Op::L2Norm(a) => {
            let av = val(a).data();
            let norm = out.item();
            if let Some(d) = slot(nodes, grads, a) {
                if norm > 0.0 {
                    for i in 0..d.len() {
                        d[i] += g[0] * av[i] / norm;
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row norms floored at `eps`, plus whether each row is above the floor.
fn guarded_norms(data: &[f64], w: usize, eps: f64) -> (Vec<f64>, Vec<bool>) {
    data.chunks(w)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > eps {
                (n, true)
            } else {
                (eps, false)
            }
        })
        .unzip()
}

fn permute_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(
            idx.iter()
                .zip(axes)
                .map(|(&i, &ax)| i * in_strides[ax])
                .sum(),
        );
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FsdError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_of(self.id).shape().to_vec()
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id).clone()
    }

    /// The single value of a scalar var.
    pub fn item(&self) -> f64 {
        self.graph.value_of(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    fn unary(
        &self,
        name: &'static str,
        op: Op,
        f: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<Var<'g>> {
        let value = f(&self.graph.value_of(self.id))?;
        self.graph.push(name, op, value)
    }

    fn zip(
        &self,
        other: &Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            same_shape(name, &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.graph.push(name, op, value)
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        {
            let b = self.graph.value_of(other.id);
            if b.data().iter().any(|&v| v == 0.0) {
                return Err(FsdError::domain("div", "division by zero"));
            }
        }
        self.zip(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn square(&self) -> Result<Var<'g>> {
        self.mul(self)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        self.unary("scale", Op::Scale(self.id, c), |t| Ok(t.scaled(c)))
    }

    pub fn neg(&self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    /// Adds `bias` (a vector of the last extent) to every row.
    pub fn add_row(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(bias.id);
            let w = *a.shape().last().unwrap_or(&1);
            if b.rank() != 1 || b.len() != w {
                return Err(FsdError::shape(
                    "add_row",
                    format!("{:?} + row {:?}", a.shape(), b.shape()),
                ));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(w) {
                for (x, y) in row.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.graph.push("add_row", Op::AddRow(self.id, bias.id), value)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.matmul_t(other, false, false)
    }

    /// 2-D product `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(&self, other: &Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(FsdError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        self.batched_matmul_impl(other, 1, [sa[0], sa[1]], [sb[0], sb[1]], ta, tb, vec![])
    }

    /// Batched product over the leading axis of two rank-3 tensors.
    pub fn bmm(&self, other: &Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(FsdError::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        self.batched_matmul_impl(other, sa[0], [sa[1], sa[2]], [sb[1], sb[2]], ta, tb, vec![sa[0]])
    }

    #[allow(clippy::too_many_arguments)]
    fn batched_matmul_impl(
        &self,
        other: &Var<'g>,
        batch: usize,
        sa: [usize; 2],
        sb: [usize; 2],
        ta: bool,
        tb: bool,
        prefix: Vec<usize>,
    ) -> Result<Var<'g>> {
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(FsdError::shape(
                "matmul",
                format!("inner extents {k} and {k2} differ"),
            ));
        }
        let value = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            let mut c = vec![0.0; batch * m * n];
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    ta,
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    tb,
                    &mut c[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
            let mut shape = prefix;
            shape.extend([m, n]);
            Tensor::from_parts(shape, c)
        };
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            batch,
            m,
            k,
            n,
            ta,
            tb,
        };
        self.graph.push("matmul", op, value)
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        self.unary("transpose", Op::Transpose(self.id), |t| {
            if t.rank() != 2 {
                return Err(FsdError::shape("transpose", format!("{:?}", t.shape())));
            }
            Ok(t.transpose2())
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let shape = shape.into();
        self.unary("reshape", Op::Reshape(self.id), |t| t.reshape(shape))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(FsdError::shape("permute", format!("{shape:?} by {axes:?}")));
        }
        let index_map = permute_index_map(&shape, axes);
        let value = {
            let t = self.graph.value_of(self.id);
            let data = index_map.iter().map(|&i| t.data()[i]).collect();
            Tensor::from_parts(axes.iter().map(|&a| shape[a]).collect(), data)
        };
        self.graph.push(
            "permute",
            Op::Permute {
                a: self.id,
                index_map,
            },
            value,
        )
    }

    /// The `index`-th slice along the first axis.
    pub fn select(&self, index: usize) -> Result<Var<'g>> {
        self.unary("select", Op::Select { a: self.id, index }, |t| {
            if t.rank() == 0 || index >= t.shape()[0] {
                return Err(FsdError::shape("select", format!("{index} of {:?}", t.shape())));
            }
            Ok(t.select(index))
        })
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        self.unary("sum", Op::Sum(self.id), |t| Ok(Tensor::from_parts(vec![], vec![t.sum()])))
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        self.unary("mean", Op::Mean(self.id), |t| {
            Ok(Tensor::from_parts(vec![], vec![t.sum() / t.len() as f64]))
        })
    }

    pub fn trace(&self) -> Result<Var<'g>> {
        self.unary("trace", Op::Trace(self.id), |t| {
            if t.rank() != 2 || t.shape()[0] != t.shape()[1] {
                return Err(FsdError::shape("trace", format!("{:?}", t.shape())));
            }
            let n = t.shape()[0];
            Ok(Tensor::from_parts(vec![], vec![(0..n).map(|i| t.data()[i * n + i]).sum()]))
        })
    }

    pub fn log(&self) -> Result<Var<'g>> {
        self.unary("log", Op::Log(self.id), |t| {
            if let Some(v) = t.data().iter().find(|&&v| v <= 0.0) {
                return Err(FsdError::domain("log", format!("non-positive input {v}")));
            }
            Ok(t.map(f64::ln))
        })
    }

    pub fn sqrt(&self) -> Result<Var<'g>> {
        self.unary("sqrt", Op::Sqrt(self.id), |t| {
            if let Some(v) = t.data().iter().find(|&&v| v < 0.0) {
                return Err(FsdError::domain("sqrt", format!("negative input {v}")));
            }
            Ok(t.map(f64::sqrt))
        })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'g>> {
        self.unary("clamp", Op::Clamp { a: self.id, lo, hi }, |t| Ok(t.map(|v| v.clamp(lo, hi))))
    }

    pub fn clamp_min(&self, lo: f64) -> Result<Var<'g>> {
        self.clamp(lo, f64::INFINITY)
    }

    /// Softmax over the last axis of `self / tau`, max-subtracted.
    pub fn softmax_rows(&self, tau: f64) -> Result<Var<'g>> {
        check_tau(tau)?;
        self.unary("softmax", Op::Softmax { a: self.id, tau }, |t| {
            Ok(row_softmax(t, tau, false))
        })
    }

    /// Log-softmax over the last axis of `self / tau`.
    pub fn log_softmax_rows(&self, tau: f64) -> Result<Var<'g>> {
        check_tau(tau)?;
        self.unary("log_softmax", Op::LogSoftmax { a: self.id, tau }, |t| {
            Ok(row_softmax(t, tau, true))
        })
    }

    /// Softmax over the last axis where masked-out keys get probability 0.
    ///
    /// `key_mask` holds one flag per (group, key); each group spans
    /// `rows_per_group` consecutive rows.
    pub fn masked_softmax(&self, key_mask: &[bool], rows_per_group: usize) -> Result<Var<'g>> {
        let value = {
            let t = self.graph.value_of(self.id);
            let w = *t.shape().last().unwrap_or(&1);
            let rows = t.len() / w;
            if rows_per_group == 0 || rows % rows_per_group != 0 || key_mask.len() != (rows / rows_per_group) * w {
                return Err(FsdError::shape("masked_softmax", "mask does not cover the input"));
            }
            let mut out = vec![0.0; t.len()];
            for r in 0..rows {
                let mask = &key_mask[(r / rows_per_group) * w..(r / rows_per_group + 1) * w];
                let row = &t.data()[r * w..(r + 1) * w];
                let max = row
                    .iter()
                    .zip(mask)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(FsdError::domain("masked_softmax", "row with every key masked"));
                }
                let mut z = 0.0;
                for j in 0..w {
                    if mask[j] {
                        let e = (row[j] - max).exp();
                        out[r * w + j] = e;
                        z += e;
                    }
                }
                for v in &mut out[r * w..(r + 1) * w] {
                    *v /= z;
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        };
        self.graph.push(
            "masked_softmax",
            Op::MaskedSoftmax(self.id),
            value,
        )
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, gain: &Var<'g>, bias: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let value = {
            let x = self.graph.value_of(self.id);
            let gv = self.graph.value_of(gain.id);
            let bv = self.graph.value_of(bias.id);
            let w = *x.shape().last().unwrap_or(&1);
            if gv.len() != w || bv.len() != w {
                return Err(FsdError::shape("layer_norm", "gain/bias width mismatch"));
            }
            let mut out = vec![0.0; x.len()];
            for (r, row) in x.data().chunks(w).enumerate() {
                let mu = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..w {
                    out[r * w + j] = (row[j] - mu) * inv * gv.data()[j] + bv.data()[j];
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        self.graph.push(
            "layer_norm",
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            value,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Var<'g>> {
        self.unary("gelu", Op::Gelu(self.id), |t| Ok(t.map(gelu)))
    }

    /// Rows of a `[V, D]` table picked by `ids`, giving `[ids.len(), D]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g>> {
        self.unary(
            "gather",
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            |t| {
                if t.rank() != 2 {
                    return Err(FsdError::shape("gather", "table must be 2-D"));
                }
                let (v, w) = (t.shape()[0], t.shape()[1]);
                let mut data = Vec::with_capacity(ids.len() * w);
                for &id in ids {
                    if id >= v {
                        return Err(FsdError::shape("gather", format!("id {id} >= {v}")));
                    }
                    data.extend_from_slice(t.row(id));
                }
                Ok(Tensor::from_parts(vec![ids.len(), w], data))
            },
        )
    }

    /// Replaces rows whose flag is false with exact zeros.
    pub fn mask_rows(&self, keep: &[bool]) -> Result<Var<'g>> {
        self.unary(
            "mask_rows",
            Op::MaskRows {
                a: self.id,
                keep: keep.to_vec(),
            },
            |t| {
                if t.len() % keep.len().max(1) != 0 || keep.is_empty() {
                    return Err(FsdError::shape("mask_rows", "mask length"));
                }
                let w = t.len() / keep.len();
                let mut data = t.data().to_vec();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        data[r * w..(r + 1) * w].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                Ok(Tensor::from_parts(t.shape().to_vec(), data))
            },
        )
    }

    /// Mean over the kept positions of each length-`seq` group of rows:
    /// `[B*seq, D] -> [B, D]`.
    pub fn masked_mean_pool(&self, keep: &[bool], seq: usize) -> Result<Var<'g>> {
        self.unary(
            "masked_mean_pool",
            Op::MaskedMeanPool {
                a: self.id,
                keep: keep.to_vec(),
                seq,
            },
            |t| {
                if t.rank() != 2 || t.shape()[0] != keep.len() || seq == 0 || keep.len() % seq != 0 {
                    return Err(FsdError::shape("masked_mean_pool", format!("{:?}", t.shape())));
                }
                let w = t.shape()[1];
                let b = keep.len() / seq;
                let mut out = vec![0.0; b * w];
                for bi in 0..b {
                    let count = keep[bi * seq..(bi + 1) * seq].iter().filter(|&&k| k).count();
                    if count == 0 {
                        return Err(FsdError::domain("masked_mean_pool", "sample without tokens"));
                    }
                    for s in 0..seq {
                        if keep[bi * seq + s] {
                            let row = t.row(bi * seq + s);
                            for j in 0..w {
                                out[bi * w + j] += row[j];
                            }
                        }
                    }
                    for j in 0..w {
                        out[bi * w + j] /= count as f64;
                    }
                }
                Ok(Tensor::from_parts(vec![b, w], out))
            },
        )
    }

    /// Multiplies elementwise by precomputed dropout factors (0 or 1/(1-p)).
    pub fn dropout_with(&self, factors: Vec<f64>) -> Result<Var<'g>> {
        let value = {
            let t = self.graph.value_of(self.id);
            if factors.len() != t.len() {
                return Err(FsdError::shape("dropout", "factor count"));
            }
            Tensor::from_parts(
                t.shape().to_vec(),
                t.data().iter().zip(&factors).map(|(a, b)| a * b).collect(),
            )
        };
        self.graph.push("dropout", Op::Dropout { a: self.id, factors }, value)
    }

    /// Squared Euclidean distances between rows: `[n, D] x [m, D] -> [n, m]`.
    pub fn pairwise_sq_dist(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            check_rows_compatible("pairwise_sq_dist", &a, &b)?;
            let w = a.row_len();
            let (n, m) = (a.rows(), b.rows());
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    out[i * m + j] = a
                        .row(i)
                        .iter()
                        .zip(b.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                }
            }
            let _ = w;
            Tensor::from_parts(vec![n, m], out)
        };
        self.graph.push("pairwise_sq_dist", Op::PairwiseSqDist(self.id, other.id), value)
    }

    /// Cosine similarities between rows, with row norms floored at `eps`.
    pub fn pairwise_cosine(&self, other: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let value = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            check_rows_compatible("pairwise_cosine", &a, &b)?;
            let w = a.row_len();
            let (na, _) = guarded_norms(a.data(), w, eps);
            let (nb, _) = guarded_norms(b.data(), w, eps);
            let (n, m) = (a.rows(), b.rows());
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                    out[i * m + j] = dot / (na[i] * nb[j]);
                }
            }
            Tensor::from_parts(vec![n, m], out)
        };
        self.graph.push(
            "pairwise_cosine",
            Op::PairwiseCosine {
                a: self.id,
                b: other.id,
                eps,
            },
            value,
        )
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities.
    pub fn nll(&self, labels: &[usize]) -> Result<Var<'g>> {
        self.unary(
            "nll",
            Op::Nll {
                logp: self.id,
                labels: labels.to_vec(),
            },
            |t| {
                if t.rank() != 2 || t.shape()[0] != labels.len() {
                    return Err(FsdError::shape("nll", format!("{:?} vs {} labels", t.shape(), labels.len())));
                }
                let k = t.shape()[1];
                if let Some(&y) = labels.iter().find(|&&y| y >= k) {
                    return Err(FsdError::shape("nll", format!("label {y} >= {k} classes")));
                }
                let s: f64 = labels.iter().enumerate().map(|(i, &y)| t.data()[i * k + y]).sum();
                Ok(Tensor::from_parts(vec![], vec![-s / labels.len() as f64]))
            },
        )
    }

    pub fn l2_norm(&self) -> Result<Var<'g>> {
        self.unary("l2_norm", Op::L2Norm(self.id), |t| {
            Ok(Tensor::from_parts(vec![], vec![t.data().iter().map(|v| v * v).sum::<f64>().sqrt()]))
        })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(FsdError::domain("softmax", format!("temperature {tau} must be positive")));
    }
    Ok(())
}

fn check_rows_compatible(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(FsdError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn row_softmax(t: &Tensor, tau: f64, log: bool) -> Tensor {
    let w = *t.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; t.len()];
    for (r, row) in t.data().chunks(w).enumerate() {
        let max = row.iter().map(|v| v / tau).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v / tau - max).exp()).sum();
        let lz = z.ln();
        for j in 0..w {
            let s = row[j] / tau - max;
            out[r * w + j] = if log { s - lz } else { s.exp() / z };
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

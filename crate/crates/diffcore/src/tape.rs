//! Recording tape and the differentiable operation set.
//!
//! Every operation evaluates eagerly and, when any input requires a
//! gradient, appends a node describing how to push gradients back to its
//! inputs. Nodes are stored in execution order, which is a topological
//! order, so [`Tape::backward`] walks them once in reverse.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use crate::dropout::{keep_mask, DropoutKey};
use crate::error::{invalid, mismatch, DiffError, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::{gemm, gemm_view, Scalar};
use crate::tensor::{matmul_dims, Tensor};

/// How the right operand of a binary op maps onto the output.
#[derive(Clone, Debug)]
enum Broadcast {
    Same,
    /// rhs repeats every `n` output elements.
    Suffix(usize),
    /// Arbitrary broadcast; output element `i` reads rhs element `map[i]`.
    General(Vec<usize>),
}

impl Broadcast {
    fn resolve(lhs: &[usize], rhs: &[usize], op: &'static str) -> Result<Self> {
        if lhs == rhs {
            return Ok(Broadcast::Same);
        }
        let trimmed: Vec<usize> = rhs.iter().copied().skip_while(|&d| d == 1).collect();
        let rn: usize = rhs.iter().product();
        if trimmed.len() <= lhs.len() && lhs[lhs.len() - trimmed.len()..] == trimmed[..] {
            return Ok(Broadcast::Suffix(rn.max(1)));
        }
        if rhs.len() > lhs.len() {
            return Err(mismatch(op, lhs, rhs));
        }
        let offset = lhs.len() - rhs.len();
        let mut strides = vec![0usize; lhs.len()];
        let mut acc = 1;
        for d in (0..rhs.len()).rev() {
            let (ld, rd) = (lhs[offset + d], rhs[d]);
            if rd == ld {
                strides[offset + d] = acc;
            } else if rd != 1 {
                return Err(mismatch(op, lhs, rhs));
            }
            acc *= rd;
        }
        let numel: usize = lhs.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; lhs.len()];
        for _ in 0..numel {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..lhs.len()).rev() {
                idx[d] += 1;
                if idx[d] < lhs[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Broadcast::General(map))
    }

    /// Calls `f(output_index, rhs_index)` for every output element in order.
    #[inline]
    fn for_each(&self, len: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            Broadcast::Same => (0..len).for_each(|k| f(k, k)),
            Broadcast::Suffix(n) => {
                for base in (0..len).step_by(*n) {
                    for j in 0..*n {
                        f(base + j, j);
                    }
                }
            }
            Broadcast::General(map) => map.iter().enumerate().for_each(|(k, &j)| f(k, j)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Abs,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Binary {
        kind: BinaryKind,
        lhs: usize,
        rhs: usize,
        bc: Broadcast,
    },
    MatMul {
        lhs: usize,
        rhs: usize,
    },
    Scale {
        input: usize,
        factor: F,
    },
    Unary {
        kind: UnaryKind,
        input: usize,
    },
    Transpose {
        input: usize,
    },
    Reshape {
        input: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Sum {
        input: usize,
        axis: Option<usize>,
        mean: bool,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        scale: F,
        causal: bool,
        /// Attention weights, `heads x n x m`.
        probs: Vec<F>,
    },
    Gelu {
        input: usize,
        /// tanh of the inner polynomial, reused by the backward pass.
        t: Vec<F>,
    },
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Dropout {
        input: usize,
        mask: Vec<F>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<F>,
        targets: Vec<usize>,
        weights: Vec<F>,
        smoothing: F,
    },
    Huber {
        input: usize,
        delta: F,
    },
    AvgPool1d {
        input: usize,
        window: usize,
    },
    Upsample1d {
        input: usize,
        factor: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Splits a shape around `axis` into `(outer, axis length, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Ordered record of executed operations.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    recording: bool,
    consumed: Cell<bool>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: ParamGrads<F>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf created with [`Tape::input`] or [`Tape::param`].
    /// `None` when the leaf did not influence the loss.
    pub fn wrt(&self, var: Var<'_, F>) -> Option<Tensor<F>> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Tensor::new(&var.shape(), g.clone()).ok()
    }

    pub fn params(&self) -> &ParamGrads<F> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<F> {
        self.params
    }
}

impl<F: Scalar> Tape<F> {
    /// A tape that records operations for differentiation.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    /// A tape that evaluates the same forward math but records nothing.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of values held by the tape.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of differentiable operations recorded.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let requires_grad = requires_grad && self.recording;
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn input(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf holding a copy of a stored parameter. Repeated calls with the same
    /// id return the same node.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let var = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes.borrow_mut()[var.id].param = Some(id);
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    /// Parameter looked up by name.
    pub fn param_named(&self, store: &ParamStore<F>, name: &str) -> Result<Var<'_, F>> {
        Ok(self.param(store, store.id(name)?))
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if self.consumed.get() {
            return Err(DiffError::TapeConsumed);
        }
        let shape = loss.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NotScalar(shape));
        }
        self.consumed.set(true);
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![F::one()]);
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
        }
        let mut params = ParamGrads::default();
        for (i, node) in nodes.iter().enumerate() {
            if let Some(p) = node.param {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| vec![F::zero(); node.value.numel()]);
                params.entries.push((p, g));
            }
        }
        Ok(Gradients { grads, params })
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], id: usize, contribution: Vec<F>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop<F: Scalar>(nodes: &[Node<F>], i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let node = &nodes[i];
    let out = &node.value;
    let needs = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, lhs, rhs, bc } => {
            let a = nodes[*lhs].value.data();
            let b = nodes[*rhs].value.data();
            if needs(*lhs) {
                let ga: Vec<F> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                    BinaryKind::Mul | BinaryKind::Div => {
                        let mut ga = Vec::with_capacity(g.len());
                        let mul = matches!(kind, BinaryKind::Mul);
                        bc.for_each(g.len(), |k, j| ga.push(if mul { g[k] * b[j] } else { g[k] / b[j] }));
                        ga
                    }
                };
                accumulate(grads, *lhs, ga);
            }
            if needs(*rhs) {
                let mut gb = vec![F::zero(); b.len()];
                bc.for_each(g.len(), |k, j| {
                    let gk = g[k];
                    gb[j] += match kind {
                        BinaryKind::Add => gk,
                        BinaryKind::Sub => -gk,
                        BinaryKind::Mul => gk * a[k],
                        BinaryKind::Div => -gk * a[k] / (b[j] * b[j]),
                    };
                });
                accumulate(grads, *rhs, gb);
            }
        }
        Op::MatMul { lhs, rhs } => {
            let a = &nodes[*lhs].value;
            let b = &nodes[*rhs].value;
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs(*lhs) {
                let mut ga = vec![F::zero(); m * k];
                gemm(g, false, b.data(), true, &mut ga, m, n, k, false);
                accumulate(grads, *lhs, ga);
            }
            if needs(*rhs) {
                let mut gb = vec![F::zero(); k * n];
                gemm(a.data(), true, g, false, &mut gb, k, m, n, false);
                accumulate(grads, *rhs, gb);
            }
        }
        Op::Scale { input, factor } => {
            accumulate(grads, *input, g.iter().map(|&v| v * *factor).collect());
        }
        Op::Unary { kind, input } => {
            let x = nodes[*input].value.data();
            let y = out.data();
            let gx: Vec<F> = match kind {
                UnaryKind::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(&gk, &xk)| if xk > F::zero() { gk } else { F::zero() })
                    .collect(),
                UnaryKind::Sigmoid => g
                    .iter()
                    .zip(y)
                    .map(|(&gk, &yk)| gk * yk * (F::one() - yk))
                    .collect(),
                UnaryKind::Tanh => g
                    .iter()
                    .zip(y)
                    .map(|(&gk, &yk)| gk * (F::one() - yk * yk))
                    .collect(),
                UnaryKind::Abs => g
                    .iter()
                    .zip(x)
                    .map(|(&gk, &xk)| {
                        if xk > F::zero() {
                            gk
                        } else if xk < F::zero() {
                            -gk
                        } else {
                            F::zero()
                        }
                    })
                    .collect(),
            };
            accumulate(grads, *input, gx);
        }
        Op::Transpose { input } => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut gx = vec![F::zero(); r * c];
            for a in 0..r {
                for b in 0..c {
                    gx[b * r + a] = g[a * c + b];
                }
            }
            accumulate(grads, *input, gx);
        }
        Op::Reshape { input } => accumulate(grads, *input, g.to_vec()),
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let (outer, _, inner) = axis_split(shape, *axis);
            let total = shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis];
                if needs(inp) {
                    let mut gx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[start..start + len * inner]);
                    }
                    accumulate(grads, inp, gx);
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = nodes[*input].value.shape();
            let (outer, n, inner) = axis_split(in_shape, *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![F::zero(); outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accumulate(grads, *input, gx);
        }
        Op::Sum { input, axis, mean } => {
            let in_shape = nodes[*input].value.shape();
            let numel: usize = in_shape.iter().product();
            let gx = match axis {
                None => {
                    let v = if *mean { g[0] / F::from_f64(numel as f64) } else { g[0] };
                    vec![v; numel]
                }
                Some(ax) => {
                    let (outer, n, inner) = axis_split(in_shape, *ax);
                    let s = if *mean { F::one() / F::from_f64(n as f64) } else { F::one() };
                    let mut gx = vec![F::zero(); numel];
                    for o in 0..outer {
                        for k in 0..n {
                            for j in 0..inner {
                                gx[(o * n + k) * inner + j] = g[o * inner + j] * s;
                            }
                        }
                    }
                    gx
                }
            };
            accumulate(grads, *input, gx);
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            scale,
            causal,
            probs,
        } => {
            let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
            let (n, m) = (qv.shape()[0], kv.shape()[0]);
            let (dq, dv) = (qv.shape()[1], vv.shape()[1]);
            let (dh, dvh) = (dq / heads, dv / heads);
            let mut gq = vec![F::zero(); n * dq];
            let mut gk = vec![F::zero(); m * dq];
            let mut gv = vec![F::zero(); m * dv];
            let mut ds = vec![F::zero(); n * m];
            for h in 0..*heads {
                let p = &probs[h * n * m..(h + 1) * n * m];
                for (r0, r1, kend) in attention_blocks(n, m, *causal) {
                    let rows = r1 - r0;
                    // dP = dO_h V_h^T over the visible keys
                    gemm_view(
                        rows, dvh, kend,
                        (g, r0 * dv + h * dvh, dv as isize, 1),
                        (vv.data(), h * dvh, 1, dv as isize),
                        F::zero(),
                        (&mut ds, r0 * m, m as isize, 1),
                    );
                    for i in r0..r1 {
                        let dr = &mut ds[i * m..i * m + kend];
                        let pr = &p[i * m..i * m + kend];
                        let dot: F = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for (d, &pk) in dr.iter_mut().zip(pr) {
                            *d = pk * (*d - dot) * *scale;
                        }
                    }
                    gemm_view(
                        rows, kend, dh,
                        (&ds, r0 * m, m as isize, 1),
                        (kv.data(), h * dh, dq as isize, 1),
                        F::one(),
                        (&mut gq, r0 * dq + h * dh, dq as isize, 1),
                    );
                    gemm_view(
                        kend, rows, dh,
                        (&ds, r0 * m, 1, m as isize),
                        (qv.data(), r0 * dq + h * dh, dq as isize, 1),
                        F::one(),
                        (&mut gk, h * dh, dq as isize, 1),
                    );
                    gemm_view(
                        kend, rows, dvh,
                        (p, r0 * m, 1, m as isize),
                        (g, r0 * dv + h * dvh, dv as isize, 1),
                        F::one(),
                        (&mut gv, h * dvh, dv as isize, 1),
                    );
                }
            }
            for (id, gx) in [(*q, gq), (*k, gk), (*v, gv)] {
                if needs(id) {
                    accumulate(grads, id, gx);
                }
            }
        }
        Op::Gelu { input, t } => {
            let x = nodes[*input].value.data();
            let c = F::from_f64(GELU_C);
            let a = F::from_f64(GELU_A);
            let three = F::from_f64(3.0);
            let half = F::from_f64(0.5);
            let gx: Vec<F> = g
                .iter()
                .zip(x)
                .zip(t)
                .map(|((&gk, &xk), &tk)| {
                    let dinner = c * (F::one() + three * a * xk * xk);
                    gk * (half * (F::one() + tk) + half * xk * (F::one() - tk * tk) * dinner)
                })
                .collect();
            accumulate(grads, *input, gx);
        }
        Op::Softmax { input, axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![F::zero(); y.len()];
            if inner == 1 {
                for ((gr, yr), xr) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gk), &yk) in xr.iter_mut().zip(gr).zip(yr) {
                        *o = yk * (gk - dot);
                    }
                }
                accumulate(grads, *input, gx);
                return;
            }
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + j;
                    let dot: F = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                    for k in 0..n {
                        gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            accumulate(grads, *input, gx);
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = *nodes[*gain].value.shape().last().unwrap();
            let rows = xhat.len() / d;
            let gamma = nodes[*gain].value.data();
            if needs(*gain) {
                let mut gg = vec![F::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                accumulate(grads, *gain, gg);
            }
            if needs(*bias) {
                let mut gb = vec![F::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
                accumulate(grads, *bias, gb);
            }
            if needs(*input) {
                let df = F::from_f64(d as f64);
                let mut gx = vec![F::zero(); rows * d];
                for r in 0..rows {
                    let row = r * d..(r + 1) * d;
                    let dxhat: Vec<F> = g[row.clone()].iter().zip(gamma).map(|(&a, &b)| a * b).collect();
                    let sum_d: F = dxhat.iter().copied().sum();
                    let sum_dx: F = dxhat.iter().zip(&xhat[row.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] =
                            inv_std[r] / df * (df * dxhat[j] - sum_d - xhat[r * d + j] * sum_dx);
                    }
                }
                accumulate(grads, *input, gx);
            }
        }
        Op::Dropout { input, mask } => {
            accumulate(grads, *input, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
        }
        Op::Embedding { table, ids } => {
            let shape = nodes[*table].value.shape();
            let d = shape[1];
            let mut gt = vec![F::zero(); shape[0] * d];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id * d + j] += g[r * d + j];
                }
            }
            accumulate(grads, *table, gt);
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            weights,
            smoothing,
        } => {
            let v = nodes[*logits].value.shape()[1];
            let off = *smoothing / F::from_f64(v as f64);
            let on = F::one() - *smoothing + off;
            let mut gx = vec![F::zero(); probs.len()];
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                for k in 0..v {
                    let q = if k == t { on } else { off };
                    gx[r * v + k] = g[0] * w * (probs[r * v + k] - q);
                }
            }
            accumulate(grads, *logits, gx);
        }
        Op::Huber { input, delta } => {
            let x = nodes[*input].value.data();
            let gx = g
                .iter()
                .zip(x)
                .map(|(&gk, &xk)| {
                    if xk.abs() <= *delta {
                        gk * xk
                    } else {
                        gk * *delta * xk.signum()
                    }
                })
                .collect();
            accumulate(grads, *input, gx);
        }
        Op::AvgPool1d { input, window } => {
            let in_shape = nodes[*input].value.shape();
            let (t, d) = (in_shape[0], in_shape[1]);
            let mut gx = vec![F::zero(); t * d];
            for r in 0..t {
                let p = r / window;
                let count = (t.min((p + 1) * window) - p * window) as f64;
                let s = F::one() / F::from_f64(count);
                for j in 0..d {
                    gx[r * d + j] = g[p * d + j] * s;
                }
            }
            accumulate(grads, *input, gx);
        }
        Op::Upsample1d { input, factor } => {
            let in_shape = nodes[*input].value.shape();
            let (l, d) = (in_shape[0], in_shape[1]);
            let t = out.shape()[0];
            let mut gx = vec![F::zero(); l * d];
            for r in 0..t {
                let src = (r / factor).min(l - 1);
                for j in 0..d {
                    gx[src * d + j] += g[r * d + j];
                }
            }
            accumulate(grads, *input, gx);
        }
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor<F> {
        self.tape.value_ref(self.id).clone()
    }

    /// Borrowed access to the value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        self.tape.value_ref(self.id).data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn same_tape(&self, other: &Var<'t, F>, op: &'static str) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(invalid(op, "operands live on different tapes"));
        }
        Ok(())
    }

    fn binary(self, rhs: Var<'t, F>, kind: BinaryKind, op: &'static str) -> Result<Var<'t, F>> {
        self.same_tape(&rhs, op)?;
        let (value, bc) = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(rhs.id);
            let bc = Broadcast::resolve(a.shape(), b.shape(), op)?;
            let (ad, bd) = (a.data(), b.data());
            let f = |x: F, y: F| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            let data: Vec<F> = match &bc {
                Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
                Broadcast::Suffix(n) => {
                    let mut out = Vec::with_capacity(ad.len());
                    for row in ad.chunks_exact(*n) {
                        out.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
                    }
                    out
                }
                Broadcast::General(map) => ad.iter().zip(map).map(|(&x, &j)| f(x, bd[j])).collect(),
            };
            (Tensor::new(a.shape(), data)?, bc)
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Binary {
                kind,
                lhs: self.id,
                rhs: rhs.id,
                bc,
            },
            rg,
        ))
    }

    /// Elementwise sum; `rhs` broadcasts against `self`.
    pub fn add(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(rhs, BinaryKind::Add, "add")
    }

    pub fn sub(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(rhs, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(rhs, BinaryKind::Mul, "mul")
    }

    pub fn div(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(rhs, BinaryKind::Div, "div")
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&rhs, "matmul")?;
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(rhs.id);
            let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
            let mut out = vec![F::zero(); m * n];
            gemm(a.data(), false, b.data(), false, &mut out, m, k, n, false);
            Tensor::new(&[m, n], out)?
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            value,
            Op::MatMul {
                lhs: self.id,
                rhs: rhs.id,
            },
            rg,
        ))
    }

    pub fn scale(self, factor: F) -> Var<'t, F> {
        let value = self.tape.value_ref(self.id).map(|v| v * factor);
        self.tape.push(
            value,
            Op::Scale {
                input: self.id,
                factor,
            },
            self.requires_grad(),
        )
    }

    fn unary(self, kind: UnaryKind) -> Var<'t, F> {
        let value = self.tape.value_ref(self.id).map(|x| match kind {
            UnaryKind::Relu => x.max(F::zero()),
            UnaryKind::Sigmoid => F::one() / (F::one() + (-x).exp()),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Abs => x.abs(),
        });
        self.tape.push(
            value,
            Op::Unary {
                kind,
                input: self.id,
            },
            self.requires_grad(),
        )
    }

    pub fn relu(self) -> Var<'t, F> {
        self.unary(UnaryKind::Relu)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, F> {
        let (value, t) = {
            let v = self.tape.value_ref(self.id);
            let c = F::from_f64(GELU_C);
            let a = F::from_f64(GELU_A);
            let half = F::from_f64(0.5);
            let two = F::from_f64(2.0);
            // tanh(u) = 1 - 2 / (e^(2u) + 1)
            let mut t: Vec<F> = v.data().iter().map(|&x| two * c * (x + a * x * x * x)).collect();
            F::exp_in_place(&mut t);
            t.iter_mut().for_each(|e| *e = F::one() - two / (*e + F::one()));
            let y: Vec<F> = v.data().iter().zip(&t).map(|(&x, &tk)| half * x * (F::one() + tk)).collect();
            (Tensor::new(v.shape(), y).expect("same shape"), t)
        };
        self.tape
            .push(value, Op::Gelu { input: self.id, t }, self.requires_grad())
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t, F> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn abs(self) -> Var<'t, F> {
        self.unary(UnaryKind::Abs)
    }

    /// Rank-2 transpose.
    pub fn transpose(self) -> Result<Var<'t, F>> {
        let value = self.tape.value_ref(self.id).transpose()?;
        Ok(self
            .tape
            .push(value, Op::Transpose { input: self.id }, self.requires_grad()))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let value = self.tape.value_ref(self.id).clone().reshaped(shape)?;
        Ok(self
            .tape
            .push(value, Op::Reshape { input: self.id }, self.requires_grad()))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = *parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let value = {
            let values: Vec<Ref<'_, Tensor<F>>> = parts
                .iter()
                .map(|p| {
                    first.same_tape(p, "concat")?;
                    Ok(tape.value_ref(p.id))
                })
                .collect::<Result<_>>()?;
            let base = values[0].shape().to_vec();
            check_axis("concat", &base, axis)?;
            let mut total = 0;
            for v in &values {
                let s = v.shape();
                if s.len() != base.len()
                    || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b)
                {
                    return Err(mismatch("concat", &base, s));
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&base, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in &values {
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            Tensor::new(&shape, data)?
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(
            value,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let value = {
            let v = self.tape.value_ref(self.id);
            check_axis("slice", v.shape(), axis)?;
            let (outer, n, inner) = axis_split(v.shape(), axis);
            if start + len > n {
                return Err(invalid(
                    "slice",
                    format!("range {start}..{} exceeds {n} along axis {axis}", start + len),
                ));
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * n + start) * inner;
                data.extend_from_slice(&v.data()[s..s + len * inner]);
            }
            Tensor::new(&shape, data)?
        };
        Ok(self.tape.push(
            value,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    fn reduce(self, axis: Option<usize>, mean: bool) -> Result<Var<'t, F>> {
        let value = {
            let v = self.tape.value_ref(self.id);
            match axis {
                None => {
                    let s: F = v.data().iter().copied().sum();
                    let s = if mean { s / F::from_f64(v.numel() as f64) } else { s };
                    Tensor::scalar(s)
                }
                Some(ax) => {
                    check_axis("sum", v.shape(), ax)?;
                    let (outer, n, inner) = axis_split(v.shape(), ax);
                    let mut data = vec![F::zero(); outer * inner];
                    for o in 0..outer {
                        for k in 0..n {
                            for j in 0..inner {
                                data[o * inner + j] += v.data()[(o * n + k) * inner + j];
                            }
                        }
                    }
                    if mean {
                        let s = F::one() / F::from_f64(n as f64);
                        data.iter_mut().for_each(|x| *x *= s);
                    }
                    let mut shape = v.shape().to_vec();
                    shape.remove(ax);
                    Tensor::new(&shape, data)?
                }
            }
        };
        Ok(self.tape.push(
            value,
            Op::Sum {
                input: self.id,
                axis,
                mean,
            },
            self.requires_grad(),
        ))
    }

    pub fn sum_all(self) -> Result<Var<'t, F>> {
        self.reduce(None, false)
    }

    pub fn mean_all(self) -> Result<Var<'t, F>> {
        self.reduce(None, true)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum(self, axis: usize) -> Result<Var<'t, F>> {
        self.reduce(Some(axis), false)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(self, axis: usize) -> Result<Var<'t, F>> {
        self.reduce(Some(axis), true)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, F>> {
        let value = {
            let v = self.tape.value_ref(self.id);
            check_axis("softmax", v.shape(), axis)?;
            let (outer, n, inner) = axis_split(v.shape(), axis);
            let x = v.data();
            let mut y = vec![F::zero(); x.len()];
            if inner == 1 {
                for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
                    softmax_row(xr, yr);
                }
            } else {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let max = (0..n).map(|k| x[idx(k)]).fold(F::neg_infinity(), F::max);
                        let mut total = F::zero();
                        for k in 0..n {
                            let e = (x[idx(k)] - max).exp();
                            y[idx(k)] = e;
                            total += e;
                        }
                        for k in 0..n {
                            y[idx(k)] /= total;
                        }
                    }
                }
            }
            Tensor::new(v.shape(), y)?
        };
        Ok(self.tape.push(
            value,
            Op::Softmax {
                input: self.id,
                axis,
            },
            self.requires_grad(),
        ))
    }

    /// Multi-head scaled dot-product attention in one node.
    ///
    /// `q` is `n x heads*dh`, `k` is `m x heads*dh` and `v` is
    /// `m x heads*dv`; head `h` uses column block `h` of each. With `causal`,
    /// query row `i` attends to key rows `0..=i + m - n`. Returns
    /// `n x heads*dv`.
    pub fn attention(self, k: Var<'t, F>, v: Var<'t, F>, heads: usize, scale: F, causal: bool) -> Result<Var<'t, F>> {
        self.same_tape(&k, "attention")?;
        self.same_tape(&v, "attention")?;
        let (value, probs) = {
            let qv = self.tape.value_ref(self.id);
            let kv = self.tape.value_ref(k.id);
            let vv = self.tape.value_ref(v.id);
            let (qs, ks, vs) = (qv.shape(), kv.shape(), vv.shape());
            if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
                return Err(invalid("attention", format!("expected matrices, got {qs:?}, {ks:?}, {vs:?}")));
            }
            let (n, m, dq, dv) = (qs[0], ks[0], qs[1], vs[1]);
            if ks[1] != dq || vs[0] != m {
                return Err(mismatch("attention", ks, vs));
            }
            if heads == 0 || dq % heads != 0 || dv % heads != 0 {
                return Err(invalid("attention", format!("{heads} heads do not divide widths {dq} and {dv}")));
            }
            if causal && m < n {
                return Err(mismatch("attention", qs, ks));
            }
            let (dh, dvh) = (dq / heads, dv / heads);
            let mut probs = vec![F::zero(); heads * n * m];
            let mut out = vec![F::zero(); n * dv];
            for h in 0..heads {
                let p = &mut probs[h * n * m..(h + 1) * n * m];
                for (r0, r1, kend) in attention_blocks(n, m, causal) {
                    let rows = r1 - r0;
                    gemm_view(
                        rows, dh, kend,
                        (qv.data(), r0 * dq + h * dh, dq as isize, 1),
                        (kv.data(), h * dh, 1, dq as isize),
                        F::zero(),
                        (p, r0 * m, m as isize, 1),
                    );
                    for i in r0..r1 {
                        let len = if causal { i + m - n + 1 } else { m };
                        let row = &mut p[i * m..(i + 1) * m];
                        row[..len].iter_mut().for_each(|x| *x *= scale);
                        let (seen, hidden) = row.split_at_mut(len);
                        softmax_in_place(seen);
                        hidden.iter_mut().for_each(|x| *x = F::zero());
                    }
                    gemm_view(
                        rows, kend, dvh,
                        (p, r0 * m, m as isize, 1),
                        (vv.data(), h * dvh, dv as isize, 1),
                        F::zero(),
                        (&mut out, r0 * dv + h * dvh, dv as isize, 1),
                    );
                }
            }
            (Tensor::new(&[n, dv], out)?, probs)
        };
        let rg = self.requires_grad() || k.requires_grad() || v.requires_grad();
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.tape.push(
            value,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                scale,
                causal,
                probs,
            },
            rg,
        ))
    }

    /// Row softmax of an `r x c` matrix where row `i` only sees columns
    /// `0..=i + c - r`; hidden entries come out as exact zeros.
    pub fn causal_softmax(self) -> Result<Var<'t, F>> {
        let value = {
            let v = self.tape.value_ref(self.id);
            let &[r, c] = v.shape() else {
                return Err(DiffError::InvalidArgument {
                    op: "causal_softmax",
                    msg: format!("expected a matrix, got shape {:?}", v.shape()),
                });
            };
            if c < r {
                return Err(mismatch("causal_softmax", &[r, c], &[r, r]));
            }
            let mut y = vec![F::zero(); r * c];
            for (i, (xr, yr)) in v.data().chunks_exact(c).zip(y.chunks_exact_mut(c)).enumerate() {
                let k = i + c - r + 1;
                softmax_row(&xr[..k], &mut yr[..k]);
            }
            Tensor::new(&[r, c], y)?
        };
        Ok(self.tape.push(
            value,
            Op::Softmax {
                input: self.id,
                axis: 1,
            },
            self.requires_grad(),
        ))
    }

    /// Normalizes over the last axis, then applies `gain * x + bias`.
    pub fn layer_norm(self, gain: Var<'t, F>, bias: Var<'t, F>, eps: f64) -> Result<Var<'t, F>> {
        self.same_tape(&gain, "layer_norm")?;
        self.same_tape(&bias, "layer_norm")?;
        let (value, xhat, inv_std) = {
            let v = self.tape.value_ref(self.id);
            let gv = self.tape.value_ref(gain.id);
            let bv = self.tape.value_ref(bias.id);
            let d = *v
                .shape()
                .last()
                .ok_or_else(|| invalid("layer_norm", "scalar input"))?;
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(mismatch("layer_norm", v.shape(), gv.shape()));
            }
            let rows = v.numel() / d.max(1);
            let df = F::from_f64(d as f64);
            let eps = F::from_f64(eps);
            let mut xhat = vec![F::zero(); v.numel()];
            let mut inv_std = vec![F::zero(); rows];
            let mut out = vec![F::zero(); v.numel()];
            for r in 0..rows {
                let row = &v.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<F>() / df;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / df;
                let is = F::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(v.shape(), out)?, xhat, inv_std)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                input: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout with a counter-based mask. `p == 0` is the identity.
    pub fn dropout(self, p: f64, key: DropoutKey) -> Result<Var<'t, F>> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self);
        }
        let scale = F::from_f64(1.0 / (1.0 - p));
        let (value, mask) = {
            let v = self.tape.value_ref(self.id);
            let mask: Vec<F> = keep_mask(key, v.numel(), p)
                .into_iter()
                .map(|keep| if keep { scale } else { F::zero() })
                .collect();
            let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (Tensor::new(v.shape(), data)?, mask)
        };
        Ok(self.tape.push(
            value,
            Op::Dropout {
                input: self.id,
                mask,
            },
            self.requires_grad(),
        ))
    }

    /// Rows of the `[vocab, d]` table selected by `ids`.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t, F>> {
        let value = {
            let t = self.tape.value_ref(self.id);
            if t.rank() != 2 {
                return Err(invalid("embedding", format!("table shape {:?}", t.shape())));
            }
            let (v, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(invalid("embedding", format!("id {id} >= vocab {v}")));
                }
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            Tensor::new(&[ids.len(), d], data)?
        };
        Ok(self.tape.push(
            value,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// `sum_i weights[i] * CE(softmax(logits[i]), q_i)` where `q_i` is the
    /// label-smoothed one-hot target `(1 - eps) * onehot + eps / V`.
    pub fn cross_entropy_logits(
        self,
        targets: &[usize],
        weights: &[F],
        smoothing: f64,
    ) -> Result<Var<'t, F>> {
        let eps = F::from_f64(smoothing);
        let (value, probs) = {
            let l = self.tape.value_ref(self.id);
            if l.rank() != 2 || l.shape()[0] != targets.len() || weights.len() != targets.len() {
                return Err(mismatch("cross_entropy_logits", l.shape(), &[targets.len()]));
            }
            let v = l.shape()[1];
            let off = eps / F::from_f64(v as f64);
            let on = F::one() - eps + off;
            let mut probs = vec![F::zero(); l.numel()];
            let mut loss = F::zero();
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if t >= v {
                    return Err(invalid("cross_entropy_logits", format!("target {t} >= {v}")));
                }
                let row = &l.data()[r * v..(r + 1) * v];
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
                let mut ce = F::zero();
                for k in 0..v {
                    let logp = row[k] - lse;
                    probs[r * v + k] = logp.exp();
                    let q = if k == t { on } else { off };
                    if q > F::zero() {
                        ce -= q * logp;
                    }
                }
                loss += w * ce;
            }
            (Tensor::scalar(loss), probs)
        };
        Ok(self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing: eps,
            },
            self.requires_grad(),
        ))
    }

    /// Elementwise Huber: `0.5 x^2` for `|x| <= delta`, else `delta (|x| - delta / 2)`.
    pub fn huber(self, delta: f64) -> Var<'t, F> {
        let delta = F::from_f64(delta);
        let half = F::from_f64(0.5);
        let value = self.tape.value_ref(self.id).map(|x| {
            if x.abs() <= delta {
                half * x * x
            } else {
                delta * (x.abs() - half * delta)
            }
        });
        self.tape.push(
            value,
            Op::Huber {
                input: self.id,
                delta,
            },
            self.requires_grad(),
        )
    }

    /// Averages consecutive rows of a `[T, d]` tensor in windows of `window`,
    /// giving `ceil(T / window)` rows; a trailing partial window averages
    /// only the rows it holds.
    pub fn avg_pool1d(self, window: usize) -> Result<Var<'t, F>> {
        if window == 0 {
            return Err(invalid("avg_pool1d", "window must be positive"));
        }
        let value = {
            let v = self.tape.value_ref(self.id);
            if v.rank() != 2 {
                return Err(invalid("avg_pool1d", format!("rank 2 required, got {:?}", v.shape())));
            }
            let (t, d) = (v.shape()[0], v.shape()[1]);
            let l = t.div_ceil(window);
            let mut data = vec![F::zero(); l * d];
            for p in 0..l {
                let lo = p * window;
                let hi = t.min(lo + window);
                let s = F::one() / F::from_f64((hi - lo) as f64);
                for r in lo..hi {
                    for j in 0..d {
                        data[p * d + j] += v.data()[r * d + j] * s;
                    }
                }
            }
            Tensor::new(&[l, d], data)?
        };
        Ok(self.tape.push(
            value,
            Op::AvgPool1d {
                input: self.id,
                window,
            },
            self.requires_grad(),
        ))
    }

    /// Repeats each row `factor` times, truncated or edge-padded to `out_len`.
    pub fn nearest_upsample1d(self, factor: usize, out_len: usize) -> Result<Var<'t, F>> {
        if factor == 0 {
            return Err(invalid("nearest_upsample1d", "factor must be positive"));
        }
        let value = {
            let v = self.tape.value_ref(self.id);
            if v.rank() != 2 || v.shape()[0] == 0 {
                return Err(invalid("nearest_upsample1d", format!("shape {:?}", v.shape())));
            }
            let (l, d) = (v.shape()[0], v.shape()[1]);
            let mut data = Vec::with_capacity(out_len * d);
            for r in 0..out_len {
                let src = (r / factor).min(l - 1);
                data.extend_from_slice(&v.data()[src * d..(src + 1) * d]);
            }
            Tensor::new(&[out_len, d], data)?
        };
        Ok(self.tape.push(
            value,
            Op::Upsample1d {
                input: self.id,
                factor,
            },
            self.requires_grad(),
        ))
    }
}

fn softmax_in_place<F: Scalar>(x: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    x.iter_mut().for_each(|v| *v -= max);
    F::exp_in_place(x);
    let total: F = x.iter().copied().sum();
    let inv = F::one() / total;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

fn softmax_row<F: Scalar>(x: &[F], y: &mut [F]) {
    y.copy_from_slice(x);
    softmax_in_place(y);
}

const ATTENTION_BLOCK: usize = 32;

/// Query row blocks `(start, end, visible_keys)`; causal blocks stop at the
/// last key any of their rows can see.
fn attention_blocks(n: usize, m: usize, causal: bool) -> Vec<(usize, usize, usize)> {
    if !causal {
        return vec![(0, n, m)];
    }
    (0..n)
        .step_by(ATTENTION_BLOCK)
        .map(|r0| {
            let r1 = (r0 + ATTENTION_BLOCK).min(n);
            (r0, r1, r1 + m - n)
        })
        .collect()
}

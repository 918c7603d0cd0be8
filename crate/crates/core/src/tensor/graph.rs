use super::{numel, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use rand::Rng as _;
use std::cell::{Cell, RefCell};
use std::sync::Arc;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        bias: usize,
    },
    Affine {
        a: usize,
        alpha: T,
    },
    Sigmoid {
        a: usize,
    },
    Tanh {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    GatherRows {
        a: usize,
        ids: Vec<usize>,
    },
    NarrowRows {
        a: usize,
        start: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    MeanPool {
        a: usize,
        mask: Vec<T>,
    },
    LayerNorm {
        a: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    Cosine {
        a: usize,
        b: usize,
        norms: Vec<(T, T)>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Pick {
        a: usize,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records a forward computation so that it can be differentiated once.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    backward_done: Cell<bool>,
    training: bool,
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
            training: true,
        }
    }

    /// A graph that never needs gradients; dropout is disabled and
    /// parameters are bound as constants.
    pub fn inference() -> Self {
        Self {
            training: false,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len(), "{op:?}");
        self.push_shared(shape, Arc::new(value), op, requires_grad, None)
    }

    fn push_shared(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<T>>,
        op: Op<T>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf holding `tensor`; it is differentiated iff the tensor requires grad.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        let rg = tensor.requires_grad() && self.training;
        self.push_shared(tensor.shape().to_vec(), tensor.shared(), Op::Leaf, rg, None)
    }

    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Var<'_, T> {
        assert_eq!(numel(shape), data.len(), "constant of shape {shape:?}");
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let t = store.get(id);
        let rg = t.requires_grad() && self.training;
        self.push_shared(t.shape().to_vec(), t.shared(), Op::Leaf, rg, Some(id))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let nodes = self.nodes.borrow();
        let first = &nodes[parts[0].id].shape;
        assert!(axis < first.len(), "concat axis {axis} for shape {first:?}");
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut axis_total = 0;
        for p in parts {
            let s = &nodes[p.id].shape;
            assert!(
                s.len() == first.len()
                    && s[..axis] == first[..axis]
                    && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch {s:?} vs {first:?} on axis {axis}"
            );
            axis_total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let n = &nodes[p.id];
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        self.push(
            shape,
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar loss. Gradients accumulate per node and can
    /// be read with [`Graph::grad`] and [`Graph::param_grads`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(v.id)?.as_ref()?;
        let shape = self.nodes.borrow()[v.id].shape.clone();
        Some(Tensor::from_parts(shape, Arc::new(g.clone())))
    }

    /// Gradients of every bound parameter, summed over repeated bindings.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        let mut out: Vec<(ParamId, Vec<T>)> = Vec::new();
        for (node, g) in nodes.iter().zip(grads.iter()) {
            let (Some(pid), Some(g)) = (node.param, g) else {
                continue;
            };
            match out.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => out.push((pid, g.clone())),
            }
        }
        out
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    match &mut grads[id] {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x += y),
        slot @ None => *slot = Some(g),
    }
}

fn acc_with<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    id: usize,
    len: usize,
    f: impl FnOnce(&mut [T]),
) {
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn row_sum<T: Scalar>(xs: &[T]) -> T {
    T::lit(xs.iter().map(|x| x.as_f64()).sum::<f64>())
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let rg = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if rg(*a) {
                acc_with(grads, *a, m * k, |da| {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        false,
                        &nodes[*b].value,
                        true,
                        T::one(),
                        da,
                    )
                });
            }
            if rg(*b) {
                acc_with(grads, *b, k * n, |db| {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &nodes[*a].value,
                        true,
                        g,
                        false,
                        T::one(),
                        db,
                    )
                });
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let sa = &nodes[*a].shape;
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let n = node.shape[2];
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if rg(*a) {
                acc_with(grads, *a, batch * m * k, |da| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            gi,
                            false,
                            bi,
                            !trans_b,
                            T::one(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
            }
            if rg(*b) {
                acc_with(grads, *b, batch * k * n, |db| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, T::one(), gi, true, ai, false, T::one(), out);
                        } else {
                            T::gemm(k, m, n, T::one(), ai, true, gi, false, T::one(), out);
                        }
                    }
                });
            }
        }
        Op::Add { a, b } => {
            if rg(*a) {
                acc(grads, *a, g.to_vec());
            }
            if rg(*b) {
                acc(grads, *b, g.to_vec());
            }
        }
        Op::Sub { a, b } => {
            if rg(*a) {
                acc(grads, *a, g.to_vec());
            }
            if rg(*b) {
                acc(grads, *b, g.iter().map(|&x| -x).collect());
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if rg(*a) {
                acc(
                    grads,
                    *a,
                    g.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect(),
                );
            }
            if rg(*b) {
                acc(
                    grads,
                    *b,
                    g.iter().zip(av.iter()).map(|(&x, &y)| x * y).collect(),
                );
            }
        }
        Op::AddRow { a, bias } => {
            if rg(*a) {
                acc(grads, *a, g.to_vec());
            }
            if rg(*bias) {
                let n = nodes[*bias].value.len();
                let mut sums = vec![0f64; n];
                for row in g.chunks(n) {
                    sums.iter_mut().zip(row).for_each(|(s, x)| *s += x.as_f64());
                }
                acc(grads, *bias, sums.into_iter().map(T::lit).collect());
            }
        }
        Op::Affine { a, alpha } => {
            if rg(*a) {
                acc(grads, *a, g.iter().map(|&x| x * *alpha).collect());
            }
        }
        Op::Sigmoid { a } => {
            if rg(*a) {
                let y = &node.value;
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(y.iter())
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                );
            }
        }
        Op::Tanh { a } => {
            if rg(*a) {
                let y = &node.value;
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(y.iter())
                        .map(|(&g, &y)| g * (T::one() - y * y))
                        .collect(),
                );
            }
        }
        Op::Relu { a } => {
            if rg(*a) {
                let x = &nodes[*a].value;
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
        }
        Op::Gelu { a } => {
            if rg(*a) {
                let x = &nodes[*a].value;
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| g * gelu_grad(x))
                        .collect(),
                );
            }
        }
        Op::Softmax { a } => {
            if rg(*a) {
                let n = *node.shape.last().expect("softmax rank >= 1");
                let y = &node.value;
                let mut out = vec![T::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot = T::lit(
                        yr.iter()
                            .zip(gr)
                            .map(|(&y, &g)| (y * g).as_f64())
                            .sum::<f64>(),
                    );
                    for ((o, &y), &g) in o.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                acc(grads, *a, out);
            }
        }
        Op::LogSoftmax { a } => {
            if rg(*a) {
                let n = *node.shape.last().expect("log_softmax rank >= 1");
                let y = &node.value;
                let mut out = vec![T::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let total = row_sum(gr);
                    for ((o, &y), &g) in o.iter_mut().zip(yr).zip(gr) {
                        *o = g - y.exp() * total;
                    }
                }
                acc(grads, *a, out);
            }
        }
        Op::Concat { inputs, axis } => {
            let inner: usize = node.shape[axis + 1..].iter().product();
            let outer: usize = node.shape[..*axis].iter().product();
            let total = node.shape[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let chunk = nodes[inp].shape[*axis] * inner;
                if rg(inp) {
                    let mut part = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        part.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    acc(grads, inp, part);
                }
                offset += chunk;
            }
        }
        Op::GatherRows { a, ids } => {
            if rg(*a) {
                let cols = node.shape[1];
                let len = nodes[*a].value.len();
                acc_with(grads, *a, len, |da| {
                    for (r, &src) in ids.iter().enumerate() {
                        let d = &mut da[src * cols..(src + 1) * cols];
                        d.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(x, &y)| *x += y);
                    }
                });
            }
        }
        Op::NarrowRows { a, start } => {
            if rg(*a) {
                let row: usize = node.shape[1..].iter().product();
                let len = nodes[*a].value.len();
                acc_with(grads, *a, len, |da| {
                    da[start * row..start * row + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y);
                });
            }
        }
        Op::Reshape { a } => {
            if rg(*a) {
                acc(grads, *a, g.to_vec());
            }
        }
        Op::Permute { a, axes } => {
            if rg(*a) {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                acc(grads, *a, permute_data(g, &node.shape, &inverse));
            }
        }
        Op::MeanPool { a, mask } => {
            if rg(*a) {
                let s = &nodes[*a].shape;
                let (b, l, d) = (s[0], s[1], s[2]);
                let mut out = vec![T::zero(); b * l * d];
                for i in 0..b {
                    let m = &mask[i * l..(i + 1) * l];
                    let count = row_sum(m);
                    if count <= T::zero() {
                        continue;
                    }
                    let gi = &g[i * d..(i + 1) * d];
                    for (t, &mt) in m.iter().enumerate() {
                        if mt == T::zero() {
                            continue;
                        }
                        let w = mt / count;
                        let o = &mut out[(i * l + t) * d..(i * l + t + 1) * d];
                        o.iter_mut().zip(gi).for_each(|(o, &g)| *o = g * w);
                    }
                }
                acc(grads, *a, out);
            }
        }
        Op::LayerNorm {
            a,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = *node.shape.last().expect("layer_norm rank >= 1");
            let gam = &nodes[*gamma].value;
            if rg(*gamma) {
                let mut s = vec![0f64; d];
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    s.iter_mut()
                        .zip(gr.iter().zip(xr))
                        .for_each(|(s, (&g, &x))| *s += (g * x).as_f64());
                }
                acc(grads, *gamma, s.into_iter().map(T::lit).collect());
            }
            if rg(*beta) {
                let mut s = vec![0f64; d];
                for gr in g.chunks(d) {
                    s.iter_mut().zip(gr).for_each(|(s, &g)| *s += g.as_f64());
                }
                acc(grads, *beta, s.into_iter().map(T::lit).collect());
            }
            if rg(*a) {
                let mut out = vec![T::zero(); g.len()];
                let dn = d as f64;
                for (r, ((o, gr), xr)) in out
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    let mut sum_dx = 0f64;
                    let mut sum_dx_x = 0f64;
                    for j in 0..d {
                        let dxh = (gr[j] * gam[j]).as_f64();
                        sum_dx += dxh;
                        sum_dx_x += dxh * xr[j].as_f64();
                    }
                    let inv = inv_std[r].as_f64();
                    for j in 0..d {
                        let dxh = (gr[j] * gam[j]).as_f64();
                        o[j] = T::lit(inv / dn * (dn * dxh - sum_dx - xr[j].as_f64() * sum_dx_x));
                    }
                }
                acc(grads, *a, out);
            }
        }
        Op::Dropout { a, mask } => {
            if rg(*a) {
                acc(
                    grads,
                    *a,
                    g.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                );
            }
        }
        Op::Cosine { a, b, norms } => {
            let d = nodes[*a].shape[1];
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let c = &node.value;
            let mut da = vec![T::zero(); av.len()];
            let mut db = vec![T::zero(); bv.len()];
            for (i, &(na, nb)) in norms.iter().enumerate() {
                if na == T::zero() || nb == T::zero() {
                    continue;
                }
                let ar = &av[i * d..(i + 1) * d];
                let br = &bv[i * d..(i + 1) * d];
                let (gi, ci) = (g[i], c[i]);
                let nab = na * nb;
                for j in 0..d {
                    da[i * d + j] = gi * (br[j] / nab - ci * ar[j] / (na * na));
                    db[i * d + j] = gi * (ar[j] / nab - ci * br[j] / (nb * nb));
                }
            }
            if rg(*a) {
                acc(grads, *a, da);
            }
            if rg(*b) {
                acc(grads, *b, db);
            }
        }
        Op::Sum { a } => {
            if rg(*a) {
                acc(grads, *a, vec![g[0]; nodes[*a].value.len()]);
            }
        }
        Op::Mean { a } => {
            if rg(*a) {
                let n = nodes[*a].value.len();
                acc(grads, *a, vec![g[0] / T::lit(n as f64); n]);
            }
        }
        Op::Pick { a, targets } => {
            if rg(*a) {
                let v = nodes[*a].shape[1];
                let len = nodes[*a].value.len();
                acc_with(grads, *a, len, |da| {
                    for (r, &t) in targets.iter().enumerate() {
                        da[r * v + t] += g[r];
                    }
                });
            }
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor<T> {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::from_parts(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.graph.nodes.borrow()[self.id].value.to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.shape.clone(),
                n.value.iter().map(|&x| f(x)).collect(),
                n.requires_grad,
            )
        };
        self.graph.push(shape, value, op, rg)
    }

    fn zip(&self, other: &Var<'g, T>, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Var<'g, T> {
        self.same_graph(other);
        let (shape, value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            assert_eq!(a.shape, b.shape, "{name}: shape mismatch");
            let v = a
                .value
                .iter()
                .zip(b.value.iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (a.shape.clone(), v, a.requires_grad || b.requires_grad)
        };
        self.graph.push(shape, value, op, rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var<'g, T>) -> Var<'g, T> {
        self.same_graph(other);
        let (m, k, n, out, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            assert!(
                a.shape.len() == 2 && b.shape.len() == 2 && a.shape[1] == b.shape[0],
                "matmul: shape mismatch {:?} x {:?}",
                a.shape,
                b.shape
            );
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![T::zero(); m * n];
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.value,
                false,
                &b.value,
                false,
                T::zero(),
                &mut out,
            );
            (m, k, n, out, a.requires_grad || b.requires_grad)
        };
        let _ = k;
        self.graph.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        )
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&self, other: &Var<'g, T>, trans_b: bool) -> Var<'g, T> {
        self.same_graph(other);
        let (shape, out, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            assert!(
                a.shape.len() == 3 && b.shape.len() == 3 && a.shape[0] == b.shape[0],
                "bmm: {:?} x {:?}",
                a.shape,
                b.shape
            );
            let (batch, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let (bk, n) = if trans_b {
                (b.shape[2], b.shape[1])
            } else {
                (b.shape[1], b.shape[2])
            };
            assert_eq!(
                k, bk,
                "bmm: inner dimension mismatch {:?} x {:?}",
                a.shape, b.shape
            );
            let mut out = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &a.value[i * m * k..(i + 1) * m * k],
                    false,
                    &b.value[i * k * n..(i + 1) * k * n],
                    trans_b,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            (vec![batch, m, n], out, a.requires_grad || b.requires_grad)
        };
        self.graph.push(
            shape,
            out,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            rg,
        )
    }

    pub fn add(&self, other: &Var<'g, T>) -> Var<'g, T> {
        self.zip(
            other,
            "add",
            |x, y| x + y,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Var<'g, T> {
        self.zip(
            other,
            "sub",
            |x, y| x - y,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Var<'g, T> {
        self.zip(
            other,
            "mul",
            |x, y| x * y,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Adds a bias row (any shape with `n` elements) to every row of width `n`.
    pub fn add_row(&self, bias: &Var<'g, T>) -> Var<'g, T> {
        self.same_graph(bias);
        let (shape, out, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[bias.id]);
            let n = b.value.len();
            assert!(
                a.shape.last() == Some(&n),
                "add_row: bias of {} elements for shape {:?}",
                n,
                a.shape
            );
            let mut out = a.value.to_vec();
            for row in out.chunks_mut(n) {
                row.iter_mut()
                    .zip(b.value.iter())
                    .for_each(|(x, &y)| *x += y);
            }
            (a.shape.clone(), out, a.requires_grad || b.requires_grad)
        };
        self.graph.push(
            shape,
            out,
            Op::AddRow {
                a: self.id,
                bias: bias.id,
            },
            rg,
        )
    }

    /// `alpha * x + beta`.
    pub fn affine(&self, alpha: T, beta: T) -> Var<'g, T> {
        self.unary(Op::Affine { a: self.id, alpha }, |x| alpha * x + beta)
    }

    pub fn scale(&self, alpha: T) -> Var<'g, T> {
        self.affine(alpha, T::zero())
    }

    pub fn one_minus(&self) -> Var<'g, T> {
        self.affine(-T::one(), T::one())
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(Op::Sigmoid { a: self.id }, |x| {
            T::one() / (T::one() + (-x).exp())
        })
    }

    pub fn tanh(&self) -> Var<'g, T> {
        self.unary(Op::Tanh { a: self.id }, |x| x.tanh())
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(Op::Relu { a: self.id }, |x| {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Var<'g, T> {
        self.unary(Op::Gelu { a: self.id }, gelu)
    }

    fn last_axis_rows(&self, name: &str, f: impl Fn(&[T], &mut [T])) -> (Vec<usize>, Vec<T>, bool) {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id];
        let n = *a
            .shape
            .last()
            .unwrap_or_else(|| panic!("{name} on a scalar"));
        let mut out = vec![T::zero(); a.value.len()];
        for (o, x) in out.chunks_mut(n).zip(a.value.chunks(n)) {
            f(x, o);
        }
        (a.shape.clone(), out, a.requires_grad)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g, T> {
        let (shape, out, rg) = self.last_axis_rows("softmax", |x, o| {
            let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = 0f64;
            for (o, &v) in o.iter_mut().zip(x) {
                *o = (v - max).exp();
                total += o.as_f64();
            }
            let inv = T::lit(1.0 / total);
            o.iter_mut().for_each(|o| *o *= inv);
        });
        self.graph.push(shape, out, Op::Softmax { a: self.id }, rg)
    }

    pub fn log_softmax(&self) -> Var<'g, T> {
        let (shape, out, rg) = self.last_axis_rows("log_softmax", |x, o| {
            let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let total: f64 = x.iter().map(|&v| (v - max).exp().as_f64()).sum();
            let lse = max + T::lit(total.ln());
            o.iter_mut().zip(x).for_each(|(o, &v)| *o = v - lse);
        });
        self.graph
            .push(shape, out, Op::LogSoftmax { a: self.id }, rg)
    }

    /// Row gather on a 2-D tensor; as `embedding_lookup` when `self` is a table.
    pub fn gather_rows(&self, ids: &[usize]) -> Var<'g, T> {
        let (shape, out, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            assert_eq!(a.shape.len(), 2, "gather_rows on shape {:?}", a.shape);
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &r in ids {
                assert!(r < rows, "gather_rows: row {r} out of {rows}");
                out.extend_from_slice(&a.value[r * cols..(r + 1) * cols]);
            }
            (vec![ids.len(), cols], out, a.requires_grad)
        };
        self.graph.push(
            shape,
            out,
            Op::GatherRows {
                a: self.id,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn embedding(&self, ids: &[usize]) -> Var<'g, T> {
        self.gather_rows(ids)
    }

    /// Rows `start..start + len` along the first axis.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Var<'g, T> {
        let (shape, out, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            assert!(
                !a.shape.is_empty() && start + len <= a.shape[0],
                "narrow_rows {start}+{len} on {:?}",
                a.shape
            );
            let row: usize = a.shape[1..].iter().product();
            let mut shape = a.shape.clone();
            shape[0] = len;
            (
                shape,
                a.value[start * row..(start + len) * row].to_vec(),
                a.requires_grad,
            )
        };
        self.graph
            .push(shape, out, Op::NarrowRows { a: self.id, start }, rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g, T> {
        let (value, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            assert_eq!(
                numel(shape),
                a.value.len(),
                "reshape {:?} -> {shape:?}",
                a.shape
            );
            (Arc::clone(&a.value), a.requires_grad)
        };
        self.graph
            .push_shared(shape.to_vec(), value, Op::Reshape { a: self.id }, rg, None)
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'g, T> {
        let (shape, out, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let mut seen = axes.to_vec();
            seen.sort_unstable();
            assert!(
                seen == (0..a.shape.len()).collect::<Vec<_>>(),
                "permute {axes:?} on {:?}",
                a.shape
            );
            let shape = axes.iter().map(|&x| a.shape[x]).collect();
            (
                shape,
                permute_data(&a.value, &a.shape, axes),
                a.requires_grad,
            )
        };
        self.graph.push(
            shape,
            out,
            Op::Permute {
                a: self.id,
                axes: axes.to_vec(),
            },
            rg,
        )
    }

    /// Masked mean over the middle axis of `[B, L, D]`; `mask` is `B * L`
    /// weights in {0, 1}. A row with no unmasked position pools to zero.
    pub fn mean_pool(&self, mask: &[T]) -> Var<'g, T> {
        let (shape, out, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            assert_eq!(a.shape.len(), 3, "mean_pool on {:?}", a.shape);
            let (b, l, d) = (a.shape[0], a.shape[1], a.shape[2]);
            assert_eq!(mask.len(), b * l, "mean_pool mask length");
            let mut out = vec![T::zero(); b * d];
            for i in 0..b {
                let m = &mask[i * l..(i + 1) * l];
                let count: f64 = m.iter().map(|x| x.as_f64()).sum();
                if count <= 0.0 {
                    continue;
                }
                let mut acc = vec![0f64; d];
                for (t, &mt) in m.iter().enumerate() {
                    if mt == T::zero() {
                        continue;
                    }
                    let row = &a.value[(i * l + t) * d..(i * l + t + 1) * d];
                    acc.iter_mut()
                        .zip(row)
                        .for_each(|(s, &x)| *s += (x * mt).as_f64());
                }
                out[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(acc)
                    .for_each(|(o, s)| *o = T::lit(s / count));
            }
            (vec![b, d], out, a.requires_grad)
        };
        self.graph.push(
            shape,
            out,
            Op::MeanPool {
                a: self.id,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'g, T>, beta: &Var<'g, T>, eps: f64) -> Var<'g, T> {
        let (shape, out, xhat, inv_std, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, gm, bt) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            let d = *a.shape.last().expect("layer_norm on a scalar");
            assert!(
                gm.value.len() == d && bt.value.len() == d,
                "layer_norm: affine params need {d} values"
            );
            let rows = a.value.len() / d;
            let mut out = vec![T::zero(); a.value.len()];
            let mut xhat = vec![T::zero(); a.value.len()];
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let x = &a.value[r * d..(r + 1) * d];
                let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
                let var = x.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(T::lit(inv));
                for j in 0..d {
                    let h = T::lit((x[j].as_f64() - mean) * inv);
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gm.value[j] + bt.value[j];
                }
            }
            (
                a.shape.clone(),
                out,
                xhat,
                inv_std,
                a.requires_grad || gm.requires_grad || bt.requires_grad,
            )
        };
        self.graph.push(
            shape,
            out,
            Op::LayerNorm {
                a: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Inverted dropout; the identity when `rate` is 0 or the graph is in
    /// inference mode.
    pub fn dropout(&self, rate: f64, seed: u64) -> Var<'g, T> {
        if rate <= 0.0 || !self.graph.training {
            return *self;
        }
        assert!(rate < 1.0, "dropout rate {rate}");
        let mut r = rng::rng(seed);
        let keep = T::lit(1.0 / (1.0 - rate));
        let len = self.graph.nodes.borrow()[self.id].value.len();
        let mask: Vec<T> = (0..len)
            .map(|_| {
                if r.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let (shape, out, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (
                a.shape.clone(),
                a.value.iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
                a.requires_grad,
            )
        };
        self.graph
            .push(shape, out, Op::Dropout { a: self.id, mask }, rg)
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, giving `[n]`.
    /// A zero row has similarity 0 and receives zero gradient.
    pub fn cosine_similarity(&self, other: &Var<'g, T>) -> Var<'g, T> {
        self.same_graph(other);
        let (out, norms, n, rg) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            assert!(
                a.shape.len() == 2 && a.shape == b.shape,
                "cosine: {:?} vs {:?}",
                a.shape,
                b.shape
            );
            let (n, d) = (a.shape[0], a.shape[1]);
            let mut out = Vec::with_capacity(n);
            let mut norms = Vec::with_capacity(n);
            for i in 0..n {
                let ar = &a.value[i * d..(i + 1) * d];
                let br = &b.value[i * d..(i + 1) * d];
                let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
                for j in 0..d {
                    let (x, y) = (ar[j].as_f64(), br[j].as_f64());
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                let (na, nb) = (na.sqrt(), nb.sqrt());
                let c = if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                };
                out.push(T::lit(c));
                norms.push((T::lit(na), T::lit(nb)));
            }
            (out, norms, n, a.requires_grad || b.requires_grad)
        };
        self.graph.push(
            vec![n],
            out,
            Op::Cosine {
                a: self.id,
                b: other.id,
                norms,
            },
            rg,
        )
    }

    pub fn sum(&self) -> Var<'g, T> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (row_sum(&a.value), a.requires_grad)
        };
        self.graph
            .push(Vec::new(), vec![v], Op::Sum { a: self.id }, rg)
    }

    pub fn mean(&self) -> Var<'g, T> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let n = a.value.len() as f64;
            (
                T::lit(a.value.iter().map(|x| x.as_f64()).sum::<f64>() / n),
                a.requires_grad,
            )
        };
        self.graph
            .push(Vec::new(), vec![v], Op::Mean { a: self.id }, rg)
    }

    /// `out[i] = x[i, targets[i]]` for `[n, V]` input.
    pub fn pick(&self, targets: &[usize]) -> Var<'g, T> {
        let (out, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            assert!(
                a.shape.len() == 2 && a.shape[0] == targets.len(),
                "pick: {} targets for {:?}",
                targets.len(),
                a.shape
            );
            let v = a.shape[1];
            let out = targets
                .iter()
                .enumerate()
                .map(|(r, &t)| {
                    assert!(t < v, "pick: target {t} out of {v}");
                    a.value[r * v + t]
                })
                .collect();
            (out, a.requires_grad)
        };
        self.graph.push(
            vec![targets.len()],
            out,
            Op::Pick {
                a: self.id,
                targets: targets.to_vec(),
            },
            rg,
        )
    }
}

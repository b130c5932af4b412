//! Tape of recorded operations and the reverse sweep over it.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{ArrayError, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    AddPerBatch {
        x: Var,
        y: Var,
        batch: usize,
        rows: usize,
        width: usize,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Abs(Var),
    Square(Var),
    Relu(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatmulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BmmNt {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        width: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group: usize,
        lq: usize,
        lk: usize,
        dim: usize,
        probs: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        in_shape: Vec<usize>,
        perm: Vec<usize>,
    },
    Im2col {
        x: Var,
        geom: PatchGeometry,
    },
    Demodulate {
        w: Var,
        phi: Var,
        batch: usize,
        cout: usize,
        cin: usize,
        taps: usize,
        inv_norm: Vec<T>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
        width: usize,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    AvgPool2 {
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
        c: usize,
    },
    Upsample2 {
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
        c: usize,
    },
}

/// Layout of a same-padded sliding window over an NHWC array.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PatchGeometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
}

impl PatchGeometry {
    pub fn cols(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Calls `f(out_index, in_index)` for each in-bounds tap; column order is
    /// channel-major then row then column tap, matching `[C_out, C_in, kh, kw]` weights.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let cols = self.cols();
        let taps = self.kh * self.kw;
        for b in 0..self.batch {
            for y in 0..self.h {
                for x in 0..self.w {
                    let row = (b * self.h + y) * self.w + x;
                    for dy in 0..self.kh {
                        let sy = y + dy;
                        if sy < ph || sy - ph >= self.h {
                            continue;
                        }
                        let sy = sy - ph;
                        for dx in 0..self.kw {
                            let sx = x + dx;
                            if sx < pw || sx - pw >= self.w {
                                continue;
                            }
                            let sx = sx - pw;
                            let src = ((b * self.h + sy) * self.w + sx) * self.c;
                            let tap = dy * self.kw + dx;
                            for ch in 0..self.c {
                                f(row * cols + ch * taps + tap, src + ch);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Arc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
    pub param: Option<ParamId>,
}

/// Recording context for one forward pass.
///
/// Values are computed eagerly as operations are recorded; [`Graph::backward`]
/// then replays the tape in reverse. Leaf gradients accumulate across repeated
/// backward calls.
pub struct Graph<T> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
            param,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&self, value: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(value), true, None)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(value), false, None)
    }

    /// Trainable leaf bound to a store entry; see [`ParamStore::accumulate_grads`].
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push_leaf(store.value(id).clone(), true, Some(id))
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|node| {
                let id = node.param?;
                let grad = node.grad.as_ref()?;
                Some((
                    id,
                    Tensor::new(node.value.shape().to_vec(), grad.clone()).expect("grad shape"),
                ))
            })
            .collect()
    }

    /// Reverse sweep from a scalar root. Gradients of leaves that require them
    /// are added to their accumulators.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root_shape = nodes[root.0].value.shape().to_vec();
        if nodes[root.0].value.numel() != 1 {
            return Err(ArrayError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = nodes[id].op {
                match &mut nodes[id].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += *x),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(vec![T::zero(); nodes[v.0].value.numel()]);
    }
    f(slot.as_mut().expect("initialized"));
}

fn backprop_node<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[id].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= *y)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::AddBias { x, bias } => {
            accumulate(nodes, grads, *x, |gx| add_into(gx, g));
            accumulate(nodes, grads, *bias, |gb| {
                let width = gb.len();
                for row in g.chunks(width) {
                    add_into(gb, row);
                }
            });
        }
        Op::AddPerBatch {
            x,
            y,
            batch,
            rows,
            width,
        } => {
            accumulate(nodes, grads, *x, |gx| add_into(gx, g));
            accumulate(nodes, grads, *y, |gy| {
                for b in 0..*batch {
                    let dst = &mut gy[b * width..(b + 1) * width];
                    for r in 0..*rows {
                        let off = (b * rows + r) * width;
                        add_into(dst, &g[off..off + width]);
                    }
                }
            });
        }
        Op::Scale { x, factor } => {
            let f = *factor;
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * *b)
            });
        }
        Op::Abs(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    let s = if xv[i] > T::zero() {
                        T::one()
                    } else if xv[i] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    gx[i] += s * g[i];
                }
            });
        }
        Op::Square(x) => {
            let xv = val(*x);
            let two = T::of(2.0);
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += two * xv[i] * g[i];
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    if xv[i] > T::zero() {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::Silu(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    let s = T::one() / (T::one() + (-xv[i]).exp());
                    gx[i] += g[i] * (s + xv[i] * s * (T::one() - s));
                }
            });
        }
        Op::Sum(x) => {
            let g0 = g[0];
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g0));
        }
        Op::Mean(x) => {
            let n = T::of(nodes[x.0].value.numel() as f64);
            let g0 = g[0] / n;
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g0));
        }
        Op::Matmul { a, b, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| gemm_nt(g, bv, ga, *m, *n, *k));
            accumulate(nodes, grads, *b, |gb| gemm_tn(av, g, gb, *k, *m, *n));
        }
        Op::MatmulNt { a, b, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| gemm_nn(g, bv, ga, *m, *n, *k));
            accumulate(nodes, grads, *b, |gb| gemm_tn(g, av, gb, *n, *m, *k));
        }
        Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => {
            let (av, bv) = (val(*a), val(*b));
            let (sa, sb, sc) = (m * k, k * n, m * n);
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..*batch {
                    gemm_nt(
                        &g[i * sc..(i + 1) * sc],
                        &bv[i * sb..(i + 1) * sb],
                        &mut ga[i * sa..(i + 1) * sa],
                        *m,
                        *n,
                        *k,
                    );
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..*batch {
                    gemm_tn(
                        &av[i * sa..(i + 1) * sa],
                        &g[i * sc..(i + 1) * sc],
                        &mut gb[i * sb..(i + 1) * sb],
                        *k,
                        *m,
                        *n,
                    );
                }
            });
        }
        Op::BmmNt {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => {
            let (av, bv) = (val(*a), val(*b));
            let (sa, sb, sc) = (m * k, n * k, m * n);
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..*batch {
                    gemm_nn(
                        &g[i * sc..(i + 1) * sc],
                        &bv[i * sb..(i + 1) * sb],
                        &mut ga[i * sa..(i + 1) * sa],
                        *m,
                        *n,
                        *k,
                    );
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..*batch {
                    gemm_tn(
                        &g[i * sc..(i + 1) * sc],
                        &av[i * sa..(i + 1) * sa],
                        &mut gb[i * sb..(i + 1) * sb],
                        *n,
                        *m,
                        *k,
                    );
                }
            });
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dotp = T::zero();
                        for a in 0..*len {
                            let idx = base + a * inner;
                            dotp += g[idx] * out[idx];
                        }
                        for a in 0..*len {
                            let idx = base + a * inner;
                            gx[idx] += out[idx] * (g[idx] - dotp);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            width,
            xhat,
            inv_std,
        } => {
            let w = *width;
            let gain_v = val(*gain);
            accumulate(nodes, grads, *bias, |gb| {
                for row in g.chunks(w) {
                    add_into(gb, row);
                }
            });
            accumulate(nodes, grads, *gain, |gg| {
                for (row_g, row_x) in g.chunks(w).zip(xhat.chunks(w)) {
                    for j in 0..w {
                        gg[j] += row_g[j] * row_x[j];
                    }
                }
            });
            accumulate(nodes, grads, *x, |gx| {
                let inv_w = T::one() / T::of(w as f64);
                let mut dxhat = vec![T::zero(); w];
                for (r, ((row_g, row_x), row_out)) in g
                    .chunks(w)
                    .zip(xhat.chunks(w))
                    .zip(gx.chunks_mut(w))
                    .enumerate()
                {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..w {
                        dxhat[j] = row_g[j] * gain_v[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * row_x[j];
                    }
                    mean_d *= inv_w;
                    mean_dx *= inv_w;
                    let s = inv_std[r];
                    for j in 0..w {
                        row_out[j] += s * (dxhat[j] - mean_d - row_x[j] * mean_dx);
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            group,
            lq,
            lk,
            dim,
            probs,
        } => {
            attention_backward(
                nodes,
                grads,
                g,
                AttentionSpec {
                    q: *q,
                    k: *k,
                    v: *v,
                    heads: *heads,
                    group: *group,
                    lq: *lq,
                    lk: *lk,
                    dim: *dim,
                },
                probs,
            );
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |gx| add_into(gx, g));
        }
        Op::Permute { x, in_shape, perm } => {
            let map = permute_index_map(in_shape, perm);
            accumulate(nodes, grads, *x, |gx| {
                for (o, &i) in map.iter().enumerate() {
                    gx[i] += g[o];
                }
            });
        }
        Op::Im2col { x, geom } => {
            accumulate(nodes, grads, *x, |gx| {
                geom.for_each(|o, i| gx[i] += g[o]);
            });
        }
        Op::Demodulate {
            w,
            phi,
            batch,
            cout,
            cin,
            taps,
            inv_norm,
        } => {
            let (wv, pv) = (val(*w), val(*phi));
            let per = cin * taps;
            // du = g/N - u·(Σ g·u)/N³, with u = φ·ω and out = u/N.
            let mut du = vec![T::zero(); batch * cout * per];
            for b in 0..*batch {
                for j in 0..*cout {
                    let s = inv_norm[b * cout + j];
                    let base = (b * cout + j) * per;
                    let mut gu = T::zero();
                    for i in 0..*cin {
                        for t in 0..*taps {
                            let widx = j * per + i * taps + t;
                            gu += g[base + i * taps + t] * pv[b * cin + i] * wv[widx];
                        }
                    }
                    let s3 = s * s * s;
                    for i in 0..*cin {
                        for t in 0..*taps {
                            let widx = j * per + i * taps + t;
                            let u = pv[b * cin + i] * wv[widx];
                            du[base + i * taps + t] = g[base + i * taps + t] * s - u * gu * s3;
                        }
                    }
                }
            }
            accumulate(nodes, grads, *w, |gw| {
                for b in 0..*batch {
                    for j in 0..*cout {
                        let base = (b * cout + j) * per;
                        for i in 0..*cin {
                            let p = pv[b * cin + i];
                            for t in 0..*taps {
                                gw[j * per + i * taps + t] += du[base + i * taps + t] * p;
                            }
                        }
                    }
                }
            });
            accumulate(nodes, grads, *phi, |gp| {
                for b in 0..*batch {
                    for j in 0..*cout {
                        let base = (b * cout + j) * per;
                        for i in 0..*cin {
                            let mut acc = T::zero();
                            for t in 0..*taps {
                                acc += du[base + i * taps + t] * wv[j * per + i * taps + t];
                            }
                            gp[b * cin + i] += acc;
                        }
                    }
                }
            });
        }
        Op::GatherRows { x, index, width } => {
            let w = *width;
            accumulate(nodes, grads, *x, |gx| {
                for (o, &src) in index.iter().enumerate() {
                    add_into(&mut gx[src * w..(src + 1) * w], &g[o * w..(o + 1) * w]);
                }
            });
        }
        Op::Concat {
            inputs,
            outer,
            widths,
        } => {
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (input, &width) in inputs.iter().zip(widths) {
                accumulate(nodes, grads, *input, |gi| {
                    for o in 0..*outer {
                        add_into(
                            &mut gi[o * width..(o + 1) * width],
                            &g[o * total + offset..o * total + offset + width],
                        );
                    }
                });
                offset += width;
            }
        }
        Op::AvgPool2 { x, batch, h, w, c } => {
            let (oh, ow) = (h / 2, w / 2);
            let quarter = T::of(0.25);
            accumulate(nodes, grads, *x, |gx| {
                for b in 0..*batch {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let o = ((b * oh + y) * ow + xx) * c;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                                for ch in 0..*c {
                                    gx[i + ch] += quarter * g[o + ch];
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Upsample2 { x, batch, h, w, c } => {
            let (oh, ow) = (h * 2, w * 2);
            accumulate(nodes, grads, *x, |gx| {
                for b in 0..*batch {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let o = ((b * oh + y) * ow + xx) * c;
                            let i = ((b * h + y / 2) * w + xx / 2) * c;
                            add_into(&mut gx[i..i + c], &g[o..o + c]);
                        }
                    }
                }
            });
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
}

/// For each output position of a permutation, the flat input index it reads.
pub(crate) fn permute_index_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let numel: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let src: usize = (0..rank).map(|d| idx[d] * in_strides[perm[d]]).sum();
        map.push(src);
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

#[derive(Clone, Copy)]
pub(crate) struct AttentionSpec {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub heads: usize,
    pub group: usize,
    pub lq: usize,
    pub lk: usize,
    pub dim: usize,
}

fn attention_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    spec: AttentionSpec,
    probs: &[T],
) {
    let AttentionSpec {
        q,
        k,
        v,
        heads,
        group,
        lq,
        lk,
        dim,
    } = spec;
    let qv = nodes[q.0].value.data();
    let kv = nodes[k.0].value.data();
    let vv = nodes[v.0].value.data();
    let bq = nodes[q.0].value.numel() / (lq * dim);
    let dh = dim / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();

    let mut gq = vec![T::zero(); qv.len()];
    let mut gk = vec![T::zero(); kv.len()];
    let mut gv = vec![T::zero(); vv.len()];
    let mut dp = vec![T::zero(); lk];

    for b in 0..bq {
        let kb = b / group;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qrow = (b * lq + i) * dim + off;
                let prow = ((b * heads + h) * lq + i) * lk;
                let p = &probs[prow..prow + lk];
                let go = &g[qrow..qrow + dh];
                let mut dot_pd = T::zero();
                for j in 0..lk {
                    let vrow = (kb * lk + j) * dim + off;
                    let mut acc = T::zero();
                    for c in 0..dh {
                        acc += go[c] * vv[vrow + c];
                        gv[vrow + c] += p[j] * go[c];
                    }
                    dp[j] = acc;
                    dot_pd += acc * p[j];
                }
                for j in 0..lk {
                    let ds = p[j] * (dp[j] - dot_pd) * scale;
                    let krow = (kb * lk + j) * dim + off;
                    for c in 0..dh {
                        gq[qrow + c] += ds * kv[krow + c];
                        gk[krow + c] += ds * qv[qrow + c];
                    }
                }
            }
        }
    }
    accumulate(nodes, grads, q, |x| add_into(x, &gq));
    accumulate(nodes, grads, k, |x| add_into(x, &gk));
    accumulate(nodes, grads, v, |x| add_into(x, &gv));
}

//! Tape-based reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Nodes that do not
//! depend on a trainable leaf keep no backward closure, so inference through a
//! graph costs the forward pass only.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&id| self.grads[id].as_ref())
    }

    /// Gradients of every parameter touched by the forward pass.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, &id)| self.grads[id].as_ref().map(|g| (n.as_str(), g)))
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

    fn push(&self, value: Tensor, parents: &[Var<'_>], backward: Option<BackwardFn>) -> Var<'_> {
        self.push_rc(Rc::new(value), parents, backward)
    }

    fn push_rc(&self, value: Rc<Tensor>, parents: &[Var<'_>], backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var { graph: self, id }
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, &[], None)
    }

    /// Trainable leaf not backed by a parameter store.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), parents: vec![], requires_grad: true, backward: None });
        Var { graph: self, id }
    }

    /// Trainable leaf for a named parameter; repeated lookups share one node.
    pub fn param(&self, store: &ParamStore, name: &str) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { graph: self, id };
        }
        let value = store.get_rc(name);
        let v = {
            let mut nodes = self.nodes.borrow_mut();
            let id = nodes.len();
            nodes.push(Node { value, parents: vec![], requires_grad: true, backward: None });
            Var { graph: self, id }
        };
        self.params.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    /// Parameter looked up as a constant (frozen).
    pub fn frozen(&self, store: &ParamStore, name: &str) -> Var<'_> {
        self.push_rc(store.get_rc(name), &[], None)
    }

    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, need), pg) in node.parents.iter().zip(&needs).zip(parent_grads) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads, params: self.params.borrow().clone() }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len());
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let data = t.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// Shape split around `axis`: (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let hwo = self.hw_out();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * hwo..(row + 1) * hwo];
                    for oh in 0..self.ho {
                        let ih = (oh * self.sh + i) as isize - self.ph as isize;
                        for ow in 0..self.wo {
                            let iw = (ow * self.sw + j) as isize - self.pw as isize;
                            dst[oh * self.wo + ow] = if ih >= 0
                                && (ih as usize) < self.h
                                && iw >= 0
                                && (iw as usize) < self.w
                            {
                                x[(c * self.h + ih as usize) * self.w + iw as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let hwo = self.hw_out();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &col[row * hwo..(row + 1) * hwo];
                    for oh in 0..self.ho {
                        let ih = (oh * self.sh + i) as isize - self.ph as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        for ow in 0..self.wo {
                            let iw = (ow * self.sw + j) as isize - self.pw as isize;
                            if iw < 0 || iw as usize >= self.w {
                                continue;
                            }
                            dx[(c * self.h + ih as usize) * self.w + iw as usize] += src[oh * self.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Stop-gradient: same value, cut from the tape.
    pub fn detach(self) -> Var<'g> {
        self.graph.push_rc(self.value(), &[], None)
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.graph.push_rc(
            y,
            &[self],
            Some(Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(yc.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data))]
            })),
        )
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Floors the selected last-axis columns so they stay positive:
    /// values `>= eps` pass through, anything below becomes `max(x, 0) + eps`.
    pub fn positive_floor_columns(self, columns: &[bool], eps: f64) -> Var<'g> {
        let x = self.value();
        let n = x.last_dim();
        assert_eq!(columns.len(), n);
        let cols: Rc<Vec<bool>> = Rc::new(columns.to_vec());
        let mut y = (*x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            if cols[i % n] && *v < eps {
                *v = v.max(0.0) + eps;
            }
        }
        self.graph.push(
            y,
            &[self],
            Some(Box::new(move |g, _| {
                let mut d = g.clone();
                for (i, (gv, &xv)) in d.data_mut().iter_mut().zip(x.data()).enumerate() {
                    if cols[i % n] && xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                vec![Some(d)]
            })),
        )
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        self.graph.push(
            a.zip_map(&b, |x, y| x + y),
            &[self, other],
            Some(Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        self.graph.push(
            a.zip_map(&b, |x, y| x - y),
            &[self, other],
            Some(Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let y = a.zip_map(&b, |x, y| x * y);
        self.graph.push(
            y,
            &[self, other],
            Some(Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |g, b| g * b)),
                    needs[1].then(|| g.zip_map(&a, |g, a| g * a)),
                ]
            })),
        )
    }

    /// Adds a `[n]` vector to every last-axis row.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        let (x, b) = (self.value(), row.value());
        let n = x.last_dim();
        assert_eq!(b.shape(), [n], "add_row expects a vector of the last-axis size");
        let mut y = (*x).clone();
        for r in y.data_mut().chunks_mut(n) {
            for (v, bv) in r.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.graph.push(
            y,
            &[self, row],
            Some(Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for r in g.rows() {
                        for (a, v) in acc.iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                    Tensor::new(vec![n], acc)
                });
                vec![Some(g.clone()), gb]
            })),
        )
    }

    /// Multiplies every last-axis row elementwise by a `[n]` vector.
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        let (x, b) = (self.value(), row.value());
        let n = x.last_dim();
        assert_eq!(b.shape(), [n], "mul_row expects a vector of the last-axis size");
        let mut y = (*x).clone();
        for r in y.data_mut().chunks_mut(n) {
            for (v, bv) in r.iter_mut().zip(b.data()) {
                *v *= bv;
            }
        }
        self.graph.push(
            y,
            &[self, row],
            Some(Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut d = g.clone();
                    for r in d.data_mut().chunks_mut(n) {
                        for (v, bv) in r.iter_mut().zip(b.data()) {
                            *v *= bv;
                        }
                    }
                    d
                });
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for (gr, xr) in g.rows().zip(x.rows()) {
                        for j in 0..n {
                            acc[j] += gr[j] * xr[j];
                        }
                    }
                    Tensor::new(vec![n], acc)
                });
                vec![gx, gb]
            })),
        )
    }

    /// Multiplies by a one-element tensor broadcast over everything.
    pub fn mul_scalar_var(self, s: Var<'g>) -> Var<'g> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.numel(), 1);
        let c = sv.data()[0];
        self.graph.push(
            x.map(|v| v * c),
            &[self, s],
            Some(Box::new(move |g, needs| {
                let gs = needs[1].then(|| {
                    let d: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
                    Tensor::new(sv.shape().to_vec(), vec![d])
                });
                vec![needs[0].then(|| g.map(|v| v * c)), gs]
            })),
        )
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.push(
            Tensor::scalar(x.sum()),
            &[self],
            Some(Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))])),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum of squared entries.
    pub fn sum_sq(self) -> Var<'g> {
        let x = self.value();
        let s = x.data().iter().map(|v| v * v).sum();
        self.graph.push(
            Tensor::scalar(s),
            &[self],
            Some(Box::new(move |g, _| {
                let c = 2.0 * g.item();
                vec![Some(x.map(|v| c * v))]
            })),
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshape(shape);
        self.graph.push(
            y,
            &[self],
            Some(Box::new(move |g, _| vec![Some(g.clone().reshape(old.clone()))])),
        )
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let x = self.value();
        let y = permute_tensor(&x, perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.graph.push(
            y,
            &[self],
            Some(Box::new(move |g, _| vec![Some(permute_tensor(g, &inv))])),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        assert!(start + len <= n, "narrow out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.graph.push(
            Tensor::new(out_shape, out),
            &[self],
            Some(Box::new(move |g, _| {
                let mut d = Tensor::zeros(shape.clone());
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    d.data_mut()[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(d)]
            })),
        )
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty());
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let lens: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), first.len());
                for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                    assert!(d == axis || a == b, "concat shape mismatch");
                }
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        graph.push(
            Tensor::new(out_shape, out),
            parts,
            Some(Box::new(move |g, needs| {
                let mut res = Vec::with_capacity(lens.len());
                let mut offset = 0;
                for (i, &l) in lens.iter().enumerate() {
                    if needs[i] {
                        let mut d = Vec::with_capacity(outer * l * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + l * inner]);
                        }
                        res.push(Some(Tensor::new(shapes[i].clone(), d)));
                    } else {
                        res.push(None);
                    }
                    offset += l;
                }
                res
            })),
        )
    }

    /// Rows `idx` of a `[rows, d]` table.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'g> {
        let t = self.value();
        let shape = t.shape().to_vec();
        assert_eq!(shape.len(), 2);
        let d = shape[1];
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < shape[0], "row index {i} out of range {}", shape[0]);
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let idx = idx.to_vec();
        self.graph.push(
            Tensor::new(vec![idx.len(), d], out),
            &[self],
            Some(Box::new(move |g, _| {
                let mut acc = Tensor::zeros(shape.clone());
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut acc.data_mut()[i * d..(i + 1) * d];
                    for (a, v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += v;
                    }
                }
                vec![Some(acc)]
            })),
        )
    }

    /// Batched matrix product `[b, m, k] x [b, k, n]`, or `[b, n, k]` when
    /// `trans_b`. Two-dimensional operands are treated as a batch of one.
    pub fn bmm(self, other: Var<'g>, trans_b: bool) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let two_d = a.ndim() == 2;
        let (bs, m, k) = match a.shape() {
            [m, k] => (1, *m, *k),
            [bs, m, k] => (*bs, *m, *k),
            s => panic!("bmm lhs must be 2-D or 3-D, got {s:?}"),
        };
        let (bb, r, c) = match b.shape() {
            [r, c] => (1, *r, *c),
            [bb, r, c] => (*bb, *r, *c),
            s => panic!("bmm rhs must be 2-D or 3-D, got {s:?}"),
        };
        assert_eq!(bs, bb, "bmm batch mismatch");
        let n = if trans_b {
            assert_eq!(c, k, "bmm inner dimension mismatch");
            r
        } else {
            assert_eq!(r, k, "bmm inner dimension mismatch");
            c
        };
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                trans_b,
                0.0,
                &mut out[i * m * n..],
            );
        }
        let shape = if two_d { vec![m, n] } else { vec![bs, m, n] };
        self.graph.push(
            Tensor::new(shape, out),
            &[self, other],
            Some(Box::new(move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        // dA = dC * op(B)^T
                        gemm(m, n, k, &gd[i * m * n..], false, &b.data()[i * k * n..], !trans_b, 0.0, &mut d[i * m * k..]);
                    }
                    Tensor::new(a.shape().to_vec(), d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        if trans_b {
                            // B is [n, k]: dB = dC^T * A
                            gemm(n, m, k, &gd[i * m * n..], true, &a.data()[i * m * k..], false, 0.0, &mut d[i * k * n..]);
                        } else {
                            gemm(k, m, n, &a.data()[i * m * k..], true, &gd[i * m * n..], false, 0.0, &mut d[i * k * n..]);
                        }
                    }
                    Tensor::new(b.shape().to_vec(), d)
                });
                vec![ga, gb]
            })),
        )
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.bmm(other, false)
    }

    /// `x @ w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let shape = self.shape();
        let din = *shape.last().expect("linear on scalar");
        let rows = shape.iter().product::<usize>() / din.max(1);
        let wshape = w.shape();
        assert_eq!(wshape[0], din, "linear input width mismatch");
        let x2 = if shape.len() == 2 { self } else { self.reshape(vec![rows, din]) };
        let mut y = x2.matmul(w);
        if let Some(b) = b {
            y = y.add_row(b);
        }
        if shape.len() == 2 {
            y
        } else {
            let mut out = shape.clone();
            *out.last_mut().unwrap() = wshape[1];
            y.reshape(out)
        }
    }

    pub fn softmax_last(self) -> Var<'g> {
        let x = self.value();
        let n = x.last_dim();
        let mut y = (*x).clone();
        for r in y.data_mut().chunks_mut(n) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in r.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in r.iter_mut() {
                *v /= s;
            }
        }
        let y = Rc::new(y);
        let yc = y.clone();
        self.graph.push_rc(
            y,
            &[self],
            Some(Box::new(move |g, _| {
                let mut d = g.clone();
                for (dr, yr) in d.data_mut().chunks_mut(n).zip(yc.data().chunks(n)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (dv, &yv) in dr.iter_mut().zip(yr) {
                        *dv = yv * (*dv - dot);
                    }
                }
                vec![Some(d)]
            })),
        )
    }

    /// Mean cross-entropy of `[rows, classes]` logits against class targets.
    pub fn cross_entropy(self, targets: &[usize]) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert_eq!(shape.len(), 2);
        let (rows, classes) = (shape[0], shape[1]);
        assert_eq!(rows, targets.len(), "one target per row");
        let mut probs = (*x).clone();
        let mut loss = 0.0;
        for (r, &t) in probs.data_mut().chunks_mut(classes).zip(targets) {
            assert!(t < classes, "target {t} out of range {classes}");
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - r[t];
            for v in r.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let targets = targets.to_vec();
        self.graph.push(
            Tensor::scalar(loss / rows as f64),
            &[self],
            Some(Box::new(move |g, _| {
                let c = g.item() / rows as f64;
                let mut d = probs.clone();
                for (r, &t) in d.data_mut().chunks_mut(classes).zip(&targets) {
                    r[t] -= 1.0;
                    r.iter_mut().for_each(|v| *v *= c);
                }
                vec![Some(d)]
            })),
        )
    }

    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let n = x.last_dim();
        let rows = x.numel() / n;
        let mut xhat = (*x).clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in xhat.data_mut().chunks_mut(n) {
            let mean = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in r.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let xhat = Rc::new(xhat);
        let xh = xhat.clone();
        let normed = self.graph.push_rc(
            xhat,
            &[self],
            Some(Box::new(move |g, _| {
                let mut d = g.clone();
                for ((dr, xr), is) in d.data_mut().chunks_mut(n).zip(xh.data().chunks(n)).zip(&inv_std) {
                    let mg = dr.iter().sum::<f64>() / n as f64;
                    let mgx = dr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for (dv, &xv) in dr.iter_mut().zip(xr) {
                        *dv = is * (*dv - mg - xv * mgx);
                    }
                }
                vec![Some(d)]
            })),
        );
        normed.mul_row(gamma).add_row(beta)
    }

    /// 2-D convolution on `[batch, cin, h, w]` with weights `[cout, cin, kh, kw]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: (usize, usize), pad: (usize, usize)) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        let (batch, cin, h, wd) = match x.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => panic!("conv2d input must be 4-D, got {s:?}"),
        };
        let (cout, wcin, kh, kw) = match w.shape() {
            [o, i, kh, kw] => (*o, *i, *kh, *kw),
            s => panic!("conv2d weight must be 4-D, got {s:?}"),
        };
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert!(h + 2 * pad.0 >= kh && wd + 2 * pad.1 >= kw, "conv2d input smaller than kernel");
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            ho: (h + 2 * pad.0 - kh) / stride.0 + 1,
            wo: (wd + 2 * pad.1 - kw) / stride.1 + 1,
        };
        let (ckk, hwo) = (geom.ckk(), geom.hw_out());
        let in_sz = cin * h * wd;
        let out_sz = cout * hwo;
        let mut out = vec![0.0; batch * out_sz];
        let mut col = vec![0.0; ckk * hwo];
        for b in 0..batch {
            geom.im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &mut col);
            gemm(cout, ckk, hwo, w.data(), false, &col, false, 0.0, &mut out[b * out_sz..]);
        }
        let y = Tensor::new(vec![batch, cout, geom.ho, geom.wo], out);
        let conv = self.graph.push(
            y,
            &[self, weight],
            Some(Box::new(move |g, needs| {
                let mut dx = needs[0].then(|| Tensor::zeros(x.shape().to_vec()));
                let mut dw = needs[1].then(|| Tensor::zeros(w.shape().to_vec()));
                let mut col = vec![0.0; ckk * hwo];
                let mut dcol = vec![0.0; ckk * hwo];
                for b in 0..geom.batch {
                    let gb = &g.data()[b * out_sz..(b + 1) * out_sz];
                    if let Some(dw) = dw.as_mut() {
                        geom.im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &mut col);
                        gemm(geom.cout, hwo, ckk, gb, false, &col, true, 1.0, dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(ckk, geom.cout, hwo, w.data(), true, gb, false, 0.0, &mut dcol);
                        geom.col2im(&dcol, &mut dx.data_mut()[b * in_sz..(b + 1) * in_sz]);
                    }
                }
                vec![dx, dw]
            })),
        );
        match bias {
            Some(b) => conv.add_channel_bias(b),
            None => conv,
        }
    }

    /// Adds a `[c]` bias along axis 1 of a `[batch, c, ...]` tensor.
    pub fn add_channel_bias(self, bias: Var<'g>) -> Var<'g> {
        let (x, b) = (self.value(), bias.value());
        let shape = x.shape().to_vec();
        let c = shape[1];
        assert_eq!(b.shape(), [c], "channel bias size mismatch");
        let inner: usize = shape[2..].iter().product();
        let mut y = (*x).clone();
        for (i, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.graph.push(
            y,
            &[self, bias],
            Some(Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        acc[i % c] += chunk.iter().sum::<f64>();
                    }
                    Tensor::new(vec![c], acc)
                });
                vec![Some(g.clone()), gb]
            })),
        )
    }

    /// 1-D convolution on `[batch, cin, t]` with weights `[cout, cin, k]`.
    pub fn conv1d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 3, "conv1d input must be [batch, channels, time]");
        assert_eq!(ws.len(), 3, "conv1d weight must be [cout, cin, k]");
        let x4 = self.reshape(vec![xs[0], xs[1], 1, xs[2]]);
        let w4 = weight.reshape(vec![ws[0], ws[1], 1, ws[2]]);
        let y = x4.conv2d(w4, bias, (1, stride), (0, pad));
        let ys = y.shape();
        y.reshape(vec![ys[0], ys[1], ys[3]])
    }

    /// Max pooling without padding on `[batch, c, h, w]`.
    pub fn max_pool2d(self, kernel: (usize, usize), stride: (usize, usize)) -> Var<'g> {
        let x = self.value();
        let (batch, c, h, w) = match x.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => panic!("max_pool2d input must be 4-D, got {s:?}"),
        };
        assert!(h >= kernel.0 && w >= kernel.1, "max_pool2d input smaller than kernel");
        let ho = (h - kernel.0) / stride.0 + 1;
        let wo = (w - kernel.1) / stride.1 + 1;
        let mut out = Vec::with_capacity(batch * c * ho * wo);
        let mut arg = Vec::with_capacity(batch * c * ho * wo);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for i in 0..kernel.0 {
                        for j in 0..kernel.1 {
                            let idx = base + (oh * stride.0 + i) * w + ow * stride.1 + j;
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.graph.push(
            Tensor::new(vec![batch, c, ho, wo], out),
            &[self],
            Some(Box::new(move |g, _| {
                let mut d = Tensor::zeros(in_shape.clone());
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    d.data_mut()[i] += gv;
                }
                vec![Some(d)]
            })),
        )
    }

    /// Nearest-neighbour upsampling of the last axis by `factor`.
    pub fn upsample_last(self, factor: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let t = x.last_dim();
        let mut out = Vec::with_capacity(x.numel() * factor);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, factor));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = t * factor;
        self.graph.push(
            Tensor::new(out_shape, out),
            &[self],
            Some(Box::new(move |g, _| {
                let d = g.data().chunks(factor).map(|c| c.iter().sum()).collect();
                vec![Some(Tensor::new(shape.clone(), d))]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_leaf_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64).collect());
        let p = permute_tensor(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), [4, 2, 3]);
        assert_eq!(p.data()[1], t.data()[4]);
        let back = permute_tensor(&p, &[1, 2, 0]);
        assert_eq!(back, t);
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut r = rng();
        let a = Tensor::randn(vec![3, 4], 1.0, &mut r);
        let b = Tensor::randn(vec![4, 5], 1.0, &mut r);
        let bias = Tensor::randn(vec![5], 1.0, &mut r);
        let err = check_leaf_gradients(&[a, b, bias], |_, v| {
            v[0].tanh().matmul(v[1].sigmoid()).add_row(v[2]).gelu().sum_sq()
        });
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn attention_style_gradients() {
        let mut r = rng();
        let q = Tensor::randn(vec![2, 3, 4], 1.0, &mut r);
        let k = Tensor::randn(vec![2, 3, 4], 1.0, &mut r);
        let err = check_leaf_gradients(&[q, k], |_, v| {
            let s = v[0].bmm(v[1], true).softmax_last();
            s.bmm(v[1], false).permute(&[1, 0, 2]).narrow(1, 1, 1).sum_sq()
        });
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        let mut r = rng();
        let x = Tensor::randn(vec![2, 2, 7, 6], 1.0, &mut r);
        let w = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(vec![3], 0.5, &mut r);
        let err = check_leaf_gradients(&[x, w, b], |_, v| {
            v[0].conv2d(v[1], Some(v[2]), (1, 1), (1, 1))
                .upsample_last(2)
                .sum_sq()
        });
        assert!(err < 1e-4, "rel err {err}");
        let x = Tensor::randn(vec![2, 3, 9], 1.0, &mut r);
        let w = Tensor::randn(vec![4, 3, 3], 0.5, &mut r);
        let err = check_leaf_gradients(&[x, w], |_, v| v[0].conv1d(v[1], None, 2, 1).tanh().sum_sq());
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn max_pool_gradient_routes_to_argmax() {
        // Well-separated values so no finite-difference step crosses a tie.
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| ((v * 7) % 16) as f64).collect());
        let err = check_leaf_gradients(&[x], |_, v| v[0].max_pool2d((3, 3), (1, 1)).square().sum());
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn norm_concat_gather_ce_gradients() {
        let mut r = rng();
        let x = Tensor::randn(vec![4, 6], 1.0, &mut r);
        let g = Tensor::randn(vec![6], 1.0, &mut r);
        let b = Tensor::randn(vec![6], 1.0, &mut r);
        let table = Tensor::randn(vec![5, 6], 1.0, &mut r);
        let err = check_leaf_gradients(&[x, g, b, table], |_, v| {
            let h = v[0].layer_norm(v[1], v[2], 1e-5);
            let e = v[3].gather_rows(&[1, 1, 4]);
            Var::concat(&[h, e], 0).cross_entropy(&[0, 1, 2, 3, 4, 5, 0])
        });
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = x.detach().mul(x).sum();
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn positive_floor_columns_only_touches_selected() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![-0.2, -0.2, 0.5, 3e-6]));
        let y = x.positive_floor_columns(&[true, false], 1e-5);
        assert_eq!(y.value().data(), &[1e-5, -0.2, 0.5, 3e-6]);
    }
}

//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! [`Var`] is a cheap handle into the tape; the differentiable primitives are
//! methods on it. Calling [`Var::backward`] on a scalar walks the record in
//! reverse and accumulates gradients into every leaf created with
//! [`Tape::leaf`]. Repeated calls add to the stored gradients.
//!
//! ```
//! use osdmamba::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! x.mul(x).unwrap().sum().backward().unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Computes parent adjoints from the output adjoint. The flag slice says
/// which parents need one; entries for the others may be `None`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Single-writer record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    macs: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        leaf_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = leaf_grad || parents.iter().any(|&p| nodes[p].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var { tape: self, id }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None, false)
    }

    /// Records a user-defined primitive.
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var<'t> {
        for p in parents {
            assert!(std::ptr::eq(p.tape, self), "operand from a different tape");
        }
        self.push(
            value,
            parents.iter().map(|v| v.id).collect(),
            Some(backward),
            false,
        )
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).and_then(|g| g.clone())
    }

    pub fn zero_grads(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Multiply-accumulate operations performed by recorded linear,
    /// convolution, and scan primitives.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn count_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            "shape",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes: Ref<'_, Vec<Node>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    /// Propagates adjoints from this scalar to every leaf.
    pub fn backward(&self) -> Result<()> {
        let nodes = self.tape.nodes.borrow();
        let out = &nodes[self.id];
        if out.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.id + 1];
        adj[self.id] = Some(Tensor::ones(out.value.shape()));
        let mut stored = self.tape.grads.borrow_mut();
        if stored.len() < nodes.len() {
            stored.resize(nodes.len(), None);
        }
        for id in (0..=self.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        accumulate(&mut stored[id], g);
                    }
                }
                Some(bw) => {
                    let need: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect();
                    let pg = bw(&g, &need);
                    for ((&p, gp), &nd) in node.parents.iter().zip(pg).zip(&need) {
                        if let (Some(gp), true) = (gp, nd) {
                            accumulate(&mut adj[p], gp);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn unary(self, value: Tensor, backward: BackwardFn) -> Var<'t> {
        self.tape.custom(&[self], value, backward)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(self.tape.custom(
            &[self, other],
            out,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape.custom(
            &[self, other],
            out,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.scale(-1.0))]),
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.custom(
            &[self, other],
            out,
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&b, |u, v| u * v)),
                    need[1].then(|| g.zip_map(&a, |u, v| u * v)),
                ]
            }),
        ))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.with_value(|x| x.scale(s));
        self.unary(out, Box::new(move |g, _| vec![Some(g.scale(s))]))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = self.with_value(|x| x.map(|v| v + s));
        self.unary(out, Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.with_value(|x| x.map(f64::exp));
        let y = out.clone();
        self.unary(
            out,
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |u, v| u * v))]),
        )
    }

    pub fn log(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f64::ln);
        self.unary(
            out,
            Box::new(move |g, _| vec![Some(g.zip_map(&x, |u, v| u / v))]),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.with_value(|x| x.map(sigmoid));
        let y = out.clone();
        self.unary(
            out,
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |u, s| u * s * (1.0 - s)))]),
        )
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * sigmoid(v));
        self.unary(
            out,
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&x, |u, v| {
                    let s = sigmoid(v);
                    u * s * (1.0 + v * (1.0 - s))
                }))]
            }),
        )
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(softplus);
        self.unary(
            out,
            Box::new(move |g, _| vec![Some(g.zip_map(&x, |u, v| u * sigmoid(v)))]),
        )
    }

    pub fn sum(self) -> Var<'t> {
        let (out, shape) = self.with_value(|x| (x.sum(), x.shape().to_vec()));
        self.unary(
            Tensor::scalar(out),
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(|x| x.len()) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.unary(
            out,
            Box::new(move |g, _| vec![Some(Tensor::from_parts(orig.clone(), g.data().to_vec()))]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank()
            || perm
                .iter()
                .any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::contract(format!(
                "invalid permutation {perm:?} for rank {}",
                x.rank()
            )));
        }
        let (data, shape) = kernels::permute(x.data(), x.shape(), perm);
        let inv = kernels::inverse_permutation(perm);
        Ok(self.unary(
            Tensor::from_parts(shape.clone(), data),
            Box::new(move |g, _| {
                let (d, s) = kernels::permute(g.data(), &shape, &inv);
                vec![Some(Tensor::from_parts(s, d))]
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() || start + len > x.shape()[axis] || len == 0 {
            return Err(Error::dim(
                "narrow",
                axis,
                format!("range within {:?}", x.shape()),
                format!("{start}..{}", start + len),
            ));
        }
        let (outer, ext, inner) = kernels::axis_split(x.shape(), axis);
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * ext + start) * inner..][..len * inner]);
        }
        let in_shape = x.shape().to_vec();
        Ok(self.unary(
            Tensor::from_parts(shape, out),
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&in_shape);
                let d = dx.data_mut();
                for o in 0..outer {
                    d[(o * ext + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Row gather on a rank-2 value: `out[i] = x[index[i]]`.
    pub fn gather_rows(self, index: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::dim("gather_rows", "rank", 2, x.rank()));
        }
        let (rows, width) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", 0, format!("index < {rows}"), bad));
        }
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index.iter() {
            out.extend_from_slice(&x.data()[i * width..][..width]);
        }
        Ok(self.unary(
            Tensor::from_parts(vec![index.len(), width], out),
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&[rows, width]);
                let d = dx.data_mut();
                for (o, &i) in index.iter().enumerate() {
                    for (a, b) in d[i * width..][..width]
                        .iter_mut()
                        .zip(&g.data()[o * width..][..width])
                    {
                        *a += b;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `y = x·Wᵀ + b` over the last axis. `weight: [Dout, Din]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let din = *x.shape().last().unwrap_or(&1);
        if w.rank() != 2 || w.shape()[1] != din || x.rank() == 0 {
            return Err(Error::dim(
                "linear",
                "last",
                format!("Din = {:?}", w.shape().get(1)),
                din,
            ));
        }
        let dout = w.shape()[0];
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [dout] {
                return Err(Error::dim(
                    "linear",
                    "bias",
                    dout,
                    format!("{:?}", b.shape()),
                ));
            }
        }
        let rows = x.len() / din;
        self.tape.count_macs((rows * din * dout) as u64);
        let y = kernels::linear_forward(
            x.data(),
            w.data(),
            b.as_ref().map(|b| b.data()),
            rows,
            din,
            dout,
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape.custom(
            &parents,
            Tensor::from_parts(shape, y),
            Box::new(move |g, need| {
                let gd = g.data();
                let mut out = vec![
                    need[0].then(|| {
                        Tensor::from_parts(
                            x.shape().to_vec(),
                            kernels::linear_grad_input(gd, w.data(), rows, din, dout),
                        )
                    }),
                    need[1].then(|| {
                        Tensor::from_parts(
                            w.shape().to_vec(),
                            kernels::linear_grad_weight(gd, x.data(), rows, din, dout),
                        )
                    }),
                ];
                if need.len() == 3 {
                    out.push(
                        need[2].then(|| {
                            Tensor::from_parts(vec![dout], kernels::column_sums(gd, dout))
                        }),
                    );
                }
                out
            }),
        ))
    }

    /// 2D cross-correlation, `x: [N, Cin, H, W]`, `kernel: [Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let k = kernel.value();
        if x.rank() != 4 {
            return Err(Error::dim("conv2d", "rank(input)", 4, x.rank()));
        }
        if k.rank() != 4 {
            return Err(Error::dim("conv2d", "rank(kernel)", 4, k.rank()));
        }
        let (xs, ks) = (x.shape(), k.shape());
        if groups == 0 || xs[1] % groups != 0 {
            return Err(Error::dim(
                "conv2d",
                "Cin",
                format!("multiple of groups={groups}"),
                xs[1],
            ));
        }
        if ks[0] % groups != 0 {
            return Err(Error::dim(
                "conv2d",
                "Cout",
                format!("multiple of groups={groups}"),
                ks[0],
            ));
        }
        if ks[1] != xs[1] / groups {
            return Err(Error::dim("conv2d", "Cin/groups", xs[1] / groups, ks[1]));
        }
        if ks[2] > xs[2] + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                "H",
                format!(">= kh={}", ks[2]),
                xs[2] + 2 * padding,
            ));
        }
        if ks[3] > xs[3] + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                "W",
                format!(">= kw={}", ks[3]),
                xs[3] + 2 * padding,
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
            groups,
        };
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [geom.cout] {
                return Err(Error::dim(
                    "conv2d",
                    "bias",
                    geom.cout,
                    format!("{:?}", b.shape()),
                ));
            }
        }
        self.tape.count_macs(geom.macs());
        let y = kernels::conv2d_forward(x.data(), k.data(), b.as_ref().map(|b| b.data()), &geom);
        let shape = vec![geom.batch, geom.cout, geom.out_h(), geom.out_w()];
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        Ok(self.tape.custom(
            &parents,
            Tensor::from_parts(shape, y),
            Box::new(move |g, need| {
                let want = [need[0], need[1], need.get(2).copied().unwrap_or(false)];
                let gr = kernels::conv2d_backward(x.data(), k.data(), g.data(), &geom, want);
                let mut out = vec![
                    gr.dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                    gr.dk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
                ];
                if need.len() == 3 {
                    out.push(gr.dbias.map(|d| Tensor::from_parts(vec![geom.cout], d)));
                }
                out
            }),
        ))
    }

    /// Normalizes over the last axis with the biased variance estimator.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&1);
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(Error::dim(
                "layer_norm",
                "last",
                c,
                format!("{:?}/{:?}", gm.shape(), bt.shape()),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (y, xhat, rstd) = kernels::layer_norm_forward(x.data(), gm.data(), bt.data(), c, eps);
        let shape = x.shape().to_vec();
        Ok(self.tape.custom(
            &[self, gamma, beta],
            Tensor::from_parts(shape.clone(), y),
            Box::new(move |g, _| {
                let (dx, dg, db) =
                    kernels::layer_norm_backward(g.data(), &xhat, &rstd, gm.data(), c);
                vec![
                    Some(Tensor::from_parts(shape.clone(), dx)),
                    Some(Tensor::from_parts(vec![c], dg)),
                    Some(Tensor::from_parts(vec![c], db)),
                ]
            }),
        ))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                "axis",
                format!("< {}", shape.len()),
                axis,
            ));
        }
        let y = self.with_value(|x| kernels::softmax_forward(x.data(), &shape, axis));
        let y = Rc::new(Tensor::from_parts(shape.clone(), y));
        let yc = y.clone();
        Ok(self.unary(
            (*y).clone(),
            Box::new(move |g, _| {
                vec![Some(Tensor::from_parts(
                    shape.clone(),
                    kernels::softmax_backward(yc.data(), g.data(), &shape, axis),
                ))]
            }),
        ))
    }

    /// Diagonal selective scan (see [`kernels::selective_scan_forward`]).
    pub fn selective_scan(
        self,
        delta: Var<'t>,
        a: Var<'t>,
        b: Var<'t>,
        c: Var<'t>,
        skip: Var<'t>,
    ) -> Result<Var<'t>> {
        let (x, dl, av, bv, cv, sv) = (
            self.value(),
            delta.value(),
            a.value(),
            b.value(),
            c.value(),
            skip.value(),
        );
        if x.rank() != 2 {
            return Err(Error::dim("selective_scan", "rank(x)", 2, x.rank()));
        }
        let (l, d) = (x.shape()[0], x.shape()[1]);
        if av.rank() != 2 || av.shape()[0] != d {
            return Err(Error::dim(
                "selective_scan",
                "A",
                format!("[{d}, N]"),
                format!("{:?}", av.shape()),
            ));
        }
        let n = av.shape()[1];
        if dl.shape() != [l, d] {
            return Err(Error::dim(
                "selective_scan",
                "delta",
                format!("[{l}, {d}]"),
                format!("{:?}", dl.shape()),
            ));
        }
        for (name, t) in [("B", &bv), ("C", &cv)] {
            if t.shape() != [l, n] {
                return Err(Error::dim(
                    "selective_scan",
                    name,
                    format!("[{l}, {n}]"),
                    format!("{:?}", t.shape()),
                ));
            }
        }
        if sv.shape() != [d] {
            return Err(Error::dim(
                "selective_scan",
                "D_skip",
                d,
                format!("{:?}", sv.shape()),
            ));
        }
        for (name, t) in [
            ("x", &x),
            ("delta", &dl),
            ("A", &av),
            ("B", &bv),
            ("C", &cv),
            ("D_skip", &sv),
        ] {
            if !t.all_finite() {
                return Err(Error::Numeric(format!("selective_scan: non-finite {name}")));
            }
        }
        self.tape.count_macs(3 * (l * d * n) as u64);
        let fwd = kernels::selective_scan_forward(
            x.data(),
            dl.data(),
            av.data(),
            bv.data(),
            cv.data(),
            sv.data(),
            l,
            d,
            n,
        );
        let states = fwd.states;
        Ok(self.tape.custom(
            &[self, delta, a, b, c, skip],
            Tensor::from_parts(vec![l, d], fwd.y),
            Box::new(move |g, _| {
                let gr = kernels::selective_scan_backward(
                    x.data(),
                    dl.data(),
                    av.data(),
                    bv.data(),
                    cv.data(),
                    sv.data(),
                    &states,
                    g.data(),
                    l,
                    d,
                    n,
                );
                vec![
                    Some(Tensor::from_parts(vec![l, d], gr.dx)),
                    Some(Tensor::from_parts(vec![l, d], gr.ddelta)),
                    Some(Tensor::from_parts(vec![d, n], gr.da)),
                    Some(Tensor::from_parts(vec![l, n], gr.db)),
                    Some(Tensor::from_parts(vec![l, n], gr.dc)),
                    Some(Tensor::from_parts(vec![d], gr.dskip)),
                ]
            }),
        ))
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        x.sum().backward().unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        x.mul(x).unwrap().sum().backward().unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let f = x.scale(3.0).sum();
        f.backward().unwrap();
        f.backward().unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 6.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(x.exp().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[5.0, 7.0]));
        x.mul(c).unwrap().sum().backward().unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 7.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn silu_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 20.0, 1.0]));
        let y = x.silu().value();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 20.0).abs() < 1e-7);
        assert!((y.data()[2] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
        assert!((y.data()[2] - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn softmax_values() {
        let tape = Tape::new();
        let cases: [(&[f64], &[f64]); 3] = [
            (&[0.0, 0.0, 0.0], &[1.0 / 3.0; 3]),
            (&[0.0, std::f64::consts::LN_2], &[1.0 / 3.0, 2.0 / 3.0]),
            (&[1000.0, 1000.0], &[0.5, 0.5]),
        ];
        for (x, want) in cases {
            let y = tape.constant(t(&[x.len()], x)).softmax(0).unwrap().value();
            for (a, b) in y.data().iter().zip(want) {
                assert!((a - b).abs() < 1e-15, "{x:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_hand_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]));
        let b = tape.constant(t(&[2], &[1.0, 0.0]));
        assert_eq!(x.linear(w, Some(b)).unwrap().value().data(), &[3.0, 0.0]);
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let z = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(x.linear(eye, Some(z)).unwrap().value().data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_axis_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(x.linear(w, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_trivial_cases() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        assert_eq!(
            x.conv2d(k, None, 1, 0, 1).unwrap().value().data(),
            &[1.0, 2.0, 3.0, 4.0]
        );
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(k, None, 1, 0, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_errors_name_the_axis() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[3, 3, 3, 3]));
        let err = x.conv2d(k, None, 1, 0, 3).unwrap_err().to_string();
        assert!(err.contains("Cin/groups"), "{err}");
        let k = tape.constant(Tensor::zeros(&[2, 3, 7, 3]));
        let err = x.conv2d(k, None, 1, 1, 1).unwrap_err().to_string();
        assert!(err.contains("axis H"), "{err}");
    }

    #[test]
    fn layer_norm_trivial() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape
            .constant(t(&[3], &[5.0, 5.0, 5.0]))
            .layer_norm(g, b, 1e-5)
            .unwrap()
            .value();
        assert_eq!(y.data(), &[0.0; 3]);
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape
            .constant(t(&[2], &[-1.0, 1.0]))
            .layer_norm(g, b, 1e-14)
            .unwrap()
            .value();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permute_roundtrip_and_narrow() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        assert_eq!(p.value().at(&[3, 1, 2]), x.value().at(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(*back.value(), *x.value());
        let n = x.narrow(2, 1, 2).unwrap().value();
        assert_eq!(n.shape(), &[2, 3, 2]);
        assert_eq!(n.at(&[1, 2, 1]), x.value().at(&[1, 2, 2]));
    }
}

//! Append-only gradient tape.
//!
//! Nodes are recorded in execution order, so every node's inputs precede it and a
//! single reverse sweep visits each node exactly once. A tape is consumed by
//! [`Tape::backward`]; build a fresh tape for every forward pass.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Float, Result, Tensor, TensorError};

enum Op<F> {
    Leaf,
    Conv2d {
        x: usize,
        k: usize,
        b: usize,
        geom: ConvGeom,
    },
    Gelu(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Concat {
        a: usize,
        b: usize,
        batch: usize,
        ca: usize,
        cb: usize,
        plane: usize,
    },
    SliceChannels {
        x: usize,
        start: usize,
        batch: usize,
        c: usize,
        len: usize,
        plane: usize,
    },
    Down2 {
        x: usize,
        planes: usize,
        h: usize,
        w: usize,
    },
    Up2 {
        x: usize,
        planes: usize,
        h: usize,
        w: usize,
    },
    MeanOverSet {
        x: usize,
        n: usize,
    },
    RepeatSet {
        x: usize,
        n: usize,
    },
    Reshape(usize),
    Sum(usize),
    SoftDice {
        pred: usize,
        target: Rc<Tensor<F>>,
        eps: F,
    },
    WeightedMse {
        pred: usize,
        target: Rc<Tensor<F>>,
        sigma2: F,
    },
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward computation for one reverse sweep.
pub struct Tape<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
    consumed: Cell<bool>,
    macs: Cell<u64>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Float> {
    tape: &'t Tape<F>,
    id: usize,
}

/// Accumulated gradients, indexed by the tape node they belong to.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of the loss with respect to the leaf `var`, if it required one and was reached.
    pub fn wrt(&self, var: &Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(TensorError::Shape { op, detail })
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            macs: Cell::new(0),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulates performed by convolutions recorded so far.
    pub fn conv_macs(&self) -> u64 {
        self.macs.get()
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a 0-dim `loss`; consumes the tape.
    pub fn backward(&self, loss: &Var<'_, F>) -> Result<Gradients<F>> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.rank() != 0 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(F::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            // Intermediate gradients are dropped as soon as they have been propagated.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Float>(
    grads: &mut [Option<Tensor<F>>],
    nodes: &[Node<F>],
    id: usize,
    g: Tensor<F>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop<F: Float>(
    nodes: &[Node<F>],
    node: &Node<F>,
    g: &Tensor<F>,
    grads: &mut [Option<Tensor<F>>],
) {
    let val = |id: usize| -> &Tensor<F> { &nodes[id].value };
    let like =
        |id: usize, data: Vec<F>| Tensor::new(val(id).shape().to_vec(), data).expect("grad shape");
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, k, b, geom } => {
            let want = (
                nodes[*x].requires_grad,
                nodes[*k].requires_grad,
                nodes[*b].requires_grad,
            );
            let cg = kernels::conv2d_backward(geom, val(*x).data(), val(*k).data(), g.data(), want);
            if let Some(d) = cg.input {
                accumulate(grads, nodes, *x, like(*x, d));
            }
            if let Some(d) = cg.kernel {
                accumulate(grads, nodes, *k, like(*k, d));
            }
            if let Some(d) = cg.bias {
                accumulate(grads, nodes, *b, like(*b, d));
            }
        }
        Op::Gelu(x) => {
            let d = val(*x)
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| kernels::gelu_grad(v) * gv)
                .collect();
            accumulate(grads, nodes, *x, like(*x, d));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let da = g
                .data()
                .iter()
                .zip(val(*b).data())
                .map(|(&gv, &bv)| gv * bv)
                .collect();
            let db = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(&gv, &av)| gv * av)
                .collect();
            accumulate(grads, nodes, *a, like(*a, da));
            accumulate(grads, nodes, *b, like(*b, db));
        }
        Op::Scale(x, s) => {
            let s = *s;
            accumulate(grads, nodes, *x, g.map(|v| v * s));
        }
        Op::Concat {
            a,
            b,
            batch,
            ca,
            cb,
            plane,
        } => {
            let (la, lb) = (ca * plane, cb * plane);
            let mut da = Vec::with_capacity(batch * la);
            let mut db = Vec::with_capacity(batch * lb);
            for chunk in g.data().chunks(la + lb) {
                da.extend_from_slice(&chunk[..la]);
                db.extend_from_slice(&chunk[la..]);
            }
            accumulate(grads, nodes, *a, like(*a, da));
            accumulate(grads, nodes, *b, like(*b, db));
        }
        Op::SliceChannels {
            x,
            start,
            batch,
            c,
            len,
            plane,
        } => {
            let mut dx = vec![F::zero(); batch * c * plane];
            for bi in 0..*batch {
                let dst = (bi * c + start) * plane;
                let src = bi * len * plane;
                dx[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
            }
            accumulate(grads, nodes, *x, like(*x, dx));
        }
        Op::Down2 { x, planes, h, w } => {
            accumulate(
                grads,
                nodes,
                *x,
                like(*x, kernels::down2_backward(g.data(), *planes, *h, *w)),
            );
        }
        Op::Up2 { x, planes, h, w } => {
            accumulate(
                grads,
                nodes,
                *x,
                like(*x, kernels::up2_backward(g.data(), *planes, *h, *w)),
            );
        }
        Op::MeanOverSet { x, n } => {
            let inv = F::one() / F::c(*n as f64);
            let mut dx = Vec::with_capacity(g.numel() * n);
            for _ in 0..*n {
                dx.extend(g.data().iter().map(|&v| v * inv));
            }
            accumulate(grads, nodes, *x, like(*x, dx));
        }
        Op::RepeatSet { x, n } => {
            let len = val(*x).numel();
            let mut dx = vec![F::zero(); len];
            for chunk in g.data().chunks(len).take(*n) {
                for (d, &v) in dx.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            accumulate(grads, nodes, *x, like(*x, dx));
        }
        Op::Reshape(x) => {
            accumulate(grads, nodes, *x, like(*x, g.data().to_vec()));
        }
        Op::Sum(x) => {
            let s = g.item();
            accumulate(grads, nodes, *x, Tensor::full(val(*x).shape().to_vec(), s));
        }
        Op::SoftDice { pred, target, eps } => {
            let z = val(*pred);
            let batch = z.shape()[0];
            let per = z.numel() / batch;
            let scale = g.item() / F::c(batch as f64);
            let two = F::c(2.0);
            let mut dz = Vec::with_capacity(z.numel());
            for (zb, tb) in z.data().chunks(per).zip(target.data().chunks(per)) {
                let p: Vec<F> = zb.iter().map(|&v| sigmoid(v)).collect();
                let inter: F = p.iter().zip(tb).map(|(&pv, &tv)| pv * tv).sum();
                let denom = p.iter().copied().sum::<F>() + tb.iter().copied().sum::<F>() + *eps;
                let num = two * inter + *eps;
                for (&pv, &tv) in p.iter().zip(tb) {
                    let dl_dp = -(two * tv * denom - num) / (denom * denom);
                    dz.push(scale * dl_dp * pv * (F::one() - pv));
                }
            }
            accumulate(grads, nodes, *pred, like(*pred, dz));
        }
        Op::WeightedMse {
            pred,
            target,
            sigma2,
        } => {
            let y = val(*pred);
            let batch = y.shape()[0];
            let scale = g.item() / (F::c(batch as f64) * *sigma2);
            let d = y
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| scale * (p - t))
                .collect();
            accumulate(grads, nodes, *pred, like(*pred, d));
        }
    }
}

pub(crate) fn sigmoid<F: Float>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

impl<'t, F: Float> Var<'t, F> {
    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(&self, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        let rg = self.tape.needs(self.id);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t, F>, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        let rg = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(value, op, rg)
    }

    /// Same-padded cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]` plus bias.
    pub fn conv2d(&self, kernel: &Var<'t, F>, bias: &Var<'t, F>, pad: usize) -> Result<Var<'t, F>> {
        let (x, k, b) = (self.value(), kernel.value(), bias.value());
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return shape_err(
                "conv2d",
                format!("input {xs:?}, kernel {ks:?}: both must be rank 4"),
            );
        }
        if xs[1] != ks[1] {
            return shape_err(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
            );
        }
        if b.shape() != [ks[0]] {
            return shape_err(
                "conv2d",
                format!("bias {:?} for {} output channels", b.shape(), ks[0]),
            );
        }
        if xs[2] == 0 || xs[3] == 0 || xs[2] + 2 * pad < ks[2] || xs[3] + 2 * pad < ks[3] {
            return Err(TensorError::Invalid {
                op: "conv2d",
                detail: format!(
                    "non-positive output extent for input {xs:?}, kernel {ks:?}, pad {pad}"
                ),
            });
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            pad,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), k.data(), b.data());
        self.tape.macs.set(self.tape.macs.get() + geom.macs());
        let value = Tensor::new(vec![geom.batch, geom.cout, geom.out_h(), geom.out_w()], out)?;
        let rg = self.tape.needs(self.id) || self.tape.needs(kernel.id) || self.tape.needs(bias.id);
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                b: bias.id,
                geom,
            },
            rg,
        ))
    }

    pub fn gelu(&self) -> Var<'t, F> {
        let v = self.value().map(kernels::gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    fn zip_with(
        &self,
        other: &Var<'t, F>,
        op: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: F) -> Var<'t, F> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    /// Channel concatenation of `[B, Ca, ...]` and `[B, Cb, ...]`; `self` comes first.
    pub fn concat_channels(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return shape_err("concat_channels", format!("{sa:?} vs {sb:?}"));
        }
        let (batch, ca, cb) = (sa[0], sa[1], sb[1]);
        let plane: usize = sa[2..].iter().product();
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for bi in 0..batch {
            data.extend_from_slice(&a.data()[bi * ca * plane..(bi + 1) * ca * plane]);
            data.extend_from_slice(&b.data()[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let value = Tensor::new(shape, data)?;
        Ok(self.binary(
            other,
            value,
            Op::Concat {
                a: self.id,
                b: other.id,
                batch,
                ca,
                cb,
                plane,
            },
        ))
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        let value = x.slice_channels(start, len)?;
        let (batch, c) = (x.shape()[0], x.shape()[1]);
        let plane: usize = x.shape()[2..].iter().product();
        Ok(self.unary(
            value,
            Op::SliceChannels {
                x: self.id,
                start,
                batch,
                c,
                len,
                plane,
            },
        ))
    }

    fn spatial(&self, op: &'static str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = self.shape();
        if shape.len() < 2 {
            return shape_err(op, format!("need at least 2 spatial axes, got {shape:?}"));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = shape[..r - 2].iter().product();
        Ok((planes, h, w, shape))
    }

    /// 2x2 average pooling over the trailing two axes.
    pub fn down2(&self) -> Result<Var<'t, F>> {
        let (planes, h, w, mut shape) = self.spatial("down2")?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(TensorError::Invalid {
                op: "down2",
                detail: format!("odd or empty extent {h}x{w}"),
            });
        }
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let value = Tensor::new(shape, kernels::down2(self.value().data(), planes, h, w))?;
        Ok(self.unary(
            value,
            Op::Down2 {
                x: self.id,
                planes,
                h,
                w,
            },
        ))
    }

    /// Nearest-neighbour x2 upsampling over the trailing two axes.
    pub fn up2(&self) -> Result<Var<'t, F>> {
        let (planes, h, w, mut shape) = self.spatial("up2")?;
        let r = shape.len();
        shape[r - 2] = h * 2;
        shape[r - 1] = w * 2;
        let value = Tensor::new(shape, kernels::up2(self.value().data(), planes, h, w))?;
        Ok(self.unary(
            value,
            Op::Up2 {
                x: self.id,
                planes,
                h,
                w,
            },
        ))
    }

    /// Arithmetic mean along the leading (set) axis: `[N, ...] -> [...]`.
    pub fn mean_over_set(&self) -> Result<Var<'t, F>> {
        let x = self.value();
        let n = match x.shape().first() {
            Some(&n) if n > 0 => n,
            _ => {
                return Err(TensorError::Invalid {
                    op: "mean_over_set",
                    detail: format!("empty set axis in {:?}", x.shape()),
                })
            }
        };
        let len = x.numel() / n;
        let mut acc = vec![F::zero(); len];
        for chunk in x.data().chunks(len) {
            for (a, &v) in acc.iter_mut().zip(chunk) {
                *a += v;
            }
        }
        let inv = F::one() / F::c(n as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        let value = Tensor::new(x.shape()[1..].to_vec(), acc)?;
        Ok(self.unary(value, Op::MeanOverSet { x: self.id, n }))
    }

    /// Broadcast along a new leading set axis: `[...] -> [n, ...]`.
    pub fn repeat_set(&self, n: usize) -> Result<Var<'t, F>> {
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "repeat_set",
                detail: "n = 0".into(),
            });
        }
        let x = self.value();
        let mut data = Vec::with_capacity(x.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        let value = Tensor::new(shape, data)?;
        Ok(self.unary(value, Op::RepeatSet { x: self.id, n }))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t, F>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Sum of all elements as a 0-dim tensor.
    pub fn sum(&self) -> Var<'t, F> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Batch-mean soft Dice loss on logits: `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`, `p = sigmoid(logits)`.
    pub fn soft_dice_loss(&self, target: &Tensor<F>, eps: F) -> Result<Var<'t, F>> {
        let z = self.value();
        if z.shape() != target.shape() || z.rank() == 0 {
            return shape_err(
                "soft_dice_loss",
                format!("{:?} vs {:?}", z.shape(), target.shape()),
            );
        }
        if target
            .data()
            .iter()
            .any(|&t| t != F::zero() && t != F::one())
        {
            return Err(TensorError::Invalid {
                op: "soft_dice_loss",
                detail: "target is not binary".into(),
            });
        }
        let batch = z.shape()[0];
        let per = z.numel() / batch;
        let two = F::c(2.0);
        let mut total = F::zero();
        for (zb, tb) in z.data().chunks(per).zip(target.data().chunks(per)) {
            let mut inter = F::zero();
            let mut sp = F::zero();
            let mut st = F::zero();
            for (&zv, &tv) in zb.iter().zip(tb) {
                let p = sigmoid(zv);
                inter += p * tv;
                sp += p;
                st += tv;
            }
            total += F::one() - (two * inter + eps) / (sp + st + eps);
        }
        let value = Tensor::scalar(total / F::c(batch as f64));
        let op = Op::SoftDice {
            pred: self.id,
            target: Rc::new(target.clone()),
            eps,
        };
        Ok(self.unary(value, op))
    }

    /// Batch-mean of `(1 / 2 sigma2) * sum_p (y_p - yhat_p)^2`.
    pub fn weighted_mse_loss(&self, target: &Tensor<F>, sigma2: F) -> Result<Var<'t, F>> {
        let y = self.value();
        if y.shape() != target.shape() || y.rank() == 0 {
            return shape_err(
                "weighted_mse_loss",
                format!("{:?} vs {:?}", y.shape(), target.shape()),
            );
        }
        if sigma2 <= F::zero() {
            return Err(TensorError::Invalid {
                op: "weighted_mse_loss",
                detail: "sigma2 must be positive".into(),
            });
        }
        let batch = y.shape()[0];
        let sq: F = y
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(sq / (F::c(2.0) * sigma2 * F::c(batch as f64)));
        let op = Op::WeightedMse {
            pred: self.id,
            target: Rc::new(target.clone()),
            sigma2,
        };
        Ok(self.unary(value, op))
    }
}

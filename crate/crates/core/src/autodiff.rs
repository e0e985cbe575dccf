//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] records every op in execution order, so the node list is
//! already topologically sorted; [`Tape::backward`] walks it in reverse and
//! applies one hand-written adjoint per op. Recurrent kernels plug in as
//! [`CustomOp`]s that carry their own adjoint.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{cross_entropy, BinaryOp, Broadcast, Tensor, UnaryOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Slot of a trainable tensor in gradient and optimizer stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor together with its stable id.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub id: ParamId,
    pub value: Tensor<F>,
}

impl<F> std::ops::Deref for Param<F> {
    type Target = Tensor<F>;
    fn deref(&self) -> &Tensor<F> {
        &self.value
    }
}

/// Hands out parameter ids in creation order and remembers names.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ParamRegistry {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F: Scalar>(&mut self, name: impl Into<String>, value: Tensor<F>) -> Param<F> {
        let id = ParamId(self.names.len());
        self.names.push(name.into());
        self.shapes.push(value.shape().to_vec());
        Param { id, value }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }
}

/// Structures that own trainable tensors, visited in a fixed order.
pub trait HasParams<F: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }
}

/// Accumulated parameter gradients, one tensor per [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore<F> {
    grads: Vec<Tensor<F>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn zeros(shapes: &[Vec<usize>]) -> Self {
        GradStore {
            grads: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(F::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.grads[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.grads
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.grads
    }

    /// `self += scale · other`, slot by slot.
    pub fn add_scaled(&mut self, other: &GradStore<F>, scale: F) {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            for (a, &b) in g.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// An op with a hand-written adjoint, recorded on the tape as one node.
pub trait CustomOp<F: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Compute the output. May stash whatever the adjoint needs.
    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Tensor<F>>;

    /// Vector-Jacobian product: one gradient per input, in input order.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_output: &Tensor<F>,
    ) -> Result<Vec<Tensor<F>>>;
}

enum Op<F: Scalar> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Binary {
        op: BinaryOp,
        a: NodeId,
        b: NodeId,
        bc: Broadcast,
    },
    Unary {
        op: UnaryOp,
        x: NodeId,
    },
    Outer(NodeId, NodeId),
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        eps: F,
    },
    Conv1d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<F>,
        probs: Vec<F>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Sum(NodeId),
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Recorded computation. Inputs of every node precede it.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[NodeId]) -> NodeId {
        if cfg!(debug_assertions) && !inputs.is_empty() && inputs.iter().all(|&i| self.nodes[i.0].value.all_finite()) {
            debug_assert!(value.all_finite(), "non-finite output from finite inputs");
        }
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Input, &[])
    }

    pub fn param(&mut self, p: &Param<F>) -> NodeId {
        self.push(p.value.clone(), Op::Param(p.id), &[])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`, for weights stored `[out×in]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bc = self.value(a).broadcast_kind(self.value(b), "elementwise")?;
        let v = self.value(a).binary(op, self.value(b))?;
        Ok(self.push(v, Op::Binary { op, a, b, bc }, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: NodeId) -> NodeId {
        let v = self.value(x).unary(op);
        self.push(v, Op::Unary { op, x }, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::Silu, x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryOp::Square, x)
    }

    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let val = Tensor::outer(self.value(u), self.value(v))?;
        Ok(self.push(val, Op::Outer(u, v), &[u, v]))
    }

    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId, eps: F) -> Result<NodeId> {
        if eps <= F::zero() {
            return Err(Error::InvalidArgument("rmsnorm eps must be > 0".into()));
        }
        let v = self.value(x).rmsnorm(self.value(gain), eps)?;
        Ok(self.push(v, Op::RmsNorm { x, gain, eps }, &[x, gain]))
    }

    pub fn causal_conv1d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self
            .value(x)
            .causal_conv1d(self.value(kernel), self.value(bias))?;
        Ok(self.push(v, Op::Conv1d { x, kernel, bias }, &[x, kernel, bias]))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[F]) -> Result<NodeId> {
        let (loss, probs) = cross_entropy(self.value(logits), targets, mask)?;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Gather rows of `table [V×d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(dim_err("embedding", "table must be [V×d]"));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidArgument(format!("token id {id} outside vocab {v}")));
            }
            out.extend_from_slice(t.row(id));
        }
        let val = Tensor::new(vec![ids.len(), d], out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(val, op, &[table]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn custom(&mut self, inputs: &[NodeId], mut op: Box<dyn CustomOp<F>>) -> Result<NodeId> {
        let vals: Vec<&Tensor<F>> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = op.forward(&vals)?;
        let node_op = Op::Custom {
            inputs: inputs.to_vec(),
            op,
        };
        Ok(self.push(v, node_op, inputs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(dim_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.backward_seeded(loss, Tensor::full(self.value(loss).shape(), F::one()))
    }

    /// Reverse sweep from any node, given `∂L/∂output`.
    pub fn backward_seeded(&self, output: NodeId, seed: Tensor<F>) -> Result<Gradients<F>> {
        if seed.shape() != self.value(output).shape() {
            return Err(dim_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let loss = output;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((NodeId(i), p)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Backward and accumulate parameter gradients into `store`.
    pub fn backward_into(&self, loss: NodeId, store: &mut GradStore<F>) -> Result<()> {
        self.backward(loss)?.accumulate_params(store);
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(self.value(*b))?;
                let db = self.value(*a).matmul_tn(g)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                let da = g.matmul(self.value(*b))?;
                let db = g.matmul_tn(self.value(*a))?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Binary { op, a, b, bc } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (da, db_full) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryOp::Mul => {
                        let da = g.binary(BinaryOp::Mul, bv)?;
                        let db = g.binary(BinaryOp::Mul, av)?;
                        (da, db)
                    }
                };
                let db = reduce_broadcast(db_full, *bc, bv.shape());
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Unary { op, x } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for ((d, &z), &y) in dx.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                    *d *= op.derivative(z, y);
                }
                accumulate(grads, *x, dx);
            }
            Op::Outer(u, v) => {
                let uv = self.value(*u);
                let vv = self.value(*v);
                let m = vv.len();
                let mut du = vec![F::zero(); uv.len()];
                let mut dv = vec![F::zero(); m];
                for (i, dui) in du.iter_mut().enumerate() {
                    let row = g.row(i);
                    for j in 0..m {
                        *dui += row[j] * vv.data()[j];
                        dv[j] += row[j] * uv.data()[i];
                    }
                }
                accumulate(grads, *u, Tensor::vector(du));
                accumulate(grads, *v, Tensor::vector(dv));
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.cols();
                let df = F::lit(d as f64);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = vec![F::zero(); d];
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let ms = xr.iter().fold(F::zero(), |a, &v| a + v * v) / df;
                    let inv = F::one() / (ms + *eps).sqrt();
                    let mut dot = F::zero();
                    for i in 0..d {
                        dgain[i] += gr[i] * xr[i] * inv;
                        dot += gr[i] * gv.data()[i] * xr[i];
                    }
                    let coef = inv * inv * inv * dot / df;
                    let dxr = dx.row_mut(r);
                    for i in 0..d {
                        dxr[i] = inv * gr[i] * gv.data()[i] - coef * xr[i];
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, Tensor::vector(dgain));
            }
            Op::Conv1d { x, kernel, bias } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let (t_len, d) = (xv.rows(), xv.cols());
                let w = kv.rows();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut db = vec![F::zero(); d];
                for t in 0..t_len {
                    let gr = g.row(t);
                    for (c, dbc) in db.iter_mut().enumerate() {
                        *dbc += gr[c];
                    }
                    for s in 0..w {
                        if t + s + 1 < w {
                            continue;
                        }
                        let src = t + s + 1 - w;
                        for c in 0..d {
                            dx.data_mut()[src * d + c] += gr[c] * kv.at(s, c);
                            dk.data_mut()[s * d + c] += gr[c] * xv.at(src, c);
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *kernel, dk);
                accumulate(grads, *bias, Tensor::vector(db));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let lv = self.value(*logits);
                let v = lv.cols();
                let weight = mask.iter().fold(F::zero(), |a, &m| a + m);
                let up = g.data()[0];
                let mut dl = Tensor::zeros(lv.shape());
                for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
                    if m == F::zero() {
                        continue;
                    }
                    let s = up * m / weight;
                    let row = dl.row_mut(t);
                    for j in 0..v {
                        row[j] = s * probs[t * v + j];
                    }
                    row[y] -= s;
                }
                accumulate(grads, *logits, dl);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Tensor::zeros(tv.shape());
                for (t, &id) in ids.iter().enumerate() {
                    let gr = g.row(t);
                    for (a, &b) in dt.row_mut(id).iter_mut().zip(gr) {
                        *a += b;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Sum(x) => {
                let up = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), up));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<F>> = inputs.iter().map(|&i| self.value(i)).collect();
                let dins = op.backward(&vals, &node.value, g)?;
                if dins.len() != inputs.len() {
                    return Err(dim_err(
                        "custom backward",
                        format!("{} returned {} grads for {} inputs", op.name(), dins.len(), inputs.len()),
                    ));
                }
                for (&i, d) in inputs.iter().zip(dins) {
                    accumulate(grads, i, d);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_broadcast<F: Scalar>(g: Tensor<F>, bc: Broadcast, shape: &[usize]) -> Tensor<F> {
    match bc {
        Broadcast::Same => g,
        Broadcast::Scalar => Tensor::full(shape, g.sum()),
        Broadcast::Row => {
            let c = shape.iter().product::<usize>();
            let mut out = vec![F::zero(); c];
            for (i, &v) in g.data().iter().enumerate() {
                out[i % c] += v;
            }
            Tensor::new(shape.to_vec(), out).expect("row broadcast shape")
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(NodeId, ParamId)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to a node, if the node influenced it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate_params(&self, store: &mut GradStore<F>) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node.0] {
                store.get_mut(pid).add_assign(g);
            }
        }
    }
}

//! Reverse-mode automatic differentiation over an append-only operation tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. Nodes are
//! appended in evaluation order, so walking the arena backwards visits them in
//! reverse topological order. A tape belongs to a single thread.

use std::cell::RefCell;
use std::rc::Rc;

use super::{ContractSpec, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Contract { a: usize, b: usize, spec: Rc<ContractSpec> },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Relu { a: usize },
    Log { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    GatherRows { table: usize, rows: Vec<Option<usize>> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Sum { a: usize },
    Pick { a: usize, indices: Vec<usize> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar loss with respect to the leaves that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[var.0].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    pub fn contract(&self, spec: &str, a: Var, b: Var) -> Result<Var> {
        self.contract_with(Rc::new(ContractSpec::parse(spec)?), a, b)
    }

    pub fn contract_with(&self, spec: Rc<ContractSpec>, a: Var, b: Var) -> Result<Var> {
        let value = spec.apply(&self.value(a), &self.value(b))?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Contract { a: a.0, b: b.0, spec }, rg))
    }

    /// `a + b` where `b` broadcasts against the trailing axes of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).broadcast_add(&self.value(b))?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// `a * b` where `b` broadcasts against the trailing axes of `a`.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).broadcast_mul(&self.value(b))?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale { a: a.0, factor }, self.needs_grad(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu { a: a.0 }, self.needs_grad(&[a]))
    }

    pub fn log(&self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log { a: a.0 }, self.needs_grad(&[a]))
    }

    pub fn softmax_last(&self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_last()?;
        Ok(self.push(value, Op::Softmax { a: a.0 }, self.needs_grad(&[a])))
    }

    pub fn log_softmax_last(&self, a: Var) -> Result<Var> {
        let value = self.value(a).log_softmax_last()?;
        Ok(self.push(value, Op::LogSoftmax { a: a.0 }, self.needs_grad(&[a])))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != [n] || b.shape() != [n] {
            return Err(Error::Shape(format!(
                "layer norm over {n} features with gain {:?} and bias {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let (mean, rstd) = row_stats(row, eps);
            data.extend(row.iter().enumerate().map(|(i, v)| (v - mean) * rstd * g.data()[i] + b.data()[i]));
        }
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.needs_grad(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps }, rg))
    }

    /// Selects rows of a 2-D table; `None` yields a row of zeros.
    pub fn gather_rows(&self, table: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("gather from table of shape {:?}", t.shape())));
        }
        let (n, width) = (t.shape()[0], t.shape()[1]);
        if rows.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in &rows {
            match *r {
                Some(i) if i < n => data.extend_from_slice(&t.data()[i * width..(i + 1) * width]),
                Some(i) => return Err(Error::Shape(format!("row {i} out of range for {n} rows"))),
                None => data.extend(std::iter::repeat(0.0).take(width)),
            }
        }
        let value = Tensor::new(&[rows.len(), width], data)?;
        Ok(self.push(value, Op::GatherRows { table: table.0, rows }, self.needs_grad(&[table])))
    }

    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids.iter().map(|&i| Some(i)).collect())
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat(&refs, axis)?;
        let rg = self.needs_grad(parts);
        Ok(self.push(value, Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis }, rg))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_axis(axis, start, len)?;
        Ok(self.push(value, Op::Slice { a: a.0, axis, start }, self.needs_grad(&[a])))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a: a.0 }, self.needs_grad(&[a])))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        Ok(self.push(value, Op::Permute { a: a.0, axes: axes.to_vec() }, self.needs_grad(&[a])))
    }

    /// Sum of all entries, as a shape-`[1]` scalar.
    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum { a: a.0 }, self.needs_grad(&[a]))
    }

    /// Picks one entry per row along the last axis: `out[r] = a[r, indices[r]]`.
    pub fn pick(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let n = *av.shape().last().unwrap();
        let rows = av.len() / n;
        if indices.len() != rows || indices.iter().any(|&i| i >= n) {
            return Err(Error::Shape(format!(
                "pick of {} indices from {rows} rows of width {n}",
                indices.len()
            )));
        }
        let data = indices.iter().enumerate().map(|(r, &i)| av.data()[r * n + i]).collect();
        let value = Tensor::new(&[rows], data)?;
        Ok(self.push(value, Op::Pick { a: a.0, indices: indices.to_vec() }, self.needs_grad(&[a])))
    }

    /// Negative log-likelihood summed over rows of a log-probability matrix.
    pub fn nll(&self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let picked = self.pick(log_probs, targets)?;
        Ok(self.scale(self.sum(picked), -1.0))
    }

    /// Backpropagates from a scalar `loss`, returning leaf gradients and
    /// clearing the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let loss_value = &nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (parent, pg) in local_grads(&nodes, i, &g)? {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        *acc = acc.zip_map(&pg, |x, y| x + y)?;
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Vector-Jacobian products of node `i` for upstream gradient `g`.
fn local_grads(nodes: &[Node], i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let node = &nodes[i];
    let val = |j: usize| nodes[j].value.as_ref();
    let out = match &node.op {
        Op::Leaf => vec![],
        Op::Contract { a, b, spec } => {
            let mut v = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                v.push((*a, spec.grad_a().apply(g, val(*b))?));
            }
            if nodes[*b].requires_grad {
                v.push((*b, spec.grad_b().apply(g, val(*a))?));
            }
            v
        }
        Op::Add { a, b } => {
            let mut v = vec![(*a, g.clone())];
            if nodes[*b].requires_grad {
                v.push((*b, g.reduce_to(val(*b).shape())?));
            }
            v
        }
        Op::Mul { a, b } => {
            let mut v = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                v.push((*a, g.broadcast_mul(val(*b))?));
            }
            if nodes[*b].requires_grad {
                let full = g.zip_map(val(*a), |x, y| x * y)?;
                v.push((*b, full.reduce_to(val(*b).shape())?));
            }
            v
        }
        Op::Scale { a, factor } => vec![(*a, g.map(|x| x * factor))],
        Op::Relu { a } => vec![(*a, g.zip_map(val(*a), |gx, x| if x > 0.0 { gx } else { 0.0 })?)],
        Op::Log { a } => vec![(*a, g.zip_map(val(*a), |gx, x| gx / x)?)],
        Op::Softmax { a } => {
            // fully masked rows have y == 0 and therefore a zero Jacobian
            let y = node.value.as_ref();
            let n = *y.shape().last().unwrap();
            let mut data = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                data.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
            }
            vec![(*a, Tensor::new(y.shape(), data)?)]
        }
        Op::LogSoftmax { a } => {
            let y = node.value.as_ref();
            let n = *y.shape().last().unwrap();
            let mut data = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                let total: f64 = gr.iter().sum();
                data.extend(yr.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * total));
            }
            vec![(*a, Tensor::new(y.shape(), data)?)]
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = val(*x);
            let gv = val(*gain).data();
            let n = gv.len();
            let mut dx = Vec::with_capacity(xv.len());
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            for (row, grow) in xv.data().chunks(n).zip(g.data().chunks(n)) {
                let (mean, rstd) = row_stats(row, *eps);
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                let dxhat: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                let m1 = dxhat.iter().sum::<f64>() / n as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    dx.push(rstd * (dxhat[j] - m1 - xhat[j] * m2));
                    dgain[j] += grow[j] * xhat[j];
                    dbias[j] += grow[j];
                }
            }
            vec![
                (*x, Tensor::new(xv.shape(), dx)?),
                (*gain, Tensor::new(&[n], dgain)?),
                (*bias, Tensor::new(&[n], dbias)?),
            ]
        }
        Op::GatherRows { table, rows } => {
            let t = val(*table);
            let width = t.shape()[1];
            let mut acc = vec![0.0; t.len()];
            for (r, row) in rows.iter().enumerate() {
                if let Some(row) = row {
                    for (o, &x) in acc[row * width..(row + 1) * width].iter_mut().zip(&g.data()[r * width..]) {
                        *o += x;
                    }
                }
            }
            vec![(*table, Tensor::new(t.shape(), acc)?)]
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            let mut v = Vec::with_capacity(parts.len());
            for &p in parts {
                let len = val(p).shape()[*axis];
                v.push((p, g.slice_axis(*axis, start, len)?));
                start += len;
            }
            v
        }
        Op::Slice { a, axis, start } => {
            let shape = val(*a).shape();
            let len = g.shape()[*axis];
            let mut pieces = Vec::with_capacity(3);
            let before = (*start > 0).then(|| {
                let mut s = shape.to_vec();
                s[*axis] = *start;
                Tensor::zeros(&s)
            });
            let after_len = shape[*axis] - start - len;
            let after = (after_len > 0).then(|| {
                let mut s = shape.to_vec();
                s[*axis] = after_len;
                Tensor::zeros(&s)
            });
            pieces.extend(before.iter());
            pieces.push(g);
            pieces.extend(after.iter());
            vec![(*a, Tensor::concat(&pieces, *axis)?)]
        }
        Op::Reshape { a } => vec![(*a, g.reshape(val(*a).shape())?)],
        Op::Permute { a, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            vec![(*a, g.permute(&inverse)?)]
        }
        Op::Sum { a } => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Pick { a, indices } => {
            let av = val(*a);
            let n = *av.shape().last().unwrap();
            let mut data = vec![0.0; av.len()];
            for (r, &idx) in indices.iter().enumerate() {
                data[r * n + idx] = g.data()[r];
            }
            vec![(*a, Tensor::new(av.shape(), data)?)]
        }
    };
    Ok(out)
}

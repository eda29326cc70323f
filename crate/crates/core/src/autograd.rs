//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of a forward pass. Parameters enter
//! the graph through [`Graph::param`], which remembers the owning
//! [`ParamStore`] slot; [`Graph::backward`] walks the tape in reverse and
//! accumulates the derivative of a scalar loss into those slots.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, Tensor, NORM_EPS};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    GroupMeanRows(Var, usize),
    NormalizeRows(Var),
    ScaleByExp(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// A node that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a copy of the named parameter; gradients flow back to it.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        let v = self.push(store.entry(id).value.clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Adds a `[1×n]` (or `[n]`) row vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (_, n) = xv.dims2();
        if xv.shape().len() != 2 || bv.len() != n {
            return Err(Error::Dimension(format!(
                "cannot add bias {:?} to rows of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "cannot add {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Averages consecutive blocks of `group` rows: `[m·group × n] → [m × n]`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, n) = av.dims2();
        if group == 0 || rows % group != 0 || av.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "cannot pool {:?} in groups of {group} rows",
                av.shape()
            )));
        }
        let m = rows / group;
        let mut out = vec![0.0; m * n];
        for r in 0..rows {
            let dst = &mut out[(r / group) * n..(r / group + 1) * n];
            for (o, v) in dst.iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::GroupMeanRows(a, group)))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::l2_normalize_rows(self.value(a))?;
        Ok(self.push(out, Op::NormalizeRows(a)))
    }

    /// `exp(s) · x` for a one-element `s`.
    pub fn scale_by_exp(&mut self, x: Var, log_scale: Var) -> Result<Var> {
        let s = self.value(log_scale);
        if s.len() != 1 {
            return Err(Error::Dimension(format!(
                "log scale must hold one value, got shape {:?}",
                s.shape()
            )));
        }
        let factor = s.data()[0].exp();
        let out = self.value(x).map(|v| v * factor);
        Ok(self.push(out, Op::ScaleByExp(x, log_scale)))
    }

    /// Mean softmax cross entropy of the rows of `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "cross entropy expects a matrix, got {:?}",
                lv.shape()
            )));
        }
        let loss = tensor::cross_entropy_mean(lv, targets)?;
        let probs = tensor::softmax_rows(lv)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a))
    }

    /// Reverse pass from a scalar `loss`, accumulating into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(pid) = node.param {
                store.accumulate_grad(pid, &g);
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |v: Var, contrib: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, tensor::matmul(g, &tensor::transpose(bv)?)?);
                send(*b, tensor::matmul(&tensor::transpose(av)?, g)?);
            }
            Op::Transpose(a) => send(*a, tensor::transpose(g)?),
            Op::AddRow(x, b) => {
                let bshape = self.value(*b).shape().to_vec();
                let (rows, n) = g.dims2();
                let mut gb = vec![0.0; n];
                for r in 0..rows {
                    for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                send(*x, g.clone());
                send(*b, Tensor::from_parts(bshape, gb));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Scale(a, f) => send(*a, g.map(|v| v * f)),
            Op::Tanh(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                send(*a, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::GroupMeanRows(a, group) => {
                let av = self.value(*a);
                let (rows, n) = av.dims2();
                let inv = 1.0 / *group as f64;
                let mut data = vec![0.0; rows * n];
                for r in 0..rows {
                    for (d, v) in data[r * n..(r + 1) * n].iter_mut().zip(g.row(r / group)) {
                        *d = v * inv;
                    }
                }
                send(*a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let (rows, n) = x.dims2();
                let mut data = vec![0.0; rows * n];
                for r in 0..rows {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let (gr, yr) = (g.row(r), y.row(r));
                    let out = &mut data[r * n..(r + 1) * n];
                    if norm > NORM_EPS {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            out[i] = (gr[i] - yr[i] * dot) / norm;
                        }
                    } else {
                        for i in 0..n {
                            out[i] = gr[i] / NORM_EPS;
                        }
                    }
                }
                send(*a, Tensor::from_parts(x.shape().to_vec(), data));
            }
            Op::ScaleByExp(x, s) => {
                let factor = self.value(*s).data()[0].exp();
                let gs: f64 = g.data().iter().zip(node.value.data()).map(|(a, b)| a * b).sum();
                send(*x, g.map(|v| v * factor));
                let sshape = self.value(*s).shape().to_vec();
                send(*s, Tensor::from_parts(sshape, vec![gs]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let upstream = g.data()[0];
                let (rows, n) = probs.dims2();
                let inv = upstream / rows as f64;
                let mut data = probs.data().to_vec();
                for (r, &t) in targets.iter().enumerate() {
                    data[r * n + t] -= 1.0;
                }
                data.iter_mut().for_each(|v| *v *= inv);
                send(*logits, Tensor::from_parts(vec![rows, n], data));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                send(*a, Tensor::full(&shape, g.data()[0]));
            }
            Op::SumSquares(a) => {
                let up = g.data()[0];
                send(*a, self.value(*a).map(|v| 2.0 * v * up));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let loss = g.sum(w);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn squared_norm_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let loss = g.sum_squares(w);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        // loss = sum(w) + sum(w) registered twice and also used twice in one node.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2], 1.0)).unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        let both = g.add(w1, w1).unwrap();
        let total = g.add(both, w2).unwrap();
        let loss = g.sum(total);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2], 1.0)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        assert!(matches!(g.backward(w, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_row_normalization_passes_zeros_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let y = g.normalize_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }
}

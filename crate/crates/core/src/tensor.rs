//! Dense row-major `f64` tensors and the forward kernels shared by the
//! autograd graph and the evaluation code.

use std::fmt;

use crate::error::{Error, Result};

/// Norm floor used by [`l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    /// Builds a tensor, rejecting empty dimensions, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must have at least one dimension, all positive"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernel outputs whose shape is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Dimension(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as a matrix, folding all leading axes into rows.
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has at least one axis");
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_parts(shape, self.data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff needs equal shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn require_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "{what} expects a matrix, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "matmul")?;
    let (k2, n) = require_2d(b, "matmul")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_2d(a, "transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = require_2d(x, "softmax_rows")?;
    let mut out = x.data.clone();
    for r in 0..m {
        let row = &mut out[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Per-row `log(sum(exp(row)))`, computed stably.
pub(crate) fn logsumexp_rows(x: &Tensor) -> Vec<f64> {
    let (m, n) = x.dims2();
    (0..m)
        .map(|r| {
            let row = &x.data[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Divides each row by `max(‖row‖₂, NORM_EPS)`; all-zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = require_2d(x, "l2_normalize_rows")?;
    let mut out = x.data.clone();
    for r in 0..m {
        let row = &mut out[r * n..(r + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn check_targets(targets: &[usize], rows: usize, classes: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::Dimension(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Index(format!(
            "target {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean over rows of `-log softmax(row)[target]`.
pub fn cross_entropy_mean(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (m, n) = require_2d(logits, "cross_entropy_mean")?;
    check_targets(targets, m, n)?;
    let lse = logsumexp_rows(logits);
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| lse[r] - logits.data[r * n + t])
        .sum();
    Ok(total / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let a = Tensor::from_rows(&[
            vec![1.5, -2.0, 3.0],
            vec![0.25, 7.0, -1.0],
            vec![4.0, 0.5, 2.0],
        ])
        .unwrap();
        let i3 = Tensor::identity(3);
        assert_eq!(matmul(&i3, &a).unwrap(), a);
        assert_eq!(matmul(&a, &i3).unwrap(), a);

        let row = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let col = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(softmax_rows(&x).unwrap().data(), &[0.5, 0.5]);

        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&x).unwrap();
        // e^k / (e + e^2 + e^3)
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expected = [1f64.exp() / denom, 2f64.exp() / denom, 3f64.exp() / denom];
        for (got, want) in s.data().iter().zip(expected) {
            assert!(approx(*got, want, 1e-15));
        }
        assert!(approx(s.data()[0], 0.0900, 1e-4));
        assert!(approx(s.data()[1], 0.2447, 1e-4));
        assert!(approx(s.data()[2], 0.6652, 1e-4));

        let shifted = Tensor::from_rows(&[vec![-41.0, -40.0, -39.0]]).unwrap();
        assert!(softmax_rows(&shifted).unwrap().max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let x = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let y = l2_normalize_rows(&x).unwrap();
        assert!(approx(y.get2(0, 0), 0.6, 1e-15) && approx(y.get2(0, 1), 0.8, 1e-15));
        assert_eq!(y.row(1), &[0.0, 0.0]);
        assert_eq!(y.row(2), &[1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let zeros = Tensor::zeros(&[4, 6]);
        assert!(approx(
            cross_entropy_mean(&zeros, &[0, 1, 2, 5]).unwrap(),
            6f64.ln(),
            1e-12
        ));
        assert!(approx(6f64.ln(), 1.791759, 1e-6));

        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let oracle = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let got = cross_entropy_mean(&x, &[2]).unwrap();
        assert!(approx(got, oracle, 1e-14));
        assert!(approx(got, 0.40761, 1e-4));

        let mut sat = Tensor::zeros(&[3, 3]);
        for (r, t) in [2usize, 0, 1].iter().enumerate() {
            sat.data_mut()[r * 3 + t] = 1000.0;
        }
        assert!(cross_entropy_mean(&sat, &[2, 0, 1]).unwrap() < 1e-6);

        assert!(matches!(
            cross_entropy_mean(&x, &[3]),
            Err(Error::Index(_))
        ));
    }
}

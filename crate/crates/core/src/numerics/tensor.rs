use std::fmt;

use super::real::{gemm, MatRef, Real};
use super::NumericsError;

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::InvalidShape { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Builds a matrix from row slices; all rows must share a length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::ShapeMismatch { op: "from_rows", left: vec![cols], right: vec![r.len()] });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row count and width when viewed as a matrix over the last axis.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        let cols = self.shape.last().copied().unwrap_or(1);
        let rows = self.data.len().checked_div(cols).unwrap_or(0);
        (rows, cols)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, cols) = self.as_matrix_dims();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericsError::InvalidShape { shape: shape.to_vec(), len: self.data.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn matrix(&self, op: &'static str) -> Result<(usize, usize), NumericsError> {
        if self.shape.len() != 2 {
            return Err(NumericsError::RankMismatch { op, expected: 2, shape: self.shape.clone() });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self, NumericsError> {
        let (m, k) = self.matrix("matmul")?;
        let (k2, n) = other.matrix("matmul")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::dense(&self.data, m, k), MatRef::dense(&other.data, k, n), T::zero(), &mut out);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self, NumericsError> {
        let (m, n) = self.matrix("transpose")?;
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(self.data[i * n + j]);
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|x| x * factor)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch { op, left: self.shape.clone(), right: other.shape.clone() });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat" })?;
        if axis >= first.rank() {
            return Err(NumericsError::InvalidAxis { op: "concat", axis, shape: first.shape.clone() });
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            shape[axis] += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(shape, data)
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self, NumericsError> {
        if axis >= self.rank() {
            return Err(NumericsError::InvalidAxis { op: "slice", axis, shape: self.shape.clone() });
        }
        if start + len > self.shape[axis] {
            return Err(NumericsError::OutOfRange { op: "slice", index: start + len, bound: self.shape[axis] });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, data)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self, NumericsError> {
        if axis >= self.rank() {
            return Err(NumericsError::InvalidAxis { op: "softmax", axis, shape: self.shape.clone() });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| out[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Per-row normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self, NumericsError> {
        let (rows, cols) = self.as_matrix_dims();
        if gain.numel() != cols || bias.numel() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape.clone(),
                right: gain.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); self.data.len()];
        for r in 0..rows {
            let x = &self.data[r * cols..(r + 1) * cols];
            let (mean, rstd) = moments(x, eps);
            for c in 0..cols {
                out[r * cols + c] = (x[c] - mean) * rstd * gain.data[c] + bias.data[c];
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}

/// Mean and reciprocal standard deviation of a feature vector.
pub(crate) fn moments<T: Real>(x: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(a.matmul(&eye).unwrap(), a);
    }

    #[test]
    fn hand_computed_product() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn transpose_of_product() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[4, 2], |i| (i as f64 * 1.3).cos());
        let lhs = a.matmul(&b).unwrap().transpose().unwrap();
        let rhs = b.transpose().unwrap().matmul(&a.transpose().unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_form() {
        let x = t(&[1, 2], &[0.0, 2f64.ln()]);
        let s = x.softmax(1).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        let u = t(&[3], &[4.0, 4.0, 4.0]).softmax(0).unwrap();
        assert!(u.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn softmax_shift_invariant_along_axis0() {
        let x = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 * 0.5);
        let shifted = x.map(|v| v + 100.0);
        let a = x.softmax(0).unwrap();
        let b = shifted.softmax(0).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        for col in 0..2 {
            let s: f64 = (0..3).map(|r| a.data()[r * 2 + col]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_and_hand_vector() {
        let g = t(&[3], &[1., 1., 1.]);
        let b = t(&[3], &[0.5, -1., 2.]);
        let c = t(&[1, 3], &[7., 7., 7.]).layer_norm(&g, &b, 1e-5).unwrap();
        assert_eq!(c.data(), b.data());
        // x = [1,2,3]: mean 2, var 2/3; normalized = [-1.2247, 0, 1.2247] (eps 1e-5)
        let zero = t(&[3], &[0., 0., 0.]);
        let y = t(&[1, 3], &[1., 2., 3.]).layer_norm(&g, &zero, 1e-5).unwrap();
        let expect = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
        assert!((y.data()[2] - expect).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let a = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 1], |i| 10.0 + i as f32);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert_eq!(c.data(), &[0., 1., 2., 10., 3., 4., 5., 11.]);
        assert_eq!(c.slice(1, 0, 3).unwrap(), a);
        assert_eq!(c.slice(1, 3, 1).unwrap(), b);
    }
}

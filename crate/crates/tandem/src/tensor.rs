//! Dense row-major f64 tensors. Small by design: just enough shape plumbing
//! for the autodiff graph; heavy lifting (matmul) goes through ndarray.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape;
        self
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Euclidean norm of the whole tensor.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// C = A @ B for row-major 2D buffers, via ndarray's gemm.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    use ndarray::{ArrayView2, ArrayViewMut2};
    use ndarray::linalg::general_mat_mul;
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let a = ArrayView2::from_shape((m, k), a).expect("lhs view");
    let b = ArrayView2::from_shape((k, n), b).expect("rhs view");
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("out view");
    general_mat_mul(1.0, &a, &b, 0.0, &mut c);
}

/// C += A @ B.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    use ndarray::{ArrayView2, ArrayViewMut2};
    use ndarray::linalg::general_mat_mul;
    let a = ArrayView2::from_shape((m, k), a).expect("lhs view");
    let b = ArrayView2::from_shape((k, n), b).expect("rhs view");
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("out view");
    general_mat_mul(1.0, &a, &b, 1.0, &mut c);
}

/// C = A @ B^T.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    use ndarray::{ArrayView2, ArrayViewMut2};
    use ndarray::linalg::general_mat_mul;
    debug_assert_eq!(b.len(), n * k);
    let a = ArrayView2::from_shape((m, k), a).expect("lhs view");
    let b = ArrayView2::from_shape((n, k), b).expect("rhs view");
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("out view");
    general_mat_mul(1.0, &a, &b.t(), 0.0, &mut c);
}

/// C += A @ B^T.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    use ndarray::{ArrayView2, ArrayViewMut2};
    use ndarray::linalg::general_mat_mul;
    debug_assert_eq!(b.len(), n * k);
    let a = ArrayView2::from_shape((m, k), a).expect("lhs view");
    let b = ArrayView2::from_shape((n, k), b).expect("rhs view");
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("out view");
    general_mat_mul(1.0, &a, &b.t(), 1.0, &mut c);
}

/// C += A^T @ B.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    use ndarray::{ArrayView2, ArrayViewMut2};
    use ndarray::linalg::general_mat_mul;
    debug_assert_eq!(a.len(), k * m);
    let a = ArrayView2::from_shape((k, m), a).expect("lhs view");
    let b = ArrayView2::from_shape((k, n), b).expect("rhs view");
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("out view");
    general_mat_mul(1.0, &a.t(), &b, 1.0, &mut c);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_manual_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 0.5, 1.0, -1.0]; // 2x3, so A @ B^T is 2x2
        let mut c = [0.0; 4];
        matmul_nt(&a, &b, 2, 3, 2, &mut c);
        assert_eq!(c, [7.0, -0.5, 16.0, 1.0]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|x| x as f64).collect());
        let r = t.clone().reshape(vec![3, 2]);
        assert_eq!(r.data(), t.data());
        assert_eq!(r.shape(), &[3, 2]);
    }
}

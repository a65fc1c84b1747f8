//! Dense n-dimensional f64 tensor.
//!
//! Plain value type: shape plus a flat row-major buffer. Gradients are not
//! stored here; the tape in [`crate::graph`] and the parameter store in
//! [`crate::params`] own gradient buffers.

use crate::error::{CatError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CatError::Shape {
                op: "tensor_new",
                detail: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Same data, new shape. Element counts must agree.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn first_non_finite(&self) -> Option<f64> {
        self.data.iter().copied().find(|v| !v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

/// Row-major matrix multiply `c = a(ta) * b(tb)` via `matrixmultiply`.
///
/// `a` is `ar x ac` as stored; transposition is handled through strides, so no
/// data movement happens for the transposed operands.
pub fn matmul(
    a: &[f64],
    ar: usize,
    ac: usize,
    ta: bool,
    b: &[f64],
    br: usize,
    bc: usize,
    tb: bool,
    out: &mut [f64],
) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1isize, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1isize, bc as isize) } else { (bc as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[ignore = "throughput probe, run manually with --nocapture"]
    fn matmul_throughput() {
        let n = 768;
        let a = vec![1.0f64; n * n];
        let b = vec![1.0f64; n * n];
        let mut c = vec![0.0f64; n * n];
        let start = std::time::Instant::now();
        let reps = 10;
        for _ in 0..reps {
            matmul(&a, n, n, false, &b, n, n, false, &mut c);
        }
        let secs = start.elapsed().as_secs_f64();
        let gflops = reps as f64 * 2.0 * (n as f64).powi(3) / secs / 1e9;
        println!("dgemm {}x{}: {:.1} GFLOP/s", n, n, gflops);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_plain_and_transposed() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(&a, 2, 2, false, &b, 2, 2, false, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aT * b
        matmul(&a, 2, 2, true, &b, 2, 2, false, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // a * bT
        matmul(&a, 2, 2, false, &b, 2, 2, true, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}

//! Dense row-major f64 tensors and the matrix kernels behind the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidInput(format!(
                "shape {:?} needs {n} elements, got {}",
                shape,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![x],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("from_rows with zero rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of the tensor viewed as a 2-D matrix (all leading axes flattened).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1.min(self.data.len().max(1)),
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    /// Reinterpret with a new shape of the same total size.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Matrix product with optional operand transposes. Accumulation order over
/// the inner dimension is fixed, so results are identical regardless of the
/// number of worker threads.
pub fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (am, ak) = (a.rows(), a.cols());
    let (bm, bk) = (b.rows(), b.cols());
    let (m, k) = if ta { (ak, am) } else { (am, ak) };
    let (kb, n) = if tb { (bk, bm) } else { (bm, bk) };
    assert_eq!(k, kb, "gemm inner dims: {k} vs {kb}");

    let mut out = vec![0.0; m * n];
    let body = |i: usize, row_out: &mut [f64]| match (ta, tb) {
        (false, false) => {
            let ar = a.row(i);
            for (p, &a_ip) in ar.iter().enumerate() {
                let br = b.row(p);
                for (o, &b_pj) in row_out.iter_mut().zip(br) {
                    *o += a_ip * b_pj;
                }
            }
        }
        (false, true) => {
            let ar = a.row(i);
            for (j, o) in row_out.iter_mut().enumerate() {
                *o = crate::numeric::dot(ar, b.row(j));
            }
        }
        (true, false) => {
            // out[i,j] = sum_p a[p,i] * b[p,j]
            for p in 0..am {
                let a_pi = a.get2(p, i);
                if a_pi != 0.0 {
                    let br = b.row(p);
                    for (o, &b_pj) in row_out.iter_mut().zip(br) {
                        *o += a_pi * b_pj;
                    }
                }
            }
        }
        (true, true) => {
            for (j, o) in row_out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for p in 0..am {
                    acc += a.get2(p, i) * b.get2(j, p);
                }
                *o = acc;
            }
        }
    };

    let work = m * n * k;
    if work > 1 << 16 && m > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    Tensor::matrix(m, n, out).expect("gemm shape is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_hand_computation() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = gemm(&a, false, &b, false);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn gemm_transpose_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 5., -6.]).unwrap();
        let b = Tensor::matrix(4, 3, vec![1., 0., 2., -1., 3., 1., 0., 2., 0.5, 1., 1., 1.]).unwrap();
        // a @ b^T three ways
        let nt = gemm(&a, false, &b, true);
        let bt_data: Vec<f64> = (0..3)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| b.get2(j, i))
            .collect();
        let bt = Tensor::matrix(3, 4, bt_data).unwrap();
        let nn = gemm(&a, false, &bt, false);
        assert_eq!(nt, nn);

        let at_data: Vec<f64> = (0..3)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| a.get2(j, i))
            .collect();
        let at = Tensor::matrix(3, 2, at_data).unwrap();
        let tn = gemm(&at, true, &bt, false);
        assert_eq!(tn, nn);
        let tt = gemm(&at, true, &b, true);
        assert_eq!(tt, nn);
    }

    #[test]
    fn rows_flattens_leading_axes() {
        let t = Tensor::zeros(vec![4, 3, 2]);
        assert_eq!(t.rows(), 12);
        assert_eq!(t.cols(), 2);
    }
}

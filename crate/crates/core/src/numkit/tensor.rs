use crate::error::{shape_check, Error, Result};

/// Dense row-major `f32` tensor.
///
/// Most operations treat a tensor as a matrix of `rows() x cols()`, where the
/// last axis is the column axis and every leading axis is folded into rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        shape_check!(
            numel == data.len(),
            "shape {:?} holds {} values but {} were given",
            shape,
            numel,
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            shape_check!(r.len() == cols, "ragged rows: {} vs {}", r.len(), cols);
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<f32> {
        shape_check!(
            self.data.len() == 1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        shape_check!(
            self.shape.len() == 2 && other.shape.len() == 2,
            "matmul expects matrices, got {:?} x {:?}",
            self.shape,
            other.shape
        );
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        shape_check!(
            k == k2,
            "matmul inner dimensions differ: {:?} x {:?}",
            self.shape,
            other.shape
        );
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            k,
            1,
            &other.data,
            n,
            1,
            &mut out,
            false,
        );
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        shape_check!(
            self.shape.len() == 2,
            "transpose expects a matrix, got {:?}",
            self.shape
        );
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        shape_check!(
            self.shape == other.shape,
            "elementwise op on {:?} and {:?}",
            self.shape,
            other.shape
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Row-wise softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        let c = self.cols();
        if c > 0 {
            for row in out.data.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        out
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let rows = self.rows();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            shape_check!(i < rows, "row index {} out of {}", i, rows);
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), c], data)
    }

    /// Concatenates matrices along the column axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts
            .first()
            .map(|p| p.rows())
            .ok_or_else(|| Error::Shape("empty concat".into()))?;
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                shape_check!(
                    p.rows() == rows,
                    "concat_cols row mismatch: {} vs {}",
                    p.rows(),
                    rows
                );
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::new(vec![rows, total], data)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts
            .first()
            .map(|p| p.cols())
            .ok_or_else(|| Error::Shape("empty concat".into()))?;
        let mut data = Vec::new();
        for p in parts {
            shape_check!(
                p.cols() == cols,
                "concat_rows column mismatch: {} vs {}",
                p.cols(),
                cols
            );
            data.extend_from_slice(&p.data);
        }
        let rows = data.len() / cols.max(1);
        Tensor::new(vec![rows, cols], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `c = a * b` (or `c += a * b` when `accumulate`), with explicit strides so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the debug assertions above spell out the extents touched by the
    // kernel; every caller derives strides from the operand shapes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_annihilator() {
        let m = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
        let z = Tensor::zeros(&[2, 2]);
        let m2 = Tensor::from_rows(&[[3.0, -1.0], [2.5, 4.0]]).unwrap();
        assert_eq!(z.matmul(&m2).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let s = Tensor::from_rows(&[[0.0, 0.0, 0.0]])
            .unwrap()
            .softmax_rows();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let s = Tensor::from_rows(&[[1000.0, 0.0]]).unwrap().softmax_rows();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1].abs() < 1e-6);
        let s = Tensor::from_rows(&[[2f32.ln(), 0.0]])
            .unwrap()
            .softmax_rows();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}

//! Dense row-major `f32` matrices and the elementwise/row-wise operations the
//! transformer needs.
//!
//! Every operation here is a pure function of its inputs. The reference
//! matrix product accumulates each output element in ascending `k` order, so
//! two calls with the same operands always agree bit for bit.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major single-precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

/// Single-precision vector (biases, norm parameters, logits).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatVector {
    data: Vec<f32>,
}

impl FloatMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "FloatMatrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dims("FloatMatrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Result<Self> {
        if start + width > self.cols {
            return Err(Error::dims(
                "FloatMatrix::columns",
                format!("columns <= {}", self.cols),
                start + width,
            ));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Concatenates matrices side by side.
    pub fn hcat(parts: &[FloatMatrix]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::dims("FloatMatrix::hcat", rows, bad.rows));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Elementwise sum.
    pub fn add(&self, other: &FloatMatrix) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                "add",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &FloatVector) -> Result<Self> {
        if bias.len() != self.cols {
            return Err(Error::dims("add_row_vector", self.cols, bias.len()));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Row `i` as a 1×cols matrix.
    pub fn row_matrix(&self, i: usize) -> Self {
        Self {
            rows: 1,
            cols: self.cols,
            data: self.row(i).to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl FloatVector {
    pub fn new(data: Vec<f32>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn filled(len: usize, value: f32) -> Self {
        Self {
            data: vec![value; len],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The vector as a single-row matrix.
    pub fn as_row(&self) -> FloatMatrix {
        FloatMatrix {
            rows: 1,
            cols: self.data.len(),
            data: self.data.clone(),
        }
    }
}

impl From<Vec<f32>> for FloatVector {
    fn from(data: Vec<f32>) -> Self {
        Self { data }
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &FloatMatrix) -> Result<FloatMatrix> {
    m.ensure_finite("softmax_rows")?;
    let mut out = m.clone();
    if m.cols == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_exact_mut(m.cols) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row layer normalization (population variance) followed by the affine
/// `gain`/`bias` transform.
pub fn layernorm(
    m: &FloatMatrix,
    gain: &FloatVector,
    bias: &FloatVector,
    eps: f32,
) -> Result<FloatMatrix> {
    if gain.len() != m.cols || bias.len() != m.cols {
        return Err(Error::dims(
            "layernorm",
            format!("gain/bias of length {}", m.cols),
            format!("{}/{}", gain.len(), bias.len()),
        ));
    }
    let mut out = m.clone();
    if m.cols == 0 {
        return Ok(out);
    }
    let n = m.cols as f32;
    for row in out.data.chunks_exact_mut(m.cols) {
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (*v - mean) * inv_std * g + b;
        }
    }
    Ok(out)
}

/// Tanh approximation of GELU for one value.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Elementwise tanh-approximated GELU.
pub fn gelu(m: &FloatMatrix) -> Result<FloatMatrix> {
    m.ensure_finite("gelu")?;
    Ok(m.map(gelu_scalar))
}

/// Reference matrix product. Each output element is summed over `k` in
/// ascending order starting from `0.0`; rows are computed in parallel, which
/// does not change any element's summation order.
pub fn matmul_f32(a: &FloatMatrix, b: &FloatMatrix) -> Result<FloatMatrix> {
    if a.cols != b.rows {
        return Err(Error::dims(
            "matmul_f32",
            format!("rhs with {} rows", a.cols),
            b.rows,
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            let a_row = &a.data[i * k..(i + 1) * k];
            for (kk, &av) in a_row.iter().enumerate() {
                let b_row = &b.data[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        });
    }
    Ok(FloatMatrix {
        rows: m,
        cols: n,
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&FloatMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_rows(&FloatMatrix::from_rows(&[vec![1000.0; 3]]).unwrap()).unwrap();
        for v in s.data() {
            assert!(close(*v, 1.0 / 3.0, 1e-7));
        }

        let s = softmax_rows(&FloatMatrix::from_rows(&[vec![3f32.ln(), 0.0]]).unwrap()).unwrap();
        assert!(close(s.get(0, 0), 0.75, 1e-6));
        assert!(close(s.get(0, 1), 0.25, 1e-6));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = FloatMatrix::from_rows(&[vec![f32::NAN, 0.0]]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(Error::NonFinite(_))));
        let m = FloatMatrix::from_rows(&[vec![f32::INFINITY, 0.0]]).unwrap();
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let ones = FloatVector::filled(2, 1.0);
        let zeros = FloatVector::zeros(2);

        let c = FloatMatrix::from_rows(&[vec![3.0, 3.0]]).unwrap();
        assert_eq!(
            layernorm(&c, &ones, &zeros, 1e-5).unwrap().data(),
            &[0.0, 0.0]
        );

        let m = FloatMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let out = layernorm(&m, &ones, &zeros, 1e-12).unwrap();
        assert!(close(out.get(0, 0), 1.0, 1e-6) && close(out.get(0, 1), -1.0, 1e-6));

        let m = FloatMatrix::from_rows(&[vec![2.0, 4.0]]).unwrap();
        let out = layernorm(&m, &ones, &FloatVector::filled(2, 5.0), 1e-12).unwrap();
        assert!(close(out.get(0, 0), 4.0, 1e-5) && close(out.get(0, 1), 6.0, 1e-5));
    }

    #[test]
    fn layernorm_dimension_mismatch() {
        let m = FloatMatrix::zeros(2, 3);
        let g = FloatVector::zeros(2);
        assert!(matches!(
            layernorm(&m, &g, &FloatVector::zeros(3), 1e-5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gelu_examples() {
        let m = FloatMatrix::from_rows(&[vec![0.0, 1.0, 20.0]]).unwrap();
        let g = gelu(&m).unwrap();
        assert_eq!(g.get(0, 0), 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)) evaluated in f64
        let expected = 0.5 * (1.0 + ((2.0f64 / std::f64::consts::PI).sqrt() * 1.044715).tanh());
        assert!(close(g.get(0, 1), expected as f32, 1e-6));
        assert!(close(g.get(0, 1), 0.8412, 1e-4));
        assert!(close(g.get(0, 2), 20.0, 1e-5));
    }

    #[test]
    fn matmul_examples() {
        let a = FloatMatrix::from_rows(&[vec![2.0]]).unwrap();
        let b = FloatMatrix::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(matmul_f32(&a, &b).unwrap().data(), &[6.0]);

        let m = FloatMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f32 * 0.37 - 1.1);
        assert_eq!(matmul_f32(&FloatMatrix::identity(3), &m).unwrap(), m);
        assert_eq!(matmul_f32(&m, &FloatMatrix::identity(3)).unwrap(), m);

        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = FloatMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = FloatMatrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(
            matmul_f32(&a, &b).unwrap().data(),
            &[19.0, 22.0, 43.0, 50.0]
        );

        assert!(matmul_f32(&a, &FloatMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn matmul_matches_dot_product_order() {
        let a = FloatMatrix::from_fn(5, 7, |i, j| ((i * 7 + j) as f32 * 0.731).sin());
        let b = FloatMatrix::from_fn(7, 4, |i, j| ((i * 4 + j) as f32 * 1.37).cos());
        let c = matmul_f32(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut s = 0.0f32;
                for k in 0..7 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(s.to_bits(), c.get(i, j).to_bits());
            }
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = FloatMatrix> {
            (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
                proptest::collection::vec(-50.0f32..50.0, r * c)
                    .prop_map(move |d| FloatMatrix::new(r, c, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(m in matrix(6, 12)) {
                let s = softmax_rows(&m).unwrap();
                for i in 0..s.rows() {
                    let sum: f32 = s.row(i).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-5);
                }
            }

            #[test]
            fn matmul_identity_is_bitwise(m in matrix(6, 8)) {
                let out = matmul_f32(&m, &FloatMatrix::identity(m.cols())).unwrap();
                prop_assert_eq!(out, m);
            }

            #[test]
            fn layernorm_standardizes_rows(m in matrix(5, 16)) {
                let g = FloatVector::filled(m.cols(), 1.0);
                let b = FloatVector::zeros(m.cols());
                let out = layernorm(&m, &g, &b, 1e-12).unwrap();
                for i in 0..m.rows() {
                    let row = m.row(i);
                    let spread = row.iter().copied().fold(f32::MIN, f32::max)
                        - row.iter().copied().fold(f32::MAX, f32::min);
                    if spread < 1e-2 {
                        continue;
                    }
                    let r = out.row(i);
                    let n = r.len() as f64;
                    let mean = r.iter().map(|&v| v as f64).sum::<f64>() / n;
                    let var = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                    prop_assert!(mean.abs() < 1e-5, "mean {}", mean);
                    prop_assert!((var - 1.0).abs() < 1e-3, "var {}", var);
                }
            }
        }
    }
}

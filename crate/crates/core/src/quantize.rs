//! W2A8 quantization: absmean ternarization of weights, per-row absmax int8
//! quantization of activations, and the dequantizing BitLinear forward.
//!
//! Weights are `k x n` (input depth by output channels) and activations are
//! `m x k`, so a layer computes `A W`. Both quantizers round half away from
//! zero before clipping.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::gemm_reference;
use crate::tensor::FloatMatrix;

/// Default `eps` guarding the scale divisions.
pub const DEFAULT_EPS: f32 = 1e-6;

/// Ternary codes in `{-1, 0, +1}` with one per-tensor scale `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryWeightMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    beta: f32,
}

/// Int8 activations with one scale per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedActivationMatrix {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    gamma: Vec<f32>,
}

/// Exact 32-bit integer products prior to dequantization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntAccumulatorMatrix {
    rows: usize,
    cols: usize,
    values: Vec<i32>,
}

impl TernaryWeightMatrix {
    pub fn new(rows: usize, cols: usize, codes: Vec<i8>, beta: f32) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::dims(
                "TernaryWeightMatrix::new",
                rows * cols,
                codes.len(),
            ));
        }
        if let Some(bad) = codes.iter().find(|c| !(-1..=1).contains(*c)) {
            return Err(Error::InvalidConfig(format!(
                "ternary code {bad} out of range"
            )));
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::NonFinite(format!("ternary scale {beta}")));
        }
        Ok(Self {
            rows,
            cols,
            codes,
            beta,
        })
    }

    /// Input depth `k`.
    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Output channels `n`.
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    #[inline]
    pub fn code(&self, k: usize, n: usize) -> i8 {
        self.codes[k * self.cols + n]
    }

    #[inline]
    pub fn beta(&self) -> f32 {
        self.beta
    }

    pub fn with_beta(mut self, beta: f32) -> Self {
        self.beta = beta;
        self
    }

    /// `codes * beta` as floats.
    pub fn dequantize(&self) -> FloatMatrix {
        let data = self.codes.iter().map(|&c| c as f32 * self.beta).collect();
        FloatMatrix::new(self.rows, self.cols, data).expect("shape preserved")
    }
}

impl QuantizedActivationMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<i8>, gamma: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dims(
                "QuantizedActivationMatrix::new",
                rows * cols,
                values.len(),
            ));
        }
        if gamma.len() != rows {
            return Err(Error::dims(
                "QuantizedActivationMatrix::new",
                rows,
                gamma.len(),
            ));
        }
        Ok(Self {
            rows,
            cols,
            values,
            gamma,
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
    pub fn values(&self) -> &[i8] {
        &self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[i8] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn gamma(&self) -> &[f32] {
        &self.gamma
    }
}

impl IntAccumulatorMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<i32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dims(
                "IntAccumulatorMatrix::new",
                rows * cols,
                values.len(),
            ));
        }
        Ok(Self { rows, cols, values })
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
    pub fn values(&self) -> &[i32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.values[i * self.cols + j]
    }
}

/// Ternarizes `w` with its mean absolute value as the scale.
pub fn absmean_quantize(w: &FloatMatrix, eps: f32) -> Result<TernaryWeightMatrix> {
    if w.data().is_empty() {
        return Err(Error::Empty("absmean_quantize"));
    }
    w.ensure_finite("absmean_quantize")?;
    let sum: f64 = w.data().iter().map(|v| v.abs() as f64).sum();
    let beta = (sum / w.data().len() as f64) as f32;
    let denom = beta + eps;
    let codes = w
        .data()
        .iter()
        .map(|&v| (v / denom).round().clamp(-1.0, 1.0) as i8)
        .collect();
    Ok(TernaryWeightMatrix {
        rows: w.rows(),
        cols: w.cols(),
        codes,
        beta,
    })
}

/// Quantizes each row of `a` to int8 with `gamma[i] = max|row_i| / 127`.
pub fn absmax_quantize(a: &FloatMatrix, eps: f32) -> Result<QuantizedActivationMatrix> {
    if a.data().is_empty() {
        return Err(Error::Empty("absmax_quantize"));
    }
    a.ensure_finite("absmax_quantize")?;
    let cols = a.cols();
    let (values, gamma): (Vec<Vec<i8>>, Vec<f32>) = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let row = a.row(i);
            let gamma = row.iter().fold(0.0f32, |m, v| m.max(v.abs())) / 127.0;
            let denom = gamma + eps;
            let q = row
                .iter()
                .map(|&v| (v / denom).round().clamp(-128.0, 127.0) as i8)
                .collect();
            (q, gamma)
        })
        .unzip();
    Ok(QuantizedActivationMatrix {
        rows: a.rows(),
        cols,
        values: values.concat(),
        gamma,
    })
}

/// `out[i][j] = acc[i][j] * gamma[i] * beta`, evaluated left to right.
pub fn dequantize(acc: &IntAccumulatorMatrix, gamma: &[f32], beta: f32) -> Result<FloatMatrix> {
    if gamma.len() != acc.rows {
        return Err(Error::dims("dequantize", acc.rows, gamma.len()));
    }
    let cols = acc.cols;
    let data = acc
        .values
        .iter()
        .enumerate()
        .map(|(idx, &v)| v as f32 * gamma[idx / cols.max(1)] * beta)
        .collect();
    FloatMatrix::new(acc.rows, cols, data)
}

/// BitLinear forward on unpacked ternary weights: quantize `a`, multiply in
/// integers, dequantize.
pub fn bitlinear_forward(
    a: &FloatMatrix,
    w: &TernaryWeightMatrix,
    eps: f32,
) -> Result<FloatMatrix> {
    if a.cols() != w.rows {
        return Err(Error::dims("bitlinear_forward", w.rows, a.cols()));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Ok(FloatMatrix::zeros(a.rows(), w.cols));
    }
    let q = absmax_quantize(a, eps)?;
    let acc = gemm_reference(&q, w)?;
    dequantize(&acc, q.gamma(), w.beta)
}

/// Round-to-nearest-even conversion of an `f32` to bfloat16 bits.
pub fn f32_to_bf16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) as u16) | 0x0040;
    }
    let rounding = 0x7FFF + ((bits >> 16) & 1);
    (bits.wrapping_add(rounding) >> 16) as u16
}

pub fn bf16_bits_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// Rounds `x` to the nearest bfloat16 value, returned as `f32`.
pub fn round_to_bf16(x: f32) -> f32 {
    bf16_bits_to_f32(f32_to_bf16_bits(x))
}

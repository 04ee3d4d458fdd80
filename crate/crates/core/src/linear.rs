//! Bias-free linear layers in any of the three execution forms.

use crate::error::Result;
use crate::kernel::bitlinear_forward_packed;
use crate::packing::{pack_ternary, unpack_ternary, PackedWeightTiles};
use crate::quantize::{bitlinear_forward, TernaryWeightMatrix};
use crate::tensor::{matmul_f32, FloatMatrix};

/// `y = x W` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    /// Full-precision weights.
    Float(FloatMatrix),
    /// Ternary codes executed through the unpacked integer path.
    Ternary(TernaryWeightMatrix),
    /// Ternary codes in the 2-bit tiled layout, executed by the blocked kernel.
    Packed(PackedWeightTiles),
}

impl Linear {
    pub fn in_features(&self) -> usize {
        match self {
            Linear::Float(w) => w.rows(),
            Linear::Ternary(t) => t.rows(),
            Linear::Packed(p) => p.k_in(),
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            Linear::Float(w) => w.cols(),
            Linear::Ternary(t) => t.cols(),
            Linear::Packed(p) => p.n_out(),
        }
    }

    pub fn forward(&self, x: &FloatMatrix, eps: f32) -> Result<FloatMatrix> {
        match self {
            Linear::Float(w) => matmul_f32(x, w),
            Linear::Ternary(t) => bitlinear_forward(x, t, eps),
            Linear::Packed(p) => bitlinear_forward_packed(x, p, eps),
        }
    }

    pub fn is_ternary(&self) -> bool {
        !matches!(self, Linear::Float(_))
    }

    /// Replaces a packed layer with its unpacked codes; other forms are kept.
    pub fn unpacked(&self) -> Result<Linear> {
        Ok(match self {
            Linear::Packed(p) => Linear::Ternary(unpack_ternary(p)?),
            other => other.clone(),
        })
    }

    /// Replaces an unpacked ternary layer with its packed form.
    pub fn packed(&self) -> Linear {
        match self {
            Linear::Ternary(t) => Linear::Packed(pack_ternary(t)),
            other => other.clone(),
        }
    }

    /// Effective float weights (`codes * beta` for ternary forms).
    pub fn to_float(&self) -> Result<FloatMatrix> {
        Ok(match self {
            Linear::Float(w) => w.clone(),
            Linear::Ternary(t) => t.dequantize(),
            Linear::Packed(p) => unpack_ternary(p)?.dequantize(),
        })
    }

    /// Concatenates `times` copies of the weights along the output axis.
    /// Ternary forms keep their codes and scale.
    pub fn tile_columns(&self, times: usize) -> Result<Linear> {
        let tile = |rows: usize, cols: usize, get: &dyn Fn(usize, usize) -> f32| {
            FloatMatrix::from_fn(rows, cols * times, |r, c| get(r, c % cols))
        };
        Ok(match self {
            Linear::Float(w) => Linear::Float(tile(w.rows(), w.cols(), &|r, c| w.get(r, c))),
            Linear::Ternary(t) => Linear::Ternary(tile_codes(t, times)?),
            Linear::Packed(p) => {
                Linear::Packed(pack_ternary(&tile_codes(&unpack_ternary(p)?, times)?))
            }
        })
    }
}

fn tile_codes(t: &TernaryWeightMatrix, times: usize) -> Result<TernaryWeightMatrix> {
    let (rows, cols) = (t.rows(), t.cols());
    let codes = (0..rows)
        .flat_map(|r| (0..cols * times).map(move |c| t.code(r, c % cols)))
        .collect();
    TernaryWeightMatrix::new(rows, cols * times, codes, t.beta())
}

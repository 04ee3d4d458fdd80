//! Fixtures shared by the kernel benchmarks.

use bitvit_core::quantize::{absmax_quantize, absmean_quantize, DEFAULT_EPS};
use bitvit_core::tensor::FloatMatrix;
use bitvit_core::{pack_ternary, unpack_ternary, PackedWeightTiles, QuantizedActivationMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tokens, embedding width and FFN width of the reference model.
pub const TOKENS: usize = 197;
pub const EMBED_DIM: usize = 512;
pub const FFN_DIM: usize = 2048;

/// `(name, M, K, N)` of the two FFN projections.
pub const FFN_SHAPES: [(&str, usize, usize, usize); 2] = [
    ("ffn-kn", TOKENS, EMBED_DIM, FFN_DIM),
    ("ffn-nk", TOKENS, FFN_DIM, EMBED_DIM),
];

/// Operands for one `M x K` by `K x N` product in every representation the
/// kernels consume.
pub struct GemmOperands {
    pub activations: FloatMatrix,
    pub quantized: QuantizedActivationMatrix,
    pub packed: PackedWeightTiles,
    pub dequantized: FloatMatrix,
}

impl GemmOperands {
    pub fn random(m: usize, k: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrix = |r, c| FloatMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0f32..1.0));
        let activations = matrix(m, k);
        let weights = matrix(k, n);
        let quantized = absmax_quantize(&activations, DEFAULT_EPS).expect("finite activations");
        let ternary = absmean_quantize(&weights, DEFAULT_EPS).expect("finite weights");
        let packed = pack_ternary(&ternary);
        let dequantized = unpack_ternary(&packed).expect("valid packing").dequantize();
        Self {
            activations,
            quantized,
            packed,
            dequantized,
        }
    }

    /// Multiply-accumulate operations, counted as two per term.
    pub fn ops(&self) -> u64 {
        2 * (self.quantized.rows() * self.packed.k_in() * self.packed.n_out()) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operands_have_requested_shapes() {
        let g = GemmOperands::random(3, 20, 40, 1);
        assert_eq!(g.activations.shape(), (3, 20));
        assert_eq!(g.dequantized.shape(), (20, 40));
        assert_eq!((g.packed.k_in(), g.packed.n_out()), (20, 40));
        assert_eq!(g.ops(), 2 * 3 * 20 * 40);
    }
}

//! 2-bit ternary weight packing in 32x16 column-major fragments.
//!
//! A weight matrix with `n_out` output columns and `k_in` input rows is cut
//! into fragments of 32 output columns by 16 input rows. Each fragment is 32
//! `u32` words, one per output column, and each word holds the 16 codes of
//! that column along K: code `k_local` occupies bits `2*k_local..2*k_local+2`.
//! Fragments are ordered K-slab-major, so the word for column `n` and K-slab
//! `s` lives at `(s * n_tiles + n / 32) * 32 + n % 32`.
//!
//! Codes map `-1 -> 0b00`, `0 -> 0b01`, `+1 -> 0b10`, and `0b11` is
//! reserved. Decoding is `field - 1`. Ragged edges are padded with code 0.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quantize::TernaryWeightMatrix;

/// Output columns per fragment.
pub const TILE_N: usize = 32;
/// Input rows per fragment (codes per word).
pub const TILE_K: usize = 16;

/// Word with every field holding code 0.
pub const ZERO_WORD: u32 = 0x5555_5555;

const RESERVED: u32 = 0b11;

/// The 2-bit code assignment.
pub struct CodeEncoding;

impl CodeEncoding {
    #[inline]
    pub fn encode(code: i8) -> u32 {
        debug_assert!((-1..=1).contains(&code));
        (code + 1) as u32
    }

    #[inline]
    pub fn decode(field: u32) -> Option<i8> {
        if field == RESERVED {
            None
        } else {
            Some(field as i8 - 1)
        }
    }
}

/// Packed ternary weights in the tiled 2-bit layout, plus the scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeightTiles {
    n_out: usize,
    k_in: usize,
    words: Vec<u32>,
    beta: f32,
}

impl PackedWeightTiles {
    /// Wraps raw words; checks the length but not the code patterns.
    pub fn from_words(n_out: usize, k_in: usize, words: Vec<u32>, beta: f32) -> Result<Self> {
        let expected = packed_word_count(n_out, k_in);
        if words.len() != expected {
            return Err(Error::dims(
                "PackedWeightTiles::from_words",
                expected,
                words.len(),
            ));
        }
        Ok(Self {
            n_out,
            k_in,
            words,
            beta,
        })
    }

    #[inline]
    pub fn n_out(&self) -> usize {
        self.n_out
    }

    #[inline]
    pub fn k_in(&self) -> usize {
        self.k_in
    }

    #[inline]
    pub fn n_tiles(&self) -> usize {
        self.n_out.div_ceil(TILE_N)
    }

    #[inline]
    pub fn k_slabs(&self) -> usize {
        self.k_in.div_ceil(TILE_K)
    }

    #[inline]
    pub fn words(&self) -> &[u32] {
        &self.words
    }

    #[inline]
    pub fn beta(&self) -> f32 {
        self.beta
    }

    /// The 32 words of fragment (`slab`, `n_tile`).
    #[inline]
    pub fn fragment(&self, slab: usize, n_tile: usize) -> &[u32] {
        let base = (slab * self.n_tiles() + n_tile) * TILE_N;
        &self.words[base..base + TILE_N]
    }

    #[inline]
    pub(crate) fn word_index(&self, k: usize, n: usize) -> usize {
        ((k / TILE_K) * self.n_tiles() + n / TILE_N) * TILE_N + n % TILE_N
    }

    /// Checks every 2-bit field, returning the first reserved pattern found.
    pub fn validate(&self) -> Result<()> {
        for (w, &word) in self.words.iter().enumerate() {
            if let Some(field) = reserved_field(word) {
                return Err(Error::CorruptCode { word: w, field });
            }
        }
        Ok(())
    }

    /// Size of the word array in bytes.
    pub fn byte_len(&self) -> usize {
        self.words.len() * 4
    }
}

/// Index of the first `0b11` field in `word`, if any.
#[inline]
pub(crate) fn reserved_field(word: u32) -> Option<usize> {
    // A field is 0b11 iff both its bits are set.
    let both = word & (word >> 1) & 0x5555_5555;
    (both != 0).then(|| both.trailing_zeros() as usize / 2)
}

#[inline]
fn packed_word_count(n_out: usize, k_in: usize) -> usize {
    n_out.div_ceil(TILE_N) * k_in.div_ceil(TILE_K) * TILE_N
}

/// Packs a `k_in x n_out` ternary matrix into fragments.
pub fn pack_ternary(t: &TernaryWeightMatrix) -> PackedWeightTiles {
    let (k_in, n_out) = (t.rows(), t.cols());
    let n_tiles = n_out.div_ceil(TILE_N);
    let k_slabs = k_in.div_ceil(TILE_K);
    let mut words = vec![ZERO_WORD; packed_word_count(n_out, k_in)];
    if !words.is_empty() {
        words
            .par_chunks_mut(n_tiles * TILE_N)
            .enumerate()
            .for_each(|(slab, slab_words)| {
                let k0 = slab * TILE_K;
                let k_end = (k0 + TILE_K).min(k_in);
                for (n, word) in slab_words.iter_mut().enumerate().take(n_out) {
                    let mut w = ZERO_WORD;
                    for k in k0..k_end {
                        let shift = 2 * (k - k0);
                        w = (w & !(0b11 << shift)) | (CodeEncoding::encode(t.code(k, n)) << shift);
                    }
                    *word = w;
                }
            });
    }
    debug_assert_eq!(words.len(), k_slabs * n_tiles * TILE_N);
    PackedWeightTiles {
        n_out,
        k_in,
        words,
        beta: t.beta(),
    }
}

/// Inverse of [`pack_ternary`] on the logical `k_in x n_out` region.
pub fn unpack_ternary(p: &PackedWeightTiles) -> Result<TernaryWeightMatrix> {
    p.validate()?;
    let (k_in, n_out) = (p.k_in, p.n_out);
    let mut codes = vec![0i8; k_in * n_out];
    if n_out > 0 {
        codes
            .par_chunks_mut(n_out)
            .enumerate()
            .for_each(|(k, row)| {
                let shift = 2 * (k % TILE_K);
                for (n, c) in row.iter_mut().enumerate() {
                    let field = (p.words[p.word_index(k, n)] >> shift) & 0b11;
                    *c = field as i8 - 1;
                }
            });
    }
    TernaryWeightMatrix::new(k_in, n_out, codes, p.beta)
}

/// Bytes occupied by the packed words of an `n_out x k_in` layer.
pub fn packed_weight_bytes(n_out: usize, k_in: usize) -> usize {
    4 * packed_word_count(n_out, k_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ternary(k: usize, n: usize, f: impl Fn(usize, usize) -> i8) -> TernaryWeightMatrix {
        let codes = (0..k * n).map(|i| f(i / n, i % n)).collect();
        TernaryWeightMatrix::new(k, n, codes, 0.5).unwrap()
    }

    #[test]
    fn encoding_round_trip() {
        for c in -1..=1 {
            assert_eq!(CodeEncoding::decode(CodeEncoding::encode(c)), Some(c));
        }
        assert_eq!(CodeEncoding::decode(0b11), None);
    }

    #[test]
    fn zero_tile_packs_to_0x55() {
        let p = pack_ternary(&ternary(16, 32, |_, _| 0));
        assert_eq!(p.words().len(), 32);
        assert!(p.words().iter().all(|&w| w == 0x5555_5555));
    }

    #[test]
    fn single_plus_one_sets_low_field() {
        let p = pack_ternary(&ternary(16, 32, |k, n| (k == 0 && n == 0) as i8));
        assert_eq!(p.words()[0], 0x5555_5556);
        assert!(p.words()[1..].iter().all(|&w| w == ZERO_WORD));
    }

    #[test]
    fn field_positions_follow_k() {
        // -1 at k = 15 of column 3 clears the top field of word 3.
        let p = pack_ternary(&ternary(
            16,
            32,
            |k, n| if k == 15 && n == 3 { -1 } else { 0 },
        ));
        assert_eq!(p.words()[3], 0x1555_5555);
    }

    #[test]
    fn slab_major_word_order() {
        // 64 columns x 32 rows: 2 tiles x 2 slabs. (k=16, n=33) is slab 1, tile 1, lane 1.
        let p = pack_ternary(&ternary(32, 64, |k, n| (k == 16 && n == 33) as i8));
        assert_eq!(p.words()[(2 + 1) * 32 + 1], 0x5555_5556);
        assert_eq!(p.fragment(1, 1)[1], 0x5555_5556);
    }

    #[test]
    fn unpack_zero_word() {
        let p = PackedWeightTiles::from_words(32, 16, vec![ZERO_WORD; 32], 1.0).unwrap();
        let t = unpack_ternary(&p).unwrap();
        assert!(t.codes().iter().all(|&c| c == 0));
    }

    #[test]
    fn unpack_rejects_reserved_field() {
        let mut words = vec![ZERO_WORD; 32];
        words[5] = ZERO_WORD | (0b11 << 6);
        let p = PackedWeightTiles::from_words(32, 16, words, 1.0).unwrap();
        assert!(matches!(
            unpack_ternary(&p),
            Err(Error::CorruptCode { word: 5, field: 3 })
        ));
    }

    #[test]
    fn padding_is_zero_code() {
        let p = pack_ternary(&ternary(17, 33, |_, _| 1));
        // column 33 of the second tile is padding.
        assert_eq!(p.fragment(0, 1)[1], ZERO_WORD);
        // slab 1 holds only k = 16.
        assert_eq!(p.fragment(1, 0)[0], 0x5555_5556);
    }

    #[test]
    fn byte_accounting() {
        assert_eq!(packed_weight_bytes(32, 16), 128);
        assert_eq!(32 * 16 * 4 / packed_weight_bytes(32, 16), 16);
        assert_eq!(packed_weight_bytes(2048, 512), 262_144);
        assert_eq!(packed_weight_bytes(1, 1), 128);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn ternary_matrix() -> impl Strategy<Value = TernaryWeightMatrix> {
            (1usize..80, 1usize..80).prop_flat_map(|(k, n)| {
                proptest::collection::vec(-1i8..=1, k * n)
                    .prop_map(move |c| TernaryWeightMatrix::new(k, n, c, 0.25).unwrap())
            })
        }

        proptest! {
            #[test]
            fn round_trip(t in ternary_matrix()) {
                let p = pack_ternary(&t);
                prop_assert_eq!(p.words().len() * 16, p.n_tiles() * 32 * p.k_slabs() * 16);
                prop_assert_eq!(unpack_ternary(&p).unwrap(), t);
            }

            #[test]
            fn aligned_ratio_is_sixteen(nt in 1usize..8, ks in 1usize..8) {
                let (n, k) = (nt * 32, ks * 16);
                prop_assert_eq!((n * k * 4) as f64 / packed_weight_bytes(n, k) as f64, 16.0);
            }
        }
    }
}

//! Integer GEMM over 2-bit packed weights.
//!
//! [`gemm_packed_blocked`] is the production kernel. Work is split over
//! 32-column output tiles; inside a tile the K dimension is walked one
//! 16-deep slab at a time, each slab's 32x16 fragment is decoded once into a
//! scratch tile, and that tile is reused for every `m_block`-row block of
//! activations. [`gemm_reference`] (unpacked codes, triple loop) is the oracle
//! and [`gemm_packed_naive`] decodes a field from the packed words at every
//! multiply, which is the baseline the benchmark compares against.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::packing::{reserved_field, PackedWeightTiles, TILE_K, TILE_N};
use crate::quantize::{
    absmax_quantize, dequantize, IntAccumulatorMatrix, QuantizedActivationMatrix,
    TernaryWeightMatrix,
};
use crate::tensor::FloatMatrix;

/// Blocking of the packed kernel. `n_block`/`k_block` are fixed by the
/// packing layout; only the activation block height is tunable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGeometry {
    m_block: usize,
}

impl TileGeometry {
    pub const DEFAULT_M_BLOCK: usize = 8;

    pub fn new(m_block: usize) -> Result<Self> {
        if m_block == 0 {
            return Err(Error::InvalidConfig("m_block must be positive".into()));
        }
        Ok(Self { m_block })
    }

    #[inline]
    pub fn m_block(&self) -> usize {
        self.m_block
    }

    #[inline]
    pub fn n_block(&self) -> usize {
        TILE_N
    }

    #[inline]
    pub fn k_block(&self) -> usize {
        TILE_K
    }
}

impl Default for TileGeometry {
    fn default() -> Self {
        Self {
            m_block: Self::DEFAULT_M_BLOCK,
        }
    }
}

/// Byte tallies for one or more kernel invocations. Safe to share between
/// worker threads.
#[derive(Debug, Default)]
pub struct TrafficCounter {
    weight_bytes_read: AtomicU64,
    activation_bytes_read: AtomicU64,
    output_bytes_written: AtomicU64,
}

impl TrafficCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn weight_bytes_read(&self) -> u64 {
        self.weight_bytes_read.load(Ordering::Relaxed)
    }

    pub fn activation_bytes_read(&self) -> u64 {
        self.activation_bytes_read.load(Ordering::Relaxed)
    }

    pub fn output_bytes_written(&self) -> u64 {
        self.output_bytes_written.load(Ordering::Relaxed)
    }

    fn add(&self, weight: u64, activation: u64, output: u64) {
        self.weight_bytes_read.fetch_add(weight, Ordering::Relaxed);
        self.activation_bytes_read
            .fetch_add(activation, Ordering::Relaxed);
        self.output_bytes_written
            .fetch_add(output, Ordering::Relaxed);
    }
}

/// `out[i][j] = sum_k a[i][k] * codes[k][j]` in 32-bit integers.
pub fn gemm_reference(
    a: &QuantizedActivationMatrix,
    t: &TernaryWeightMatrix,
) -> Result<IntAccumulatorMatrix> {
    if a.cols() != t.rows() {
        return Err(Error::dims("gemm_reference", t.rows(), a.cols()));
    }
    let (m, k, n) = (a.rows(), a.cols(), t.cols());
    let codes = t.codes();
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a_row[kk] as i32;
            for (o, &c) in out_row.iter_mut().zip(&codes[kk * n..(kk + 1) * n]) {
                *o += av * c as i32;
            }
        }
    }
    IntAccumulatorMatrix::new(m, n, out)
}

/// Multiplies against packed weights, decoding the 2-bit field for every
/// single product. Rows run in parallel on the current rayon pool.
pub fn gemm_packed_naive(
    a: &QuantizedActivationMatrix,
    p: &PackedWeightTiles,
) -> Result<IntAccumulatorMatrix> {
    if a.cols() != p.k_in() {
        return Err(Error::dims("gemm_packed_naive", p.k_in(), a.cols()));
    }
    let (m, n) = (a.rows(), p.n_out());
    let words = p.words();
    let mut out = vec![0i32; m * n];
    if n > 0 {
        out.par_chunks_mut(n)
            .enumerate()
            .try_for_each(|(i, out_row)| -> Result<()> {
                let a_row = a.row(i);
                for (j, o) in out_row.iter_mut().enumerate() {
                    let mut acc = 0i32;
                    for (kk, &av) in a_row.iter().enumerate() {
                        let w = p.word_index(kk, j);
                        let field = (words[w] >> (2 * (kk % TILE_K))) & 0b11;
                        if field == 0b11 {
                            return Err(Error::CorruptCode {
                                word: w,
                                field: kk % TILE_K,
                            });
                        }
                        acc += av as i32 * (field as i32 - 1);
                    }
                    *o = acc;
                }
                Ok(())
            })?;
    }
    IntAccumulatorMatrix::new(m, n, out)
}

/// Blocked GEMM over packed weights. Output tiles run in parallel on the
/// current rayon pool; the result does not depend on scheduling.
///
/// With a `counter`, each packed word is tallied once per slab pass and each
/// activation byte once per (slab, row block).
pub fn gemm_packed_blocked(
    a: &QuantizedActivationMatrix,
    p: &PackedWeightTiles,
    geom: TileGeometry,
    counter: Option<&TrafficCounter>,
) -> Result<IntAccumulatorMatrix> {
    if a.cols() != p.k_in() {
        return Err(Error::dims("gemm_packed_blocked", p.k_in(), a.cols()));
    }
    let (m, k, n) = (a.rows(), a.cols(), p.n_out());
    let n_tiles = p.n_tiles();
    let k_slabs = p.k_slabs();
    let m_block = geom.m_block();
    let values = a.values();

    let tiles: Vec<Vec<i32>> = (0..n_tiles)
        .into_par_iter()
        .map(|nt| -> Result<Vec<i32>> {
            let mut acc = vec![0i32; m * TILE_N];
            // Fragment transposed to k-major so each activation scales a
            // full 32-lane row of codes.
            let mut frag = [[0i16; TILE_N]; TILE_K];
            let (mut weight_bytes, mut act_bytes) = (0u64, 0u64);

            for slab in 0..k_slabs {
                // Decode the fragment once for all row blocks.
                for (lane, &word) in p.fragment(slab, nt).iter().enumerate() {
                    if let Some(field) = reserved_field(word) {
                        return Err(Error::CorruptCode {
                            word: (slab * n_tiles + nt) * TILE_N + lane,
                            field,
                        });
                    }
                    for (kk, row) in frag.iter_mut().enumerate() {
                        row[lane] = ((word >> (2 * kk)) & 0b11) as i16 - 1;
                    }
                }
                weight_bytes += (TILE_N * 4) as u64;

                let k0 = slab * TILE_K;
                let k_len = TILE_K.min(k - k0);
                for m0 in (0..m).step_by(m_block) {
                    let m1 = (m0 + m_block).min(m);
                    act_bytes += ((m1 - m0) * k_len) as u64;
                    for i in m0..m1 {
                        let mut a16 = [0i8; TILE_K];
                        a16[..k_len].copy_from_slice(&values[i * k + k0..i * k + k0 + k_len]);
                        let acc_row: &mut [i32; TILE_N] = (&mut acc[i * TILE_N..(i + 1) * TILE_N])
                            .try_into()
                            .expect("tile row");
                        slab_row(&a16, &frag, acc_row);
                    }
                }
            }

            let width = TILE_N.min(n - nt * TILE_N);
            if let Some(c) = counter {
                c.add(weight_bytes, act_bytes, (m * width * 4) as u64);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut out = vec![0i32; m * n];
    for (nt, tile) in tiles.iter().enumerate() {
        let n0 = nt * TILE_N;
        let width = TILE_N.min(n - n0);
        for i in 0..m {
            out[i * n + n0..i * n + n0 + width]
                .copy_from_slice(&tile[i * TILE_N..i * TILE_N + width]);
        }
    }
    IntAccumulatorMatrix::new(m, n, out)
}

/// Adds one slab's contribution to a row of 32 accumulators. At most 16
/// products of magnitude <= 128 are summed, so the partial sums fit in i16.
#[cfg(target_arch = "x86_64")]
#[inline(always)]
fn slab_row(a: &[i8; TILE_K], frag: &[[i16; TILE_N]; TILE_K], acc: &mut [i32; TILE_N]) {
    // SAFETY: SSE2 is part of the x86_64 baseline.
    unsafe { slab_row_sse2(a, frag, acc) }
}

#[cfg(not(target_arch = "x86_64"))]
#[inline(always)]
fn slab_row(a: &[i8; TILE_K], frag: &[[i16; TILE_N]; TILE_K], acc: &mut [i32; TILE_N]) {
    slab_row_portable(a, frag, acc)
}

#[cfg_attr(target_arch = "x86_64", allow(dead_code))]
fn slab_row_portable(a: &[i8; TILE_K], frag: &[[i16; TILE_N]; TILE_K], acc: &mut [i32; TILE_N]) {
    let mut part = [0i16; TILE_N];
    for (&av, codes) in a.iter().zip(frag) {
        for (p, &c) in part.iter_mut().zip(codes) {
            *p += av as i16 * c;
        }
    }
    for (o, &p) in acc.iter_mut().zip(&part) {
        *o += p as i32;
    }
}

// Left to itself the compiler vectorizes across k with strided gathers;
// spelling out the 4 x 8-lane rows keeps the broadcast-multiply shape.
#[cfg(target_arch = "x86_64")]
#[inline(always)]
unsafe fn slab_row_sse2(a: &[i8; TILE_K], frag: &[[i16; TILE_N]; TILE_K], acc: &mut [i32; TILE_N]) {
    use std::arch::x86_64::*;
    let mut part = [_mm_setzero_si128(); TILE_N / 8];
    for (&av, codes) in a.iter().zip(frag) {
        let av = _mm_set1_epi16(av as i16);
        let row = codes.as_ptr() as *const __m128i;
        for (c, p) in part.iter_mut().enumerate() {
            *p = _mm_add_epi16(*p, _mm_mullo_epi16(av, _mm_loadu_si128(row.add(c))));
        }
    }
    let out = acc.as_mut_ptr() as *mut __m128i;
    for (c, &p) in part.iter().enumerate() {
        // Sign-extend each half to i32 and accumulate.
        let lo = _mm_srai_epi32(_mm_unpacklo_epi16(p, p), 16);
        let hi = _mm_srai_epi32(_mm_unpackhi_epi16(p, p), 16);
        let (o_lo, o_hi) = (out.add(2 * c), out.add(2 * c + 1));
        _mm_storeu_si128(o_lo, _mm_add_epi32(_mm_loadu_si128(o_lo), lo));
        _mm_storeu_si128(o_hi, _mm_add_epi32(_mm_loadu_si128(o_hi), hi));
    }
}

/// BitLinear forward over packed weights: absmax-quantize `a`, run the
/// blocked kernel, dequantize with the per-row scales and the weight scale.
pub fn bitlinear_forward_packed(
    a: &FloatMatrix,
    p: &PackedWeightTiles,
    eps: f32,
) -> Result<FloatMatrix> {
    if a.cols() != p.k_in() {
        return Err(Error::dims("bitlinear_forward_packed", p.k_in(), a.cols()));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Ok(FloatMatrix::zeros(a.rows(), p.n_out()));
    }
    let q = absmax_quantize(a, eps)?;
    let acc = gemm_packed_blocked(&q, p, TileGeometry::default(), None)?;
    dequantize(&acc, q.gamma(), p.beta())
}

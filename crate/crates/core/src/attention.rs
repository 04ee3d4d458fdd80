//! Scaled dot-product attention with per-head (MHSA) or shared (MQA) key and
//! value projections.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::tensor::{matmul_f32, softmax_rows, FloatMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Every head has its own K/V projection (`D x D` in total).
    Mhsa,
    /// All heads share one `D x d_h` K and V projection.
    Mqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    embed_dim: usize,
    heads: usize,
    mode: AttentionMode,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, heads: usize, mode: AttentionMode) -> Result<Self> {
        if heads == 0 || embed_dim == 0 || !embed_dim.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {embed_dim} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(Self {
            embed_dim,
            heads,
            mode,
        })
    }

    #[inline]
    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    #[inline]
    pub fn heads(&self) -> usize {
        self.heads
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    #[inline]
    pub fn mode(&self) -> AttentionMode {
        self.mode
    }

    /// Output width of the K and V projections.
    pub fn kv_width(&self) -> usize {
        match self.mode {
            AttentionMode::Mhsa => self.embed_dim,
            AttentionMode::Mqa => self.head_dim(),
        }
    }
}

/// Q/K/V/O projections. Q and O are always `D x D`; K and V are `D x D`
/// under MHSA (heads concatenated) and `D x d_h` under MQA.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
}

impl AttentionWeights {
    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        let d = cfg.embed_dim();
        let kv = cfg.kv_width();
        for (name, lin, out) in [
            ("w_q", &self.w_q, d),
            ("w_k", &self.w_k, kv),
            ("w_v", &self.w_v, kv),
            ("w_o", &self.w_o, d),
        ] {
            if lin.in_features() != d || lin.out_features() != out {
                return Err(Error::dims(
                    "AttentionWeights",
                    format!("{name} {d}x{out}"),
                    format!("{}x{}", lin.in_features(), lin.out_features()),
                ));
            }
        }
        Ok(())
    }
}

impl AttentionWeights {
    /// MHSA weights equivalent to these MQA weights: the shared K and V
    /// projections are replicated once per head.
    pub fn expand_shared_kv(&self, cfg: &AttentionConfig) -> Result<AttentionWeights> {
        if cfg.mode() != AttentionMode::Mqa {
            return Err(Error::InvalidConfig(
                "expand_shared_kv expects MQA weights".into(),
            ));
        }
        self.validate(cfg)?;
        Ok(AttentionWeights {
            w_q: self.w_q.clone(),
            w_k: self.w_k.tile_columns(cfg.heads())?,
            w_v: self.w_v.tile_columns(cfg.heads())?,
            w_o: self.w_o.clone(),
        })
    }
}

/// `softmax(q k^T / sqrt(d_k)) v`.
pub fn scaled_dot_attention(
    q: &FloatMatrix,
    k: &FloatMatrix,
    v: &FloatMatrix,
) -> Result<FloatMatrix> {
    if q.cols() != k.cols() {
        return Err(Error::dims("scaled_dot_attention", q.cols(), k.cols()));
    }
    if k.rows() != v.rows() {
        return Err(Error::dims("scaled_dot_attention", k.rows(), v.rows()));
    }
    let scale = (q.cols() as f32).sqrt();
    let scores = matmul_f32(q, &k.transpose())?.map(|s| s / scale);
    matmul_f32(&softmax_rows(&scores)?, v)
}

/// Multi-head self-attention with per-head K/V projections.
pub fn mhsa_forward(
    x: &FloatMatrix,
    w: &AttentionWeights,
    cfg: &AttentionConfig,
    eps: f32,
) -> Result<FloatMatrix> {
    if cfg.mode() != AttentionMode::Mhsa {
        return Err(Error::InvalidConfig(
            "mhsa_forward needs an MHSA config".into(),
        ));
    }
    attention_forward(x, w, cfg, eps)
}

/// Multi-query attention: per-head queries against one shared K/V.
pub fn mqa_forward(
    x: &FloatMatrix,
    w: &AttentionWeights,
    cfg: &AttentionConfig,
    eps: f32,
) -> Result<FloatMatrix> {
    if cfg.mode() != AttentionMode::Mqa {
        return Err(Error::InvalidConfig(
            "mqa_forward needs an MQA config".into(),
        ));
    }
    attention_forward(x, w, cfg, eps)
}

/// Dispatches on `cfg.mode()`.
pub fn attention_forward(
    x: &FloatMatrix,
    w: &AttentionWeights,
    cfg: &AttentionConfig,
    eps: f32,
) -> Result<FloatMatrix> {
    if x.cols() != cfg.embed_dim() {
        return Err(Error::dims("attention", cfg.embed_dim(), x.cols()));
    }
    w.validate(cfg)?;
    let dh = cfg.head_dim();
    let q = w.w_q.forward(x, eps)?;
    let k = w.w_k.forward(x, eps)?;
    let v = w.w_v.forward(x, eps)?;

    let heads: Vec<FloatMatrix> = (0..cfg.heads())
        .into_par_iter()
        .map(|h| {
            let q_h = q.columns(h * dh, dh)?;
            match cfg.mode() {
                AttentionMode::Mhsa => {
                    scaled_dot_attention(&q_h, &k.columns(h * dh, dh)?, &v.columns(h * dh, dh)?)
                }
                AttentionMode::Mqa => scaled_dot_attention(&q_h, &k, &v),
            }
        })
        .collect::<Result<_>>()?;

    w.w_o.forward(&FloatMatrix::hcat(&heads)?, eps)
}

/// Projection parameters of one attention block (no biases).
pub fn attn_param_count(cfg: &AttentionConfig) -> usize {
    let (d, dh, h) = (cfg.embed_dim(), cfg.head_dim(), cfg.heads());
    match cfg.mode() {
        AttentionMode::Mhsa => 4 * d * dh * h,
        AttentionMode::Mqa => 2 * d * dh * h + 2 * d * dh,
    }
}

/// Parameters in the K and V projections alone.
pub fn kv_param_count(cfg: &AttentionConfig) -> usize {
    2 * cfg.embed_dim() * cfg.kv_width()
}

//! The ternary vision transformer: configuration, weights, forward pass and
//! parameter/size accounting.
//!
//! Blocks are pre-norm residual (`x += attn(ln1(x)); x += ffn(ln2(x))`), the
//! FFN is `gelu(x W_up) W_down` without biases, and the class-token row of the
//! final layer norm feeds a linear head with bias.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{attention_forward, AttentionConfig, AttentionMode, AttentionWeights};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::packing::packed_weight_bytes;
use crate::quantize::DEFAULT_EPS;
use crate::tensor::{gelu, layernorm, matmul_f32, FloatMatrix, FloatVector};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f32 = 1e-5;

/// Which linear-layer families run ternary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TernarySet {
    pub ffn: bool,
    pub attn_qkv: bool,
    pub attn_out: bool,
}

impl TernarySet {
    pub const NONE: TernarySet = TernarySet {
        ffn: false,
        attn_qkv: false,
        attn_out: false,
    };
    pub const FFN: TernarySet = TernarySet {
        ffn: true,
        attn_qkv: false,
        attn_out: false,
    };
    pub const ALL: TernarySet = TernarySet {
        ffn: true,
        attn_qkv: true,
        attn_out: true,
    };

    pub fn contains(&self, role: Role) -> bool {
        match role {
            Role::Ffn => self.ffn,
            Role::AttnQkv => self.attn_qkv,
            Role::AttnOut => self.attn_out,
            _ => false,
        }
    }

    pub fn bits(&self) -> u8 {
        self.ffn as u8 | (self.attn_qkv as u8) << 1 | (self.attn_out as u8) << 2
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits & !0b111 != 0 {
            return Err(Error::InvalidConfig(format!(
                "unknown ternary flags {bits:#x}"
            )));
        }
        Ok(Self {
            ffn: bits & 1 != 0,
            attn_qkv: bits & 2 != 0,
            attn_out: bits & 4 != 0,
        })
    }
}

impl FromStr for TernarySet {
    type Err = Error;

    /// Comma-separated subset of `ffn`, `attn_qkv`, `attn_out` (or `none`/`all`).
    fn from_str(s: &str) -> Result<Self> {
        let mut set = TernarySet::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "all" => set = TernarySet::ALL,
                "ffn" => set.ffn = true,
                "attn_qkv" => set.attn_qkv = true,
                "attn_out" => set.attn_out = true,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown ternary layer `{other}`"
                    )))
                }
            }
        }
        Ok(set)
    }
}

impl fmt::Display for TernarySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.ffn {
            parts.push("ffn");
        }
        if self.attn_qkv {
            parts.push("attn_qkv");
        }
        if self.attn_out {
            parts.push("attn_out");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_mult: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub attn_mode: AttentionMode,
    pub ternary: TernarySet,
}

impl ModelConfig {
    /// L=3, H=8, E_d=512, 4x FFN, MQA, 16-pixel patches on 224x224 RGB,
    /// ternary FFN.
    pub fn reference() -> Self {
        Self {
            layers: 3,
            heads: 8,
            embed_dim: 512,
            ffn_mult: 4,
            patch_size: 16,
            image_size: 224,
            in_channels: 3,
            num_classes: 9,
            attn_mode: AttentionMode::Mqa,
            ternary: TernarySet::FFN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("ffn_mult", self.ffn_mult),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn ffn_dim(&self) -> usize {
        self.embed_dim * self.ffn_mult
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.embed_dim, self.heads, self.attn_mode)
    }
}

/// Parameter role; drives precision selection and accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    PatchEmbed,
    PosEmbed,
    ClassToken,
    Norm,
    AttnQkv,
    AttnOut,
    Ffn,
    Head,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::PatchEmbed,
        Role::PosEmbed,
        Role::ClassToken,
        Role::Norm,
        Role::AttnQkv,
        Role::AttnOut,
        Role::Ffn,
        Role::Head,
    ];

    pub fn supports_ternary(self) -> bool {
        matches!(self, Role::AttnQkv | Role::AttnOut | Role::Ffn)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Role> {
        Role::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::PatchEmbed => "patch_embed",
            Role::PosEmbed => "pos_embed",
            Role::ClassToken => "class_token",
            Role::Norm => "norm",
            Role::AttnQkv => "attn_qkv",
            Role::AttnOut => "attn_out",
            Role::Ffn => "ffn",
            Role::Head => "head",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

/// Storage precision of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    Bf16,
    TernaryPacked,
}

impl Precision {
    pub fn code(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::Bf16 => 1,
            Precision::TernaryPacked => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Precision> {
        match code {
            0 => Some(Precision::F32),
            1 => Some(Precision::Bf16),
            2 => Some(Precision::TernaryPacked),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::Bf16 => "bf16",
            Precision::TernaryPacked => "ternary",
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "bf16" | "16" | "f16" => Ok(Precision::Bf16),
            "ternary" | "ternary-packed" | "w2" => Ok(Precision::TernaryPacked),
            other => Err(Error::UnsupportedPrecision {
                precision: other.to_string(),
                role: "any".into(),
            }),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.tag())
    }
}

/// Storage precision per role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrecisionMap {
    map: BTreeMap<Role, Precision>,
}

impl PrecisionMap {
    /// Ternary roles from `ternary`, everything else at `dense`.
    pub fn new(ternary: TernarySet, dense: Precision) -> Self {
        let map = Role::ALL
            .iter()
            .map(|&r| {
                let p = if ternary.contains(r) {
                    Precision::TernaryPacked
                } else {
                    dense
                };
                (r, p)
            })
            .collect();
        Self { map }
    }

    /// The config's ternary set with full-precision dense layers.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        Self::new(cfg.ternary, Precision::F32)
    }

    pub fn set(&mut self, role: Role, precision: Precision) -> Result<()> {
        if precision == Precision::TernaryPacked && !role.supports_ternary() {
            return Err(Error::UnsupportedPrecision {
                precision: precision.tag().into(),
                role: role.name().into(),
            });
        }
        self.map.insert(role, precision);
        Ok(())
    }

    pub fn get(&self, role: Role) -> Precision {
        self.map.get(&role).copied().unwrap_or(Precision::F32)
    }

    pub fn validate(&self) -> Result<()> {
        for (&role, &p) in &self.map {
            if p == Precision::TernaryPacked && !role.supports_ternary() {
                return Err(Error::UnsupportedPrecision {
                    precision: p.tag().into(),
                    role: role.name().into(),
                });
            }
        }
        Ok(())
    }

    /// The ternary set implied by this map.
    pub fn ternary_set(&self) -> TernarySet {
        TernarySet {
            ffn: self.get(Role::Ffn) == Precision::TernaryPacked,
            attn_qkv: self.get(Role::AttnQkv) == Precision::TernaryPacked,
            attn_out: self.get(Role::AttnOut) == Precision::TernaryPacked,
        }
    }
}

/// Name, role and shape of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub role: Role,
    pub dims: Vec<usize>,
}

impl TensorSpec {
    fn new(name: impl Into<String>, role: Role, dims: &[usize]) -> Self {
        Self {
            name: name.into(),
            role,
            dims: dims.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_matrix(&self) -> bool {
        self.dims.len() == 2
    }
}

/// Every tensor a model with `cfg` stores, in canonical order.
pub fn tensor_manifest(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let d = cfg.embed_dim;
    let kv = match cfg.attn_mode {
        AttentionMode::Mhsa => d,
        AttentionMode::Mqa => cfg.head_dim(),
    };
    let f = cfg.ffn_dim();
    let mut out = vec![
        TensorSpec::new(
            "patch_embed.weight",
            Role::PatchEmbed,
            &[cfg.patch_dim(), d],
        ),
        TensorSpec::new("patch_embed.bias", Role::PatchEmbed, &[d]),
        TensorSpec::new("class_token", Role::ClassToken, &[d]),
        TensorSpec::new("pos_embed", Role::PosEmbed, &[cfg.tokens(), d]),
    ];
    for i in 0..cfg.layers {
        let p = format!("blocks.{i}");
        out.extend([
            TensorSpec::new(format!("{p}.norm1.gain"), Role::Norm, &[d]),
            TensorSpec::new(format!("{p}.norm1.bias"), Role::Norm, &[d]),
            TensorSpec::new(format!("{p}.attn.q"), Role::AttnQkv, &[d, d]),
            TensorSpec::new(format!("{p}.attn.k"), Role::AttnQkv, &[d, kv]),
            TensorSpec::new(format!("{p}.attn.v"), Role::AttnQkv, &[d, kv]),
            TensorSpec::new(format!("{p}.attn.o"), Role::AttnOut, &[d, d]),
            TensorSpec::new(format!("{p}.norm2.gain"), Role::Norm, &[d]),
            TensorSpec::new(format!("{p}.norm2.bias"), Role::Norm, &[d]),
            TensorSpec::new(format!("{p}.ffn.up"), Role::Ffn, &[d, f]),
            TensorSpec::new(format!("{p}.ffn.down"), Role::Ffn, &[f, d]),
        ]);
    }
    out.extend([
        TensorSpec::new("norm.gain", Role::Norm, &[d]),
        TensorSpec::new("norm.bias", Role::Norm, &[d]),
        TensorSpec::new("head.weight", Role::Head, &[d, cfg.num_classes]),
        TensorSpec::new("head.bias", Role::Head, &[cfg.num_classes]),
    ]);
    out
}

/// Exact parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCounts {
    pub patch_embed: usize,
    pub pos_embed: usize,
    pub class_token: usize,
    pub attention: usize,
    pub ffn: usize,
    pub norms: usize,
    pub head: usize,
    pub total: usize,
}

pub fn param_count(cfg: &ModelConfig) -> ParamCounts {
    let mut c = ParamCounts::default();
    for t in tensor_manifest(cfg) {
        let n = t.numel();
        match t.role {
            Role::PatchEmbed => c.patch_embed += n,
            Role::PosEmbed => c.pos_embed += n,
            Role::ClassToken => c.class_token += n,
            Role::Norm => c.norms += n,
            Role::AttnQkv | Role::AttnOut => c.attention += n,
            Role::Ffn => c.ffn += n,
            Role::Head => c.head += n,
        }
        c.total += n;
    }
    c
}

/// Bytes needed to store one tensor at `precision`. Ternary tensors add two
/// bytes for their 16-bit scale.
pub fn tensor_bytes(spec: &TensorSpec, precision: Precision) -> Result<usize> {
    match precision {
        Precision::F32 => Ok(4 * spec.numel()),
        Precision::Bf16 => Ok(2 * spec.numel()),
        Precision::TernaryPacked => {
            if !spec.role.supports_ternary() || !spec.is_matrix() {
                return Err(Error::UnsupportedPrecision {
                    precision: precision.tag().into(),
                    role: spec.name.clone(),
                });
            }
            Ok(packed_weight_bytes(spec.dims[1], spec.dims[0]) + 2)
        }
    }
}

/// Total stored bytes for the model under `precision`. Per-row activation
/// scales are computed at runtime and not counted.
pub fn model_size_bytes(cfg: &ModelConfig, precision: &PrecisionMap) -> Result<usize> {
    precision.validate()?;
    tensor_manifest(cfg)
        .iter()
        .map(|t| tensor_bytes(t, precision.get(t.role)))
        .sum()
}

/// Arithmetic operations (2 per multiply-accumulate) in one forward pass.
pub fn model_ops(cfg: &ModelConfig) -> u64 {
    let n = cfg.tokens() as u64;
    let d = cfg.embed_dim as u64;
    let dh = cfg.head_dim() as u64;
    let h = cfg.heads as u64;
    let kv = match cfg.attn_mode {
        AttentionMode::Mhsa => d,
        AttentionMode::Mqa => dh,
    };
    let f = cfg.ffn_dim() as u64;
    let patch = 2 * cfg.num_patches() as u64 * cfg.patch_dim() as u64 * d;
    let proj = 2 * n * d * (2 * d + 2 * kv);
    let scores = 2 * 2 * h * n * n * dh;
    let ffn = 2 * 2 * n * d * f;
    let head = 2 * d * cfg.num_classes as u64;
    patch + cfg.layers as u64 * (proj + scores + ffn) + head
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: FloatVector,
    pub bias: FloatVector,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: FloatVector::filled(dim, 1.0),
            bias: FloatVector::zeros(dim),
        }
    }

    pub fn apply(&self, x: &FloatMatrix) -> Result<FloatMatrix> {
        layernorm(x, &self.gain, &self.bias, LN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1: LayerNormParams,
    pub attn: AttentionWeights,
    pub norm2: LayerNormParams,
    pub ffn_up: Linear,
    pub ffn_down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub patch_embed: FloatMatrix,
    pub patch_bias: FloatVector,
    pub class_token: FloatVector,
    pub pos_embed: FloatMatrix,
    pub blocks: Vec<BlockWeights>,
    pub norm: LayerNormParams,
    pub head: FloatMatrix,
    pub head_bias: FloatVector,
}

fn check_matrix(name: &str, m: &FloatMatrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::DimensionMismatch {
            op: "ModelWeights",
            expected: format!("{name} {rows}x{cols}"),
            found: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    Ok(())
}

fn check_vector(name: &str, v: &FloatVector, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::DimensionMismatch {
            op: "ModelWeights",
            expected: format!("{name} of length {len}"),
            found: v.len().to_string(),
        });
    }
    Ok(())
}

fn check_linear(name: &str, l: &Linear, rows: usize, cols: usize) -> Result<()> {
    if (l.in_features(), l.out_features()) != (rows, cols) {
        return Err(Error::DimensionMismatch {
            op: "ModelWeights",
            expected: format!("{name} {rows}x{cols}"),
            found: format!("{}x{}", l.in_features(), l.out_features()),
        });
    }
    match l {
        Linear::Ternary(t) if !t.beta().is_finite() => Err(Error::NonFinite(name.into())),
        Linear::Packed(p) if !p.beta().is_finite() => Err(Error::NonFinite(name.into())),
        _ => Ok(()),
    }
}

impl ModelWeights {
    /// Checks every shape against `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let f = cfg.ffn_dim();
        check_matrix("patch_embed", &self.patch_embed, cfg.patch_dim(), d)?;
        check_vector("patch_bias", &self.patch_bias, d)?;
        check_vector("class_token", &self.class_token, d)?;
        check_matrix("pos_embed", &self.pos_embed, cfg.tokens(), d)?;
        if self.blocks.len() != cfg.layers {
            return Err(Error::dims(
                "ModelWeights blocks",
                cfg.layers,
                self.blocks.len(),
            ));
        }
        let attn = cfg.attention()?;
        for (i, b) in self.blocks.iter().enumerate() {
            check_vector(&format!("blocks.{i}.norm1"), &b.norm1.gain, d)?;
            check_vector(&format!("blocks.{i}.norm1"), &b.norm1.bias, d)?;
            check_vector(&format!("blocks.{i}.norm2"), &b.norm2.gain, d)?;
            check_vector(&format!("blocks.{i}.norm2"), &b.norm2.bias, d)?;
            b.attn.validate(&attn)?;
            check_linear(&format!("blocks.{i}.ffn.up"), &b.ffn_up, d, f)?;
            check_linear(&format!("blocks.{i}.ffn.down"), &b.ffn_down, f, d)?;
        }
        check_vector("norm.gain", &self.norm.gain, d)?;
        check_vector("norm.bias", &self.norm.bias, d)?;
        check_matrix("head", &self.head, d, cfg.num_classes)?;
        check_vector("head_bias", &self.head_bias, cfg.num_classes)
    }

    /// All-zero float weights (norm gains included).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let kv = match cfg.attn_mode {
            AttentionMode::Mhsa => d,
            AttentionMode::Mqa => cfg.head_dim(),
        };
        let f = cfg.ffn_dim();
        let zero_norm = || LayerNormParams {
            gain: FloatVector::zeros(d),
            bias: FloatVector::zeros(d),
        };
        Self {
            patch_embed: FloatMatrix::zeros(cfg.patch_dim(), d),
            patch_bias: FloatVector::zeros(d),
            class_token: FloatVector::zeros(d),
            pos_embed: FloatMatrix::zeros(cfg.tokens(), d),
            blocks: (0..cfg.layers)
                .map(|_| BlockWeights {
                    norm1: zero_norm(),
                    attn: AttentionWeights {
                        w_q: Linear::Float(FloatMatrix::zeros(d, d)),
                        w_k: Linear::Float(FloatMatrix::zeros(d, kv)),
                        w_v: Linear::Float(FloatMatrix::zeros(d, kv)),
                        w_o: Linear::Float(FloatMatrix::zeros(d, d)),
                    },
                    norm2: zero_norm(),
                    ffn_up: Linear::Float(FloatMatrix::zeros(d, f)),
                    ffn_down: Linear::Float(FloatMatrix::zeros(f, d)),
                })
                .collect(),
            norm: zero_norm(),
            head: FloatMatrix::zeros(d, cfg.num_classes),
            head_bias: FloatVector::zeros(cfg.num_classes),
        }
    }

    /// Random full-precision weights with fan-in scaled uniform init and unit
    /// norm gains.
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(cfg);
        let fill = |m: &mut FloatMatrix, rng: &mut dyn rand::RngCore| {
            let bound = (1.0 / m.rows().max(1) as f32).sqrt();
            for v in m.data_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        };
        fill(&mut w.patch_embed, rng);
        fill(&mut w.pos_embed, rng);
        fill(&mut w.head, rng);
        for v in w
            .class_token
            .data_mut()
            .iter_mut()
            .chain(w.patch_bias.data_mut())
        {
            *v = rng.gen_range(-0.1..0.1);
        }
        for v in w.head_bias.data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        let unit = |p: &mut LayerNormParams| {
            p.gain = FloatVector::filled(p.gain.len(), 1.0);
        };
        unit(&mut w.norm);
        for b in &mut w.blocks {
            unit(&mut b.norm1);
            unit(&mut b.norm2);
            for lin in [
                &mut b.attn.w_q,
                &mut b.attn.w_k,
                &mut b.attn.w_v,
                &mut b.attn.w_o,
                &mut b.ffn_up,
                &mut b.ffn_down,
            ] {
                if let Linear::Float(m) = lin {
                    fill(m, rng);
                }
            }
        }
        w
    }

    /// Applies `f` to every linear layer (attention projections and FFN).
    pub fn try_map_linears(
        &self,
        mut f: impl FnMut(Role, &Linear) -> Result<Linear>,
    ) -> Result<Self> {
        let mut out = self.clone();
        for b in &mut out.blocks {
            b.attn.w_q = f(Role::AttnQkv, &b.attn.w_q)?;
            b.attn.w_k = f(Role::AttnQkv, &b.attn.w_k)?;
            b.attn.w_v = f(Role::AttnQkv, &b.attn.w_v)?;
            b.attn.w_o = f(Role::AttnOut, &b.attn.w_o)?;
            b.ffn_up = f(Role::Ffn, &b.ffn_up)?;
            b.ffn_down = f(Role::Ffn, &b.ffn_down)?;
        }
        Ok(out)
    }

    /// Same model with every packed layer replaced by its unpacked codes.
    pub fn unpacked(&self) -> Result<Self> {
        self.try_map_linears(|_, l| l.unpacked())
    }
}

/// An `H x W x C` image with `f32` samples, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(
                "Image::new",
                height * width * channels,
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Cuts `image` into non-overlapping patches in raster order. Each row holds
/// one patch flattened as (row, column, channel).
pub fn patchify(image: &Image, cfg: &ModelConfig) -> Result<FloatMatrix> {
    if image.height != cfg.image_size
        || image.width != cfg.image_size
        || image.channels != cfg.in_channels
    {
        return Err(Error::dims(
            "patchify",
            format!("{0}x{0}x{1}", cfg.image_size, cfg.in_channels),
            format!("{}x{}x{}", image.height, image.width, image.channels),
        ));
    }
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for y in 0..p {
                let row = (py * p + y) * image.width + px * p;
                data.extend_from_slice(
                    &image.data[row * image.channels..(row + p) * image.channels],
                );
            }
        }
    }
    FloatMatrix::new(cfg.num_patches(), cfg.patch_dim(), data)
}

fn finite(m: FloatMatrix, layer: &str) -> Result<FloatMatrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite(layer.to_string()))
    }
}

/// Token embeddings after the final layer norm (`tokens x embed_dim`).
pub fn forward_features(
    image: &Image,
    weights: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<FloatMatrix> {
    weights.validate(cfg)?;
    let attn_cfg = cfg.attention()?;
    let patches = patchify(image, cfg)?;
    let embedded =
        matmul_f32(&patches, &weights.patch_embed)?.add_row_vector(&weights.patch_bias)?;
    let embedded = finite(embedded, "patch_embed")?;

    let mut rows = Vec::with_capacity(cfg.tokens() * cfg.embed_dim);
    rows.extend_from_slice(weights.class_token.data());
    rows.extend_from_slice(embedded.data());
    let tokens = FloatMatrix::new(cfg.tokens(), cfg.embed_dim, rows)?;
    let mut x = finite(tokens.add(&weights.pos_embed)?, "pos_embed")?;

    for (i, b) in weights.blocks.iter().enumerate() {
        let h = attention_forward(&b.norm1.apply(&x)?, &b.attn, &attn_cfg, DEFAULT_EPS)?;
        x = finite(x.add(&h)?, &format!("blocks.{i}.attn"))?;
        let up = b.ffn_up.forward(&b.norm2.apply(&x)?, DEFAULT_EPS)?;
        let up = finite(
            gelu(&finite(up, &format!("blocks.{i}.ffn.up"))?)?,
            &format!("blocks.{i}.ffn.act"),
        )?;
        let down = b.ffn_down.forward(&up, DEFAULT_EPS)?;
        x = finite(x.add(&down)?, &format!("blocks.{i}.ffn.down"))?;
    }
    finite(weights.norm.apply(&x)?, "norm")
}

/// Class logits for one image.
pub fn forward(image: &Image, weights: &ModelWeights, cfg: &ModelConfig) -> Result<FloatVector> {
    let features = forward_features(image, weights, cfg)?;
    let logits =
        matmul_f32(&features.row_matrix(0), &weights.head)?.add_row_vector(&weights.head_bias)?;
    let logits = finite(logits, "head")?;
    Ok(FloatVector::new(logits.into_data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::scaled_dot_attention;
    use crate::quantize::{absmean_quantize, bitlinear_forward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            embed_dim: 8,
            ffn_mult: 4,
            patch_size: 2,
            image_size: 4,
            in_channels: 1,
            num_classes: 3,
            attn_mode: AttentionMode::Mqa,
            ternary: TernarySet::FFN,
        }
    }

    fn random_image(cfg: &ModelConfig, rng: &mut impl Rng) -> Image {
        let n = cfg.image_size * cfg.image_size * cfg.in_channels;
        Image::new(
            cfg.image_size,
            cfg.image_size,
            cfg.in_channels,
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn patchify_raster_order() {
        let cfg = tiny();
        let img = Image::new(4, 4, 1, (0..16).map(|v| v as f32).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), (4, 4));
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);

        let c = Image::new(4, 4, 1, vec![0.7; 16]).unwrap();
        let p = patchify(&c, &cfg).unwrap();
        assert!((1..4).all(|i| p.row(i) == p.row(0)));

        assert!(patchify(&Image::new(4, 4, 2, vec![0.0; 32]).unwrap(), &cfg).is_err());
    }

    #[test]
    fn patchify_reference_shape() {
        let cfg = ModelConfig::reference();
        let img = Image::new(224, 224, 3, vec![0.0; 224 * 224 * 3]).unwrap();
        assert_eq!(patchify(&img, &cfg).unwrap().shape(), (196, 768));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = forward(
            &random_image(&cfg, &mut rng),
            &ModelWeights::zeros(&cfg),
            &cfg,
        )
        .unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_head_columns_swaps_logits() {
        let cfg = ModelConfig {
            num_classes: 2,
            ..tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = ModelWeights::random(&cfg, &mut rng);
        let img = random_image(&cfg, &mut rng);
        let a = forward(&img, &w, &cfg).unwrap();
        let mut s = w.clone();
        s.head = FloatMatrix::from_fn(8, 2, |i, j| w.head.get(i, 1 - j));
        s.head_bias = FloatVector::new(vec![w.head_bias.data()[1], w.head_bias.data()[0]]);
        let b = forward(&img, &s, &cfg).unwrap();
        assert_eq!(a.data()[0], b.data()[1]);
        assert_eq!(a.data()[1], b.data()[0]);
    }

    #[test]
    fn head_bias_shift_moves_all_logits() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = ModelWeights::random(&cfg, &mut rng);
        let img = random_image(&cfg, &mut rng);
        let a = forward(&img, &w, &cfg).unwrap();
        let mut s = w.clone();
        for v in s.head_bias.data_mut() {
            *v += 2.0;
        }
        let b = forward(&img, &s, &cfg).unwrap();
        let argmax = |v: &FloatVector| {
            v.data()
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1))
                .unwrap()
                .0
        };
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - x - 2.0).abs() < 1e-5);
        }
        assert_eq!(argmax(&a), argmax(&b));
    }

    // Step-by-step oracle composed directly from the module operations.
    #[test]
    fn forward_matches_compositional_oracle() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = ModelWeights::random(&cfg, &mut rng);
        for b in &mut w.blocks {
            for l in [&mut b.ffn_up, &mut b.ffn_down] {
                *l =
                    Linear::Ternary(absmean_quantize(&l.to_float().unwrap(), DEFAULT_EPS).unwrap());
            }
        }
        let img = random_image(&cfg, &mut rng);
        let got = forward(&img, &w, &cfg).unwrap();

        let fm = |l: &Linear| l.to_float().unwrap();
        let tern = |l: &Linear| match l {
            Linear::Ternary(t) => t.clone(),
            _ => unreachable!(),
        };
        let patches = patchify(&img, &cfg).unwrap();
        let emb = matmul_f32(&patches, &w.patch_embed).unwrap();
        let mut x = FloatMatrix::zeros(5, 8);
        for j in 0..8 {
            x.set(0, j, w.class_token.data()[j] + w.pos_embed.get(0, j));
            for i in 0..4 {
                x.set(
                    i + 1,
                    j,
                    emb.get(i, j) + w.patch_bias.data()[j] + w.pos_embed.get(i + 1, j),
                );
            }
        }
        let b = &w.blocks[0];
        let h = layernorm(&x, &b.norm1.gain, &b.norm1.bias, LN_EPS).unwrap();
        let q = matmul_f32(&h, &fm(&b.attn.w_q)).unwrap();
        let k = matmul_f32(&h, &fm(&b.attn.w_k)).unwrap();
        let v = matmul_f32(&h, &fm(&b.attn.w_v)).unwrap();
        let heads: Vec<_> = (0..2)
            .map(|hd| scaled_dot_attention(&q.columns(hd * 4, 4).unwrap(), &k, &v).unwrap())
            .collect();
        let a = matmul_f32(&FloatMatrix::hcat(&heads).unwrap(), &fm(&b.attn.w_o)).unwrap();
        let x = x.add(&a).unwrap();
        let h = layernorm(&x, &b.norm2.gain, &b.norm2.bias, LN_EPS).unwrap();
        let up = gelu(&bitlinear_forward(&h, &tern(&b.ffn_up), DEFAULT_EPS).unwrap()).unwrap();
        let x = x
            .add(&bitlinear_forward(&up, &tern(&b.ffn_down), DEFAULT_EPS).unwrap())
            .unwrap();
        let x = layernorm(&x, &w.norm.gain, &w.norm.bias, LN_EPS).unwrap();
        let logits = matmul_f32(&x.row_matrix(0), &w.head)
            .unwrap()
            .add_row_vector(&w.head_bias)
            .unwrap();
        assert_eq!(got.data(), logits.data());
    }

    #[test]
    fn forward_is_deterministic_and_packed_matches_unpacked() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = ModelWeights::random(&cfg, &mut rng)
            .try_map_linears(|_, l| {
                Ok(Linear::Ternary(absmean_quantize(&l.to_float()?, DEFAULT_EPS)?).packed())
            })
            .unwrap();
        let img = random_image(&cfg, &mut rng);
        let a = forward(&img, &w, &cfg).unwrap();
        assert_eq!(a, forward(&img, &w, &cfg).unwrap());
        assert_eq!(a, forward(&img, &w.unpacked().unwrap(), &cfg).unwrap());
    }

    #[test]
    fn non_finite_error_names_layer() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut w = ModelWeights::random(&cfg, &mut rng);
        w.pos_embed.set(0, 0, f32::INFINITY);
        let err = forward(&random_image(&cfg, &mut rng), &w, &cfg).unwrap_err();
        assert!(err.to_string().contains("pos_embed"), "{err}");
    }

    #[test]
    fn reference_config_accounting() {
        let cfg = ModelConfig::reference();
        let c = param_count(&cfg);
        assert_eq!(c.ffn / cfg.layers, 2_097_152);
        assert_eq!(c.attention / cfg.layers, 589_824);
        assert_eq!(
            c.attention,
            cfg.layers * crate::attention::attn_param_count(&cfg.attention().unwrap())
        );
        assert_eq!(
            c.total,
            c.patch_embed + c.pos_embed + c.class_token + c.attention + c.ffn + c.norms + c.head
        );
        let total = c.total as f64;
        assert!((8.2175e6..=9.0825e6).contains(&total), "{total}");

        let mhsa = ModelConfig {
            attn_mode: AttentionMode::Mhsa,
            ..cfg
        };
        let (d, dh, h) = (512, 64, 8);
        assert_eq!(param_count(&mhsa).total - c.total, 3 * 2 * d * dh * (h - 1));
    }

    #[test]
    fn size_accounting() {
        let cfg = tiny();
        let all_f32 = PrecisionMap::new(TernarySet::NONE, Precision::F32);
        assert_eq!(
            model_size_bytes(&cfg, &all_f32).unwrap(),
            4 * param_count(&cfg).total
        );

        let spec = TensorSpec::new("ffn.up", Role::Ffn, &[512, 2048]);
        assert_eq!(
            tensor_bytes(&spec, Precision::TernaryPacked).unwrap(),
            262_144 + 2
        );

        let mut bad = all_f32.clone();
        assert!(bad.set(Role::Head, Precision::TernaryPacked).is_err());
        assert!("int4".parse::<Precision>().is_err());
    }

    #[test]
    fn ternary_set_parsing() {
        assert_eq!("ffn".parse::<TernarySet>().unwrap(), TernarySet::FFN);
        assert_eq!(
            "ffn,attn_qkv,attn_out".parse::<TernarySet>().unwrap(),
            TernarySet::ALL
        );
        assert_eq!("none".parse::<TernarySet>().unwrap(), TernarySet::NONE);
        assert!("conv".parse::<TernarySet>().is_err());
        for bits in 0..8 {
            assert_eq!(TernarySet::from_bits(bits).unwrap().bits(), bits);
        }
    }
}

//! The `.bmvc` model container and float-to-ternary conversion.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "BMVC"
//!      4     4  format version (1)
//!      8    32  u32 x 8: layers, heads, embed_dim, ffn_mult, patch_size,
//!               image_size, in_channels, num_classes
//!     40     1  attention mode (0 = MHSA, 1 = MQA)
//!     41     1  ternary flags (bit 0 ffn, bit 1 attn_qkv, bit 2 attn_out)
//!     42     2  reserved (0)
//!     44     4  section count S
//!     48  8*C   f32 per-channel mean[C], then f32 per-channel std[C]
//!      .  80*S  section table
//!      .     .  payload
//! ```
//!
//! A section table entry is 80 bytes: name (48 bytes, NUL padded), role,
//! precision, ndims, reserved byte, `u32` dims[2], `u64` payload offset,
//! `u64` payload length, 4 reserved bytes. Payload encodings:
//!
//! * `f32`: the values, row-major.
//! * `bf16`: the upper 16 bits of each value after round-to-nearest-even.
//! * ternary: the packed `u32` words in kernel layout, then the scale as bf16.
//!
//! Sections are stored back to back, so the payload size equals
//! [`model_size_bytes`](crate::model::model_size_bytes).

use std::collections::BTreeMap;
use std::path::Path;

use crate::attention::{AttentionMode, AttentionWeights};
use crate::error::{Error, Result};
use crate::ften::Tensor;
use crate::linear::Linear;
use crate::model::{
    tensor_manifest, BlockWeights, LayerNormParams, ModelConfig, ModelWeights, Precision,
    PrecisionMap, Role, TensorSpec, TernarySet,
};
use crate::packing::{pack_ternary, PackedWeightTiles};
use crate::quantize::{
    absmean_quantize, bf16_bits_to_f32, f32_to_bf16_bits, round_to_bf16, TernaryWeightMatrix,
    DEFAULT_EPS,
};
use crate::tensor::{FloatMatrix, FloatVector};

pub const MAGIC: [u8; 4] = *b"BMVC";
pub const FORMAT_VERSION: u32 = 1;
pub const FIXED_HEADER_LEN: usize = 48;
pub const SECTION_ENTRY_LEN: usize = 80;
pub const SECTION_NAME_LEN: usize = 48;

/// Float tensors keyed by manifest name.
pub type TensorSet = BTreeMap<String, Tensor>;

/// Per-channel input standardization applied after scaling pixels to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::dims("Normalization", mean.len(), std.len()));
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig(
                "normalization std must be positive".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    /// mean 0.5, std 0.5 on every channel, mapping [0, 1] to [-1, 1].
    pub fn symmetric(channels: usize) -> Self {
        Self {
            mean: vec![0.5; channels],
            std: vec![0.5; channels],
        }
    }

    pub fn apply(&self, x: f32, channel: usize) -> f32 {
        (x - self.mean[channel]) / self.std[channel]
    }
}

/// A complete deployable model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub precision: PrecisionMap,
    pub weights: ModelWeights,
}

/// One row of the section table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionEntry {
    pub name: String,
    pub role: Role,
    pub precision: Precision,
    pub dims: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

/// Everything in a container except the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub sections: Vec<SectionEntry>,
}

impl ContainerHeader {
    pub fn header_len(&self) -> usize {
        header_len(self.config.in_channels, self.sections.len())
    }

    pub fn payload_len(&self) -> u64 {
        self.sections.iter().map(|s| s.length).sum()
    }
}

fn header_len(channels: usize, sections: usize) -> usize {
    FIXED_HEADER_LEN + 8 * channels + SECTION_ENTRY_LEN * sections
}

enum TensorRef<'a> {
    Matrix(&'a FloatMatrix),
    Vector(&'a FloatVector),
    Linear(&'a Linear),
}

/// Weight references in manifest order.
fn weight_refs(w: &ModelWeights) -> Vec<TensorRef<'_>> {
    use TensorRef::*;
    let mut out = vec![
        Matrix(&w.patch_embed),
        Vector(&w.patch_bias),
        Vector(&w.class_token),
        Matrix(&w.pos_embed),
    ];
    for b in &w.blocks {
        out.extend([
            Vector(&b.norm1.gain),
            Vector(&b.norm1.bias),
            Linear(&b.attn.w_q),
            Linear(&b.attn.w_k),
            Linear(&b.attn.w_v),
            Linear(&b.attn.w_o),
            Vector(&b.norm2.gain),
            Vector(&b.norm2.bias),
            Linear(&b.ffn_up),
            Linear(&b.ffn_down),
        ]);
    }
    out.extend([
        Vector(&w.norm.gain),
        Vector(&w.norm.bias),
        Matrix(&w.head),
        Vector(&w.head_bias),
    ]);
    out
}

/// A decoded section before assembly into [`ModelWeights`].
enum Decoded {
    Dense(Vec<f32>),
    Packed(PackedWeightTiles),
}

impl Decoded {
    fn matrix(self, spec: &TensorSpec) -> Result<FloatMatrix> {
        match self {
            Decoded::Dense(v) => FloatMatrix::new(spec.dims[0], spec.dims[1], v),
            Decoded::Packed(_) => Err(Error::MalformedSection {
                name: spec.name.clone(),
                reason: "role cannot be ternary".into(),
            }),
        }
    }

    fn vector(self, spec: &TensorSpec) -> Result<FloatVector> {
        match self {
            Decoded::Dense(v) => Ok(FloatVector::new(v)),
            Decoded::Packed(_) => Err(Error::MalformedSection {
                name: spec.name.clone(),
                reason: "role cannot be ternary".into(),
            }),
        }
    }

    fn linear(self, spec: &TensorSpec) -> Result<Linear> {
        match self {
            Decoded::Dense(v) => Ok(Linear::Float(FloatMatrix::new(
                spec.dims[0],
                spec.dims[1],
                v,
            )?)),
            Decoded::Packed(p) => Ok(Linear::Packed(p)),
        }
    }
}

/// Rebuilds weights from decoded sections given in manifest order.
fn assemble(cfg: &ModelConfig, decoded: Vec<(TensorSpec, Decoded)>) -> Result<ModelWeights> {
    let mut it = decoded.into_iter();
    let mut next = || it.next().expect("manifest-sized input");
    let mat = |n: &mut dyn FnMut() -> (TensorSpec, Decoded)| -> Result<FloatMatrix> {
        let (s, d) = n();
        d.matrix(&s)
    };
    let vec_ = |n: &mut dyn FnMut() -> (TensorSpec, Decoded)| -> Result<FloatVector> {
        let (s, d) = n();
        d.vector(&s)
    };
    let lin = |n: &mut dyn FnMut() -> (TensorSpec, Decoded)| -> Result<Linear> {
        let (s, d) = n();
        d.linear(&s)
    };
    let patch_embed = mat(&mut next)?;
    let patch_bias = vec_(&mut next)?;
    let class_token = vec_(&mut next)?;
    let pos_embed = mat(&mut next)?;
    let mut blocks = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let norm1 = LayerNormParams {
            gain: vec_(&mut next)?,
            bias: vec_(&mut next)?,
        };
        let attn = AttentionWeights {
            w_q: lin(&mut next)?,
            w_k: lin(&mut next)?,
            w_v: lin(&mut next)?,
            w_o: lin(&mut next)?,
        };
        let norm2 = LayerNormParams {
            gain: vec_(&mut next)?,
            bias: vec_(&mut next)?,
        };
        blocks.push(BlockWeights {
            norm1,
            attn,
            norm2,
            ffn_up: lin(&mut next)?,
            ffn_down: lin(&mut next)?,
        });
    }
    let norm = LayerNormParams {
        gain: vec_(&mut next)?,
        bias: vec_(&mut next)?,
    };
    let head = mat(&mut next)?;
    let head_bias = vec_(&mut next)?;
    let w = ModelWeights {
        patch_embed,
        patch_bias,
        class_token,
        pos_embed,
        blocks,
        norm,
        head,
        head_bias,
    };
    w.validate(cfg)?;
    Ok(w)
}

fn encode_dense(values: &[f32], precision: Precision, out: &mut Vec<u8>) {
    match precision {
        Precision::Bf16 => {
            for &v in values {
                out.extend_from_slice(&f32_to_bf16_bits(v).to_le_bytes());
            }
        }
        _ => {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn encode_section(
    spec: &TensorSpec,
    tensor: &TensorRef<'_>,
    precision: Precision,
    out: &mut Vec<u8>,
) -> Result<()> {
    let mismatch = |reason: &str| Error::MalformedSection {
        name: spec.name.clone(),
        reason: reason.to_string(),
    };
    match (tensor, precision) {
        (TensorRef::Matrix(m), Precision::F32 | Precision::Bf16) => {
            encode_dense(m.data(), precision, out)
        }
        (TensorRef::Vector(v), Precision::F32 | Precision::Bf16) => {
            encode_dense(v.data(), precision, out)
        }
        (TensorRef::Linear(Linear::Float(m)), Precision::F32 | Precision::Bf16) => {
            encode_dense(m.data(), precision, out)
        }
        (
            TensorRef::Linear(l @ (Linear::Ternary(_) | Linear::Packed(_))),
            Precision::TernaryPacked,
        ) => {
            let packed;
            let p = match l {
                Linear::Packed(p) => p,
                Linear::Ternary(t) => {
                    packed = pack_ternary(t);
                    &packed
                }
                Linear::Float(_) => unreachable!(),
            };
            for w in p.words() {
                out.extend_from_slice(&w.to_le_bytes());
            }
            out.extend_from_slice(&f32_to_bf16_bits(p.beta()).to_le_bytes());
        }
        (TensorRef::Linear(Linear::Float(_)), Precision::TernaryPacked) => {
            return Err(mismatch(
                "float weights in a ternary section; convert first",
            ))
        }
        (TensorRef::Linear(_), _) => return Err(mismatch("ternary weights in a dense section")),
        (_, Precision::TernaryPacked) => return Err(mismatch("role cannot be ternary")),
    }
    Ok(())
}

impl ModelContainer {
    /// Serializes the container. Dense bf16 sections and ternary scales are
    /// rounded to bfloat16 on the way out.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = &self.config;
        self.weights.validate(cfg)?;
        self.precision.validate()?;
        if self.precision.ternary_set() != cfg.ternary {
            return Err(Error::InvalidConfig(format!(
                "precision map ternary set `{}` disagrees with config `{}`",
                self.precision.ternary_set(),
                cfg.ternary
            )));
        }
        if self.normalization.mean.len() != cfg.in_channels {
            return Err(Error::dims(
                "normalization",
                cfg.in_channels,
                self.normalization.mean.len(),
            ));
        }
        let manifest = tensor_manifest(cfg);
        let refs = weight_refs(&self.weights);
        debug_assert_eq!(manifest.len(), refs.len());

        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(manifest.len());
        let base = header_len(cfg.in_channels, manifest.len()) as u64;
        for (spec, tensor) in manifest.iter().zip(&refs) {
            let precision = self.precision.get(spec.role);
            let start = payload.len();
            encode_section(spec, tensor, precision, &mut payload)?;
            entries.push(SectionEntry {
                name: spec.name.clone(),
                role: spec.role,
                precision,
                dims: spec.dims.clone(),
                offset: base + start as u64,
                length: (payload.len() - start) as u64,
            });
        }

        let mut out = Vec::with_capacity(base as usize + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [
            cfg.layers,
            cfg.heads,
            cfg.embed_dim,
            cfg.ffn_mult,
            cfg.patch_size,
            cfg.image_size,
            cfg.in_channels,
            cfg.num_classes,
        ] {
            out.extend_from_slice(&u32_field(v, "config")?.to_le_bytes());
        }
        out.push(match cfg.attn_mode {
            AttentionMode::Mhsa => 0,
            AttentionMode::Mqa => 1,
        });
        out.push(cfg.ternary.bits());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for v in self
            .normalization
            .mean
            .iter()
            .chain(&self.normalization.std)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for e in &entries {
            let name = e.name.as_bytes();
            if name.len() > SECTION_NAME_LEN {
                return Err(Error::MalformedSection {
                    name: e.name.clone(),
                    reason: "name longer than 48 bytes".into(),
                });
            }
            let mut field = [0u8; SECTION_NAME_LEN];
            field[..name.len()].copy_from_slice(name);
            out.extend_from_slice(&field);
            out.extend_from_slice(&[e.role.code(), e.precision.code(), e.dims.len() as u8, 0]);
            for i in 0..2 {
                let d = e.dims.get(i).copied().unwrap_or(0);
                out.extend_from_slice(&u32_field(d, &e.name)?.to_le_bytes());
            }
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.length.to_le_bytes());
            out.extend_from_slice(&[0; 4]);
        }
        debug_assert_eq!(out.len() as u64, base);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parses and fully validates a container.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = read_header(bytes)?;
        let cfg = header.config;
        let manifest = tensor_manifest(&cfg);

        let mut by_name: BTreeMap<&str, &SectionEntry> = BTreeMap::new();
        for s in &header.sections {
            if by_name.insert(s.name.as_str(), s).is_some() {
                return Err(Error::DuplicateTensor(s.name.clone()));
            }
        }
        let expected: BTreeMap<&str, &TensorSpec> =
            manifest.iter().map(|t| (t.name.as_str(), t)).collect();
        if let Some(extra) = by_name.keys().find(|n| !expected.contains_key(*n)) {
            return Err(Error::MalformedSection {
                name: extra.to_string(),
                reason: "not part of this model configuration".into(),
            });
        }

        let mut precision_by_role: BTreeMap<Role, Precision> = BTreeMap::new();
        let mut decoded = Vec::with_capacity(manifest.len());
        for spec in &manifest {
            let entry = by_name
                .get(spec.name.as_str())
                .ok_or_else(|| Error::MissingTensor(spec.name.clone()))?;
            let malformed = |reason: String| Error::MalformedSection {
                name: spec.name.clone(),
                reason,
            };
            if entry.role != spec.role {
                return Err(malformed(format!(
                    "role {} (expected {})",
                    entry.role, spec.role
                )));
            }
            if entry.dims != spec.dims {
                return Err(malformed(format!(
                    "dims {:?} (expected {:?})",
                    entry.dims, spec.dims
                )));
            }
            match precision_by_role.insert(spec.role, entry.precision) {
                Some(prev) if prev != entry.precision => {
                    return Err(malformed(format!(
                        "precision {} differs from other {} sections ({prev})",
                        entry.precision, spec.role
                    )))
                }
                _ => {}
            }
            let data = &bytes[entry.offset as usize..(entry.offset + entry.length) as usize];
            decoded.push((spec.clone(), decode_section(spec, entry.precision, data)?));
        }

        let mut precision = PrecisionMap::new(TernarySet::NONE, Precision::F32);
        for (role, p) in precision_by_role {
            precision.set(role, p)?;
        }
        if precision.ternary_set() != cfg.ternary {
            return Err(Error::InvalidConfig(format!(
                "header ternary flags `{}` disagree with sections `{}`",
                cfg.ternary,
                precision.ternary_set()
            )));
        }
        let weights = assemble(&cfg, decoded)?;
        Ok(Self {
            config: cfg,
            normalization: header.normalization,
            precision,
            weights,
        })
    }

    /// Float view of every tensor; ternary layers become `codes * beta`.
    pub fn to_tensor_set(&self) -> Result<TensorSet> {
        let manifest = tensor_manifest(&self.config);
        let mut out = TensorSet::new();
        for (spec, r) in manifest.iter().zip(weight_refs(&self.weights)) {
            let t = match r {
                TensorRef::Matrix(m) => Tensor::from_matrix(m),
                TensorRef::Vector(v) => Tensor::from_vector(v),
                TensorRef::Linear(l) => Tensor::from_matrix(&l.to_float()?),
            };
            out.insert(spec.name.clone(), t);
        }
        Ok(out)
    }

    /// Bytes of tensor payload this container serializes to.
    pub fn payload_bytes(&self) -> Result<usize> {
        crate::model::model_size_bytes(&self.config, &self.precision)
    }
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what}: {v} exceeds u32")))
}

fn decode_section(spec: &TensorSpec, precision: Precision, data: &[u8]) -> Result<Decoded> {
    let n = spec.numel();
    let malformed = |reason: String| Error::MalformedSection {
        name: spec.name.clone(),
        reason,
    };
    let values = match precision {
        Precision::F32 => {
            if data.len() != 4 * n {
                return Err(malformed(format!(
                    "{} bytes for {n} f32 values",
                    data.len()
                )));
            }
            data.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>()
        }
        Precision::Bf16 => {
            if data.len() != 2 * n {
                return Err(malformed(format!(
                    "{} bytes for {n} bf16 values",
                    data.len()
                )));
            }
            data.chunks_exact(2)
                .map(|c| bf16_bits_to_f32(u16::from_le_bytes(c.try_into().unwrap())))
                .collect()
        }
        Precision::TernaryPacked => {
            if !spec.role.supports_ternary() || !spec.is_matrix() {
                return Err(malformed(format!("role {} cannot be ternary", spec.role)));
            }
            let (k_in, n_out) = (spec.dims[0], spec.dims[1]);
            let words_len = crate::packing::packed_weight_bytes(n_out, k_in);
            if data.len() != words_len + 2 {
                return Err(malformed(format!(
                    "{} bytes, expected {} words + 2-byte scale",
                    data.len(),
                    words_len / 4
                )));
            }
            let words = data[..words_len]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let beta = bf16_bits_to_f32(u16::from_le_bytes(data[words_len..].try_into().unwrap()));
            if !(beta.is_finite() && beta >= 0.0) {
                return Err(malformed(format!("scale {beta}")));
            }
            let p = PackedWeightTiles::from_words(n_out, k_in, words, beta)?;
            p.validate().map_err(|e| Error::CorruptTernary {
                name: spec.name.clone(),
                source: Box::new(e),
            })?;
            return Ok(Decoded::Packed(p));
        }
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(spec.name.clone()));
    }
    Ok(Decoded::Dense(values))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses the fixed header and section table and checks that every section
/// lies inside the file without overlapping another.
pub fn read_header(bytes: &[u8]) -> Result<ContainerHeader> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "header")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = c.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = c.u32("header")? as usize;
    }
    let flags = c.take(4, "header")?;
    let attn_mode = match flags[0] {
        0 => AttentionMode::Mhsa,
        1 => AttentionMode::Mqa,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown attention mode {other}"
            )))
        }
    };
    let config = ModelConfig {
        layers: f[0],
        heads: f[1],
        embed_dim: f[2],
        ffn_mult: f[3],
        patch_size: f[4],
        image_size: f[5],
        in_channels: f[6],
        num_classes: f[7],
        attn_mode,
        ternary: TernarySet::from_bits(flags[1])?,
    };
    config.validate()?;
    let count = c.u32("header")? as usize;

    let channels = config.in_channels;
    let mut mean = Vec::with_capacity(channels.min(64));
    for _ in 0..channels {
        mean.push(c.f32("normalization constants")?);
    }
    let mut std = Vec::with_capacity(channels.min(64));
    for _ in 0..channels {
        std.push(c.f32("normalization constants")?);
    }
    let normalization = Normalization::new(mean, std)?;

    let mut sections = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let what = format!("section table entry {i}");
        let raw_name = c.take(SECTION_NAME_LEN, &what)?;
        let end = raw_name
            .iter()
            .position(|&b| b == 0)
            .unwrap_or(SECTION_NAME_LEN);
        let name = std::str::from_utf8(&raw_name[..end])
            .map_err(|_| Error::MalformedSection {
                name: format!("#{i}"),
                reason: "name is not UTF-8".into(),
            })?
            .to_string();
        let meta = c.take(4, &what)?;
        let malformed = |reason: String| Error::MalformedSection {
            name: name.clone(),
            reason,
        };
        let role =
            Role::from_code(meta[0]).ok_or_else(|| malformed(format!("role {}", meta[0])))?;
        let precision =
            Precision::from_code(meta[1]).ok_or_else(|| Error::UnsupportedPrecision {
                precision: format!("code {}", meta[1]),
                role: name.clone(),
            })?;
        let ndims = meta[2] as usize;
        if !(1..=2).contains(&ndims) {
            return Err(malformed(format!("{ndims} dims")));
        }
        let d0 = c.u32(&what)? as usize;
        let d1 = c.u32(&what)? as usize;
        let dims = [d0, d1][..ndims].to_vec();
        let offset = c.u64(&what)?;
        let length = c.u64(&what)?;
        c.take(4, &what)?;
        sections.push(SectionEntry {
            name,
            role,
            precision,
            dims,
            offset,
            length,
        });
    }

    let table_end = c.pos as u64;
    let mut order: Vec<&SectionEntry> = sections.iter().collect();
    order.sort_by_key(|s| s.offset);
    for s in &order {
        if s.offset < table_end {
            return Err(Error::MalformedSection {
                name: s.name.clone(),
                reason: "payload offset inside the header".into(),
            });
        }
        let end = s.offset.checked_add(s.length);
        if end.is_none_or(|e| e > bytes.len() as u64) {
            return Err(Error::Truncated(format!("section `{}`", s.name)));
        }
    }
    for pair in order.windows(2) {
        if pair[0].offset + pair[0].length > pair[1].offset {
            return Err(Error::OverlappingSections {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }

    Ok(ContainerHeader {
        version,
        config,
        normalization,
        sections,
    })
}

/// Absmean ternarization with the scale held at bfloat16, as stored on disk.
pub fn quantize_for_deployment(w: &FloatMatrix) -> Result<TernaryWeightMatrix> {
    let t = absmean_quantize(w, DEFAULT_EPS)?;
    let beta = round_to_bf16(t.beta());
    Ok(t.with_beta(beta))
}

/// Quantizes and packs every linear layer whose role is in `set`.
pub fn ternarize_weights(weights: &ModelWeights, set: TernarySet) -> Result<ModelWeights> {
    weights.try_map_linears(|role, l| {
        Ok(match l {
            Linear::Float(m) if set.contains(role) => {
                Linear::Packed(pack_ternary(&quantize_for_deployment(m)?))
            }
            other => other.clone(),
        })
    })
}

fn fetch<'a>(tensors: &'a TensorSet, spec: &TensorSpec) -> Result<&'a Tensor> {
    let t = tensors
        .get(&spec.name)
        .ok_or_else(|| Error::MissingTensor(spec.name.clone()))?;
    let numel: usize = t.dims.iter().product();
    let shape_ok = match spec.dims.as_slice() {
        [n] => numel == *n && (t.dims.len() == 1 || t.dims == [1, *n]),
        dims => t.dims == dims,
    };
    if !shape_ok {
        return Err(Error::DimensionMismatch {
            op: "convert",
            expected: format!("{} {:?}", spec.name, spec.dims),
            found: format!("{:?}", t.dims),
        });
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(spec.name.clone()));
    }
    Ok(t)
}

/// Builds a deployable container from float tensors: ternary roles are
/// absmean-quantized and packed, bf16 roles are rounded, f32 roles are kept.
pub fn convert(
    tensors: &TensorSet,
    config: &ModelConfig,
    precision: &PrecisionMap,
    normalization: Normalization,
) -> Result<ModelContainer> {
    precision.validate()?;
    let mut cfg = *config;
    cfg.ternary = precision.ternary_set();
    cfg.validate()?;
    if normalization.mean.len() != cfg.in_channels {
        return Err(Error::dims(
            "normalization",
            cfg.in_channels,
            normalization.mean.len(),
        ));
    }

    let manifest = tensor_manifest(&cfg);
    let mut decoded = Vec::with_capacity(manifest.len());
    for spec in &manifest {
        let t = fetch(tensors, spec)?;
        let d = match precision.get(spec.role) {
            Precision::F32 => Decoded::Dense(t.data.clone()),
            Precision::Bf16 => Decoded::Dense(t.data.iter().map(|&v| round_to_bf16(v)).collect()),
            Precision::TernaryPacked => {
                let m = FloatMatrix::new(spec.dims[0], spec.dims[1], t.data.clone())?;
                Decoded::Packed(pack_ternary(&quantize_for_deployment(&m)?))
            }
        };
        if let Decoded::Dense(v) = &d {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{} after bf16 rounding",
                    spec.name
                )));
            }
        }
        decoded.push((spec.clone(), d));
    }
    let weights = assemble(&cfg, decoded)?;
    Ok(ModelContainer {
        config: cfg,
        normalization,
        precision: precision.clone(),
        weights,
    })
}

/// Float tensors of `weights` in manifest naming, for writing checkpoints.
pub fn weights_to_tensor_set(weights: &ModelWeights, cfg: &ModelConfig) -> Result<TensorSet> {
    weights.validate(cfg)?;
    let mut out = TensorSet::new();
    for (spec, r) in tensor_manifest(cfg).iter().zip(weight_refs(weights)) {
        let t = match r {
            TensorRef::Matrix(m) => Tensor::from_matrix(m),
            TensorRef::Vector(v) => Tensor::from_vector(v),
            TensorRef::Linear(l) => Tensor::from_matrix(&l.to_float()?),
        };
        out.insert(spec.name.clone(), t);
    }
    Ok(out)
}

/// Reads every `*.ften` file in `dir`, keyed by file stem.
pub fn read_tensor_dir(dir: impl AsRef<Path>) -> Result<TensorSet> {
    let dir = dir.as_ref();
    let mut out = TensorSet::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ften") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        out.insert(stem.to_string(), Tensor::read(&path)?);
    }
    Ok(out)
}

/// Writes each tensor to `dir/<name>.ften`.
pub fn write_tensor_dir(tensors: &TensorSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in tensors {
        t.write(dir.join(format!("{name}.ften")))?;
    }
    Ok(())
}

/// Converts a float checkpoint that is either a `.bmvc` file or a directory
/// of `FTEN` tensors.
pub fn read_float_checkpoint(path: impl AsRef<Path>) -> Result<TensorSet> {
    let path = path.as_ref();
    if path.is_dir() {
        read_tensor_dir(path)
    } else {
        ModelContainer::load(path)?.to_tensor_set()
    }
}

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bitvit_core::container::{
    convert as convert_tensors, read_float_checkpoint, read_header, weights_to_tensor_set,
    write_tensor_dir, ModelContainer, Normalization,
};
use bitvit_core::distill::{
    cross_entropy, feature_loss, kd_divergence, total_loss, DistillWeights, FeatureProjection,
    LossParts,
};
use bitvit_core::model::{
    forward, model_size_bytes, param_count, Image, ModelConfig, ModelWeights,
};
use bitvit_core::tensor::{softmax_rows, FloatMatrix};
use bitvit_core::verify::CheckResult;
use bitvit_core::{Precision, PrecisionMap, Tensor};
use image::imageops::FilterType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MB: f64 = 1e6;
const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone)]
pub struct ConvertSummary {
    pub config: ModelConfig,
    pub precision: PrecisionMap,
    pub params: usize,
    pub payload_bytes: usize,
    pub file_bytes: usize,
    pub ternary_sections: usize,
}

impl ConvertSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let header = self.file_bytes - self.payload_bytes;
        let _ = writeln!(s, "ternary layers: {}", self.config.ternary);
        let _ = writeln!(s, "parameters:     {}", self.params);
        let _ = writeln!(
            s,
            "payload:        {} bytes ({:.2} MB, {:.2} MiB)",
            self.payload_bytes,
            self.payload_bytes as f64 / MB,
            self.payload_bytes as f64 / MIB
        );
        let _ = writeln!(s, "header:         {header} bytes");
        let _ = writeln!(s, "file:           {} bytes", self.file_bytes);
        let _ = writeln!(s, "ternary tensors: {}", self.ternary_sections);
        s
    }
}

/// Converts a float checkpoint (FTEN directory or `.bmvc`) into a packed
/// container at `output`.
pub fn convert(
    input: &Path,
    output: &Path,
    config: &ModelConfig,
    precision: &PrecisionMap,
    normalization: Normalization,
) -> Result<ConvertSummary> {
    let tensors =
        read_float_checkpoint(input).with_context(|| format!("reading {}", input.display()))?;
    let c = convert_tensors(&tensors, config, precision, normalization)?;
    let bytes = c.to_bytes()?;
    std::fs::write(output, &bytes).with_context(|| format!("writing {}", output.display()))?;
    let payload_bytes = model_size_bytes(&c.config, &c.precision)?;
    let ternary_sections = read_header(&bytes)?
        .sections
        .iter()
        .filter(|s| s.precision == Precision::TernaryPacked)
        .count();
    Ok(ConvertSummary {
        config: c.config,
        precision: c.precision,
        params: param_count(&c.config).total,
        payload_bytes,
        file_bytes: bytes.len(),
        ternary_sections,
    })
}

/// Human-readable dump of a container header and section table.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let h = read_header(&bytes)?;
    let c = &h.config;
    let mut s = String::new();
    let _ = writeln!(s, "format version: {}", h.version);
    let _ = writeln!(
        s,
        "config: layers={} heads={} embed_dim={} ffn_mult={} patch={} image={} channels={} classes={} attention={:?} ternary={}",
        c.layers, c.heads, c.embed_dim, c.ffn_mult, c.patch_size, c.image_size,
        c.in_channels, c.num_classes, c.attn_mode, c.ternary
    );
    let _ = writeln!(
        s,
        "normalization: mean={:?} std={:?}",
        h.normalization.mean, h.normalization.std
    );
    let _ = writeln!(
        s,
        "{:<24} {:<11} {:<8} {:>12} {:>10} {:>10}  beta",
        "name", "role", "prec", "dims", "offset", "bytes"
    );
    for e in &h.sections {
        let dims = e
            .dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let beta = if e.precision == Precision::TernaryPacked {
            let end = (e.offset + e.length) as usize;
            let raw = u16::from_le_bytes([bytes[end - 2], bytes[end - 1]]);
            format!("{}", bitvit_core::quantize::bf16_bits_to_f32(raw))
        } else {
            "-".into()
        };
        let _ = writeln!(
            s,
            "{:<24} {:<11} {:<8} {:>12} {:>10} {:>10}  {beta}",
            e.name, e.role, e.precision, dims, e.offset, e.length
        );
    }
    let payload = h.payload_len();
    let _ = writeln!(
        s,
        "sections: {}  header: {} bytes  payload: {} bytes ({:.2} MB, {:.2} MiB)  file: {} bytes",
        h.sections.len(),
        h.header_len(),
        payload,
        payload as f64 / MB,
        payload as f64 / MIB,
        bytes.len()
    );
    Ok(s)
}

/// Decodes an image file into the model's input layout. Images whose size
/// differs from the configured input are resized with a triangle filter.
pub fn load_image(path: &Path, cfg: &ModelConfig, norm: &Normalization) -> Result<Image> {
    let img = image::open(path).with_context(|| format!("decoding image {}", path.display()))?;
    let side = cfg.image_size as u32;
    let img = if img.width() != side || img.height() != side {
        img.resize_exact(side, side, FilterType::Triangle)
    } else {
        img
    };
    let raw: Vec<u8> = match cfg.in_channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => bail!("cannot map an image file to {c} input channels"),
    };
    let c = cfg.in_channels;
    let data = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| norm.apply(v as f32 / 255.0, i % c))
        .collect();
    Ok(Image::new(cfg.image_size, cfg.image_size, c, data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class: usize,
    pub labels: Vec<String>,
    pub probabilities: Vec<f32>,
}

impl Classification {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "class: {} ({})", self.class, self.labels[self.class]);
        for (label, p) in self.labels.iter().zip(&self.probabilities) {
            let _ = writeln!(s, "{label}\t{p:.6}");
        }
        s
    }
}

/// Reads one label per non-empty line.
pub fn read_labels(path: &Path, classes: usize) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let labels: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if labels.len() != classes {
        bail!("{} labels for a {classes}-class model", labels.len());
    }
    Ok(labels)
}

pub fn classify(
    model: &ModelContainer,
    image: &Image,
    labels: Option<Vec<String>>,
) -> Result<Classification> {
    let logits = forward(image, &model.weights, &model.config)?;
    let probs = softmax_rows(&logits.as_row())?.into_data();
    let class = probs
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
    let labels = labels.unwrap_or_else(|| (0..probs.len()).map(|i| format!("class_{i}")).collect());
    Ok(Classification {
        class,
        labels,
        probabilities: probs,
    })
}

/// Writes a random float checkpoint as a directory of FTEN tensors.
pub fn synth(dir: &Path, cfg: &ModelConfig, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = ModelWeights::random(cfg, &mut rng);
    let tensors = weights_to_tensor_set(&w, cfg)?;
    write_tensor_dir(&tensors, dir)?;
    Ok(tensors.len())
}

/// Evaluates the distillation loss on a fixture directory holding
/// `student_logits.ften` and `teacher_logits.ften`, and optionally
/// `student_features.ften`, `teacher_features.ften`, `projection.ften`
/// and `expected.ften` (`[ce, kd, feat, total]`).
pub fn check_distill_fixture(
    dir: &Path,
    label: usize,
    weights: &DistillWeights,
) -> Vec<CheckResult> {
    let start = std::time::Instant::now();
    let result = distill_fixture(dir, label, weights);
    let (cases, failure) = match result {
        Ok(n) => (n, None),
        Err(e) => (0, Some(format!("{e:#}"))),
    };
    vec![CheckResult {
        suite: "distill-fixture".into(),
        name: dir.display().to_string(),
        cases,
        elapsed: start.elapsed(),
        failure,
    }]
}

fn read_opt(dir: &Path, name: &str) -> Result<Option<Tensor>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    Tensor::read(&path)
        .map(Some)
        .with_context(|| format!("reading {}", path.display()))
}

fn read_req(dir: &Path, name: &str) -> Result<Tensor> {
    read_opt(dir, name)?.with_context(|| format!("fixture is missing {name}"))
}

fn distill_fixture(dir: &Path, label: usize, w: &DistillWeights) -> Result<usize> {
    w.validate()?;
    let student = read_req(dir, "student_logits.ften")?.to_vector()?;
    let teacher = read_req(dir, "teacher_logits.ften")?.to_vector()?;
    let ce = cross_entropy(&student, label)?;
    let kd = kd_divergence(&student, &teacher, w.temperature)?;
    let feat = match (
        read_opt(dir, "student_features.ften")?,
        read_opt(dir, "teacher_features.ften")?,
    ) {
        (Some(s), Some(t)) => {
            let s = s.to_matrix()?;
            let proj = match read_opt(dir, "projection.ften")? {
                Some(p) => p.to_matrix()?,
                None => FloatMatrix::identity(s.cols()),
            };
            feature_loss(&s, &t.to_matrix()?, &FeatureProjection { matrix: proj })?
        }
        (None, None) => 0.0,
        _ => bail!("fixture has only one of student_features.ften / teacher_features.ften"),
    };
    let total = total_loss(LossParts { ce, kd, feat }, w);
    for (name, v) in [("ce", ce), ("kd", kd), ("feat", feat), ("total", total)] {
        if !(v.is_finite() && v >= 0.0) {
            bail!("{name} loss is {v}");
        }
    }
    let mut checked = 4;
    if let Some(expected) = read_opt(dir, "expected.ften")? {
        if expected.data.len() != 4 {
            bail!("expected.ften must hold [ce, kd, feat, total]");
        }
        for ((name, got), want) in [("ce", ce), ("kd", kd), ("feat", feat), ("total", total)]
            .into_iter()
            .zip(&expected.data)
        {
            if (got - *want as f64).abs() > 1e-5 * (1.0 + want.abs() as f64) {
                bail!("{name} loss {got} differs from expected {want}");
            }
            checked += 1;
        }
    }
    Ok(checked)
}

use bitvit_core::attention::AttentionMode;
use bitvit_core::container::{
    convert, read_header, ternarize_weights, weights_to_tensor_set, ModelContainer, Normalization,
    FIXED_HEADER_LEN, SECTION_ENTRY_LEN,
};
use bitvit_core::model::{forward, model_size_bytes, Image, ModelConfig, ModelWeights};
use bitvit_core::{Error, Precision, PrecisionMap, TernarySet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(ternary: TernarySet) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        embed_dim: 32,
        ffn_mult: 2,
        patch_size: 4,
        image_size: 8,
        in_channels: 3,
        num_classes: 5,
        attn_mode: AttentionMode::Mqa,
        ternary,
    }
}

fn container(seed: u64, ternary: TernarySet, dense: Precision) -> ModelContainer {
    let cfg = tiny(ternary);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let float = ModelWeights::random(&cfg, &mut rng);
    let tensors = weights_to_tensor_set(&float, &cfg).unwrap();
    convert(
        &tensors,
        &cfg,
        &PrecisionMap::new(ternary, dense),
        Normalization::symmetric(3),
    )
    .unwrap()
}

fn image(seed: u64, cfg: &ModelConfig) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size * cfg.image_size * cfg.in_channels;
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Image::new(cfg.image_size, cfg.image_size, cfg.in_channels, data).unwrap()
}

#[test]
fn save_load_round_trip_is_bitwise() {
    for (seed, set, dense) in [
        (1, TernarySet::ALL, Precision::F32),
        (2, TernarySet::FFN, Precision::Bf16),
        (3, TernarySet::NONE, Precision::F32),
    ] {
        let c = container(seed, set, dense);
        let bytes = c.to_bytes().unwrap();
        let back = ModelContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        let img = image(seed, &c.config);
        let a = forward(&img, &c.weights, &c.config).unwrap();
        let b = forward(&img, &back.weights, &back.config).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn file_round_trip() {
    let c = container(4, TernarySet::ALL, Precision::F32);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bmvc");
    c.save(&path).unwrap();
    assert_eq!(ModelContainer::load(&path).unwrap(), c);
}

#[test]
fn payload_matches_size_accounting() {
    for (set, dense) in [
        (TernarySet::ALL, Precision::F32),
        (TernarySet::FFN, Precision::Bf16),
        (TernarySet::NONE, Precision::Bf16),
    ] {
        let c = container(5, set, dense);
        let bytes = c.to_bytes().unwrap();
        let h = read_header(&bytes).unwrap();
        let expected = model_size_bytes(&c.config, &c.precision).unwrap();
        assert_eq!(h.payload_len() as usize, expected);
        assert_eq!(bytes.len(), h.header_len() + expected);
    }
}

#[test]
fn reference_config_header_is_small() {
    let cfg = ModelConfig::reference();
    let sections = 4 + 10 * cfg.layers + 4;
    let len = FIXED_HEADER_LEN + 8 * cfg.in_channels + SECTION_ENTRY_LEN * sections;
    assert!(len < 4096, "{len}");
}

#[test]
fn convert_matches_runtime_quantization() {
    let cfg = tiny(TernarySet::ALL);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let float = ModelWeights::random(&cfg, &mut rng);
    let tensors = weights_to_tensor_set(&float, &cfg).unwrap();
    let c = convert(
        &tensors,
        &cfg,
        &PrecisionMap::new(TernarySet::ALL, Precision::F32),
        Normalization::symmetric(3),
    )
    .unwrap();
    let runtime = ternarize_weights(&float, TernarySet::ALL).unwrap();
    assert_eq!(c.weights, runtime);
    let img = image(7, &cfg);
    assert_eq!(
        forward(&img, &c.weights, &cfg).unwrap(),
        forward(&img, &runtime.unpacked().unwrap(), &cfg).unwrap()
    );
}

#[test]
fn truncation_names_the_section() {
    let bytes = container(8, TernarySet::ALL, Precision::F32)
        .to_bytes()
        .unwrap();
    let err = ModelContainer::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    match err {
        Error::Truncated(what) => assert!(what.contains("head.bias"), "{what}"),
        other => panic!("{other:?}"),
    }
    let err = ModelContainer::from_bytes(&bytes[..100]).unwrap_err();
    assert!(
        matches!(err, Error::Truncated(ref w) if w.contains("section table")),
        "{err:?}"
    );
    assert!(matches!(
        ModelContainer::from_bytes(&bytes[..10]),
        Err(Error::Truncated(_))
    ));
}

#[test]
fn bad_magic_and_version() {
    let mut bytes = container(9, TernarySet::FFN, Precision::F32)
        .to_bytes()
        .unwrap();
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(matches!(
        ModelContainer::from_bytes(&b),
        Err(Error::BadMagic { .. })
    ));
    bytes[4] = 9;
    assert!(matches!(
        ModelContainer::from_bytes(&bytes),
        Err(Error::UnsupportedVersion { found: 9, .. })
    ));
}

fn section_offset(bytes: &[u8], name: &str) -> (usize, usize) {
    let h = read_header(bytes).unwrap();
    let s = h.sections.iter().find(|s| s.name == name).unwrap();
    (s.offset as usize, s.length as usize)
}

#[test]
fn reserved_code_is_rejected_with_section_name() {
    let mut bytes = container(10, TernarySet::ALL, Precision::F32)
        .to_bytes()
        .unwrap();
    let (off, _) = section_offset(&bytes, "blocks.1.ffn.up");
    bytes[off] |= 0b11;
    match ModelContainer::from_bytes(&bytes).unwrap_err() {
        Error::CorruptTernary { name, source } => {
            assert_eq!(name, "blocks.1.ffn.up");
            assert!(matches!(*source, Error::CorruptCode { word: 0, field: 0 }));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn overlapping_sections_are_rejected() {
    let mut bytes = container(11, TernarySet::NONE, Precision::F32)
        .to_bytes()
        .unwrap();
    let h = read_header(&bytes).unwrap();
    // Point the second section at the first one's payload.
    let first = h.sections[0].offset;
    let entry = FIXED_HEADER_LEN + 8 * 3 + SECTION_ENTRY_LEN;
    bytes[entry + 60..entry + 68].copy_from_slice(&first.to_le_bytes());
    assert!(matches!(
        ModelContainer::from_bytes(&bytes),
        Err(Error::OverlappingSections { .. })
    ));
}

#[test]
fn duplicate_and_missing_sections() {
    let bytes = container(12, TernarySet::NONE, Precision::F32)
        .to_bytes()
        .unwrap();
    let name_at = |i: usize| FIXED_HEADER_LEN + 8 * 3 + SECTION_ENTRY_LEN * i;
    // Rename "patch_embed.bias" (entry 1) to "patch_embed.weight".
    let mut dup = bytes.clone();
    let src = dup[name_at(0)..name_at(0) + 48].to_vec();
    dup[name_at(1)..name_at(1) + 48].copy_from_slice(&src);
    assert!(matches!(
        ModelContainer::from_bytes(&dup),
        Err(Error::DuplicateTensor(ref n)) if n == "patch_embed.weight"
    ));
    let mut bad = bytes.clone();
    bad[name_at(1)] = b'X';
    assert!(matches!(
        ModelContainer::from_bytes(&bad),
        Err(Error::MalformedSection { .. })
    ));
}

#[test]
fn convert_reports_missing_and_non_finite_tensors() {
    let cfg = tiny(TernarySet::FFN);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let float = ModelWeights::random(&cfg, &mut rng);
    let pm = PrecisionMap::for_config(&cfg);
    let mut tensors = weights_to_tensor_set(&float, &cfg).unwrap();
    tensors.get_mut("blocks.0.ffn.up").unwrap().data[3] = f32::NAN;
    assert!(matches!(
        convert(&tensors, &cfg, &pm, Normalization::symmetric(3)),
        Err(Error::NonFinite(ref n)) if n == "blocks.0.ffn.up"
    ));
    tensors.get_mut("blocks.0.ffn.up").unwrap().data[3] = 0.0;
    tensors.remove("head.weight");
    assert!(matches!(
        convert(&tensors, &cfg, &pm, Normalization::symmetric(3)),
        Err(Error::MissingTensor(ref n)) if n == "head.weight"
    ));
}

#[test]
fn bf16_round_trip_preserves_rounded_values() {
    let c = container(14, TernarySet::FFN, Precision::Bf16);
    for v in c.weights.patch_embed.data() {
        assert_eq!(v.to_bits() & 0xffff, 0);
    }
    assert_eq!(c.precision.get(bitvit_core::Role::Head), Precision::Bf16);
}

fn section_len(c: &ModelContainer, name: &str) -> usize {
    let bytes = c.to_bytes().unwrap();
    let h = read_header(&bytes).unwrap();
    h.sections.iter().find(|e| e.name == name).unwrap().length as usize
}

#[test]
fn ffn_layer_shrinks_sixteen_fold() {
    let dense = container(11, TernarySet::NONE, Precision::F32);
    let packed = container(11, TernarySet::FFN, Precision::F32);
    for name in ["blocks.0.ffn.up", "blocks.1.ffn.down"] {
        let (f, p) = (section_len(&dense, name), section_len(&packed, name));
        // 32x64 is tile aligned, so the code words are exactly 1/16 of f32;
        // the two trailing bytes hold beta.
        assert_eq!(f, 4 * 32 * 64);
        assert_eq!(p - 2, f / 16, "{name}");
    }
}

#[test]
fn all_zero_layer_converts_to_zero_beta() {
    let cfg = tiny(TernarySet::FFN);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tensors = weights_to_tensor_set(&ModelWeights::random(&cfg, &mut rng), &cfg).unwrap();
    tensors.get_mut("blocks.0.ffn.up").unwrap().data.fill(0.0);
    let pm = PrecisionMap::new(cfg.ternary, Precision::F32);
    let c = convert(&tensors, &cfg, &pm, Normalization::symmetric(3)).unwrap();
    let bytes = c.to_bytes().unwrap();
    let (off, len) = section_offset(&bytes, "blocks.0.ffn.up");
    assert_eq!(&bytes[off + len - 2..off + len], &[0, 0]);
    assert!(bytes[off..off + len - 2].iter().all(|&b| b == 0x55));
    let back = ModelContainer::from_bytes(&bytes).unwrap();
    assert_eq!(back, c);
    let logits = forward(&image(12, &cfg), &back.weights, &cfg).unwrap();
    assert!(logits.is_finite());
}

#[test]
fn reconverting_uniform_ternary_values_keeps_codes() {
    let cfg = tiny(TernarySet::FFN);
    let pm = PrecisionMap::new(cfg.ternary, Precision::F32);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut tensors = weights_to_tensor_set(&ModelWeights::random(&cfg, &mut rng), &cfg).unwrap();
    for scale in [1e-3f32, 0.37, 5.0] {
        for name in ["blocks.0.ffn.up", "blocks.1.ffn.down"] {
            for v in &mut tensors.get_mut(name).unwrap().data {
                *v = scale * rng.gen_range(-1i32..=1) as f32;
            }
        }
        let first = convert(&tensors, &cfg, &pm, Normalization::symmetric(3)).unwrap();
        let again = convert(
            &first.to_tensor_set().unwrap(),
            &cfg,
            &pm,
            Normalization::symmetric(3),
        )
        .unwrap();
        let (a, b) = (first.to_bytes().unwrap(), again.to_bytes().unwrap());
        for name in ["blocks.0.ffn.up", "blocks.1.ffn.down"] {
            let (off, len) = section_offset(&a, name);
            assert_eq!(section_offset(&b, name), (off, len));
            let source: Vec<i8> = tensors[name]
                .data
                .iter()
                .map(|v| (v / scale).round() as i8)
                .collect();
            let codes = |bytes: &[u8]| bytes[off..off + len - 2].to_vec();
            assert_eq!(codes(&a), codes(&b), "{name} at scale {scale}");
            // The codes are the source signs, not merely self-consistent.
            let direct = first.to_tensor_set().unwrap();
            let signs: Vec<i8> = direct[name]
                .data
                .iter()
                .map(|v| v.signum() as i8 * (*v != 0.0) as i8)
                .collect();
            assert_eq!(signs, source, "{name} at scale {scale}");
        }
    }
}

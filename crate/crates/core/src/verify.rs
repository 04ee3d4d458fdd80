//! Seeded self-check suites. Every check compares an optimized path against
//! an independent oracle or a closed-form value and reports pass/fail.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attn_param_count, kv_param_count, mhsa_forward, mqa_forward, AttentionConfig, AttentionMode,
    AttentionWeights,
};
use crate::container::{
    convert, ternarize_weights, weights_to_tensor_set, ModelContainer, Normalization,
};
use crate::distill::{
    cross_entropy, feature_loss, kd_divergence, total_loss, DistillWeights, FeatureProjection,
    LossParts,
};
use crate::error::Error;
use crate::kernel::{
    gemm_packed_blocked, gemm_packed_naive, gemm_reference, TileGeometry, TrafficCounter,
};
use crate::linear::Linear;
use crate::model::{
    forward, model_size_bytes, param_count, Image, ModelConfig, ModelWeights, PrecisionMap,
    TernarySet,
};
use crate::packing::{
    pack_ternary, packed_weight_bytes, unpack_ternary, PackedWeightTiles, ZERO_WORD,
};
use crate::quantize::{
    absmax_quantize, absmean_quantize, bitlinear_forward, QuantizedActivationMatrix,
    TernaryWeightMatrix, DEFAULT_EPS,
};
use crate::tensor::{FloatMatrix, FloatVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Suite {
    Quantize,
    Pack,
    Gemm,
    Attention,
    Model,
    Distill,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Quantize,
        Suite::Pack,
        Suite::Gemm,
        Suite::Attention,
        Suite::Model,
        Suite::Distill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Quantize => "quantize",
            Suite::Pack => "pack",
            Suite::Gemm => "gemm",
            Suite::Attention => "attention",
            Suite::Model => "model",
            Suite::Distill => "distill",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random cases for the large property checks (at least 1000 by default).
    pub cases: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            cases: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub cases: usize,
    pub elapsed: Duration,
    /// `None` when the check passed.
    pub failure: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "[{status}] {}::{} ({} cases, {:.2?})",
            self.suite, self.name, self.cases, self.elapsed
        )?;
        if let Some(why) = &self.failure {
            write!(f, ": {why}")?;
        }
        Ok(())
    }
}

type Outcome = Result<usize, String>;

fn run(suite: &str, name: &str, f: impl FnOnce() -> Outcome) -> CheckResult {
    let start = Instant::now();
    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|_| Err("panicked".to_string()));
    let elapsed = start.elapsed();
    let (cases, failure) = match r {
        Ok(n) => (n, None),
        Err(e) => (0, Some(e)),
    };
    CheckResult {
        suite: suite.to_string(),
        name: name.to_string(),
        cases,
        elapsed,
        failure,
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn e2s(e: Error) -> String {
    e.to_string()
}

fn rng_for(opts: &VerifyOptions, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Vec<CheckResult> {
    let s = suite.name();
    let o = *opts;
    match suite {
        Suite::Quantize => vec![
            run(s, "absmean_codes_and_scale", || check_absmean(&o)),
            run(s, "absmax_values_and_scale", || check_absmax(&o)),
            run(s, "worked_example", check_quantize_example),
            run(s, "bitlinear_vs_f64", || check_bitlinear(&o)),
        ],
        Suite::Pack => vec![
            run(s, "round_trip", || check_pack_round_trip(&o)),
            run(s, "bit_placement", || check_bit_placement(&o)),
            run(s, "zero_tile", check_zero_tile),
            run(s, "byte_ratio_aligned", || check_byte_ratio(&o)),
            run(s, "reserved_code_detected", || check_reserved(&o)),
        ],
        Suite::Gemm => vec![
            run(s, "blocked_vs_reference", || check_gemm_random(&o)),
            run(s, "ffn_shapes", || check_gemm_ffn(&o)),
            run(s, "naive_vs_reference", || check_gemm_naive(&o)),
            run(s, "traffic_counter", || check_traffic(&o)),
        ],
        Suite::Attention => vec![
            run(s, "mqa_equals_replicated_mhsa", || check_mqa_mhsa(&o, 100)),
            run(s, "brute_force_oracle", || check_attention_oracle(&o)),
            run(s, "kv_param_counts", check_attention_params),
        ],
        Suite::Model => vec![
            run(s, "packed_vs_unpacked_forward", || {
                check_model_paths(&o, 20)
            }),
            run(s, "save_load_forward", || check_save_load(&o, 20)),
            run(s, "reference_config_accounting", check_model_accounting),
        ],
        Suite::Distill => vec![
            run(s, "kd_self_is_zero", || check_kd_self(&o)),
            run(s, "kd_non_negative", || check_kd_nonneg(&o)),
            run(s, "cross_entropy_uniform", check_ce_uniform),
            run(s, "closed_forms", check_distill_closed_forms),
        ],
    }
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CheckResult> {
    Suite::ALL
        .iter()
        .flat_map(|&s| run_suite(s, opts))
        .collect()
}

/// Loads a container and runs one forward pass on a mid-gray image.
pub fn check_container(path: &Path) -> Vec<CheckResult> {
    let suite = "container";
    let mut loaded = None;
    let load = run(suite, &format!("load {}", path.display()), || {
        loaded = Some(ModelContainer::load(path).map_err(e2s)?);
        Ok(1)
    });
    let mut out = vec![load];
    if let Some(c) = loaded {
        out.push(run(suite, "forward_finite", || {
            let cfg = &c.config;
            let side = cfg.image_size;
            let img = Image::new(
                side,
                side,
                cfg.in_channels,
                vec![0.0; side * side * cfg.in_channels],
            )
            .map_err(e2s)?;
            let a = forward(&img, &c.weights, cfg).map_err(e2s)?;
            let b = forward(&img, &c.weights, cfg).map_err(e2s)?;
            ensure!(a == b, "forward is not deterministic");
            Ok(1)
        }));
    }
    out
}

// ---------------------------------------------------------------- quantize

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> FloatMatrix {
    let scale = 10f32.powf(rng.gen_range(-3.0..3.0));
    let zero_frac = if rng.gen_bool(0.2) { 0.3 } else { 0.0 };
    FloatMatrix::from_fn(rows, cols, |_, _| {
        if rng.gen_bool(zero_frac) {
            0.0
        } else {
            rng.gen_range(-scale..scale)
        }
    })
}

fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(f64::MIN_POSITIVE)
}

/// `clamp(round(x), lo, hi)` computed in f64, or `None` when `x` is within
/// `margin` of a rounding tie and f32 evaluation may legitimately differ.
fn oracle_round(x: f64, lo: f64, hi: f64, margin: f64) -> Option<i32> {
    let frac = x.abs().fract();
    if (frac - 0.5).abs() < margin {
        return None;
    }
    Some(x.round().clamp(lo, hi) as i32)
}

pub fn check_absmean(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 1);
    for case in 0..opts.cases {
        let (r, c) = (rng.gen_range(1..=24), rng.gen_range(1..=48));
        let w = random_matrix(&mut rng, r, c);
        let t = absmean_quantize(&w, DEFAULT_EPS).map_err(e2s)?;
        let mean = w.data().iter().map(|v| v.abs() as f64).sum::<f64>() / (r * c) as f64;
        ensure!(
            rel_close(t.beta() as f64, mean, 1e-6) || mean == 0.0 && t.beta() == 0.0,
            "case {case}: beta {} vs mean|W| {mean}",
            t.beta()
        );
        let denom = t.beta() as f64 + DEFAULT_EPS as f64;
        for (i, (&q, &x)) in t.codes().iter().zip(w.data()).enumerate() {
            ensure!((-1..=1).contains(&q), "case {case}: code {q} at {i}");
            if let Some(want) = oracle_round(x as f64 / denom, -1.0, 1.0, 1e-4) {
                ensure!(
                    q as i32 == want,
                    "case {case}: code {q} at {i}, expected {want}"
                );
            }
        }
    }
    Ok(opts.cases)
}

pub fn check_absmax(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 2);
    for case in 0..opts.cases {
        let (r, c) = (rng.gen_range(1..=24), rng.gen_range(1..=48));
        let a = random_matrix(&mut rng, r, c);
        let q = absmax_quantize(&a, DEFAULT_EPS).map_err(e2s)?;
        for i in 0..r {
            let row = &a.data()[i * c..(i + 1) * c];
            let max = row.iter().map(|v| v.abs() as f64).fold(0.0, f64::max);
            let g = q.gamma()[i] as f64;
            ensure!(
                rel_close(g, max / 127.0, 1e-6) || max == 0.0 && g == 0.0,
                "case {case} row {i}: gamma {g} vs {}",
                max / 127.0
            );
            for (j, (&v, &x)) in q.row(i).iter().zip(row).enumerate() {
                ensure!((-128..=127).contains(&(v as i32)), "value {v}");
                if let Some(want) =
                    oracle_round(x as f64 / (g + DEFAULT_EPS as f64), -128.0, 127.0, 1e-3)
                {
                    ensure!(v as i32 == want, "case {case} ({i},{j}): {v} vs {want}");
                }
            }
            if g > 1e-3 {
                let peak = row.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
                let j = row.iter().position(|v| v.abs() == peak).unwrap();
                ensure!(
                    q.row(i)[j].unsigned_abs() == 127,
                    "case {case}: row peak is not +-127"
                );
            }
        }
    }
    Ok(opts.cases)
}

pub fn check_quantize_example() -> Outcome {
    let w = FloatMatrix::from_rows(&[vec![0.2, -0.9, 0.5]]).map_err(e2s)?;
    let t = absmean_quantize(&w, DEFAULT_EPS).map_err(e2s)?;
    ensure!(t.codes() == [0, -1, 1], "codes {:?}", t.codes());
    ensure!(
        rel_close(t.beta() as f64, 1.6 / 3.0, 1e-6),
        "beta {}",
        t.beta()
    );
    Ok(1)
}

fn random_ternary(rng: &mut impl Rng, k: usize, n: usize) -> TernaryWeightMatrix {
    let zero_p = rng.gen_range(0.0..1.0);
    let codes = (0..k * n)
        .map(|_| {
            if rng.gen_bool(zero_p) {
                0
            } else if rng.gen_bool(0.5) {
                1
            } else {
                -1
            }
        })
        .collect();
    TernaryWeightMatrix::new(k, n, codes, rng.gen_range(0.0..2.0)).expect("valid codes")
}

fn random_activations(rng: &mut impl Rng, m: usize, k: usize) -> QuantizedActivationMatrix {
    let values = (0..m * k).map(|_| rng.gen::<i8>()).collect();
    let gamma = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
    QuantizedActivationMatrix::new(m, k, values, gamma).expect("shapes agree")
}

pub fn check_bitlinear(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 3);
    let cases = opts.cases / 10 + 1;
    for case in 0..cases {
        let (m, k, n) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=40),
            rng.gen_range(1..=40),
        );
        let x = random_matrix(&mut rng, m, k);
        let t = random_ternary(&mut rng, k, n);
        let y = bitlinear_forward(&x, &t, DEFAULT_EPS).map_err(e2s)?;
        let q = absmax_quantize(&x, DEFAULT_EPS).map_err(e2s)?;
        for i in 0..m {
            let scale = q.gamma()[i] as f64 * t.beta() as f64;
            for j in 0..n {
                let dot: i64 = (0..k)
                    .map(|l| q.row(i)[l] as i64 * t.code(l, j) as i64)
                    .sum();
                let want = dot as f64 * scale;
                let got = y.get(i, j) as f64;
                ensure!(
                    (got - want).abs() <= 1e-6 * want.abs() + 1e-30,
                    "case {case} ({i},{j}): {got} vs {want}"
                );
            }
        }
    }
    Ok(cases)
}

// ---------------------------------------------------------------- pack

pub fn check_pack_round_trip(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 4);
    let fixed = [
        (33, 17),
        (1, 1),
        (2048, 512),
        (16, 32),
        (17, 33),
        (512, 2048),
    ];
    let total = opts.cases.max(fixed.len());
    for case in 0..total {
        let (k, n) = fixed
            .get(case)
            .copied()
            .unwrap_or_else(|| (rng.gen_range(1..=300), rng.gen_range(1..=300)));
        let t = random_ternary(&mut rng, k, n);
        let p = pack_ternary(&t);
        ensure!(
            p.byte_len() == packed_weight_bytes(n, k),
            "{k}x{n}: {} packed bytes",
            p.byte_len()
        );
        let back = unpack_ternary(&p).map_err(e2s)?;
        ensure!(back == t, "round trip differs for {k}x{n}");
    }
    Ok(total)
}

/// Decodes each code straight from the documented word layout.
pub fn check_bit_placement(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 5);
    let cases = opts.cases / 10 + 1;
    for _ in 0..cases {
        let (k, n) = (rng.gen_range(1..=70), rng.gen_range(1..=100));
        let t = random_ternary(&mut rng, k, n);
        let p = pack_ternary(&t);
        let n_tiles = n.div_ceil(32);
        for kk in 0..k {
            for nn in 0..n {
                let word = p.words()[((kk / 16) * n_tiles + nn / 32) * 32 + nn % 32];
                let field = (word >> (2 * (kk % 16))) & 0b11;
                ensure!(
                    field as i32 - 1 == t.code(kk, nn) as i32,
                    "code ({kk},{nn}) stored as {field:#04b}"
                );
            }
        }
    }
    Ok(cases)
}

pub fn check_zero_tile() -> Outcome {
    let t = TernaryWeightMatrix::new(16, 32, vec![0; 512], 1.0).map_err(e2s)?;
    let p = pack_ternary(&t);
    ensure!(p.words().len() == 32, "{} words", p.words().len());
    ensure!(
        p.words()
            .iter()
            .all(|&w| w == 0x5555_5555 && w == ZERO_WORD),
        "zero tile words {:x?}",
        &p.words()[..4]
    );
    Ok(1)
}

pub fn check_byte_ratio(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 6);
    let mut shapes = vec![(512, 2048), (2048, 512), (16, 32)];
    for _ in 0..opts.cases / 10 {
        shapes.push((16 * rng.gen_range(1..=64), 32 * rng.gen_range(1..=64)));
    }
    for &(k, n) in &shapes {
        let ratio = (4 * k * n) as f64 / packed_weight_bytes(n, k) as f64;
        ensure!(ratio == 16.0, "{k}x{n}: ratio {ratio}");
    }
    Ok(shapes.len())
}

pub fn check_reserved(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 7);
    let cases = opts.cases / 10 + 1;
    for _ in 0..cases {
        let (k, n) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let p = pack_ternary(&random_ternary(&mut rng, k, n));
        let mut words = p.words().to_vec();
        let word = rng.gen_range(0..words.len());
        let field = rng.gen_range(0..16usize);
        words[word] |= 0b11 << (2 * field);
        let bad = PackedWeightTiles::from_words(n, k, words, p.beta()).map_err(e2s)?;
        match unpack_ternary(&bad) {
            Err(Error::CorruptCode { word: w, field: f }) if w == word && f == field => {}
            other => {
                return Err(format!(
                    "expected CorruptCode at {word}/{field}, got {other:?}"
                ))
            }
        }
    }
    Ok(cases)
}

// ---------------------------------------------------------------- gemm

fn pools() -> Result<Vec<rayon::ThreadPool>, String> {
    [1, 2, 4]
        .iter()
        .map(|&n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| e.to_string())
        })
        .collect()
}

pub fn check_gemm_random(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 8);
    let pools = pools()?;
    let blocks = [1, 4, 8, 16];
    for case in 0..opts.cases {
        let (m, k, n) = (
            rng.gen_range(1..=256),
            rng.gen_range(1..=256),
            rng.gen_range(1..=256),
        );
        let a = random_activations(&mut rng, m, k);
        let t = random_ternary(&mut rng, k, n);
        let p = pack_ternary(&t);
        let geom = TileGeometry::new(blocks[case % blocks.len()]).map_err(e2s)?;
        let pool = &pools[(case / blocks.len()) % pools.len()];
        let got = pool
            .install(|| gemm_packed_blocked(&a, &p, geom, None))
            .map_err(e2s)?;
        let want = gemm_reference(&a, &t).map_err(e2s)?;
        ensure!(
            got == want,
            "case {case}: {m}x{k}x{n} m_block {} threads {} differs",
            geom.m_block(),
            pool.current_num_threads()
        );
    }
    Ok(opts.cases)
}

pub const FFN_SHAPES: [(usize, usize, usize); 2] = [(197, 512, 2048), (197, 2048, 512)];

pub fn check_gemm_ffn(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 9);
    for (m, k, n) in FFN_SHAPES {
        let a = random_activations(&mut rng, m, k);
        let t = random_ternary(&mut rng, k, n);
        let got = gemm_packed_blocked(&a, &pack_ternary(&t), TileGeometry::default(), None)
            .map_err(e2s)?;
        ensure!(
            got == gemm_reference(&a, &t).map_err(e2s)?,
            "{m}x{k}x{n} differs"
        );
    }
    Ok(FFN_SHAPES.len())
}

pub fn check_gemm_naive(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 10);
    let cases = opts.cases / 10 + 1;
    for case in 0..cases {
        let (m, k, n) = (
            rng.gen_range(1..=64),
            rng.gen_range(1..=100),
            rng.gen_range(1..=100),
        );
        let a = random_activations(&mut rng, m, k);
        let t = random_ternary(&mut rng, k, n);
        let got = gemm_packed_naive(&a, &pack_ternary(&t)).map_err(e2s)?;
        ensure!(
            got == gemm_reference(&a, &t).map_err(e2s)?,
            "case {case} differs"
        );
    }
    Ok(cases)
}

pub fn check_traffic(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 11);
    let mut shapes = FFN_SHAPES.to_vec();
    for _ in 0..opts.cases / 20 {
        shapes.push((
            rng.gen_range(1..=64),
            rng.gen_range(1..=200),
            rng.gen_range(1..=200),
        ));
    }
    for &(m, k, n) in &shapes {
        let a = random_activations(&mut rng, m, k);
        let p = pack_ternary(&random_ternary(&mut rng, k, n));
        let counter = TrafficCounter::new();
        gemm_packed_blocked(&a, &p, TileGeometry::default(), Some(&counter)).map_err(e2s)?;
        ensure!(
            counter.weight_bytes_read() == packed_weight_bytes(n, k) as u64,
            "{m}x{k}x{n}: counted {} weight bytes, expected {}",
            counter.weight_bytes_read(),
            packed_weight_bytes(n, k)
        );
        ensure!(
            counter.output_bytes_written() == (4 * m * n) as u64,
            "{m}x{k}x{n}: output bytes {}",
            counter.output_bytes_written()
        );
    }
    Ok(shapes.len())
}

// ---------------------------------------------------------------- attention

fn float_linear(rng: &mut impl Rng, r: usize, c: usize) -> Linear {
    Linear::Float(FloatMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0)))
}

fn random_attention(rng: &mut impl Rng, cfg: &AttentionConfig, ternary: bool) -> AttentionWeights {
    let d = cfg.embed_dim();
    let mut lin = |c: usize| {
        let l = float_linear(rng, d, c);
        if ternary {
            let t = absmean_quantize(&l.to_float().expect("float"), DEFAULT_EPS).expect("finite");
            Linear::Packed(pack_ternary(&t))
        } else {
            l
        }
    };
    AttentionWeights {
        w_q: lin(d),
        w_k: lin(cfg.kv_width()),
        w_v: lin(cfg.kv_width()),
        w_o: lin(d),
    }
}

pub fn check_mqa_mhsa(opts: &VerifyOptions, cases: usize) -> Outcome {
    let mut rng = rng_for(opts, 12);
    for case in 0..cases {
        let h = [1, 2, 4, 8][rng.gen_range(0..4)];
        let dh = rng.gen_range(1..=64 / h);
        let d = h * dh;
        let tokens = rng.gen_range(1..=16);
        let mqa = AttentionConfig::new(d, h, AttentionMode::Mqa).map_err(e2s)?;
        let mhsa = AttentionConfig::new(d, h, AttentionMode::Mhsa).map_err(e2s)?;
        let w = random_attention(&mut rng, &mqa, case % 2 == 1);
        let x = FloatMatrix::from_fn(tokens, d, |_, _| rng.gen_range(-2.0..2.0));
        let a = mqa_forward(&x, &w, &mqa, DEFAULT_EPS).map_err(e2s)?;
        let wide = w.expand_shared_kv(&mqa).map_err(e2s)?;
        let b = mhsa_forward(&x, &wide, &mhsa, DEFAULT_EPS).map_err(e2s)?;
        ensure!(a == b, "case {case}: D={d} H={h} tokens={tokens} differs");
    }
    Ok(cases)
}

fn attention_f64(x: &FloatMatrix, w: &AttentionWeights, cfg: &AttentionConfig) -> Vec<Vec<f64>> {
    let proj = |l: &Linear| {
        let m = l.to_float().expect("float weights");
        (0..x.rows())
            .map(|i| {
                (0..m.cols())
                    .map(|j| {
                        (0..x.cols())
                            .map(|k| x.get(i, k) as f64 * m.get(k, j) as f64)
                            .sum()
                    })
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    };
    let (q, k, v) = (proj(&w.w_q), proj(&w.w_k), proj(&w.w_v));
    let (n, dh) = (x.rows(), cfg.head_dim());
    let mut concat = vec![vec![0.0; cfg.embed_dim()]; n];
    for h in 0..cfg.heads() {
        let kv_off = match cfg.mode() {
            AttentionMode::Mhsa => h * dh,
            AttentionMode::Mqa => 0,
        };
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|c| q[i][h * dh + c] * k[j][kv_off + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                concat[i][h * dh + c] = (0..n).map(|j| e[j] / z * v[j][kv_off + c]).sum();
            }
        }
    }
    let o = w.w_o.to_float().expect("float weights");
    (0..n)
        .map(|i| {
            (0..o.cols())
                .map(|j| {
                    (0..o.rows())
                        .map(|k| concat[i][k] * o.get(k, j) as f64)
                        .sum()
                })
                .collect()
        })
        .collect()
}

pub fn check_attention_oracle(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 13);
    let cases = 50;
    for case in 0..cases {
        let h = [1, 2, 4][rng.gen_range(0..3)];
        let d = h * rng.gen_range(1..=8);
        let mode = if case % 2 == 0 {
            AttentionMode::Mhsa
        } else {
            AttentionMode::Mqa
        };
        let cfg = AttentionConfig::new(d, h, mode).map_err(e2s)?;
        let w = random_attention(&mut rng, &cfg, false);
        let n = rng.gen_range(1..=8);
        let x = FloatMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let got = crate::attention::attention_forward(&x, &w, &cfg, DEFAULT_EPS).map_err(e2s)?;
        let want = attention_f64(&x, &w, &cfg);
        for (i, row) in want.iter().enumerate() {
            for (j, &t) in row.iter().enumerate() {
                let g = got.get(i, j) as f64;
                ensure!(
                    (g - t).abs() <= 1e-4 * (1.0 + t.abs()),
                    "case {case} ({i},{j}): {g} vs {t}"
                );
            }
        }
    }
    Ok(cases)
}

pub fn check_attention_params() -> Outcome {
    let mhsa = AttentionConfig::new(512, 8, AttentionMode::Mhsa).map_err(e2s)?;
    let mqa = AttentionConfig::new(512, 8, AttentionMode::Mqa).map_err(e2s)?;
    let (a, b) = (kv_param_count(&mhsa), kv_param_count(&mqa));
    ensure!(a == 524_288 && b == 65_536, "K+V params {a} / {b}");
    ensure!(a == 8 * b, "ratio {a}/{b}");
    let (ta, tb) = (attn_param_count(&mhsa), attn_param_count(&mqa));
    ensure!(ta - tb == a - b, "total attention params {ta} / {tb}");
    Ok(1)
}

// ---------------------------------------------------------------- model

/// A random small configuration for end-to-end checks.
pub fn random_tiny_config(rng: &mut impl Rng) -> ModelConfig {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let patch = rng.gen_range(2..=4);
    let ternary = match rng.gen_range(0..4) {
        0 => TernarySet::FFN,
        1 => TernarySet::ALL,
        _ => TernarySet::from_bits(rng.gen_range(1..8)).expect("3-bit mask"),
    };
    ModelConfig {
        layers: rng.gen_range(1..=2),
        heads,
        embed_dim: heads * [4, 8][rng.gen_range(0..2)],
        ffn_mult: rng.gen_range(1..=4),
        patch_size: patch,
        image_size: patch * rng.gen_range(1..=3),
        in_channels: rng.gen_range(1..=3),
        num_classes: rng.gen_range(2..=6),
        attn_mode: if rng.gen_bool(0.5) {
            AttentionMode::Mqa
        } else {
            AttentionMode::Mhsa
        },
        ternary,
    }
}

pub fn random_image(rng: &mut impl Rng, cfg: &ModelConfig) -> Image {
    let s = cfg.image_size;
    let data = (0..s * s * cfg.in_channels)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Image::new(s, s, cfg.in_channels, data).expect("sized to config")
}

pub fn check_model_paths(opts: &VerifyOptions, cases: usize) -> Outcome {
    let mut rng = rng_for(opts, 14);
    for case in 0..cases {
        let cfg = random_tiny_config(&mut rng);
        let float = ModelWeights::random(&cfg, &mut rng);
        let packed = ternarize_weights(&float, cfg.ternary).map_err(e2s)?;
        let unpacked = packed.unpacked().map_err(e2s)?;
        let img = random_image(&mut rng, &cfg);
        let a = forward(&img, &packed, &cfg).map_err(e2s)?;
        let b = forward(&img, &unpacked, &cfg).map_err(e2s)?;
        ensure!(
            a == b,
            "case {case}: {cfg:?} packed and unpacked logits differ"
        );
    }
    Ok(cases)
}

pub fn check_save_load(opts: &VerifyOptions, cases: usize) -> Outcome {
    let mut rng = rng_for(opts, 15);
    for case in 0..cases {
        let cfg = random_tiny_config(&mut rng);
        let float = ModelWeights::random(&cfg, &mut rng);
        let tensors = weights_to_tensor_set(&float, &cfg).map_err(e2s)?;
        let c = convert(
            &tensors,
            &cfg,
            &PrecisionMap::for_config(&cfg),
            Normalization::symmetric(cfg.in_channels),
        )
        .map_err(e2s)?;
        let back = ModelContainer::from_bytes(&c.to_bytes().map_err(e2s)?).map_err(e2s)?;
        let img = random_image(&mut rng, &cfg);
        let a = forward(&img, &c.weights, &c.config).map_err(e2s)?;
        let b = forward(&img, &back.weights, &back.config).map_err(e2s)?;
        ensure!(a == b, "case {case}: logits changed across save/load");
    }
    Ok(cases)
}

pub const REFERENCE_PARAMS: f64 = 8.65e6;
pub const REFERENCE_SIZE_MB: f64 = 10.5;

pub fn check_model_accounting() -> Outcome {
    let cfg = ModelConfig::reference();
    let params = param_count(&cfg).total as f64;
    ensure!(
        (params / REFERENCE_PARAMS - 1.0).abs() <= 0.05,
        "{params} parameters"
    );
    let bytes = model_size_bytes(&cfg, &PrecisionMap::for_config(&cfg)).map_err(e2s)? as f64;
    for unit in [1e6, 1024.0 * 1024.0] {
        let size = bytes / unit;
        ensure!(
            (size / REFERENCE_SIZE_MB - 1.0).abs() <= 0.10,
            "{bytes} bytes = {size:.3} x {unit}"
        );
    }
    Ok(1)
}

// ---------------------------------------------------------------- distill

fn random_logits(rng: &mut impl Rng, n: usize) -> FloatVector {
    let scale = rng.gen_range(0.1..30.0);
    FloatVector::new((0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

pub const TEMPERATURES: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 10.0];

pub fn check_kd_self(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 16);
    let cases = opts.cases / 10 + 1;
    for _ in 0..cases {
        let n = rng.gen_range(1..=16);
        let x = random_logits(&mut rng, n);
        for t in TEMPERATURES {
            let kd = kd_divergence(&x, &x, t).map_err(e2s)?;
            ensure!(kd == 0.0, "kd(x, x, {t}) = {kd}");
        }
    }
    Ok(cases * TEMPERATURES.len())
}

pub fn check_kd_nonneg(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 17);
    for case in 0..opts.cases {
        let n = rng.gen_range(1..=16);
        let (s, t) = (random_logits(&mut rng, n), random_logits(&mut rng, n));
        let temp = TEMPERATURES[case % TEMPERATURES.len()];
        let kd = kd_divergence(&s, &t, temp).map_err(e2s)?;
        ensure!(kd >= 0.0 && kd.is_finite(), "case {case}: kd {kd}");
    }
    Ok(opts.cases)
}

pub fn check_ce_uniform() -> Outcome {
    for c in [2usize, 9, 11] {
        for label in [0, c - 1] {
            let ce = cross_entropy(&FloatVector::zeros(c), label).map_err(e2s)?;
            ensure!((ce - (c as f64).ln()).abs() <= 1e-6, "C={c}: {ce}");
        }
    }
    Ok(3)
}

pub fn check_distill_closed_forms() -> Outcome {
    let tol = 1e-5;
    let ln3 = 3f32.ln();
    let kd = kd_divergence(
        &FloatVector::zeros(2),
        &FloatVector::new(vec![ln3, 0.0]),
        1.0,
    )
    .map_err(e2s)?;
    let kd_want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
    ensure!((kd - kd_want).abs() <= tol, "kd {kd} vs {kd_want}");

    // Doubling logits and temperature leaves the distributions unchanged.
    let kd2 = kd_divergence(
        &FloatVector::zeros(2),
        &FloatVector::new(vec![2.0 * ln3, 0.0]),
        2.0,
    )
    .map_err(e2s)?;
    ensure!(
        (kd2 - 4.0 * kd_want).abs() <= tol,
        "kd at T=2 {kd2} vs {}",
        4.0 * kd_want
    );

    let ce = cross_entropy(&FloatVector::new(vec![ln3, 0.0]), 1).map_err(e2s)?;
    ensure!((ce - 4f64.ln()).abs() <= tol, "ce {ce}");
    ensure!(
        cross_entropy(&FloatVector::new(vec![80.0, -80.0]), 0).map_err(e2s)? <= tol,
        "confident ce"
    );

    let proj = FeatureProjection {
        matrix: FloatMatrix::identity(2),
    };
    let s = FloatMatrix::from_rows(&[vec![1.0, 2.0]]).map_err(e2s)?;
    let t = FloatMatrix::from_rows(&[vec![2.0, 4.0]]).map_err(e2s)?;
    let feat = feature_loss(&s, &t, &proj).map_err(e2s)?;
    ensure!((feat - 2.5).abs() <= tol, "feature loss {feat}");

    let parts = LossParts { ce, kd, feat };
    let total = total_loss(parts, &DistillWeights::default());
    let want = 4f64.ln() + kd_want + 2.5;
    ensure!((total - want).abs() <= tol, "total {total} vs {want}");
    Ok(6)
}

//! Kernel and end-to-end timing with byte accounting.
//!
//! Each CSV row is one (workload, kernel, thread count) measurement. Times
//! are the median of `repeats` runs after `warmup` untimed runs.
//!
//! Kernels:
//! * `packed`: blocked kernel over 2-bit packed weights.
//! * `reference`: for FFN workloads, the naive kernel that decodes a packed
//!   field at every multiply; for the full model, the unpacked integer path.
//! * `float`: f32 GEMM on the dequantized weights.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bitvit_core::container::{ternarize_weights, ModelContainer};
use bitvit_core::kernel::{gemm_packed_blocked, gemm_packed_naive, TileGeometry, TrafficCounter};
use bitvit_core::model::{forward, model_ops, model_size_bytes, Image, ModelConfig, ModelWeights};
use bitvit_core::packing::{pack_ternary, packed_weight_bytes, unpack_ternary};
use bitvit_core::quantize::{absmax_quantize, absmean_quantize, DEFAULT_EPS};
use bitvit_core::tensor::{matmul_f32, FloatMatrix};
use bitvit_core::{Linear, Precision, PrecisionMap, TernarySet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::threads::pool;

pub const SCHEMA: &str = "bitvit-bench/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    /// The FFN up-projection: K = D, N = F.
    FfnKn,
    /// The FFN down-projection: K = F, N = D.
    FfnNk,
    FullModel,
}

impl Workload {
    pub const ALL: [Workload; 3] = [Workload::FfnKn, Workload::FfnNk, Workload::FullModel];

    pub fn name(self) -> &'static str {
        match self {
            Workload::FfnKn => "ffn-kn",
            Workload::FfnNk => "ffn-nk",
            Workload::FullModel => "full-model",
        }
    }

    /// `(M, K, N)` of the FFN workloads for `cfg`; M is the token count.
    pub fn ffn_shape(self, cfg: &ModelConfig) -> Option<(usize, usize, usize)> {
        let (m, d, f) = (cfg.tokens(), cfg.embed_dim, cfg.ffn_dim());
        match self {
            Workload::FfnKn => Some((m, d, f)),
            Workload::FfnNk => Some((m, f, d)),
            Workload::FullModel => None,
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Workload {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Workload::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .with_context(|| format!("unknown workload `{s}` (ffn-kn, ffn-nk, full-model)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Packed,
    Reference,
    Float,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Packed, Kernel::Reference, Kernel::Float];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Packed => "packed",
            Kernel::Reference => "reference",
            Kernel::Float => "float",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub workloads: Vec<Workload>,
    pub kernels: Vec<Kernel>,
    pub threads: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub config: ModelConfig,
    /// Weights for the full-model workload; random when absent.
    pub model: Option<ModelContainer>,
}

impl BenchOptions {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            workloads: Workload::ALL.to_vec(),
            kernels: Kernel::ALL.to_vec(),
            threads: vec![1],
            repeats: 30,
            warmup: 3,
            seed: 7,
            config,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub schema: String,
    pub workload: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub kernel: String,
    pub threads: usize,
    pub repeats: usize,
    pub median_ns: u64,
    pub ops: u64,
    pub gops_per_s: f64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub speedup_vs_reference: f64,
}

pub const CSV_HEADER: [&str; 14] = [
    "schema",
    "workload",
    "m",
    "n",
    "k",
    "kernel",
    "threads",
    "repeats",
    "median_ns",
    "ops",
    "gops_per_s",
    "weight_bytes",
    "activation_bytes",
    "speedup_vs_reference",
];

impl BenchRow {
    fn record(&self) -> [String; 14] {
        [
            self.schema.clone(),
            self.workload.clone(),
            self.m.to_string(),
            self.n.to_string(),
            self.k.to_string(),
            self.kernel.clone(),
            self.threads.to_string(),
            self.repeats.to_string(),
            self.median_ns.to_string(),
            self.ops.to_string(),
            format!("{:.4}", self.gops_per_s),
            self.weight_bytes.to_string(),
            self.activation_bytes.to_string(),
            format!("{:.4}", self.speedup_vs_reference),
        ]
    }

    fn parse(r: &csv::StringRecord) -> Result<Self> {
        if r.len() != CSV_HEADER.len() {
            bail!("expected {} columns, found {}", CSV_HEADER.len(), r.len());
        }
        let int = |i: usize| -> Result<u64> {
            r[i].parse()
                .with_context(|| format!("column {}: {:?}", CSV_HEADER[i], &r[i]))
        };
        let real = |i: usize| -> Result<f64> {
            r[i].parse()
                .with_context(|| format!("column {}: {:?}", CSV_HEADER[i], &r[i]))
        };
        Ok(Self {
            schema: r[0].to_string(),
            workload: r[1].to_string(),
            m: int(2)? as usize,
            n: int(3)? as usize,
            k: int(4)? as usize,
            kernel: r[5].to_string(),
            threads: int(6)? as usize,
            repeats: int(7)? as usize,
            median_ns: int(8)?,
            ops: int(9)?,
            gops_per_s: real(10)?,
            weight_bytes: int(11)?,
            activation_bytes: int(12)?,
            speedup_vs_reference: real(13)?,
        })
    }
}

pub fn write_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl std::io::Read) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        bail!("unexpected CSV header {header:?}");
    }
    r.records().map(|rec| BenchRow::parse(&rec?)).collect()
}

/// Median wall time of `repeats` runs of `f`, in nanoseconds.
pub fn median_ns(repeats: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<u64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_nanos() as u64);
    }
    times.sort_unstable();
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2
    })
}

fn random_float(rng: &mut impl Rng, rows: usize, cols: usize) -> FloatMatrix {
    FloatMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

struct Measurement {
    kernel: Kernel,
    median_ns: u64,
    weight_bytes: u64,
    activation_bytes: u64,
}

fn ffn_rows(
    opts: &BenchOptions,
    workload: Workload,
    threads: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize, usize, u64, Vec<Measurement>)> {
    let (m, k, n) = workload.ffn_shape(&opts.config).expect("FFN workload");
    let a = random_float(rng, m, k);
    let q = absmax_quantize(&a, DEFAULT_EPS)?;
    let t = absmean_quantize(&random_float(rng, k, n), DEFAULT_EPS)?;
    let p = pack_ternary(&t);
    let w_float = unpack_ternary(&p)?.dequantize();
    let geom = TileGeometry::default();
    let pool = pool(threads)?;
    let ops = 2 * (m * n * k) as u64;

    let mut out = Vec::new();
    for &kernel in &opts.kernels {
        let meas = pool.install(|| -> Result<Measurement> {
            Ok(match kernel {
                Kernel::Packed => {
                    let counter = TrafficCounter::new();
                    gemm_packed_blocked(&q, &p, geom, Some(&counter))?;
                    let ns = median_ns(opts.repeats, opts.warmup, || {
                        gemm_packed_blocked(&q, &p, geom, None)?;
                        Ok(())
                    })?;
                    Measurement {
                        kernel,
                        median_ns: ns,
                        weight_bytes: counter.weight_bytes_read(),
                        activation_bytes: counter.activation_bytes_read(),
                    }
                }
                Kernel::Reference => Measurement {
                    kernel,
                    median_ns: median_ns(opts.repeats, opts.warmup, || {
                        gemm_packed_naive(&q, &p)?;
                        Ok(())
                    })?,
                    weight_bytes: packed_weight_bytes(n, k) as u64,
                    activation_bytes: (m * k) as u64,
                },
                Kernel::Float => Measurement {
                    kernel,
                    median_ns: median_ns(opts.repeats, opts.warmup, || {
                        matmul_f32(&a, &w_float)?;
                        Ok(())
                    })?,
                    weight_bytes: 4 * (k * n) as u64,
                    activation_bytes: 4 * (m * k) as u64,
                },
            })
        })?;
        out.push(meas);
    }
    Ok((m, k, n, ops, out))
}

fn model_rows(
    opts: &BenchOptions,
    threads: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize, usize, u64, Vec<Measurement>)> {
    let (cfg, packed) = match &opts.model {
        Some(c) => (c.config, c.weights.clone()),
        None => {
            let cfg = opts.config;
            let w = ModelWeights::random(&cfg, rng);
            (cfg, ternarize_weights(&w, cfg.ternary)?)
        }
    };
    let unpacked = packed.unpacked()?;
    let float = packed.try_map_linears(|_, l| Ok(Linear::Float(l.to_float()?)))?;
    let s = cfg.image_size;
    let pixels = s * s * cfg.in_channels;
    let img = Image::new(
        s,
        s,
        cfg.in_channels,
        (0..pixels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let ternary_bytes = model_size_bytes(&cfg, &PrecisionMap::for_config(&cfg))? as u64;
    let float_bytes =
        model_size_bytes(&cfg, &PrecisionMap::new(TernarySet::NONE, Precision::F32))? as u64;
    let pool = pool(threads)?;

    let mut out = Vec::new();
    for &kernel in &opts.kernels {
        let (weights, weight_bytes) = match kernel {
            Kernel::Packed => (&packed, ternary_bytes),
            Kernel::Reference => (&unpacked, ternary_bytes),
            Kernel::Float => (&float, float_bytes),
        };
        let ns = pool.install(|| {
            median_ns(opts.repeats, opts.warmup, || {
                forward(&img, weights, &cfg)?;
                Ok(())
            })
        })?;
        out.push(Measurement {
            kernel,
            median_ns: ns,
            weight_bytes,
            activation_bytes: 4 * pixels as u64,
        });
    }
    Ok((
        cfg.tokens(),
        cfg.embed_dim,
        cfg.ffn_dim(),
        model_ops(&cfg),
        out,
    ))
}

pub fn run(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    opts.config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();
    for &workload in &opts.workloads {
        for &threads in &opts.threads {
            let (m, k, n, ops, meas) = match workload {
                Workload::FullModel => model_rows(opts, threads, &mut rng)?,
                _ => ffn_rows(opts, workload, threads, &mut rng)?,
            };
            let reference = meas
                .iter()
                .find(|x| x.kernel == Kernel::Reference)
                .map(|x| x.median_ns);
            for x in meas {
                let ns = x.median_ns.max(1);
                rows.push(BenchRow {
                    schema: SCHEMA.to_string(),
                    workload: workload.name().to_string(),
                    m,
                    n,
                    k,
                    kernel: x.kernel.name().to_string(),
                    threads,
                    repeats: opts.repeats.max(1),
                    median_ns: ns,
                    ops,
                    gops_per_s: ops as f64 / ns as f64,
                    weight_bytes: x.weight_bytes,
                    activation_bytes: x.activation_bytes,
                    speedup_vs_reference: reference.map_or(f64::NAN, |r| r as f64 / ns as f64),
                });
            }
        }
    }
    Ok(rows)
}

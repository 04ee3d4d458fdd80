use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bitvit_cli::bench::{self, BenchOptions, Kernel, Workload};
use bitvit_cli::commands;
use bitvit_cli::threads::{configured_threads, pool};
use bitvit_core::attention::AttentionMode;
use bitvit_core::container::{read_header, ModelContainer, Normalization};
use bitvit_core::distill::DistillWeights;
use bitvit_core::verify::{self, Suite, VerifyOptions};
use bitvit_core::{ModelConfig, Precision, PrecisionMap, TernarySet};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Ternary-weight Vision Transformer inference tools.
#[derive(Parser)]
#[command(name = "bitvit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a float checkpoint (FTEN directory or .bmvc) into a packed container.
    Convert(ConvertArgs),
    /// Print a container's header and section table.
    Inspect { path: PathBuf },
    /// Run the self-check suites; exit status 0 only if every check passes.
    Verify(VerifyArgs),
    /// Time the kernels and the full model; CSV on stdout.
    Bench(BenchArgs),
    /// Classify one image.
    Classify {
        model: PathBuf,
        image: PathBuf,
        /// File with one class name per line.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Write a random float checkpoint as FTEN tensors.
    Synth {
        out_dir: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttnArg {
    Mqa,
    Mhsa,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenseArg {
    F32,
    Bf16,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    ffn_mult: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_enum)]
    attention: Option<AttnArg>,
    /// Comma list of ffn, attn_qkv, attn_out (or all / none).
    #[arg(long)]
    ternary_set: Option<TernarySet>,
}

impl ModelArgs {
    fn apply(&self, mut c: ModelConfig) -> ModelConfig {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.layers, self.layers);
        set(&mut c.heads, self.heads);
        set(&mut c.embed_dim, self.embed_dim);
        set(&mut c.ffn_mult, self.ffn_mult);
        set(&mut c.patch_size, self.patch);
        set(&mut c.image_size, self.image_size);
        set(&mut c.in_channels, self.channels);
        set(&mut c.num_classes, self.classes);
        if let Some(a) = self.attention {
            c.attn_mode = match a {
                AttnArg::Mqa => AttentionMode::Mqa,
                AttnArg::Mhsa => AttentionMode::Mhsa,
            };
        }
        if let Some(t) = self.ternary_set {
            c.ternary = t;
        }
        c
    }
}

#[derive(Args)]
struct ConvertArgs {
    input: PathBuf,
    output: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Precision of the layers that stay dense.
    #[arg(long, value_enum, default_value = "f32")]
    dense: DenseArg,
    /// Per-channel input mean, comma separated.
    #[arg(long, value_delimiter = ',')]
    mean: Option<Vec<f32>>,
    /// Per-channel input std, comma separated.
    #[arg(long, value_delimiter = ',')]
    std: Option<Vec<f32>>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suites to run (default: all).
    #[arg(long, value_delimiter = ',')]
    suite: Vec<Suite>,
    #[arg(long, default_value_t = VerifyOptions::default().cases)]
    cases: usize,
    #[arg(long, default_value_t = VerifyOptions::default().seed)]
    seed: u64,
    /// Also load and run this container.
    #[arg(long)]
    container: Option<PathBuf>,
    /// Distillation fixture directory.
    #[arg(long)]
    distill: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    label: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// lambda_cls,lambda_logits,lambda_feat
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0, 1.0])]
    lambda: Vec<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Workloads (default: all of ffn-kn, ffn-nk, full-model).
    #[arg(long, value_delimiter = ',')]
    workload: Vec<Workload>,
    #[arg(long, default_value_t = 30)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Thread counts (default: 1 and the configured worker count).
    #[arg(long, value_delimiter = ',')]
    threads: Vec<usize>,
    /// Container for the full-model workload (default: random weights).
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    config: ModelArgs,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let threads = configured_threads()?;
    match cli.command {
        Command::Convert(a) => convert(a),
        Command::Inspect { path } => {
            print!("{}", commands::inspect(&path)?);
            Ok(true)
        }
        Command::Verify(a) => pool(threads)?.install(|| verify(a)),
        Command::Bench(a) => bench(a, threads),
        Command::Classify {
            model,
            image,
            labels,
        } => pool(threads)?.install(|| {
            let m = ModelContainer::load(&model)
                .with_context(|| format!("loading {}", model.display()))?;
            let img = commands::load_image(&image, &m.config, &m.normalization)?;
            let labels = labels
                .map(|p| commands::read_labels(&p, m.config.num_classes))
                .transpose()?;
            print!("{}", commands::classify(&m, &img, labels)?.render());
            Ok(true)
        }),
        Command::Synth {
            out_dir,
            model,
            seed,
        } => {
            let cfg = model.apply(ModelConfig::reference());
            cfg.validate()?;
            let n = commands::synth(&out_dir, &cfg, seed)?;
            println!("wrote {n} tensors to {}", out_dir.display());
            Ok(true)
        }
    }
}

fn convert(a: ConvertArgs) -> Result<bool> {
    // A container input supplies its own configuration and normalization.
    let (base, base_norm) = if a.input.is_file() {
        let bytes =
            std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
        let h = read_header(&bytes)?;
        (h.config, Some(h.normalization))
    } else {
        (ModelConfig::reference(), None)
    };
    let cfg = a.model.apply(base);
    cfg.validate()?;
    let c = cfg.in_channels;
    let norm = match (a.mean, a.std) {
        (Some(m), Some(s)) => Normalization::new(m, s)?,
        (None, None) => base_norm
            .filter(|n| n.mean.len() == c)
            .unwrap_or_else(|| Normalization::symmetric(c)),
        _ => bail!("--mean and --std must be given together"),
    };
    let dense = match a.dense {
        DenseArg::F32 => Precision::F32,
        DenseArg::Bf16 => Precision::Bf16,
    };
    let precision = PrecisionMap::new(cfg.ternary, dense);
    let summary = commands::convert(&a.input, &a.output, &cfg, &precision, norm)?;
    print!("{}", summary.render());
    Ok(true)
}

fn verify(a: VerifyArgs) -> Result<bool> {
    let opts = VerifyOptions {
        seed: a.seed,
        cases: a.cases,
    };
    let suites = if a.suite.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.suite
    };
    let mut results = Vec::new();
    for s in suites {
        for r in verify::run_suite(s, &opts) {
            println!("{r}");
            results.push(r);
        }
    }
    if let Some(path) = &a.container {
        for r in verify::check_container(path) {
            println!("{r}");
            results.push(r);
        }
    }
    if let Some(dir) = &a.distill {
        let [cls, logits, feat] = a.lambda[..] else {
            bail!("--lambda takes three values");
        };
        let w = DistillWeights {
            lambda_cls: cls,
            lambda_logits: logits,
            lambda_feat: feat,
            temperature: a.temperature,
        };
        for r in commands::check_distill_fixture(dir, a.label, &w) {
            println!("{r}");
            results.push(r);
        }
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(failed == 0)
}

fn bench(a: BenchArgs, threads: usize) -> Result<bool> {
    let model = a
        .model
        .as_ref()
        .map(|p| ModelContainer::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let base = model
        .as_ref()
        .map_or(ModelConfig::reference(), |m| m.config);
    let mut opts = BenchOptions::new(a.config.apply(base));
    if !a.workload.is_empty() {
        opts.workloads = a.workload;
    }
    opts.kernels = Kernel::ALL.to_vec();
    opts.threads = if a.threads.is_empty() {
        let mut t = vec![1, threads];
        t.dedup();
        t
    } else {
        a.threads
    };
    opts.repeats = a.repeats;
    opts.warmup = a.warmup;
    opts.seed = a.seed;
    opts.model = model;
    let rows = bench::run(&opts)?;
    bench::write_csv(&rows, std::io::stdout().lock())?;
    Ok(true)
}

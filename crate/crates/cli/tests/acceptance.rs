//! Acceptance criteria, one pass/fail line each. Run with
//! `cargo test -p bitvit-cli --test acceptance`.

use std::time::{Duration, Instant};

use bitvit_cli::bench::{self, BenchOptions, Kernel, Workload};
use bitvit_cli::threads::configured_threads;
use bitvit_core::attention::{kv_param_count, AttentionConfig, AttentionMode};
use bitvit_core::model::{model_size_bytes, param_count, ModelConfig, PrecisionMap};
use bitvit_core::packing::packed_weight_bytes;
use bitvit_core::verify::{self, VerifyOptions};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    title: &'static str,
    budget: Option<Duration>,
    run: fn(&VerifyOptions) -> Outcome,
}

fn all(checks: &[Result<usize, String>]) -> Result<usize, String> {
    let mut cases = 0;
    for c in checks {
        cases += c.clone()?;
    }
    Ok(cases)
}

fn quantization(o: &VerifyOptions) -> Outcome {
    let n = all(&[
        verify::check_absmean(o),
        verify::check_absmax(o),
        verify::check_quantize_example(),
    ])?;
    Ok(format!("{n} cases; [[0.2,-0.9,0.5]] -> [0,-1,1]"))
}

fn packing(o: &VerifyOptions) -> Outcome {
    let n = all(&[
        verify::check_pack_round_trip(o),
        verify::check_bit_placement(o),
        verify::check_zero_tile(),
    ])?;
    Ok(format!(
        "{n} matrices incl. 33x17, 1x1, 2048x512; zero tile = 0x55555555"
    ))
}

fn kernel(o: &VerifyOptions) -> Outcome {
    let n = all(&[verify::check_gemm_random(o), verify::check_gemm_ffn(o)])?;
    Ok(format!(
        "{n} combinations (m_block 1/4/8/16, 1/2/4 threads) + 197x512x2048, 197x2048x512"
    ))
}

fn kv_accounting(_: &VerifyOptions) -> Outcome {
    let mhsa = AttentionConfig::new(512, 8, AttentionMode::Mhsa).map_err(|e| e.to_string())?;
    let mqa = AttentionConfig::new(512, 8, AttentionMode::Mqa).map_err(|e| e.to_string())?;
    let (a, b) = (kv_param_count(&mhsa), kv_param_count(&mqa));
    if a != 524_288 || b != 65_536 || a != 8 * b {
        return Err(format!("K+V {a} (MHSA) vs {b} (MQA)"));
    }
    Ok(format!("K+V {a} vs {b}, ratio {}", a / b))
}

fn model_accounting(_: &VerifyOptions) -> Outcome {
    let cfg = ModelConfig::reference();
    let params = param_count(&cfg).total;
    let bytes =
        model_size_bytes(&cfg, &PrecisionMap::for_config(&cfg)).map_err(|e| e.to_string())?;
    let p_err = params as f64 / 8.65e6 - 1.0;
    let mb = bytes as f64 / 1e6;
    let mib = bytes as f64 / (1024.0 * 1024.0);
    let detail = format!(
        "{params} params ({:+.2}%), {bytes} bytes = {mb:.3} MB ({:+.2}%) = {mib:.3} MiB ({:+.2}%)",
        100.0 * p_err,
        100.0 * (mb / 10.5 - 1.0),
        100.0 * (mib / 10.5 - 1.0)
    );
    if p_err.abs() > 0.05 || (mb / 10.5 - 1.0).abs() > 0.10 || (mib / 10.5 - 1.0).abs() > 0.10 {
        return Err(detail);
    }
    Ok(detail)
}

fn traffic(o: &VerifyOptions) -> Outcome {
    let n = all(&[verify::check_byte_ratio(o), verify::check_traffic(o)])?;
    let ratio = (4 * 512 * 2048) as f64 / packed_weight_bytes(2048, 512) as f64;
    Ok(format!(
        "{n} shapes; f32/packed = {ratio:.1}; counter == packed_weight_bytes"
    ))
}

fn mqa_mhsa(o: &VerifyOptions) -> Outcome {
    let n = verify::check_mqa_mhsa(o, 100)?;
    Ok(format!("{n} random inputs, bitwise"))
}

fn end_to_end(o: &VerifyOptions) -> Outcome {
    let a = verify::check_model_paths(o, 20)?;
    let b = verify::check_save_load(o, 20)?;
    Ok(format!(
        "{a} models packed == unpacked, {b} save/load round trips, bitwise"
    ))
}

fn losses(o: &VerifyOptions) -> Outcome {
    let n = all(&[
        verify::check_kd_self(o),
        verify::check_kd_nonneg(o),
        verify::check_ce_uniform(),
        verify::check_distill_closed_forms(),
    ])?;
    Ok(format!("{n} cases"))
}

fn speedup(_: &VerifyOptions) -> Outcome {
    let threads = configured_threads().map_err(|e| e.to_string())?;
    let mut opts = BenchOptions::new(ModelConfig::reference());
    opts.workloads = vec![Workload::FfnKn, Workload::FfnNk];
    opts.kernels = vec![Kernel::Packed, Kernel::Reference];
    opts.threads = vec![threads];
    opts.repeats = 5;
    opts.warmup = 1;
    let rows = bench::run(&opts).map_err(|e| format!("{e:#}"))?;

    // The CSV must survive a round trip through its own reader.
    let mut csv = Vec::new();
    bench::write_csv(&rows, &mut csv).map_err(|e| e.to_string())?;
    let parsed = bench::read_csv(csv.as_slice()).map_err(|e| e.to_string())?;
    if parsed.len() != rows.len() {
        return Err("CSV round trip lost rows".into());
    }

    let mut parts = Vec::new();
    let mut ok = true;
    for w in &opts.workloads {
        let row = parsed
            .iter()
            .find(|r| r.workload == w.name() && r.kernel == "packed")
            .ok_or("missing packed row")?;
        if (row.m, row.k, row.n) != w.ffn_shape(&opts.config).unwrap() {
            return Err(format!("{w}: shape {}x{}x{}", row.m, row.k, row.n));
        }
        ok &= row.speedup_vs_reference > 1.0;
        parts.push(format!("{w} {:.2}x", row.speedup_vs_reference));
    }
    let detail = format!(
        "packed vs naive at {threads} thread(s): {}",
        parts.join(", ")
    );
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const CRITERIA: [Criterion; 10] = [
    Criterion {
        id: 1,
        title: "quantization correctness",
        budget: Some(Duration::from_secs(5)),
        run: quantization,
    },
    Criterion {
        id: 2,
        title: "pack/unpack round trip",
        budget: Some(Duration::from_secs(5)),
        run: packing,
    },
    Criterion {
        id: 3,
        title: "kernel oracle equivalence",
        budget: Some(Duration::from_secs(60)),
        run: kernel,
    },
    Criterion {
        id: 4,
        title: "K/V parameter accounting",
        budget: None,
        run: kv_accounting,
    },
    Criterion {
        id: 5,
        title: "whole-model parameter and size accounting",
        budget: None,
        run: model_accounting,
    },
    Criterion {
        id: 6,
        title: "weight-traffic surrogate",
        budget: None,
        run: traffic,
    },
    Criterion {
        id: 7,
        title: "MQA == MHSA with replicated K/V",
        budget: None,
        run: mqa_mhsa,
    },
    Criterion {
        id: 8,
        title: "end-to-end path consistency",
        budget: None,
        run: end_to_end,
    },
    Criterion {
        id: 9,
        title: "loss properties",
        budget: None,
        run: losses,
    },
    Criterion {
        id: 10,
        title: "packed kernel faster than naive on FFN shapes",
        budget: None,
        run: speedup,
    },
];

fn main() {
    let opts = VerifyOptions::default();
    let only: Option<u32> = std::env::args()
        .skip(1)
        .find_map(|a| a.strip_prefix("criterion-").and_then(|n| n.parse().ok()));
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| only.is_none_or(|id| id == c.id)) {
        let start = Instant::now();
        let mut result = std::panic::catch_unwind(|| (c.run)(&opts))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let elapsed = start.elapsed();
        if let (Ok(detail), Some(budget)) = (&result, c.budget) {
            if elapsed > budget {
                result = Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}"));
            }
        }
        match result {
            Ok(detail) => println!("[PASS] {:>2} {} ({elapsed:.2?}): {detail}", c.id, c.title),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2} {} ({elapsed:.2?}): {why}", c.id, c.title);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

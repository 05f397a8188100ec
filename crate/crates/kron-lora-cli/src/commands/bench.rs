//! `kronlora bench`: CPU wall-clock micro-benchmarks of the adapter
//! forward and forward+backward passes, plus checkpoint save time.
//!
//! Timings are medians over `--repeats` runs (at least 3) after
//! `--warmup` discarded runs. Throughputs are examples per second at the
//! given batch. When both the hybrid and the plain low-rank family are
//! benched, their ratio is reported next to fixed accelerator reference
//! figures for context.

use clap::Args;
use kron_lora::checkpoint;
use kron_lora::{
    init_adapter, loss_and_grad, param_count, plan_kron_lora, plan_krona, plan_lora,
    workspace_floats_per_example, AdapterKind, Error, FrozenLinear, LayerSpec, LossSpec, Result,
    Rng, SlicePolicy,
};
use serde::Serialize;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Adapter kind to bench: lora, krona, kronlora, or "all" for the
    /// hybrid-vs-low-rank comparison.
    #[arg(long, default_value = "all")]
    pub kind: String,
    #[arg(long, default_value_t = 4096)]
    pub d_in: usize,
    #[arg(long, default_value_t = 4096)]
    pub d_out: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Timed repetitions per measurement (minimum 3).
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Untimed runs before measuring.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub median_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Dims {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub kind: String,
    pub dims: Dims,
    pub batch: usize,
    pub parameters: usize,
    /// 8 bytes per trainable parameter.
    pub adapter_bytes: u64,
    /// 8 bytes per transient chain float per example.
    pub workspace_bytes: u64,
    pub forward: Timing,
    pub forward_backward: Timing,
    /// Examples per second through the adapted forward pass.
    pub forward_throughput: f64,
    pub forward_backward_throughput: f64,
    pub checkpoint_bytes: u64,
    pub checkpoint_save_seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct GpuReference {
    pub kronlora_examples_per_second: f64,
    pub lora_examples_per_second: f64,
    pub note: &'static str,
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    /// Hybrid forward throughput divided by plain low-rank forward
    /// throughput on this machine.
    pub kronlora_over_lora_forward: f64,
    pub kronlora_over_lora_forward_backward: f64,
    pub gpu_reference: GpuReference,
}

#[derive(Debug, Serialize)]
pub struct BenchPayload {
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub reports: Vec<BenchReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

fn timing(mut seconds: Vec<f64>) -> Timing {
    seconds.sort_by(f64::total_cmp);
    let n = seconds.len();
    let median = if n % 2 == 1 {
        seconds[n / 2]
    } else {
        0.5 * (seconds[n / 2 - 1] + seconds[n / 2])
    };
    Timing {
        median_seconds: median,
        min_seconds: seconds[0],
        max_seconds: seconds[n - 1],
    }
}

fn bench_kind(
    kind: AdapterKind,
    args: &BenchArgs,
    layer: &FrozenLinear,
    out_dir: &Path,
    seed: u64,
) -> Result<BenchReport> {
    let spec = LayerSpec::new(args.d_in, args.d_out)?;
    let plan = match kind {
        AdapterKind::KronLora => plan_kron_lora(&spec, args.rank, SlicePolicy::default())?,
        AdapterKind::Lora => plan_lora(&spec, args.rank)?,
        AdapterKind::KronA => plan_krona(&spec),
    };
    let mut rng = Rng::new(seed);
    let mut adapter = init_adapter(&plan, &mut rng)?;
    adapter.randomize(&mut rng);
    adapter.set_training(true);
    let x = kron_lora::DenseMatrix::random_normal(args.d_in, args.batch, 1.0, &mut rng);
    let targets = kron_lora::DenseMatrix::random_normal(args.d_out, args.batch, 1.0, &mut rng);
    let loss = LossSpec::mse(targets);

    for _ in 0..args.warmup {
        adapter.forward(layer, &x, &mut rng)?;
        loss_and_grad(&mut adapter, layer, &x, &loss, &mut rng)?;
    }

    let mut fwd = Vec::with_capacity(args.repeats);
    for _ in 0..args.repeats {
        let t = Instant::now();
        let out = adapter.forward(layer, &x, &mut rng)?;
        fwd.push(t.elapsed().as_secs_f64());
        std::hint::black_box(out.get(0, 0));
    }
    let mut fwd_bwd = Vec::with_capacity(args.repeats);
    for _ in 0..args.repeats {
        let t = Instant::now();
        let grads = loss_and_grad(&mut adapter, layer, &x, &loss, &mut rng)?;
        fwd_bwd.push(t.elapsed().as_secs_f64());
        std::hint::black_box(grads.len());
    }

    let ckpt_path = out_dir.join(format!("bench_{kind}.ckpt"));
    let t = Instant::now();
    let checkpoint_bytes = checkpoint::save(&adapter, &ckpt_path)?;
    let checkpoint_save_seconds = t.elapsed().as_secs_f64();

    let forward = timing(fwd);
    let forward_backward = timing(fwd_bwd);
    let params = param_count(&plan);
    Ok(BenchReport {
        kind: kind.to_string(),
        dims: Dims {
            d_in: args.d_in,
            d_out: args.d_out,
            rank: plan.rank,
        },
        batch: args.batch,
        parameters: params,
        adapter_bytes: 8 * params as u64,
        workspace_bytes: 8 * workspace_floats_per_example(&plan) as u64,
        forward_throughput: args.batch as f64 / forward.median_seconds,
        forward_backward_throughput: args.batch as f64 / forward_backward.median_seconds,
        forward,
        forward_backward,
        checkpoint_bytes,
        checkpoint_save_seconds,
    })
}

pub fn run(args: &BenchArgs, seed: u64, out_dir: &Path) -> Result<BenchPayload> {
    if args.repeats < 3 {
        return Err(Error::Config(format!(
            "--repeats must be at least 3 for a meaningful median, got {}",
            args.repeats
        )));
    }
    let kinds: Vec<AdapterKind> = match args.kind.as_str() {
        "all" => vec![AdapterKind::KronLora, AdapterKind::Lora],
        other => vec![AdapterKind::from_str(other)?],
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;

    let mut rng = Rng::new(seed);
    let layer = FrozenLinear::random(args.d_in, args.d_out, true, &mut rng);
    let reports: Vec<BenchReport> = kinds
        .iter()
        .map(|&k| bench_kind(k, args, &layer, out_dir, rng.split().next_u64()))
        .collect::<Result<_>>()?;

    let find = |name: &str| reports.iter().find(|r| r.kind == name);
    let comparison = match (find("kronlora"), find("lora")) {
        (Some(h), Some(l)) => Some(Comparison {
            kronlora_over_lora_forward: h.forward_throughput / l.forward_throughput,
            kronlora_over_lora_forward_backward: h.forward_backward_throughput
                / l.forward_backward_throughput,
            gpu_reference: GpuReference {
                kronlora_examples_per_second: 27.04,
                lora_examples_per_second: 29.28,
                note: "fixed reference figures from an accelerator training run of the same \
                       two families at rank 8; shown for context only, never compared \
                       against these CPU timings",
            },
        }),
        _ => None,
    };
    Ok(BenchPayload {
        batch: args.batch,
        repeats: args.repeats,
        warmup: args.warmup,
        reports,
        comparison,
    })
}

pub fn print_summary(payload: &BenchPayload) {
    for r in &payload.reports {
        println!(
            "{:<9} {}x{} r{} batch {}: forward {:>8.2} ex/s, forward+backward {:>8.2} ex/s, \
             ckpt {} bytes in {:.3}s",
            r.kind,
            r.dims.d_out,
            r.dims.d_in,
            r.dims.rank,
            r.batch,
            r.forward_throughput,
            r.forward_backward_throughput,
            r.checkpoint_bytes,
            r.checkpoint_save_seconds
        );
    }
    if let Some(c) = &payload.comparison {
        println!(
            "kronlora/lora throughput: {:.3} forward, {:.3} forward+backward \
             (reference accelerator figures: {:.2} vs {:.2} ex/s)",
            c.kronlora_over_lora_forward,
            c.kronlora_over_lora_forward_backward,
            c.gpu_reference.kronlora_examples_per_second,
            c.gpu_reference.lora_examples_per_second
        );
    }
}

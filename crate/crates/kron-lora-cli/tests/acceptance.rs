//! The acceptance gate: ten numbered criteria covering the dense-oracle
//! equivalence of the factored forward, the rank identity, gradient
//! correctness, the planner's parameter arithmetic, chain shapes, training
//! behavior on realizable and sequential tasks, the checkpoint format, and
//! the binary's determinism and benchmark output.
//!
//! Run with the output visible to get one PASS/FAIL line per criterion:
//!
//! ```text
//! cargo test -p kron-lora-cli --test acceptance -- --nocapture
//! ```

mod common;

use common::{load_json, run, strip_volatile, workspace_root};
use kron_lora::checkpoint::{file_size_for_plan, from_bytes, to_bytes};
use kron_lora::{
    gradient_check_suite, init_adapter, oracle_equivalence_suite, param_count, plan_kron_lora,
    plan_krona, plan_lora, rank_identity_suite, run_sequential, train, AdapterKind, AdapterModel,
    AdapterPlan, ChainStage, ClusterClassification, DenseMatrix, FrozenLinear, LayerSpec, Rng,
    SequentialMode, SequentialRunReport, SlicePolicy, SuiteResult, TeacherRegression, ToyTask,
    TrainConfig,
};
use std::time::{Duration, Instant};
use tempfile::TempDir;

type Criterion = fn() -> Result<String, String>;

#[test]
fn acceptance_gate() {
    let criteria: [(&str, &str, Criterion); 10] = [
        ("C1", "factored forward matches the dense Kronecker oracle", oracle_equivalence),
        ("C2", "Kronecker rank multiplicativity", rank_identity),
        ("C3", "analytic gradients match central finite differences", gradient_checks),
        ("C4", "planner parameter formula and compression ratio", parameter_formula),
        ("C5", "factored chain intermediate shapes", chain_shapes),
        ("C6", "convergence on a realizable regression target", realizable_convergence),
        ("C7", "sequential forgetting metric integrity", sequential_protocol),
        ("C8", "checkpoint round-trip and file-size ratio", checkpoint_roundtrip),
        ("C9", "seeded reruns reproduce reports byte-for-byte", determinism),
        ("C10", "benchmark sanity (informational ratio)", bench_sanity),
    ];

    let mut failures = Vec::new();
    for (id, what, criterion) in criteria {
        match criterion() {
            Ok(detail) => println!("{id} PASS — {what}: {detail}"),
            Err(detail) => {
                println!("{id} FAIL — {what}: {detail}");
                failures.push(format!("{id} ({what}): {detail}"));
            }
        }
    }
    assert!(
        failures.is_empty(),
        "acceptance criteria failed:\n{}",
        failures.join("\n")
    );
}

/// Adapt a library error into a criterion failure message.
fn lib<T>(r: kron_lora::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn over_budget(elapsed: Duration, budget: Duration) -> Option<String> {
    (elapsed > budget).then(|| format!("took {elapsed:.2?}, budget {budget:?}"))
}

fn suite_failure(suite: &SuiteResult) -> String {
    format!(
        "max error {:.3e} exceeds {:.1e} ({})",
        suite.max_error,
        suite.threshold,
        suite.failing_case.as_deref().unwrap_or("no case recorded")
    )
}

/// C1: over >= 200 random configurations (dims <= 256, all three kinds),
/// eval-mode forward minus the frozen output equals `expand_delta * x` to a
/// relative error of 1e-9, in under 30 s.
fn oracle_equivalence() -> Result<String, String> {
    let start = Instant::now();
    let suite = lib(oracle_equivalence_suite(200, 20_260_814))?;
    let elapsed = start.elapsed();
    if suite.trials < 200 || suite.threshold > 1e-9 {
        return Err(format!(
            "suite ran {} trials at tolerance {:.1e}; need >= 200 at 1e-9",
            suite.trials, suite.threshold
        ));
    }
    if !suite.passed {
        return Err(suite_failure(&suite));
    }
    if let Some(msg) = over_budget(elapsed, Duration::from_secs(30)) {
        return Err(msg);
    }
    Ok(format!(
        "{} configurations, max rel err {:.3e} <= 1e-9, {:.2?}",
        suite.trials, suite.max_error, elapsed
    ))
}

/// C2: for 100 random (A, B) pairs with dims <= 8,
/// rank(kron(A, B)) == rank(A) * rank(B) in every case.
fn rank_identity() -> Result<String, String> {
    let suite = lib(rank_identity_suite(100, 314_159))?;
    if suite.trials < 100 {
        return Err(format!("suite ran only {} trials", suite.trials));
    }
    if !suite.passed {
        return Err(format!(
            "{} mismatching pairs ({})",
            suite.max_error,
            suite.failing_case.as_deref().unwrap_or("no case recorded")
        ));
    }
    Ok(format!(
        "{} random factor pairs, exact in every case",
        suite.trials
    ))
}

/// C3: analytic backward vs. central finite differences, 50 instances per
/// kind per loss, max relative error <= 1e-5, in under 60 s.
fn gradient_checks() -> Result<String, String> {
    let start = Instant::now();
    let suite = lib(gradient_check_suite(50, 271_828))?;
    let elapsed = start.elapsed();
    if suite.trials < 300 || suite.threshold > 1e-5 {
        return Err(format!(
            "suite ran {} trials at tolerance {:.1e}; need 50 per kind per loss at 1e-5",
            suite.trials, suite.threshold
        ));
    }
    if !suite.passed {
        return Err(suite_failure(&suite));
    }
    if let Some(msg) = over_budget(elapsed, Duration::from_secs(60)) {
        return Err(msg);
    }
    Ok(format!(
        "{} comparisons (50 per kind per loss), max rel err {:.3e} <= 1e-5, {:.2?}",
        suite.trials, suite.max_error, elapsed
    ))
}

/// C4: `param_count` reproduces `d_a1*d_a2 + r*(d_b2 + d_b1)` exactly; the
/// 4096x4096 slice-16 rank-8 plan costs 18464 parameters against 65536 for
/// rank-8 low-rank (ratio ~3.55); and across every square width d >= 2048
/// under the default rules the ratio stays within [3, 4), approaching but
/// never reaching 4.
fn parameter_formula() -> Result<String, String> {
    let rank = 8;
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = 0.0f64;
    // Only even widths are plannable: the outer factor is hardwired to
    // d_a1 = 2, which must divide d_in.
    for d in (2048..=8192usize).step_by(2) {
        let spec = lib(LayerSpec::new(d, d))?;
        let plan = lib(plan_kron_lora(&spec, rank, SlicePolicy::default()))?;
        let closed_form = plan.d_a1 * plan.d_a2 + plan.rank * (plan.d_b2 + plan.d_b1);
        let counted = param_count(&plan);
        if counted != closed_form {
            return Err(format!(
                "{d}x{d}: param_count {counted} != closed form {closed_form}"
            ));
        }
        let lora = param_count(&lib(plan_lora(&spec, rank))?);
        let ratio = lora as f64 / counted as f64;
        if !(3.0..4.0).contains(&ratio) {
            return Err(format!("{d}x{d}: ratio {ratio:.4} outside [3, 4)"));
        }
        min_ratio = min_ratio.min(ratio);
        max_ratio = max_ratio.max(ratio);
    }
    if LayerSpec::new(2049, 2049).and_then(|s| plan_kron_lora(&s, rank, SlicePolicy::default())).is_ok() {
        return Err("odd widths should be unplannable for the pair factor".into());
    }

    // The pinned configuration cuts 4096 rows into 16 slices (d_a2 = 16);
    // the default policy picks the same plan at this width.
    let spec = lib(LayerSpec::new(4096, 4096))?;
    let pinned_plan = lib(plan_kron_lora(&spec, rank, SlicePolicy::FixedA2(16)))?;
    if pinned_plan != lib(plan_kron_lora(&spec, rank, SlicePolicy::default()))? {
        return Err("default policy no longer lands on the 16-slice plan at 4096".into());
    }
    let kron = param_count(&pinned_plan);
    let lora = param_count(&lib(plan_lora(&spec, rank))?);
    if (kron, lora) != (18_464, 65_536) {
        return Err(format!(
            "4096x4096 slice-16 rank-8: {kron} vs {lora} params, want 18464 vs 65536"
        ));
    }
    let pinned = lora as f64 / kron as f64;
    if (pinned - 3.55).abs() > 0.01 {
        return Err(format!("pinned ratio {pinned:.4}, want ~3.55"));
    }
    Ok(format!(
        "4096x4096 slice-16 rank-8 = 18464 params ({pinned:.2}x fewer); sweep d = 2048..=8192 ratio spans [{min_ratio:.3}, {max_ratio:.3}], inside [3, 4)"
    ))
}

/// C5: for a 4096-wide plan with d_a1 = 2 and rank 8, the instrumented
/// forward reports the chain intermediates Y1: 8x2, Y2: 8xd_a2,
/// Y3: d_b2xd_a2 exactly.
fn chain_shapes() -> Result<String, String> {
    let mut rng = Rng::new(55);
    let spec = lib(LayerSpec::new(4096, 4096))?;
    let plan = lib(plan_kron_lora(&spec, 8, SlicePolicy::default()))?;
    if plan.d_a1 != 2 || plan.rank != 8 {
        return Err(format!(
            "plan picked d_a1 {} rank {}, need 2 and 8",
            plan.d_a1, plan.rank
        ));
    }
    let layer = FrozenLinear::random(plan.d_in, plan.d_out, false, &mut rng);
    let mut adapter = lib(init_adapter(&plan, &mut rng))?;
    adapter.randomize(&mut rng);
    let x = DenseMatrix::random_normal(plan.d_in, 3, 1.0, &mut rng);
    let (_, stages) = lib(adapter.forward_instrumented(&layer, &x))?;
    let want = vec![
        ChainStage { name: "Y1", rows: 8, cols: 2 },
        ChainStage { name: "Y2", rows: 8, cols: plan.d_a2 },
        ChainStage { name: "Y3", rows: plan.d_b2, cols: plan.d_a2 },
    ];
    if stages != want {
        return Err(format!("stages {stages:?}, want {want:?}"));
    }
    Ok(format!(
        "Y1 8x2, Y2 8x{}, Y3 {}x{} as planned",
        plan.d_a2, plan.d_b2, plan.d_a2
    ))
}

/// C6: a hidden in-family teacher update is recovered to <= 1e-3 of the
/// initial MSE within 500 AdamW steps (lr 3e-4, batch 8) for 10/10 seeds,
/// in under 2 minutes.
///
/// The teacher scale is 0.01 so the target sits well inside the total
/// travel the linearly decayed schedule allows (roughly
/// `0.5 * 500 * 3e-4` per entry): convergence then measures gradient and
/// optimizer correctness, not per-seed luck in the teacher draw.
fn realizable_convergence() -> Result<String, String> {
    let start = Instant::now();
    let spec = lib(LayerSpec::new(16, 16))?;
    let plan = lib(plan_kron_lora(&spec, 4, SlicePolicy::FixedA2(4)))?;
    let mut worst = 0.0f64;
    for seed in 1..=10u64 {
        let task = ToyTask::TeacherRegression(TeacherRegression {
            seed,
            plan: plan.clone(),
            teacher_scale: 0.01,
            train_examples: 800,
            val_examples: 128,
            test_examples: 128,
        });
        let teacher = match &task {
            ToyTask::TeacherRegression(t) => t,
            _ => unreachable!(),
        };
        let layer = FrozenLinear::random(16, 16, true, &mut Rng::new(1000 + seed));
        let mut model = AdapterModel::new(lib(teacher.student_adapter())?);
        let cfg = TrainConfig {
            epochs: 5,
            seed,
            dropout_active: false,
            ..TrainConfig::default()
        };
        let report = lib(train(&mut model, &layer, &task, &cfg, None))?;
        if report.steps != 500 {
            return Err(format!("seed {seed}: {} steps, expected 500", report.steps));
        }
        let fraction = report.final_test_metric / report.initial_test_metric;
        if !(fraction <= 1e-3) {
            return Err(format!(
                "seed {seed}: mse only fell to {fraction:.2e} of initial ({:.3e} -> {:.3e})",
                report.initial_test_metric, report.final_test_metric
            ));
        }
        worst = worst.max(fraction);
    }
    let elapsed = start.elapsed();
    if let Some(msg) = over_budget(elapsed, Duration::from_secs(120)) {
        return Err(msg);
    }
    Ok(format!(
        "10/10 seeds reached <= 1e-3 of initial mse in 500 steps (worst {worst:.2e}), {elapsed:.2?}"
    ))
}

/// C7: delta_t1 is exactly the difference of the two task-1 accuracies; an
/// identical-tasks control keeps delta_t1 >= -0.02; and the published
/// accuracy pair (0.7351, 0.5877) maps to -0.1474.
fn sequential_protocol() -> Result<String, String> {
    let cluster = |seed: u64| {
        ToyTask::ClusterClassification(ClusterClassification {
            seed,
            d_in: 16,
            n_classes: 4,
            spread: 3.0,
            noise: 0.5,
            train_examples: 256,
            val_examples: 96,
            test_examples: 96,
        })
    };
    let spec = lib(LayerSpec::new(16, 16))?;
    let plan = lib(plan_kron_lora(&spec, 4, SlicePolicy::FixedA2(4)))?;
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 4,
        seed: 21,
        ..TrainConfig::default()
    };
    let layer = FrozenLinear::random(16, 16, true, &mut Rng::new(5000));
    let task_for_head = cluster(21);
    let factory = |seed: u64| {
        let plan = plan.clone();
        let task = task_for_head.clone();
        move || -> kron_lora::Result<AdapterModel> {
            let mut rng = Rng::new(seed);
            let adapter = init_adapter(&plan, &mut rng)?;
            Ok(AdapterModel::for_task(adapter, &task, &mut rng))
        }
    };

    let distinct = lib(run_sequential(
        factory(900),
        &layer,
        &cluster(21),
        &cluster(22),
        &cfg,
        &cfg,
        SequentialMode::Continued,
        None,
    ))?;
    let r = &distinct.report;
    let recomputed = r.acc_t1_after_t2 - r.acc_t1_after_t1;
    if r.delta_t1.to_bits() != recomputed.to_bits() {
        return Err(format!(
            "delta_t1 {} is not bit-identical to {} - {}",
            r.delta_t1, r.acc_t1_after_t2, r.acc_t1_after_t1
        ));
    }

    let control = lib(run_sequential(
        factory(900),
        &layer,
        &cluster(21),
        &cluster(21),
        &cfg,
        &cfg,
        SequentialMode::Continued,
        None,
    ))?;
    if control.report.delta_t1 < -0.02 {
        return Err(format!(
            "identical-tasks control delta {:.4} < -0.02",
            control.report.delta_t1
        ));
    }

    let arithmetic = SequentialRunReport::from_accuracies(0.7351, 0.9014, 0.5877);
    if (arithmetic.delta_t1 - (-0.1474)).abs() > 1e-12 {
        return Err(format!(
            "(0.7351, 0.5877) maps to {}, want -0.1474",
            arithmetic.delta_t1
        ));
    }
    Ok(format!(
        "delta identity exact (run delta {:+.4}); identical-tasks control {:+.4} >= -0.02; (0.7351, 0.5877) -> {:.4}",
        r.delta_t1, control.report.delta_t1, arithmetic.delta_t1
    ))
}

fn random_small_plan(kind: AdapterKind, rng: &mut Rng) -> Result<AdapterPlan, String> {
    let d_in = 2 * rng.next_range(1, 12);
    let d_out = rng.next_range(1, 24);
    let rank = rng.next_range(1, 6);
    let spec = lib(LayerSpec::new(d_in, d_out))?;
    Ok(match kind {
        AdapterKind::KronLora => lib(plan_kron_lora(&spec, rank, SlicePolicy::default()))?,
        AdapterKind::KronA => plan_krona(&spec),
        AdapterKind::Lora => lib(plan_lora(&spec, rank))?,
    })
}

/// C8: save -> load -> save is bit-exact for 100 random adapters of each
/// kind at the closed-form file size, and the hybrid's files stay >= 2.5x
/// smaller than rank-8 low-rank files for every square width >= 768.
fn checkpoint_roundtrip() -> Result<String, String> {
    let mut rng = Rng::new(88);
    let mut cases = 0usize;
    for kind in [AdapterKind::KronLora, AdapterKind::KronA, AdapterKind::Lora] {
        for _ in 0..100 {
            let plan = random_small_plan(kind, &mut rng)?;
            let mut adapter = lib(init_adapter(&plan, &mut rng))?;
            adapter.randomize(&mut rng);
            let bytes = lib(to_bytes(&adapter))?;
            if bytes.len() as u64 != file_size_for_plan(&plan) {
                return Err(format!(
                    "{}: {} bytes on disk, closed form says {}",
                    kind.as_str(),
                    bytes.len(),
                    file_size_for_plan(&plan)
                ));
            }
            let loaded = lib(from_bytes(&bytes))?;
            if loaded.plan() != adapter.plan() {
                return Err(format!("{}: plan changed across round-trip", kind.as_str()));
            }
            if lib(to_bytes(&loaded))? != bytes {
                return Err(format!("{}: round-trip is not bit-exact", kind.as_str()));
            }
            cases += 1;
        }
    }

    let mut worst = f64::INFINITY;
    let mut worst_d = 0usize;
    for d in (768..=4096usize).step_by(2) {
        let spec = lib(LayerSpec::new(d, d))?;
        let hybrid = file_size_for_plan(&lib(plan_kron_lora(&spec, 8, SlicePolicy::default()))?);
        let lora = file_size_for_plan(&lib(plan_lora(&spec, 8))?);
        let ratio = lora as f64 / hybrid as f64;
        if ratio < worst {
            worst = ratio;
            worst_d = d;
        }
    }
    if worst < 2.5 {
        return Err(format!("d = {worst_d}: file-size ratio {worst:.3} < 2.5"));
    }
    Ok(format!(
        "{cases} adapters round-trip bit-exact at the closed-form size; rank-8 low-rank files >= {worst:.2}x larger across square widths 768..=4096 (tightest at d = {worst_d})"
    ))
}

/// C9: verify, train and sequential produce byte-identical reports across
/// two runs with the same --seed once timestamp/timing fields are removed.
fn determinism() -> Result<String, String> {
    let root = workspace_root();
    let teacher_cfg = root.join("configs/train_teacher.toml");
    let sequential_cfg = root.join("configs/sequential_compare.toml");
    let cases: [(&str, Vec<&str>); 3] = [
        ("verify", vec!["verify", "--trials", "12", "--rank-trials", "12", "--grad-trials", "2"]),
        ("train", vec!["train", teacher_cfg.to_str().unwrap()]),
        ("sequential", vec!["sequential", sequential_cfg.to_str().unwrap()]),
    ];
    for (command, tail) in cases {
        let mut reports = Vec::new();
        for _ in 0..2 {
            let out = TempDir::new().map_err(|e| e.to_string())?;
            let mut args = vec!["--seed", "42", "--out", out.path().to_str().unwrap()];
            args.extend(&tail);
            let o = run(&args);
            if !o.status.success() {
                return Err(format!(
                    "{command} run failed: {}",
                    String::from_utf8_lossy(&o.stderr)
                ));
            }
            let mut report = load_json(&out.path().join(format!("{command}.json")));
            strip_volatile(&mut report);
            reports.push(serde_json::to_string(&report).map_err(|e| e.to_string())?);
        }
        if reports[0] != reports[1] {
            return Err(format!(
                "{command}: reports differ across reruns after stripping volatile fields"
            ));
        }
    }
    Ok("verify, train and sequential reports byte-identical across reruns at --seed 42".into())
}

/// C10 (informational): the benchmark completes at 4096x4096 batch 8 with
/// positive throughput for both kinds, and reports the hybrid/low-rank
/// ratio next to the fixed accelerator reference figures without any
/// pass/fail bound on the ratio itself.
fn bench_sanity() -> Result<String, String> {
    let out = TempDir::new().map_err(|e| e.to_string())?;
    let o = run(&[
        "--out", out.path().to_str().unwrap(),
        "bench",
        "--d-in", "4096",
        "--d-out", "4096",
        "--batch", "8",
        "--repeats", "3",
    ]);
    if !o.status.success() {
        return Err(format!("bench failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    let report = load_json(&out.path().join("bench.json"));
    let payload = &report["bench"];
    let reports = payload["reports"].as_array().ok_or("reports array missing")?;
    let mut seen = Vec::new();
    for r in reports {
        let kind = r["kind"].as_str().unwrap_or("?").to_string();
        for field in ["forward_throughput", "forward_backward_throughput"] {
            let v = r[field].as_f64().ok_or_else(|| format!("{kind}.{field} missing"))?;
            if !(v > 0.0) {
                return Err(format!("{kind}.{field} = {v}, expected positive"));
            }
        }
        seen.push(kind);
    }
    seen.sort();
    if seen != ["kronlora", "lora"] {
        return Err(format!("expected both kinds, got {seen:?}"));
    }
    let comparison = &payload["comparison"];
    let ratio = comparison["kronlora_over_lora_forward_backward"]
        .as_f64()
        .ok_or("throughput ratio missing")?;
    let reference = &comparison["gpu_reference"];
    if reference["kronlora_examples_per_second"] != serde_json::json!(27.04)
        || reference["lora_examples_per_second"] != serde_json::json!(29.28)
    {
        return Err(format!("accelerator reference figures wrong: {reference}"));
    }
    Ok(format!(
        "both kinds positive at 4096x4096 batch 8; hybrid/low-rank train-step throughput ratio {ratio:.3} on this CPU (reference accelerator figures: 27.04 vs 29.28 ex/s)"
    ))
}

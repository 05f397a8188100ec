//! `kronlora verify`: randomized correctness suites with a machine-readable
//! verdict.
//!
//! Three suites come from the library (dense-oracle equivalence, Kronecker
//! rank identity, gradient checks). A fourth is local to the CLI: it
//! re-derives the factored forward chain from the stored parameters and
//! compares it against the materialized update, so the binary carries its
//! own independent spot-check of the reshape convention. `--sabotage`
//! flips that local chain to a row-major reshape — a deliberately wrong
//! convention — to demonstrate the harness fails when the math is wrong.

use clap::Args;
use kron_lora::{
    gradient_check_suite, init_adapter, oracle_equivalence_suite, plan_kron_lora,
    rank_identity_suite, vec_flatten, vec_reshape, Adapter, DenseMatrix, LayerSpec, Result, Rng,
    SlicePolicy, SuiteResult, DEFAULT_GRADCHECK_TRIALS, DEFAULT_ORACLE_TRIALS,
    DEFAULT_RANK_TRIALS, ORACLE_TOLERANCE,
};
use serde::Serialize;

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    /// Dense-oracle equivalence trials.
    #[arg(long, default_value_t = DEFAULT_ORACLE_TRIALS)]
    pub trials: usize,
    /// Kronecker rank-identity trials.
    #[arg(long, default_value_t = DEFAULT_RANK_TRIALS)]
    pub rank_trials: usize,
    /// Gradient-check trials per adapter kind per loss.
    #[arg(long, default_value_t = DEFAULT_GRADCHECK_TRIALS)]
    pub grad_trials: usize,
    /// Negative control: run the CLI-local chain check with a row-major
    /// reshape. The run must then fail with a nonzero exit code.
    #[arg(long)]
    pub sabotage: bool,
}

#[derive(Debug, Serialize)]
pub struct VerifyPayload {
    pub suites: Vec<SuiteResult>,
    pub all_passed: bool,
    pub sabotage: bool,
}

const CHAIN_TRIALS: usize = 50;

/// Apply the hybrid adapter's update to `x` column by column, re-deriving
/// the chain here instead of calling the library's forward path. With
/// `row_major` the initial reshape uses the wrong convention.
fn chain_apply(adapter: &Adapter, x: &DenseMatrix, row_major: bool) -> Result<DenseMatrix> {
    let plan = adapter.plan();
    let a = adapter.param("A").expect("hybrid adapter has A");
    let b1 = adapter.param("B1").expect("hybrid adapter has B1");
    let b2 = adapter.param("B2").expect("hybrid adapter has B2");
    let a_t = a.transpose();
    let mut out = DenseMatrix::zeros(plan.d_out, x.cols());
    for col in 0..x.cols() {
        let data: Vec<f64> = (0..plan.d_in).map(|i| x.get(i, col)).collect();
        let xmat = if row_major {
            DenseMatrix::from_vec(plan.d_b1, plan.d_a1, data)?
        } else {
            let column = DenseMatrix::from_vec(plan.d_in, 1, data)?;
            vec_reshape(&column, plan.d_b1, plan.d_a1)?
        };
        let y1 = b2.matmul(&xmat)?;
        let y2 = y1.matmul(&a_t)?;
        let y3 = b1.matmul(&y2)?;
        let v = vec_flatten(&y3).scale(plan.scale());
        for i in 0..plan.d_out {
            out.set(i, col, v.get(i, 0));
        }
    }
    Ok(out)
}

/// CLI-local re-derivation of the factored chain against the materialized
/// update.
fn chain_reshape_suite(seed: u64, sabotage: bool) -> Result<SuiteResult> {
    let mut rng = Rng::new(seed);
    let mut max_error = 0.0f64;
    let mut worst = None;
    for _ in 0..CHAIN_TRIALS {
        let d_in = 2 * rng.next_range(2, 32);
        let d_out = rng.next_range(2, 64);
        let rank = rng.next_range(1, 8);
        let plan = plan_kron_lora(&LayerSpec::new(d_in, d_out)?, rank, SlicePolicy::default())?;
        let mut adapter = init_adapter(&plan, &mut rng)?;
        adapter.randomize(&mut rng);
        let x = DenseMatrix::random_normal(d_in, 3, 1.0, &mut rng);
        let want = adapter.expand_delta()?.matmul(&x)?;
        let got = chain_apply(&adapter, &x, sabotage)?;
        let rel = want.max_abs_diff(&got)? / want.max_abs().max(1.0);
        if rel > max_error {
            max_error = rel;
            worst = Some(format!(
                "plan {}x{} rank {rank}: rel err {rel:.3e}",
                d_out, d_in
            ));
        }
    }
    let passed = max_error <= ORACLE_TOLERANCE;
    Ok(SuiteResult {
        name: "chain_reshape".to_string(),
        trials: CHAIN_TRIALS,
        max_error,
        threshold: ORACLE_TOLERANCE,
        passed,
        failing_case: if passed { None } else { worst },
    })
}

pub fn run(args: &VerifyArgs, seed: u64) -> Result<VerifyPayload> {
    let suites = vec![
        oracle_equivalence_suite(args.trials, seed)?,
        rank_identity_suite(args.rank_trials, seed.wrapping_add(1))?,
        gradient_check_suite(args.grad_trials, seed.wrapping_add(2))?,
        chain_reshape_suite(seed.wrapping_add(3), args.sabotage)?,
    ];
    let all_passed = suites.iter().all(|s| s.passed);
    Ok(VerifyPayload {
        suites,
        all_passed,
        sabotage: args.sabotage,
    })
}

pub fn print_summary(payload: &VerifyPayload) {
    for s in &payload.suites {
        let status = if s.passed { "pass" } else { "FAIL" };
        println!(
            "{status}  {:<16} trials {:>4}  max err {:.3e} (threshold {:.1e})",
            s.name, s.trials, s.max_error, s.threshold
        );
        if let Some(case) = &s.failing_case {
            println!("      worst: {case}");
        }
    }
    println!(
        "verify: {}",
        if payload.all_passed { "all suites passed" } else { "FAILED" }
    );
}

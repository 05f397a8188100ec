//! `kronlora sequential`: the two-task forgetting protocol, optionally
//! over several adapter families ("arms") that share one seed, one frozen
//! layer and the same task data so their forgetting deltas are directly
//! comparable.
//!
//! The report writer independently recomputes every arm's forgetting delta
//! from the serialized accuracies and refuses to emit a report where the
//! two disagree, so the number in the JSON can never drift from the
//! definition `delta_t1 = acc_t1_after_t2 - acc_t1_after_t1`.

use crate::config::{self, SequentialFileConfig};
use clap::Args;
use kron_lora::{
    init_adapter, run_sequential, AdapterModel, AdapterPlan, Error, FrozenLinear, Result, Rng,
    SequentialRunReport, TrainReport,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Args)]
pub struct SequentialArgs {
    /// TOML run configuration with an `arms` list (see configs/).
    pub config: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct DeltaCheck {
    /// `acc_t1_after_t2 - acc_t1_after_t1`, recomputed by the report
    /// writer from the serialized accuracies.
    pub recomputed: f64,
    /// The harness's own delta; bit-identical to `recomputed`.
    pub reported: f64,
    pub exact_match: bool,
}

#[derive(Debug, Serialize)]
pub struct ArmReport {
    pub plan: AdapterPlan,
    pub report: SequentialRunReport,
    pub phase1: TrainReport,
    pub phase2: TrainReport,
    pub delta_check: DeltaCheck,
}

#[derive(Debug, Serialize)]
pub struct SequentialPayload {
    pub mode: kron_lora::SequentialMode,
    /// One entry per arm, keyed by adapter kind.
    pub arms: BTreeMap<String, ArmReport>,
}

pub fn run(
    args: &SequentialArgs,
    seed: u64,
    out_dir: &Path,
) -> Result<(SequentialPayload, SequentialFileConfig)> {
    let file: SequentialFileConfig = config::load(&args.config)?;
    file.validate()?;
    let kinds = file.arm_kinds()?;
    let cfg1 = file.train.to_train_config(seed)?;
    let cfg2 = match &file.train2 {
        Some(over) => over.apply(&cfg1)?,
        None => cfg1.clone(),
    };

    let mut arms = BTreeMap::new();
    for kind in kinds {
        let plan = file.adapter.plan_for(kind, &file.layer)?;
        let task1 = file.task1.to_task(&plan, "task1")?;
        let task2 = file.task2.to_task(&plan, "task2")?;

        // Every arm re-derives the same streams from the root seed: the
        // frozen layer and the task data are identical across arms, and
        // each arm's adapter is drawn from the same initialization stream.
        let mut root = Rng::new(seed);
        let mut layer_rng = root.split();
        let mut init_rng = root.split();
        let mut head_rng = root.split();
        let layer = FrozenLinear::random(
            file.layer.d_in,
            file.layer.d_out,
            file.layer.bias,
            &mut layer_rng,
        );
        let make_model = || -> Result<AdapterModel> {
            let adapter = init_adapter(&plan, &mut init_rng)?;
            Ok(AdapterModel::for_task(adapter, &task1, &mut head_rng))
        };

        let outcome = run_sequential(
            make_model,
            &layer,
            &task1,
            &task2,
            &cfg1,
            &cfg2,
            file.mode,
            Some((out_dir, kind.as_str())),
        )?;

        let recomputed = outcome.report.acc_t1_after_t2 - outcome.report.acc_t1_after_t1;
        let exact = recomputed.to_bits() == outcome.report.delta_t1.to_bits();
        if !exact {
            return Err(Error::State(format!(
                "delta spot-check failed for {kind}: recomputed {recomputed} vs reported {}",
                outcome.report.delta_t1
            )));
        }
        arms.insert(
            kind.to_string(),
            ArmReport {
                plan,
                delta_check: DeltaCheck {
                    recomputed,
                    reported: outcome.report.delta_t1,
                    exact_match: exact,
                },
                report: outcome.report,
                phase1: outcome.phase1,
                phase2: outcome.phase2,
            },
        );
    }
    Ok((SequentialPayload { mode: file.mode, arms }, file))
}

pub fn print_summary(payload: &SequentialPayload) {
    for (kind, arm) in &payload.arms {
        let r = &arm.report;
        println!(
            "{kind}: task1 {:.4} -> {:.4} after task2 (delta {:+.4}), task2 {:.4}",
            r.acc_t1_after_t1, r.acc_t1_after_t2, r.delta_t1, r.acc_t2_after_t2
        );
    }
}

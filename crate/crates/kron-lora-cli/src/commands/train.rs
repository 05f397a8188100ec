//! `kronlora train`: one adapter, one toy task, config-driven.
//!
//! The frozen layer, the adapter initialization and the classification
//! head all draw from streams split off the root `--seed`, so a run is
//! fully reproducible from the seed plus the config file.

use crate::config::{self, TrainFileConfig};
use clap::Args;
use kron_lora::{
    init_adapter, train, AdapterModel, AdapterPlan, FrozenLinear, Result, Rng, ToyTask,
    TrainReport,
};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration (see configs/ for examples).
    pub config: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct TrainPayload {
    pub task: String,
    pub plan: AdapterPlan,
    pub report: TrainReport,
}

pub fn run(args: &TrainArgs, seed: u64, out_dir: &Path) -> Result<(TrainPayload, TrainFileConfig)> {
    let file: TrainFileConfig = config::load(&args.config)?;
    let kind = file.adapter.required_kind()?;
    let plan = file.adapter.plan_for(kind, &file.layer)?;
    let task = file.task.to_task(&plan, "task")?;
    let cfg = file.train.to_train_config(seed)?;

    let mut root = Rng::new(seed);
    let mut layer_rng = root.split();
    let mut init_rng = root.split();
    let mut head_rng = root.split();
    let layer = FrozenLinear::random(file.layer.d_in, file.layer.d_out, file.layer.bias, &mut layer_rng);
    // Teacher regression defines the student's starting point as part of
    // the task (the hidden teacher shares its initialization stream); for
    // everything else the root seed's init stream decides.
    let adapter = match &task {
        ToyTask::TeacherRegression(t) => t.student_adapter()?,
        _ => init_adapter(&plan, &mut init_rng)?,
    };
    let mut model = AdapterModel::for_task(adapter, &task, &mut head_rng);

    let report = train(&mut model, &layer, &task, &cfg, Some((out_dir, "train")))?;
    Ok((
        TrainPayload {
            task: task.name().to_string(),
            plan,
            report,
        },
        file,
    ))
}

pub fn print_summary(payload: &TrainPayload) {
    let r = &payload.report;
    println!(
        "{} ({} on {}x{}): {} {:.6} -> {:.6} over {} steps (best epoch {})",
        payload.task,
        payload.plan.kind,
        payload.plan.d_out,
        payload.plan.d_in,
        r.metric,
        r.initial_test_metric,
        r.final_test_metric,
        r.steps,
        r.best_epoch
    );
    if let (Some(file), Some(bytes)) = (&r.checkpoint_file, r.checkpoint_bytes) {
        println!("checkpoint: {file} ({bytes} bytes)");
    }
}

//! `kronlora plan`: size one layer's adapters without training anything.
//!
//! Emits, for each family, the resolved factorization, the trainable
//! parameter count, the checkpoint footprint, and the ratio against the
//! plain low-rank baseline at the same rank.

use clap::Args;
use kron_lora::checkpoint::file_size_for_plan;
use kron_lora::{
    param_count, plan_kron_lora, plan_krona, plan_lora, workspace_floats_per_example,
    AdapterPlan, LayerSpec, Result, SlicePolicy,
};
use serde::Serialize;

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    /// Layer input width.
    #[arg(long)]
    pub d_in: usize,
    /// Layer output width.
    #[arg(long)]
    pub d_out: usize,
    /// Rank for the low-rank families.
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    /// Pin d_a2 exactly (must divide d_out). Mutually exclusive with
    /// --target-slice.
    #[arg(long, conflicts_with = "target_slice")]
    pub slice: Option<usize>,
    /// Pick the divisor of d_out whose slice height is closest to this.
    #[arg(long)]
    pub target_slice: Option<usize>,
    /// Treat the layer as a vocabulary projection (flat input factor).
    #[arg(long)]
    pub vocab: bool,
}

#[derive(Debug, Serialize)]
pub struct Factors {
    pub d_a1: usize,
    pub d_a2: usize,
    pub d_b1: usize,
    pub d_b2: usize,
}

#[derive(Debug, Serialize)]
pub struct KindPlan {
    pub kind: String,
    /// Kronecker factor dimensions; absent for the plain low-rank family.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factors: Option<Factors>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub parameters: usize,
    pub adapter_bytes: u64,
    pub checkpoint_bytes: u64,
    pub workspace_floats_per_example: usize,
    pub scale: f64,
    /// Plain low-rank parameter count divided by this family's; > 1 means
    /// smaller than the baseline.
    pub params_ratio_vs_lora: f64,
    pub checkpoint_ratio_vs_lora: f64,
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct PlanPayload {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub vocab: bool,
    pub plans: Vec<KindPlan>,
}

fn kind_plan(plan: &AdapterPlan, lora: &AdapterPlan, mut notes: Vec<String>) -> KindPlan {
    let params = param_count(plan);
    let bytes = file_size_for_plan(plan);
    if plan.trivial_factor_warning {
        notes.push(
            "trivial-factor warning: a dimension only admits the 1 x d Kronecker split, \
             so the update degenerates toward a plain low-rank form"
                .to_string(),
        );
    }
    KindPlan {
        kind: plan.kind.to_string(),
        factors: match plan.kind {
            kron_lora::AdapterKind::Lora => None,
            _ => Some(Factors {
                d_a1: plan.d_a1,
                d_a2: plan.d_a2,
                d_b1: plan.d_b1,
                d_b2: plan.d_b2,
            }),
        },
        rank: (plan.rank > 0).then_some(plan.rank),
        parameters: params,
        adapter_bytes: 8 * params as u64,
        checkpoint_bytes: bytes,
        workspace_floats_per_example: workspace_floats_per_example(plan),
        scale: plan.scale(),
        params_ratio_vs_lora: param_count(lora) as f64 / params as f64,
        checkpoint_ratio_vs_lora: file_size_for_plan(lora) as f64 / bytes as f64,
        notes,
    }
}

pub fn run(args: &PlanArgs) -> Result<PlanPayload> {
    let spec = if args.vocab {
        LayerSpec::vocab(args.d_in, args.d_out)?
    } else {
        LayerSpec::new(args.d_in, args.d_out)?
    };
    let policy = match (args.slice, args.target_slice) {
        (Some(a2), _) => SlicePolicy::FixedA2(a2),
        (None, Some(t)) => SlicePolicy::TargetSlice(t),
        (None, None) => SlicePolicy::default(),
    };

    let lora = plan_lora(&spec, args.rank)?;
    let hybrid = plan_kron_lora(&spec, args.rank, policy)?;
    let krona = plan_krona(&spec);

    let plans = vec![
        kind_plan(&hybrid, &lora, Vec::new()),
        kind_plan(
            &krona,
            &lora,
            vec![
                "accuracy-risk: pure Kronecker update; no low-rank slack to absorb what \
                 the factorization cannot express, so expect a larger accuracy drop than \
                 the hybrid at a similar parameter budget"
                    .to_string(),
            ],
        ),
        kind_plan(&lora, &lora, Vec::new()),
    ];
    Ok(PlanPayload {
        d_in: args.d_in,
        d_out: args.d_out,
        rank: args.rank,
        vocab: args.vocab,
        plans,
    })
}

pub fn print_summary(payload: &PlanPayload) {
    println!(
        "layer {}x{} (rank {}{})",
        payload.d_out,
        payload.d_in,
        payload.rank,
        if payload.vocab { ", vocab" } else { "" }
    );
    for p in &payload.plans {
        let factors = match &p.factors {
            Some(f) => format!("A {}x{}, B {}x{}", f.d_a2, f.d_a1, f.d_b2, f.d_b1),
            None => "dense low-rank pair".to_string(),
        };
        println!(
            "{:<9} {:>9} params  {:>10} bytes  x{:.2} vs lora  [{}]",
            p.kind, p.parameters, p.checkpoint_bytes, p.params_ratio_vs_lora, factors
        );
        for n in &p.notes {
            println!("          note: {n}");
        }
    }
}

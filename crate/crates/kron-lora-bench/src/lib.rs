//! Shared setup for the criterion benches: a ready-to-run adapter bound to
//! a frozen layer with a deterministic input batch and an MSE loss.

use kron_lora::{
    init_adapter, plan_kron_lora, plan_krona, plan_lora, Adapter, AdapterKind, DenseMatrix,
    FrozenLinear, LayerSpec, LossSpec, Result, Rng, SlicePolicy,
};

/// Everything one timed iteration needs.
pub struct BenchCase {
    pub adapter: Adapter,
    pub layer: FrozenLinear,
    pub x: DenseMatrix,
    pub loss: LossSpec,
    /// Dropout stream for training-mode forwards.
    pub rng: Rng,
}

/// Build a deterministic case: default planning rules for the hybrid,
/// square-root factoring for pure Kronecker, the given rank for low-rank.
pub fn case(
    kind: AdapterKind,
    d_in: usize,
    d_out: usize,
    rank: usize,
    batch: usize,
    seed: u64,
) -> Result<BenchCase> {
    let mut rng = Rng::new(seed);
    let spec = LayerSpec::new(d_in, d_out)?;
    let plan = match kind {
        AdapterKind::KronLora => plan_kron_lora(&spec, rank, SlicePolicy::default())?,
        AdapterKind::KronA => plan_krona(&spec),
        AdapterKind::Lora => plan_lora(&spec, rank)?,
    };
    let layer = FrozenLinear::random(d_in, d_out, true, &mut rng);
    let mut adapter = init_adapter(&plan, &mut rng)?;
    adapter.randomize(&mut rng);
    let x = DenseMatrix::random_normal(d_in, batch, 1.0, &mut rng);
    let targets = DenseMatrix::random_normal(d_out, batch, 1.0, &mut rng);
    Ok(BenchCase {
        adapter,
        layer,
        x,
        loss: LossSpec::mse(targets),
        rng,
    })
}

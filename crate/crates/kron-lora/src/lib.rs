//! Parameter-efficient adapters for frozen linear layers.
//!
//! Three families share one interface: plain low-rank (`lora`), pure
//! Kronecker (`krona`), and the hybrid (`kronlora`) whose update is a
//! Kronecker product with a low-rank right factor:
//!
//! ```text
//! delta W = A (x) (B1 * B2)
//! ```
//!
//! The host layer stays frozen; only the factors train. The hybrid branch
//! is evaluated without ever materializing `delta W`, via the column-major
//! identity `(A (x) B) vec(X) = vec(B X A^T)` — see [`linalg`] for the
//! convention and [`adapters`] for the factored chain.
//!
//! ```
//! use kron_lora::{
//!     init_adapter, param_count, plan_kron_lora, DenseMatrix, FrozenLinear, LayerSpec,
//!     Rng, SlicePolicy,
//! };
//!
//! let mut rng = Rng::new(7);
//! let spec = LayerSpec::new(768, 768)?;
//! let plan = plan_kron_lora(&spec, 8, SlicePolicy::default())?;
//! assert_eq!(param_count(&plan), 4616);
//!
//! let layer = FrozenLinear::random(768, 768, true, &mut rng);
//! let adapter = init_adapter(&plan, &mut rng)?;
//! let x = DenseMatrix::random_normal(768, 4, 1.0, &mut rng);
//!
//! // One factor initializes to zero, so a fresh adapter is transparent.
//! let base = layer.forward(&x)?;
//! let adapted = adapter.forward_eval(&layer, &x)?;
//! assert!(adapted.bit_eq(&base));
//! # Ok::<(), kron_lora::Error>(())
//! ```
//!
//! Training ([`train`]), hand-derived gradients ([`autograd`]), binary
//! checkpoints ([`checkpoint`]) and randomized verification suites
//! ([`verify`]) round out the crate. Everything is deterministic given the
//! seeds; the [`rng::Rng`] streams are part of the public contract.

pub mod adapters;
pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod linalg;
pub mod plan;
pub mod rng;
pub mod train;
pub mod verify;

pub use adapters::{init_adapter, Adapter, ChainStage, FrozenLinear};
pub use autograd::{
    backward, backward_with_input_grad, eval_loss, finite_difference_grad, gradient_rel_error,
    loss_and_grad, GradientSet, LossKind, LossSpec, DEFAULT_FD_STEP,
};
pub use error::{Error, Result};
pub use linalg::{numerical_rank, vec_flatten, vec_reshape, DenseMatrix, DEFAULT_RANK_TOL};
pub use plan::{
    param_count, plan_kron_lora, plan_krona, plan_lora, workspace_floats_per_example,
    AdapterKind, AdapterPlan, LayerSpec, SlicePolicy, DEFAULT_ALPHA, DEFAULT_DROPOUT,
    DEFAULT_TARGET_SLICE, MAX_SLICE_HEIGHT,
};
pub use rng::Rng;
pub use train::{
    adamw_step, evaluate, linear_schedule, run_sequential, train, AdapterModel,
    ClusterClassification, EpochStats, LinearHead, OptimizerState, SequentialMode,
    SequentialOutcome, SequentialRunReport, Split, TaskData, TeacherRegression, ToyTask,
    TrainConfig, TrainReport, DEFAULT_BATCH_SIZE, DEFAULT_LR, DEFAULT_WEIGHT_DECAY,
};
pub use verify::{
    gradient_check_suite, oracle_equivalence_suite, rank_identity_suite, run_all, SuiteResult,
    DEFAULT_GRADCHECK_TRIALS, DEFAULT_ORACLE_TRIALS, DEFAULT_RANK_TRIALS, GRADCHECK_TOLERANCE,
    ORACLE_TOLERANCE,
};

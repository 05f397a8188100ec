//! Frozen linear layers and the three adapter families that ride on them.
//!
//! Every adapter leaves the host layer untouched and adds a scaled update
//! branch to its output:
//!
//! ```text
//! out = W x + bias + scale * branch(x~)        x~ = dropout(x)
//! ```
//!
//! * `Lora`:     branch = up * (down * x~),            scale = alpha / r
//! * `KronA`:    delta W = A (x) B,                    scale = alpha
//! * `KronLora`: delta W = A (x) (B1 * B2),            scale = alpha / r
//!
//! The Kronecker branches are never materialized as `d_out x d_in`
//! matrices. Because the `vec` convention is column-major (see
//! [`crate::linalg`]), `(A (x) B) x~` for one example equals
//! `vec(B * unvec(x~) * A^T)`, and with `B = B1 * B2` the whole branch is
//! four skinny matrix products per example:
//!
//! ```text
//! X  = unvec(x~)      d_b1 x d_a1
//! Y1 = B2 * X         r    x d_a1
//! Y2 = Y1 * A^T       r    x d_a2
//! Y3 = B1 * Y2        d_b2 x d_a2
//! branch column = vec(Y3)
//! ```
//!
//! [`Adapter::expand_delta`] materializes the dense update anyway; the
//! verification suites use it as an independent oracle for the factored
//! path.
//!
//! Dropout is applied to the branch input only (the frozen path always
//! sees the raw `x`), with inverted scaling so eval needs no correction.
//! A training-mode forward caches its mask on the adapter; the matching
//! backward consumes it. Exactly one backward per training forward.

use crate::error::{Error, Result};
use crate::linalg::{flatten_into_column, unvec_column, DenseMatrix};
use crate::plan::{AdapterKind, AdapterPlan};
use crate::rng::Rng;

/// A linear layer whose weights never change. No gradient ever reaches it.
#[derive(Debug, Clone)]
pub struct FrozenLinear {
    weight: DenseMatrix,
    bias: Option<DenseMatrix>,
}

impl FrozenLinear {
    /// `weight` is `d_out x d_in`; `bias`, when present, is `d_out x 1`.
    pub fn new(weight: DenseMatrix, bias: Option<DenseMatrix>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.shape() != (weight.rows(), 1) {
                return Err(Error::shape("frozen_linear_bias", weight.shape(), b.shape()));
            }
        }
        Ok(FrozenLinear { weight, bias })
    }

    /// Random layer for tests and toy tasks: `W ~ N(0, 1/d_in)` entries.
    pub fn random(d_in: usize, d_out: usize, with_bias: bool, rng: &mut Rng) -> Self {
        let weight = DenseMatrix::random_normal(d_out, d_in, (d_in as f64).powf(-0.5), rng);
        let bias = with_bias.then(|| DenseMatrix::random_normal(d_out, 1, 0.01, rng));
        FrozenLinear { weight, bias }
    }

    /// `W x + bias`, bias broadcast over batch columns.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.d_in() {
            return Err(Error::shape("frozen_forward", self.weight.shape(), x.shape()));
        }
        let mut out = self.weight.matmul(x)?;
        if let Some(b) = &self.bias {
            for i in 0..out.rows() {
                let bv = b.get(i, 0);
                for j in 0..out.cols() {
                    out.set(i, j, out.get(i, j) + bv);
                }
            }
        }
        Ok(out)
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.weight
    }

    pub fn bias(&self) -> Option<&DenseMatrix> {
        self.bias.as_ref()
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Trainable factors, one variant per family.
#[derive(Debug, Clone)]
pub(crate) enum AdapterParams {
    /// `a`: d_a2 x d_a1, `b1`: d_b2 x r, `b2`: r x d_b1.
    KronLora {
        a: DenseMatrix,
        b1: DenseMatrix,
        b2: DenseMatrix,
    },
    /// `down`: r x d_in, `up`: d_out x r.
    Lora {
        down: DenseMatrix,
        up: DenseMatrix,
    },
    /// `a`: d_a2 x d_a1, `b`: d_b2 x d_b1.
    KronA { a: DenseMatrix, b: DenseMatrix },
}

/// Shape of one intermediate of the factored chain, recorded by
/// [`Adapter::forward_instrumented`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainStage {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
}

/// One adapter instance bound to a plan.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub(crate) plan: AdapterPlan,
    pub(crate) params: AdapterParams,
    training: bool,
    cached_mask: Option<DenseMatrix>,
}

/// Build a freshly initialized adapter.
///
/// Exactly one factor starts at zero so the initial update is exactly zero
/// and the adapted layer behaves like the frozen one:
///
/// * hybrid: `A ~ N(0, 1/(d_a1 d_a2))`, `B1 = 0`, `B2 ~ N(0, 1/d_b1)`
/// * low-rank: `down ~ N(0, 1/d_in)`, `up = 0`
/// * pure Kronecker: `A ~ N(0, 1/(d_a1 d_a2))`, `B = 0`
///
/// Draw order is part of the contract (`A` first, then the non-zero `B`
/// factor, row-major within each matrix): toy teacher tasks replay it to
/// construct reachable targets.
pub fn init_adapter(plan: &AdapterPlan, rng: &mut Rng) -> Result<Adapter> {
    plan.validate()?;
    let params = match plan.kind {
        AdapterKind::KronLora => {
            let a_std = ((plan.d_a1 * plan.d_a2) as f64).powf(-0.5);
            let a = DenseMatrix::random_normal(plan.d_a2, plan.d_a1, a_std, rng);
            let b1 = DenseMatrix::zeros(plan.d_b2, plan.rank);
            let b2 = DenseMatrix::random_normal(
                plan.rank,
                plan.d_b1,
                (plan.d_b1 as f64).powf(-0.5),
                rng,
            );
            AdapterParams::KronLora { a, b1, b2 }
        }
        AdapterKind::Lora => {
            let down = DenseMatrix::random_normal(
                plan.rank,
                plan.d_in,
                (plan.d_in as f64).powf(-0.5),
                rng,
            );
            let up = DenseMatrix::zeros(plan.d_out, plan.rank);
            AdapterParams::Lora { down, up }
        }
        AdapterKind::KronA => {
            let a_std = ((plan.d_a1 * plan.d_a2) as f64).powf(-0.5);
            let a = DenseMatrix::random_normal(plan.d_a2, plan.d_a1, a_std, rng);
            let b = DenseMatrix::zeros(plan.d_b2, plan.d_b1);
            AdapterParams::KronA { a, b }
        }
    };
    Ok(Adapter {
        plan: plan.clone(),
        params,
        training: false,
        cached_mask: None,
    })
}

impl Adapter {
    /// Assemble an adapter from an already-validated plan and factors;
    /// checkpoint loading is the only caller.
    pub(crate) fn from_parts(plan: AdapterPlan, params: AdapterParams) -> Adapter {
        Adapter {
            plan,
            params,
            training: false,
            cached_mask: None,
        }
    }

    pub fn kind(&self) -> AdapterKind {
        self.plan.kind
    }

    pub fn plan(&self) -> &AdapterPlan {
        &self.plan
    }

    /// Branch output multiplier (`alpha / r`, or `alpha` for pure
    /// Kronecker).
    pub fn scale(&self) -> f64 {
        self.plan.scale()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Toggle training mode. Any pending dropout mask is discarded.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
        self.cached_mask = None;
    }

    pub(crate) fn take_mask(&mut self) -> Option<DenseMatrix> {
        self.cached_mask.take()
    }

    /// Fill every factor (including the zero-initialized one) with random
    /// values. Verification suites use this: a freshly initialized adapter
    /// has a zero update, which would make oracle comparisons vacuous.
    pub fn randomize(&mut self, rng: &mut Rng) {
        match &mut self.params {
            AdapterParams::KronLora { a, b1, b2 } => {
                let a_std = ((self.plan.d_a1 * self.plan.d_a2) as f64).powf(-0.5);
                a.fill_normal(a_std, rng);
                b1.fill_normal((self.plan.rank as f64).powf(-0.5), rng);
                b2.fill_normal((self.plan.d_b1 as f64).powf(-0.5), rng);
            }
            AdapterParams::Lora { down, up } => {
                down.fill_normal((self.plan.d_in as f64).powf(-0.5), rng);
                up.fill_normal((self.plan.rank as f64).powf(-0.5), rng);
            }
            AdapterParams::KronA { a, b } => {
                let a_std = ((self.plan.d_a1 * self.plan.d_a2) as f64).powf(-0.5);
                a.fill_normal(a_std, rng);
                b.fill_normal((self.plan.d_b1 as f64).powf(-0.5), rng);
            }
        }
    }

    /// Trainable factors in their canonical order. The names and the order
    /// are stable: gradient sets, optimizer state and checkpoints all key
    /// off them.
    pub fn trainable_parameters(&self) -> Vec<(&'static str, &DenseMatrix)> {
        match &self.params {
            AdapterParams::KronLora { a, b1, b2 } => {
                vec![("A", a), ("B1", b1), ("B2", b2)]
            }
            AdapterParams::KronA { a, b } => vec![("A", a), ("B", b)],
            AdapterParams::Lora { down, up } => vec![("down", down), ("up", up)],
        }
    }

    pub fn trainable_parameters_mut(&mut self) -> Vec<(&'static str, &mut DenseMatrix)> {
        match &mut self.params {
            AdapterParams::KronLora { a, b1, b2 } => {
                vec![("A", a), ("B1", b1), ("B2", b2)]
            }
            AdapterParams::KronA { a, b } => vec![("A", a), ("B", b)],
            AdapterParams::Lora { down, up } => vec![("down", down), ("up", up)],
        }
    }

    pub fn param(&self, name: &str) -> Option<&DenseMatrix> {
        self.trainable_parameters()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        self.trainable_parameters_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
    }

    /// Total number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.trainable_parameters()
            .iter()
            .map(|(_, m)| m.rows() * m.cols())
            .sum()
    }

    /// Materialize the dense update `scale * delta W` (`d_out x d_in`).
    ///
    /// This is the slow, obviously-correct path. The factored forward must
    /// agree with `expand_delta(..) * x` to oracle tolerance.
    pub fn expand_delta(&self) -> Result<DenseMatrix> {
        let delta = match &self.params {
            AdapterParams::KronLora { a, b1, b2 } => a.kron(&b1.matmul(b2)?),
            AdapterParams::KronA { a, b } => a.kron(b),
            AdapterParams::Lora { down, up } => up.matmul(down)?,
        };
        Ok(delta.scale(self.scale()))
    }

    /// Training/eval forward, honoring the training flag.
    ///
    /// In training mode a fresh dropout mask is drawn from `rng`, applied
    /// to the branch input with inverted scaling, and cached for the
    /// matching backward. In eval mode `rng` is untouched and this is
    /// identical to [`Adapter::forward_eval`].
    pub fn forward(
        &mut self,
        layer: &FrozenLinear,
        x: &DenseMatrix,
        rng: &mut Rng,
    ) -> Result<DenseMatrix> {
        self.check_layer(layer, x)?;
        let base = layer.forward(x)?;
        let branch = if self.training {
            let mask = dropout_mask(x.rows(), x.cols(), self.plan.dropout_p, rng);
            let x_dropped = x.hadamard(&mask)?;
            self.cached_mask = Some(mask);
            self.branch(&x_dropped)?
        } else {
            self.branch(x)?
        };
        let mut out = base;
        out.add_scaled(&branch, self.scale())?;
        Ok(out)
    }

    /// Deterministic forward with dropout disabled; read-only, so callers
    /// may share one adapter across threads for evaluation.
    pub fn forward_eval(&self, layer: &FrozenLinear, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_layer(layer, x)?;
        let mut out = layer.forward(x)?;
        let branch = self.branch(x)?;
        out.add_scaled(&branch, self.scale())?;
        Ok(out)
    }

    /// Eval forward that also reports the shapes of the intermediates the
    /// factored chain actually built.
    pub fn forward_instrumented(
        &self,
        layer: &FrozenLinear,
        x: &DenseMatrix,
    ) -> Result<(DenseMatrix, Vec<ChainStage>)> {
        self.check_layer(layer, x)?;
        let mut out = layer.forward(x)?;
        let (branch, stages) = self.branch_impl(x, true)?;
        out.add_scaled(&branch, self.scale())?;
        Ok((out, stages))
    }

    fn check_layer(&self, layer: &FrozenLinear, x: &DenseMatrix) -> Result<()> {
        if layer.d_in() != self.plan.d_in || layer.d_out() != self.plan.d_out {
            return Err(Error::Config(format!(
                "adapter planned for {}x{} but layer is {}x{}",
                self.plan.d_out,
                self.plan.d_in,
                layer.d_out(),
                layer.d_in()
            )));
        }
        if x.rows() != self.plan.d_in {
            return Err(Error::shape(
                "adapter_forward",
                (self.plan.d_in, 1),
                x.shape(),
            ));
        }
        Ok(())
    }

    /// Unscaled branch output (`d_out x batch`).
    pub(crate) fn branch(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.branch_impl(x, false)?.0)
    }

    fn branch_impl(
        &self,
        x: &DenseMatrix,
        record: bool,
    ) -> Result<(DenseMatrix, Vec<ChainStage>)> {
        let mut stages = Vec::new();
        let batch = x.cols();
        let out = match &self.params {
            AdapterParams::KronLora { a, b1, b2 } => {
                let a_t = a.transpose();
                let mut out = DenseMatrix::zeros(self.plan.d_out, batch);
                for col in 0..batch {
                    let xm = unvec_column(x, col, self.plan.d_b1, self.plan.d_a1);
                    let y1 = b2.matmul(&xm)?;
                    let y2 = y1.matmul(&a_t)?;
                    let y3 = b1.matmul(&y2)?;
                    if record && col == 0 {
                        stages.push(stage("Y1", &y1));
                        stages.push(stage("Y2", &y2));
                        stages.push(stage("Y3", &y3));
                    }
                    flatten_into_column(&y3, &mut out, col);
                }
                out
            }
            AdapterParams::KronA { a, b } => {
                let a_t = a.transpose();
                let mut out = DenseMatrix::zeros(self.plan.d_out, batch);
                for col in 0..batch {
                    let xm = unvec_column(x, col, self.plan.d_b1, self.plan.d_a1);
                    let y1 = b.matmul(&xm)?;
                    let y2 = y1.matmul(&a_t)?;
                    if record && col == 0 {
                        stages.push(stage("Y1", &y1));
                        stages.push(stage("Y2", &y2));
                    }
                    flatten_into_column(&y2, &mut out, col);
                }
                out
            }
            AdapterParams::Lora { down, up } => {
                let hidden = down.matmul(x)?;
                if record {
                    stages.push(stage("H", &hidden));
                }
                up.matmul(&hidden)?
            }
        };
        Ok((out, stages))
    }
}

fn stage(name: &'static str, m: &DenseMatrix) -> ChainStage {
    ChainStage {
        name,
        rows: m.rows(),
        cols: m.cols(),
    }
}

/// Inverted-scaling dropout mask: kept entries carry `1 / (1 - p)`, dropped
/// entries are zero. `p = 0` yields an all-ones mask.
fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> DenseMatrix {
    let keep_scale = 1.0 / (1.0 - p);
    let mut mask = DenseMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            if rng.next_f64() >= p {
                mask.set(i, j, keep_scale);
            }
        }
    }
    mask
}

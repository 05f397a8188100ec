//! Hand-derived gradients for the adapter families, plus the two losses
//! and a central-finite-difference checker.
//!
//! There is no tape. Each family's backward mirrors its forward chain.
//! For the hybrid adapter, per batch column (upstream column `u`,
//! `s = alpha / r`):
//!
//! ```text
//! G3 = unvec(s * u)          d_b2 x d_a2     gradient at Y3
//! dB1 += G3 * Y2^T
//! G2  = B1^T * G3            r x d_a2        gradient at Y2
//! dA  += G2^T * Y1
//! G1  = G2 * A               r x d_a1        gradient at Y1
//! dB2 += G1 * X^T
//! dX  = B2^T * G1            d_b1 x d_a1
//! ```
//!
//! The pure Kronecker case drops the `B1`/`B2` split; the low-rank case is
//! the usual pair of outer-product accumulations. Batch accumulation is a
//! plain sum: whatever `1/batch` normalization applies lives in the loss.
//!
//! The input gradient is `W^T u` from the frozen path plus the branch
//! chain pushed through the dropout mask.

use crate::adapters::{Adapter, AdapterParams, FrozenLinear};
use crate::error::{Error, Result};
use crate::linalg::{flatten_into_column, unvec_column, DenseMatrix};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Perturbation used by gradient checks.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Named gradients, in the adapter's canonical parameter order.
#[derive(Debug, Clone)]
pub struct GradientSet {
    entries: Vec<(String, DenseMatrix)>,
    /// Loss value when produced by [`loss_and_grad`]; zero for a raw
    /// [`backward`] call, which never sees the loss.
    pub loss_value: f64,
}

impl GradientSet {
    pub fn new() -> Self {
        GradientSet {
            entries: Vec::new(),
            loss_value: 0.0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: DenseMatrix) {
        debug_assert!(grad.data().iter().all(|v| v.is_finite()));
        self.entries.push((name.into(), grad));
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Absorb another set's entries (e.g. classifier-head gradients).
    pub fn merge(&mut self, other: GradientSet) {
        self.entries.extend(other.entries);
    }
}

impl Default for GradientSet {
    fn default() -> Self {
        Self::new()
    }
}

/// The two supported losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over all output entries of the squared error.
    Mse,
    /// Columns are examples; targets are per-column distributions (usually
    /// one-hot). Mean over columns of the cross-entropy after softmax.
    SoftmaxCrossEntropy,
}

/// A loss plus its targets. Targets must be shape-conformable with the
/// model output.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub kind: LossKind,
    pub targets: DenseMatrix,
}

impl LossSpec {
    pub fn mse(targets: DenseMatrix) -> Self {
        LossSpec {
            kind: LossKind::Mse,
            targets,
        }
    }

    pub fn softmax_cross_entropy(targets: DenseMatrix) -> Self {
        LossSpec {
            kind: LossKind::SoftmaxCrossEntropy,
            targets,
        }
    }

    pub fn value(&self, output: &DenseMatrix) -> Result<f64> {
        Ok(self.value_and_grad_impl(output, false)?.0)
    }

    /// Loss value and `dL/d(output)`.
    pub fn value_and_grad(&self, output: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
        let (v, g) = self.value_and_grad_impl(output, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn value_and_grad_impl(
        &self,
        output: &DenseMatrix,
        want_grad: bool,
    ) -> Result<(f64, Option<DenseMatrix>)> {
        if output.shape() != self.targets.shape() {
            return Err(Error::shape("loss", output.shape(), self.targets.shape()));
        }
        match self.kind {
            LossKind::Mse => {
                let n = (output.rows() * output.cols()) as f64;
                let mut sum = 0.0;
                for (&o, &t) in output.data().iter().zip(self.targets.data()) {
                    let d = o - t;
                    sum += d * d;
                }
                let value = sum / n;
                let grad = want_grad.then(|| {
                    let mut g = output.clone();
                    for (gv, &t) in g.data_mut().iter_mut().zip(self.targets.data()) {
                        *gv = 2.0 * (*gv - t) / n;
                    }
                    g
                });
                Ok((value, grad))
            }
            LossKind::SoftmaxCrossEntropy => {
                let (classes, batch) = output.shape();
                let batch_f = batch as f64;
                let mut total = 0.0;
                let mut grad = want_grad.then(|| DenseMatrix::zeros(classes, batch));
                for col in 0..batch {
                    // Stabilized log-sum-exp for this column.
                    let mut max_logit = f64::NEG_INFINITY;
                    for i in 0..classes {
                        max_logit = max_logit.max(output.get(i, col));
                    }
                    let mut sum_exp = 0.0;
                    for i in 0..classes {
                        sum_exp += (output.get(i, col) - max_logit).exp();
                    }
                    let lse = max_logit + sum_exp.ln();
                    let mut col_loss = 0.0;
                    for i in 0..classes {
                        let t = self.targets.get(i, col);
                        col_loss += t * (lse - output.get(i, col));
                        if let Some(g) = grad.as_mut() {
                            let p = (output.get(i, col) - lse).exp();
                            g.set(i, col, (p - t) / batch_f);
                        }
                    }
                    total += col_loss;
                }
                Ok((total / batch_f, grad))
            }
        }
    }
}

/// Evaluate the loss of the adapted layer on `x` with dropout disabled.
pub fn eval_loss(
    adapter: &Adapter,
    layer: &FrozenLinear,
    x: &DenseMatrix,
    loss: &LossSpec,
) -> Result<f64> {
    let out = adapter.forward_eval(layer, x)?;
    loss.value(&out)
}

/// Parameter gradients for `dL/d(output) = upstream`.
///
/// In training mode the dropout mask cached by the matching forward is
/// consumed; calling backward twice, or without a forward, is a state
/// error. The returned set contains exactly the adapter's trainable
/// parameter names, in order.
pub fn backward(
    adapter: &mut Adapter,
    layer: &FrozenLinear,
    x: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<GradientSet> {
    Ok(backward_with_input_grad(adapter, layer, x, upstream)?.0)
}

/// [`backward`] plus `dL/dx`, for callers with trainable stages upstream
/// of the adapted layer.
pub fn backward_with_input_grad(
    adapter: &mut Adapter,
    layer: &FrozenLinear,
    x: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<(GradientSet, DenseMatrix)> {
    let plan = adapter.plan().clone();
    if x.rows() != plan.d_in || upstream.rows() != plan.d_out || x.cols() != upstream.cols() {
        return Err(Error::shape("backward", upstream.shape(), x.shape()));
    }
    let mask = if adapter.is_training() {
        Some(adapter.take_mask().ok_or_else(|| {
            Error::State(
                "backward in training mode requires the dropout mask cached by the \
                 matching forward (one backward per training forward)"
                    .into(),
            )
        })?)
    } else {
        None
    };
    // Recompute the branch input exactly as the forward saw it.
    let x_branch = match &mask {
        Some(m) => x.hadamard(m)?,
        None => x.clone(),
    };
    let scale = adapter.scale();
    let batch = x.cols();

    let mut grads = GradientSet::new();
    // Gradient of the branch input, before the dropout chain rule.
    let mut gx_branch = DenseMatrix::zeros(plan.d_in, batch);

    match &adapter.params {
        AdapterParams::KronLora { a, b1, b2 } => {
            let a_t = a.transpose();
            let b1_t = b1.transpose();
            let b2_t = b2.transpose();
            let mut ga = DenseMatrix::zeros(plan.d_a2, plan.d_a1);
            let mut gb1 = DenseMatrix::zeros(plan.d_b2, plan.rank);
            let mut gb2 = DenseMatrix::zeros(plan.rank, plan.d_b1);
            for col in 0..batch {
                let xm = unvec_column(&x_branch, col, plan.d_b1, plan.d_a1);
                let y1 = b2.matmul(&xm)?;
                let y2 = y1.matmul(&a_t)?;
                let g3 = scaled_unvec_column(upstream, col, plan.d_b2, plan.d_a2, scale);
                gb1.add_scaled(&g3.matmul(&y2.transpose())?, 1.0)?;
                let g2 = b1_t.matmul(&g3)?;
                ga.add_scaled(&g2.transpose().matmul(&y1)?, 1.0)?;
                let g1 = g2.matmul(a)?;
                gb2.add_scaled(&g1.matmul(&xm.transpose())?, 1.0)?;
                let gx = b2_t.matmul(&g1)?;
                flatten_into_column(&gx, &mut gx_branch, col);
            }
            grads.insert("A", ga);
            grads.insert("B1", gb1);
            grads.insert("B2", gb2);
        }
        AdapterParams::KronA { a, b } => {
            let b_t = b.transpose();
            let mut ga = DenseMatrix::zeros(plan.d_a2, plan.d_a1);
            let mut gb = DenseMatrix::zeros(plan.d_b2, plan.d_b1);
            for col in 0..batch {
                let xm = unvec_column(&x_branch, col, plan.d_b1, plan.d_a1);
                let y1 = b.matmul(&xm)?;
                let g2 = scaled_unvec_column(upstream, col, plan.d_b2, plan.d_a2, scale);
                ga.add_scaled(&g2.transpose().matmul(&y1)?, 1.0)?;
                let g1 = g2.matmul(a)?;
                gb.add_scaled(&g1.matmul(&xm.transpose())?, 1.0)?;
                let gx = b_t.matmul(&g1)?;
                flatten_into_column(&gx, &mut gx_branch, col);
            }
            grads.insert("A", ga);
            grads.insert("B", gb);
        }
        AdapterParams::Lora { down, up } => {
            let hidden = down.matmul(&x_branch)?;
            let su = upstream.scale(scale);
            let gup = su.matmul(&hidden.transpose())?;
            let ghidden = up.transpose().matmul(&su)?;
            let gdown = ghidden.matmul(&x_branch.transpose())?;
            gx_branch = down.transpose().matmul(&ghidden)?;
            grads.insert("down", gdown);
            grads.insert("up", gup);
        }
    }

    // dL/dx: frozen path plus the branch chain through the dropout mask.
    let mut input_grad = layer.weight().transpose().matmul(upstream)?;
    match &mask {
        Some(m) => input_grad.add_scaled(&gx_branch.hadamard(m)?, 1.0)?,
        None => input_grad.add_scaled(&gx_branch, 1.0)?,
    }
    Ok((grads, input_grad))
}

/// Unvec one upstream column scaled by `s`.
fn scaled_unvec_column(
    u: &DenseMatrix,
    col: usize,
    rows_m: usize,
    cols_m: usize,
    s: f64,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows_m, cols_m);
    for j in 0..cols_m {
        for i in 0..rows_m {
            out.set(i, j, s * u.get(i + j * rows_m, col));
        }
    }
    out
}

/// Forward, loss, backward in one call. Uses the adapter's current mode;
/// `rng` feeds dropout and is untouched in eval mode.
pub fn loss_and_grad(
    adapter: &mut Adapter,
    layer: &FrozenLinear,
    x: &DenseMatrix,
    loss: &LossSpec,
    rng: &mut Rng,
) -> Result<GradientSet> {
    let out = if adapter.is_training() {
        adapter.forward(layer, x, rng)?
    } else {
        adapter.forward_eval(layer, x)?
    };
    let (value, upstream) = loss.value_and_grad(&out)?;
    let mut grads = backward(adapter, layer, x, &upstream)?;
    grads.loss_value = value;
    Ok(grads)
}

/// Worst-entry discrepancy between an analytic gradient and its
/// finite-difference estimate, normalized by the larger of the two
/// matrices' magnitudes (floored at 1e-8).
///
/// The normalization is per matrix, not per entry: central differences in
/// f64 carry an absolute noise floor of roughly `eps * |L| / h`, so
/// entries far below the gradient's own scale (e.g. saturated softmax
/// cells) cannot be resolved and per-entry ratios there would only
/// measure roundoff. Any sign, transpose or scale bug still moves entries
/// comparable to the norm and is caught.
///
/// When both matrices sit entirely below the 1e-8 floor (a softmax saturated
/// to machine precision leaves a loss near 1e-15 and gradients near 1e-13,
/// which central differences report as exactly zero), the error is zero:
/// numerically zero on both sides is agreement, not a discrepancy.
pub fn gradient_rel_error(analytic: &DenseMatrix, fd: &DenseMatrix) -> Result<f64> {
    let diff = analytic.max_abs_diff(fd)?;
    let scale = analytic.max_abs().max(fd.max_abs());
    if scale <= 1e-8 {
        return Ok(0.0);
    }
    Ok(diff / scale)
}

/// Central finite differences on one named parameter:
/// `(L(p + h e) - L(p - h e)) / (2 h)` per entry.
///
/// Requires eval mode; a stochastic forward would make the two
/// evaluations incomparable.
pub fn finite_difference_grad(
    adapter: &Adapter,
    layer: &FrozenLinear,
    x: &DenseMatrix,
    loss: &LossSpec,
    param_name: &str,
    h: f64,
) -> Result<DenseMatrix> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if adapter.is_training() {
        return Err(Error::State(
            "finite differences require eval mode (dropout disabled)".into(),
        ));
    }
    let mut probe = adapter.clone();
    let (rows, cols) = probe
        .param(param_name)
        .ok_or_else(|| Error::Config(format!("unknown parameter: {param_name}")))?
        .shape();
    let mut grad = DenseMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let original = probe.param(param_name).unwrap().get(i, j);
            probe.param_mut(param_name).unwrap().set(i, j, original + h);
            let plus = eval_loss(&probe, layer, x, loss)?;
            probe.param_mut(param_name).unwrap().set(i, j, original - h);
            let minus = eval_loss(&probe, layer, x, loss)?;
            probe.param_mut(param_name).unwrap().set(i, j, original);
            grad.set(i, j, (plus - minus) / (2.0 * h));
        }
    }
    Ok(grad)
}

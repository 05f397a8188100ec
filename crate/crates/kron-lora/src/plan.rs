//! Shape planning: choosing a Kronecker factorization for a given layer.
//!
//! For a `d_out x d_in` layer the hybrid adapter writes its update as
//! `A (x) (B1 * B2)` with `A` of shape `d_a2 x d_a1` and `B1 * B2` of shape
//! `d_b2 x d_b1`, so `d_a1 * d_b1 == d_in` and `d_a2 * d_b2 == d_out` must
//! hold exactly. Planning picks those four integers.
//!
//! Conventions implemented here:
//!
//! * Non-vocab layers fix `d_a1 = 2` (so `d_in` must be even) and choose
//!   `d_a2` among the divisors of `d_out` so that the slice height
//!   `d_b2 = d_out / d_a2` lands closest to a target (default 200). Ties
//!   break toward the smaller `d_a2`, i.e. the taller slice. Heights above
//!   [`MAX_SLICE_HEIGHT`] (or above the target, when the target is larger)
//!   are never chosen: on divisor-poor widths such as `d_out = 2 * prime`
//!   the height nearest the target would be the prime itself, and a slice
//!   that tall makes `B1` (`d_b2 x rank`) swallow the parameter budget, so
//!   those widths degrade to short slices instead.
//! * Vocab projections use `d_a1 = 1` and halve the non-vocab `d_a2`,
//!   rounding to the nearest divisor of `d_out`.
//! * The pure Kronecker planner (`plan_krona`) factors each dimension
//!   around its square root; a prime dimension degrades to the trivial
//!   `1 x d` factor pair and is flagged.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default target for the slice height `d_b2 = d_out / d_a2`.
pub const DEFAULT_TARGET_SLICE: usize = 200;
/// Tallest slice the [`SlicePolicy::TargetSlice`] search will accept when
/// the target itself is not taller. Keeps `rank * d_b2` bounded on widths
/// whose divisors offer nothing near the target.
pub const MAX_SLICE_HEIGHT: usize = 256;
/// Default scale numerator: branch output is multiplied by `alpha / r`
/// (plain `alpha` for the pure Kronecker adapter).
pub const DEFAULT_ALPHA: f64 = 32.0;
/// Default dropout probability on the adapter branch input.
pub const DEFAULT_DROPOUT: f64 = 0.1;

/// A frozen linear layer's dimensions, as seen by the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    /// Vocabulary projections get a flatter factorization (`d_a1 = 1`).
    pub is_vocab_projection: bool,
}

impl LayerSpec {
    pub fn new(d_in: usize, d_out: usize) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::Config(format!(
                "layer dimensions must be positive, got {d_in}x{d_out}"
            )));
        }
        Ok(LayerSpec {
            d_in,
            d_out,
            is_vocab_projection: false,
        })
    }

    pub fn vocab(d_in: usize, d_out: usize) -> Result<Self> {
        let mut s = LayerSpec::new(d_in, d_out)?;
        s.is_vocab_projection = true;
        Ok(s)
    }
}

/// The three adapter families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Lora,
    KronA,
    KronLora,
}

impl AdapterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::KronA => "krona",
            AdapterKind::KronLora => "kronlora",
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Ok(AdapterKind::Lora),
            "krona" | "kron_a" => Ok(AdapterKind::KronA),
            "kronlora" | "kron_lora" | "kron-lora" => Ok(AdapterKind::KronLora),
            other => Err(Error::Config(format!("unknown adapter kind: {other}"))),
        }
    }
}

/// How the hybrid planner chooses `d_a2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlicePolicy {
    /// Pick the divisor of `d_out` whose slice height `d_out / d_a2` is
    /// closest to this value.
    TargetSlice(usize),
    /// Use this exact `d_a2`; it must divide `d_out`.
    FixedA2(usize),
}

impl Default for SlicePolicy {
    fn default() -> Self {
        SlicePolicy::TargetSlice(DEFAULT_TARGET_SLICE)
    }
}

/// A fully resolved adapter configuration for one layer.
///
/// For `Lora` the four factor dimensions are unused and set to zero; `rank`
/// is unused (zero) for `KronA`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPlan {
    pub kind: AdapterKind,
    pub d_in: usize,
    pub d_out: usize,
    pub d_a1: usize,
    pub d_a2: usize,
    pub d_b1: usize,
    pub d_b2: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    /// Set when a dimension only admitted the trivial `1 x d` Kronecker
    /// factor pair (pure Kronecker planner on a prime dimension).
    pub trivial_factor_warning: bool,
}

impl AdapterPlan {
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    /// Scale applied to the adapter branch output.
    pub fn scale(&self) -> f64 {
        match self.kind {
            AdapterKind::KronA => self.alpha,
            AdapterKind::Lora | AdapterKind::KronLora => self.alpha / self.rank as f64,
        }
    }

    /// Validates the internal consistency invariants; checkpoint loading
    /// re-runs this on untrusted headers.
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Plan(format!(
                "plan has zero layer dimension {}x{}",
                self.d_in, self.d_out
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Plan(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !self.dropout_p.is_finite() || !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Plan(format!(
                "dropout probability must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        match self.kind {
            AdapterKind::Lora => {
                if self.rank == 0 {
                    return Err(Error::Plan("low-rank plan needs rank >= 1".into()));
                }
                if self.d_a1 != 0 || self.d_a2 != 0 || self.d_b1 != 0 || self.d_b2 != 0 {
                    return Err(Error::Plan(
                        "low-rank plan must leave Kronecker factor dims unset".into(),
                    ));
                }
            }
            AdapterKind::KronA | AdapterKind::KronLora => {
                if self.d_a1 * self.d_b1 != self.d_in {
                    return Err(Error::Plan(format!(
                        "d_a1 * d_b1 = {} * {} does not cover d_in = {}",
                        self.d_a1, self.d_b1, self.d_in
                    )));
                }
                if self.d_a2 * self.d_b2 != self.d_out {
                    return Err(Error::Plan(format!(
                        "d_a2 * d_b2 = {} * {} does not cover d_out = {}",
                        self.d_a2, self.d_b2, self.d_out
                    )));
                }
                if self.kind == AdapterKind::KronLora && self.rank == 0 {
                    return Err(Error::Plan("hybrid plan needs rank >= 1".into()));
                }
                if self.kind == AdapterKind::KronA && self.rank != 0 {
                    return Err(Error::Plan("pure Kronecker plan carries no rank".into()));
                }
            }
        }
        Ok(())
    }
}

/// Ascending divisors of `n`.
fn divisors(n: usize) -> Vec<usize> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            small.push(d);
            if d != n / d {
                large.push(n / d);
            }
        }
        d += 1;
    }
    large.reverse();
    small.extend(large);
    small
}

/// Divisor of `n` minimizing `|metric(d) - target|`; scanning ascending
/// divisors with strict improvement breaks ties toward the smaller divisor.
fn closest_divisor_by<F: Fn(usize) -> f64>(n: usize, target: f64, metric: F) -> usize {
    let mut best = 1;
    let mut best_dist = f64::INFINITY;
    for d in divisors(n) {
        let dist = (metric(d) - target).abs();
        if dist < best_dist {
            best_dist = dist;
            best = d;
        }
    }
    best
}

fn kron_lora_a2(d_out: usize, policy: SlicePolicy) -> Result<usize> {
    match policy {
        SlicePolicy::TargetSlice(target) => {
            if target == 0 {
                return Err(Error::Plan("target slice must be positive".into()));
            }
            // Choose d_a2 so the slice height d_out / d_a2 lands near the
            // target, never above the cap. Smaller d_a2 (taller slice)
            // wins ties; height 1 (d_a2 = d_out) is always admissible, so
            // a choice always exists.
            let cap = target.max(MAX_SLICE_HEIGHT);
            let mut best: Option<(f64, usize)> = None;
            for d in divisors(d_out) {
                let height = d_out / d;
                if height > cap {
                    continue;
                }
                let dist = (height as f64 - target as f64).abs();
                if best.map_or(true, |(best_dist, _)| dist < best_dist) {
                    best = Some((dist, d));
                }
            }
            Ok(best.expect("height 1 is always under the cap").1)
        }
        SlicePolicy::FixedA2(a2) => {
            if a2 == 0 || d_out % a2 != 0 {
                return Err(Error::Plan(format!(
                    "requested d_a2 = {a2} does not divide d_out = {d_out}"
                )));
            }
            Ok(a2)
        }
    }
}

/// Plan the hybrid adapter: `A (x) (B1 * B2)` at the given rank.
pub fn plan_kron_lora(layer: &LayerSpec, rank: usize, policy: SlicePolicy) -> Result<AdapterPlan> {
    if rank == 0 {
        return Err(Error::Plan("rank must be >= 1".into()));
    }
    let (d_a1, d_a2) = if layer.is_vocab_projection {
        // Vocab projections: flat input factor, half the usual d_a2.
        let a2_others = kron_lora_a2(layer.d_out, policy)?;
        let halved = a2_others as f64 / 2.0;
        let a2 = closest_divisor_by(layer.d_out, halved, |d| d as f64);
        (1, a2)
    } else {
        if layer.d_in % 2 != 0 {
            return Err(Error::Plan(format!(
                "d_in = {} is odd so d_a1 = 2 cannot divide it; mark the layer \
                 as a vocab projection or pad the input dimension",
                layer.d_in
            )));
        }
        (2, kron_lora_a2(layer.d_out, policy)?)
    };
    let plan = AdapterPlan {
        kind: AdapterKind::KronLora,
        d_in: layer.d_in,
        d_out: layer.d_out,
        d_a1,
        d_a2,
        d_b1: layer.d_in / d_a1,
        d_b2: layer.d_out / d_a2,
        rank,
        alpha: DEFAULT_ALPHA,
        dropout_p: DEFAULT_DROPOUT,
        trivial_factor_warning: false,
    };
    plan.validate()?;
    Ok(plan)
}

/// Plan the pure Kronecker adapter: factor both dimensions around their
/// square roots. Prime dimensions degrade to `1 x d` and set the warning
/// flag.
pub fn plan_krona(layer: &LayerSpec) -> AdapterPlan {
    let d_a1 = closest_divisor_by(layer.d_in, (layer.d_in as f64).sqrt(), |d| d as f64);
    let d_a2 = closest_divisor_by(layer.d_out, (layer.d_out as f64).sqrt(), |d| d as f64);
    let d_b1 = layer.d_in / d_a1;
    let d_b2 = layer.d_out / d_a2;
    let trivial = (layer.d_in > 1 && (d_a1 == 1 || d_b1 == 1))
        || (layer.d_out > 1 && (d_a2 == 1 || d_b2 == 1));
    AdapterPlan {
        kind: AdapterKind::KronA,
        d_in: layer.d_in,
        d_out: layer.d_out,
        d_a1,
        d_a2,
        d_b1,
        d_b2,
        rank: 0,
        alpha: DEFAULT_ALPHA,
        dropout_p: DEFAULT_DROPOUT,
        trivial_factor_warning: trivial,
    }
}

/// Plan a plain low-rank adapter at the given rank.
pub fn plan_lora(layer: &LayerSpec, rank: usize) -> Result<AdapterPlan> {
    if rank == 0 {
        return Err(Error::Plan("rank must be >= 1".into()));
    }
    Ok(AdapterPlan {
        kind: AdapterKind::Lora,
        d_in: layer.d_in,
        d_out: layer.d_out,
        d_a1: 0,
        d_a2: 0,
        d_b1: 0,
        d_b2: 0,
        rank,
        alpha: DEFAULT_ALPHA,
        dropout_p: DEFAULT_DROPOUT,
        trivial_factor_warning: false,
    })
}

/// Number of trainable scalars the plan will allocate.
pub fn param_count(plan: &AdapterPlan) -> usize {
    match plan.kind {
        AdapterKind::KronLora => {
            plan.d_a1 * plan.d_a2 + plan.rank * (plan.d_b2 + plan.d_b1)
        }
        AdapterKind::Lora => plan.rank * (plan.d_in + plan.d_out),
        AdapterKind::KronA => plan.d_a1 * plan.d_a2 + plan.d_b1 * plan.d_b2,
    }
}

/// Transient floats the factored forward chain allocates per example:
/// the intermediates of the per-column chain (`Y1`, `Y2`, `Y3` for the
/// hybrid; `Y1`, `Y2` for pure Kronecker; the rank-sized hidden vector for
/// plain low-rank).
pub fn workspace_floats_per_example(plan: &AdapterPlan) -> usize {
    match plan.kind {
        AdapterKind::KronLora => {
            plan.rank * plan.d_a1 + plan.rank * plan.d_a2 + plan.d_b2 * plan.d_a2
        }
        AdapterKind::KronA => plan.d_b2 * plan.d_a1 + plan.d_b2 * plan.d_a2,
        AdapterKind::Lora => plan.rank,
    }
}

//! Rank-1 adapter pools attached to frozen linear layers.
//!
//! A unit is one key row and one value column; the pool stacks them into the
//! associative update `sum_i w_i * (key_i . x) * value_i` on top of the frozen
//! base product. Growing the pool freezes everything already there and
//! appends fresh units for the new task, so earlier tasks keep their bytes.
//!
//! The backward pass differentiates through the gate: the weight of a unit
//! depends on every activation through the pooled normalization and the
//! softmax, and both Jacobians are applied here. Budget and prune masks are
//! treated as constants of the forward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::gate::{gate_pipeline, GateConfig, GateMode, GateTrace};
use crate::numerics::{DenseMatrix, DenseVector};
use crate::{MoraError, Result};

/// One rank-1 adapter unit.
#[derive(Debug, Clone, PartialEq)]
pub struct RankUnit {
    /// Key row, length d_in. Dotted with the input to produce the activation.
    pub key_a: DenseVector,
    /// Value column, length d_out. Written into the output when the unit fires.
    pub value_b: DenseVector,
    /// Task that created the unit.
    pub task_id: usize,
    /// Frozen units never receive gradient.
    pub frozen: bool,
}

/// Ordered collection of rank-1 units. Unit order never changes after growth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankPool {
    pub units: Vec<RankUnit>,
}

impl RankPool {
    pub fn new() -> Self {
        Self { units: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn max_task(&self) -> Option<usize> {
        self.units.iter().map(|u| u.task_id).max()
    }

    /// Stacks the keys into an r x d_in matrix in unit order.
    pub fn keys_matrix(&self, d_in: usize) -> DenseMatrix {
        let mut data = Vec::with_capacity(self.len() * d_in);
        for u in &self.units {
            data.extend_from_slice(&u.key_a.data);
        }
        DenseMatrix {
            rows: self.len(),
            cols: d_in,
            data,
        }
    }

    /// Freezes every unit, then appends `r_new` trainable units for `task_id`.
    ///
    /// Keys are sampled from a Gaussian with variance 1/d_in; values start at
    /// zero so a freshly grown pool leaves the layer function unchanged.
    /// Task ids must arrive in strictly increasing order.
    pub fn grow(
        &mut self,
        d_in: usize,
        d_out: usize,
        r_new: usize,
        task_id: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if let Some(last) = self.max_task() {
            if task_id <= last {
                return Err(MoraError::NonMonotonicTask {
                    last,
                    requested: task_id,
                });
            }
        }
        for u in &mut self.units {
            u.frozen = true;
        }
        let normal = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).unwrap();
        for _ in 0..r_new {
            self.units.push(RankUnit {
                key_a: DenseVector::new((0..d_in).map(|_| normal.sample(rng)).collect()),
                value_b: DenseVector::zeros(d_out),
                task_id,
                frozen: false,
            });
        }
        Ok(())
    }
}

/// Frozen linear layer plus its adapter pool and gate settings.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    pub w0: DenseMatrix,
    pub pool: RankPool,
    pub cfg: GateConfig,
}

impl AdaptedLinear {
    pub fn new(w0: DenseMatrix, cfg: GateConfig) -> Self {
        Self {
            w0,
            pool: RankPool::new(),
            cfg,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows
    }

    pub fn grow(&mut self, r_new: usize, task_id: usize, rng: &mut impl Rng) -> Result<()> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        self.pool.grow(d_in, d_out, r_new, task_id, rng)
    }
}

/// Gradient for one trainable unit, aligned by pool index.
#[derive(Debug, Clone)]
pub struct UnitGrad {
    pub index: usize,
    pub d_key_a: DenseVector,
    pub d_value_b: DenseVector,
}

/// Output of [`adapter_backward`]: per-unit gradients for trainable units
/// only, plus the gradient with respect to the layer input.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub units: Vec<UnitGrad>,
    pub d_x: DenseVector,
}

/// `y = W0 x + sum_i final_w[i] * a_i * value_i`, with the gate trace used to
/// produce it. Units with zero final weight are skipped, so an inert unit
/// cannot perturb the sum even at the last bit.
pub fn adapter_forward(layer: &AdaptedLinear, x: &DenseVector) -> Result<(DenseVector, GateTrace)> {
    let keys = layer.pool.keys_matrix(layer.d_in());
    let trace = gate_pipeline(&keys, x, &layer.cfg)?;
    let mut y = layer.w0.matvec(x)?;
    for (i, unit) in layer.pool.units.iter().enumerate() {
        let w = trace.final_w[i];
        if w != 0.0 {
            y.axpy(w * trace.activations_a[i], &unit.value_b)?;
        }
    }
    Ok((y, trace))
}

/// Reverse-mode gradients for one input through the layer and its gate.
///
/// `trace` must be the record produced by [`adapter_forward`] for the same
/// `x`; budget and prune masks are constants, everything else is
/// differentiated. Frozen units receive no parameter gradient but still
/// propagate into `d_x`.
pub fn adapter_backward(
    layer: &AdaptedLinear,
    x: &DenseVector,
    trace: &GateTrace,
    dy: &DenseVector,
) -> Result<AdapterGrads> {
    let r = layer.pool.len();
    if trace.num_units() != r {
        return Err(MoraError::DimensionMismatch {
            context: "trace vs pool",
            expected: r,
            got: trace.num_units(),
        });
    }
    if dy.len() != layer.d_out() {
        return Err(MoraError::DimensionMismatch {
            context: "adapter_backward dy",
            expected: layer.d_out(),
            got: dy.len(),
        });
    }

    // Per-unit output sensitivity g_i = value_i . dy.
    let g: Vec<f64> = layer
        .pool
        .units
        .iter()
        .map(|u| u.value_b.dot(dy))
        .collect::<Result<_>>()?;

    // Direct path: y depends on a_i through final_w[i] * a_i * value_i.
    let mut d_a: Vec<f64> = (0..r).map(|i| trace.final_w[i] * g[i]).collect();

    // Gate path: ds_i = dL/ds_i, then back through the normalization.
    let mut d_s = vec![0.0; r];
    match layer.cfg.mode {
        GateMode::Dense => {}
        GateMode::SelfRaw if layer.cfg.raw_scores_as_weights => {
            for i in 0..r {
                d_s[i] = trace.activations_a[i] * g[i];
            }
        }
        GateMode::SelfRaw | GateMode::SelfSparse | GateMode::SelfAdaptive => {
            // SelfRaw fixes the temperature at 1; the sparse modes sharpen.
            let tau = if layer.cfg.mode == GateMode::SelfRaw {
                1.0
            } else {
                layer.cfg.tau
            };
            // dL/dw_i, with the prune mask folded in as a constant.
            let du = |i: usize| -> f64 {
                let m = if trace.prune_mask_m[i] { 1.0 } else { 0.0 };
                m * trace.activations_a[i] * g[i]
            };
            let inner: f64 = trace
                .topk_set
                .iter()
                .map(|&i| du(i) * trace.softmax_w[i])
                .sum();
            for &i in &trace.topk_set {
                d_s[i] = trace.softmax_w[i] * (du(i) - inner) / tau;
            }
        }
        GateMode::RouterLora | GateMode::RouterRank => {
            return Err(MoraError::WrongMode(layer.cfg.mode));
        }
    }

    // Normalization: s_j = a_j / n with n = sqrt(sum a^2 + eps), so
    // d a_j += ds_j / n - a_j * (sum_i ds_i a_i) / n^3.
    let n = trace.norm_n;
    let mix: f64 = d_s
        .iter()
        .zip(&trace.activations_a)
        .map(|(ds, a)| ds * a)
        .sum();
    for j in 0..r {
        d_a[j] += d_s[j] / n - trace.activations_a[j] * mix / (n * n * n);
    }

    // d_x collects the frozen product and every unit's key direction.
    let mut d_x = layer.w0.matvec_t(dy)?;
    for (i, unit) in layer.pool.units.iter().enumerate() {
        if d_a[i] != 0.0 {
            d_x.axpy(d_a[i], &unit.key_a)?;
        }
    }

    let mut units = Vec::new();
    for (i, unit) in layer.pool.units.iter().enumerate() {
        if unit.frozen {
            continue;
        }
        let mut d_key = DenseVector::zeros(layer.d_in());
        d_key.axpy(d_a[i], x)?;
        let mut d_value = DenseVector::zeros(layer.d_out());
        d_value.axpy(trace.final_w[i] * trace.activations_a[i], dy)?;
        units.push(UnitGrad {
            index: i,
            d_key_a: d_key,
            d_value_b: d_value,
        });
    }

    Ok(AdapterGrads { units, d_x })
}

/// Parameter accounting for one adapted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    /// Parameters appended per task: r keys and r values.
    pub added: usize,
    /// Parameters touched per input: every key is scored, at most k values fire.
    pub activated: usize,
}

pub fn param_counts(d_in: usize, d_out: usize, r_per_task: usize, budget_k: usize) -> ParamCounts {
    ParamCounts {
        added: r_per_task * (d_in + d_out),
        activated: r_per_task * d_in + budget_k.min(r_per_task) * d_out,
    }
}

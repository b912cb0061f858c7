//! Comparison systems: learned routers over the same rank-1 pools, and the
//! two dense adapter protocols (shared pool vs grow-and-freeze).
//!
//! Routers pick experts from the input with a trained projection instead of
//! the units' own keys. `moe_lora` treats each task's unit group as one
//! expert with a single routing weight; `rank_router` gives every unit its
//! own column. Selected logits go through a plain softmax (temperature 1),
//! unselected experts get exact zero weight.

use crate::adapter::{AdaptedLinear, AdapterGrads, RankPool, UnitGrad};
use crate::gate::GateMode;
use crate::numerics::{stable_softmax, topk_indices, DenseMatrix, DenseVector, NEG_INF};
use crate::{MoraError, Result};

/// Learned routing projection, one column per expert. Columns start at zero
/// so the initial mixture over any selected set is uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub w_r: DenseMatrix,
}

impl RouterParams {
    pub fn new(d_in: usize) -> Self {
        Self {
            w_r: DenseMatrix::zeros(d_in, 0),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.w_r.cols
    }

    /// Appends `count` zero-initialized expert columns.
    pub fn add_experts(&mut self, count: usize) {
        let (rows, old_cols) = (self.w_r.rows, self.w_r.cols);
        let new_cols = old_cols + count;
        let mut data = vec![0.0; rows * new_cols];
        for r in 0..rows {
            data[r * new_cols..r * new_cols + old_cols]
                .copy_from_slice(&self.w_r.data[r * old_cols..(r + 1) * old_cols]);
        }
        self.w_r = DenseMatrix {
            rows,
            cols: new_cols,
            data,
        };
    }

    /// Expert logits `W_r^T x`.
    pub fn logits(&self, x: &DenseVector) -> Result<Vec<f64>> {
        Ok(self.w_r.matvec_t(x)?.data)
    }
}

/// Record of one routing decision plus the per-unit data backward needs.
#[derive(Debug, Clone)]
pub struct RouterTrace {
    /// Raw expert logits.
    pub logits: Vec<f64>,
    /// Experts that survived the budget, ascending.
    pub topk_set: Vec<usize>,
    /// Softmax weights over the survivors; zero elsewhere.
    pub expert_w: Vec<f64>,
    /// Key activations `a_i` for every unit.
    pub unit_activations: Vec<f64>,
    /// Routing weight as applied to each unit (its expert's weight).
    pub unit_w: Vec<f64>,
}

/// Unit indices grouped by task id, ascending. Each group is one expert for
/// the per-task router.
pub fn expert_groups(pool: &RankPool) -> Vec<(usize, Vec<usize>)> {
    let mut tasks: Vec<usize> = pool.units.iter().map(|u| u.task_id).collect();
    tasks.sort_unstable();
    tasks.dedup();
    tasks
        .into_iter()
        .map(|t| {
            let members = pool
                .units
                .iter()
                .enumerate()
                .filter(|(_, u)| u.task_id == t)
                .map(|(i, _)| i)
                .collect();
            (t, members)
        })
        .collect()
}

fn routed_weights(logits: &[f64], budget_k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if logits.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let k = budget_k.min(logits.len());
    let kept = topk_indices(logits, k)?;
    let mut masked = vec![NEG_INF; logits.len()];
    for &i in &kept {
        masked[i] = logits[i];
    }
    let w = stable_softmax(&masked)?;
    Ok((kept, w))
}

fn unit_activations(layer: &AdaptedLinear, x: &DenseVector) -> Result<Vec<f64>> {
    layer
        .pool
        .units
        .iter()
        .map(|u| u.key_a.dot(x))
        .collect()
}

/// Forward pass with one routing weight per task group:
/// `y = W0 x + sum_e R_e(x) * sum_{i in e} a_i * value_i`.
pub fn moe_lora_forward(
    layer: &AdaptedLinear,
    router: &RouterParams,
    x: &DenseVector,
) -> Result<(DenseVector, RouterTrace)> {
    if layer.cfg.mode != GateMode::RouterLora {
        return Err(MoraError::WrongMode(layer.cfg.mode));
    }
    let groups = expert_groups(&layer.pool);
    if router.num_experts() != groups.len() {
        return Err(MoraError::DimensionMismatch {
            context: "router experts vs task groups",
            expected: groups.len(),
            got: router.num_experts(),
        });
    }
    let logits = router.logits(x)?;
    let (topk_set, expert_w) = routed_weights(&logits, layer.cfg.budget_k)?;
    let a = unit_activations(layer, x)?;

    let mut unit_w = vec![0.0; layer.pool.len()];
    let mut y = layer.w0.matvec(x)?;
    for (e, (_, members)) in groups.iter().enumerate() {
        let w = expert_w[e];
        for &i in members {
            unit_w[i] = w;
            if w != 0.0 {
                y.axpy(w * a[i], &layer.pool.units[i].value_b)?;
            }
        }
    }
    Ok((
        y,
        RouterTrace {
            logits,
            topk_set,
            expert_w,
            unit_activations: a,
            unit_w,
        },
    ))
}

/// Forward pass with one routing weight per unit:
/// `y = W0 x + sum_i R_i(x) * a_i * value_i`.
pub fn rank_router_forward(
    layer: &AdaptedLinear,
    router: &RouterParams,
    x: &DenseVector,
) -> Result<(DenseVector, RouterTrace)> {
    if layer.cfg.mode != GateMode::RouterRank {
        return Err(MoraError::WrongMode(layer.cfg.mode));
    }
    if router.num_experts() != layer.pool.len() {
        return Err(MoraError::DimensionMismatch {
            context: "router experts vs units",
            expected: layer.pool.len(),
            got: router.num_experts(),
        });
    }
    let logits = router.logits(x)?;
    let (topk_set, expert_w) = routed_weights(&logits, layer.cfg.budget_k)?;
    let a = unit_activations(layer, x)?;

    let mut y = layer.w0.matvec(x)?;
    for (i, unit) in layer.pool.units.iter().enumerate() {
        if expert_w[i] != 0.0 {
            y.axpy(expert_w[i] * a[i], &unit.value_b)?;
        }
    }
    Ok((
        y,
        RouterTrace {
            logits,
            topk_set,
            expert_w: expert_w.clone(),
            unit_activations: a,
            unit_w: expert_w,
        },
    ))
}

/// Shared backward for both router layouts. `expert_of[i]` maps unit i to its
/// expert index. Returns unit and input gradients plus the router gradient;
/// every router column is trainable, frozen units' parameters are not.
fn router_backward(
    layer: &AdaptedLinear,
    router: &RouterParams,
    x: &DenseVector,
    trace: &RouterTrace,
    dy: &DenseVector,
    expert_of: &[usize],
) -> Result<(AdapterGrads, DenseMatrix)> {
    let r = layer.pool.len();
    if trace.unit_w.len() != r {
        return Err(MoraError::DimensionMismatch {
            context: "router trace vs pool",
            expected: r,
            got: trace.unit_w.len(),
        });
    }

    let g: Vec<f64> = layer
        .pool
        .units
        .iter()
        .map(|u| u.value_b.dot(dy))
        .collect::<Result<_>>()?;

    // dL/dR_e accumulates a_i * g_i over the expert's units.
    let num_experts = trace.expert_w.len();
    let mut d_expert = vec![0.0; num_experts];
    for i in 0..r {
        d_expert[expert_of[i]] += trace.unit_activations[i] * g[i];
    }

    // Softmax Jacobian over the selected experts; the mask is a constant.
    let inner: f64 = trace
        .topk_set
        .iter()
        .map(|&e| d_expert[e] * trace.expert_w[e])
        .sum();
    let mut d_logits = vec![0.0; num_experts];
    for &e in &trace.topk_set {
        d_logits[e] = trace.expert_w[e] * (d_expert[e] - inner);
    }

    // d W_r: column e gets d_logits[e] * x.
    let mut d_router = DenseMatrix::zeros(router.w_r.rows, num_experts);
    for row in 0..router.w_r.rows {
        for e in 0..num_experts {
            d_router.data[row * num_experts + e] = d_logits[e] * x.data[row];
        }
    }

    let mut d_x = layer.w0.matvec_t(dy)?;
    // Router path: x feeds the logits through every selected column.
    d_x.axpy(1.0, &router.w_r.matvec(&DenseVector::new(d_logits))?)?;
    // Unit path: x feeds each activation through its key.
    for (i, unit) in layer.pool.units.iter().enumerate() {
        let da = trace.unit_w[i] * g[i];
        if da != 0.0 {
            d_x.axpy(da, &unit.key_a)?;
        }
    }

    let mut units = Vec::new();
    for (i, unit) in layer.pool.units.iter().enumerate() {
        if unit.frozen {
            continue;
        }
        let mut d_key = DenseVector::zeros(layer.d_in());
        d_key.axpy(trace.unit_w[i] * g[i], x)?;
        let mut d_value = DenseVector::zeros(layer.d_out());
        d_value.axpy(trace.unit_w[i] * trace.unit_activations[i], dy)?;
        units.push(UnitGrad {
            index: i,
            d_key_a: d_key,
            d_value_b: d_value,
        });
    }

    Ok((AdapterGrads { units, d_x }, d_router))
}

pub fn moe_lora_backward(
    layer: &AdaptedLinear,
    router: &RouterParams,
    x: &DenseVector,
    trace: &RouterTrace,
    dy: &DenseVector,
) -> Result<(AdapterGrads, DenseMatrix)> {
    let groups = expert_groups(&layer.pool);
    let mut expert_of = vec![0; layer.pool.len()];
    for (e, (_, members)) in groups.iter().enumerate() {
        for &i in members {
            expert_of[i] = e;
        }
    }
    router_backward(layer, router, x, trace, dy, &expert_of)
}

pub fn rank_router_backward(
    layer: &AdaptedLinear,
    router: &RouterParams,
    x: &DenseVector,
    trace: &RouterTrace,
    dy: &DenseVector,
) -> Result<(AdapterGrads, DenseMatrix)> {
    let expert_of: Vec<usize> = (0..layer.pool.len()).collect();
    router_backward(layer, router, x, trace, dy, &expert_of)
}

/// Dense adapter protocols that share the Dense gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseVariant {
    /// One pool created at the first task, reused and updated by every task.
    SeqLora,
    /// A fresh frozen group per task, all groups always active.
    IncLora,
}

/// How a run manages pool capacity across tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthPolicy {
    /// Append new units per task and freeze the old ones.
    GrowAndFreeze,
    /// Keep one trainable pool for the whole run.
    SingleSharedPool,
}

pub fn dense_baseline_mode(variant: DenseVariant) -> (GateMode, GrowthPolicy) {
    match variant {
        DenseVariant::SeqLora => (GateMode::Dense, GrowthPolicy::SingleSharedPool),
        DenseVariant::IncLora => (GateMode::Dense, GrowthPolicy::GrowAndFreeze),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::RankUnit;
    use crate::gate::GateConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(mode: GateMode, seed: u64, d: usize, tasks: usize, per_task: usize) -> AdaptedLinear {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = AdaptedLinear::new(
            DenseMatrix::from_vec(d, d, (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
            GateConfig::new(mode),
        );
        for t in 1..=tasks {
            for _ in 0..per_task {
                layer.pool.units.push(RankUnit {
                    key_a: DenseVector::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                    value_b: DenseVector::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                    task_id: t,
                    frozen: t < tasks,
                });
            }
        }
        layer
    }

    fn random_router(seed: u64, d: usize, experts: usize) -> RouterParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut router = RouterParams::new(d);
        router.add_experts(experts);
        for v in &mut router.w_r.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        router
    }

    #[test]
    fn zero_router_routes_uniformly() {
        let layer = random_layer(GateMode::RouterLora, 1, 4, 2, 2);
        let mut router = RouterParams::new(4);
        router.add_experts(2);
        let x = DenseVector::new(vec![1.0, -0.5, 0.25, 2.0]);
        let (_, trace) = moe_lora_forward(&layer, &router, &x).unwrap();
        assert_eq!(trace.expert_w, vec![0.5, 0.5]);
        // Both units of a group share their expert's weight.
        assert_eq!(trace.unit_w, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn add_experts_preserves_existing_columns() {
        let mut router = random_router(3, 4, 2);
        let before = router.w_r.clone();
        router.add_experts(1);
        assert_eq!(router.num_experts(), 3);
        for r in 0..4 {
            assert_eq!(router.w_r.get(r, 0), before.get(r, 0));
            assert_eq!(router.w_r.get(r, 1), before.get(r, 1));
            assert_eq!(router.w_r.get(r, 2), 0.0);
        }
    }

    #[test]
    fn budget_limits_selected_experts() {
        let layer = random_layer(GateMode::RouterRank, 5, 4, 2, 3);
        let router = random_router(6, 4, 6);
        let x = DenseVector::new(vec![0.3, -0.7, 1.1, 0.2]);
        let mut l = layer;
        l.cfg.budget_k = 2;
        let (_, trace) = rank_router_forward(&l, &router, &x).unwrap();
        assert_eq!(trace.topk_set.len(), 2);
        let nonzero = trace.expert_w.iter().filter(|w| **w != 0.0).count();
        assert_eq!(nonzero, 2);
        assert!((trace.expert_w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_mode_is_rejected() {
        let layer = random_layer(GateMode::SelfAdaptive, 7, 4, 1, 2);
        let router = random_router(8, 4, 1);
        let x = DenseVector::new(vec![1.0; 4]);
        assert!(matches!(
            moe_lora_forward(&layer, &router, &x),
            Err(MoraError::WrongMode(GateMode::SelfAdaptive))
        ));
        assert!(matches!(
            rank_router_forward(&layer, &router, &x),
            Err(MoraError::WrongMode(GateMode::SelfAdaptive))
        ));
    }

    #[test]
    fn expert_count_mismatch_is_rejected() {
        let layer = random_layer(GateMode::RouterLora, 9, 4, 2, 2);
        let router = random_router(10, 4, 5);
        let x = DenseVector::new(vec![1.0; 4]);
        assert!(matches!(
            moe_lora_forward(&layer, &router, &x),
            Err(MoraError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dense_baseline_mapping() {
        assert_eq!(
            dense_baseline_mode(DenseVariant::SeqLora),
            (GateMode::Dense, GrowthPolicy::SingleSharedPool)
        );
        assert_eq!(
            dense_baseline_mode(DenseVariant::IncLora),
            (GateMode::Dense, GrowthPolicy::GrowAndFreeze)
        );
    }

    // Central-difference check over router columns, trainable units, and x.
    fn fd_check_router(mode: GateMode, seed: u64) {
        let d = 5;
        let mut layer = random_layer(mode, seed, d, 2, 2);
        layer.cfg.budget_k = if mode == GateMode::RouterLora { 2 } else { 3 };
        let experts = if mode == GateMode::RouterLora { 2 } else { 4 };
        let router = random_router(seed ^ 0xabc, d, experts);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdef);
        let x = DenseVector::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let dy = DenseVector::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let forward = |layer: &AdaptedLinear, router: &RouterParams, x: &DenseVector| {
            let (y, _) = match mode {
                GateMode::RouterLora => moe_lora_forward(layer, router, x).unwrap(),
                _ => rank_router_forward(layer, router, x).unwrap(),
            };
            y.dot(&dy).unwrap()
        };

        let (trace, grads, d_router) = {
            let (_, trace) = match mode {
                GateMode::RouterLora => moe_lora_forward(&layer, &router, &x).unwrap(),
                _ => rank_router_forward(&layer, &router, &x).unwrap(),
            };
            let (grads, d_router) = match mode {
                GateMode::RouterLora => {
                    moe_lora_backward(&layer, &router, &x, &trace, &dy).unwrap()
                }
                _ => rank_router_backward(&layer, &router, &x, &trace, &dy).unwrap(),
            };
            (trace, grads, d_router)
        };
        assert!(!trace.topk_set.is_empty());

        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            assert!(
                (analytic - fd).abs() <= 1e-8 + 1e-5 * analytic.abs().max(fd.abs()),
                "{what}: analytic {analytic} vs fd {fd} ({mode:?})"
            );
        };

        for idx in 0..router.w_r.data.len() {
            let mut rp = router.clone();
            rp.w_r.data[idx] += h;
            let mut rm = router.clone();
            rm.w_r.data[idx] -= h;
            check(
                d_router.data[idx],
                forward(&layer, &rp, &x),
                forward(&layer, &rm, &x),
                "router",
            );
        }
        for ug in &grads.units {
            for c in 0..d {
                let mut lp = layer.clone();
                lp.pool.units[ug.index].key_a.data[c] += h;
                let mut lm = layer.clone();
                lm.pool.units[ug.index].key_a.data[c] -= h;
                check(
                    ug.d_key_a.data[c],
                    forward(&lp, &router, &x),
                    forward(&lm, &router, &x),
                    "key",
                );
                let mut lp = layer.clone();
                lp.pool.units[ug.index].value_b.data[c] += h;
                let mut lm = layer.clone();
                lm.pool.units[ug.index].value_b.data[c] -= h;
                check(
                    ug.d_value_b.data[c],
                    forward(&lp, &router, &x),
                    forward(&lm, &router, &x),
                    "value",
                );
            }
        }
        for c in 0..d {
            let mut xp = x.clone();
            xp.data[c] += h;
            let mut xm = x.clone();
            xm.data[c] -= h;
            check(
                grads.d_x.data[c],
                forward(&layer, &router, &xp),
                forward(&layer, &router, &xm),
                "x",
            );
        }
    }

    #[test]
    fn router_backward_matches_finite_differences() {
        fd_check_router(GateMode::RouterLora, 21);
        fd_check_router(GateMode::RouterRank, 22);
    }
}

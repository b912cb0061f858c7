//! Self-activated gating over a pool of rank-1 units.
//!
//! The gate never sees a task id. Each unit's key row is dotted with the
//! input, the activations are normalized by the pooled activation energy,
//! and the normalized scores drive budgeted softmax mixing plus threshold
//! pruning. Every step is recorded in a [`GateTrace`] so training and
//! analysis replay the exact decisions the forward pass made.
//!
//! Pipeline order is fixed: scores, then the top-k budget mask, then the
//! tempered softmax over survivors, then pruning against the pre-mask
//! scores. Pruned mass is dropped, never renormalized, so the total weight
//! of an input that aligns with nothing decays toward zero instead of being
//! inflated back to one.

use serde::{Deserialize, Serialize};

use crate::numerics::{stable_softmax, topk_indices, DenseMatrix, DenseVector, NEG_INF};
use crate::{MoraError, Result};

/// Mixing strategy for a pool of rank-1 units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Every unit gets weight 1. Plain additive adapters.
    Dense,
    /// Learned router over per-task unit groups. Handled in `baselines`.
    RouterLora,
    /// Learned router with one column per unit. Handled in `baselines`.
    RouterRank,
    /// Softmax over all normalized scores, no budget, no pruning, temperature 1.
    SelfRaw,
    /// Top-k budget plus tempered softmax over survivors.
    SelfSparse,
    /// Top-k budget, tempered softmax, then threshold pruning.
    SelfAdaptive,
}

impl GateMode {
    pub fn is_router(self) -> bool {
        matches!(self, GateMode::RouterLora | GateMode::RouterRank)
    }
}

/// Gate hyperparameters. `validate` enforces the field ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub mode: GateMode,
    /// Softmax temperature. Lower is sharper.
    pub tau: f64,
    /// Maximum number of units that may receive nonzero weight in budgeted modes.
    pub budget_k: usize,
    /// Score threshold for pruning in `SelfAdaptive`.
    pub delta: f64,
    /// Additive floor inside the normalization sqrt, keeps x = 0 finite.
    pub eps: f64,
    /// `SelfRaw` sub-variant: use the normalized scores directly as weights
    /// instead of putting them through a softmax.
    pub raw_scores_as_weights: bool,
}

impl GateConfig {
    pub fn new(mode: GateMode) -> Self {
        Self {
            mode,
            tau: 0.1,
            budget_k: 16,
            delta: 0.2,
            eps: 1e-12,
            raw_scores_as_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(MoraError::InvalidConfig(format!(
                "gate tau must be positive, got {}",
                self.tau
            )));
        }
        if self.budget_k == 0 {
            return Err(MoraError::InvalidBudget);
        }
        if !(self.delta >= 0.0) {
            return Err(MoraError::InvalidConfig(format!(
                "gate delta must be non-negative, got {}",
                self.delta
            )));
        }
        if !(self.eps > 0.0) {
            return Err(MoraError::InvalidConfig(format!(
                "gate eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Full record of one gating decision, aligned with the pool's unit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    /// Key activations `a_i = key_i . x`.
    pub activations_a: Vec<f64>,
    /// Pooled energy `sqrt(sum a_j^2 + eps)`.
    pub norm_n: f64,
    /// Normalized scores `s_i = a_i / n`.
    pub raw_scores_s: Vec<f64>,
    /// Indices that survived the budget, ascending.
    pub topk_set: Vec<usize>,
    /// Softmax weights over the budget survivors; zero elsewhere.
    pub softmax_w: Vec<f64>,
    /// Pruning mask `s_i >= delta`.
    pub prune_mask_m: Vec<bool>,
    /// Mixing weights actually applied to the unit outputs.
    pub final_w: Vec<f64>,
}

impl GateTrace {
    pub fn num_units(&self) -> usize {
        self.final_w.len()
    }

    /// Indices with nonzero final weight.
    pub fn support(&self) -> Vec<usize> {
        self.final_w
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Key activations, pooled norm, and normalized scores for one input.
///
/// `keys` holds one key per row. An empty pool yields empty vectors and
/// `n = sqrt(eps)`.
pub fn raw_scores(
    keys: &DenseMatrix,
    x: &DenseVector,
    eps: f64,
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let a = keys.matvec(x)?.data;
    let energy: f64 = a.iter().map(|v| v * v).sum();
    let n = (energy + eps).sqrt();
    let s = a.iter().map(|v| v / n).collect();
    Ok((a, n, s))
}

/// Keeps the top `k` scores and masks the rest to `NEG_INF`.
pub fn apply_budget(scores: &[f64], k: usize) -> Result<Vec<f64>> {
    let kept = topk_indices(scores, k)?;
    let mut out = vec![NEG_INF; scores.len()];
    for i in kept {
        out[i] = scores[i];
    }
    Ok(out)
}

/// Tempered softmax over a masked score vector.
pub fn gate_weights(masked_scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(MoraError::InvalidConfig(format!(
            "gate tau must be positive, got {tau}"
        )));
    }
    let scaled: Vec<f64> = masked_scores.iter().map(|s| s / tau).collect();
    stable_softmax(&scaled)
}

/// Zeroes weights whose pre-budget score falls below `delta`. The surviving
/// weights keep their softmax values; nothing is renormalized.
pub fn prune(weights: &[f64], scores: &[f64], delta: f64) -> (Vec<f64>, Vec<bool>) {
    let mask: Vec<bool> = scores.iter().map(|&s| s >= delta).collect();
    let pruned = weights
        .iter()
        .zip(&mask)
        .map(|(&w, &m)| if m { w } else { 0.0 })
        .collect();
    (pruned, mask)
}

/// Runs the full gating pipeline for one input under the configured mode.
///
/// Router modes have no key-driven gate and are rejected with `WrongMode`.
pub fn gate_pipeline(keys: &DenseMatrix, x: &DenseVector, cfg: &GateConfig) -> Result<GateTrace> {
    cfg.validate()?;
    if cfg.mode.is_router() {
        return Err(MoraError::WrongMode(cfg.mode));
    }
    let (a, n, s) = raw_scores(keys, x, cfg.eps)?;
    let r = s.len();
    if r == 0 {
        return Ok(GateTrace {
            activations_a: a,
            norm_n: n,
            raw_scores_s: s,
            topk_set: Vec::new(),
            softmax_w: Vec::new(),
            prune_mask_m: Vec::new(),
            final_w: Vec::new(),
        });
    }

    let all: Vec<usize> = (0..r).collect();
    let ones_mask = vec![true; r];
    let (topk_set, softmax_w, prune_mask_m, final_w) = match cfg.mode {
        GateMode::Dense => {
            let w = stable_softmax(&s)?;
            (all, w, ones_mask, vec![1.0; r])
        }
        GateMode::SelfRaw => {
            let w = stable_softmax(&s)?;
            let final_w = if cfg.raw_scores_as_weights { s.clone() } else { w.clone() };
            (all, w, ones_mask, final_w)
        }
        GateMode::SelfSparse => {
            let masked = apply_budget(&s, cfg.budget_k)?;
            let kept = masked
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != NEG_INF)
                .map(|(i, _)| i)
                .collect();
            let w = gate_weights(&masked, cfg.tau)?;
            let final_w = w.clone();
            (kept, w, ones_mask, final_w)
        }
        GateMode::SelfAdaptive => {
            let masked = apply_budget(&s, cfg.budget_k)?;
            let kept = masked
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != NEG_INF)
                .map(|(i, _)| i)
                .collect();
            let w = gate_weights(&masked, cfg.tau)?;
            // Pruning compares against the pre-budget scores, so a unit the
            // budget already dropped still records its mask bit honestly.
            let (final_w, mask) = prune(&w, &s, cfg.delta);
            (kept, w, mask, final_w)
        }
        GateMode::RouterLora | GateMode::RouterRank => unreachable!(),
    };

    Ok(GateTrace {
        activations_a: a,
        norm_n: n,
        raw_scores_s: s,
        topk_set,
        softmax_w,
        prune_mask_m,
        final_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keys_from_rows(rows: &[&[f64]]) -> DenseMatrix {
        let cols = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        DenseMatrix::from_vec(rows.len(), cols, data).unwrap()
    }

    fn cfg(mode: GateMode) -> GateConfig {
        GateConfig::new(mode)
    }

    #[test]
    fn raw_scores_known_values() {
        let keys = keys_from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let x = DenseVector::new(vec![3.0, 4.0]);
        let (a, n, s) = raw_scores(&keys, &x, 0.0).unwrap();
        assert_eq!(a, vec![3.0, 4.0]);
        assert_eq!(n, 5.0);
        assert!((s[0] - 0.6).abs() < 1e-15);
        assert!((s[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn raw_scores_zero_input_stays_finite() {
        let keys = keys_from_rows(&[&[1.0, 0.0]]);
        let x = DenseVector::new(vec![0.0, 0.0]);
        let (_, n, s) = raw_scores(&keys, &x, 1e-12).unwrap();
        assert!(n > 0.0);
        assert_eq!(s, vec![0.0]);
    }

    #[test]
    fn budget_masks_all_but_topk() {
        let masked = apply_budget(&[-0.3, -0.1], 1).unwrap();
        assert_eq!(masked, vec![NEG_INF, -0.1]);
    }

    #[test]
    fn gate_weights_known_values() {
        let w = gate_weights(&[0.6, 0.8], 0.1).unwrap();
        assert!((w[0] - 0.119203).abs() < 1e-5);
        assert!((w[1] - 0.880797).abs() < 1e-5);
    }

    #[test]
    fn gate_weights_flatten_as_tau_grows() {
        let sharp = gate_weights(&[0.6, 0.8], 0.1).unwrap();
        let flat = gate_weights(&[0.6, 0.8], 10.0).unwrap();
        assert!(flat[0] > sharp[0]);
        assert!((flat[0] - 0.5).abs() < 0.01);
    }

    #[test]
    fn prune_known_values() {
        let (w, m) = prune(&[0.6, 0.4], &[0.5, 0.1], 0.2);
        assert_eq!(w, vec![0.6, 0.0]);
        assert_eq!(m, vec![true, false]);
    }

    #[test]
    fn prune_at_zero_delta_still_drops_negative_scores() {
        let (w, m) = prune(&[0.7, 0.3], &[0.5, -0.2], 0.0);
        assert_eq!(w, vec![0.7, 0.0]);
        assert_eq!(m, vec![true, false]);
    }

    #[test]
    fn pipeline_composes_the_steps() {
        let keys = keys_from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let x = DenseVector::new(vec![3.0, 4.0]);
        let mut c = cfg(GateMode::SelfAdaptive);
        c.budget_k = 2;
        let trace = gate_pipeline(&keys, &x, &c).unwrap();

        assert_eq!(trace.activations_a, vec![3.0, 4.0, -3.0]);
        assert!((trace.norm_n - 34.0f64.sqrt()).abs() < 1e-9);
        assert_eq!(trace.topk_set, vec![0, 1]);
        // Normalization runs over all three activations, so the scores are
        // [3,4,-3]/sqrt(34) and the tempered softmax lands at ~0.153/0.847.
        assert!((trace.final_w[0] - 0.152518).abs() < 1e-4);
        assert!((trace.final_w[1] - 0.847482).abs() < 1e-4);
        assert_eq!(trace.final_w[2], 0.0);
        assert_eq!(trace.prune_mask_m, vec![true, true, false]);
    }

    #[test]
    fn single_aligned_unit_gets_full_weight() {
        let keys = keys_from_rows(&[&[1.0, 0.0]]);
        let x = DenseVector::new(vec![2.0, 0.0]);
        let trace = gate_pipeline(&keys, &x, &cfg(GateMode::SelfAdaptive)).unwrap();
        assert_eq!(trace.final_w, vec![1.0]);
    }

    #[test]
    fn all_pruned_yields_zero_weights_not_an_error() {
        let keys = keys_from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let x = DenseVector::new(vec![-3.0, -4.0]);
        let trace = gate_pipeline(&keys, &x, &cfg(GateMode::SelfAdaptive)).unwrap();
        assert_eq!(trace.final_w, vec![0.0, 0.0]);
        assert!(trace.support().is_empty());
    }

    #[test]
    fn self_raw_ignores_the_budget() {
        let keys = keys_from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let x = DenseVector::new(vec![1.0, 2.0]);
        let mut c = cfg(GateMode::SelfRaw);
        c.budget_k = 1;
        let trace = gate_pipeline(&keys, &x, &c).unwrap();
        assert_eq!(trace.support().len(), 3);
        assert!((trace.final_w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn self_raw_direct_variant_uses_scores_verbatim() {
        let keys = keys_from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let x = DenseVector::new(vec![1.0, 2.0]);
        let mut c = cfg(GateMode::SelfRaw);
        c.raw_scores_as_weights = true;
        let trace = gate_pipeline(&keys, &x, &c).unwrap();
        assert_eq!(trace.final_w, trace.raw_scores_s);
    }

    #[test]
    fn dense_mode_weights_everything() {
        let keys = keys_from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let x = DenseVector::new(vec![-1.0, 5.0]);
        let trace = gate_pipeline(&keys, &x, &cfg(GateMode::Dense)).unwrap();
        assert_eq!(trace.final_w, vec![1.0, 1.0]);
    }

    #[test]
    fn router_modes_are_rejected() {
        let keys = keys_from_rows(&[&[1.0, 0.0]]);
        let x = DenseVector::new(vec![1.0, 0.0]);
        let err = gate_pipeline(&keys, &x, &cfg(GateMode::RouterLora)).unwrap_err();
        assert!(matches!(err, MoraError::WrongMode(GateMode::RouterLora)));
    }

    #[test]
    fn empty_pool_yields_empty_trace() {
        let keys = DenseMatrix::zeros(0, 4);
        let x = DenseVector::new(vec![1.0; 4]);
        let trace = gate_pipeline(&keys, &x, &cfg(GateMode::SelfAdaptive)).unwrap();
        assert_eq!(trace.num_units(), 0);
        assert!((trace.norm_n - 1e-6).abs() < 1e-9);
    }

    fn random_case(seed: u64, r: usize, d: usize) -> (DenseMatrix, DenseVector) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let keys = DenseMatrix::from_vec(
            r,
            d,
            (0..r * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let x = DenseVector::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        (keys, x)
    }

    proptest! {
        #[test]
        fn sparsity_and_mass_bounds(seed in any::<u64>(), r in 1usize..24, k in 1usize..24,
                                    adaptive in any::<bool>()) {
            let (keys, x) = random_case(seed, r, 6);
            let mut c = cfg(if adaptive { GateMode::SelfAdaptive } else { GateMode::SelfSparse });
            c.budget_k = k;
            let trace = gate_pipeline(&keys, &x, &c).unwrap();
            prop_assert!(trace.support().len() <= k);
            let mass: f64 = trace.final_w.iter().sum();
            prop_assert!(mass <= 1.0 + 1e-9);
            let pruned_any = trace
                .topk_set
                .iter()
                .any(|&i| !trace.prune_mask_m[i]);
            if !pruned_any {
                prop_assert!((mass - 1.0).abs() <= 1e-9);
            } else {
                prop_assert!(mass < 1.0);
            }
        }

        #[test]
        fn argmax_is_preserved(seed in any::<u64>(), r in 2usize..24) {
            let (keys, x) = random_case(seed, r, 6);
            let mut c = cfg(GateMode::SelfAdaptive);
            c.budget_k = 1 + (seed as usize) % r;
            let trace = gate_pipeline(&keys, &x, &c).unwrap();
            if let Some(best_w) = (0..r).max_by(|&a, &b| {
                trace.final_w[a].partial_cmp(&trace.final_w[b]).unwrap()
            }) {
                if trace.final_w[best_w] > 0.0 {
                    let best_s = (0..r)
                        .max_by(|&a, &b| {
                            trace.raw_scores_s[a].partial_cmp(&trace.raw_scores_s[b]).unwrap()
                        })
                        .unwrap();
                    prop_assert_eq!(best_w, best_s);
                }
            }
        }

        #[test]
        fn scores_ignore_input_scale(seed in any::<u64>(), r in 1usize..16, c in 0.1f64..10.0) {
            let (keys, x) = random_case(seed, r, 6);
            prop_assume!(x.data.iter().map(|v| v * v).sum::<f64>() > 1e-2);
            let (_, _, s1) = raw_scores(&keys, &x, 1e-12).unwrap();
            let scaled = DenseVector::new(x.data.iter().map(|v| v * c).collect());
            let (_, _, s2) = raw_scores(&keys, &scaled, 1e-12).unwrap();
            for (a, b) in s1.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn gate_is_permutation_equivariant(seed in any::<u64>(), r in 2usize..12) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (keys, x) = random_case(seed, r, 6);
            let mut c = cfg(GateMode::SelfAdaptive);
            c.budget_k = 1 + (seed as usize) % r;
            let base = gate_pipeline(&keys, &x, &c).unwrap();

            // Skip degenerate score ties; the tie-break is index-dependent.
            let mut sorted = base.raw_scores_s.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assume!(sorted.windows(2).all(|w| (w[1] - w[0]).abs() > 1e-12));

            let mut perm: Vec<usize> = (0..r).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
            perm.shuffle(&mut rng);
            let mut pdata = Vec::with_capacity(r * keys.cols);
            for &i in &perm {
                pdata.extend_from_slice(keys.row(i));
            }
            let pkeys = DenseMatrix::from_vec(r, keys.cols, pdata).unwrap();
            let permuted = gate_pipeline(&pkeys, &x, &c).unwrap();

            for (new_idx, &old_idx) in perm.iter().enumerate() {
                prop_assert!((permuted.final_w[new_idx] - base.final_w[old_idx]).abs() < 1e-12);
                prop_assert!((permuted.raw_scores_s[new_idx] - base.raw_scores_s[old_idx]).abs() < 1e-12);
                prop_assert_eq!(permuted.prune_mask_m[new_idx], base.prune_mask_m[old_idx]);
            }
            let mut remapped: Vec<usize> = base.topk_set.iter()
                .map(|&old| perm.iter().position(|&p| p == old).unwrap())
                .collect();
            remapped.sort_unstable();
            prop_assert_eq!(remapped, permuted.topk_set.clone());
        }
    }
}

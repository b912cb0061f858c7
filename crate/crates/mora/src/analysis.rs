//! Post-hoc inspection of trained models: which units fire, how concentrated
//! the gate mass is, and how much capacity later tasks borrow from earlier
//! ones. Everything here is read-only over a model and a task stream.

use crate::numerics::DenseVector;
use crate::taskgen::{test_split, TaskSpec, TaskStream};
use crate::trainer::ToyModel;
use crate::{MoraError, Result};

/// Per-unit activation statistics over a set of evaluation samples.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitStat {
    /// Position in the layer's pool.
    pub index: usize,
    /// Task during which the unit was grown.
    pub task_id: usize,
    /// Mean |mixing weight| over the samples.
    pub mean_abs_weight: f64,
    /// Fraction of samples where the unit's weight was nonzero.
    pub activation_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub layer: usize,
    pub samples: usize,
    pub units: Vec<UnitStat>,
}

/// Mean |mixing weight| per unit for one task's held-out split,
/// indexed `[layer][unit]`.
pub fn mean_gate_mass(model: &ToyModel, task: &TaskSpec) -> Result<Vec<Vec<f64>>> {
    let (xs, _) = test_split(task)?;
    if xs.is_empty() {
        return Err(MoraError::EmptyDataset("test split"));
    }
    let mut mass: Vec<Vec<f64>> = model
        .trunk
        .iter()
        .map(|l| vec![0.0; l.pool.len()])
        .collect();
    for x in &xs {
        let rec = model.forward(x)?;
        for (l, trace) in rec.traces.iter().enumerate() {
            for (m, w) in mass[l].iter_mut().zip(trace.unit_weights()) {
                *m += w.abs();
            }
        }
    }
    let n = xs.len() as f64;
    for layer in mass.iter_mut() {
        for m in layer.iter_mut() {
            *m /= n;
        }
    }
    Ok(mass)
}

/// Activation statistics pooled over every task's held-out split.
pub fn activation_profile(model: &ToyModel, tasks: &[TaskSpec]) -> Result<Vec<LayerProfile>> {
    if tasks.is_empty() {
        return Err(MoraError::EmptyDataset("task list"));
    }
    let mut sum_abs: Vec<Vec<f64>> = model
        .trunk
        .iter()
        .map(|l| vec![0.0; l.pool.len()])
        .collect();
    let mut hits: Vec<Vec<usize>> = model
        .trunk
        .iter()
        .map(|l| vec![0usize; l.pool.len()])
        .collect();
    let mut samples = 0usize;
    for task in tasks {
        let (xs, _) = test_split(task)?;
        samples += xs.len();
        for x in &xs {
            let rec = model.forward(x)?;
            for (l, trace) in rec.traces.iter().enumerate() {
                for (u, &w) in trace.unit_weights().iter().enumerate() {
                    sum_abs[l][u] += w.abs();
                    if w != 0.0 {
                        hits[l][u] += 1;
                    }
                }
            }
        }
    }
    if samples == 0 {
        return Err(MoraError::EmptyDataset("evaluation samples"));
    }
    Ok(model
        .trunk
        .iter()
        .enumerate()
        .map(|(l, layer)| LayerProfile {
            layer: l,
            samples,
            units: layer
                .pool
                .units
                .iter()
                .enumerate()
                .map(|(u, unit)| UnitStat {
                    index: u,
                    task_id: unit.task_id,
                    mean_abs_weight: sum_abs[l][u] / samples as f64,
                    activation_rate: hits[l][u] as f64 / samples as f64,
                })
                .collect(),
        })
        .collect())
}

/// Smallest number of units whose combined |weight| reaches `fraction` of
/// the total. Zero total mass needs zero units.
pub fn coverage_count(weights: &[f64], fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MoraError::InvalidConfig(format!(
            "coverage fraction must be in (0, 1], got {fraction}"
        )));
    }
    let total: f64 = weights.iter().map(|w| w.abs()).sum();
    if total == 0.0 {
        return Ok(0);
    }
    let mut sorted: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let target = fraction * total;
    let mut acc = 0.0;
    for (i, w) in sorted.iter().enumerate() {
        acc += w;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    Ok(sorted.len())
}

/// Shannon entropy of the weight distribution, normalized to [0, 1] by the
/// maximum possible entropy for the vector's length. Zero mass and
/// single-unit vectors score 0.
pub fn gate_entropy(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().map(|w| w.abs()).sum();
    if total == 0.0 || weights.len() < 2 {
        return 0.0;
    }
    let mut h = 0.0;
    for w in weights {
        let p = w.abs() / total;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h / (weights.len() as f64).ln()
}

/// `reuse[t][s]`: of the gate mass task t+1's evaluation places on adapter
/// units, the share carried by units grown during task s+1. Rows sum to 1
/// unless the row's task activates nothing at all.
pub fn reuse_matrix(model: &ToyModel, stream: &TaskStream) -> Result<Vec<Vec<f64>>> {
    let t = stream.tasks.len();
    let mut reuse = vec![vec![0.0; t]; t];
    for (row, task) in stream.tasks.iter().enumerate() {
        let mass = mean_gate_mass(model, task)?;
        let mut per_source = vec![0.0; t];
        for (l, layer) in model.trunk.iter().enumerate() {
            for (u, unit) in layer.pool.units.iter().enumerate() {
                if unit.task_id >= 1 && unit.task_id <= t {
                    per_source[unit.task_id - 1] += mass[l][u];
                }
            }
        }
        let total: f64 = per_source.iter().sum();
        if total > 0.0 {
            for (out, v) in reuse[row].iter_mut().zip(&per_source) {
                *out = v / total;
            }
        }
    }
    Ok(reuse)
}

/// Convenience wrapper: entropy of each layer's gate weights for one input.
pub fn per_layer_entropy(model: &ToyModel, x: &DenseVector) -> Result<Vec<f64>> {
    let rec = model.forward(x)?;
    Ok(rec
        .traces
        .iter()
        .map(|t| gate_entropy(t.unit_weights()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RunConfig, RunMode};
    use crate::gate::{gate_weights, GateMode};
    use crate::taskgen::make_stream;
    use crate::trainer::{continual_run, pretrain_base};
    use rand::{Rng, SeedableRng};

    fn trained_tiny(mode: RunMode, shift: f64) -> (RunConfig, crate::trainer::RunOutcome) {
        let mut cfg = RunConfig::default();
        cfg.mode = mode;
        cfg.stream.tasks = 2;
        cfg.stream.train_size = 128;
        cfg.stream.test_size = 48;
        cfg.stream.shift_strength = shift;
        cfg.train.iters_per_task = 60;
        cfg.train.pretrain_iters = 120;
        cfg.adapter.r_per_task = 8;
        cfg.gate.budget_k = 4;
        let trunk = pretrain_base(&cfg).unwrap().trunk;
        let out = continual_run(&cfg, trunk).unwrap();
        (cfg, out)
    }

    #[test]
    fn coverage_of_zero_mass_is_zero() {
        assert_eq!(coverage_count(&[0.0, 0.0, 0.0], 0.99).unwrap(), 0);
    }

    #[test]
    fn coverage_of_uniform_mass_is_proportional() {
        let w = vec![0.25; 16];
        assert_eq!(coverage_count(&w, 0.99).unwrap(), 16);
        let w = vec![1.0; 4];
        assert_eq!(coverage_count(&w, 0.5).unwrap(), 2);
        assert_eq!(coverage_count(&[5.0], 1.0).unwrap(), 1);
    }

    #[test]
    fn coverage_rejects_bad_fractions() {
        assert!(coverage_count(&[1.0], 0.0).is_err());
        assert!(coverage_count(&[1.0], 1.5).is_err());
    }

    // The greedy count is optimal: taking the largest weights first minimizes
    // the number needed. Check the defining property on random vectors.
    #[test]
    fn coverage_is_the_minimal_prefix_on_random_profiles() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.gen_range(1..12);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let f = rng.gen_range(0.05..1.0);
            let c = coverage_count(&w, f).unwrap();
            let total: f64 = w.iter().sum();
            if total == 0.0 {
                assert_eq!(c, 0);
                continue;
            }
            let mut sorted = w.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let top: f64 = sorted[..c].iter().sum();
            assert!(top >= f * total - 1e-12);
            if c > 0 {
                let below: f64 = sorted[..c - 1].iter().sum();
                assert!(below < f * total);
            }
        }
    }

    #[test]
    fn entropy_endpoints() {
        assert_eq!(gate_entropy(&[0.0, 0.0]), 0.0);
        assert_eq!(gate_entropy(&[3.0]), 0.0);
        assert!((gate_entropy(&[1.0, 0.0, 0.0]) - 0.0).abs() < 1e-12);
        assert!((gate_entropy(&[0.5, 0.5, 0.5, 0.5]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let scores = vec![0.9, 0.4, 0.1, -0.2, 0.05];
        let mut last = -1.0;
        for tau in [0.001, 0.01, 0.1, 1.0, 10.0] {
            let w = gate_weights(&scores, tau).unwrap();
            let h = gate_entropy(&w);
            assert!(
                h >= last - 1e-12,
                "entropy decreased at tau {tau}: {h} < {last}"
            );
            last = h;
        }
    }

    #[test]
    fn profile_covers_every_unit_and_tags_tasks() {
        let (cfg, out) = trained_tiny(RunMode::SelfAdaptive, 1.0);
        let stream = make_stream(&cfg.stream, cfg.seed).unwrap();
        let profile = activation_profile(&out.model, &stream.tasks).unwrap();
        assert_eq!(profile.len(), cfg.model.trunk_layers);
        for lp in &profile {
            assert_eq!(lp.units.len(), 2 * cfg.adapter.r_per_task);
            assert_eq!(lp.samples, 2 * cfg.stream.test_size);
            for (u, stat) in lp.units.iter().enumerate() {
                assert_eq!(stat.index, u);
                assert_eq!(stat.task_id, if u < 8 { 1 } else { 2 });
                assert!(stat.mean_abs_weight >= 0.0);
                assert!((0.0..=1.0).contains(&stat.activation_rate));
            }
        }
    }

    #[test]
    fn reuse_rows_are_distributions() {
        let (cfg, out) = trained_tiny(RunMode::SelfAdaptive, 1.0);
        let stream = make_stream(&cfg.stream, cfg.seed).unwrap();
        let reuse = reuse_matrix(&out.model, &stream).unwrap();
        assert_eq!(reuse.len(), 2);
        for row in &reuse {
            let sum: f64 = row.iter().sum();
            assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-9, "row sum {sum}");
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    // With no distribution shift, every task looks alike, so later tasks
    // keep activating the units grown earlier.
    #[test]
    fn identical_tasks_reuse_old_units()
    {
        let (_, out) = trained_tiny(RunMode::SelfAdaptive, 0.0);
        let cfg = {
            let mut c = RunConfig::default();
            c.stream.tasks = 2;
            c.stream.train_size = 128;
            c.stream.test_size = 48;
            c.stream.shift_strength = 0.0;
            c
        };
        let stream = make_stream(&cfg.stream, cfg.seed).unwrap();
        let reuse = reuse_matrix(&out.model, &stream).unwrap();
        assert!(
            reuse[1][0] > 0.05,
            "task 2 ignores task 1 units entirely: {:?}",
            reuse[1]
        );
    }

    #[test]
    fn per_layer_entropy_matches_mode() {
        let (_, out) = trained_tiny(RunMode::IncLora, 1.0);
        let x = DenseVector::new(vec![0.1; 32]);
        let hs = per_layer_entropy(&out.model, &x).unwrap();
        // Dense mixing weights are all ones: maximal entropy at every layer.
        for h in hs {
            assert!((h - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.model.trunk[0].cfg.mode, GateMode::Dense);
    }
}

//! Synthetic class-incremental task streams.
//!
//! Every task is a Gaussian-prototype classification problem in the same
//! input space. Prototypes split their energy between a subspace shared by
//! the whole stream and a task-private complement, and each task applies its
//! own orthogonal rotation as a domain shift. `shift_strength = 0` makes
//! every rotation the exact identity, which collapses the stream to a single
//! domain and is the degenerate case used to study rank reuse.
//!
//! All sampling is seeded. Train and test draws come from separate seed
//! streams derived from the task seed, so a fixed held-out split can never
//! leak into training batches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{DenseMatrix, DenseVector};
use crate::{MoraError, Result};

pub const TAG_SHARED: u64 = 1;
pub const TAG_PROTO: u64 = 2;
pub const TAG_ROTATION: u64 = 3;
pub const TAG_TRAIN: u64 = 4;
pub const TAG_TEST: u64 = 5;
pub const TAG_GROW: u64 = 6;
pub const TAG_PRETRAIN: u64 = 7;
pub const TAG_INIT: u64 = 8;
pub const TAG_BATCH: u64 = 9;

/// SplitMix64-style mixer. One master seed fans out into independent
/// deterministic streams keyed by (tag, index).
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        ^ tag.wrapping_mul(0x9e3779b97f4a7c15)
        ^ index.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, tag: u64, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

/// Stream geometry and sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    /// Dimension of the subspace every task's prototypes lean on.
    pub shared_dim: usize,
    /// Fraction of each prototype's squared norm inside the shared subspace.
    pub shared_fraction: f64,
    pub noise_sigma: f64,
    /// 0 disables the per-task rotations entirely.
    pub shift_strength: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes_per_task: 4,
            input_dim: 32,
            shared_dim: 8,
            shared_fraction: 0.5,
            noise_sigma: 0.1,
            shift_strength: 1.0,
            train_size: 512,
            test_size: 200,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.classes_per_task < 2 || self.input_dim == 0 {
            return Err(MoraError::InvalidConfig(
                "stream needs at least 1 task, 2 classes, and a positive input_dim".into(),
            ));
        }
        if self.shared_dim > self.input_dim {
            return Err(MoraError::InvalidConfig(format!(
                "shared_dim {} exceeds input_dim {}",
                self.shared_dim, self.input_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(MoraError::InvalidConfig(format!(
                "shared_fraction must lie in [0, 1], got {}",
                self.shared_fraction
            )));
        }
        if self.shared_dim == 0 && self.shared_fraction > 0.0 {
            return Err(MoraError::InvalidConfig(
                "shared_fraction must be 0 when shared_dim is 0".into(),
            ));
        }
        if self.shared_dim == self.input_dim && self.shared_fraction < 1.0 {
            return Err(MoraError::InvalidConfig(
                "a full-dimensional shared subspace leaves no room for private components".into(),
            ));
        }
        if self.noise_sigma < 0.0 || self.shift_strength < 0.0 {
            return Err(MoraError::InvalidConfig(
                "noise_sigma and shift_strength must be non-negative".into(),
            ));
        }
        if self.test_size == 0 || self.train_size == 0 {
            return Err(MoraError::InvalidConfig(
                "train_size and test_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One task: unit-norm class prototypes, a noise level, and a domain rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// 1-based position in the stream.
    pub task_id: usize,
    /// First global class id of this task's block.
    pub class_base: usize,
    pub class_prototypes: Vec<DenseVector>,
    pub noise_sigma: f64,
    /// Orthogonal domain shift applied to prototype plus noise.
    pub rotation: DenseMatrix,
    /// Master seed for this task's sampling streams.
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        self.class_prototypes.len()
    }
}

/// The full stream plus the shared-subspace basis its prototypes lean on.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub seed: u64,
    /// Orthonormal basis, input_dim rows by shared_dim columns.
    pub shared_subspace: DenseMatrix,
    pub tasks: Vec<TaskSpec>,
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Modified Gram-Schmidt with a second pass, columns of `m` in place.
fn orthonormalize_columns(m: &mut DenseMatrix) {
    let (rows, cols) = (m.rows, m.cols);
    let col = |m: &DenseMatrix, c: usize| -> Vec<f64> {
        (0..rows).map(|r| m.get(r, c)).collect()
    };
    for c in 0..cols {
        let mut v = col(m, c);
        for _pass in 0..2 {
            for prev in 0..c {
                let p = col(m, prev);
                let proj: f64 = v.iter().zip(&p).map(|(a, b)| a * b).sum();
                for (vi, pi) in v.iter_mut().zip(&p) {
                    *vi -= proj * pi;
                }
            }
        }
        normalize(&mut v);
        for r in 0..rows {
            m.set(r, c, v[r]);
        }
    }
}

/// Orthogonal matrix interpolating between the identity (`strength = 0`) and
/// a fully random rotation (large `strength`).
fn make_rotation(d: usize, strength: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut m = DenseMatrix::identity(d);
    // Draw the perturbation unconditionally so the rng stream does not
    // depend on the strength value.
    let noise = standard_normal_vec(rng, d * d);
    if strength > 0.0 {
        let scale = strength / (d as f64).sqrt();
        for (v, g) in m.data.iter_mut().zip(&noise) {
            *v += scale * g;
        }
    }
    orthonormalize_columns(&mut m);
    m
}

/// Unit vector inside the span of `basis`'s columns.
fn sample_in_subspace(basis: &DenseMatrix, rng: &mut ChaCha8Rng) -> DenseVector {
    let mut coef = standard_normal_vec(rng, basis.cols);
    normalize(&mut coef);
    let mut out = vec![0.0; basis.rows];
    for (c, w) in coef.iter().enumerate() {
        for r in 0..basis.rows {
            out[r] += w * basis.get(r, c);
        }
    }
    DenseVector::new(out)
}

/// Unit vector orthogonal to every column of `basis`.
fn sample_in_complement(basis: &DenseMatrix, rng: &mut ChaCha8Rng) -> DenseVector {
    let mut v = standard_normal_vec(rng, basis.rows);
    for _pass in 0..2 {
        for c in 0..basis.cols {
            let proj: f64 = (0..basis.rows).map(|r| v[r] * basis.get(r, c)).sum();
            for r in 0..basis.rows {
                v[r] -= proj * basis.get(r, c);
            }
        }
    }
    normalize(&mut v);
    DenseVector::new(v)
}

/// Builds the deterministic task stream for `(cfg, seed)`.
pub fn make_stream(cfg: &StreamConfig, seed: u64) -> Result<TaskStream> {
    cfg.validate()?;
    let d = cfg.input_dim;

    let mut shared = DenseMatrix::zeros(d, cfg.shared_dim);
    if cfg.shared_dim > 0 {
        let mut rng = rng_for(seed, TAG_SHARED, 0);
        shared.data = standard_normal_vec(&mut rng, d * cfg.shared_dim);
        orthonormalize_columns(&mut shared);
    }

    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 1..=cfg.tasks {
        let mut proto_rng = rng_for(seed, TAG_PROTO, t as u64);
        let mut prototypes = Vec::with_capacity(cfg.classes_per_task);
        for _ in 0..cfg.classes_per_task {
            let mut p = DenseVector::zeros(d);
            if cfg.shared_fraction > 0.0 {
                let u = sample_in_subspace(&shared, &mut proto_rng);
                p.axpy(cfg.shared_fraction.sqrt(), &u)?;
            }
            if cfg.shared_fraction < 1.0 {
                let v = sample_in_complement(&shared, &mut proto_rng);
                p.axpy((1.0 - cfg.shared_fraction).sqrt(), &v)?;
            }
            prototypes.push(p);
        }

        let mut rot_rng = rng_for(seed, TAG_ROTATION, t as u64);
        let rotation = make_rotation(d, cfg.shift_strength, &mut rot_rng);

        tasks.push(TaskSpec {
            task_id: t,
            class_base: (t - 1) * cfg.classes_per_task,
            class_prototypes: prototypes,
            noise_sigma: cfg.noise_sigma,
            rotation,
            seed: derive_seed(seed, TAG_TRAIN, t as u64),
            train_size: cfg.train_size,
            test_size: cfg.test_size,
        });
    }

    Ok(TaskStream {
        config: cfg.clone(),
        seed,
        shared_subspace: shared,
        tasks,
    })
}

/// Draws `n` labeled samples: uniform label, then
/// `x = rotation * (prototype[label] + sigma * gaussian)`.
pub fn sample_batch(
    task: &TaskSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DenseVector>, Vec<usize>)> {
    let d = task.rotation.rows;
    let mut xs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..task.num_classes());
        let mut raw = task.class_prototypes[label].clone();
        let noise = standard_normal_vec(rng, d);
        for (r, g) in raw.data.iter_mut().zip(&noise) {
            *r += task.noise_sigma * g;
        }
        xs.push(task.rotation.matvec(&raw)?);
        labels.push(label);
    }
    Ok((xs, labels))
}

/// Fixed training split, `task.train_size` samples.
pub fn train_split(task: &TaskSpec) -> Result<(Vec<DenseVector>, Vec<usize>)> {
    let mut rng = rng_for(task.seed, TAG_TRAIN, 0);
    sample_batch(task, task.train_size, &mut rng)
}

/// Fixed held-out split, `task.test_size` samples, from a seed stream
/// independent of the training draws.
pub fn test_split(task: &TaskSpec) -> Result<(Vec<DenseVector>, Vec<usize>)> {
    let mut rng = rng_for(task.seed, TAG_TEST, 0);
    sample_batch(task, task.test_size, &mut rng)
}

/// Accuracy of classifying by the nearest rotated prototype. Data sanity
/// oracle: with noise well below the prototype gaps this should be ~1.
pub fn nearest_prototype_accuracy(task: &TaskSpec, xs: &[DenseVector], labels: &[usize]) -> Result<f64> {
    if xs.is_empty() {
        return Err(MoraError::EmptyDataset("nearest_prototype_accuracy"));
    }
    let rotated: Vec<DenseVector> = task
        .class_prototypes
        .iter()
        .map(|p| task.rotation.matvec(p))
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    for (x, &label) in xs.iter().zip(labels) {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, p) in rotated.iter().enumerate() {
            let dist: f64 = x
                .data
                .iter()
                .zip(&p.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / xs.len() as f64)
}
